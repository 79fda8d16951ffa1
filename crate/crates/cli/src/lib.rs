//! Command-line surface for training, evaluating, benchmarking and
//! inspecting HyperMoE toy models.

pub mod app;
pub mod bench;
pub mod commands;
pub mod method;

pub use app::{run, Cli, Command};
pub use bench::{run_bench, BenchOptions, BenchReport, BenchSummary, Phase};
pub use commands::{
    cmd_analyze_embeddings, cmd_compare, cmd_eval, cmd_gradcheck, cmd_train, load_config, Comparison,
    CompareRow, MethodSummary, TrainSummary,
};
pub use method::{parse_methods, Method};

use hypermoe_core::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;
pub const EXIT_INTEGRITY: u8 = 4;

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Parse { .. } | Error::DegenerateSelection { .. } => EXIT_CONFIG,
        Error::Integrity(_) | Error::Mismatch { .. } => EXIT_INTEGRITY,
        Error::Tensor(_) | Error::Divergence { .. } | Error::Io(_) => EXIT_RUNTIME,
    }
}
