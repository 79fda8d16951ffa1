use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, ValueEnum};
use hypermoe_core::harness::ModelConfig;
use hypermoe_core::{Error, Result};

use crate::bench::{run_bench, BenchOptions, Phase};
use crate::commands::{self, COMPARE_FILE};
use crate::method::{parse_methods, Method};
use crate::{EXIT_OK, EXIT_RUNTIME};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    /// Train a model, writing metrics.csv and model.ckpt into --out.
    Train,
    /// Evaluate a checkpoint on held-out samples.
    Eval,
    /// Time training or evaluation steps for one or two methods.
    Bench,
    /// Compare analytic and finite-difference gradients per parameter group.
    Gradcheck,
    /// Write expert and selection embedding distance matrices.
    AnalyzeEmbeddings,
    /// Train every (method, seed) pair and summarize eval metrics.
    Compare,
}

#[derive(Debug, Parser)]
#[command(name = "hypermoe", version, about = "HyperMoE toy-model trainer and diagnostics")]
pub struct Cli {
    pub command: Command,
    /// JSON model config; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Bench phase: train or eval.
    #[arg(long, default_value = "train")]
    pub phase: String,
    /// Training steps (train, compare) or total bench steps including warm-up.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Untimed bench steps.
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    /// Comma-separated method ids such as `moe,hypermoe@selected`.
    #[arg(long)]
    pub methods: Option<String>,
    /// Layer index for analyze-embeddings.
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    /// Checkpoint for eval and analyze-embeddings.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Comma-separated seeds for compare.
    #[arg(long)]
    pub seeds: Option<String>,
}

const DEFAULT_BENCH_STEPS: usize = 23;

impl Cli {
    fn base_config(&self) -> Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(path) => commands::load_config(path)?,
            None => ModelConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if self.command != Command::Bench {
            if let Some(steps) = self.steps {
                cfg.optimizer.steps = steps;
            }
        }
        Ok(cfg)
    }

    fn methods(&self) -> Result<Option<Vec<Method>>> {
        self.methods.as_deref().map(parse_methods).transpose()
    }

    fn checkpoint(&self) -> Result<&PathBuf> {
        self.checkpoint
            .as_ref()
            .ok_or_else(|| Error::Config("--checkpoint is required".into()))
    }

    fn seeds(&self, cfg: &ModelConfig) -> Result<Vec<u64>> {
        match &self.seeds {
            None => Ok(vec![cfg.seed]),
            Some(list) => list
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad seed `{s}` in --seeds")))
                })
                .collect(),
        }
    }
}

fn json_line(value: &impl serde::Serialize) -> String {
    serde_json::to_string(value).expect("report serializes")
}

/// Runs one subcommand, writing its report to `stdout`, and returns the
/// exit code for non-error outcomes.
pub fn run(cli: &Cli, stdout: &mut impl Write) -> Result<u8> {
    let base = cli.base_config()?;
    match cli.command {
        Command::Train => {
            let cfg = match cli.methods()?.as_deref() {
                None => base,
                Some([m]) => m.apply(&base),
                Some(_) => return Err(Error::Config("train takes a single method".into())),
            };
            let summary = commands::cmd_train(&cfg, &cli.out)?;
            writeln!(stdout, "{}", json_line(&summary))?;
        }
        Command::Eval => {
            let overrides = cli.config.is_some().then_some(&base);
            let metrics = commands::cmd_eval(cli.checkpoint()?, overrides, cli.seed)?;
            writeln!(stdout, "{}", json_line(&metrics))?;
        }
        Command::Bench => {
            let methods = cli
                .methods()?
                .unwrap_or_else(|| vec![Method::plain(base.layer_kind)]);
            let opts = BenchOptions {
                phase: cli.phase.parse::<Phase>()?,
                steps: cli.steps.unwrap_or(DEFAULT_BENCH_STEPS),
                warmup: cli.warmup,
            };
            let summary = run_bench(&base, &methods, opts)?;
            writeln!(stdout, "{}", json_line(&summary))?;
        }
        Command::Gradcheck => {
            let report = commands::cmd_gradcheck(&base)?;
            write!(stdout, "{}", commands::render_audit(&report))?;
            if !report.passed() {
                writeln!(stdout, "gradient check FAILED (tolerance {:e})", report.tolerance)?;
                return Ok(EXIT_RUNTIME);
            }
            writeln!(stdout, "gradient check passed (tolerance {:e})", report.tolerance)?;
        }
        Command::AnalyzeEmbeddings => {
            let dump = commands::cmd_analyze_embeddings(cli.checkpoint()?, cli.layer, &cli.out)?;
            writeln!(stdout, "{}", json_line(&dump))?;
        }
        Command::Compare => {
            let methods = cli
                .methods()?
                .unwrap_or_else(|| vec![Method::plain(base.layer_kind)]);
            let seeds = cli.seeds(&base)?;
            let comparison = commands::cmd_compare(&base, &methods, &seeds)?;
            std::fs::create_dir_all(&cli.out)?;
            std::fs::write(cli.out.join(COMPARE_FILE), comparison.to_csv())?;
            write!(stdout, "{}", comparison.render())?;
        }
    }
    Ok(EXIT_OK)
}
