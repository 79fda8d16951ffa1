use std::time::{Duration, Instant};

use hypermoe_core::harness::{Batch, Model, ModelConfig, Split, Trainer};
use hypermoe_core::tensor::{Rng, Tape};
use hypermoe_core::{Error, Result};
use serde::Serialize;

use crate::method::Method;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Eval,
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Phase::Train),
            "eval" => Ok(Phase::Eval),
            other => Err(Error::Config(format!("unknown phase `{other}` (expected train or eval)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub method: String,
    pub phase: Phase,
    pub samples_per_second: f64,
    pub duration_secs: f64,
    /// Timed steps, warm-up excluded.
    pub steps: usize,
    pub batch_size: usize,
    pub config: ModelConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchSummary {
    pub reports: Vec<BenchReport>,
    /// Second method's throughput over the first's, when two are given.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct BenchOptions {
    pub phase: Phase,
    pub steps: usize,
    pub warmup: usize,
}

/// One method's timed workload: a trainer for the train phase, or a model
/// and a fixed eval batch for the eval phase.
#[allow(clippy::large_enum_variant)]
enum Runner {
    Train { trainer: Trainer },
    Eval { model: Model, batch: Batch },
}

impl Runner {
    fn new(cfg: &ModelConfig, phase: Phase) -> Result<Self> {
        let model = Model::from_config(cfg)?;
        Ok(match phase {
            Phase::Train => Runner::Train {
                trainer: Trainer::new(model),
            },
            Phase::Eval => {
                let mut rng = Rng::new(cfg.seed).fork("bench");
                let batch = model
                    .task()
                    .sample(Split::Eval, &mut rng, cfg.optimizer.batch_size);
                Runner::Eval { model, batch }
            }
        })
    }

    /// Runs one step and returns the time spent in it. Batch generation
    /// is excluded from the train timing.
    fn step(&mut self) -> Result<Duration> {
        match self {
            Runner::Train { trainer } => {
                let batch = trainer.next_batch();
                let start = Instant::now();
                trainer.train_step(&batch)?;
                Ok(start.elapsed())
            }
            Runner::Eval { model, batch } => {
                let start = Instant::now();
                let mut tape = Tape::new();
                let vars = model.bind(&mut tape);
                let pass = model.forward(&mut tape, &vars, batch, &mut Rng::new(0), false)?;
                std::hint::black_box(tape.value(pass.output));
                Ok(start.elapsed())
            }
        }
    }
}

/// Times `steps − warmup` steps per method at the config's batch size.
/// Methods are stepped round-robin so slow drifts in machine load hit
/// all of them alike.
pub fn run_bench(base: &ModelConfig, methods: &[Method], opts: BenchOptions) -> Result<BenchSummary> {
    if opts.warmup < 1 || opts.steps <= opts.warmup {
        return Err(Error::Config(format!(
            "bench needs steps > warmup >= 1, got steps {} and warmup {}",
            opts.steps, opts.warmup
        )));
    }
    if methods.is_empty() {
        return Err(Error::Config("bench needs at least one method".into()));
    }
    let configs: Vec<ModelConfig> = methods.iter().map(|m| m.apply(base)).collect();
    let mut runners = configs
        .iter()
        .map(|c| Runner::new(c, opts.phase))
        .collect::<Result<Vec<_>>>()?;
    let mut elapsed = vec![Duration::ZERO; runners.len()];
    for step in 0..opts.steps {
        for (runner, total) in runners.iter_mut().zip(&mut elapsed) {
            let t = runner.step()?;
            if step >= opts.warmup {
                *total += t;
            }
        }
    }
    let timed = opts.steps - opts.warmup;
    let reports: Vec<BenchReport> = methods
        .iter()
        .zip(configs)
        .zip(elapsed)
        .map(|((m, config), d)| {
            let secs = d.as_secs_f64().max(f64::MIN_POSITIVE);
            let batch_size = config.optimizer.batch_size;
            BenchReport {
                method: m.to_string(),
                phase: opts.phase,
                samples_per_second: (timed * batch_size) as f64 / secs,
                duration_secs: secs,
                steps: timed,
                batch_size,
                config,
            }
        })
        .collect();
    let ratio = (reports.len() == 2).then(|| reports[1].samples_per_second / reports[0].samples_per_second);
    Ok(BenchSummary { reports, ratio })
}
