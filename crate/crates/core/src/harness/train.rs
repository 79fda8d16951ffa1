use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::config::ModelConfig;
use crate::harness::model::Model;
use crate::harness::optim::Adam;
use crate::harness::task::{Batch, Split, Targets};
use crate::tensor::{Rng, Tape};

pub const METRICS_HEADER: &str = "step,task_loss,aux_loss,total_loss,util_entropy";

const EVAL_CHUNK: usize = 250;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub task_loss: f64,
    /// Mean load-balance loss over routed layers, before the coefficient.
    pub aux_loss: f64,
    pub total_loss: f64,
    /// Tokens per expert, one row per routed layer.
    pub utilization: Vec<Vec<usize>>,
    /// Mean over layers of the entropy (nats) of the routing histogram.
    pub util_entropy: f64,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step, self.task_loss, self.aux_loss, self.total_loss, self.util_entropy
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub samples: usize,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub mse: Option<f64>,
    pub utilization: Vec<Vec<usize>>,
}

impl EvalMetrics {
    /// Accuracy for classification, negated MSE for regression.
    pub fn score(&self) -> f64 {
        self.accuracy.or(self.mse.map(|m| -m)).unwrap_or(f64::NAN)
    }
}

pub fn histogram_entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// Owns a model, its optimizer state and the data/noise streams.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: Model,
    optimizer: Adam,
    data_rng: Rng,
    noise_rng: Rng,
    step: usize,
}

impl Trainer {
    pub fn new(model: Model) -> Self {
        let root = Rng::new(model.config().seed);
        let optimizer = Adam::new(&model.config().optimizer, model.params());
        Self {
            optimizer,
            data_rng: root.fork("data"),
            noise_rng: root.fork("noise"),
            model,
            step: 0,
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model {
        &mut self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Next training batch from the seeded data stream.
    pub fn next_batch(&mut self) -> Batch {
        let n = self.model.config().optimizer.batch_size;
        self.model.task().generate_task_batch(&mut self.data_rng, n)
    }

    /// Forward, backward and one optimizer update on `batch`.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepMetrics> {
        let mut tape = Tape::new();
        let vars = self.model.bind(&mut tape);
        let pass = self
            .model
            .forward(&mut tape, &vars, batch, &mut self.noise_rng, true)?;
        let total = tape.value(pass.total_loss).data()[0];
        if !total.is_finite() {
            return Err(Error::Divergence { step: self.step });
        }
        tape.backward(pass.total_loss)?;
        let grads: Vec<Vec<f64>> = vars
            .iter()
            .map(|&v| match tape.grad(v) {
                Some(g) => g.to_vec(),
                None => vec![0.0; tape.value(v).numel()],
            })
            .collect();
        self.optimizer
            .step(self.model.params_mut(), &grads, self.step);
        let utilization: Vec<Vec<usize>> = pass.decisions.iter().map(|d| d.expert_counts()).collect();
        let util_entropy = if utilization.is_empty() {
            0.0
        } else {
            utilization.iter().map(|c| histogram_entropy(c)).sum::<f64>() / utilization.len() as f64
        };
        let metrics = StepMetrics {
            step: self.step,
            task_loss: tape.value(pass.task_loss).data()[0],
            aux_loss: pass.aux_loss.map_or(0.0, |a| tape.value(a).data()[0]),
            total_loss: total,
            utilization,
            util_entropy,
        };
        self.step += 1;
        Ok(metrics)
    }

    /// Runs `steps` updates on fresh batches, handing each step's metrics to `sink`.
    pub fn run(
        &mut self,
        steps: usize,
        mut sink: impl FnMut(&StepMetrics) -> Result<()>,
    ) -> Result<()> {
        for _ in 0..steps {
            let batch = self.next_batch();
            let m = self.train_step(&batch)?;
            sink(&m)?;
        }
        Ok(())
    }
}

/// Deterministic metrics over `n` fresh eval-split samples drawn from `seed`,
/// with gate noise disabled.
pub fn evaluate(model: &Model, n: usize, seed: u64) -> Result<EvalMetrics> {
    let mut rng = Rng::new(seed).fork("eval");
    let mut unused = Rng::new(0);
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut sq_err = 0.0;
    let mut utilization: Vec<Vec<usize>> = Vec::new();
    let mut done = 0;
    while done < n {
        let size = EVAL_CHUNK.min(n - done);
        let batch = model.task().sample(Split::Eval, &mut rng, size);
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let pass = model.forward(&mut tape, &vars, &batch, &mut unused, false)?;
        loss_sum += tape.value(pass.task_loss).data()[0] * size as f64;
        let out = tape.value(pass.output);
        match &batch.targets {
            Targets::Classes(y) => {
                for (i, &target) in y.iter().enumerate() {
                    let row = out.row(i);
                    let pred = crate::moe::top_k_indices(row, 1)[0];
                    correct += usize::from(pred == target);
                }
            }
            Targets::Values(y) => {
                for (i, &target) in y.iter().enumerate() {
                    sq_err += (out.row(i)[0] - target).powi(2);
                }
            }
        }
        for (layer, d) in pass.decisions.iter().enumerate() {
            let counts = d.expert_counts();
            if utilization.len() <= layer {
                utilization.push(vec![0; counts.len()]);
            }
            utilization[layer]
                .iter_mut()
                .zip(counts)
                .for_each(|(u, c)| *u += c);
        }
        done += size;
    }
    let classification = model.task().is_classification();
    Ok(EvalMetrics {
        samples: n,
        loss: loss_sum / n as f64,
        accuracy: classification.then(|| correct as f64 / n as f64),
        mse: (!classification).then(|| sq_err / n as f64),
        utilization,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<StepMetrics>,
    pub eval: EvalMetrics,
}

/// Builds a model from `cfg`, trains it for `cfg.optimizer.steps` steps and
/// evaluates it on `cfg.eval_samples` held-out samples.
pub fn run_training(
    cfg: &ModelConfig,
    mut sink: impl FnMut(&StepMetrics) -> Result<()>,
) -> Result<TrainOutcome> {
    let model = Model::from_config(cfg)?;
    let mut trainer = Trainer::new(model);
    let mut history = Vec::with_capacity(cfg.optimizer.steps);
    trainer.run(cfg.optimizer.steps, |m| {
        sink(m)?;
        history.push(m.clone());
        Ok(())
    })?;
    let model = trainer.into_model();
    let eval = evaluate(&model, cfg.eval_samples, cfg.seed)?;
    Ok(TrainOutcome {
        model,
        history,
        eval,
    })
}
