use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use hypermoe_core::harness::{
    analyze_embeddings, evaluate, gradient_audit, load_checkpoint, load_checkpoint_with, run_training,
    save_checkpoint, AuditOptions, AuditReport, EmbeddingDump, EvalMetrics, ModelConfig, METRICS_HEADER,
};
use hypermoe_core::{Error, Result};
use rayon::prelude::*;
use serde::Serialize;

use crate::method::Method;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const COMPARE_FILE: &str = "compare.csv";

/// Reads a config file; an unreadable file counts as a config error.
pub fn load_config(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    ModelConfig::from_json(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub method: String,
    pub seed: u64,
    pub steps: usize,
    pub final_task_loss: Option<f64>,
    pub eval: EvalMetrics,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
}

/// Trains `cfg`, streaming the metrics CSV into `out` and saving the final
/// checkpoint next to it.
pub fn cmd_train(cfg: &ModelConfig, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let metrics = out.join(METRICS_FILE);
    let mut csv = BufWriter::new(File::create(&metrics)?);
    writeln!(csv, "{METRICS_HEADER}")?;
    let result = run_training(cfg, |m| {
        writeln!(csv, "{}", m.csv_row())?;
        Ok(())
    });
    csv.flush()?;
    let outcome = result?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    save_checkpoint(&outcome.model, outcome.history.len(), &checkpoint)?;
    Ok(TrainSummary {
        method: cfg.layer_kind.name().to_string(),
        seed: cfg.seed,
        steps: outcome.history.len(),
        final_task_loss: outcome.history.last().map(|m| m.task_loss),
        eval: outcome.eval,
        metrics,
        checkpoint,
    })
}

/// Evaluates a checkpoint, optionally rebuilt under a config override.
pub fn cmd_eval(
    checkpoint: &Path,
    config: Option<&ModelConfig>,
    seed: Option<u64>,
) -> Result<EvalMetrics> {
    let ck = match config {
        Some(cfg) => load_checkpoint_with(checkpoint, cfg)?,
        None => load_checkpoint(checkpoint)?,
    };
    let cfg = ck.model.config();
    evaluate(&ck.model, cfg.eval_samples, seed.unwrap_or(cfg.seed))
}

pub fn cmd_gradcheck(cfg: &ModelConfig) -> Result<AuditReport> {
    let model = hypermoe_core::harness::Model::from_config(cfg)?;
    gradient_audit(
        &model,
        &AuditOptions {
            seed: cfg.seed,
            ..AuditOptions::default()
        },
    )
}

pub fn render_audit(report: &AuditReport) -> String {
    let mut out = format!(
        "{:<18} {:>7} {:>8} {:>12}  {:<6} worst tensor\n",
        "group", "tensors", "scalars", "max_rel_err", "result"
    );
    for g in &report.groups {
        out.push_str(&format!(
            "{:<18} {:>7} {:>8} {:>12.3e}  {:<6} {}\n",
            g.group,
            g.tensors,
            g.scalars,
            g.max_rel_error,
            if g.passed { "pass" } else { "FAIL" },
            g.worst_tensor
        ));
    }
    out
}

/// Writes the expert and leave-one-out selection distance matrices of
/// `layer` into `out`.
pub fn cmd_analyze_embeddings(checkpoint: &Path, layer: usize, out: &Path) -> Result<EmbeddingDump> {
    let ck = load_checkpoint(checkpoint)?;
    let dump = analyze_embeddings(&ck.model, layer)?;
    dump.write(out)?;
    Ok(dump)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub method: String,
    pub seed: u64,
    pub eval: EvalMetrics,
}

impl CompareRow {
    pub fn score(&self) -> f64 {
        self.eval.score()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub runs: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    /// `accuracy` for classification tasks, `neg_mse` for regression.
    pub metric: &'static str,
    pub rows: Vec<CompareRow>,
    pub summary: Vec<MethodSummary>,
}

impl Comparison {
    pub fn summary_for(&self, method: &str) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,seed,loss,accuracy,mse\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.method,
                r.seed,
                r.eval.loss,
                opt(r.eval.accuracy),
                opt(r.eval.mse)
            ));
        }
        out
    }

    pub fn render(&self) -> String {
        let mut out = self.to_csv();
        out.push('\n');
        for s in &self.summary {
            out.push_str(&format!(
                "{:<24} {} {:.4} ± {:.4} (min {:.4}, max {:.4}, n={})\n",
                s.method, self.metric, s.mean, s.std, s.min, s.max, s.runs
            ));
        }
        out
    }
}

/// Trains every (method, seed) cell under identical settings, in parallel,
/// and summarizes the eval metric per method. Rows keep method-major,
/// seed-minor order.
pub fn cmd_compare(base: &ModelConfig, methods: &[Method], seeds: &[u64]) -> Result<Comparison> {
    if methods.is_empty() || seeds.is_empty() {
        return Err(Error::Config("compare needs at least one method and one seed".into()));
    }
    let cells: Vec<(Method, u64)> = methods
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    for (m, s) in &cells {
        ModelConfig { seed: *s, ..m.apply(base) }.validate()?;
    }
    let rows = cells
        .par_iter()
        .map(|&(method, seed)| {
            let cfg = ModelConfig {
                seed,
                ..method.apply(base)
            };
            let outcome = run_training(&cfg, |_| Ok(()))?;
            Ok(CompareRow {
                method: method.to_string(),
                seed,
                eval: outcome.eval,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut summary: Vec<MethodSummary> = Vec::new();
    for m in methods {
        let id = m.to_string();
        if summary.iter().any(|s| s.method == id) {
            continue;
        }
        let scores: Vec<f64> = rows.iter().filter(|r| r.method == id).map(CompareRow::score).collect();
        summary.push(summarize(id, &scores));
    }
    let classification = rows.first().is_some_and(|r| r.eval.accuracy.is_some());
    Ok(Comparison {
        metric: if classification { "accuracy" } else { "neg_mse" },
        rows,
        summary,
    })
}

fn summarize(method: String, scores: &[f64]) -> MethodSummary {
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let std = if scores.len() > 1 {
        (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MethodSummary {
        method,
        runs: scores.len(),
        mean,
        std,
        min: scores.iter().copied().fold(f64::INFINITY, f64::min),
        max: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}
