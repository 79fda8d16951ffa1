use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compress::ConvPipelineSpec;
use crate::error::{Error, Result};
use crate::hyper::{ConditionOn, EmbeddingSource};

/// What fills the feed-forward slot of every block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Moe,
    MoeShare,
    Hypermoe,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Dense => "dense",
            LayerKind::Moe => "moe",
            LayerKind::MoeShare => "moe_share",
            LayerKind::Hypermoe => "hypermoe",
        }
    }

    pub fn is_routed(self) -> bool {
        !matches!(self, LayerKind::Dense)
    }
}

impl std::str::FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(LayerKind::Dense),
            "moe" => Ok(LayerKind::Moe),
            "moe_share" | "moe-share" => Ok(LayerKind::MoeShare),
            "hypermoe" => Ok(LayerKind::Hypermoe),
            other => Err(Error::config(format!("unknown layer kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    /// `[group g, a, b, distractor z] → (a + b) mod moduli[g]`, with
    /// `a, b < repeats · moduli[g]`. One in `holdout` distractor values is
    /// reserved for evaluation for every `(g, a, b)`.
    GroupedModularAddition {
        moduli: Vec<usize>,
        repeats: usize,
        distractors: usize,
        holdout: usize,
    },
    /// `[selector j, value x] → f_j(x)` for `functions` random
    /// piecewise-linear `f_j` on `[-1, 1]` with `knots` breakpoints.
    PiecewiseRegression {
        functions: usize,
        knots: usize,
        grid: usize,
        holdout: usize,
        seed: u64,
    },
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig::GroupedModularAddition {
            moduli: vec![7, 9, 11, 13],
            repeats: 1,
            distractors: 8,
            holdout: 4,
        }
    }
}

impl TaskConfig {
    pub fn id(&self) -> &'static str {
        match self {
            TaskConfig::GroupedModularAddition { .. } => "grouped_modular_addition",
            TaskConfig::PiecewiseRegression { .. } => "piecewise_regression",
        }
    }

    /// Default configuration of the named task.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "grouped_modular_addition" | "grouped-modular-addition" => Ok(Self::default()),
            "piecewise_regression" | "piecewise-regression" => {
                Ok(TaskConfig::PiecewiseRegression {
                    functions: 4,
                    knots: 6,
                    grid: 4096,
                    holdout: 8,
                    seed: 0,
                })
            }
            other => Err(Error::config(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Fraction of `steps` spent in linear warm-up.
    pub warmup_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            steps: 500,
            batch_size: 32,
            warmup_fraction: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: Some(1.0),
        }
    }
}

/// Every knob of a model and its training run.
///
/// Symbols: `hidden` = h, `num_experts` = N, `top_k` = K, `num_layers` = L,
/// `selection_dim` = t, `embedding_dim` = t', `hyper_dim` = t_k,
/// `bottleneck` = b.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub d_ff: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub num_layers: usize,
    pub selection_dim: usize,
    /// Hidden width of the selection MLP; defaults to `selection_dim`.
    pub selection_hidden: Option<usize>,
    pub embedding_dim: usize,
    pub hyper_dim: usize,
    pub bottleneck: usize,
    pub layer_kind: LayerKind,
    pub aux_loss_coef: f64,
    pub noise_enabled: bool,
    pub renormalize_gates: bool,
    pub condition_on: ConditionOn,
    pub embedding_source: EmbeddingSource,
    /// Let gradients flow through compressed embeddings into expert weights.
    pub compress_grad: bool,
    /// Compression pipeline; `None` uses [`ConvPipelineSpec::scaled`].
    pub compression: Option<ConvPipelineSpec>,
    /// Multiplies the init std of `W^D` and `W^U`; `0` zeroes them.
    pub generator_init_scale: f64,
    pub seed: u64,
    pub eval_samples: usize,
    pub task: TaskConfig,
    pub optimizer: OptimizerConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            d_ff: 64,
            num_experts: 4,
            top_k: 1,
            num_layers: 2,
            selection_dim: 8,
            selection_hidden: None,
            embedding_dim: 8,
            hyper_dim: 8,
            bottleneck: 4,
            layer_kind: LayerKind::Hypermoe,
            aux_loss_coef: 0.01,
            noise_enabled: true,
            renormalize_gates: false,
            condition_on: ConditionOn::Unselected,
            embedding_source: EmbeddingSource::Learned,
            compress_grad: false,
            compression: None,
            generator_init_scale: 1.0,
            seed: 0,
            eval_samples: 2000,
            task: TaskConfig::default(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn selection_hidden(&self) -> usize {
        self.selection_hidden.unwrap_or(self.selection_dim)
    }

    /// Width of the vector fed to the hypernetwork's projector.
    pub fn projector_input(&self) -> usize {
        match self.embedding_source {
            EmbeddingSource::None => self.hidden + self.embedding_dim,
            _ => self.selection_dim + self.embedding_dim,
        }
    }

    pub fn compression_spec(&self) -> ConvPipelineSpec {
        self.compression
            .clone()
            .unwrap_or_else(|| ConvPipelineSpec::scaled(self.d_ff, self.hidden, self.embedding_dim))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden", self.hidden),
            ("d_ff", self.d_ff),
            ("num_experts", self.num_experts),
            ("top_k", self.top_k),
            ("num_layers", self.num_layers),
            ("selection_dim", self.selection_dim),
            ("selection_hidden", self.selection_hidden()),
            ("embedding_dim", self.embedding_dim),
            ("hyper_dim", self.hyper_dim),
            ("bottleneck", self.bottleneck),
            ("eval_samples", self.eval_samples),
            ("optimizer.batch_size", self.optimizer.batch_size),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("`{key}` must be positive")));
            }
        }
        if self.layer_kind.is_routed() && self.top_k > self.num_experts {
            return Err(Error::config(format!(
                "`top_k` = {} exceeds `num_experts` = {}",
                self.top_k, self.num_experts
            )));
        }
        if self.layer_kind == LayerKind::Hypermoe {
            if self.top_k >= self.num_experts {
                return Err(Error::config(format!(
                    "`top_k` = {} must be below `num_experts` = {} for hypermoe",
                    self.top_k, self.num_experts
                )));
            }
            if self.bottleneck >= self.hidden {
                return Err(Error::config(format!(
                    "`bottleneck` = {} must be below `hidden` = {}",
                    self.bottleneck, self.hidden
                )));
            }
            if self.embedding_source == EmbeddingSource::Compressed {
                self.compression_spec()
                    .shape_chain([2, self.d_ff, self.hidden])
                    .map_err(|e| Error::config(format!("`compression`: {e}")))?;
            }
        }
        if !(self.aux_loss_coef >= 0.0 && self.aux_loss_coef.is_finite()) {
            return Err(Error::config("`aux_loss_coef` must be finite and >= 0"));
        }
        if !(self.generator_init_scale >= 0.0) {
            return Err(Error::config("`generator_init_scale` must be >= 0"));
        }
        let opt = &self.optimizer;
        if !(opt.learning_rate > 0.0) {
            return Err(Error::config("`optimizer.learning_rate` must be positive"));
        }
        if !(0.0..=1.0).contains(&opt.warmup_fraction) {
            return Err(Error::config("`optimizer.warmup_fraction` must lie in [0, 1]"));
        }
        match &self.task {
            TaskConfig::GroupedModularAddition {
                moduli,
                repeats,
                distractors,
                holdout,
            } => {
                if moduli.is_empty() || moduli.iter().any(|&m| m < 2) {
                    return Err(Error::config("`task.moduli` needs entries >= 2"));
                }
                if *repeats == 0 || *distractors == 0 {
                    return Err(Error::config("`task.repeats` and `task.distractors` must be positive"));
                }
                if *holdout < 2 || distractors % holdout != 0 {
                    return Err(Error::config(
                        "`task.holdout` must be >= 2 and divide `task.distractors`",
                    ));
                }
            }
            TaskConfig::PiecewiseRegression {
                functions,
                knots,
                grid,
                holdout,
                ..
            } => {
                if *functions == 0 || *knots < 2 || *holdout < 2 || grid < holdout {
                    return Err(Error::config(
                        "`task` needs functions >= 1, knots >= 2, holdout >= 2, grid >= holdout",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Parses and validates a JSON config. Parse errors name the key path
    /// and position.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|err| {
            let path = err.path().to_string();
            let inner = err.into_inner();
            Error::Parse {
                path,
                line: inner.line(),
                column: inner.column(),
                message: inner.to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(ModelConfig::from_json("{}").unwrap(), ModelConfig::default());
    }

    #[test]
    fn json_roundtrip() {
        let mut cfg = ModelConfig::default();
        cfg.layer_kind = LayerKind::MoeShare;
        cfg.task = TaskConfig::by_name("piecewise_regression").unwrap();
        cfg.compression = Some(ConvPipelineSpec::scaled(64, 16, 8));
        assert_eq!(ModelConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ModelConfig::from_json("{\n  \"hiden\": 8\n}").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("hiden"), "{msg}");
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn wrong_type_names_path() {
        let err = ModelConfig::from_json(r#"{"optimizer": {"steps": "many"}}"#).unwrap_err();
        match err {
            Error::Parse { path, .. } => assert_eq!(path, "optimizer.steps"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_task_is_rejected() {
        assert!(ModelConfig::from_json(r#"{"task": {"kind": "sorting"}}"#).is_err());
        assert!(matches!(TaskConfig::by_name("sorting"), Err(Error::Config(_))));
    }

    #[test]
    fn invariants_are_enforced() {
        let mut cfg = ModelConfig::default();
        cfg.top_k = cfg.num_experts;
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("top_k")));
        cfg.layer_kind = LayerKind::Moe;
        cfg.validate().unwrap();

        let mut cfg = ModelConfig::default();
        cfg.bottleneck = cfg.hidden;
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("bottleneck")));
    }
}
