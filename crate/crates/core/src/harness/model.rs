use crate::compress::{compress_expert_weights, compress_on_tape, ConvPipeline};
use crate::error::Result;
use crate::harness::config::{LayerKind, ModelConfig};
use crate::harness::params::{ParamId, ParamStore};
use crate::harness::task::{Batch, SyntheticTask, Targets};
use crate::hyper::{
    hypermoe_forward, EmbeddingSource, EmbeddingTables, HyperComponents, HyperNet, Projector,
    SelectionMlp,
};
use crate::moe::{
    expert_forward, load_balance_loss, moe_forward, moe_share_forward, noisy_topk_gate, Expert,
    Gate, GateDecision,
};
use crate::tensor::{Rng, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
struct NormIds {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct ExpertIds {
    w1: ParamId,
    w2: ParamId,
}

#[derive(Debug, Clone)]
enum FfnIds {
    Dense(ExpertIds),
    Routed {
        w_gate: ParamId,
        w_noise: ParamId,
        experts: Vec<ExpertIds>,
        shared: Option<ExpertIds>,
    },
}

#[derive(Debug, Clone)]
struct BlockIds {
    norm1: NormIds,
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: ParamId,
    norm2: NormIds,
    ffn: FfnIds,
}

#[derive(Debug, Clone)]
struct HyperIds {
    w_down: ParamId,
    w_up: ParamId,
    expert_embeddings: Option<ParamId>,
    layer_embeddings: ParamId,
    mlp: Option<[ParamId; 4]>,
    proj_w: ParamId,
    proj_b: ParamId,
}

#[derive(Debug, Clone)]
struct Layout {
    tokens: ParamId,
    values: ParamId,
    blocks: Vec<BlockIds>,
    norm_f: NormIds,
    head_w: ParamId,
    head_b: ParamId,
    hyper: Option<HyperIds>,
}

/// A small pre-norm transformer whose feed-forward slots hold the
/// configured layer kind.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    task: SyntheticTask,
    params: ParamStore,
    layout: Layout,
    compressor: Option<ConvPipeline>,
}

/// Loss terms and routing decisions from one forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    /// `B×C` logits or `B×1` predictions.
    pub output: Var,
    pub task_loss: Var,
    /// Mean load-balance loss over routed layers.
    pub aux_loss: Option<Var>,
    pub total_loss: Var,
    pub decisions: Vec<GateDecision>,
}

struct Init<'a> {
    store: ParamStore,
    rng: &'a Rng,
}

impl Init<'_> {
    fn gaussian(&mut self, name: &str, group: &'static str, shape: [usize; 2], std: f64) -> ParamId {
        let t = self.rng.fork(name).gaussian_tensor(shape, std);
        self.store.add(name, group, t)
    }

    fn fixed(&mut self, name: &str, group: &'static str, shape: [usize; 2], value: f64) -> ParamId {
        self.store.add(name, group, Tensor::full(shape, value))
    }

    fn norm(&mut self, prefix: &str, h: usize) -> NormIds {
        NormIds {
            gain: self.fixed(&format!("{prefix}.gain"), "norms", [1, h], 1.0),
            bias: self.fixed(&format!("{prefix}.bias"), "norms", [1, h], 0.0),
        }
    }

    fn expert(&mut self, prefix: &str, group: &'static str, h: usize, d_ff: usize) -> ExpertIds {
        ExpertIds {
            w1: self.gaussian(&format!("{prefix}.w1"), group, [h, d_ff], (h as f64).powf(-0.5)),
            w2: self.gaussian(&format!("{prefix}.w2"), group, [d_ff, h], (d_ff as f64).powf(-0.5)),
        }
    }
}

impl Model {
    /// Builds a model seeded from `cfg.seed`.
    pub fn from_config(cfg: &ModelConfig) -> Result<Self> {
        Self::build(cfg, &Rng::new(cfg.seed))
    }

    /// Every tensor draws from `rng.fork("init").fork(name)`, so adding or
    /// removing parameters leaves the others' values unchanged.
    pub fn build(cfg: &ModelConfig, rng: &Rng) -> Result<Self> {
        cfg.validate()?;
        let task = SyntheticTask::new(&cfg.task)?;
        let init_rng = rng.fork("init");
        let mut init = Init {
            store: ParamStore::new(),
            rng: &init_rng,
        };
        let h = cfg.hidden;
        let inv_h = (h as f64).powf(-0.5);
        let tokens = init.gaussian("embed.tokens", "embeddings", [task.vocab_size(), h], 1.0);
        let values = init.gaussian("embed.values", "embeddings", [1, h], 1.0);
        let mut blocks = Vec::with_capacity(cfg.num_layers);
        for layer in 0..cfg.num_layers {
            let p = format!("blocks.{layer}");
            let norm1 = init.norm(&format!("{p}.norm1"), h);
            let q = init.gaussian(&format!("{p}.attn.q"), "attention", [h, h], inv_h);
            let k = init.gaussian(&format!("{p}.attn.k"), "attention", [h, h], inv_h);
            let v = init.gaussian(&format!("{p}.attn.v"), "attention", [h, h], inv_h);
            let o = init.gaussian(&format!("{p}.attn.o"), "attention", [h, h], inv_h);
            let norm2 = init.norm(&format!("{p}.norm2"), h);
            let ffn = match cfg.layer_kind {
                LayerKind::Dense => FfnIds::Dense(init.expert(&format!("{p}.ffn"), "ffn", h, cfg.d_ff)),
                kind => {
                    let n = cfg.num_experts;
                    let w_gate = init.gaussian(&format!("{p}.gate.w_gate"), "gate", [h, n], inv_h);
                    let w_noise = init.fixed(&format!("{p}.gate.w_noise"), "gate", [h, n], 0.0);
                    let experts = (0..n)
                        .map(|e| init.expert(&format!("{p}.experts.{e}"), "experts", h, cfg.d_ff))
                        .collect();
                    let shared = (kind == LayerKind::MoeShare)
                        .then(|| init.expert(&format!("{p}.shared"), "shared_expert", h, cfg.d_ff));
                    FfnIds::Routed {
                        w_gate,
                        w_noise,
                        experts,
                        shared,
                    }
                }
            };
            blocks.push(BlockIds {
                norm1,
                q,
                k,
                v,
                o,
                norm2,
                ffn,
            });
        }
        let hyper = (cfg.layer_kind == LayerKind::Hypermoe).then(|| {
            let hb = h * cfg.bottleneck;
            let gen_std = cfg.generator_init_scale * 0.02 * (cfg.hyper_dim as f64).powf(-0.25);
            let w_down = init.gaussian("hyper.generator.w_down", "hypernetwork", [hb, cfg.hyper_dim], gen_std);
            let w_up = init.gaussian("hyper.generator.w_up", "hypernetwork", [hb, cfg.hyper_dim], gen_std);
            let t_emb = cfg.embedding_dim;
            let expert_embeddings = (cfg.embedding_source == EmbeddingSource::Learned).then(|| {
                init.gaussian(
                    "hyper.expert_embeddings",
                    "expert_embeddings",
                    [cfg.num_experts, t_emb],
                    0.02,
                )
            });
            let layer_embeddings = init.gaussian(
                "hyper.layer_embeddings",
                "layer_embeddings",
                [cfg.num_layers, t_emb],
                0.02,
            );
            let mlp = (cfg.embedding_source != EmbeddingSource::None).then(|| {
                let sh = cfg.selection_hidden();
                let t = cfg.selection_dim;
                [
                    init.gaussian("hyper.selection.w1", "selection_mlp", [t_emb, sh], (t_emb as f64).powf(-0.5)),
                    init.fixed("hyper.selection.b1", "selection_mlp", [1, sh], 0.0),
                    init.gaussian("hyper.selection.w2", "selection_mlp", [sh, t], (sh as f64).powf(-0.5)),
                    init.fixed("hyper.selection.b2", "selection_mlp", [1, t], 0.0),
                ]
            });
            let pin = cfg.projector_input();
            HyperIds {
                w_down,
                w_up,
                expert_embeddings,
                layer_embeddings,
                mlp,
                proj_w: init.gaussian("hyper.projector.w", "projector", [pin, cfg.hyper_dim], (pin as f64).powf(-0.5)),
                proj_b: init.fixed("hyper.projector.b", "projector", [1, cfg.hyper_dim], 0.0),
            }
        });
        let norm_f = init.norm("norm_f", h);
        let c = task.num_outputs();
        let head_w = init.gaussian("head.w", "head", [h, c], inv_h);
        let head_b = init.fixed("head.b", "head", [1, c], 0.0);
        let compressor = match (&hyper, cfg.embedding_source) {
            (Some(_), EmbeddingSource::Compressed) => Some(ConvPipeline::new(
                cfg.compression_spec(),
                [2, cfg.d_ff, h],
                &mut rng.fork("compression"),
            )?),
            _ => None,
        };
        Ok(Self {
            config: cfg.clone(),
            task,
            params: init.store,
            layout: Layout {
                tokens,
                values,
                blocks,
                norm_f,
                head_w,
                head_b,
                hyper,
            },
            compressor,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn task(&self) -> &SyntheticTask {
        &self.task
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Routed experts of `layer` as `(W1, W2)` values.
    pub fn expert_weights(&self, layer: usize) -> Option<Vec<(Tensor, Tensor)>> {
        match &self.layout.blocks.get(layer)?.ffn {
            FfnIds::Routed { experts, .. } => Some(
                experts
                    .iter()
                    .map(|e| (self.params.get(e.w1).clone(), self.params.get(e.w2).clone()))
                    .collect(),
            ),
            FfnIds::Dense(_) => None,
        }
    }

    pub fn compressor(&self) -> Option<&ConvPipeline> {
        self.compressor.as_ref()
    }

    /// Binds the stored parameters to `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.bind(tape)
    }

    /// Binds `store` in place of the model's own parameters; `store` must
    /// have been cloned from this model.
    pub fn bind_store(&self, tape: &mut Tape, store: &ParamStore) -> Vec<Var> {
        debug_assert_eq!(store.len(), self.params.len());
        store.bind(tape)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        batch: &Batch,
        rng: &mut Rng,
        training: bool,
    ) -> Result<ForwardPass> {
        let cfg = &self.config;
        let lay = &self.layout;
        let v = |id: ParamId| vars[id.index()];
        let h = cfg.hidden;
        let b = batch.len();
        let s = batch.seq_len;
        let t = b * s;

        let tok = tape.gather_rows(v(lay.tokens), &batch.tokens)?;
        let vals = tape.constant(Tensor::new([t, 1], batch.values.clone())?);
        let vals = tape.matmul(vals, v(lay.values))?;
        let pos = tape.constant(positions(b, s, h));
        let x = tape.add(tok, vals)?;
        let mut x = tape.add(x, pos)?;

        let hyper = self.hyper_parts(tape, vars)?;
        let mut decisions = Vec::new();
        let mut aux_terms = Vec::new();
        for (layer, block) in lay.blocks.iter().enumerate() {
            let a = norm(tape, x, block.norm1, vars)?;
            let a = attention(tape, a, block, vars, b, s, h)?;
            x = tape.add(x, a)?;
            let f = norm(tape, x, block.norm2, vars)?;
            let f = match &block.ffn {
                FfnIds::Dense(e) => expert_forward(tape, f, &expert(e, vars))?,
                FfnIds::Routed {
                    w_gate,
                    w_noise,
                    experts,
                    shared,
                } => {
                    let gate = Gate {
                        w_gate: v(*w_gate),
                        w_noise: v(*w_noise),
                        top_k: cfg.top_k,
                        noise_enabled: cfg.noise_enabled,
                        renormalize: cfg.renormalize_gates,
                    };
                    let bank: Vec<Expert> = experts.iter().map(|e| expert(e, vars)).collect();
                    let decision = noisy_topk_gate(tape, f, &gate, rng, training)?;
                    aux_terms.push(load_balance_loss(tape, &decision)?);
                    let y = match (cfg.layer_kind, shared, &hyper) {
                        (LayerKind::MoeShare, Some(sh), _) => {
                            moe_share_forward(tape, f, &bank, &expert(sh, vars), &decision)?
                        }
                        (LayerKind::Hypermoe, _, Some(parts)) => {
                            let mut parts = *parts;
                            if let Some(pipeline) = &self.compressor {
                                parts.tables.experts = if cfg.compress_grad {
                                    compress_on_tape(tape, &bank, pipeline)?
                                } else {
                                    let weights: Vec<(Tensor, Tensor)> = bank
                                        .iter()
                                        .map(|e| (tape.value(e.w1).clone(), tape.value(e.w2).clone()))
                                        .collect();
                                    tape.constant(compress_expert_weights(&weights, pipeline)?)
                                };
                            }
                            hypermoe_forward(tape, f, &bank, &decision, &parts, layer)?
                        }
                        _ => moe_forward(tape, f, &bank, &decision)?,
                    };
                    decisions.push(decision);
                    y
                }
            };
            x = tape.add(x, f)?;
        }

        let last: Vec<usize> = (0..b).map(|i| i * s + s - 1).collect();
        let r = tape.gather_rows(x, &last)?;
        let r = norm(tape, r, lay.norm_f, vars)?;
        let out = tape.matmul(r, v(lay.head_w))?;
        let output = tape.add_row(out, v(lay.head_b))?;

        let task_loss = match &batch.targets {
            Targets::Classes(y) => tape.cross_entropy(output, y)?,
            Targets::Values(y) => {
                let target = tape.constant(Tensor::new([b, 1], y.clone())?);
                tape.mse(output, target)?
            }
        };
        let aux_loss = match aux_terms.split_first() {
            None => None,
            Some((&first, rest)) => {
                let mut acc = first;
                for &term in rest {
                    acc = tape.add(acc, term)?;
                }
                Some(tape.scale(acc, 1.0 / aux_terms.len() as f64))
            }
        };
        let total_loss = match aux_loss {
            Some(aux) if cfg.aux_loss_coef != 0.0 => {
                let weighted = tape.scale(aux, cfg.aux_loss_coef);
                tape.add(task_loss, weighted)?
            }
            _ => task_loss,
        };
        Ok(ForwardPass {
            output,
            task_loss,
            aux_loss,
            total_loss,
            decisions,
        })
    }

    /// Shared hypernetwork pieces; expert embeddings are a placeholder when
    /// they are compressed per layer.
    fn hyper_parts(&self, tape: &mut Tape, vars: &[Var]) -> Result<Option<HyperComponents>> {
        let Some(ids) = &self.layout.hyper else {
            return Ok(None);
        };
        let cfg = &self.config;
        let v = |id: ParamId| vars[id.index()];
        let layers = v(ids.layer_embeddings);
        let experts = match ids.expert_embeddings {
            Some(id) => v(id),
            None => layers,
        };
        let mlp = match ids.mlp {
            Some([w1, b1, w2, b2]) => SelectionMlp {
                w1: v(w1),
                b1: v(b1),
                w2: v(w2),
                b2: v(b2),
            },
            // unused when conditioning on the hidden state
            None => {
                let dummy = tape.constant(Tensor::zeros([1, 1]));
                SelectionMlp {
                    w1: dummy,
                    b1: dummy,
                    w2: dummy,
                    b2: dummy,
                }
            }
        };
        Ok(Some(HyperComponents {
            tables: EmbeddingTables { experts, layers },
            mlp,
            projector: Projector {
                w: v(ids.proj_w),
                b: v(ids.proj_b),
            },
            net: HyperNet {
                w_down: v(ids.w_down),
                w_up: v(ids.w_up),
                hidden: cfg.hidden,
                bottleneck: cfg.bottleneck,
            },
            condition_on: cfg.condition_on,
            source: cfg.embedding_source,
        }))
    }

    /// Expert embeddings used by `layer`: the learned table, or the
    /// compressed weights of that layer's experts.
    pub fn expert_embeddings(&self, layer: usize) -> Result<Option<Tensor>> {
        let Some(ids) = &self.layout.hyper else {
            return Ok(None);
        };
        if let Some(id) = ids.expert_embeddings {
            return Ok(Some(self.params.get(id).clone()));
        }
        match (&self.compressor, self.expert_weights(layer)) {
            (Some(pipeline), Some(weights)) => Ok(Some(compress_expert_weights(&weights, pipeline)?)),
            _ => Ok(None),
        }
    }

    /// Selection MLP as plain tensors `(w1, b1, w2, b2)`.
    pub fn selection_mlp(&self) -> Option<[Tensor; 4]> {
        let ids = self.layout.hyper.as_ref()?.mlp?;
        Some(ids.map(|id| self.params.get(id).clone()))
    }
}

fn expert(ids: &ExpertIds, vars: &[Var]) -> Expert {
    Expert {
        w1: vars[ids.w1.index()],
        w2: vars[ids.w2.index()],
    }
}

fn norm(tape: &mut Tape, x: Var, ids: NormIds, vars: &[Var]) -> Result<Var> {
    let n = tape.layer_norm(x, LN_EPS);
    let n = tape.mul_row(n, vars[ids.gain.index()])?;
    Ok(tape.add_row(n, vars[ids.bias.index()])?)
}

fn attention(
    tape: &mut Tape,
    x: Var,
    block: &BlockIds,
    vars: &[Var],
    b: usize,
    s: usize,
    h: usize,
) -> Result<Var> {
    let v = |id: ParamId| vars[id.index()];
    let q = tape.matmul(x, v(block.q))?;
    let k = tape.matmul(x, v(block.k))?;
    let val = tape.matmul(x, v(block.v))?;
    let q = tape.reshape(q, &[b, s, h])?;
    let k = tape.reshape(k, &[b, s, h])?;
    let val = tape.reshape(val, &[b, s, h])?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (h as f64).sqrt());
    let weights = tape.softmax(scores);
    let ctx = tape.matmul(weights, val)?;
    let ctx = tape.reshape(ctx, &[b * s, h])?;
    Ok(tape.matmul(ctx, v(block.o))?)
}

/// Sinusoidal position codes tiled over `batch` sequences, `(batch·seq)×h`.
pub fn positions(batch: usize, seq: usize, h: usize) -> Tensor {
    let mut data = Vec::with_capacity(batch * seq * h);
    for _ in 0..batch {
        for pos in 0..seq {
            for i in 0..h {
                let freq = 10000f64.powf(-((i / 2 * 2) as f64) / h as f64);
                let angle = pos as f64 * freq;
                data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
            }
        }
    }
    Tensor::new([batch * seq, h], data).unwrap()
}

/// Parameter counts per group, computed from the config alone.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize)]
pub struct ParamReport {
    pub embeddings: usize,
    pub attention: usize,
    pub norms: usize,
    pub ffn: usize,
    pub gate: usize,
    pub experts: usize,
    pub shared_expert: usize,
    pub hypernetwork: usize,
    pub expert_embeddings: usize,
    pub layer_embeddings: usize,
    pub selection_mlp: usize,
    pub projector: usize,
    pub head: usize,
    pub total: usize,
}

impl ParamReport {
    /// Parameters that exist only because of the generated expert.
    pub fn hyper_specific(&self) -> usize {
        self.hypernetwork
            + self.expert_embeddings
            + self.layer_embeddings
            + self.selection_mlp
            + self.projector
    }

    pub fn group(&self, name: &str) -> Option<usize> {
        Some(match name {
            "embeddings" => self.embeddings,
            "attention" => self.attention,
            "norms" => self.norms,
            "ffn" => self.ffn,
            "gate" => self.gate,
            "experts" => self.experts,
            "shared_expert" => self.shared_expert,
            "hypernetwork" => self.hypernetwork,
            "expert_embeddings" => self.expert_embeddings,
            "layer_embeddings" => self.layer_embeddings,
            "selection_mlp" => self.selection_mlp,
            "projector" => self.projector,
            "head" => self.head,
            _ => return None,
        })
    }
}

pub fn param_count_report(cfg: &ModelConfig) -> Result<ParamReport> {
    cfg.validate()?;
    let task = SyntheticTask::new(&cfg.task)?;
    let (h, f, n, l) = (cfg.hidden, cfg.d_ff, cfg.num_experts, cfg.num_layers);
    let c = task.num_outputs();
    let mut r = ParamReport {
        embeddings: task.vocab_size() * h + h,
        attention: l * 4 * h * h,
        norms: (2 * l + 1) * 2 * h,
        head: h * c + c,
        ..Default::default()
    };
    match cfg.layer_kind {
        LayerKind::Dense => r.ffn = l * 2 * h * f,
        kind => {
            r.gate = l * 2 * h * n;
            r.experts = l * n * 2 * h * f;
            if kind == LayerKind::MoeShare {
                r.shared_expert = l * 2 * h * f;
            }
            if kind == LayerKind::Hypermoe {
                let (t, te, tk, sh) = (
                    cfg.selection_dim,
                    cfg.embedding_dim,
                    cfg.hyper_dim,
                    cfg.selection_hidden(),
                );
                r.hypernetwork = 2 * h * cfg.bottleneck * tk;
                r.layer_embeddings = l * te;
                if cfg.embedding_source == EmbeddingSource::Learned {
                    r.expert_embeddings = n * te;
                }
                if cfg.embedding_source != EmbeddingSource::None {
                    r.selection_mlp = te * sh + sh + sh * t + t;
                }
                r.projector = cfg.projector_input() * tk + tk;
            }
        }
    }
    r.total = r.embeddings
        + r.attention
        + r.norms
        + r.ffn
        + r.gate
        + r.experts
        + r.shared_expert
        + r.hyper_specific()
        + r.head;
    Ok(r)
}
