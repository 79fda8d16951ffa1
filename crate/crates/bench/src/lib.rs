//! Seeded fixtures shared by the criterion benches.

use hypermoe_core::hyper::{
    hypermoe_forward, ConditionOn, EmbeddingSource, EmbeddingTables, HyperComponents, HyperNet, Projector,
    SelectionMlp,
};
use hypermoe_core::moe::{moe_forward, noisy_topk_gate, Expert, Gate};
use hypermoe_core::tensor::{Rng, Tape, Tensor, Var};

/// Shapes of one routed layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerShape {
    pub tokens: usize,
    pub hidden: usize,
    pub d_ff: usize,
    pub experts: usize,
    pub top_k: usize,
    pub bottleneck: usize,
    pub embedding_dim: usize,
    pub selection_dim: usize,
    pub hyper_dim: usize,
}

impl Default for LayerShape {
    fn default() -> Self {
        Self {
            tokens: 128,
            hidden: 16,
            d_ff: 64,
            experts: 4,
            top_k: 1,
            bottleneck: 4,
            embedding_dim: 8,
            selection_dim: 8,
            hyper_dim: 8,
        }
    }
}

/// Input, expert bank, gate and generator weights for one layer.
#[derive(Debug, Clone)]
pub struct LayerFixture {
    pub shape: LayerShape,
    x: Tensor,
    bank: Vec<(Tensor, Tensor)>,
    w_gate: Tensor,
    hyper: Vec<Tensor>,
}

impl LayerFixture {
    pub fn new(shape: LayerShape, seed: u64) -> Self {
        let s = shape;
        let mut rng = Rng::new(seed);
        let mut g = |rows: usize, cols: usize| rng.gaussian_tensor([rows, cols], (1.0 / rows as f64).sqrt());
        let x = g(s.tokens, s.hidden);
        let bank = (0..s.experts).map(|_| (g(s.hidden, s.d_ff), g(s.d_ff, s.hidden))).collect();
        let w_gate = g(s.hidden, s.experts);
        let hyper = vec![
            g(s.experts, s.embedding_dim),
            g(1, s.embedding_dim),
            g(s.embedding_dim, s.selection_dim),
            g(1, s.selection_dim),
            g(s.selection_dim, s.selection_dim),
            g(1, s.selection_dim),
            g(s.selection_dim + s.embedding_dim, s.hyper_dim),
            g(1, s.hyper_dim),
            g(s.hidden * s.bottleneck, s.hyper_dim),
            g(s.hidden * s.bottleneck, s.hyper_dim),
        ];
        Self {
            shape,
            x,
            bank,
            w_gate,
            hyper,
        }
    }

    /// Records gate and layer on a fresh tape and returns the summed output,
    /// with the generated expert when `hyper` is set.
    pub fn forward(&self, tape: &mut Tape, hyper: bool) -> Var {
        let s = self.shape;
        let x = tape.param(self.x.clone());
        let bank: Vec<Expert> = self
            .bank
            .iter()
            .map(|(w1, w2)| Expert {
                w1: tape.param(w1.clone()),
                w2: tape.param(w2.clone()),
            })
            .collect();
        let gate = Gate {
            w_gate: tape.param(self.w_gate.clone()),
            w_noise: tape.param(Tensor::zeros([s.hidden, s.experts])),
            top_k: s.top_k,
            noise_enabled: false,
            renormalize: false,
        };
        let decision = noisy_topk_gate(tape, x, &gate, &mut Rng::new(0), false).expect("gate");
        let y = if hyper {
            let v: Vec<Var> = self.hyper.iter().map(|t| tape.param(t.clone())).collect();
            let comps = HyperComponents {
                tables: EmbeddingTables {
                    experts: v[0],
                    layers: v[1],
                },
                mlp: SelectionMlp {
                    w1: v[2],
                    b1: v[3],
                    w2: v[4],
                    b2: v[5],
                },
                projector: Projector { w: v[6], b: v[7] },
                net: HyperNet {
                    w_down: v[8],
                    w_up: v[9],
                    hidden: s.hidden,
                    bottleneck: s.bottleneck,
                },
                condition_on: ConditionOn::Unselected,
                source: EmbeddingSource::Learned,
            };
            hypermoe_forward(tape, x, &bank, &decision, &comps, 0).expect("hypermoe layer")
        } else {
            moe_forward(tape, x, &bank, &decision).expect("moe layer")
        };
        tape.sum(y)
    }
}
