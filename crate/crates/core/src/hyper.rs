//! Hypernetwork-generated experts conditioned on the unselected experts.
//!
//! For each token the pipeline is:
//!
//! 1. `Ẑ = 1 − Z`, the experts the gate did *not* pick;
//! 2. `p = MLP(mean of S_j over j ∈ Ẑ)`, the selection embedding;
//! 3. `k = proj([p, l_τ])`, mixing in the embedding of layer `τ`;
//! 4. `(D, U) = (W^D·k, W^U·k)` reshaped to `h×b` and `b×h`;
//! 5. `Ê(x) = relu(x·D)·U`, added to the routed experts' output.
//!
//! One [`HyperNet`] serves every layer of a model, so its parameter count
//! does not depend on depth; each extra layer only adds a row of `l`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{moe_forward, Expert, GateDecision};
use crate::tensor::{Tape, Tensor, Var};

/// Which experts feed the selection embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionOn {
    Selected,
    #[default]
    Unselected,
}

/// Where expert embeddings come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    /// Learned table `S`, shared by all layers.
    #[default]
    Learned,
    /// Per-layer embeddings compressed from that layer's expert weights.
    Compressed,
    /// No expert embeddings: the hypernetwork is conditioned on the
    /// token's hidden state instead.
    None,
}

/// Expert embeddings `S` (`N×t'`) and layer embeddings `l` (`L×t'`).
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingTables {
    pub experts: Var,
    pub layers: Var,
}

/// Two affine layers with a ReLU between, `t' → hidden → t`.
#[derive(Debug, Clone, Copy)]
pub struct SelectionMlp {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl SelectionMlp {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.w1)?;
        let h = tape.add_row(h, self.b1)?;
        let h = tape.relu(h);
        let o = tape.matmul(h, self.w2)?;
        Ok(tape.add_row(o, self.b2)?)
    }
}

/// Affine map `(t + t') → t_k` applied to `[p, l_τ]`.
#[derive(Debug, Clone, Copy)]
pub struct Projector {
    pub w: Var,
    pub b: Var,
}

/// Shared generator weights: `W^D` is `(h·b)×t_k`, `W^U` is `(b·h)×t_k`.
#[derive(Debug, Clone, Copy)]
pub struct HyperNet {
    pub w_down: Var,
    pub w_up: Var,
    pub hidden: usize,
    pub bottleneck: usize,
}

/// Per-token expert weights. Row `t` of `down` is the row-major `h×b`
/// matrix `D_t`; row `t` of `up` is the `b×h` matrix `U_t`.
#[derive(Debug, Clone, Copy)]
pub struct GeneratedExpert {
    pub down: Var,
    pub up: Var,
    pub hidden: usize,
    pub bottleneck: usize,
}

impl GeneratedExpert {
    /// `D_t` as an `h×b` matrix.
    pub fn down_matrix(&self, tape: &Tape, token: usize) -> Tensor {
        Tensor::new(
            [self.hidden, self.bottleneck],
            tape.value(self.down).row(token).to_vec(),
        )
        .unwrap()
    }

    /// `U_t` as a `b×h` matrix.
    pub fn up_matrix(&self, tape: &Tape, token: usize) -> Tensor {
        Tensor::new(
            [self.bottleneck, self.hidden],
            tape.value(self.up).row(token).to_vec(),
        )
        .unwrap()
    }
}

/// Everything a HyperMoE layer needs beyond the routed experts.
#[derive(Debug, Clone, Copy)]
pub struct HyperComponents {
    pub tables: EmbeddingTables,
    pub mlp: SelectionMlp,
    pub projector: Projector,
    pub net: HyperNet,
    pub condition_on: ConditionOn,
    pub source: EmbeddingSource,
}

/// `1 − Z`: ones at the experts the gate left out.
pub fn unselected_mask(decision: &GateDecision) -> Tensor {
    let mut m = decision.mask.clone();
    m.data_mut().iter_mut().for_each(|v| *v = 1.0 - *v);
    m
}

/// Row-normalized mask weights `ẑ / Σẑ`.
pub fn aggregation_weights(mask: &Tensor) -> Result<Tensor> {
    let (t, n) = mask.dims2()?;
    let mut w = mask.clone();
    for i in 0..t {
        let row = &mut w.data_mut()[i * n..(i + 1) * n];
        let total: f64 = row.iter().sum();
        if total <= 0.0 {
            return Err(Error::DegenerateSelection { token: i });
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(w)
}

/// Mean of the expert embeddings marked in each mask row (`T×t'`).
pub fn aggregate_embeddings(tape: &mut Tape, mask: &Tensor, experts: Var) -> Result<Var> {
    let weights = aggregation_weights(mask)?;
    let weights = tape.constant(weights);
    Ok(tape.matmul(weights, experts)?)
}

/// Selection embedding `p = MLP(mean of masked S_j)`, one row per token.
pub fn selection_embedding(
    tape: &mut Tape,
    mask: &Tensor,
    experts: Var,
    mlp: &SelectionMlp,
) -> Result<Var> {
    let agg = aggregate_embeddings(tape, mask, experts)?;
    mlp.forward(tape, agg)
}

/// `k = proj([p, l_τ])` for every row of `p`.
pub fn combine_embeddings(
    tape: &mut Tape,
    p: Var,
    layer: usize,
    layers: Var,
    projector: &Projector,
) -> Result<Var> {
    let num_layers = tape.shape(layers)[0];
    if layer >= num_layers {
        return Err(Error::Tensor(crate::tensor::TensorError::Index {
            op: "layer embedding",
            index: layer,
            extent: num_layers,
        }));
    }
    let t = tape.shape(p)[0];
    let rows = tape.gather_rows(layers, &vec![layer; t])?;
    let cat = tape.concat_cols(p, rows)?;
    let k = tape.matmul(cat, projector.w)?;
    Ok(tape.add_row(k, projector.b)?)
}

/// `D = W^D·k`, `U = W^U·k` for each row `k` of a `T×t_k` input.
pub fn generate_hyperexpert(tape: &mut Tape, k: Var, net: &HyperNet) -> Result<GeneratedExpert> {
    let hb = net.hidden * net.bottleneck;
    if tape.shape(net.w_down)[0] != hb || tape.shape(net.w_up)[0] != hb {
        return Err(Error::config(format!(
            "hypernetwork rows must equal h·b = {hb}"
        )));
    }
    let wd = tape.transpose(net.w_down)?;
    let wu = tape.transpose(net.w_up)?;
    let down = tape.matmul(k, wd)?;
    let up = tape.matmul(k, wu)?;
    Ok(GeneratedExpert {
        down,
        up,
        hidden: net.hidden,
        bottleneck: net.bottleneck,
    })
}

/// `Ê(x_t) = relu(x_t·D_t)·U_t` per token.
pub fn hyperexpert_forward(tape: &mut Tape, x: Var, gen: &GeneratedExpert) -> Result<Var> {
    let h = tape.rowwise_vecmat(x, gen.down)?;
    let h = tape.relu(h);
    Ok(tape.rowwise_vecmat(h, gen.up)?)
}

/// Conditioning vector `k` for every token at layer `τ`.
pub fn hyper_input(
    tape: &mut Tape,
    x: Var,
    decision: &GateDecision,
    hyper: &HyperComponents,
    layer: usize,
) -> Result<Var> {
    let p = match hyper.source {
        EmbeddingSource::None => x,
        EmbeddingSource::Learned | EmbeddingSource::Compressed => {
            let mask = match hyper.condition_on {
                ConditionOn::Unselected => unselected_mask(decision),
                ConditionOn::Selected => decision.mask.clone(),
            };
            selection_embedding(tape, &mask, hyper.tables.experts, &hyper.mlp)?
        }
    };
    combine_embeddings(tape, p, layer, hyper.tables.layers, &hyper.projector)
}

/// Routed experts plus the generated expert, `y_t = Σ g·E(x_t) + Ê_t(x_t)`.
/// The generated term is added without gate scaling.
pub fn hypermoe_forward(
    tape: &mut Tape,
    x: Var,
    bank: &[Expert],
    decision: &GateDecision,
    hyper: &HyperComponents,
    layer: usize,
) -> Result<Var> {
    let routed = moe_forward(tape, x, bank, decision)?;
    let k = hyper_input(tape, x, decision, hyper, layer)?;
    let gen = generate_hyperexpert(tape, k, &hyper.net)?;
    let extra = hyperexpert_forward(tape, x, &gen)?;
    Ok(tape.add(routed, extra)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn decision(selected: Vec<Vec<usize>>, n: usize, tape: &mut Tape) -> GateDecision {
        let t = selected.len();
        let k = selected[0].len();
        let mut mask = Tensor::zeros([t, n]);
        for (i, row) in selected.iter().enumerate() {
            for &e in row {
                mask.data_mut()[i * n + e] = 1.0;
            }
        }
        GateDecision {
            probs: tape.constant(Tensor::full([t, n], 1.0 / n as f64)),
            selected,
            gate_values: tape.constant(Tensor::full([t, k], 1.0 / n as f64)),
            mask,
        }
    }

    #[test]
    fn unselected_mask_examples() {
        let mut tape = Tape::new();
        assert_eq!(
            unselected_mask(&decision(vec![vec![1]], 3, &mut tape)).data(),
            &[1.0, 0.0, 1.0]
        );
        assert_eq!(
            unselected_mask(&decision(vec![vec![0, 3]], 4, &mut tape)).data(),
            &[0.0, 1.0, 1.0, 0.0]
        );
        let degenerate = unselected_mask(&decision(vec![vec![0]], 1, &mut tape));
        assert_eq!(degenerate.data(), &[0.0]);
        assert!(matches!(
            aggregation_weights(&degenerate),
            Err(Error::DegenerateSelection { token: 0 })
        ));
    }

    #[test]
    fn aggregate_examples() {
        let mut tape = Tape::new();
        let s = tape.param(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
        let d = decision(vec![vec![0]], 2, &mut tape);
        let agg = aggregate_embeddings(&mut tape, &unselected_mask(&d), s).unwrap();
        assert_eq!(tape.value(agg).data(), &[0.0, 1.0]);

        let s3 = tape.param(Tensor::from_rows(&[&[1.0, 0.0], &[7.0, 7.0], &[0.0, 1.0]]).unwrap());
        let d = decision(vec![vec![1]], 3, &mut tape);
        let agg = aggregate_embeddings(&mut tape, &unselected_mask(&d), s3).unwrap();
        assert_eq!(tape.value(agg).data(), &[0.5, 0.5]);
    }

    fn identity_mlp(tape: &mut Tape, n: usize) -> SelectionMlp {
        SelectionMlp {
            w1: tape.param(Tensor::identity(n)),
            b1: tape.param(Tensor::zeros([n])),
            w2: tape.param(Tensor::identity(n)),
            b2: tape.param(Tensor::zeros([n])),
        }
    }

    #[test]
    fn identity_mlp_is_relu() {
        let mut tape = Tape::new();
        let s = tape.param(Tensor::from_rows(&[&[1.0, -2.0], &[3.0, -1.0], &[9.0, 9.0]]).unwrap());
        let d = decision(vec![vec![2]], 3, &mut tape);
        let mlp = identity_mlp(&mut tape, 2);
        let p = selection_embedding(&mut tape, &unselected_mask(&d), s, &mlp).unwrap();
        // aggregate [2, -1.5] → relu → [2, 0]; second identity layer keeps it
        assert_eq!(tape.value(p).data(), &[2.0, 0.0]);
    }

    #[test]
    fn combine_examples() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new([1, 2], vec![1.0, 2.0]).unwrap());
        let layers = tape.param(Tensor::new([2, 1], vec![3.0, 5.0]).unwrap());
        let zero = Projector {
            w: tape.param(Tensor::zeros([3, 2])),
            b: tape.param(Tensor::new([2], vec![0.5, -0.5]).unwrap()),
        };
        let k = combine_embeddings(&mut tape, p, 1, layers, &zero).unwrap();
        assert_eq!(tape.value(k).data(), &[0.5, -0.5]);

        let select = Projector {
            w: tape.param(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0]]).unwrap()),
            b: tape.param(Tensor::zeros([2])),
        };
        let k = combine_embeddings(&mut tape, p, 0, layers, &select).unwrap();
        assert_eq!(tape.value(k).data(), &[1.0, 2.0]);

        assert!(matches!(
            combine_embeddings(&mut tape, p, 2, layers, &select),
            Err(Error::Tensor(_))
        ));
    }

    #[test]
    fn combine_matches_affine_oracle() {
        let mut rng = Rng::new(21);
        let mut tape = Tape::new();
        let pt = rng.gaussian_tensor([2, 3], 1.0);
        let lt = rng.gaussian_tensor([3, 2], 1.0);
        let wt = rng.gaussian_tensor([5, 4], 1.0);
        let bt = rng.gaussian_tensor([4], 1.0);
        let p = tape.constant(pt.clone());
        let layers = tape.param(lt.clone());
        let proj = Projector {
            w: tape.param(wt.clone()),
            b: tape.param(bt.clone()),
        };
        let k = combine_embeddings(&mut tape, p, 2, layers, &proj).unwrap();
        for i in 0..2 {
            let cat: Vec<f64> = pt.row(i).iter().chain(lt.row(2)).copied().collect();
            for j in 0..4 {
                let e = bt.data()[j] + (0..5).map(|a| cat[a] * wt.at(a, j)).sum::<f64>();
                assert!((tape.value(k).at(i, j) - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn generate_examples() {
        let mut rng = Rng::new(3);
        let (h, b, tk) = (2, 1, 2);
        let mut tape = Tape::new();
        let wdt = rng.gaussian_tensor([h * b, tk], 1.0);
        let wut = rng.gaussian_tensor([b * h, tk], 1.0);
        let net = HyperNet {
            w_down: tape.param(wdt.clone()),
            w_up: tape.param(wut.clone()),
            hidden: h,
            bottleneck: b,
        };
        let e0 = tape.constant(Tensor::new([1, 2], vec![1.0, 0.0]).unwrap());
        let g = generate_hyperexpert(&mut tape, e0, &net).unwrap();
        let d = g.down_matrix(&tape, 0);
        assert_eq!(d.shape(), &[h, b]);
        assert_eq!(d.data(), &[wdt.at(0, 0), wdt.at(1, 0)]);

        let zero = tape.constant(Tensor::zeros([1, 2]));
        let g = generate_hyperexpert(&mut tape, zero, &net).unwrap();
        assert!(tape.value(g.down).data().iter().all(|v| *v == 0.0));
        assert!(tape.value(g.up).data().iter().all(|v| *v == 0.0));

        let kt = rng.gaussian_tensor([1, 2], 1.0);
        let k = tape.constant(kt.clone());
        let g = generate_hyperexpert(&mut tape, k, &net).unwrap();
        let (d, u) = (g.down_matrix(&tape, 0), g.up_matrix(&tape, 0));
        for r in 0..2 {
            let expect_d = wdt.at(r, 0) * kt.data()[0] + wdt.at(r, 1) * kt.data()[1];
            let expect_u = wut.at(r, 0) * kt.data()[0] + wut.at(r, 1) * kt.data()[1];
            assert!((d.data()[r] - expect_d).abs() < 1e-12);
            assert!((u.data()[r] - expect_u).abs() < 1e-12);
        }
        assert_eq!(u.shape(), &[1, 2]);

        let wide = tape.constant(Tensor::zeros([1, 3]));
        assert!(generate_hyperexpert(&mut tape, wide, &net).is_err());
    }

    #[test]
    fn hyperexpert_forward_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([1, 2], vec![1.0, 1.0]).unwrap());
        let gen = GeneratedExpert {
            down: tape.constant(Tensor::new([1, 2], vec![1.0, 1.0]).unwrap()),
            up: tape.constant(Tensor::new([1, 2], vec![1.0, 0.0]).unwrap()),
            hidden: 2,
            bottleneck: 1,
        };
        let y = hyperexpert_forward(&mut tape, x, &gen).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 0.0]);

        let silent = GeneratedExpert {
            up: tape.constant(Tensor::zeros([1, 2])),
            ..gen
        };
        let y = hyperexpert_forward(&mut tape, x, &silent).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));

        let x0 = tape.constant(Tensor::zeros([1, 2]));
        let y = hyperexpert_forward(&mut tape, x0, &gen).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
    }
}
