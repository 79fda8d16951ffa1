//! Switch-style sparse mixture-of-experts layers.
//!
//! A noisy top-k gate scores every token against `N` experts, keeps the
//! `K` most probable and mixes only those experts' outputs, weighted by
//! their raw softmax probabilities. The load-balancing loss and the
//! shared-MLP baseline (`MoE-Share`) live here as well.

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tape, Tensor, Var};

/// Gate weights and routing settings for one layer.
#[derive(Debug, Clone, Copy)]
pub struct Gate {
    /// `h×N` routing weights.
    pub w_gate: Var,
    /// `h×N` noise-scale weights.
    pub w_noise: Var,
    pub top_k: usize,
    pub noise_enabled: bool,
    /// Renormalize gate values over the selected experts.
    pub renormalize: bool,
}

/// Routing outcome for a batch of `T` tokens.
#[derive(Debug, Clone)]
pub struct GateDecision {
    /// `T×N` softmax distribution.
    pub probs: Var,
    /// Per token, the `K` chosen experts in descending probability.
    pub selected: Vec<Vec<usize>>,
    /// `T×K` weights applied to the chosen experts' outputs.
    pub gate_values: Var,
    /// `T×N` 0/1 indicator of the chosen experts.
    pub mask: Tensor,
}

impl GateDecision {
    pub fn num_tokens(&self) -> usize {
        self.selected.len()
    }

    pub fn num_experts(&self) -> usize {
        self.mask.shape()[1]
    }

    pub fn top_k(&self) -> usize {
        self.selected.first().map_or(0, Vec::len)
    }

    /// Tokens routed to each expert.
    pub fn expert_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_experts()];
        for row in &self.selected {
            for &e in row {
                counts[e] += 1;
            }
        }
        counts
    }
}

/// One feed-forward expert, `relu(x·W1)·W2`.
#[derive(Debug, Clone, Copy)]
pub struct Expert {
    /// `h×d_ff`
    pub w1: Var,
    /// `d_ff×h`
    pub w2: Var,
}

/// Indices of the `k` largest values, largest first; ties go to the lower index.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    // stable sort keeps ascending index order among equal values
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    idx.truncate(k);
    idx
}

/// Noisy top-k gating. Noise `ε·softplus(x·W_noise)` with `ε ~ N(0, 1)`
/// is added to the logits only when `training` and the gate enables it.
pub fn noisy_topk_gate(
    tape: &mut Tape,
    x: Var,
    gate: &Gate,
    rng: &mut Rng,
    training: bool,
) -> Result<GateDecision> {
    let n = tape.shape(gate.w_gate)[1];
    if gate.top_k == 0 || gate.top_k > n {
        return Err(Error::config(format!(
            "top_k = {} must lie in 1..={n}",
            gate.top_k
        )));
    }
    if tape.shape(gate.w_noise) != tape.shape(gate.w_gate) {
        return Err(Error::config("w_noise and w_gate shapes differ"));
    }
    let mut logits = tape.matmul(x, gate.w_gate)?;
    if training && gate.noise_enabled {
        let raw = tape.matmul(x, gate.w_noise)?;
        let scale = tape.softplus(raw);
        let shape = tape.shape(logits).to_vec();
        let eps = rng.gaussian_tensor(shape, 1.0);
        let eps = tape.constant(eps);
        let noise = tape.mul(eps, scale)?;
        logits = tape.add(logits, noise)?;
    }
    let probs = tape.softmax(logits);
    let (t, _) = tape.value(probs).dims2()?;
    let mut selected = Vec::with_capacity(t);
    let mut mask = Tensor::zeros([t, n]);
    for i in 0..t {
        let chosen = top_k_indices(tape.value(probs).row(i), gate.top_k);
        for &e in &chosen {
            mask.data_mut()[i * n + e] = 1.0;
        }
        selected.push(chosen);
    }
    let picks: Vec<(usize, usize)> = selected
        .iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().map(move |&e| (i, e)))
        .collect();
    let gate_values = if gate.renormalize {
        // softmax over the selected logits equals p_i / Σ_selected p_j
        let chosen = tape.gather(logits, &picks)?;
        let chosen = tape.reshape(chosen, &[t, gate.top_k])?;
        tape.softmax(chosen)
    } else {
        let chosen = tape.gather(probs, &picks)?;
        tape.reshape(chosen, &[t, gate.top_k])?
    };
    Ok(GateDecision {
        probs,
        selected,
        gate_values,
        mask,
    })
}

pub fn expert_forward(tape: &mut Tape, x: Var, expert: &Expert) -> Result<Var> {
    let hidden = tape.matmul(x, expert.w1)?;
    let hidden = tape.relu(hidden);
    Ok(tape.matmul(hidden, expert.w2)?)
}

/// `y_t = Σ_{e ∈ selected(t)} g_{t,e} · E_e(x_t)`. Each expert runs only on
/// the tokens routed to it.
pub fn moe_forward(
    tape: &mut Tape,
    x: Var,
    bank: &[Expert],
    decision: &GateDecision,
) -> Result<Var> {
    if bank.len() != decision.num_experts() {
        return Err(Error::config(format!(
            "gate routes over {} experts but the bank holds {}",
            decision.num_experts(),
            bank.len()
        )));
    }
    let (t, h) = tape.value(x).dims2()?;
    if t != decision.num_tokens() {
        return Err(Error::config(format!(
            "decision covers {} tokens, input has {t}",
            decision.num_tokens()
        )));
    }
    let mut y = tape.constant(Tensor::zeros([t, h]));
    for (e, expert) in bank.iter().enumerate() {
        let mut rows = Vec::new();
        let mut picks = Vec::new();
        for (i, chosen) in decision.selected.iter().enumerate() {
            if let Some(slot) = chosen.iter().position(|&c| c == e) {
                rows.push(i);
                picks.push((i, slot));
            }
        }
        if rows.is_empty() {
            continue;
        }
        let xe = tape.gather_rows(x, &rows)?;
        let out = expert_forward(tape, xe, expert)?;
        let weights = tape.gather(decision.gate_values, &picks)?;
        let out = tape.mul_col(out, weights)?;
        y = tape.index_add_rows(y, out, &rows)?;
    }
    Ok(y)
}

/// Auxiliary balancing loss `N · Σ_i f_i · P_i`, where `f_i` is the share
/// of routing assignments sent to expert `i` and `P_i` its mean router
/// probability. Equals 1 under uniform routing; differentiable through `P`.
pub fn load_balance_loss(tape: &mut Tape, decision: &GateDecision) -> Result<Var> {
    let n = decision.num_experts();
    let assignments = (decision.num_tokens() * decision.top_k()) as f64;
    let fractions: Vec<f64> = decision
        .expert_counts()
        .into_iter()
        .map(|c| c as f64 / assignments)
        .collect();
    let fractions = tape.constant(Tensor::new([1, n], fractions)?);
    let mean_probs = tape.mean_rows(decision.probs)?;
    let prod = tape.mul(mean_probs, fractions)?;
    let total = tape.sum(prod);
    Ok(tape.scale(total, n as f64))
}

/// Routed experts plus one expert-sized MLP applied to every token.
pub fn moe_share_forward(
    tape: &mut Tape,
    x: Var,
    bank: &[Expert],
    shared: &Expert,
    decision: &GateDecision,
) -> Result<Var> {
    let routed = moe_forward(tape, x, bank, decision)?;
    let common = expert_forward(tape, x, shared)?;
    Ok(tape.add(routed, common)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gate_with_logits(tape: &mut Tape, logits: &[f64], k: usize) -> (Var, Gate) {
        // x = I, so x·W_g reproduces W_g's rows as logits
        let n = logits.len();
        let x = tape.constant(Tensor::identity(1));
        let w_gate = tape.param(Tensor::new([1, n], logits.to_vec()).unwrap());
        let w_noise = tape.param(Tensor::zeros([1, n]));
        let gate = Gate {
            w_gate,
            w_noise,
            top_k: k,
            noise_enabled: false,
            renormalize: false,
        };
        (x, gate)
    }

    #[test]
    fn top1_picks_largest_probability() {
        let mut tape = Tape::new();
        let (x, gate) = gate_with_logits(&mut tape, &[0.1, 0.7, 0.2], 1);
        let d = noisy_topk_gate(&mut tape, x, &gate, &mut Rng::new(0), true).unwrap();
        assert_eq!(d.selected, vec![vec![1]]);
        let g = tape.value(d.gate_values).data()[0];
        assert!((g - 0.46396).abs() < 1e-4);
        assert_eq!(d.mask.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let mut tape = Tape::new();
        let (x, gate) = gate_with_logits(&mut tape, &[0.3, 0.3, 0.3, 0.3], 1);
        let d = noisy_topk_gate(&mut tape, x, &gate, &mut Rng::new(0), false).unwrap();
        assert_eq!(d.selected, vec![vec![0]]);
        assert_eq!(top_k_indices(&[1.0, 2.0, 2.0, 0.0], 2), vec![1, 2]);
    }

    #[test]
    fn k_above_n_is_config_error() {
        let mut tape = Tape::new();
        let (x, gate) = gate_with_logits(&mut tape, &[0.0, 0.0], 3);
        let err = noisy_topk_gate(&mut tape, x, &gate, &mut Rng::new(0), false).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn noisy_gate_is_seed_deterministic() {
        let run = || {
            let mut rng = Rng::new(5);
            let mut tape = Tape::new();
            let x = tape.constant(rng.gaussian_tensor([6, 4], 1.0));
            let gate = Gate {
                w_gate: tape.param(rng.gaussian_tensor([4, 3], 1.0)),
                w_noise: tape.param(rng.gaussian_tensor([4, 3], 1.0)),
                top_k: 1,
                noise_enabled: true,
                renormalize: false,
            };
            let d = noisy_topk_gate(&mut tape, x, &gate, &mut rng, true).unwrap();
            (d.selected.clone(), tape.value(d.probs).clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn noise_only_in_training() {
        let mut rng = Rng::new(9);
        let mut tape = Tape::new();
        let x = tape.constant(rng.gaussian_tensor([5, 3], 1.0));
        let gate = Gate {
            w_gate: tape.param(rng.gaussian_tensor([3, 4], 1.0)),
            w_noise: tape.param(rng.gaussian_tensor([3, 4], 1.0)),
            top_k: 2,
            noise_enabled: true,
            renormalize: false,
        };
        let a = noisy_topk_gate(&mut tape, x, &gate, &mut Rng::new(1), false).unwrap();
        let b = noisy_topk_gate(&mut tape, x, &gate, &mut Rng::new(2), false).unwrap();
        assert_eq!(tape.value(a.probs), tape.value(b.probs));
        let c = noisy_topk_gate(&mut tape, x, &gate, &mut Rng::new(1), true).unwrap();
        assert_ne!(tape.value(a.probs), tape.value(c.probs));
    }

    #[test]
    fn renormalized_gates_sum_to_one() {
        let mut rng = Rng::new(4);
        let mut tape = Tape::new();
        let x = tape.constant(rng.gaussian_tensor([5, 3], 1.0));
        let gate = Gate {
            w_gate: tape.param(rng.gaussian_tensor([3, 4], 1.0)),
            w_noise: tape.param(Tensor::zeros([3, 4])),
            top_k: 2,
            noise_enabled: false,
            renormalize: true,
        };
        let d = noisy_topk_gate(&mut tape, x, &gate, &mut rng, false).unwrap();
        let probs = tape.value(d.probs).clone();
        let g = tape.value(d.gate_values);
        for (t, chosen) in d.selected.iter().enumerate() {
            let total: f64 = chosen.iter().map(|&e| probs.at(t, e)).sum();
            for (k, &e) in chosen.iter().enumerate() {
                assert!((g.at(t, k) - probs.at(t, e) / total).abs() < 1e-12);
            }
        }
    }

    fn identity_expert(tape: &mut Tape, h: usize) -> Expert {
        Expert {
            w1: tape.param(Tensor::identity(h)),
            w2: tape.param(Tensor::identity(h)),
        }
    }

    #[test]
    fn expert_forward_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([1, 2], vec![1.0, 0.0]).unwrap());
        let e = identity_expert(&mut tape, 2);
        let y = expert_forward(&mut tape, x, &e).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);

        let zero = Expert {
            w1: tape.param(Tensor::zeros([2, 3])),
            w2: tape.param(Tensor::full([3, 2], 1.5)),
        };
        let xr = tape.constant(Tensor::new([1, 2], vec![-3.0, 2.0]).unwrap());
        let y = expert_forward(&mut tape, xr, &zero).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));

        let x0 = tape.constant(Tensor::zeros([1, 2]));
        let w = Expert {
            w1: tape.param(Tensor::full([2, 3], 0.7)),
            w2: tape.param(Tensor::full([3, 2], -0.2)),
        };
        let y = expert_forward(&mut tape, x0, &w).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));

        let bad = Expert {
            w1: tape.param(Tensor::zeros([3, 3])),
            w2: tape.param(Tensor::zeros([3, 2])),
        };
        assert!(expert_forward(&mut tape, x, &bad).is_err());
    }

    /// Decision that routes token `t` to `experts[t]` with gate value 1.
    fn forced_decision(tape: &mut Tape, experts: &[usize], n: usize) -> GateDecision {
        let t = experts.len();
        let mut mask = Tensor::zeros([t, n]);
        for (i, &e) in experts.iter().enumerate() {
            mask.data_mut()[i * n + e] = 1.0;
        }
        let probs = tape.constant(mask.clone());
        GateDecision {
            probs,
            selected: experts.iter().map(|&e| vec![e]).collect(),
            gate_values: tape.constant(Tensor::full([t, 1], 1.0)),
            mask,
        }
    }

    #[test]
    fn moe_identity_expert_with_unit_gate() {
        let mut tape = Tape::new();
        let xt = Rng::new(1).gaussian_tensor([3, 2], 1.0);
        let x = tape.constant(xt.clone());
        let bank = vec![identity_expert(&mut tape, 2), identity_expert(&mut tape, 2)];
        let d = forced_decision(&mut tape, &[0, 1, 0], 2);
        let y = moe_forward(&mut tape, x, &bank, &d).unwrap();
        // relu(x)·I: identity on the non-negative part
        for (o, i) in tape.value(y).data().iter().zip(xt.data()) {
            assert_eq!(*o, i.max(0.0));
        }
        let xp = tape.constant(Tensor::new([1, 2], vec![0.5, 2.0]).unwrap());
        let d1 = forced_decision(&mut tape, &[1], 2);
        let y = moe_forward(&mut tape, xp, &bank, &d1).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 2.0]);
    }

    #[test]
    fn moe_zero_experts_give_zero() {
        let mut rng = Rng::new(2);
        let mut tape = Tape::new();
        let x = tape.constant(rng.gaussian_tensor([4, 3], 1.0));
        let bank: Vec<Expert> = (0..3)
            .map(|_| Expert {
                w1: tape.param(rng.gaussian_tensor([3, 5], 1.0)),
                w2: tape.param(Tensor::zeros([5, 3])),
            })
            .collect();
        let gate = Gate {
            w_gate: tape.param(rng.gaussian_tensor([3, 3], 1.0)),
            w_noise: tape.param(Tensor::zeros([3, 3])),
            top_k: 1,
            noise_enabled: false,
            renormalize: false,
        };
        let d = noisy_topk_gate(&mut tape, x, &gate, &mut rng, false).unwrap();
        let y = moe_forward(&mut tape, x, &bank, &d).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn moe_matches_dense_oracle() {
        let mut rng = Rng::new(8);
        let (t, h, f, n) = (5, 3, 4, 4);
        let mut tape = Tape::new();
        let xt = rng.gaussian_tensor([t, h], 1.0);
        let x = tape.constant(xt.clone());
        let weights: Vec<(Tensor, Tensor)> = (0..n)
            .map(|_| (rng.gaussian_tensor([h, f], 1.0), rng.gaussian_tensor([f, h], 1.0)))
            .collect();
        let bank: Vec<Expert> = weights
            .iter()
            .map(|(a, b)| Expert {
                w1: tape.param(a.clone()),
                w2: tape.param(b.clone()),
            })
            .collect();
        let gate = Gate {
            w_gate: tape.param(rng.gaussian_tensor([h, n], 1.0)),
            w_noise: tape.param(Tensor::zeros([h, n])),
            top_k: 2,
            noise_enabled: false,
            renormalize: false,
        };
        let d = noisy_topk_gate(&mut tape, x, &gate, &mut rng, false).unwrap();
        let y = moe_forward(&mut tape, x, &bank, &d).unwrap();
        let probs = tape.value(d.probs).clone();

        // dense oracle: every expert on every token, non-selected weights zeroed
        for i in 0..t {
            let mut expect = vec![0.0; h];
            for (e, (w1, w2)) in weights.iter().enumerate() {
                let p = if d.selected[i].contains(&e) { probs.at(i, e) } else { 0.0 };
                let mut hid = vec![0.0; f];
                for j in 0..f {
                    hid[j] = (0..h).map(|a| xt.at(i, a) * w1.at(a, j)).sum::<f64>().max(0.0);
                }
                for c in 0..h {
                    expect[c] += p * (0..f).map(|j| hid[j] * w2.at(j, c)).sum::<f64>();
                }
            }
            for c in 0..h {
                assert!((tape.value(y).at(i, c) - expect[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn moe_rejects_bank_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 2]));
        let bank = vec![identity_expert(&mut tape, 2)];
        let d = forced_decision(&mut tape, &[1], 2);
        assert!(matches!(
            moe_forward(&mut tape, x, &bank, &d),
            Err(Error::Config(_))
        ));
    }

    fn decision_from_probs(tape: &mut Tape, probs: &[&[f64]], routed: &[usize]) -> GateDecision {
        let mut d = forced_decision(tape, routed, probs[0].len());
        d.probs = tape.param(Tensor::from_rows(probs).unwrap());
        d
    }

    #[test]
    fn load_balance_examples() {
        let mut tape = Tape::new();
        let p = [0.25; 4];
        let d = decision_from_probs(&mut tape, &[&p, &p, &p, &p], &[0, 1, 2, 3]);
        let l = load_balance_loss(&mut tape, &d).unwrap();
        assert_eq!(tape.value(l).data()[0], 1.0);

        let one = [1.0, 0.0, 0.0, 0.0];
        let d = decision_from_probs(&mut tape, &[&one, &one, &one], &[0, 0, 0]);
        let l = load_balance_loss(&mut tape, &d).unwrap();
        assert_eq!(tape.value(l).data()[0], 4.0);

        // f = [0.75, 0.25], P = [0.6, 0.4]: 2·(0.45 + 0.1) = 1.1
        let d = decision_from_probs(
            &mut tape,
            &[&[0.7, 0.3], &[0.6, 0.4], &[0.9, 0.1], &[0.2, 0.8]],
            &[0, 0, 0, 1],
        );
        let l = load_balance_loss(&mut tape, &d).unwrap();
        assert!((tape.value(l).data()[0] - 1.1).abs() < 1e-12);
        tape.backward(l).unwrap();
        // dL/dp_{t,i} = N · f_i / T
        let g = tape.grad(d.probs).unwrap();
        assert!((g[0] - 2.0 * 0.75 / 4.0).abs() < 1e-12);
        assert!((g[1] - 2.0 * 0.25 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn moe_share_examples() {
        let mut rng = Rng::new(6);
        let mut tape = Tape::new();
        let x = tape.constant(rng.gaussian_tensor([3, 2], 1.0));
        let bank: Vec<Expert> = (0..2)
            .map(|_| Expert {
                w1: tape.param(rng.gaussian_tensor([2, 4], 1.0)),
                w2: tape.param(rng.gaussian_tensor([4, 2], 1.0)),
            })
            .collect();
        let d = forced_decision(&mut tape, &[0, 1, 1], 2);
        let plain = moe_forward(&mut tape, x, &bank, &d).unwrap();

        let silent = Expert {
            w1: tape.param(rng.gaussian_tensor([2, 4], 1.0)),
            w2: tape.param(Tensor::zeros([4, 2])),
        };
        let y = moe_share_forward(&mut tape, x, &bank, &silent, &d).unwrap();
        assert_eq!(tape.value(y), tape.value(plain));

        let shared = Expert {
            w1: tape.param(rng.gaussian_tensor([2, 4], 1.0)),
            w2: tape.param(rng.gaussian_tensor([4, 2], 1.0)),
        };
        let y = moe_share_forward(&mut tape, x, &bank, &shared, &d).unwrap();
        let common = expert_forward(&mut tape, x, &shared).unwrap();
        let sum: Vec<f64> = tape
            .value(plain)
            .data()
            .iter()
            .zip(tape.value(common).data())
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(tape.value(y).data(), &sum[..]);

        let zero_bank: Vec<Expert> = (0..2)
            .map(|_| Expert {
                w1: tape.param(Tensor::zeros([2, 2])),
                w2: tape.param(Tensor::zeros([2, 2])),
            })
            .collect();
        let xp = tape.constant(Tensor::new([1, 2], vec![0.3, 1.2]).unwrap());
        let d1 = forced_decision(&mut tape, &[0], 2);
        let id = identity_expert(&mut tape, 2);
        let y = moe_share_forward(&mut tape, xp, &zero_bank, &id, &d1).unwrap();
        assert_eq!(tape.value(y).data(), &[0.3, 1.2]);
    }
}
