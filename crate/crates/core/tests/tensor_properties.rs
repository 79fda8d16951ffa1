use hypermoe_core::tensor::{finite_diff_grad, relative_error, Rng, Tape, Tensor, Var};
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

const M: usize = 3;
const N: usize = 4;

/// Leaf tensors of a random graph: a, b (M×N), w (N×N), w2 (2N×N),
/// r (1×N), c (M×1), v (M×N·N).
fn leaf_shapes() -> Vec<Vec<usize>> {
    vec![
        vec![M, N],
        vec![M, N],
        vec![N, N],
        vec![2 * N, N],
        vec![1, N],
        vec![M, 1],
        vec![M, N * N],
    ]
}

const STEP_OPS: u8 = 20;

/// Replays `ops` on fresh leaves and returns the scalar output.
fn build(tape: &mut Tape, leaves: &[Tensor], ops: &[u8], head: u8) -> (Var, Vec<Var>) {
    let l: Vec<Var> = leaves.iter().map(|t| tape.param(t.clone())).collect();
    let (a, b, w, w2, r, c, v) = (l[0], l[1], l[2], l[3], l[4], l[5], l[6]);
    let mut cur = a;
    for &op in ops {
        cur = match op {
            0 => tape.matmul(cur, w).unwrap(),
            1 => tape.add(cur, b).unwrap(),
            2 => tape.sub(cur, b).unwrap(),
            3 => tape.mul(cur, b).unwrap(),
            4 => tape.scale(cur, 0.7),
            5 => tape.relu(cur),
            6 => tape.softplus(cur),
            7 => tape.add_row(cur, r).unwrap(),
            8 => tape.mul_row(cur, r).unwrap(),
            9 => tape.mul_col(cur, c).unwrap(),
            10 => tape.softmax(cur),
            // residual, like a pre-norm block; a bare norm is blind to row scale
            11 => {
                let n = tape.layer_norm(cur, 1e-5);
                tape.add(n, cur).unwrap()
            }
            12 => {
                let t = tape.transpose(cur).unwrap();
                tape.reshape(t, &[M, N]).unwrap()
            }
            13 => tape.gather_rows(cur, &[2, 0, 2]).unwrap(),
            14 => {
                let src = tape.gather_rows(cur, &[1, 2]).unwrap();
                tape.index_add_rows(b, src, &[0, 0]).unwrap()
            }
            15 => {
                let cat = tape.concat_cols(cur, b).unwrap();
                tape.matmul(cat, w2).unwrap()
            }
            16 => tape.rowwise_vecmat(cur, v).unwrap(),
            17 => {
                let q = tape.reshape(cur, &[M, 1, N]).unwrap();
                let k = tape.reshape(b, &[M, 1, N]).unwrap();
                let kt = tape.transpose(k).unwrap();
                let s = tape.matmul(q, kt).unwrap();
                let s = tape.reshape(s, &[M, 1]).unwrap();
                tape.mul_col(cur, s).unwrap()
            }
            18 => {
                let mean = tape.mean_rows(cur).unwrap();
                tape.add_row(b, mean).unwrap()
            }
            _ => {
                let picked = tape.gather(cur, &[(0, 3), (1, 1), (2, 0)]).unwrap();
                tape.mul_col(b, picked).unwrap()
            }
        };
    }
    // weighted, so row-normalising ops do not make the output constant
    let out = match head % 4 {
        0 => {
            let weighted = tape.mul(cur, b).unwrap();
            tape.sum(weighted)
        }
        1 => {
            let weighted = tape.mul(cur, a).unwrap();
            tape.mean(weighted)
        }
        2 => tape.mse(cur, b).unwrap(),
        _ => tape.cross_entropy(cur, &[1, 3, 0]).unwrap(),
    };
    (out, l)
}

fn leaves_from(seed: u64) -> Vec<Tensor> {
    let mut rng = Rng::new(seed);
    leaf_shapes()
        .into_iter()
        .map(|s| rng.uniform_tensor(s, -1.0, 1.0))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(160))]

    #[test]
    fn random_graphs_match_finite_differences(
        ops in prop::collection::vec(0u8..STEP_OPS, 1..6),
        head in 0u8..4,
        seed in any::<u64>(),
    ) {
        let leaves = leaves_from(seed);
        let mut tape = Tape::new();
        let (out, vars) = build(&mut tape, &leaves, &ops, head);
        prop_assume!(tape.value(out).is_finite());
        tape.backward(out).unwrap();
        for (i, leaf) in leaves.iter().enumerate() {
            let analytic = tape.grad(vars[i]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; leaf.numel()]);
            let numeric = finite_diff_grad(
                |x| {
                    let mut probe = leaves.clone();
                    probe[i] = x.clone();
                    let mut t = Tape::new();
                    let (o, _) = build(&mut t, &probe, &ops, head);
                    t.value(o).data()[0]
                },
                leaf,
                1e-5,
            );
            let err = relative_error(&analytic, numeric.data());
            prop_assert!(err < 1e-4, "leaf {} ops {:?} head {} err {:.3e}", i, ops, head, err);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(
        rows in 1usize..5,
        cols in 1usize..9,
        scale in prop::sample::select(vec![1e-3, 1.0, 30.0, 700.0]),
        seed in any::<u64>(),
    ) {
        let x = Rng::new(seed).uniform_tensor([rows, cols], -scale, scale);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.softmax(v);
        for r in 0..rows {
            let total: f64 = tape.value(s).row(r).iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
        }
        prop_assert!(tape.value(s).is_finite());
    }

    #[test]
    fn replay_is_bitwise_deterministic(
        ops in prop::collection::vec(0u8..STEP_OPS, 1..6),
        seed in any::<u64>(),
    ) {
        let run = || {
            let mut tape = Tape::new();
            let (out, vars) = build(&mut tape, &leaves_from(seed), &ops, 0);
            tape.backward(out).unwrap();
            let grads: Vec<u64> = (0..7)
                .flat_map(|i| tape.grad(vars[i]).unwrap_or(&[]).to_vec())
                .map(f64::to_bits)
                .collect();
            (tape.value(out).data()[0].to_bits(), grads)
        };
        prop_assert_eq!(run(), run());
    }
}

#[test]
fn every_step_op_is_exercised() {
    // each op alone, under each head
    for op in 0..STEP_OPS {
        for head in 0..4 {
            let leaves = leaves_from(op as u64 * 7 + head as u64);
            let mut tape = Tape::new();
            let (out, vars) = build(&mut tape, &leaves, &[op], head);
            tape.backward(out).unwrap();
            for (i, leaf) in leaves.iter().enumerate() {
                let analytic = tape
                    .grad(vars[i])
                    .map(<[f64]>::to_vec)
                    .unwrap_or(vec![0.0; leaf.numel()]);
                let numeric = finite_diff_grad(
                    |x| {
                        let mut probe = leaves.clone();
                        probe[i] = x.clone();
                        let mut t = Tape::new();
                        let (o, _) = build(&mut t, &probe, &[op], head);
                        t.value(o).data()[0]
                    },
                    leaf,
                    1e-5,
                );
                let err = relative_error(&analytic, numeric.data());
                assert!(err < 1e-4, "op {op} head {head} leaf {i}: {err:.3e}");
            }
        }
    }
}

#[test]
fn gaussian_stream_passes_ks_test() {
    let n = 100_000;
    let mut rng = Rng::new(2024);
    let mut xs: Vec<f64> = (0..n).map(|_| rng.gaussian()).collect();
    xs.sort_by(f64::total_cmp);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let d = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let cdf = normal.cdf(x);
            (cdf - i as f64 / n as f64).max((i + 1) as f64 / n as f64 - cdf)
        })
        .fold(0.0, f64::max);
    // asymptotic Kolmogorov critical value at the 0.01 level
    let critical = 1.6276 / (n as f64).sqrt();
    assert!(d < critical, "KS statistic {d} exceeds {critical}");
}

#[test]
fn forked_streams_are_uncorrelated() {
    let root = Rng::new(5);
    let (mut a, mut b) = (root.fork("a"), root.fork("b"));
    let n = 20_000;
    let xs: Vec<(f64, f64)> = (0..n).map(|_| (a.gaussian(), b.gaussian())).collect();
    let corr = xs.iter().map(|(x, y)| x * y).sum::<f64>() / n as f64;
    // 4 standard errors of a product of independent unit normals
    assert!(corr.abs() < 4.0 / (n as f64).sqrt());
}
