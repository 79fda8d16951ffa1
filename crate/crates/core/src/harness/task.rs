use crate::error::Result;
use crate::harness::config::TaskConfig;
use crate::tensor::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

/// A batch of fixed-length sequences, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    /// Scalar channel per position (regression inputs; zero elsewhere).
    pub values: Vec<f64>,
    pub seq_len: usize,
    pub targets: Targets,
    /// Group (or selector) of each sequence.
    pub groups: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    config: TaskConfig,
    /// Piecewise regression: knot values per function.
    knots: Vec<Vec<f64>>,
}

impl SyntheticTask {
    pub fn new(config: &TaskConfig) -> Result<Self> {
        let knots = match config {
            TaskConfig::PiecewiseRegression {
                functions,
                knots,
                seed,
                ..
            } => {
                let mut rng = Rng::new(*seed).fork("knots");
                (0..*functions)
                    .map(|_| (0..*knots).map(|_| 2.0 * rng.uniform() - 1.0).collect())
                    .collect()
            }
            TaskConfig::GroupedModularAddition { .. } => Vec::new(),
        };
        Ok(Self {
            config: config.clone(),
            knots,
        })
    }

    pub fn config(&self) -> &TaskConfig {
        &self.config
    }

    pub fn id(&self) -> &'static str {
        self.config.id()
    }

    pub fn is_classification(&self) -> bool {
        matches!(self.config, TaskConfig::GroupedModularAddition { .. })
    }

    pub fn seq_len(&self) -> usize {
        match self.config {
            TaskConfig::GroupedModularAddition { .. } => 4,
            TaskConfig::PiecewiseRegression { .. } => 2,
        }
    }

    pub fn vocab_size(&self) -> usize {
        match &self.config {
            TaskConfig::GroupedModularAddition {
                moduli,
                repeats,
                distractors,
                ..
            } => moduli.len() + repeats * moduli.iter().max().unwrap() + distractors,
            TaskConfig::PiecewiseRegression { functions, .. } => functions + 1,
        }
    }

    /// Classes for classification, 1 for regression.
    pub fn num_outputs(&self) -> usize {
        match &self.config {
            TaskConfig::GroupedModularAddition { moduli, .. } => *moduli.iter().max().unwrap(),
            TaskConfig::PiecewiseRegression { .. } => 1,
        }
    }

    pub fn num_groups(&self) -> usize {
        match &self.config {
            TaskConfig::GroupedModularAddition { moduli, .. } => moduli.len(),
            TaskConfig::PiecewiseRegression { functions, .. } => *functions,
        }
    }

    /// Draws `batch` sequences from the training split.
    pub fn generate_task_batch(&self, rng: &mut Rng, batch: usize) -> Batch {
        self.sample(Split::Train, rng, batch)
    }

    pub fn sample(&self, split: Split, rng: &mut Rng, batch: usize) -> Batch {
        assert!(batch >= 1, "batch must be positive");
        let seq = self.seq_len();
        let mut out = Batch {
            tokens: Vec::with_capacity(batch * seq),
            values: vec![0.0; batch * seq],
            seq_len: seq,
            targets: if self.is_classification() {
                Targets::Classes(Vec::with_capacity(batch))
            } else {
                Targets::Values(Vec::with_capacity(batch))
            },
            groups: Vec::with_capacity(batch),
        };
        for row in 0..batch {
            match &self.config {
                TaskConfig::GroupedModularAddition {
                    moduli,
                    repeats,
                    distractors,
                    holdout,
                } => {
                    let groups = moduli.len();
                    let numbers = repeats * moduli.iter().max().unwrap();
                    let g = rng.below(groups);
                    let m = moduli[g];
                    let a = rng.below(repeats * m);
                    let b = rng.below(repeats * m);
                    let z = pick_distractor(rng, split, g, a, b, *distractors, *holdout);
                    out.tokens
                        .extend([g, groups + a, groups + b, groups + numbers + z]);
                    if let Targets::Classes(t) = &mut out.targets {
                        t.push((a + b) % m);
                    }
                    out.groups.push(g);
                }
                TaskConfig::PiecewiseRegression {
                    functions,
                    grid,
                    holdout,
                    ..
                } => {
                    let j = rng.below(*functions);
                    let cell = pick_cell(rng, split, *grid, *holdout);
                    let x = -1.0 + 2.0 * (cell as f64 + 0.5) / *grid as f64;
                    out.tokens.extend([j, *functions]);
                    out.values[row * seq + 1] = x;
                    if let Targets::Values(t) = &mut out.targets {
                        t.push(self.evaluate_function(j, x));
                    }
                    out.groups.push(j);
                }
            }
        }
        out
    }

    /// `f_j(x)`: linear interpolation between evenly spaced knots on `[-1, 1]`.
    pub fn evaluate_function(&self, j: usize, x: f64) -> f64 {
        let knots = &self.knots[j];
        let segments = (knots.len() - 1) as f64;
        let pos = ((x.clamp(-1.0, 1.0) + 1.0) / 2.0) * segments;
        let i = (pos.floor() as usize).min(knots.len() - 2);
        let frac = pos - i as f64;
        knots[i] * (1.0 - frac) + knots[i + 1] * frac
    }

    /// Whether a modular-addition sequence `(g, a, b, z)` belongs to the eval split.
    pub fn is_eval_sequence(g: usize, a: usize, b: usize, z: usize, holdout: usize) -> bool {
        (z + 7 * a + 13 * b + 3 * g) % holdout == 0
    }
}

fn pick_distractor(
    rng: &mut Rng,
    split: Split,
    g: usize,
    a: usize,
    b: usize,
    distractors: usize,
    holdout: usize,
) -> usize {
    let offset = (7 * a + 13 * b + 3 * g) % holdout;
    let residue = match split {
        Split::Eval => 0,
        Split::Train => 1 + rng.below(holdout - 1),
    };
    let block = rng.below(distractors / holdout);
    block * holdout + (residue + holdout - offset) % holdout
}

fn pick_cell(rng: &mut Rng, split: Split, grid: usize, holdout: usize) -> usize {
    let blocks = grid.div_ceil(holdout);
    loop {
        let block = rng.below(blocks);
        let cell = match split {
            Split::Eval => block * holdout,
            Split::Train => block * holdout + 1 + rng.below(holdout - 1),
        };
        if cell < grid {
            return cell;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn modular(moduli: Vec<usize>) -> SyntheticTask {
        SyntheticTask::new(&TaskConfig::GroupedModularAddition {
            moduli,
            repeats: 2,
            distractors: 8,
            holdout: 4,
        })
        .unwrap()
    }

    #[test]
    fn targets_follow_group_modulus() {
        let task = modular(vec![5, 7]);
        let batch = task.sample(Split::Train, &mut Rng::new(3), 500);
        let Targets::Classes(targets) = &batch.targets else { panic!() };
        for (i, &y) in targets.iter().enumerate() {
            let toks = &batch.tokens[i * 4..i * 4 + 4];
            let g = toks[0];
            let a = toks[1] - 2;
            let b = toks[2] - 2;
            assert_eq!(y, (a + b) % [5, 7][g]);
            assert!(y < [5, 7][g]);
        }
        // group 0 with modulus 5: (3, 4) → 2
        assert_eq!((3 + 4) % 5, 2);
    }

    #[test]
    fn splits_are_disjoint() {
        let task = modular(vec![5, 7]);
        let numbers = 14;
        for (split, want) in [(Split::Train, false), (Split::Eval, true)] {
            let batch = task.sample(split, &mut Rng::new(1), 2000);
            for row in batch.tokens.chunks(4) {
                let (g, a, b, z) = (row[0], row[1] - 2, row[2] - 2, row[3] - 2 - numbers);
                assert!(z < 8);
                assert_eq!(SyntheticTask::is_eval_sequence(g, a, b, z, 4), want);
            }
        }
    }

    #[test]
    fn regression_splits_are_disjoint() {
        let task = SyntheticTask::new(&TaskConfig::by_name("piecewise_regression").unwrap()).unwrap();
        let grid = 4096.0;
        let cells = |split| {
            let b = task.sample(split, &mut Rng::new(2), 1000);
            b.values
                .chunks(2)
                .map(|r| ((r[1] + 1.0) / 2.0 * grid - 0.5).round() as usize)
                .collect::<Vec<_>>()
        };
        assert!(cells(Split::Train).iter().all(|c| c % 8 != 0));
        assert!(cells(Split::Eval).iter().all(|c| c % 8 == 0));
    }

    #[test]
    fn piecewise_hits_knots() {
        let task = SyntheticTask::new(&TaskConfig::PiecewiseRegression {
            functions: 2,
            knots: 3,
            grid: 64,
            holdout: 4,
            seed: 9,
        })
        .unwrap();
        let k = task.knots[1].clone();
        assert!((task.evaluate_function(1, -1.0) - k[0]).abs() < 1e-12);
        assert!((task.evaluate_function(1, 0.0) - k[1]).abs() < 1e-12);
        assert!((task.evaluate_function(1, 1.0) - k[2]).abs() < 1e-12);
        assert!((task.evaluate_function(1, 0.5) - (k[1] + k[2]) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn fixed_seed_fixed_batch() {
        let task = modular(vec![5, 7, 9]);
        let a = task.generate_task_batch(&mut Rng::new(11), 64);
        let b = task.generate_task_batch(&mut Rng::new(11), 64);
        assert_eq!(a, b);
    }
}
