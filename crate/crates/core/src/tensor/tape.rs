use super::{gemm, gemm_nt, gemm_tn, sigmoid, softmax_row, softplus, Tensor, TensorError, TensorResult};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
///
/// Returns one gradient buffer per input, each the length of that input.
pub trait BackwardRule: Send {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    AddRow,
    MulRow,
    MulCol,
    Relu,
    Softplus,
    Softmax,
    LayerNorm,
    Transpose,
    Reshape,
    GatherRows,
    IndexAddRows,
    ConcatCols,
    Gather,
    RowwiseVecMat,
    MeanRows,
    Sum,
    Mean,
    Mse,
    CrossEntropy,
    Custom,
}

/// Scales the gradient an op sends to one of its inputs. Used to check
/// that gradient audits catch a broken backward rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fault {
    pub op: OpKind,
    pub input: usize,
    pub scale: f64,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    AddRow { a: Var, row: Var },
    MulRow { a: Var, row: Var },
    MulCol { a: Var, col: Var },
    Relu { a: Var },
    Softplus { a: Var },
    Softmax { a: Var },
    LayerNorm { a: Var, inv_std: Vec<f64> },
    Transpose { a: Var },
    Reshape { a: Var },
    GatherRows { a: Var, rows: Vec<usize> },
    IndexAddRows { base: Var, src: Var, rows: Vec<usize> },
    ConcatCols { a: Var, b: Var },
    Gather { a: Var, picks: Vec<(usize, usize)> },
    RowwiseVecMat { x: Var, w: Var },
    MeanRows { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    Mse { a: Var, b: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Custom { inputs: Vec<Var>, rule: Box<dyn BackwardRule> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::AddRow { .. } => OpKind::AddRow,
            Op::MulRow { .. } => OpKind::MulRow,
            Op::MulCol { .. } => OpKind::MulCol,
            Op::Relu { .. } => OpKind::Relu,
            Op::Softplus { .. } => OpKind::Softplus,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::IndexAddRows { .. } => OpKind::IndexAddRows,
            Op::ConcatCols { .. } => OpKind::ConcatCols,
            Op::Gather { .. } => OpKind::Gather,
            Op::RowwiseVecMat { .. } => OpKind::RowwiseVecMat,
            Op::MeanRows { .. } => OpKind::MeanRows,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::Mse { .. } => OpKind::Mse,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Custom { .. } => OpKind::Custom,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b }
            | Op::Mse { a, b }
            | Op::ConcatCols { a, b } => vec![*a, *b],
            Op::AddRow { a, row } | Op::MulRow { a, row } => vec![*a, *row],
            Op::MulCol { a, col } => vec![*a, *col],
            Op::IndexAddRows { base, src, .. } => vec![*base, *src],
            Op::RowwiseVecMat { x, w } => vec![*x, *w],
            Op::Scale { a, .. }
            | Op::Relu { a }
            | Op::Softplus { a }
            | Op::Softmax { a }
            | Op::LayerNorm { a, .. }
            | Op::Transpose { a }
            | Op::Reshape { a }
            | Op::GatherRows { a, .. }
            | Op::Gather { a, .. }
            | Op::MeanRows { a }
            | Op::Sum { a }
            | Op::Mean { a } => vec![*a],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of differentiable operations.
///
/// Every op appends one node whose inputs are earlier nodes, so the node
/// order is a topological order and `backward` is a single reverse sweep.
/// A tape is single-threaded; build one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn last_dim(t: &Tensor) -> usize {
    *t.shape().last().unwrap()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Fault) -> Self {
        Self {
            nodes: Vec::new(),
            fault: Some(fault),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn zero_grads(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    /// Records a leaf, keeping the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    fn push(&mut self, mut value: Tensor, op: Op) -> Var {
        let rg = op.inputs().iter().any(|v| self.requires_grad(*v));
        value.set_requires_grad(rg);
        value.zero_grad();
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, rule: Box<dyn BackwardRule>) -> Var {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
        )
    }

    /// Matrix product of rank-2 operands, or a batched product of rank-3
    /// operands sharing the leading extent.
    pub fn matmul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = match (ta.shape(), tb.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => {
                let mut out = vec![0.0; m * n];
                gemm(ta.data(), tb.data(), &mut out, m, k, n);
                Tensor::new([m, n], out)?
            }
            (&[bs, m, k], &[bs2, k2, n]) if bs == bs2 && k == k2 => {
                let mut out = vec![0.0; bs * m * n];
                for i in 0..bs {
                    gemm(
                        &ta.data()[i * m * k..(i + 1) * m * k],
                        &tb.data()[i * k * n..(i + 1) * k * n],
                        &mut out[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
                Tensor::new([bs, m, n], out)?
            }
            _ => return Err(dim_err("matmul", ta, tb)),
        };
        Ok(self.push(out, Op::MatMul { a, b }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> TensorResult<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(op, ta, tb));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape(), data).unwrap()
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::new(ta.shape(), ta.data().iter().map(|x| f(*x)).collect()).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.map(a, |x| x * factor);
        self.push(out, Op::Scale { a, factor })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x.max(0.0));
        self.push(out, Op::Relu { a })
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.map(a, softplus);
        self.push(out, Op::Softplus { a })
    }

    fn row_operand(&self, op: &'static str, a: Var, row: Var) -> TensorResult<usize> {
        let (ta, tr) = (self.value(a), self.value(row));
        let n = last_dim(ta);
        if tr.numel() != n || tr.shape().len() > 2 {
            return Err(dim_err(op, ta, tr));
        }
        Ok(n)
    }

    /// Adds a length-`n` row to every row of `a` (bias add).
    pub fn add_row(&mut self, a: Var, row: Var) -> TensorResult<Var> {
        let n = self.row_operand("add_row", a, row)?;
        let (ta, tr) = (self.value(a), self.value(row));
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tr.data()[i % n])
            .collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(out, Op::AddRow { a, row }))
    }

    /// Multiplies every row of `a` elementwise by a length-`n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> TensorResult<Var> {
        let n = self.row_operand("mul_row", a, row)?;
        let (ta, tr) = (self.value(a), self.value(row));
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * tr.data()[i % n])
            .collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(out, Op::MulRow { a, row }))
    }

    /// Scales row `i` of a `T×n` matrix by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> TensorResult<Var> {
        let (ta, tc) = (self.value(a), self.value(col));
        let (t, n) = ta.dims2()?;
        if tc.numel() != t {
            return Err(dim_err("mul_col", ta, tc));
        }
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * tc.data()[i / n])
            .collect();
        let out = Tensor::new([t, n], data)?;
        Ok(self.push(out, Op::MulCol { a, col }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let n = last_dim(ta);
        let mut out = vec![0.0; ta.numel()];
        for (row, o) in ta.data().chunks(n).zip(out.chunks_mut(n)) {
            softmax_row(row, o);
        }
        let out = Tensor::new(ta.shape(), out).unwrap();
        self.push(out, Op::Softmax { a })
    }

    /// Normalizes each row over the last axis to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let ta = self.value(a);
        let n = last_dim(ta);
        let mut out = vec![0.0; ta.numel()];
        let mut inv_std = Vec::with_capacity(ta.numel() / n);
        for (row, o) in ta.data().chunks(n).zip(out.chunks_mut(n)) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, x) in o.iter_mut().zip(row) {
                *o = (x - mean) * inv;
            }
            inv_std.push(inv);
        }
        let out = Tensor::new(ta.shape(), out).unwrap();
        self.push(out, Op::LayerNorm { a, inv_std })
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, a: Var) -> TensorResult<Var> {
        let ta = self.value(a);
        let (bs, r, c) = match ta.shape() {
            &[r, c] => (1, r, c),
            &[b, r, c] => (b, r, c),
            s => {
                return Err(TensorError::Contract(format!(
                    "transpose needs rank 2 or 3, got {s:?}"
                )))
            }
        };
        let out = transpose_batched(ta.data(), bs, r, c);
        let shape = if ta.shape().len() == 2 {
            vec![c, r]
        } else {
            vec![bs, c, r]
        };
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Transpose { a }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> TensorResult<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape { a }))
    }

    /// Selects rows of a matrix, repetitions allowed.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> TensorResult<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2()?;
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    extent: r,
                });
            }
            out.extend_from_slice(ta.row(i));
        }
        if rows.is_empty() {
            return Err(TensorError::Contract("gather_rows with no rows".into()));
        }
        let out = Tensor::new([rows.len(), c], out)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                a,
                rows: rows.to_vec(),
            },
        ))
    }

    /// `base` with `src[i]` added into row `rows[i]`.
    pub fn index_add_rows(&mut self, base: Var, src: Var, rows: &[usize]) -> TensorResult<Var> {
        let (tb, ts) = (self.value(base), self.value(src));
        let (r, c) = tb.dims2()?;
        let (sr, sc) = ts.dims2()?;
        if sc != c || sr != rows.len() {
            return Err(dim_err("index_add_rows", tb, ts));
        }
        let mut out = tb.data().to_vec();
        for (k, &i) in rows.iter().enumerate() {
            if i >= r {
                return Err(TensorError::Index {
                    op: "index_add_rows",
                    index: i,
                    extent: r,
                });
            }
            for (o, s) in out[i * c..(i + 1) * c].iter_mut().zip(ts.row(k)) {
                *o += s;
            }
        }
        let out = Tensor::new([r, c], out)?;
        Ok(self.push(
            out,
            Op::IndexAddRows {
                base,
                src,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (r, ca) = ta.dims2()?;
        let (r2, cb) = tb.dims2()?;
        if r != r2 {
            return Err(dim_err("concat_cols", ta, tb));
        }
        let mut out = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            out.extend_from_slice(ta.row(i));
            out.extend_from_slice(tb.row(i));
        }
        let out = Tensor::new([r, ca + cb], out)?;
        Ok(self.push(out, Op::ConcatCols { a, b }))
    }

    /// Picks `(row, col)` entries of a matrix into a `len×1` column.
    pub fn gather(&mut self, a: Var, picks: &[(usize, usize)]) -> TensorResult<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2()?;
        if picks.is_empty() {
            return Err(TensorError::Contract("gather with no entries".into()));
        }
        let mut out = Vec::with_capacity(picks.len());
        for &(i, j) in picks {
            if i >= r || j >= c {
                return Err(TensorError::Index {
                    op: "gather",
                    index: i.max(j),
                    extent: if i >= r { r } else { c },
                });
            }
            out.push(ta.at(i, j));
        }
        let out = Tensor::new([picks.len(), 1], out)?;
        Ok(self.push(
            out,
            Op::Gather {
                a,
                picks: picks.to_vec(),
            },
        ))
    }

    /// Per-row vector-matrix product. Row `t` of `w` (`T×(m·n)`) holds a
    /// row-major `m×n` matrix `W_t`; row `t` of the result is `x_t·W_t`.
    pub fn rowwise_vecmat(&mut self, x: Var, w: Var) -> TensorResult<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (t, m) = tx.dims2()?;
        let (t2, mn) = tw.dims2()?;
        if t != t2 || mn % m != 0 {
            return Err(dim_err("rowwise_vecmat", tx, tw));
        }
        let n = mn / m;
        let mut out = vec![0.0; t * n];
        for i in 0..t {
            gemm(tx.row(i), tw.row(i), &mut out[i * n..(i + 1) * n], 1, m, n);
        }
        let out = Tensor::new([t, n], out)?;
        Ok(self.push(out, Op::RowwiseVecMat { x, w }))
    }

    /// Column means of a matrix, as a `1×n` row.
    pub fn mean_rows(&mut self, a: Var) -> TensorResult<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2()?;
        let mut out = vec![0.0; c];
        for i in 0..r {
            out.iter_mut().zip(ta.row(i)).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let out = Tensor::new([1, c], out)?;
        Ok(self.push(out, Op::MeanRows { a }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean { a })
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.same_shape("mse", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let s = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            / ta.numel() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mse { a, b }))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> TensorResult<Var> {
        let tl = self.value(logits);
        let (r, c) = tl.dims2()?;
        if targets.len() != r {
            return Err(TensorError::Contract(format!(
                "{} targets for {r} rows",
                targets.len()
            )));
        }
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(TensorError::Target {
                    index: t,
                    classes: c,
                });
            }
            let row = tl.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_row(row, &mut probs[i * c..(i + 1) * c]);
        }
        let out = Tensor::scalar(loss / r as f64);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar. Gradients accumulate into every
    /// `requires_grad` node until [`Tape::zero_grads`] is called.
    pub fn backward(&mut self, loss: Var) -> TensorResult<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let inputs = node.op.inputs();
            let contribs = self.input_grads(i, &g);
            for (j, (input, contrib)) in inputs.iter().zip(contribs).enumerate() {
                let Some(mut contrib) = contrib else { continue };
                if !self.requires_grad(*input) {
                    continue;
                }
                if let Some(f) = self.fault {
                    if f.op == node.op.kind() && f.input == j {
                        contrib.iter_mut().for_each(|v| *v *= f.scale);
                    }
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot => *slot = Some(contrib),
                }
            }
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let Some(g) = g {
                if node.value.requires_grad() {
                    node.value.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `i` to each of its inputs.
    fn input_grads(&self, i: usize, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: &Var| &self.nodes[v.0].value;
        let wants = |v: &Var| self.requires_grad(*v);
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul { a, b } => {
                let (ta, tb) = (val(a), val(b));
                let (bs, m, k, n) = match (ta.shape(), tb.shape()) {
                    (&[m, k], &[_, n]) => (1, m, k, n),
                    (&[bs, m, k], &[_, _, n]) => (bs, m, k, n),
                    _ => unreachable!(),
                };
                let ga = wants(a).then(|| {
                    let mut ga = vec![0.0; ta.numel()];
                    for s in 0..bs {
                        gemm_nt(
                            &g[s * m * n..(s + 1) * m * n],
                            &tb.data()[s * k * n..(s + 1) * k * n],
                            &mut ga[s * m * k..(s + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    ga
                });
                let gb = wants(b).then(|| {
                    let mut gb = vec![0.0; tb.numel()];
                    for s in 0..bs {
                        gemm_tn(
                            &ta.data()[s * m * k..(s + 1) * m * k],
                            &g[s * m * n..(s + 1) * m * n],
                            &mut gb[s * k * n..(s + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    gb
                });
                vec![ga, gb]
            }
            Op::Add { .. } => vec![Some(g.to_vec()), Some(g.to_vec())],
            Op::Sub { .. } => vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())],
            Op::Mul { a, b } => vec![
                Some(g.iter().zip(val(b).data()).map(|(g, y)| g * y).collect()),
                Some(g.iter().zip(val(a).data()).map(|(g, x)| g * x).collect()),
            ],
            Op::Scale { factor, .. } => vec![Some(g.iter().map(|v| v * factor).collect())],
            Op::AddRow { row, .. } => {
                let n = val(row).numel();
                let mut gr = vec![0.0; n];
                for chunk in g.chunks(n) {
                    gr.iter_mut().zip(chunk).for_each(|(r, v)| *r += v);
                }
                vec![Some(g.to_vec()), Some(gr)]
            }
            Op::MulRow { a, row } => {
                let tr = val(row);
                let n = tr.numel();
                let ga = g
                    .iter()
                    .enumerate()
                    .map(|(k, v)| v * tr.data()[k % n])
                    .collect();
                let mut gr = vec![0.0; n];
                for (chunk, x) in g.chunks(n).zip(val(a).data().chunks(n)) {
                    for j in 0..n {
                        gr[j] += chunk[j] * x[j];
                    }
                }
                vec![Some(ga), Some(gr)]
            }
            Op::MulCol { a, col } => {
                let tc = val(col);
                let n = g.len() / tc.numel();
                let ga = g
                    .iter()
                    .enumerate()
                    .map(|(k, v)| v * tc.data()[k / n])
                    .collect();
                let gc = g
                    .chunks(n)
                    .zip(val(a).data().chunks(n))
                    .map(|(gr, xr)| gr.iter().zip(xr).map(|(p, q)| p * q).sum())
                    .collect();
                vec![Some(ga), Some(gc)]
            }
            Op::Relu { a } => vec![Some(
                g.iter()
                    .zip(val(a).data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect(),
            )],
            Op::Softplus { a } => vec![Some(
                g.iter()
                    .zip(val(a).data())
                    .map(|(g, x)| g * sigmoid(*x))
                    .collect(),
            )],
            Op::Softmax { .. } => {
                let n = last_dim(out);
                let mut ga = vec![0.0; g.len()];
                for ((gr, yr), o) in g.chunks(n).zip(out.data().chunks(n)).zip(ga.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        o[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![Some(ga)]
            }
            Op::LayerNorm { inv_std, .. } => {
                let n = last_dim(out);
                let mut ga = vec![0.0; g.len()];
                for (r, ((gr, yr), o)) in g
                    .chunks(n)
                    .zip(out.data().chunks(n))
                    .zip(ga.chunks_mut(n))
                    .enumerate()
                {
                    let mean_g = gr.iter().sum::<f64>() / n as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n as f64;
                    for j in 0..n {
                        o[j] = inv_std[r] * (gr[j] - mean_g - yr[j] * mean_gy);
                    }
                }
                vec![Some(ga)]
            }
            Op::Transpose { a } => {
                let s = val(a).shape();
                let (bs, r, c) = match *s {
                    [r, c] => (1, r, c),
                    [b, r, c] => (b, r, c),
                    _ => unreachable!(),
                };
                vec![Some(transpose_batched(g, bs, c, r))]
            }
            Op::Reshape { .. } => vec![Some(g.to_vec())],
            Op::GatherRows { a, rows } => {
                let ta = val(a);
                let c = last_dim(ta);
                let mut ga = vec![0.0; ta.numel()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        ga[r * c + j] += g[k * c + j];
                    }
                }
                vec![Some(ga)]
            }
            Op::IndexAddRows { rows, .. } => {
                let c = last_dim(out);
                let mut gs = Vec::with_capacity(rows.len() * c);
                for &r in rows {
                    gs.extend_from_slice(&g[r * c..(r + 1) * c]);
                }
                vec![Some(g.to_vec()), Some(gs)]
            }
            Op::ConcatCols { a, b } => {
                let ca = last_dim(val(a));
                let cb = last_dim(val(b));
                let mut ga = Vec::with_capacity(val(a).numel());
                let mut gb = Vec::with_capacity(val(b).numel());
                for row in g.chunks(ca + cb) {
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                vec![Some(ga), Some(gb)]
            }
            Op::Gather { a, picks } => {
                let ta = val(a);
                let c = last_dim(ta);
                let mut ga = vec![0.0; ta.numel()];
                for (k, &(r, j)) in picks.iter().enumerate() {
                    ga[r * c + j] += g[k];
                }
                vec![Some(ga)]
            }
            Op::RowwiseVecMat { x, w } => {
                let (tx, tw) = (val(x), val(w));
                let (t, m) = tx.dims2().unwrap();
                let n = tw.shape()[1] / m;
                let mut gx = vec![0.0; tx.numel()];
                let mut gw = vec![0.0; tw.numel()];
                for i in 0..t {
                    let gi = &g[i * n..(i + 1) * n];
                    gemm_nt(gi, tw.row(i), &mut gx[i * m..(i + 1) * m], 1, n, m);
                    gemm_tn(tx.row(i), gi, &mut gw[i * m * n..(i + 1) * m * n], 1, m, n);
                }
                vec![Some(gx), Some(gw)]
            }
            Op::MeanRows { a } => {
                let ta = val(a);
                let (r, c) = ta.dims2().unwrap();
                let mut ga = Vec::with_capacity(r * c);
                for _ in 0..r {
                    ga.extend(g.iter().map(|v| v / r as f64));
                }
                vec![Some(ga)]
            }
            Op::Sum { a } => vec![Some(vec![g[0]; val(a).numel()])],
            Op::Mean { a } => {
                let n = val(a).numel();
                vec![Some(vec![g[0] / n as f64; n])]
            }
            Op::Mse { a, b } => {
                let (ta, tb) = (val(a), val(b));
                let k = 2.0 * g[0] / ta.numel() as f64;
                let ga: Vec<f64> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(x, y)| k * (x - y))
                    .collect();
                let gb = ga.iter().map(|v| -v).collect();
                vec![Some(ga), Some(gb)]
            }
            Op::CrossEntropy {
                targets, probs, ..
            } => {
                let c = probs.len() / targets.len();
                let k = g[0] / targets.len() as f64;
                let mut ga: Vec<f64> = probs.iter().map(|p| p * k).collect();
                for (i, &t) in targets.iter().enumerate() {
                    ga[i * c + t] -= k;
                }
                vec![Some(ga)]
            }
            Op::Custom { inputs, rule } => {
                let ins: Vec<&Tensor> = inputs.iter().map(val).collect();
                rule.backward(&ins, out, g).into_iter().map(Some).collect()
            }
        }
    }
}

fn transpose_batched(data: &[f64], bs: usize, r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for s in 0..bs {
        let off = s * r * c;
        for i in 0..r {
            for j in 0..c {
                out[off + j * r + i] = data[off + i * c + j];
            }
        }
    }
    out
}
