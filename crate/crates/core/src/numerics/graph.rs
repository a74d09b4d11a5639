use std::borrow::Cow;

use rand::{Rng, RngCore};

use super::{Tensor, TensorError, NORM_FLOOR};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded op plus whatever activations its backward pass needs.
#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Transpose(Var),
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Shift(Var),
    Relu(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    GatherRows {
        table: Var,
        indices: Vec<Option<usize>>,
    },
    PickColumns {
        x: Var,
        cols: Vec<usize>,
    },
    Reshape(Var),
    Ln(Var),
    ClampMin {
        x: Var,
        floor: f64,
    },
    Pow {
        x: Var,
        exponent: f64,
    },
    Sum(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::GatherRows { table, .. } => vec![*table],
            Op::Transpose(x)
            | Op::Shift(x)
            | Op::Relu(x)
            | Op::Softmax(x)
            | Op::Reshape(x)
            | Op::Ln(x)
            | Op::Sum(x)
            | Op::Scale { x, .. }
            | Op::Dropout { x, .. }
            | Op::L2Normalize { x, .. }
            | Op::PickColumns { x, .. }
            | Op::ClampMin { x, .. }
            | Op::Pow { x, .. } => vec![*x],
        }
    }
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of tensor ops, differentiated in reverse creation order.
///
/// Leaves may borrow their value (model parameters) for the lifetime `'p`,
/// so building a graph never copies the embedding tables. A graph is meant
/// to live for one forward/backward pass on one thread.
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    grads: Vec<Option<Tensor>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Layout of a (possibly batched) matrix product.
#[derive(Clone, Copy)]
struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(MatMulDims, Vec<usize>), TensorError> {
    let mismatch = || TensorError::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let k = a[a.len() - 1];
    if b.len() == 2 {
        // [..., m, k] x [k, n]: every leading row shares the right operand.
        if b[0] != k {
            return Err(mismatch());
        }
        let n = b[1];
        let m = a[..a.len() - 1].iter().product();
        let mut out = a[..a.len() - 1].to_vec();
        out.push(n);
        let dims = MatMulDims {
            batch: 1,
            m,
            k,
            n,
            shared_rhs: true,
        };
        return Ok((dims, out));
    }
    let lead = &a[..a.len() - 2];
    if b.len() != a.len() || &b[..b.len() - 2] != lead || b[b.len() - 2] != k {
        return Err(mismatch());
    }
    let m = a[a.len() - 2];
    let n = b[b.len() - 1];
    let mut out = lead.to_vec();
    out.extend([m, n]);
    let dims = MatMulDims {
        batch: lead.iter().product(),
        m,
        k,
        n,
        shared_rhs: false,
    };
    Ok((dims, out))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn transpose_last2(shape: &[usize], data: &[f64]) -> (Vec<usize>, Vec<f64>) {
    let r = shape[shape.len() - 2];
    let c = shape[shape.len() - 1];
    let batch: usize = shape[..shape.len() - 2].iter().product();
    let mut out = vec![0.0; data.len()];
    for bt in 0..batch {
        let base = bt * r * c;
        for i in 0..r {
            for j in 0..c {
                out[base + j * r + i] = data[base + i * c + j];
            }
        }
    }
    let mut new_shape = shape.to_vec();
    let len = new_shape.len();
    new_shape.swap(len - 2, len - 1);
    (new_shape, out)
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf that either owns or borrows its value.
    pub fn leaf(&mut self, value: Cow<'p, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed trainable leaf.
    pub fn param(&mut self, value: &'p Tensor) -> Var {
        self.leaf(Cow::Borrowed(value), true)
    }

    /// Owned trainable leaf.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(Cow::Owned(value), true)
    }

    /// Owned leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(Cow::Owned(value), false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to a leaf.
    pub fn grad(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take_grad(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var, TensorError> {
        value.ensure_finite(op_name)?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Matrix product. `a` is `[..., m, k]`; `b` is either a shared `[k, n]`
    /// or a batch `[..., k, n]` with the same leading dims as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (dims, out_shape) = matmul_dims(self.shape(a), self.shape(b))?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let MatMulDims { batch, m, k, n, .. } = dims;
        let mut out = vec![0.0; batch * m * n];
        for bt in 0..batch {
            let a_off = bt * m * k;
            let b_off = if dims.shared_rhs { 0 } else { bt * k * n };
            for i in 0..m {
                let row = &mut out[(bt * m + i) * n..(bt * m + i + 1) * n];
                for p in 0..k {
                    let coef = av[a_off + i * k + p];
                    axpy(coef, &bv[b_off + p * n..b_off + (p + 1) * n], row);
                }
            }
        }
        let value = Tensor::from_parts(out_shape, out);
        self.push("matmul", value, Op::MatMul { a, b })
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.rank() < 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                reason: format!("needs rank >= 2, got shape {:?}", t.shape()),
            });
        }
        let (shape, data) = transpose_last2(t.shape(), t.data());
        self.push("transpose", Tensor::from_parts(shape, data), Op::Transpose(x))
    }

    /// Elementwise sum. `b` may have the shape of any suffix of `a`'s shape,
    /// in which case it is repeated over the leading dims.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let av = self.value(a);
        let bv = self.value(b).data();
        let blen = bv.len();
        let data = av
            .data()
            .chunks(blen.max(1))
            .flat_map(|chunk| chunk.iter().zip(bv).map(|(x, y)| x + y))
            .collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        self.push("add", value, Op::Add { a, b })
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_parts(sa.to_vec(), data);
        self.push("mul", value, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, TensorError> {
        let t = self.value(x);
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|v| v * factor).collect());
        self.push("scale", value, Op::Scale { x, factor })
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, x: Var, offset: f64) -> Result<Var, TensorError> {
        let t = self.value(x);
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|v| v + offset).collect());
        self.push("shift", value, Op::Shift(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|v| v.max(0.0)).collect());
        self.push("relu", value, Op::Relu(x))
    }

    /// Inverted dropout. With `rng = None` (evaluation) or `rate == 0` this
    /// returns `x` itself, so evaluation is exactly the identity.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: Option<&mut dyn RngCore>) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidDropoutRate(rate));
        }
        let rng = match rng {
            Some(rng) if rate > 0.0 => rng,
            _ => return Ok(x),
        };
        let keep_scale = 1.0 / (1.0 - rate);
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep_scale })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        self.push("dropout", value, Op::Dropout { x, mask })
    }

    /// Softmax over the trailing dimension. Where `mask` is given it must
    /// have one entry per element; `false` entries get exactly zero weight.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.rank() == 0 {
            return Err(TensorError::InvalidArgument {
                op: "softmax",
                reason: "needs rank >= 1".into(),
            });
        }
        if let Some(mask) = mask {
            if mask.len() != t.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax",
                    lhs: t.shape().to_vec(),
                    rhs: vec![mask.len()],
                });
            }
        }
        let cols = t.cols();
        let mut out = vec![0.0; t.len()];
        for r in 0..t.rows() {
            let row = t.row(r);
            let keep = |j: usize| mask.is_none_or(|m| m[r * cols + j]);
            let max = (0..cols)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(TensorError::DegenerateRow { op: "softmax", row: r });
            }
            let dst = &mut out[r * cols..(r + 1) * cols];
            let mut total = 0.0;
            for j in 0..cols {
                if keep(j) {
                    dst[j] = (row[j] - max).exp();
                    total += dst[j];
                }
            }
            for v in dst.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        self.push("softmax", value, Op::Softmax(x))
    }

    /// Per-row standardization followed by `gain * x_hat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(TensorError::InvalidArgument {
                op: "layer_norm",
                reason: format!("eps must be positive, got {eps}"),
            });
        }
        let t = self.value(x);
        let d = t.cols();
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: t.shape().to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut normalized = vec![0.0; t.len()];
        let mut inv_std = Vec::with_capacity(t.rows());
        let mut out = vec![0.0; t.len()];
        for r in 0..t.rows() {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std.push(s);
            for j in 0..d {
                let xh = (row[j] - mean) * s;
                normalized[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + b[j];
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            normalized,
            inv_std,
        };
        self.push("layer_norm", value, op)
    }

    /// Scales each trailing-dimension row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let d = t.cols();
        let mut norms = Vec::with_capacity(t.rows());
        let mut out = vec![0.0; t.len()];
        for r in 0..t.rows() {
            let row = t.row(r);
            let norm = dot(row, row).sqrt();
            if norm < NORM_FLOOR {
                return Err(TensorError::ZeroNorm { row: r, norm });
            }
            norms.push(norm);
            for j in 0..d {
                out[r * d + j] = row[j] / norm;
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        self.push("l2_normalize", value, Op::L2Normalize { x, norms })
    }

    /// Selects rows of a matrix; `None` yields a zero row that passes no
    /// gradient back to the table.
    pub fn gather_rows(&mut self, table: Var, indices: &[Option<usize>]) -> Result<Var, TensorError> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "gather_rows",
                reason: format!("table must be a matrix, got shape {:?}", t.shape()),
            });
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; indices.len() * d];
        for (i, idx) in indices.iter().enumerate() {
            if let Some(idx) = *idx {
                if idx >= rows {
                    return Err(TensorError::IndexOutOfRange {
                        op: "gather_rows",
                        index: idx,
                        bound: rows,
                    });
                }
                out[i * d..(i + 1) * d].copy_from_slice(t.row(idx));
            }
        }
        let value = Tensor::from_parts(vec![indices.len(), d], out);
        let op = Op::GatherRows {
            table,
            indices: indices.to_vec(),
        };
        self.push("gather_rows", value, op)
    }

    /// From a `[B, N]` matrix takes element `(b, cols[b])` for each row.
    pub fn pick_columns(&mut self, x: Var, cols: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.rank() != 2 || t.shape()[0] != cols.len() {
            return Err(TensorError::ShapeMismatch {
                op: "pick_columns",
                lhs: t.shape().to_vec(),
                rhs: vec![cols.len()],
            });
        }
        let n = t.shape()[1];
        let mut out = Vec::with_capacity(cols.len());
        for (b, &c) in cols.iter().enumerate() {
            if c >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "pick_columns",
                    index: c,
                    bound: n,
                });
            }
            out.push(t.row(b)[c]);
        }
        let value = Tensor::from_parts(vec![cols.len()], out);
        let op = Op::PickColumns { x, cols: cols.to_vec() };
        self.push("pick_columns", value, op)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(x))
    }

    /// Natural log; non-positive inputs surface as a non-finite error.
    pub fn ln(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|v| v.ln()).collect());
        self.push("ln", value, Op::Ln(x))
    }

    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var, TensorError> {
        let t = self.value(x);
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|v| v.max(floor)).collect());
        self.push("clamp_min", value, Op::ClampMin { x, floor })
    }

    /// Elementwise `x^exponent` for non-negative `x`.
    pub fn pow(&mut self, x: Var, exponent: f64) -> Result<Var, TensorError> {
        let t = self.value(x);
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|v| v.powf(exponent)).collect());
        self.push("pow", value, Op::Pow { x, exponent })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let total = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum(x))
    }

    /// Populates gradients of `loss` for every `requires_grad` leaf that
    /// reaches it. Nodes are visited once each, in reverse creation order,
    /// so repeated calls give bit-identical results.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(loss_value.shape().to_vec()));
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            if let Some(g) = grads[idx].take() {
                propagate(&self.nodes, idx, &g, &mut grads);
            }
        }
        self.grads = grads;
        Ok(())
    }
}

fn accumulate(nodes: &[Node<'_>], grads: &mut [Option<Tensor>], var: Var, contribution: Tensor) {
    if !nodes[var.0].requires_grad {
        return;
    }
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, c) in existing.data_mut().iter_mut().zip(contribution.data()) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn needs(nodes: &[Node<'_>], var: Var) -> bool {
    nodes[var.0].requires_grad
}

fn like(nodes: &[Node<'_>], var: Var, data: Vec<f64>) -> Tensor {
    Tensor::from_parts(nodes[var.0].value.shape().to_vec(), data)
}

fn propagate(nodes: &[Node<'_>], idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &nodes[idx].value;
    let gd = g.data();
    match &nodes[idx].op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (dims, _) =
                matmul_dims(nodes[a.0].value.shape(), nodes[b.0].value.shape()).expect("shapes were validated in forward");
            let MatMulDims { batch, m, k, n, .. } = dims;
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            let b_off = |bt: usize| if dims.shared_rhs { 0 } else { bt * k * n };
            if needs(nodes, *a) {
                let mut ga = vec![0.0; av.len()];
                for bt in 0..batch {
                    for i in 0..m {
                        let grow = &gd[(bt * m + i) * n..(bt * m + i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[b_off(bt) + p * n..b_off(bt) + (p + 1) * n];
                            ga[(bt * m + i) * k + p] = dot(grow, brow);
                        }
                    }
                }
                accumulate(nodes, grads, *a, like(nodes, *a, ga));
            }
            if needs(nodes, *b) {
                let mut gb = vec![0.0; bv.len()];
                for bt in 0..batch {
                    for i in 0..m {
                        let grow = &gd[(bt * m + i) * n..(bt * m + i + 1) * n];
                        for p in 0..k {
                            let coef = av[(bt * m + i) * k + p];
                            let off = b_off(bt) + p * n;
                            axpy(coef, grow, &mut gb[off..off + n]);
                        }
                    }
                }
                accumulate(nodes, grads, *b, like(nodes, *b, gb));
            }
        }
        Op::Transpose(x) => {
            let (_, data) = transpose_last2(out.shape(), gd);
            accumulate(nodes, grads, *x, like(nodes, *x, data));
        }
        Op::Add { a, b } => {
            if needs(nodes, *a) {
                accumulate(nodes, grads, *a, g.clone());
            }
            if needs(nodes, *b) {
                let blen = nodes[b.0].value.len();
                let mut gb = vec![0.0; blen];
                for chunk in gd.chunks(blen.max(1)) {
                    for (acc, v) in gb.iter_mut().zip(chunk) {
                        *acc += v;
                    }
                }
                accumulate(nodes, grads, *b, like(nodes, *b, gb));
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            if needs(nodes, *a) {
                let ga = gd.iter().zip(bv).map(|(g, y)| g * y).collect();
                accumulate(nodes, grads, *a, like(nodes, *a, ga));
            }
            if needs(nodes, *b) {
                let gb = gd.iter().zip(av).map(|(g, x)| g * x).collect();
                accumulate(nodes, grads, *b, like(nodes, *b, gb));
            }
        }
        Op::Scale { x, factor } => {
            let data = gd.iter().map(|v| v * factor).collect();
            accumulate(nodes, grads, *x, like(nodes, *x, data));
        }
        Op::Shift(x) => accumulate(nodes, grads, *x, g.clone()),
        Op::Relu(x) => {
            let data = gd
                .iter()
                .zip(out.data())
                .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                .collect();
            accumulate(nodes, grads, *x, like(nodes, *x, data));
        }
        Op::Dropout { x, mask } => {
            let data = gd.iter().zip(mask).map(|(g, m)| g * m).collect();
            accumulate(nodes, grads, *x, like(nodes, *x, data));
        }
        Op::Softmax(x) => {
            let cols = out.cols();
            let y = out.data();
            let mut data = vec![0.0; y.len()];
            for r in 0..out.rows() {
                let span = r * cols..(r + 1) * cols;
                let inner = dot(&gd[span.clone()], &y[span.clone()]);
                for j in span {
                    data[j] = y[j] * (gd[j] - inner);
                }
            }
            accumulate(nodes, grads, *x, like(nodes, *x, data));
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            normalized,
            inv_std,
        } => {
            let d = out.cols();
            let gain_v = nodes[gain.0].value.data();
            if needs(nodes, *x) {
                let mut dx = vec![0.0; gd.len()];
                for (r, s) in inv_std.iter().enumerate() {
                    let span = r * d..(r + 1) * d;
                    let dxh: Vec<f64> = gd[span.clone()].iter().zip(gain_v).map(|(g, w)| g * w).collect();
                    let sum_dxh: f64 = dxh.iter().sum();
                    let sum_dxh_xh = dot(&dxh, &normalized[span.clone()]);
                    for (j, flat) in span.enumerate() {
                        dx[flat] = s / d as f64 * (d as f64 * dxh[j] - sum_dxh - normalized[flat] * sum_dxh_xh);
                    }
                }
                accumulate(nodes, grads, *x, like(nodes, *x, dx));
            }
            if needs(nodes, *gain) {
                let mut dg = vec![0.0; d];
                for (flat, (gv, xh)) in gd.iter().zip(normalized).enumerate() {
                    dg[flat % d] += gv * xh;
                }
                accumulate(nodes, grads, *gain, like(nodes, *gain, dg));
            }
            if needs(nodes, *bias) {
                let mut db = vec![0.0; d];
                for (flat, gv) in gd.iter().enumerate() {
                    db[flat % d] += gv;
                }
                accumulate(nodes, grads, *bias, like(nodes, *bias, db));
            }
        }
        Op::L2Normalize { x, norms } => {
            let d = out.cols();
            let y = out.data();
            let mut data = vec![0.0; y.len()];
            for (r, norm) in norms.iter().enumerate() {
                let span = r * d..(r + 1) * d;
                let inner = dot(&gd[span.clone()], &y[span.clone()]);
                for j in span {
                    data[j] = (gd[j] - y[j] * inner) / norm;
                }
            }
            accumulate(nodes, grads, *x, like(nodes, *x, data));
        }
        Op::GatherRows { table, indices } => {
            let t = &nodes[table.0].value;
            let d = t.cols();
            let mut data = vec![0.0; t.len()];
            for (i, idx) in indices.iter().enumerate() {
                if let Some(idx) = idx {
                    let dst = &mut data[idx * d..(idx + 1) * d];
                    for (acc, v) in dst.iter_mut().zip(&gd[i * d..(i + 1) * d]) {
                        *acc += v;
                    }
                }
            }
            accumulate(nodes, grads, *table, like(nodes, *table, data));
        }
        Op::PickColumns { x, cols } => {
            let n = nodes[x.0].value.cols();
            let mut data = vec![0.0; nodes[x.0].value.len()];
            for (b, &c) in cols.iter().enumerate() {
                data[b * n + c] += gd[b];
            }
            accumulate(nodes, grads, *x, like(nodes, *x, data));
        }
        Op::Reshape(x) => accumulate(nodes, grads, *x, like(nodes, *x, gd.to_vec())),
        Op::Ln(x) => {
            let xv = nodes[x.0].value.data();
            let data = gd.iter().zip(xv).map(|(g, v)| g / v).collect();
            accumulate(nodes, grads, *x, like(nodes, *x, data));
        }
        Op::ClampMin { x, floor } => {
            let xv = nodes[x.0].value.data();
            let data = gd.iter().zip(xv).map(|(g, v)| if v >= floor { *g } else { 0.0 }).collect();
            accumulate(nodes, grads, *x, like(nodes, *x, data));
        }
        Op::Pow { x, exponent } => {
            let e = *exponent;
            let xv = nodes[x.0].value.data();
            let data = gd
                .iter()
                .zip(xv)
                .map(|(g, v)| {
                    // d/dx x^e at x = 0 is taken as 0 (1 when e == 1), the
                    // one-sided limit for e > 1.
                    let slope = if e == 0.0 {
                        0.0
                    } else if *v == 0.0 {
                        if e == 1.0 {
                            1.0
                        } else {
                            0.0
                        }
                    } else {
                        e * v.powf(e - 1.0)
                    };
                    g * slope
                })
                .collect();
            accumulate(nodes, grads, *x, like(nodes, *x, data));
        }
        Op::Sum(x) => {
            let len = nodes[x.0].value.len();
            accumulate(nodes, grads, *x, like(nodes, *x, vec![gd[0]; len]));
        }
    }
}
