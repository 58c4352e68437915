use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, split_axis};
use crate::error::{MarnError, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a normalization node obtains its per-channel statistics.
#[derive(Debug, Clone)]
pub enum NormMode<T> {
    /// Statistics from the unmasked rows of the current input.
    Train { eps: T },
    /// Fixed running statistics.
    Eval { mean: Vec<T>, var: Vec<T>, eps: T },
}

#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Transpose(Var),
    Reshape(Var, Vec<usize>),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    Tanh(Var),
    Sigmoid(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SumAxis {
        input: Var,
        axis: usize,
    },
    SumAll(Var),
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Var,
    },
    ConvTranspose1d {
        x: Var,
        kernel: Var,
        bias: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mask: Option<Vec<bool>>,
        mode: NormMode<T>,
    },
    MaskedSoftmax {
        x: Var,
        mask: Option<Vec<bool>>,
    },
    Dropout {
        x: Var,
        rate: f64,
        training: bool,
        stream: u64,
    },
    FocalLoss {
        probs: Var,
        targets: Vec<T>,
        alpha: T,
        gamma: T,
        eps: T,
    },
    BceLoss {
        probs: Var,
        targets: Vec<T>,
        eps: T,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Embedding { .. } => "embedding",
            Op::SumAxis { .. } => "sum_axis",
            Op::SumAll(..) => "sum",
            Op::Conv1d { .. } => "conv1d",
            Op::ConvTranspose1d { .. } => "conv_transpose1d",
            Op::BatchNorm { .. } => "batch_norm1d",
            Op::MaskedSoftmax { .. } => "masked_softmax",
            Op::Dropout { .. } => "dropout",
            Op::FocalLoss { .. } => "focal_loss",
            Op::BceLoss { .. } => "bce_loss",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::BatchMatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::SumAll(a) => vec![*a],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Narrow { input, .. } | Op::SumAxis { input, .. } => vec![*input],
            Op::Embedding { table, .. } => vec![*table],
            Op::Conv1d { x, kernel, bias } | Op::ConvTranspose1d { x, kernel, bias } => {
                vec![*x, *kernel, *bias]
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::MaskedSoftmax { x, .. } | Op::Dropout { x, .. } => vec![*x],
            Op::FocalLoss { probs, .. } | Op::BceLoss { probs, .. } => vec![*probs],
        }
    }
}

#[derive(Debug, Clone)]
enum Saved<T> {
    None,
    Norm {
        xhat: Vec<T>,
        inv_std: Vec<T>,
        mean: Vec<T>,
        var: Vec<T>,
        count: usize,
    },
    Mask(Vec<T>),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    saved: Saved<T>,
    requires_grad: bool,
}

/// One executed operation as seen from outside the graph.
#[derive(Debug, Clone, PartialEq)]
pub struct OpRecord {
    pub op: &'static str,
    pub inputs: Vec<usize>,
    pub output: usize,
    pub shape: Vec<usize>,
}

/// Ordered log of the operations a graph executed, plus the seed its
/// stochastic operations drew from.
#[derive(Debug, Clone, PartialEq)]
pub struct ComputationRecord {
    pub ops: Vec<OpRecord>,
    pub rng_seed: u64,
}

/// Per-channel statistics measured by a training-mode normalization node.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    pub count: usize,
}

/// Define-by-run tape. Nodes are appended in execution order, so the node
/// list is already a topological order for the reverse sweep.
#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    seed: u64,
    streams: u64,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new(0)
    }
}

fn dim_err(kernel: &'static str, lhs: &[usize], rhs: &[usize]) -> MarnError {
    MarnError::Dimension {
        kernel,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// `rhs` may equal `lhs` or be a suffix of it (broadcast over leading dims).
fn broadcastable(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

fn sum_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Reduces a gradient of the broadcast shape back onto the smaller operand.
fn reduce_broadcast<T: Real>(g: &[T], small: usize) -> Vec<T> {
    if g.len() == small {
        return g.to_vec();
    }
    let mut out = vec![T::zero(); small];
    for chunk in g.chunks(small) {
        sum_into(&mut out, chunk);
    }
    out
}

/// (batch, n, channels) view of a rank-2 or rank-3 sequence tensor.
fn seq_dims(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape {
        [n, c] => Some((1, *n, *c)),
        [b, n, c] => Some((*b, *n, *c)),
        _ => None,
    }
}

impl<T: Real> Graph<T> {
    pub fn new(seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            seed,
            streams: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            saved: Saved::None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op<T>) -> Result<Var> {
        let (value, saved) = self.compute(&op)?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            saved,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.push(Op::Scale(a, s))
    }

    /// Rank-2 matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    /// Per-batch product of rank-3 tensors, optionally transposing the
    /// trailing two dims of one operand.
    pub fn batch_matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        self.push(Op::BatchMatMul { a, b, ta, tb })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.push(Op::Reshape(a, shape.to_vec()))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        self.push(Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        })
    }

    pub fn narrow(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.push(Op::Narrow {
            input,
            axis,
            start,
            len,
        })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sigmoid(a))
    }

    /// Gathers rows of `table` (|V|×d); output is ids.len()×d.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.push(Op::Embedding {
            table,
            ids: ids.to_vec(),
        })
    }

    pub fn sum_axis(&mut self, input: Var, axis: usize) -> Result<Var> {
        self.push(Op::SumAxis { input, axis })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SumAll(a))
    }

    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        self.push(Op::Conv1d { x, kernel, bias })
    }

    pub fn conv_transpose1d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        self.push(Op::ConvTranspose1d { x, kernel, bias })
    }

    /// Per-channel normalization over all leading dims. Masked rows neither
    /// contribute to the statistics nor receive output (they are zeroed).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mask: Option<&[bool]>,
        mode: NormMode<T>,
    ) -> Result<Var> {
        self.push(Op::BatchNorm {
            x,
            gamma,
            beta,
            mask: mask.map(|m| m.to_vec()),
            mode,
        })
    }

    /// Softmax over the position axis (second to last) independently for
    /// every column; `mask` has one entry per position row.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        self.push(Op::MaskedSoftmax {
            x,
            mask: mask.map(|m| m.to_vec()),
        })
    }

    pub fn dropout(&mut self, x: Var, rate: f64, training: bool) -> Result<Var> {
        let stream = self.streams;
        self.streams += 1;
        self.push(Op::Dropout {
            x,
            rate,
            training,
            stream,
        })
    }

    pub fn focal_loss(&mut self, probs: Var, targets: &[T], alpha: T, gamma: T, eps: T) -> Result<Var> {
        self.push(Op::FocalLoss {
            probs,
            targets: targets.to_vec(),
            alpha,
            gamma,
            eps,
        })
    }

    pub fn bce_loss(&mut self, probs: Var, targets: &[T], eps: T) -> Result<Var> {
        self.push(Op::BceLoss {
            probs,
            targets: targets.to_vec(),
            eps,
        })
    }

    /// Statistics measured by a training-mode normalization node.
    pub fn batch_stats(&self, v: Var) -> Option<BatchStats<T>> {
        match &self.nodes[v.0].saved {
            Saved::Norm {
                mean, var, count, ..
            } if matches!(
                self.nodes[v.0].op,
                Op::BatchNorm {
                    mode: NormMode::Train { .. },
                    ..
                }
            ) =>
            {
                Some(BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count: *count,
                })
            }
            _ => None,
        }
    }

    /// Keep-mask (0 or 1/(1-rate)) drawn by a dropout node.
    pub fn dropout_mask(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].saved {
            Saved::Mask(m) => Some(m),
            _ => None,
        }
    }

    pub fn record(&self) -> ComputationRecord {
        ComputationRecord {
            ops: self
                .nodes
                .iter()
                .enumerate()
                .map(|(i, n)| OpRecord {
                    op: n.op.name(),
                    inputs: n.op.inputs().iter().map(|v| v.0).collect(),
                    output: i,
                    shape: n.value.shape().to_vec(),
                })
                .collect(),
            rng_seed: self.seed,
        }
    }

    /// Re-executes every recorded operation from the leaf values, drawing
    /// stochastic masks from the same seed.
    pub fn replay(&self) -> Result<Graph<T>> {
        let mut g = Graph::new(self.seed);
        for node in &self.nodes {
            match &node.op {
                Op::Leaf => {
                    g.leaf(node.value.clone(), node.requires_grad);
                }
                op => {
                    if let Op::Dropout { .. } = op {
                        g.streams += 1;
                    }
                    g.push(op.clone())?;
                }
            }
        }
        Ok(g)
    }

    fn dropout_keep(&self, len: usize, rate: f64, stream: u64) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let keep_scale = T::lit(1.0 / (1.0 - rate));
        (0..len)
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    keep_scale
                }
            })
            .collect()
    }

    fn compute(&self, op: &Op<T>) -> Result<(Tensor<T>, Saved<T>)> {
        let val = |v: &Var| &self.nodes[v.0].value;
        let plain = |t: Tensor<T>| Ok((t, Saved::None));
        match op {
            Op::Leaf => unreachable!("leaves are never recomputed"),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let name = op.name();
                if !broadcastable(ta.shape(), tb.shape()) {
                    return Err(dim_err(name, ta.shape(), tb.shape()));
                }
                let bd = tb.data();
                let m = bd.len();
                let data = ta
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| {
                        let y = bd[i % m];
                        match op {
                            Op::Add(..) => x + y,
                            Op::Sub(..) => x - y,
                            _ => x * y,
                        }
                    })
                    .collect();
                plain(Tensor::from_parts(ta.shape().to_vec(), data))
            }
            Op::Scale(a, s) => plain(val(a).map(|x| x * *s)),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                match (ta.shape(), tb.shape()) {
                    ([m, k], [k2, n]) if k == k2 => plain(Tensor::from_parts(
                        vec![*m, *n],
                        kernels::matmul(ta.data(), tb.data(), *m, *k, *n),
                    )),
                    _ => Err(dim_err("matmul", ta.shape(), tb.shape())),
                }
            }
            Op::BatchMatMul { a, b, ta, tb } => {
                let (xa, xb) = (val(a), val(b));
                let err = || dim_err("batch_matmul", xa.shape(), xb.shape());
                let (&[ba, ra, ca], &[bb, rb, cb]) = (xa.shape(), xb.shape()) else {
                    return Err(err());
                };
                if ba != bb || (*ta && *tb) {
                    return Err(err());
                }
                let (m, k) = if *ta { (ca, ra) } else { (ra, ca) };
                let (k2, n) = if *tb { (cb, rb) } else { (rb, cb) };
                if k != k2 {
                    return Err(err());
                }
                let mut out = Vec::with_capacity(ba * m * n);
                for i in 0..ba {
                    let sa = &xa.data()[i * ra * ca..(i + 1) * ra * ca];
                    let sb = &xb.data()[i * rb * cb..(i + 1) * rb * cb];
                    let prod = match (ta, tb) {
                        (false, false) => kernels::matmul(sa, sb, m, k, n),
                        (true, false) => kernels::matmul_tn(sa, sb, k, m, n),
                        _ => kernels::matmul_nt(sa, sb, m, k, n),
                    };
                    out.extend(prod);
                }
                plain(Tensor::from_parts(vec![ba, m, n], out))
            }
            Op::Transpose(a) => {
                let t = val(a);
                let &[r, c] = t.shape() else {
                    return Err(MarnError::Shape(format!(
                        "transpose needs rank 2, got {:?}",
                        t.shape()
                    )));
                };
                let mut out = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = t.data()[i * c + j];
                    }
                }
                plain(Tensor::from_parts(vec![c, r], out))
            }
            Op::Reshape(a, shape) => {
                let t = val(a);
                if shape.iter().product::<usize>() != t.len() {
                    return Err(dim_err("reshape", t.shape(), shape));
                }
                plain(Tensor::new(shape.clone(), t.data().to_vec())?)
            }
            Op::Concat { inputs, axis } => {
                let first = val(inputs.first().ok_or_else(|| {
                    MarnError::Input("concat of zero tensors".into())
                })?);
                let axis = *axis;
                if axis >= first.rank() {
                    return Err(MarnError::Shape(format!(
                        "concat axis {axis} out of range for {:?}",
                        first.shape()
                    )));
                }
                let mut total = 0;
                for v in inputs {
                    let s = val(v).shape();
                    let compatible = s.len() == first.rank()
                        && s.iter()
                            .zip(first.shape())
                            .enumerate()
                            .all(|(d, (x, y))| d == axis || x == y);
                    if !compatible {
                        return Err(dim_err("concat", first.shape(), s));
                    }
                    total += s[axis];
                }
                let (outer, _, inner) = split_axis(first.shape(), axis);
                let mut data = Vec::with_capacity(outer * total * inner);
                for o in 0..outer {
                    for v in inputs {
                        let t = val(v);
                        let w = t.shape()[axis] * inner;
                        data.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
                    }
                }
                let mut shape = first.shape().to_vec();
                shape[axis] = total;
                plain(Tensor::from_parts(shape, data))
            }
            Op::Narrow {
                input,
                axis,
                start,
                len,
            } => {
                let t = val(input);
                if *axis >= t.rank() || *len == 0 || start + len > t.shape()[*axis] {
                    return Err(MarnError::Shape(format!(
                        "narrow [{start}, {}) on axis {axis} of {:?}",
                        start + len,
                        t.shape()
                    )));
                }
                let (outer, size, inner) = split_axis(t.shape(), *axis);
                let mut data = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let base = (o * size + start) * inner;
                    data.extend_from_slice(&t.data()[base..base + len * inner]);
                }
                let mut shape = t.shape().to_vec();
                shape[*axis] = *len;
                plain(Tensor::from_parts(shape, data))
            }
            Op::Tanh(a) => plain(val(a).map(|x| x.tanh())),
            Op::Sigmoid(a) => plain(val(a).map(kernels::sigmoid)),
            Op::Embedding { table, ids } => {
                let t = val(table);
                let &[rows, d] = t.shape() else {
                    return Err(MarnError::Shape(format!(
                        "embedding table must be rank 2, got {:?}",
                        t.shape()
                    )));
                };
                if ids.is_empty() {
                    return Err(MarnError::Input("embedding lookup of zero ids".into()));
                }
                let mut data = Vec::with_capacity(ids.len() * d);
                for &id in ids {
                    if id >= rows {
                        return Err(MarnError::Lookup { id, size: rows });
                    }
                    data.extend_from_slice(t.row(id));
                }
                plain(Tensor::from_parts(vec![ids.len(), d], data))
            }
            Op::SumAxis { input, axis } => {
                let t = val(input);
                if *axis >= t.rank() {
                    return Err(MarnError::Shape(format!(
                        "sum axis {axis} out of range for {:?}",
                        t.shape()
                    )));
                }
                let (outer, size, inner) = split_axis(t.shape(), *axis);
                let mut data = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for s in 0..size {
                        let src = &t.data()[(o * size + s) * inner..(o * size + s + 1) * inner];
                        sum_into(&mut data[o * inner..(o + 1) * inner], src);
                    }
                }
                let mut shape: Vec<usize> = t.shape().to_vec();
                shape.remove(*axis);
                if shape.is_empty() {
                    shape.push(1);
                }
                plain(Tensor::from_parts(shape, data))
            }
            Op::SumAll(a) => plain(Tensor::scalar(val(a).data().iter().copied().sum())),
            Op::Conv1d { x, kernel, bias } | Op::ConvTranspose1d { x, kernel, bias } => {
                let transposed = matches!(op, Op::ConvTranspose1d { .. });
                let name = op.name();
                let (tx, tk, tb) = (val(x), val(kernel), val(bias));
                let Some((b, n, c_in)) = seq_dims(tx.shape()) else {
                    return Err(dim_err(name, tx.shape(), tk.shape()));
                };
                let &[k0, k1, 3] = tk.shape() else {
                    return Err(dim_err(name, tx.shape(), tk.shape()));
                };
                // conv1d kernels are c_out×c_in×3, transposed ones c_in×c_out×3.
                let (kin, c_out) = if transposed { (k0, k1) } else { (k1, k0) };
                if kin != c_in {
                    return Err(dim_err(name, tx.shape(), tk.shape()));
                }
                if tb.shape() != [c_out] {
                    return Err(dim_err(name, tk.shape(), tb.shape()));
                }
                let mut data = if transposed {
                    kernels::conv_adjoint(tx.data(), tk.data(), b, n, c_out, c_in)
                } else {
                    kernels::conv_apply(tx.data(), tk.data(), b, n, c_in, c_out)
                };
                for row in data.chunks_mut(c_out) {
                    sum_into(row, tb.data());
                }
                let mut shape = tx.shape().to_vec();
                *shape.last_mut().unwrap() = c_out;
                plain(Tensor::from_parts(shape, data))
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mask,
                mode,
            } => {
                let (tx, tg, tb) = (val(x), val(gamma), val(beta));
                let c = *tx.shape().last().unwrap();
                if tg.shape() != [c] || tb.shape() != [c] {
                    return Err(dim_err("batch_norm1d", tx.shape(), tg.shape()));
                }
                let rows = tx.len() / c;
                if let Some(m) = mask {
                    if m.len() != rows {
                        return Err(dim_err("batch_norm1d", tx.shape(), &[m.len()]));
                    }
                }
                let valid = |r: usize| mask.as_ref().is_none_or(|m| m[r]);
                let count = (0..rows).filter(|&r| valid(r)).count();
                let (mean, var, eps) = match mode {
                    NormMode::Train { eps } => {
                        if count < 2 {
                            return Err(MarnError::Statistics(format!(
                                "batch norm needs at least 2 unmasked samples per channel, got {count}"
                            )));
                        }
                        let nf = T::lit(count as f64);
                        let mut mean = vec![T::zero(); c];
                        for r in (0..rows).filter(|&r| valid(r)) {
                            sum_into(&mut mean, &tx.data()[r * c..(r + 1) * c]);
                        }
                        mean.iter_mut().for_each(|m| *m = *m / nf);
                        let mut var = vec![T::zero(); c];
                        for r in (0..rows).filter(|&r| valid(r)) {
                            for ch in 0..c {
                                let d = tx.data()[r * c + ch] - mean[ch];
                                var[ch] = var[ch] + d * d;
                            }
                        }
                        var.iter_mut().for_each(|v| *v = *v / nf);
                        (mean, var, *eps)
                    }
                    NormMode::Eval { mean, var, eps } => {
                        if mean.len() != c || var.len() != c {
                            return Err(dim_err("batch_norm1d", tx.shape(), &[mean.len()]));
                        }
                        (mean.clone(), var.clone(), *eps)
                    }
                };
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let mut xhat = vec![T::zero(); tx.len()];
                let mut out = vec![T::zero(); tx.len()];
                for r in (0..rows).filter(|&r| valid(r)) {
                    for ch in 0..c {
                        let i = r * c + ch;
                        let h = (tx.data()[i] - mean[ch]) * inv_std[ch];
                        xhat[i] = h;
                        out[i] = tg.data()[ch] * h + tb.data()[ch];
                    }
                }
                Ok((
                    Tensor::from_parts(tx.shape().to_vec(), out),
                    Saved::Norm {
                        xhat,
                        inv_std,
                        mean,
                        var,
                        count,
                    },
                ))
            }
            Op::MaskedSoftmax { x, mask } => {
                let t = val(x);
                let Some((b, n, d)) = seq_dims(t.shape()) else {
                    return Err(MarnError::Shape(format!(
                        "masked_softmax needs rank 2 or 3, got {:?}",
                        t.shape()
                    )));
                };
                if let Some(m) = mask {
                    if m.len() != b * n {
                        return Err(dim_err("masked_softmax", t.shape(), &[m.len()]));
                    }
                }
                let valid = |r: usize| mask.as_ref().is_none_or(|m| m[r]);
                let mut out = vec![T::zero(); t.len()];
                for bi in 0..b {
                    if !(0..n).any(|p| valid(bi * n + p)) {
                        return Err(MarnError::EmptySequence);
                    }
                    for col in 0..d {
                        let idx = |p: usize| (bi * n + p) * d + col;
                        let mut mx = T::neg_infinity();
                        for p in (0..n).filter(|&p| valid(bi * n + p)) {
                            mx = mx.max(t.data()[idx(p)]);
                        }
                        let mut total = T::zero();
                        for p in (0..n).filter(|&p| valid(bi * n + p)) {
                            let e = (t.data()[idx(p)] - mx).exp();
                            out[idx(p)] = e;
                            total = total + e;
                        }
                        for p in (0..n).filter(|&p| valid(bi * n + p)) {
                            out[idx(p)] = out[idx(p)] / total;
                        }
                    }
                }
                plain(Tensor::from_parts(t.shape().to_vec(), out))
            }
            Op::Dropout {
                x,
                rate,
                training,
                stream,
            } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(MarnError::Config(format!(
                        "dropout rate must lie in [0, 1), got {rate}"
                    )));
                }
                let t = val(x);
                if !*training || *rate == 0.0 {
                    return plain(t.clone());
                }
                let keep = self.dropout_keep(t.len(), *rate, *stream);
                let data = t.data().iter().zip(&keep).map(|(&a, &k)| a * k).collect();
                Ok((
                    Tensor::from_parts(t.shape().to_vec(), data),
                    Saved::Mask(keep),
                ))
            }
            Op::FocalLoss {
                probs,
                targets,
                alpha,
                gamma,
                eps,
            } => {
                let t = val(probs);
                check_targets(t, targets, "focal_loss")?;
                let total = t
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&p, &y)| focal_term(p, y, *alpha, *gamma, *eps))
                    .sum();
                plain(Tensor::scalar(total))
            }
            Op::BceLoss {
                probs,
                targets,
                eps,
            } => {
                let t = val(probs);
                check_targets(t, targets, "bce_loss")?;
                let total = t
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&p, &y)| bce_term(p, y, *eps))
                    .sum();
                plain(Tensor::scalar(total))
            }
        }
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate additively
    /// across fan-out; a second call starts from fresh buffers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(MarnError::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            for (input, contrib) in self.input_grads(i, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => sum_into(acc, &contrib),
                    slot => *slot = Some(contrib),
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward pass; zeros for nodes it did not reach.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        let shape = self.nodes[v.0].value.shape().to_vec();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    fn input_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let val = |v: &Var| &self.nodes[v.0].value;
        let out = &node.value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => {
                let m = val(b).len();
                vec![(*a, g.to_vec()), (*b, reduce_broadcast(g, m))]
            }
            Op::Sub(a, b) => {
                let m = val(b).len();
                let neg: Vec<T> = reduce_broadcast(g, m).into_iter().map(|x| -x).collect();
                vec![(*a, g.to_vec()), (*b, neg)]
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(a).data(), val(b).data());
                let m = tb.len();
                let ga = g.iter().enumerate().map(|(k, &gv)| gv * tb[k % m]).collect();
                let full: Vec<T> = g.iter().zip(ta).map(|(&gv, &av)| gv * av).collect();
                vec![(*a, ga), (*b, reduce_broadcast(&full, m))]
            }
            Op::Scale(a, s) => vec![(*a, g.iter().map(|&x| x * *s).collect())],
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                vec![
                    (*a, kernels::matmul_nt(g, tb.data(), m, n, k)),
                    (*b, kernels::matmul_tn(ta.data(), g, m, k, n)),
                ]
            }
            Op::BatchMatMul { a, b, ta, tb } => {
                let (xa, xb) = (val(a), val(b));
                let (bs, ra, ca) = (xa.shape()[0], xa.shape()[1], xa.shape()[2]);
                let (rb, cb) = (xb.shape()[1], xb.shape()[2]);
                let (m, n) = (out.shape()[1], out.shape()[2]);
                let mut ga = Vec::with_capacity(xa.len());
                let mut gb = Vec::with_capacity(xb.len());
                for s in 0..bs {
                    let sa = &xa.data()[s * ra * ca..(s + 1) * ra * ca];
                    let sb = &xb.data()[s * rb * cb..(s + 1) * rb * cb];
                    let sg = &g[s * m * n..(s + 1) * m * n];
                    match (ta, tb) {
                        (false, false) => {
                            let k = ca;
                            ga.extend(kernels::matmul_nt(sg, sb, m, n, k));
                            gb.extend(kernels::matmul_tn(sa, sg, m, k, n));
                        }
                        (true, false) => {
                            // C = AᵀB with A k×m, B k×n.
                            let k = ra;
                            ga.extend(kernels::matmul_nt(sb, sg, k, n, m));
                            gb.extend(kernels::matmul(sa, sg, k, m, n));
                        }
                        _ => {
                            // C = ABᵀ with A m×k, B n×k.
                            let k = ca;
                            ga.extend(kernels::matmul(sg, sb, m, n, k));
                            gb.extend(kernels::matmul_tn(sg, sa, m, n, k));
                        }
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose(a) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let mut ga = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] = g[i * c + j];
                    }
                }
                vec![(*a, ga)]
            }
            Op::Reshape(a, _) => vec![(*a, g.to_vec())],
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                let mut res = Vec::with_capacity(inputs.len());
                for v in inputs {
                    let w = val(v).shape()[*axis];
                    let mut gi = Vec::with_capacity(outer * w * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gi.extend_from_slice(&g[base..base + w * inner]);
                    }
                    offset += w;
                    res.push((*v, gi));
                }
                res
            }
            Op::Narrow {
                input,
                axis,
                start,
                len,
            } => {
                let t = val(input);
                let (outer, size, inner) = split_axis(t.shape(), *axis);
                let mut gi = vec![T::zero(); t.len()];
                for o in 0..outer {
                    let dst = (o * size + start) * inner;
                    let src = o * len * inner;
                    gi[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![(*input, gi)]
            }
            Op::Tanh(a) => vec![(
                *a,
                g.iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * (T::one() - y * y))
                    .collect(),
            )],
            Op::Sigmoid(a) => vec![(
                *a,
                g.iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * y * (T::one() - y))
                    .collect(),
            )],
            Op::Embedding { table, ids } => {
                let t = val(table);
                let d = t.shape()[1];
                let mut gt = vec![T::zero(); t.len()];
                for (r, &id) in ids.iter().enumerate() {
                    sum_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
                vec![(*table, gt)]
            }
            Op::SumAxis { input, axis } => {
                let t = val(input);
                let (outer, size, inner) = split_axis(t.shape(), *axis);
                let mut gi = vec![T::zero(); t.len()];
                for o in 0..outer {
                    for s in 0..size {
                        gi[(o * size + s) * inner..(o * size + s + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![(*input, gi)]
            }
            Op::SumAll(a) => vec![(*a, vec![g[0]; val(a).len()])],
            Op::Conv1d { x, kernel, bias } | Op::ConvTranspose1d { x, kernel, bias } => {
                let transposed = matches!(node.op, Op::ConvTranspose1d { .. });
                let (tx, tk) = (val(x), val(kernel));
                let (b, n, c_in) = seq_dims(tx.shape()).unwrap();
                let c_out = *out.shape().last().unwrap();
                let mut gb = vec![T::zero(); c_out];
                for row in g.chunks(c_out) {
                    sum_into(&mut gb, row);
                }
                let (gx, gk) = if transposed {
                    (
                        kernels::conv_apply(g, tk.data(), b, n, c_out, c_in),
                        kernels::conv_kernel_grad(tx.data(), g, b, n, c_in, c_out),
                    )
                } else {
                    (
                        kernels::conv_adjoint(g, tk.data(), b, n, c_in, c_out),
                        kernels::conv_kernel_grad(g, tx.data(), b, n, c_out, c_in),
                    )
                };
                vec![(*x, gx), (*kernel, gk), (*bias, gb)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mask,
                mode,
            } => {
                let Saved::Norm {
                    xhat,
                    inv_std,
                    count,
                    ..
                } = &node.saved
                else {
                    unreachable!("normalization nodes always save statistics")
                };
                let tg = val(gamma).data();
                let c = tg.len();
                let rows = out.len() / c;
                let valid = |r: usize| mask.as_ref().is_none_or(|m| m[r]);
                let mut ggamma = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                for r in (0..rows).filter(|&r| valid(r)) {
                    for ch in 0..c {
                        let i = r * c + ch;
                        ggamma[ch] = ggamma[ch] + g[i] * xhat[i];
                        gbeta[ch] = gbeta[ch] + g[i];
                    }
                }
                let mut gx = vec![T::zero(); out.len()];
                match mode {
                    NormMode::Train { .. } => {
                        let nf = T::lit(*count as f64);
                        for r in (0..rows).filter(|&r| valid(r)) {
                            for ch in 0..c {
                                let i = r * c + ch;
                                // dxhat sums are gamma-scaled versions of gbeta/ggamma.
                                gx[i] = tg[ch] * inv_std[ch] / nf
                                    * (nf * g[i] - gbeta[ch] - xhat[i] * ggamma[ch]);
                            }
                        }
                    }
                    NormMode::Eval { .. } => {
                        for r in (0..rows).filter(|&r| valid(r)) {
                            for ch in 0..c {
                                let i = r * c + ch;
                                gx[i] = g[i] * tg[ch] * inv_std[ch];
                            }
                        }
                    }
                }
                vec![(*x, gx), (*gamma, ggamma), (*beta, gbeta)]
            }
            Op::MaskedSoftmax { x, .. } => {
                let (b, n, d) = seq_dims(out.shape()).unwrap();
                let y = out.data();
                let mut gx = vec![T::zero(); out.len()];
                for bi in 0..b {
                    for col in 0..d {
                        let idx = |p: usize| (bi * n + p) * d + col;
                        let s: T = (0..n).map(|p| y[idx(p)] * g[idx(p)]).sum();
                        for p in 0..n {
                            gx[idx(p)] = y[idx(p)] * (g[idx(p)] - s);
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::Dropout { x, .. } => match &node.saved {
                Saved::Mask(keep) => vec![(*x, g.iter().zip(keep).map(|(&a, &k)| a * k).collect())],
                _ => vec![(*x, g.to_vec())],
            },
            Op::FocalLoss {
                probs,
                targets,
                alpha,
                gamma,
                eps,
            } => {
                let p = val(probs).data();
                vec![(
                    *probs,
                    p.iter()
                        .zip(targets)
                        .map(|(&pv, &y)| g[0] * focal_grad(pv, y, *alpha, *gamma, *eps))
                        .collect(),
                )]
            }
            Op::BceLoss {
                probs,
                targets,
                eps,
            } => {
                let p = val(probs).data();
                vec![(
                    *probs,
                    p.iter()
                        .zip(targets)
                        .map(|(&pv, &y)| g[0] * bce_grad(pv, y, *eps))
                        .collect(),
                )]
            }
        }
    }
}

fn check_targets<T: Real>(probs: &Tensor<T>, targets: &[T], kernel: &'static str) -> Result<()> {
    if probs.len() != targets.len() {
        return Err(dim_err(kernel, probs.shape(), &[targets.len()]));
    }
    if let Some(bad) = targets.iter().find(|&&y| y != T::zero() && y != T::one()) {
        return Err(MarnError::Input(format!(
            "{kernel}: targets must be 0 or 1, got {bad}"
        )));
    }
    Ok(())
}

#[inline]
fn clamp<T: Real>(p: T, eps: T) -> T {
    p.max(eps).min(T::one() - eps)
}

/// `-y·α·(1-p)^γ·ln p - (1-y)·(1-α)·p^γ·ln(1-p)` on the clamped probability.
pub(crate) fn focal_term<T: Real>(p: T, y: T, alpha: T, gamma: T, eps: T) -> T {
    let p = clamp(p, eps);
    let one = T::one();
    if y == one {
        -alpha * (one - p).powf(gamma) * p.ln()
    } else {
        -(one - alpha) * p.powf(gamma) * (one - p).ln()
    }
}

pub(crate) fn focal_grad<T: Real>(p: T, y: T, alpha: T, gamma: T, eps: T) -> T {
    if p < eps || p > T::one() - eps {
        return T::zero();
    }
    let one = T::one();
    if y == one {
        let q = one - p;
        let modulating = if gamma == T::zero() {
            T::zero()
        } else {
            gamma * q.powf(gamma - one) * p.ln()
        };
        alpha * (modulating - q.powf(gamma) / p)
    } else {
        let q = one - p;
        let modulating = if gamma == T::zero() {
            T::zero()
        } else {
            gamma * p.powf(gamma - one) * q.ln()
        };
        -(one - alpha) * (modulating - p.powf(gamma) / q)
    }
}

pub(crate) fn bce_term<T: Real>(p: T, y: T, eps: T) -> T {
    let p = clamp(p, eps);
    if y == T::one() {
        -p.ln()
    } else {
        -(T::one() - p).ln()
    }
}

pub(crate) fn bce_grad<T: Real>(p: T, y: T, eps: T) -> T {
    if p < eps || p > T::one() - eps {
        return T::zero();
    }
    if y == T::one() {
        -T::one() / p
    } else {
        T::one() / (T::one() - p)
    }
}
