use std::collections::BTreeMap;

use super::tensor::{axis_split, Tensor};
use super::TensorError;

type Result<T> = std::result::Result<T, TensorError>;

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Epsilon under the square root of std pooling.
pub const STD_EPS: f64 = 1e-8;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Mean,
    Std,
    Max,
}

/// Batch-norm evaluation mode.
#[derive(Clone, Debug)]
pub enum NormMode {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with frozen running statistics.
    Running { mean: Vec<f64>, var: Vec<f64> },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    Broadcast { x: Var },
    Reshape { x: Var },
    Matmul { a: Var, b: Var },
    Transpose { x: Var },
    GraphProp { adj: Var, x: Var },
    Conv1d { x: Var, w: Var, bias: Option<Var>, stride: usize, dilation: usize },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax { x: Var, axis: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, stats: Option<(Vec<f64>, Vec<f64>)> },
    Concat { inputs: Vec<Var>, axis: usize },
    Pool { x: Var, axis: usize, kind: PoolKind, aux: Vec<f64> },
    Affine { x: Var, scale: f64 },
    Slice { x: Var, axis: usize, start: usize },
    Gather { x: Var, indices: Vec<Vec<usize>> },
    CrossEntropy { logits: Var, targets: Vec<usize>, exclude: Vec<Option<usize>>, probs: Vec<f64> },
    L2Normalize { x: Var, norms: Vec<f64> },
    Sum(Var),
    Mean(Var),
    MaskedMae { pred: Var, target: Vec<f64>, mask: Vec<bool>, count: usize },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::Broadcast { .. } => "broadcast",
            Op::Reshape { .. } => "reshape",
            Op::Matmul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::GraphProp { .. } => "graph_prop",
            Op::Conv1d { .. } => "conv1d",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Softmax { .. } => "softmax",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Concat { .. } => "concat",
            Op::Pool { .. } => "pool",
            Op::Affine { .. } => "affine",
            Op::Slice { .. } => "slice",
            Op::Gather { .. } => "gather",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MaskedMae { .. } => "masked_mae",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records executed operations so their adjoints can be replayed in reverse.
///
/// Every op validates shapes and rejects non-finite results. Leaves created
/// with [`Tape::param`] receive gradients; [`Tape::constant`] leaves do not.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of the seeded output with respect to every trainable leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidAxis { op, axis, shape: shape.to_vec() });
    }
    Ok(())
}

/// Length of a 1-D convolution output, or `None` when the input is shorter
/// than the dilated window.
pub fn conv_output_len(len: usize, window: usize, stride: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (window - 1) + 1;
    (len >= span).then(|| (len - span) / stride + 1)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Per-channel (mean, biased variance) of a batch-statistics norm node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { stats: Some((mean, var)), .. } => Some((mean, var)),
            _ => None,
        }
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.kind() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op.kind(), a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(out, op, &[a, b])
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out = self.value(x).map(f);
        self.push(out, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `x[..., n] + bias[n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let n = *sx.last().unwrap();
        if sb != [n] {
            return Err(mismatch("add_bias", sx, sb));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        self.push(out, Op::AddBias { x, bias }, &[x, bias])
    }

    /// Repeats `x` along every axis where its extent is 1 to reach `shape`.
    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(x).to_vec();
        let ok =
            src.len() == shape.len() && src.iter().zip(shape).all(|(&s, &d)| s == d || s == 1) && !shape.contains(&0);
        if !ok {
            return Err(mismatch("broadcast", &src, shape));
        }
        let mut out = Tensor::zeros(shape);
        let s = self.nodes[x.0].value.data();
        let o = out.data_mut();
        broadcast_walk(&src, shape, |si, di, run, repeat| {
            if repeat {
                o[di..di + run].fill(s[si]);
            } else {
                o[di..di + run].copy_from_slice(&s[si..si + run]);
            }
        });
        self.push(out, Op::Broadcast { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(out, Op::Reshape { x }, &[x])
    }

    /// `a[..., k] · b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let k = *sa.last().unwrap();
        if sb.len() != 2 || sb[0] != k {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let n = sb[1];
        let m = self.value(a).numel() / k;
        let mut data = vec![0.0; m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..m {
                let row = &mut data[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = ad[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    for (o, bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                        *o += aip * bv;
                    }
                }
            }
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::from_parts(shape, data), Op::Matmul { a, b }, &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::InvalidShape(s));
        }
        let out = transpose2(self.value(x).data(), s[0], s[1]);
        self.push(Tensor::from_parts(vec![s[1], s[0]], out), Op::Transpose { x }, &[x])
    }

    /// Mixes node rows: `out[b, n, ..] = Σ_m adj[n, m] · x[b, m, ..]` for
    /// `x` of shape `[B, N, ...]`.
    pub fn graph_prop(&mut self, adj: Var, x: Var) -> Result<Var> {
        let (sa, sx) = (self.shape(adj).to_vec(), self.shape(x).to_vec());
        if sa.len() != 2 || sa[0] != sa[1] || sx.len() < 2 || sx[1] != sa[0] {
            return Err(mismatch("graph_prop", &sa, &sx));
        }
        let n = sa[0];
        let b = sx[0];
        let inner: usize = sx[2..].iter().product();
        let mut data = vec![0.0; b * n * inner];
        {
            let (ad, xd) = (self.value(adj).data(), self.value(x).data());
            for bi in 0..b {
                for i in 0..n {
                    let orow = &mut data[(bi * n + i) * inner..(bi * n + i + 1) * inner];
                    for j in 0..n {
                        let w = ad[i * n + j];
                        if w == 0.0 {
                            continue;
                        }
                        let xrow = &xd[(bi * n + j) * inner..(bi * n + j + 1) * inner];
                        for (o, xv) in orow.iter_mut().zip(xrow) {
                            *o += w * xv;
                        }
                    }
                }
            }
        }
        self.push(Tensor::from_parts(sx, data), Op::GraphProp { adj, x }, &[adj, x])
    }

    /// Channels-last 1-D convolution over the second-to-last axis.
    ///
    /// `x: [..., T, C_in]`, `w: [window, C_in, C_out]`, `bias: [C_out]`;
    /// output length is `floor((T - dilation·(window-1) - 1) / stride) + 1`.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, dilation: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if stride == 0 || dilation == 0 {
            return Err(TensorError::InvalidArgument("conv1d stride and dilation must be positive".into()));
        }
        if sx.len() < 2 || sw.len() != 3 || sw[1] != sx[sx.len() - 1] {
            return Err(mismatch("conv1d", &sx, &sw));
        }
        let (window, cin, cout) = (sw[0], sw[1], sw[2]);
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(mismatch("conv1d", &sw, self.shape(b)));
            }
        }
        let t_in = sx[sx.len() - 2];
        let t_out = conv_output_len(t_in, window, stride, dilation).ok_or_else(|| {
            TensorError::InvalidArgument(format!(
                "conv1d input length {t_in} shorter than window {window} at dilation {dilation}"
            ))
        })?;
        let batch: usize = sx[..sx.len() - 2].iter().product();
        let mut data = vec![0.0; batch * t_out * cout];
        {
            let (xd, wd) = (self.value(x).data(), self.value(w).data());
            for bi in 0..batch {
                for t in 0..t_out {
                    let orow = &mut data[(bi * t_out + t) * cout..(bi * t_out + t + 1) * cout];
                    for k in 0..window {
                        let src = t * stride + k * dilation;
                        let xrow = &xd[(bi * t_in + src) * cin..(bi * t_in + src + 1) * cin];
                        for (i, &xv) in xrow.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            let wrow = &wd[(k * cin + i) * cout..(k * cin + i + 1) * cout];
                            for (o, wv) in orow.iter_mut().zip(wrow) {
                                *o += xv * wv;
                            }
                        }
                    }
                }
            }
            if let Some(b) = bias {
                let bd = self.value(b).data();
                for row in data.chunks_mut(cout) {
                    for (o, bv) in row.iter_mut().zip(bd) {
                        *o += bv;
                    }
                }
            }
        }
        let mut shape = sx;
        let r = shape.len();
        shape[r - 2] = t_out;
        shape[r - 1] = cout;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push(Tensor::from_parts(shape, data), Op::Conv1d { x, w, bias, stride, dilation }, &inputs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.unary(x, Op::Affine { x, scale }, |v| scale * v + shift)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        check_axis("softmax", &s, axis)?;
        let (outer, len, inner) = axis_split(&s, axis);
        let mut out = self.value(x).clone();
        let d = out.data_mut();
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                let max = (0..len).map(|i| d[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..len {
                    let e = (d[idx(i)] - max).exp();
                    d[idx(i)] = e;
                    total += e;
                }
                for i in 0..len {
                    d[idx(i)] /= total;
                }
            }
        }
        self.push(out, Op::Softmax { x, axis }, &[x])
    }

    /// Per-channel normalization over all but the last axis of `x: [..., C]`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: &NormMode) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let c = *sx.last().unwrap();
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(mismatch("batch_norm", &sx, self.shape(p)));
            }
        }
        let rows = self.value(x).numel() / c;
        let xd = self.value(x).data();
        let (mean, inv_std, stats) = match mode {
            NormMode::Batch => {
                let mut mean = vec![0.0; c];
                for row in xd.chunks(c) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; c];
                for row in xd.chunks(c) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= rows as f64);
                let inv: Vec<f64> = var.iter().map(|s| 1.0 / (s + BN_EPS).sqrt()).collect();
                (mean.clone(), inv, Some((mean, var)))
            }
            NormMode::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(mismatch("batch_norm", &sx, &[mean.len(), var.len()]));
                }
                let inv = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                (mean.clone(), inv, None)
            }
        };
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            for ch in 0..c {
                let i = r * c + ch;
                xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                out[i] = g[ch] * xhat[i] + b[ch];
            }
        }
        self.push(
            Tensor::from_parts(sx, out),
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, stats },
            &[x, gamma, beta],
        )
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| TensorError::InvalidArgument("concat of zero tensors".into()))?)
            .to_vec();
        check_axis("concat", &first, axis)?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let d = self.value(v).data();
                data.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        self.push(Tensor::from_parts(shape, data), Op::Concat { inputs: inputs.to_vec(), axis }, inputs)
    }

    /// Reduces `axis` with mean, population std (epsilon-regularized) or max.
    pub fn pool(&mut self, x: Var, axis: usize, kind: PoolKind) -> Result<Var> {
        let s = self.shape(x).to_vec();
        check_axis("pool", &s, axis)?;
        if s.len() == 1 {
            return Err(TensorError::InvalidShape(s));
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let d = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        let mut aux = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| d[(o * len + i) * inner + j];
                let oi = o * inner + j;
                match kind {
                    PoolKind::Mean => out[oi] = (0..len).map(at).sum::<f64>() / len as f64,
                    PoolKind::Std => {
                        let mu = (0..len).map(at).sum::<f64>() / len as f64;
                        let var = (0..len).map(|i| (at(i) - mu).powi(2)).sum::<f64>() / len as f64;
                        out[oi] = (var + STD_EPS).sqrt();
                        aux[oi] = mu;
                    }
                    PoolKind::Max => {
                        let mut best = 0;
                        for i in 1..len {
                            if at(i) > at(best) {
                                best = i;
                            }
                        }
                        out[oi] = at(best);
                        aux[oi] = best as f64;
                    }
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        self.push(Tensor::from_parts(shape, out), Op::Pool { x, axis, kind, aux }, &[x])
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        check_axis("slice", &s, axis)?;
        if len == 0 || start + len > s[axis] {
            return Err(TensorError::InvalidArgument(format!(
                "slice [{start}, {}) out of range for axis {axis} of {s:?}",
                start + len
            )));
        }
        let (outer, full, inner) = axis_split(&s, axis);
        let d = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push(Tensor::from_parts(shape, data), Op::Slice { x, axis, start }, &[x])
    }

    /// Per-batch selection along axis 1: `out[b, i, ..] = x[b, indices[b][i], ..]`.
    pub fn gather(&mut self, x: Var, indices: Vec<Vec<usize>>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || indices.len() != s[0] {
            return Err(TensorError::InvalidArgument(format!(
                "gather needs one index list per batch row of {s:?}, got {}",
                indices.len()
            )));
        }
        let k = indices[0].len();
        if k == 0 || indices.iter().any(|ix| ix.len() != k || ix.iter().any(|&i| i >= s[1])) {
            return Err(TensorError::InvalidArgument("gather index lists ragged or out of range".into()));
        }
        let inner: usize = s[2..].iter().product();
        let d = self.value(x).data();
        let mut data = Vec::with_capacity(s[0] * k * inner);
        for (b, ix) in indices.iter().enumerate() {
            for &i in ix {
                let base = (b * s[1] + i) * inner;
                data.extend_from_slice(&d[base..base + inner]);
            }
        }
        let mut shape = s;
        shape[1] = k;
        self.push(Tensor::from_parts(shape, data), Op::Gather { x, indices }, &[x])
    }

    /// Mean over rows of softmax cross-entropy for `logits: [R, C]`.
    ///
    /// `exclude[r]` removes one column from row `r`'s normalizer.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], exclude: &[Option<usize>]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || targets.len() != s[0] || exclude.len() != s[0] {
            return Err(TensorError::InvalidArgument(format!(
                "cross_entropy expects [R, C] logits with R targets, got {s:?}"
            )));
        }
        let (rows, cols) = (s[0], s[1]);
        for r in 0..rows {
            if targets[r] >= cols || exclude[r] == Some(targets[r]) || exclude[r].is_some_and(|e| e >= cols) {
                return Err(TensorError::InvalidArgument(format!("bad target/exclusion on row {r}")));
            }
        }
        let d = self.value(logits).data();
        let mut probs = vec![0.0; rows * cols];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &d[r * cols..(r + 1) * cols];
            let keep = |c: usize| exclude[r] != Some(c);
            let max = (0..cols).filter(|&c| keep(c)).map(|c| row[c]).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = (0..cols).filter(|&c| keep(c)).map(|c| (row[c] - max).exp()).sum();
            for c in (0..cols).filter(|&c| keep(c)) {
                probs[r * cols + c] = (row[c] - max).exp() / total;
            }
            loss += max + total.ln() - row[targets[r]];
        }
        let out = Tensor::scalar(loss / rows as f64);
        self.push(
            out,
            Op::CrossEntropy { logits, targets: targets.to_vec(), exclude: exclude.to_vec(), probs },
            &[logits],
        )
    }

    /// Scales every vector along the last axis to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = *s.last().unwrap();
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.numel() / c);
        for row in out.data_mut().chunks_mut(c) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(TensorError::InvalidArgument("l2_normalize of a zero vector".into()));
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        self.push(out, Op::L2Normalize { x, norms }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(v), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let v = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(v), Op::Mean(x), &[x])
    }

    /// Mean absolute error between `pred` and a constant target over `mask`.
    pub fn masked_mae(&mut self, pred: Var, target: &Tensor, mask: &[bool]) -> Result<Var> {
        let sp = self.shape(pred).to_vec();
        if sp != target.shape() || mask.len() != target.numel() {
            return Err(mismatch("masked_mae", &sp, target.shape()));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::InvalidArgument("masked_mae with an empty mask".into()));
        }
        let p = self.value(pred).data();
        let total: f64 =
            p.iter().zip(target.data()).zip(mask).filter(|(_, &m)| m).map(|((a, b), _)| (a - b).abs()).sum();
        self.push(
            Tensor::scalar(total / count as f64),
            Op::MaskedMae { pred, target: target.data().to_vec(), mask: mask.to_vec(), count },
            &[pred],
        )
    }

    /// Replays adjoints from `output` seeded with `seed`.
    ///
    /// A tape can be replayed once; the result holds a gradient (possibly all
    /// zero) for every trainable leaf.
    pub fn backward(&mut self, output: Var, seed: Tensor) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::Consumed);
        }
        if seed.shape() != self.shape(output) {
            return Err(mismatch("backward", self.shape(output), seed.shape()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        let mut out = Gradients::default();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = grads[i].take().unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                out.grads.insert(Var(i), g);
            }
        }
        Ok(out)
    }

    /// Backward from a single-element output with seed 1.
    pub fn backward_scalar(&mut self, output: Var) -> Result<Gradients> {
        let shape = self.shape(output).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::InvalidArgument(format!("backward_scalar on output of shape {shape:?}")));
        }
        self.backward(output, Tensor::full(&shape, 1.0))
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
            f(slot.data_mut());
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, gd));
                acc(*b, &mut |d| add_into(d, gd));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, gd));
                acc(*b, &mut |d| d.iter_mut().zip(gd).for_each(|(x, g)| *x -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * bv[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * av[i];
                    }
                });
            }
            Op::AddBias { x, bias } => {
                acc(*x, &mut |d| add_into(d, gd));
                let n = val(*bias).numel();
                acc(*bias, &mut |d| {
                    for row in gd.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::Broadcast { x } => {
                let src = val(*x).shape().to_vec();
                let dst = g.shape().to_vec();
                acc(*x, &mut |d| {
                    broadcast_walk(&src, &dst, |si, di, run, repeat| {
                        if repeat {
                            d[si] += gd[di..di + run].iter().sum::<f64>();
                        } else {
                            add_into(&mut d[si..si + run], &gd[di..di + run]);
                        }
                    })
                });
            }
            Op::Reshape { x } => acc(*x, &mut |d| add_into(d, gd)),
            Op::Matmul { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                let k = *ta.shape().last().unwrap();
                let n = tb.shape()[1];
                let m = ta.numel() / k;
                let (ad, bd) = (ta.data(), tb.data());
                acc(*a, &mut |d| {
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            d[i * k + p] += dot(grow, &bd[p * n..(p + 1) * n]);
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for (o, gv) in d[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += aip * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose { x } => {
                let s = g.shape();
                let t = transpose2(gd, s[0], s[1]);
                acc(*x, &mut |d| add_into(d, &t));
            }
            Op::GraphProp { adj, x } => {
                let (ta, tx) = (val(*adj), val(*x));
                let n = ta.shape()[0];
                let b = tx.shape()[0];
                let inner = tx.numel() / (b * n);
                let (ad, xd) = (ta.data(), tx.data());
                acc(*x, &mut |d| {
                    for bi in 0..b {
                        for i in 0..n {
                            let grow = &gd[(bi * n + i) * inner..(bi * n + i + 1) * inner];
                            for j in 0..n {
                                let w = ad[i * n + j];
                                if w == 0.0 {
                                    continue;
                                }
                                let drow = &mut d[(bi * n + j) * inner..(bi * n + j + 1) * inner];
                                for (o, gv) in drow.iter_mut().zip(grow) {
                                    *o += w * gv;
                                }
                            }
                        }
                    }
                });
                acc(*adj, &mut |d| {
                    for bi in 0..b {
                        for i in 0..n {
                            let grow = &gd[(bi * n + i) * inner..(bi * n + i + 1) * inner];
                            for j in 0..n {
                                d[i * n + j] += dot(grow, &xd[(bi * n + j) * inner..(bi * n + j + 1) * inner]);
                            }
                        }
                    }
                });
            }
            Op::Conv1d { x, w, bias, stride, dilation } => {
                let (tx, tw) = (val(*x), val(*w));
                let sx = tx.shape();
                let (window, cin, cout) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
                let t_in = sx[sx.len() - 2];
                let t_out = g.shape()[sx.len() - 2];
                let batch = tx.numel() / (t_in * cin);
                let (xd, wd) = (tx.data(), tw.data());
                acc(*x, &mut |d| {
                    for bi in 0..batch {
                        for t in 0..t_out {
                            let grow = &gd[(bi * t_out + t) * cout..(bi * t_out + t + 1) * cout];
                            for k in 0..window {
                                let src = t * stride + k * dilation;
                                let drow = &mut d[(bi * t_in + src) * cin..(bi * t_in + src + 1) * cin];
                                for (i, dv) in drow.iter_mut().enumerate() {
                                    *dv += dot(grow, &wd[(k * cin + i) * cout..(k * cin + i + 1) * cout]);
                                }
                            }
                        }
                    }
                });
                acc(*w, &mut |d| {
                    for bi in 0..batch {
                        for t in 0..t_out {
                            let grow = &gd[(bi * t_out + t) * cout..(bi * t_out + t + 1) * cout];
                            for k in 0..window {
                                let src = t * stride + k * dilation;
                                let xrow = &xd[(bi * t_in + src) * cin..(bi * t_in + src + 1) * cin];
                                for (i, &xv) in xrow.iter().enumerate() {
                                    if xv == 0.0 {
                                        continue;
                                    }
                                    let drow = &mut d[(k * cin + i) * cout..(k * cin + i + 1) * cout];
                                    for (o, gv) in drow.iter_mut().zip(grow) {
                                        *o += xv * gv;
                                    }
                                }
                            }
                        }
                    }
                });
                if let Some(b) = bias {
                    acc(*b, &mut |d| {
                        for row in gd.chunks(cout) {
                            add_into(d, row);
                        }
                    });
                }
            }
            Op::Relu(x) => {
                let xd = val(*x).data();
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        if xd[i] > 0.0 {
                            d[i] += gd[i];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Affine { x, scale } => {
                acc(*x, &mut |d| d.iter_mut().zip(gd).for_each(|(o, g)| *o += scale * g));
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |i: usize| (o * len + i) * inner + j;
                            let s: f64 = (0..len).map(|i| gd[idx(i)] * y[idx(i)]).sum();
                            for i in 0..len {
                                d[idx(i)] += y[idx(i)] * (gd[idx(i)] - s);
                            }
                        }
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, stats } => {
                let batch_stats = stats.is_some();
                let c = inv_std.len();
                let rows = xhat.len() / c;
                let gam = val(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for r in 0..rows {
                    for ch in 0..c {
                        let i = r * c + ch;
                        sum_g[ch] += gd[i];
                        sum_gx[ch] += gd[i] * xhat[i];
                    }
                }
                acc(*gamma, &mut |d| add_into(d, &sum_gx));
                acc(*beta, &mut |d| add_into(d, &sum_g));
                acc(*x, &mut |d| {
                    let m = rows as f64;
                    for r in 0..rows {
                        for ch in 0..c {
                            let i = r * c + ch;
                            let scale = gam[ch] * inv_std[ch];
                            d[i] += if batch_stats {
                                scale * (gd[i] - sum_g[ch] / m - xhat[i] * sum_gx[ch] / m)
                            } else {
                                scale * gd[i]
                            };
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(g.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = val(v).shape()[*axis];
                    acc(v, &mut |d| {
                        for o in 0..outer {
                            let src = &gd[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut d[o * len * inner..(o + 1) * len * inner], src);
                        }
                    });
                    offset += len;
                }
            }
            Op::Pool { x, axis, kind, aux } => {
                let tx = val(*x);
                let (outer, len, inner) = axis_split(tx.shape(), *axis);
                let xd = tx.data();
                let y = node.value.data();
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let oi = o * inner + j;
                            let idx = |i: usize| (o * len + i) * inner + j;
                            match kind {
                                PoolKind::Mean => {
                                    for i in 0..len {
                                        d[idx(i)] += gd[oi] / len as f64;
                                    }
                                }
                                PoolKind::Std => {
                                    for i in 0..len {
                                        d[idx(i)] += gd[oi] * (xd[idx(i)] - aux[oi]) / (len as f64 * y[oi]);
                                    }
                                }
                                PoolKind::Max => d[idx(aux[oi] as usize)] += gd[oi],
                            }
                        }
                    }
                });
            }
            Op::Slice { x, axis, start } => {
                let full = val(*x).shape()[*axis];
                let (outer, len, inner) = axis_split(g.shape(), *axis);
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        add_into(&mut d[base..base + len * inner], &gd[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::Gather { x, indices } => {
                let s = val(*x).shape();
                let inner: usize = s[2..].iter().product();
                let k = indices[0].len();
                acc(*x, &mut |d| {
                    for (b, ix) in indices.iter().enumerate() {
                        for (pos, &i) in ix.iter().enumerate() {
                            let src = &gd[(b * k + pos) * inner..(b * k + pos + 1) * inner];
                            let base = (b * s[1] + i) * inner;
                            add_into(&mut d[base..base + inner], src);
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, exclude, probs } => {
                let cols = val(*logits).shape()[1];
                let rows = targets.len();
                let scale = gd[0] / rows as f64;
                acc(*logits, &mut |d| {
                    for r in 0..rows {
                        for c in 0..cols {
                            if exclude[r] == Some(c) {
                                continue;
                            }
                            let onehot = if c == targets[r] { 1.0 } else { 0.0 };
                            d[r * cols + c] += scale * (probs[r * cols + c] - onehot);
                        }
                    }
                });
            }
            Op::L2Normalize { x, norms } => {
                let y = node.value.data();
                let c = y.len() / norms.len();
                acc(*x, &mut |d| {
                    for (r, norm) in norms.iter().enumerate() {
                        let span = r * c..(r + 1) * c;
                        let proj = dot(&gd[span.clone()], &y[span.clone()]);
                        for i in span {
                            d[i] += (gd[i] - y[i] * proj) / norm;
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += gd[0])),
            Op::Mean(x) => {
                let n = val(*x).numel() as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += gd[0] / n));
            }
            Op::MaskedMae { pred, target, mask, count } => {
                let p = val(*pred).data();
                let scale = gd[0] / *count as f64;
                acc(*pred, &mut |d| {
                    for i in 0..d.len() {
                        if mask[i] {
                            let diff = p[i] - target[i];
                            if diff != 0.0 {
                                d[i] += scale * diff.signum();
                            }
                        }
                    }
                });
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn transpose2(d: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; d.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = d[i * cols + j];
        }
    }
    out
}

/// Walks a broadcast from `src` to `dst` in contiguous runs along the last
/// axis, calling `f(src_offset, dst_offset, run, repeat)`. When the last axis is
/// itself broadcast the run covers `dst.last()` copies of one source element.
fn broadcast_walk(src: &[usize], dst: &[usize], mut f: impl FnMut(usize, usize, usize, bool)) {
    let rank = dst.len();
    let run = dst[rank - 1];
    let repeat = src[rank - 1] == 1 && run != 1;
    let mut src_strides = vec![0; rank];
    let mut stride = 1;
    for i in (0..rank).rev() {
        src_strides[i] = if src[i] == 1 { 0 } else { stride };
        stride *= src[i];
    }
    let outer: usize = dst[..rank - 1].iter().product();
    let mut idx = vec![0; rank.saturating_sub(1)];
    for o in 0..outer {
        let si: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        f(si, o * run, run, repeat);
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < dst[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}
