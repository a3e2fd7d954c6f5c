use rand::Rng;

use super::kernels::{
    self, broadcast_shape, broadcast_strides, for_each_broadcast, gemm, split_at_axis, MatRef,
};
use super::Tensor;
use crate::error::{dim_err, PastnError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Linear(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Propagate { p: Var, x: Var },
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    Dropout { x: Var, mask: Vec<f64> },
    Sum(Var),
    Mean(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    ConvTime { x: Var, kernel: Var, dilation: usize },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Linear(a, b) => vec![*a, *b],
            Op::BatchMatMul { a, b, .. } => vec![*a, *b],
            Op::Propagate { p, x } => vec![*p, *x],
            Op::Scale(x, _)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Relu(x)
            | Op::Abs(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x) => vec![*x],
            Op::Dropout { x, .. }
            | Op::Slice { x, .. }
            | Op::Permute { x, .. }
            | Op::Softmax { x, .. } => vec![*x],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConvTime { x, kernel, .. } => vec![*x, *kernel],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation so that gradients can be replayed in reverse.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order; [`Tape::backward`] walks it from the loss down to index 0.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

struct GradSink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl GradSink<'_> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Mutable gradient buffer for `v`, zero-initialised on first touch.
    fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        if !self.wants(v) {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }

    fn add(&mut self, v: Var, contrib: &[f64]) {
        if let Some(s) = self.slot(v) {
            s.iter_mut().zip(contrib).for_each(|(s, &c)| *s += c);
        }
    }
}

fn reduce_to_shape(g: &[f64], out_shape: &[usize], in_shape: &[usize]) -> Vec<f64> {
    if out_shape == in_shape {
        return g.to_vec();
    }
    let mut r = vec![0.0; in_shape.iter().product()];
    let s = broadcast_strides(in_shape, out_shape);
    let zero = vec![0; out_shape.len()];
    for_each_broadcast(out_shape, &s, &zero, |i, oa, _| r[oa] += g[i]);
    r
}

fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    let r = shape.len();
    (shape[r - 2], shape[r - 1])
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        let needs_grad = t.requires_grad;
        t.grad = None;
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    /// Records a copy of a parameter tensor, keeping its `requires_grad` flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(Tensor {
            shape: t.shape.clone(),
            data: t.data.clone(),
            grad: None,
            requires_grad: t.requires_grad,
        })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient of the last `backward` loss with respect to leaf `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.nodes[v.0].value.shape.clone(), g.clone()))
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let Some(out_shape) = broadcast_shape(&sa, &sb) else {
            return dim_err(format!("{name}: cannot broadcast {sa:?} with {sb:?}"));
        };
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = vec![0.0; out_shape.iter().product()];
            let (ta, tb) = (broadcast_strides(&sa, &out_shape), broadcast_strides(&sb, &out_shape));
            for_each_broadcast(&out_shape, &ta, &tb, |i, oa, ob| out[i] = f(da[oa], db[ob]));
            out
        };
        Ok(Tensor::from_parts(out_shape, data))
    }

    /// Broadcasting addition.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    /// Broadcasting elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.map(x, |v| v * factor);
        self.push(t, Op::Scale(x, factor))
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(x);
        Tensor::from_parts(v.shape.clone(), v.data.iter().map(|&e| f(e)).collect())
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::tanh);
        self.push(t, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        self.push(t, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| if v > 0.0 { v } else { 0.0 });
        self.push(t, Op::Relu(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::abs);
        self.push(t, Op::Abs(x))
    }

    /// Inverted dropout. With `rng == None` (evaluation) this is the identity and
    /// records nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: Option<&mut R>) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(PastnError::Value(format!("dropout probability {p} outside [0, 1)")));
        }
        let Some(rng) = rng else {
            return Ok(x);
        };
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let v = self.value(x);
        let data = v.data.iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let t = Tensor::from_parts(v.shape.clone(), data);
        Ok(self.push(t, Op::Dropout { x, mask }))
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data.iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    // ---------------------------------------------------------------- products

    /// Plain matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err(format!("matmul: {sa:?} x {sb:?}"));
        }
        self.linear(a, b)
    }

    /// Applies `w: [k, n]` to the last axis of `x: [..., k]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[0] {
            return dim_err(format!("linear: {sx:?} x {sw:?}"));
        }
        let (k, n) = (sw[0], sw[1]);
        let rows = self.value(x).numel() / k;
        let mut out = vec![0.0; rows * n];
        gemm(
            rows,
            k,
            n,
            MatRef::row_major(self.value(x).data(), k),
            MatRef::row_major(self.value(w).data(), n),
            0.0,
            &mut out,
        );
        let mut shape = sx;
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Linear(x, w)))
    }

    /// Batched matrix product over matching leading axes; `trans_b` multiplies by `bᵀ`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || dim_err(format!("batch_matmul: {sa:?} x {sb:?} (trans_b={trans_b})"));
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return bad();
        }
        let (m, k) = matrix_dims(&sa);
        let (bk, n) = if trans_b {
            let (r, c) = matrix_dims(&sb);
            (c, r)
        } else {
            matrix_dims(&sb)
        };
        if bk != k {
            return bad();
        }
        let groups: usize = sa[..sa.len() - 2].iter().product();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; groups * m * n];
        for g in 0..groups {
            let ag = &da[g * m * k..(g + 1) * m * k];
            let bg = &db[g * k * n..(g + 1) * k * n];
            let bview = if trans_b { MatRef::transposed(bg, k) } else { MatRef::row_major(bg, n) };
            gemm(m, k, n, MatRef::row_major(ag, k), bview, 0.0, &mut out[g * m * n..(g + 1) * m * n]);
        }
        let mut shape = sa;
        let r = shape.len();
        shape[r - 1] = n;
        Ok(self.push(Tensor::from_parts(shape, out), Op::BatchMatMul { a, b, trans_b }))
    }

    /// Left-multiplies every `[N, ...]` slice of `x: [B, N, ...]` by `p: [N, N]`.
    pub fn propagate(&mut self, p: Var, x: Var) -> Result<Var> {
        let (sp, sx) = (self.shape(p).to_vec(), self.shape(x).to_vec());
        if sp.len() != 2 || sp[0] != sp[1] || sx.len() < 2 || sx[1] != sp[0] {
            return dim_err(format!("propagate: operator {sp:?} on signal {sx:?}"));
        }
        let nn = sp[0];
        let feat: usize = sx[2..].iter().product();
        let batch = sx[0];
        let (dp, dx) = (self.value(p).data(), self.value(x).data());
        let mut out = vec![0.0; dx.len()];
        let stride = nn * feat;
        for b in 0..batch {
            gemm(
                nn,
                nn,
                feat,
                MatRef::row_major(dp, nn),
                MatRef::row_major(&dx[b * stride..(b + 1) * stride], feat),
                0.0,
                &mut out[b * stride..(b + 1) * stride],
            );
        }
        Ok(self.push(Tensor::from_parts(sx, out), Op::Propagate { p, x }))
    }

    /// Dilated causal convolution along the time axis of a channels-last signal.
    ///
    /// `x: [..., T, C_in]`, `kernel: [C_out, C_in, k]`; output `[..., T - dilation*(k-1), C_out]`.
    /// Output step `t` reads input steps `t + r - dilation*s` for `s < k`, where
    /// `r = dilation*(k-1)`, so only fully-covered positions are emitted.
    pub fn conv_time(&mut self, x: Var, kernel: Var, dilation: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() < 2 || sk.len() != 3 || sk[1] != sx[sx.len() - 1] {
            return dim_err(format!("conv_time: signal {sx:?} with kernel {sk:?}"));
        }
        if dilation == 0 {
            return Err(PastnError::Value("dilation must be positive".into()));
        }
        let (c_out, c_in, taps) = (sk[0], sk[1], sk[2]);
        let t_in = sx[sx.len() - 2];
        let reach = dilation * (taps - 1);
        if t_in <= reach {
            return Err(PastnError::Length(format!(
                "sequence of length {t_in} is too short for kernel {taps} at dilation {dilation}"
            )));
        }
        let rows = self.value(x).numel() / (t_in * c_in);
        let kv = self.value(kernel).data();
        let mut sic = vec![0.0; kv.len()];
        for co in 0..c_out {
            for ci in 0..c_in {
                for s in 0..taps {
                    sic[(s * c_in + ci) * c_out + co] = kv[(co * c_in + ci) * taps + s];
                }
            }
        }
        let out = kernels::conv_time_forward(
            self.value(x).data(),
            &sic,
            rows,
            t_in,
            c_in,
            c_out,
            taps,
            dilation,
        );
        let mut shape = sx;
        let r = shape.len();
        shape[r - 2] = t_in - reach;
        shape[r - 1] = c_out;
        Ok(self.push(Tensor::from_parts(shape, out), Op::ConvTime { x, kernel, dilation }))
    }

    /// Convolution of one `[C_in, T]` sequence with `f: [C_out, C_in, k]`, giving
    /// `[C_out, T - dilation*(k-1)]`. No padding is applied.
    pub fn dilated_causal_conv(&mut self, x: Var, f: Var, dilation: usize) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return dim_err(format!("dilated_causal_conv expects [C_in, T], got {:?}", self.shape(x)));
        }
        let xt = self.transpose(x)?;
        let y = self.conv_time(xt, f, dilation)?;
        self.transpose(y)
    }

    // ---------------------------------------------------------------- structure

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return dim_err("concat of zero tensors");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return dim_err(format!("concat axis {axis} for rank {}", base.len()));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let same = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return dim_err(format!("concat along {axis}: {base:?} vs {s:?}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat { inputs: inputs.to_vec(), axis }))
    }

    /// The sub-range `[start, start + len)` of `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || len == 0 || start + len > sx[axis] {
            return dim_err(format!("slice [{start}, {}) of axis {axis} in {sx:?}", start + len));
        }
        let (outer, ext, inner) = split_at_axis(&sx, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = sx;
        shape[axis] = len;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Slice { x, axis, start }))
    }

    /// Splits `axis` into `parts` equal pieces.
    pub fn split(&mut self, x: Var, axis: usize, parts: usize) -> Result<Vec<Var>> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || parts == 0 || sx[axis] % parts != 0 {
            return dim_err(format!("split of axis {axis} in {sx:?} into {parts} parts"));
        }
        let len = sx[axis] / parts;
        (0..parts).map(|i| self.slice(x, axis, i * len, len)).collect()
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if perm.len() != sx.len() || perm.iter().any(|&p| p >= sx.len() || std::mem::replace(&mut seen[p], true)) {
            return dim_err(format!("permute {perm:?} of shape {sx:?}"));
        }
        let own = kernels::strides(&sx);
        let out_shape: Vec<usize> = perm.iter().map(|&p| sx[p]).collect();
        let read: Vec<usize> = perm.iter().map(|&p| own[p]).collect();
        let zero = vec![0; sx.len()];
        let d = self.value(x).data();
        let mut out = vec![0.0; d.len()];
        for_each_broadcast(&out_shape, &read, &zero, |i, o, _| out[i] = d[o]);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Permute { x, perm: perm.to_vec() }))
    }

    /// Swaps the two axes of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return dim_err(format!("transpose of rank-{} tensor", self.shape(x).len()));
        }
        self.permute(x, &[1, 0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    // ---------------------------------------------------------------- normalisation

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return dim_err(format!("softmax axis {axis} for shape {sx:?}"));
        }
        let (outer, len, inner) = split_at_axis(&sx, axis);
        let d = self.value(x).data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| d[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (d[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(sx, out), Op::Softmax { x, axis }))
    }

    /// Normalises the last axis to zero mean and unit (biased) variance, then applies
    /// `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let dim = *sx.last().ok_or_else(|| PastnError::Dimension("layer_norm of a scalar".into()))?;
        if self.shape(gamma) != [dim] || self.shape(beta) != [dim] {
            return dim_err(format!(
                "layer_norm: input {sx:?}, gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let d = self.value(x).data();
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let rows = d.len() / dim;
        let mut out = vec![0.0; d.len()];
        let mut xhat = vec![0.0; d.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &d[r * dim..(r + 1) * dim];
            let mean = row.iter().sum::<f64>() / dim as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..dim {
                let h = if rs.is_finite() { (row[j] - mean) * rs } else { 0.0 };
                xhat[r * dim + j] = h;
                out[r * dim + j] = gm[j] * h + bt[j];
            }
        }
        Ok(self.push(
            Tensor::from_parts(sx, out),
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
        ))
    }

    // ---------------------------------------------------------------- backward

    /// Fills gradients of the scalar `loss` with respect to every leaf that requires them.
    ///
    /// Gradients from repeated uses of a leaf are summed. Calling again replaces the
    /// previous result.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(PastnError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let mut sink = GradSink { nodes: &self.nodes, grads: &mut grads };
            backprop(&self.nodes, node, &g, &mut sink);
        }
        self.grads = grads;
        Ok(())
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], sink: &mut GradSink<'_>) {
    let val = |v: Var| &nodes[v.0].value;
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            if sink.wants(*a) {
                sink.add(*a, &reduce_to_shape(g, &out.shape, &val(*a).shape));
            }
            if sink.wants(*b) {
                let mut r = reduce_to_shape(g, &out.shape, &val(*b).shape);
                if matches!(node.op, Op::Sub(..)) {
                    r.iter_mut().for_each(|v| *v = -*v);
                }
                sink.add(*b, &r);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if va.shape == vb.shape {
                if let Some(s) = sink.slot(*a) {
                    for ((s, &gi), &bi) in s.iter_mut().zip(g).zip(&vb.data) {
                        *s += gi * bi;
                    }
                }
                if let Some(s) = sink.slot(*b) {
                    for ((s, &gi), &ai) in s.iter_mut().zip(g).zip(&va.data) {
                        *s += gi * ai;
                    }
                }
            } else {
                let sa = broadcast_strides(&va.shape, &out.shape);
                let sb = broadcast_strides(&vb.shape, &out.shape);
                if let Some(s) = sink.slot(*a) {
                    for_each_broadcast(&out.shape, &sa, &sb, |i, oa, ob| s[oa] += g[i] * vb.data[ob]);
                }
                if let Some(s) = sink.slot(*b) {
                    for_each_broadcast(&out.shape, &sa, &sb, |i, oa, ob| s[ob] += g[i] * va.data[oa]);
                }
            }
        }
        Op::Scale(x, f) => {
            if let Some(s) = sink.slot(*x) {
                s.iter_mut().zip(g).for_each(|(s, &gi)| *s += gi * f);
            }
        }
        Op::Tanh(x) => {
            if let Some(s) = sink.slot(*x) {
                for ((s, &gi), &y) in s.iter_mut().zip(g).zip(&out.data) {
                    *s += gi * (1.0 - y * y);
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(s) = sink.slot(*x) {
                for ((s, &gi), &y) in s.iter_mut().zip(g).zip(&out.data) {
                    *s += gi * y * (1.0 - y);
                }
            }
        }
        Op::Relu(x) => {
            let xv = &val(*x).data;
            if let Some(s) = sink.slot(*x) {
                for ((s, &gi), &xi) in s.iter_mut().zip(g).zip(xv) {
                    if xi > 0.0 {
                        *s += gi;
                    }
                }
            }
        }
        Op::Abs(x) => {
            let xv = &val(*x).data;
            if let Some(s) = sink.slot(*x) {
                for ((s, &gi), &xi) in s.iter_mut().zip(g).zip(xv) {
                    if xi > 0.0 {
                        *s += gi;
                    } else if xi < 0.0 {
                        *s -= gi;
                    }
                }
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(s) = sink.slot(*x) {
                for ((s, &gi), &m) in s.iter_mut().zip(g).zip(mask) {
                    *s += gi * m;
                }
            }
        }
        Op::Sum(x) => {
            if let Some(s) = sink.slot(*x) {
                s.iter_mut().for_each(|s| *s += g[0]);
            }
        }
        Op::Mean(x) => {
            let n = val(*x).numel() as f64;
            if let Some(s) = sink.slot(*x) {
                s.iter_mut().for_each(|s| *s += g[0] / n);
            }
        }
        Op::Linear(x, w) => {
            let (vx, vw) = (val(*x), val(*w));
            let (k, n) = (vw.shape[0], vw.shape[1]);
            let rows = vx.numel() / k;
            if let Some(s) = sink.slot(*x) {
                gemm(rows, n, k, MatRef::row_major(g, n), MatRef::transposed(&vw.data, n), 1.0, s);
            }
            if let Some(s) = sink.slot(*w) {
                gemm(k, rows, n, MatRef::transposed(&vx.data, k), MatRef::row_major(g, n), 1.0, s);
            }
        }
        Op::BatchMatMul { a, b, trans_b } => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k) = matrix_dims(&va.shape);
            let n = *out.shape.last().unwrap();
            let groups = va.numel() / (m * k);
            if sink.wants(*a) {
                let s = sink.slot(*a).unwrap();
                for gi in 0..groups {
                    let gg = &g[gi * m * n..(gi + 1) * m * n];
                    let bg = &vb.data[gi * k * n..(gi + 1) * k * n];
                    let bview = if *trans_b { MatRef::row_major(bg, k) } else { MatRef::transposed(bg, n) };
                    gemm(m, n, k, MatRef::row_major(gg, n), bview, 1.0, &mut s[gi * m * k..(gi + 1) * m * k]);
                }
            }
            if sink.wants(*b) {
                let s = sink.slot(*b).unwrap();
                for gi in 0..groups {
                    let gg = &g[gi * m * n..(gi + 1) * m * n];
                    let ag = &va.data[gi * m * k..(gi + 1) * m * k];
                    let dst = &mut s[gi * k * n..(gi + 1) * k * n];
                    if *trans_b {
                        gemm(n, m, k, MatRef::transposed(gg, n), MatRef::row_major(ag, k), 1.0, dst);
                    } else {
                        gemm(k, m, n, MatRef::transposed(ag, k), MatRef::row_major(gg, n), 1.0, dst);
                    }
                }
            }
        }
        Op::Propagate { p, x } => {
            let (vp, vx) = (val(*p), val(*x));
            let nn = vp.shape[0];
            let feat: usize = vx.shape[2..].iter().product();
            let batch = vx.shape[0];
            let stride = nn * feat;
            if sink.wants(*x) {
                let s = sink.slot(*x).unwrap();
                for b in 0..batch {
                    gemm(
                        nn,
                        nn,
                        feat,
                        MatRef::transposed(&vp.data, nn),
                        MatRef::row_major(&g[b * stride..(b + 1) * stride], feat),
                        1.0,
                        &mut s[b * stride..(b + 1) * stride],
                    );
                }
            }
            if sink.wants(*p) {
                let s = sink.slot(*p).unwrap();
                for b in 0..batch {
                    gemm(
                        nn,
                        feat,
                        nn,
                        MatRef::row_major(&g[b * stride..(b + 1) * stride], feat),
                        MatRef::transposed(&vx.data[b * stride..(b + 1) * stride], feat),
                        1.0,
                        s,
                    );
                }
            }
        }
        Op::ConvTime { x, kernel, dilation } => {
            let (vx, vk) = (val(*x), val(*kernel));
            let (c_out, c_in, taps) = (vk.shape[0], vk.shape[1], vk.shape[2]);
            let t_in = vx.shape[vx.shape.len() - 2];
            let rows = vx.numel() / (t_in * c_in);
            let mut osi = vec![0.0; vk.numel()];
            for co in 0..c_out {
                for ci in 0..c_in {
                    for s in 0..taps {
                        osi[(co * taps + s) * c_in + ci] = vk.data[(co * c_in + ci) * taps + s];
                    }
                }
            }
            let (dx, dk) = kernels::conv_time_backward(
                &vx.data,
                &osi,
                g,
                rows,
                t_in,
                c_in,
                c_out,
                taps,
                *dilation,
                sink.wants(*x),
                sink.wants(*kernel),
            );
            if let Some(dx) = dx {
                sink.add(*x, &dx);
            }
            if let Some(dk) = dk {
                sink.add(*kernel, &dk);
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = split_at_axis(&out.shape, *axis);
            let mut offset = 0;
            for &v in inputs {
                let len = val(v).shape[*axis];
                if let Some(s) = sink.slot(v) {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        for (d, &gv) in s[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                            *d += gv;
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let len = out.shape[*axis];
            let (outer, ext, inner) = split_at_axis(&val(*x).shape, *axis);
            if let Some(s) = sink.slot(*x) {
                for o in 0..outer {
                    let base = (o * ext + start) * inner;
                    for (d, &gv) in s[base..base + len * inner].iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                        *d += gv;
                    }
                }
            }
        }
        Op::Permute { x, perm } => {
            let own = kernels::strides(&val(*x).shape);
            let read: Vec<usize> = perm.iter().map(|&p| own[p]).collect();
            let zero = vec![0; perm.len()];
            if let Some(s) = sink.slot(*x) {
                for_each_broadcast(&out.shape, &read, &zero, |i, o, _| s[o] += g[i]);
            }
        }
        Op::Reshape(x) => sink.add(*x, g),
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = split_at_axis(&out.shape, *axis);
            let y = &out.data;
            if let Some(s) = sink.slot(*x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            s[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let dim = *out.shape.last().unwrap();
            let rows = out.numel() / dim;
            let gm = &val(*gamma).data;
            if let Some(s) = sink.slot(*gamma) {
                for r in 0..rows {
                    for j in 0..dim {
                        s[j] += g[r * dim + j] * xhat[r * dim + j];
                    }
                }
            }
            if let Some(s) = sink.slot(*beta) {
                for r in 0..rows {
                    for j in 0..dim {
                        s[j] += g[r * dim + j];
                    }
                }
            }
            if let Some(s) = sink.slot(*x) {
                let nd = dim as f64;
                let mut dxhat = vec![0.0; dim];
                for r in 0..rows {
                    let rs = rstd[r];
                    if !rs.is_finite() {
                        continue;
                    }
                    let h = &xhat[r * dim..(r + 1) * dim];
                    let mut sum_d = 0.0;
                    let mut sum_dh = 0.0;
                    for j in 0..dim {
                        dxhat[j] = g[r * dim + j] * gm[j];
                        sum_d += dxhat[j];
                        sum_dh += dxhat[j] * h[j];
                    }
                    for j in 0..dim {
                        s[r * dim + j] += rs / nd * (nd * dxhat[j] - sum_d - h[j] * sum_dh);
                    }
                }
            }
        }
    }
}
