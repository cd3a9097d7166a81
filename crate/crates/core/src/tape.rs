//! Reverse-mode differentiation over a linear record of executed operations.
//!
//! Every op appends one node holding its output value plus whatever it needs
//! for the backward sweep. `backward` walks the record from the loss node down
//! to index 0, so each node is visited exactly once.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, Conv2dSpec};
use crate::tensor::Tensor;

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
    MatMul(Var, Var),
    Add { a: Var, b: Var, broadcast: bool },
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddN(Vec<Var>),
    Concat { inputs: Vec<Var>, axis: usize },
    Mean { input: Var, axis: usize },
    Sum(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec },
    MaxPool { x: Var, argmax: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, invstd: Vec<f64>, train: bool },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Dropout { x: Var, mask: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Reshape(Var),
    Transpose(Var),
    Select { x: Var, index: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm, for running averages.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased per-channel variance.
    pub var: Vec<f64>,
    /// Number of values each channel statistic was computed over.
    pub count: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)?
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    pub fn slice(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0)?.as_deref()
    }
}

/// Record of differentiable operations.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    check_finite: bool,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
            check_finite: false,
            consumed: false,
        }
    }

    /// A tape that keeps values only; `backward` on it is an error.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Fail any op whose output contains NaN or infinity.
    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let needs = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: needs,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let needs = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        match s {
            [m, n] => Ok((*m, *n)),
            _ => Err(Error::shape(op, &[s], "expected a 2-d tensor")),
        }
    }

    // ---- linear algebra ---------------------------------------------------

    /// `[m,k] · [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", &[self.shape(a), self.shape(b)], "inner dims differ"));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    /// Elementwise sum. `b` may also be a bias of length equal to `a`'s last
    /// dimension (shape `[n]` or `[1,n]`), broadcast over the leading rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let broadcast = if sa == sb {
            false
        } else {
            let last = *sa.last().unwrap_or(&0);
            let bias_like = matches!(sb, [n] if *n == last) || matches!(sb, [1, n] if *n == last);
            if !bias_like {
                return Err(Error::shape("add", &[sa, sb], "not equal and not row-broadcastable"));
            }
            true
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out: Vec<f64> = if broadcast {
            let n = bv.len();
            av.iter().enumerate().map(|(i, &x)| x + bv[i % n]).collect()
        } else {
            av.iter().zip(bv).map(|(x, y)| x + y).collect()
        };
        let shape = sa.to_vec();
        self.push("add", Tensor::from_parts(shape, out), Op::Add { a, b, broadcast }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_values(a, b, |x, y| x - y);
        let shape = self.shape(a).to_vec();
        self.push("sub", Tensor::from_parts(shape, out), Op::Sub(a, b), &[a, b])
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_values(a, b, |x, y| x * y);
        let shape = self.shape(a).to_vec();
        self.push("mul", Tensor::from_parts(shape, out), Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.value(a).map(|v| v * factor);
        self.push("scale", value, Op::Scale(a, factor), &[a])
    }

    /// Sum of several same-shaped tensors.
    pub fn add_n(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Invalid("add_n of nothing".into()))?;
        let mut acc = self.value(first).clone();
        for &v in &inputs[1..] {
            if self.shape(v) != acc.shape() {
                return Err(Error::shape("add_n", &[acc.shape(), self.shape(v)], ""));
            }
            for (x, y) in acc.data_mut().iter_mut().zip(self.value(v).data()) {
                *x += y;
            }
        }
        self.push("add_n", acc, Op::AddN(inputs.to_vec()), inputs)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, &[self.shape(a), self.shape(b)], ""));
        }
        Ok(())
    }

    fn zip_values(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    // ---- shape ops --------------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Invalid("concat of nothing".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &[&base], format!("axis {axis} out of range")));
        }
        let mut axis_total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                let shapes: Vec<&[usize]> = inputs.iter().map(|&v| self.shape(v)).collect();
                return Err(Error::shape("concat", &shapes, format!("along axis {axis}")));
            }
            axis_total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = axis_total;
        self.push("concat", Tensor::from_parts(shape, out), Op::Concat { inputs: inputs.to_vec(), axis }, inputs)
    }

    /// Mean over one axis; the axis is kept with size 1.
    pub fn mean(&mut self, input: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("mean", &[&shape], format!("axis {axis} out of range")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(input).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &x[(o * len + a) * inner..][..inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut oshape = shape;
        oshape[axis] = 1;
        self.push("mean", Tensor::from_parts(oshape, out), Op::Mean { input, axis }, &[input])
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(input), &[input])
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(input), &[input])
    }

    pub fn transpose(&mut self, input: Var) -> Result<Var> {
        let (m, n) = self.dims2("transpose", input)?;
        let x = self.value(input).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        self.push("transpose", Tensor::from_parts(vec![n, m], out), Op::Transpose(input), &[input])
    }

    /// Slice `index` off the leading axis.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || index >= shape[0] {
            return Err(Error::shape("select", &[&shape], format!("index {index}")));
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.value(x).data()[index * inner..(index + 1) * inner].to_vec();
        self.push("select", Tensor::from_parts(shape[1..].to_vec(), data), Op::Select { x, index }, &[x])
    }

    // ---- convolutional ops ------------------------------------------------

    /// `x: [N,C,H,W]`, `w: [O,C,kh,kw]`, optional `b: [O]` → `[N,O,Ho,Wo]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, c, h, wd) = match xs[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::shape("conv2d", &[&xs], "input must be [N,C,H,W]")),
        };
        let (o, kh, kw) = match ws[..] {
            [o, c2, kh, kw] if c2 == c && (kh, kw) == spec.kernel => (o, kh, kw),
            _ => return Err(Error::shape("conv2d", &[&xs, &ws], "weight must be [O,C,kh,kw]")),
        };
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::shape("conv2d", &[&ws, self.shape(b)], "bias must be [O]"));
            }
        }
        let (ho, wo) = spec
            .out_dim(h, wd)
            .ok_or_else(|| Error::shape("conv2d", &[&xs], format!("{spec:?} does not fit")))?;
        let p = ho * wo;
        let ck = c * kh * kw;
        let mut cols = vec![0.0; ck * p];
        let mut out = vec![0.0; n * o * p];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for img in 0..n {
            kernels::im2col(&xv[img * c * h * wd..][..c * h * wd], c, h, wd, &spec, ho, wo, &mut cols);
            kernels::gemm(o, ck, p, wv, false, &cols, false, 0.0, &mut out[img * o * p..][..o * p]);
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for img in 0..n {
                for (oc, &bias) in bv.iter().enumerate() {
                    out[(img * o + oc) * p..][..p].iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(
            "conv2d",
            Tensor::from_parts(vec![n, o, ho, wo], out),
            Op::Conv2d { x, w, b, spec },
            &inputs,
        )
    }

    /// Max pooling without padding; `kernel` and `stride` are (height, width).
    pub fn maxpool2d(&mut self, x: Var, kernel: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (n, c, h, w) = match xs[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::shape("maxpool2d", &[&xs], "input must be [N,C,H,W]")),
        };
        let spec = Conv2dSpec {
            kernel,
            padding: (0, 0),
            stride,
        };
        let (ho, wo) = spec
            .out_dim(h, w)
            .ok_or_else(|| Error::shape("maxpool2d", &[&xs], format!("{spec:?} does not fit")))?;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * stride.0 * w + ox * stride.1;
                    for i in 0..kernel.0 {
                        for j in 0..kernel.1 {
                            let idx = base + (oy * stride.0 + i) * w + ox * stride.1 + j;
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        self.push(
            "maxpool2d",
            Tensor::from_parts(vec![n, c, ho, wo], out),
            Op::MaxPool { x, argmax },
            &[x],
        )
    }

    /// Batch norm over `[N,C,H,W]` with per-channel statistics over (N,H,W).
    /// Training mode normalizes with batch statistics and returns them;
    /// evaluation mode uses the supplied running `(mean, var)`.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xs = self.shape(x).to_vec();
        let (n, c, h, w) = match xs[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::shape("batchnorm2d", &[&xs], "input must be [N,C,H,W]")),
        };
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batchnorm2d", &[&xs, self.shape(gamma), self.shape(beta)], ""));
        }
        let hw = h * w;
        let count = n * hw;
        let xv = self.value(x).data();
        let (mean, var, train) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::shape("batchnorm2d", &[&xs, &[m.len()]], "running stats"));
                }
                (m.to_vec(), v.to_vec(), false)
            }
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for img in 0..n {
                        s += xv[(img * c + ch) * hw..][..hw].iter().sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut sq = 0.0;
                    for img in 0..n {
                        sq += xv[(img * c + ch) * hw..][..hw].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = sq / count as f64;
                }
                (mean, var, true)
            }
        };
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for img in 0..n {
            for ch in 0..c {
                let off = (img * c + ch) * hw;
                for k in off..off + hw {
                    xhat[k] = (xv[k] - mean[ch]) * invstd[ch];
                    out[k] = gv[ch] * xhat[k] + bv[ch];
                }
            }
        }
        let stats = train.then(|| BatchStats {
            mean: mean.clone(),
            var: var.clone(),
            count,
        });
        let v = self.push(
            "batchnorm2d",
            Tensor::from_parts(xs, out),
            Op::BatchNorm { x, gamma, beta, xhat, invstd, train },
            &[x, gamma, beta],
        )?;
        Ok((v, stats))
    }

    // ---- nonlinearities ---------------------------------------------------

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push("relu", value, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(kernels::sigmoid);
        self.push("sigmoid", value, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::tanh);
        self.push("tanh", value, Op::Tanh(x), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("tensor has at least one dim");
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for (row, o) in xv.chunks(n).zip(out.chunks_mut(n)) {
            kernels::softmax_row(row, o);
        }
        self.push("softmax", Tensor::from_parts(shape, out), Op::Softmax(x), &[x])
    }

    // ---- lookup / regularization / loss ------------------------------------

    /// Rows of `table: [V,E]` for each id → `[ids.len(), E]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, e) = self.dims2("embedding", table)?;
        if ids.is_empty() {
            return Err(Error::Invalid("embedding lookup with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape("embedding", &[self.shape(table)], format!("id {bad} out of range")));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            out.extend_from_slice(&tv[i * e..(i + 1) * e]);
        }
        self.push(
            "embedding",
            Tensor::from_parts(vec![ids.len(), e], out),
            Op::Embedding { table, ids: ids.to_vec() },
            &[table],
        )
    }

    /// Inverted dropout: kept units are scaled by `1/(1-rate)`. Identity when
    /// `train` is false or `rate` is 0.
    pub fn dropout(&mut self, x: Var, rate: f64, train: bool, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Invalid(format!("dropout rate {rate} outside [0,1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data: Vec<f64> = self.value(x).data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        self.push("dropout", Tensor::from_parts(shape, data), Op::Dropout { x, mask }, &[x])
    }

    /// Summed softmax cross-entropy of `logits: [n,V]` against one target id per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.dims2("cross_entropy", logits)?;
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", &[self.shape(logits), &[targets.len()]], "one target per row"));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::shape("cross_entropy", &[self.shape(logits)], format!("target {bad} out of range")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; n * v];
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv[r * v..(r + 1) * v];
            loss += kernels::log_sum_exp(row) - row[t];
            kernels::softmax_row(row, &mut probs[r * v..(r + 1) * v]);
        }
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            &[logits],
        )
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if !self.grad_enabled {
            return Err(Error::Invalid("backward on an inference tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", &[self.shape(loss)], "loss must be a scalar"));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // Drop gradients of intermediate nodes; callers only ask about leaves.
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) || !n.needs_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.wants(a) {
                    let da = slot(grads, a, m * k);
                    kernels::gemm(m, n, k, g, false, self.value(b).data(), true, 1.0, da);
                }
                if self.wants(b) {
                    let db = slot(grads, b, k * n);
                    kernels::gemm(k, m, n, self.value(a).data(), true, g, false, 1.0, db);
                }
            }
            &Op::Add { a, b, broadcast } => {
                if self.wants(a) {
                    let da = slot(grads, a, g.len());
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if self.wants(b) {
                    let nb = self.value(b).len();
                    let db = slot(grads, b, nb);
                    if broadcast {
                        for (j, x) in g.iter().enumerate() {
                            db[j % nb] += x;
                        }
                    } else {
                        db.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if self.wants(a) {
                    slot(grads, a, g.len()).iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if self.wants(b) {
                    slot(grads, b, g.len()).iter_mut().zip(g).for_each(|(d, x)| *d -= x);
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    let bv = self.value(b).data();
                    let da = slot(grads, a, g.len());
                    for k in 0..g.len() {
                        da[k] += g[k] * bv[k];
                    }
                }
                if self.wants(b) {
                    let av = self.value(a).data();
                    let db = slot(grads, b, g.len());
                    for k in 0..g.len() {
                        db[k] += g[k] * av[k];
                    }
                }
            }
            &Op::Scale(a, f) => {
                if self.wants(a) {
                    slot(grads, a, g.len()).iter_mut().zip(g).for_each(|(d, x)| *d += f * x);
                }
            }
            Op::AddN(inputs) => {
                for &v in inputs {
                    if self.wants(v) {
                        slot(grads, v, g.len()).iter_mut().zip(g).for_each(|(d, x)| *d += x);
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let base = self.shape(inputs[0]);
                let outer: usize = base[..*axis].iter().product();
                let inner: usize = base[axis + 1..].iter().product();
                let total: usize = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.shape(v)[*axis] * inner;
                    if self.wants(v) {
                        let dv = slot(grads, v, outer * chunk);
                        for o in 0..outer {
                            let src = &g[o * total + offset..][..chunk];
                            dv[o * chunk..(o + 1) * chunk].iter_mut().zip(src).for_each(|(d, x)| *d += x);
                        }
                    }
                    offset += chunk;
                }
            }
            &Op::Mean { input, axis } => {
                if self.wants(input) {
                    let shape = self.shape(input);
                    let outer: usize = shape[..axis].iter().product();
                    let len = shape[axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let dx = slot(grads, input, outer * len * inner);
                    let inv = 1.0 / len as f64;
                    for o in 0..outer {
                        for a in 0..len {
                            let dst = &mut dx[(o * len + a) * inner..][..inner];
                            dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]).for_each(|(d, x)| *d += x * inv);
                        }
                    }
                }
            }
            &Op::Sum(input) => {
                if self.wants(input) {
                    let n = self.value(input).len();
                    slot(grads, input, n).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Reshape(input) => {
                if self.wants(input) {
                    slot(grads, input, g.len()).iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
            }
            &Op::Transpose(input) => {
                if self.wants(input) {
                    let (m, n) = (self.shape(input)[0], self.shape(input)[1]);
                    let dx = slot(grads, input, m * n);
                    for r in 0..m {
                        for c in 0..n {
                            dx[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            &Op::Select { x, index } => {
                if self.wants(x) {
                    let total = self.value(x).len();
                    let inner = g.len();
                    let dx = slot(grads, x, total);
                    dx[index * inner..(index + 1) * inner].iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
            }
            &Op::Conv2d { x, w, b, spec } => {
                let xs = self.shape(x);
                let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let os = node.value.shape();
                let (o, ho, wo) = (os[1], os[2], os[3]);
                let (kh, kw) = spec.kernel;
                let p = ho * wo;
                let ck = c * kh * kw;
                let xv = self.value(x).data();
                let wv = self.value(w).data();
                let mut cols = vec![0.0; ck * p];
                let mut dcols = vec![0.0; ck * p];
                let want_x = self.wants(x);
                let want_w = self.wants(w);
                for img in 0..n {
                    let gimg = &g[img * o * p..][..o * p];
                    if want_w {
                        kernels::im2col(&xv[img * c * h * wd..][..c * h * wd], c, h, wd, &spec, ho, wo, &mut cols);
                        let dw = slot(grads, w, o * ck);
                        kernels::gemm(o, p, ck, gimg, false, &cols, true, 1.0, dw);
                    }
                    if want_x {
                        kernels::gemm(ck, o, p, wv, true, gimg, false, 0.0, &mut dcols);
                        let dx = slot(grads, x, n * c * h * wd);
                        kernels::col2im(&dcols, c, h, wd, &spec, ho, wo, &mut dx[img * c * h * wd..][..c * h * wd]);
                    }
                }
                if let Some(b) = b {
                    if self.wants(b) {
                        let db = slot(grads, b, o);
                        for img in 0..n {
                            for (oc, d) in db.iter_mut().enumerate() {
                                *d += g[(img * o + oc) * p..][..p].iter().sum::<f64>();
                            }
                        }
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.wants(*x) {
                    let nx = self.value(*x).len();
                    let dx = slot(grads, *x, nx);
                    for (k, &src) in argmax.iter().enumerate() {
                        dx[src] += g[k];
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, invstd, train } => {
                let xs = self.shape(*x);
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let count = (n * hw) as f64;
                let gv = self.value(*gamma).data();
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for img in 0..n {
                    for ch in 0..c {
                        let off = (img * c + ch) * hw;
                        for k in off..off + hw {
                            sum_dy[ch] += g[k];
                            sum_dy_xhat[ch] += g[k] * xhat[k];
                        }
                    }
                }
                if self.wants(*gamma) {
                    slot(grads, *gamma, c).iter_mut().zip(&sum_dy_xhat).for_each(|(d, v)| *d += v);
                }
                if self.wants(*beta) {
                    slot(grads, *beta, c).iter_mut().zip(&sum_dy).for_each(|(d, v)| *d += v);
                }
                if self.wants(*x) {
                    let dx = slot(grads, *x, n * c * hw);
                    for img in 0..n {
                        for ch in 0..c {
                            let off = (img * c + ch) * hw;
                            let scale = gv[ch] * invstd[ch];
                            for k in off..off + hw {
                                dx[k] += if *train {
                                    scale * (g[k] - sum_dy[ch] / count - xhat[k] * sum_dy_xhat[ch] / count)
                                } else {
                                    scale * g[k]
                                };
                            }
                        }
                    }
                }
            }
            &Op::Relu(x) => {
                if self.wants(x) {
                    let dx = slot(grads, x, g.len());
                    for k in 0..g.len() {
                        if out[k] > 0.0 {
                            dx[k] += g[k];
                        }
                    }
                }
            }
            &Op::Sigmoid(x) => {
                if self.wants(x) {
                    let dx = slot(grads, x, g.len());
                    for k in 0..g.len() {
                        dx[k] += g[k] * out[k] * (1.0 - out[k]);
                    }
                }
            }
            &Op::Tanh(x) => {
                if self.wants(x) {
                    let dx = slot(grads, x, g.len());
                    for k in 0..g.len() {
                        dx[k] += g[k] * (1.0 - out[k] * out[k]);
                    }
                }
            }
            &Op::Softmax(x) => {
                if self.wants(x) {
                    let n = *node.value.shape().last().unwrap();
                    let dx = slot(grads, x, g.len());
                    for r in 0..g.len() / n {
                        let y = &out[r * n..(r + 1) * n];
                        let gy = &g[r * n..(r + 1) * n];
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for k in 0..n {
                            dx[r * n + k] += y[k] * (gy[k] - dot);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let e = self.shape(*table)[1];
                    let nt = self.value(*table).len();
                    let dt = slot(grads, *table, nt);
                    for (r, &id) in ids.iter().enumerate() {
                        dt[id * e..(id + 1) * e].iter_mut().zip(&g[r * e..(r + 1) * e]).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if self.wants(*x) {
                    let dx = slot(grads, *x, g.len());
                    for k in 0..g.len() {
                        dx[k] += g[k] * mask[k];
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if self.wants(*logits) {
                    let v = self.shape(*logits)[1];
                    let dl = slot(grads, *logits, probs.len());
                    for (r, &t) in targets.iter().enumerate() {
                        for k in 0..v {
                            let onehot = if k == t { 1.0 } else { 0.0 };
                            dl[r * v + k] += g[0] * (probs[r * v + k] - onehot);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_constant_row_is_uniform() {
        let mut tape = Tape::new();
        for c in [-3.0, 0.0, 7.5, 1e3] {
            let x = tape.constant(Tensor::row(&[c; 4]));
            let y = tape.softmax(x).unwrap();
            for &p in tape.value(y).data() {
                assert!((p - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_zero_ln2() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(&[0.0, 2f64.ln()]));
        let y = tape.softmax(x).unwrap();
        let p = tape.value(y).data();
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn identity_kernel_conv_leaves_image_unchanged() {
        let mut tape = Tape::new();
        let img: Vec<f64> = (0..20).map(|v| (v as f64 * 0.37).sin()).collect();
        let x = tape.constant(t(&[1, 1, 4, 5], &img));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = tape.constant(t(&[1, 1, 3, 3], &k));
        let spec = Conv2dSpec {
            kernel: (3, 3),
            padding: (1, 1),
            stride: (1, 1),
        };
        let y = tape.conv2d(x, w, None, spec).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 4, 5]);
        assert_eq!(tape.value(y).data(), &img[..]);
    }

    #[test]
    fn maxpool_2x2() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.maxpool2d(x, (2, 2), (2, 2)).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[4.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn independent_leaf_gets_no_gradient_flow() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[2], &[1.0, -1.0]), true);
        let u = tape.leaf(t(&[2], &[0.5, 0.5]), true);
        let loss = tape.sum(u).unwrap();
        let _ = w;
        let g = tape.backward(loss).unwrap();
        assert!(g.get(w).is_none());
        assert_eq!(g.get(u).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(2.0), true);
        let loss = tape.mul(w, w).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::TapeConsumed)));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        match err {
            Error::Shape { op, shapes, .. } => {
                assert_eq!(op, "matmul");
                assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
            }
            e => panic!("unexpected {e}"),
        }
        let c = tape.constant(Tensor::zeros([3, 3]));
        assert!(matches!(tape.concat(&[a, c], 1), Err(Error::Shape { op: "concat", .. })));
    }

    #[test]
    fn dropout_eval_mode_is_identity() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = tape.constant(Tensor::row(&[1.0, 2.0, 3.0]));
        let y = tape.dropout(x, 0.4, false, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn finite_check_flags_nan() {
        let mut tape = Tape::new().with_finite_check(true);
        let x = tape.constant(Tensor::row(&[f64::INFINITY]));
        let zero = tape.constant(Tensor::row(&[0.0]));
        assert!(matches!(tape.mul(x, zero), Err(Error::NonFinite { op: "mul" })));
    }

    #[test]
    fn inference_tape_refuses_backward() {
        let mut tape = Tape::inference();
        let w = tape.leaf(Tensor::scalar(1.0), true);
        let y = tape.scale(w, 2.0).unwrap();
        assert!(tape.backward(y).is_err());
    }
}
