//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! nodes in reverse and accumulates vector-Jacobian products into the inputs
//! that require gradients. Nodes whose inputs are all constants are recorded
//! without gradient tracking.

use crate::error::{Error, Result};
use crate::numkit::tensor::{matmul_into, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Elu(Var),
    Tanh(Var),
    Sqrt(Var),
    Sin(Var),
    Cos(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Minimum(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    ScaleBy(Var, Var),
    Matmul(Var, Var),
    Bmm(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SoftmaxLast(Var),
    LogSoftmaxLast(Var),
    LayerNormLast(Var, f64),
    SumLast(Var),
    MeanLast(Var),
    L1NormLast(Var),
    L2NormLast(Var),
    L2NormalizeLast(Var, f64),
    ConcatLast(Vec<Var>),
    NarrowLast(Var, usize),
    PickLast(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    SegmentSoftmax(Var, Vec<usize>),
    MeanRows(Var),
    SumAll(Var),
    MeanAll(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`; all zeros when `var` does not
    /// influence the loss.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

fn last_axis_shape(shape: &[usize]) -> Vec<usize> {
    if shape.len() <= 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    /// Copies `v`'s value into a new constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, rg)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Numerically stable `log(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, log_sigmoid, Op::LogSigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(
            x,
            move |v| if v > 0.0 { v } else { slope * v },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { v.exp_m1() }, Op::Elu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// Square root; the gradient at 0 is taken as 0.
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, f64::sin, Op::Sin(x))
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, f64::cos, Op::Cos(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, move |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, move |v| v + c, Op::AddScalar(x))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let value = self.value(a).zip_map(self.value(b), f);
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, f64::min, Op::Minimum(a, b))
    }

    /// `x + b` with `b` of length `cols(x)` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(b);
        if bv.numel() != xv.cols() {
            return Err(Error::shape("add_row", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        let c = xv.cols();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv.data()[i % c];
        }
        Ok(self.push(out, Op::AddRow(x, b), &[x, b]))
    }

    /// `x * w` with `w` of length `cols(x)` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, w: Var) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        if wv.numel() != xv.cols() {
            return Err(Error::shape("mul_row", xv.shape(), wv.shape()));
        }
        let mut out = xv.clone();
        let c = xv.cols();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o *= wv.data()[i % c];
        }
        Ok(self.push(out, Op::MulRow(x, w), &[x, w]))
    }

    /// Scales row `i` of `x` by `c[i]`; `c` holds one value per row.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let xv = self.value(x);
        let cv = self.value(c);
        if cv.numel() != xv.rows() {
            return Err(Error::shape("mul_col", xv.shape(), cv.shape()));
        }
        let mut out = xv.clone();
        let cols = xv.cols();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o *= cv.data()[i / cols];
        }
        Ok(self.push(out, Op::MulCol(x, c), &[x, c]))
    }

    /// Multiplies every entry of `x` by the single value held in `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.numel() != 1 {
            return Err(Error::shape("scale_by", self.shape(x), sv.shape()));
        }
        let k = sv.data()[0];
        let out = self.value(x).map(|v| v * k);
        Ok(self.push(out, Op::ScaleBy(x, s), &[x, s]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::Matmul(a, b), &[a, b]))
    }

    /// Batched matmul: `[B, n, k] x [B, k, m] -> [B, n, m]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (batch, n, k, m) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * n * m];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            matmul_into(
                &av[i * n * k..(i + 1) * n * k],
                &bv[i * k * m..(i + 1) * k * m],
                &mut out[i * n * m..(i + 1) * n * m],
                n,
                k,
                m,
            );
        }
        let value = Tensor::new(vec![batch, n, m], out)?;
        Ok(self.push(value, Op::Bmm(a, b), &[a, b]))
    }

    /// Swaps the last two axes (rank >= 2).
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    fn check_nonempty_last(&self, op: &'static str, x: Var) -> Result<()> {
        if self.value(x).cols() == 0 {
            return Err(Error::EmptyAxis { op });
        }
        Ok(())
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        self.check_nonempty_last("softmax_last", x)?;
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        Ok(self.push(out, Op::SoftmaxLast(x), &[x]))
    }

    pub fn log_softmax_last(&mut self, x: Var) -> Result<Var> {
        self.check_nonempty_last("log_softmax_last", x)?;
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Ok(self.push(out, Op::LogSoftmaxLast(x), &[x]))
    }

    /// Layer normalization over the last axis without affine parameters.
    pub fn layer_norm_last(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.check_nonempty_last("layer_norm_last", x)?;
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        }
        Ok(self.push(out, Op::LayerNormLast(x, eps), &[x]))
    }

    fn reduce_last(&mut self, x: Var, f: impl Fn(&[f64]) -> f64, op: Op) -> Var {
        let xv = self.value(x);
        let data: Vec<f64> = (0..xv.rows()).map(|r| f(xv.row(r))).collect();
        let value = Tensor::new(last_axis_shape(xv.shape()), data).expect("reduce shape");
        self.push(value, op, &[x])
    }

    /// Sum over the last axis; the axis is dropped (rank-1 input gives `[1]`).
    pub fn sum_last(&mut self, x: Var) -> Var {
        self.reduce_last(x, |r| r.iter().sum(), Op::SumLast(x))
    }

    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        self.check_nonempty_last("mean_last", x)?;
        Ok(self.reduce_last(
            x,
            |r| r.iter().sum::<f64>() / r.len() as f64,
            Op::MeanLast(x),
        ))
    }

    pub fn l1_norm_last(&mut self, x: Var) -> Var {
        self.reduce_last(x, |r| r.iter().map(|v| v.abs()).sum(), Op::L1NormLast(x))
    }

    pub fn l2_norm_last(&mut self, x: Var) -> Var {
        self.reduce_last(
            x,
            |r| r.iter().map(|v| v * v).sum::<f64>().sqrt(),
            Op::L2NormLast(x),
        )
    }

    /// `x / sqrt(|x|^2 + eps)` row-wise over the last axis.
    pub fn l2_normalize_last(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.check_nonempty_last("l2_normalize_last", x)?;
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(self.push(out, Op::L2NormalizeLast(x, eps), &[x]))
    }

    /// Concatenates along the last axis; all leading axes must agree.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::invalid("concat_last: no inputs"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        for &x in xs {
            let s = self.shape(x);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat_last", self.shape(*first), s));
            }
        }
        let rows = self.value(*first).rows();
        let total: usize = xs.iter().map(|&x| self.value(x).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                data.extend_from_slice(self.value(x).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::ConcatLast(xs.to_vec()), xs))
    }

    /// Slice `[start, start + len)` of the last axis.
    pub fn narrow_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.cols() || len == 0 {
            return Err(Error::shape("narrow_last", xv.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(xv.rows() * len);
        for r in 0..xv.rows() {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::NarrowLast(x, start), &[x]))
    }

    /// Selects `x[r, index[r]]` for each row `r`; the last axis is dropped.
    pub fn pick_last(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if index.len() != xv.rows() || index.iter().any(|&i| i >= xv.cols()) {
            return Err(Error::shape("pick_last", xv.shape(), &[index.len()]));
        }
        let data = index
            .iter()
            .enumerate()
            .map(|(r, &i)| xv.row(r)[i])
            .collect();
        let value = Tensor::new(last_axis_shape(xv.shape()), data)?;
        Ok(self.push(value, Op::PickLast(x, index.to_vec()), &[x]))
    }

    /// Row lookup along the first axis.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let value = self.value(x).gather_rows(index)?;
        Ok(self.push(value, Op::GatherRows(x, index.to_vec()), &[x]))
    }

    /// `out[index[e]] += x[e]` into `n` first-axis slots.
    pub fn scatter_add_rows(&mut self, x: Var, index: &[usize], n: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape()[0] != index.len() || index.iter().any(|&i| i >= n) {
            return Err(Error::shape("scatter_add_rows", xv.shape(), &[index.len(), n]));
        }
        let stride = xv.numel() / index.len().max(1);
        let mut shape = xv.shape().to_vec();
        shape[0] = n;
        let mut out = Tensor::zeros(&shape);
        for (e, &i) in index.iter().enumerate() {
            let src = &xv.data()[e * stride..(e + 1) * stride];
            for (o, s) in out.data_mut()[i * stride..(i + 1) * stride].iter_mut().zip(src) {
                *o += s;
            }
        }
        Ok(self.push(out, Op::ScatterAddRows(x, index.to_vec()), &[x]))
    }

    /// Softmax of a per-edge value vector within each segment.
    pub fn segment_softmax(&mut self, x: Var, segment: &[usize], n: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.numel() != segment.len() || segment.iter().any(|&s| s >= n) {
            return Err(Error::shape("segment_softmax", xv.shape(), &[segment.len(), n]));
        }
        let mut max = vec![f64::NEG_INFINITY; n];
        for (&v, &s) in xv.data().iter().zip(segment) {
            max[s] = max[s].max(v);
        }
        let mut out = xv.clone();
        let mut denom = vec![0.0; n];
        for (o, &s) in out.data_mut().iter_mut().zip(segment) {
            *o = (*o - max[s]).exp();
            denom[s] += *o;
        }
        for (o, &s) in out.data_mut().iter_mut().zip(segment) {
            *o /= denom[s];
        }
        Ok(self.push(out, Op::SegmentSoftmax(x, segment.to_vec()), &[x]))
    }

    /// Mean over the first axis.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.shape()[0];
        if n == 0 {
            return Err(Error::EmptyAxis { op: "mean_rows" });
        }
        let stride = xv.numel() / n;
        let mut data = vec![0.0; stride];
        for r in 0..n {
            for (o, v) in data.iter_mut().zip(&xv.data()[r * stride..(r + 1) * stride]) {
                *o += v / n as f64;
            }
        }
        let shape = if xv.rank() == 1 {
            vec![1]
        } else {
            xv.shape()[1..].to_vec()
        };
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::MeanRows(x), &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::EmptyAxis { op: "mean_all" });
        }
        let value = Tensor::scalar(self.value(x).sum() / n as f64);
        Ok(self.push(value, Op::MeanAll(x), &[x]))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_shape = self.shape(loss);
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(loss_shape));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let y = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Exp(x) => self.acc(&mut grads, *x, g.zip_map(y, |g, y| g * y)),
                Op::Log(x) => self.acc(&mut grads, *x, g.zip_map(self.value(*x), |g, x| g / x)),
                Op::Sigmoid(x) => self.acc(&mut grads, *x, g.zip_map(y, |g, y| g * y * (1.0 - y))),
                Op::LogSigmoid(x) => self.acc(
                    &mut grads,
                    *x,
                    g.zip_map(self.value(*x), |g, x| g * sigmoid(-x)),
                ),
                Op::Relu(x) => self.acc(
                    &mut grads,
                    *x,
                    g.zip_map(self.value(*x), |g, x| if x > 0.0 { g } else { 0.0 }),
                ),
                Op::LeakyRelu(x, slope) => {
                    let s = *slope;
                    self.acc(
                        &mut grads,
                        *x,
                        g.zip_map(self.value(*x), |g, x| if x > 0.0 { g } else { s * g }),
                    )
                }
                Op::Elu(x) => {
                    let xv = self.value(*x);
                    let mut d = g.zip_map(y, |g, y| g * (y + 1.0));
                    for ((o, &gv), &xv) in d.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        if xv > 0.0 {
                            *o = gv;
                        }
                    }
                    self.acc(&mut grads, *x, d)
                }
                Op::Tanh(x) => self.acc(&mut grads, *x, g.zip_map(y, |g, y| g * (1.0 - y * y))),
                Op::Sqrt(x) => self.acc(
                    &mut grads,
                    *x,
                    g.zip_map(y, |g, y| if y > 0.0 { 0.5 * g / y } else { 0.0 }),
                ),
                Op::Sin(x) => self.acc(
                    &mut grads,
                    *x,
                    g.zip_map(self.value(*x), |g, x| g * x.cos()),
                ),
                Op::Cos(x) => self.acc(
                    &mut grads,
                    *x,
                    g.zip_map(self.value(*x), |g, x| -g * x.sin()),
                ),
                Op::Scale(x, c) => {
                    let c = *c;
                    self.acc(&mut grads, *x, g.map(|g| g * c))
                }
                Op::AddScalar(x) => self.acc(&mut grads, *x, g),
                Op::Add(a, b) => {
                    self.acc(&mut grads, *b, g.clone());
                    self.acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *b, g.map(|v| -v));
                    self.acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |g, b| g * b);
                    let gb = g.zip_map(self.value(*a), |g, a| g * a);
                    self.acc(&mut grads, *a, ga);
                    self.acc(&mut grads, *b, gb);
                }
                Op::Minimum(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = g.clone();
                    let mut gb = g;
                    for ((pa, pb), (&x, &z)) in ga
                        .data_mut()
                        .iter_mut()
                        .zip(gb.data_mut().iter_mut())
                        .zip(av.data().iter().zip(bv.data()))
                    {
                        if x <= z {
                            *pb = 0.0;
                        } else {
                            *pa = 0.0;
                        }
                    }
                    self.acc(&mut grads, *a, ga);
                    self.acc(&mut grads, *b, gb);
                }
                Op::AddRow(x, b) => {
                    let bv = self.value(*b);
                    let c = g.cols();
                    let mut gb = vec![0.0; c];
                    for (i, v) in g.data().iter().enumerate() {
                        gb[i % c] += v;
                    }
                    let gb = Tensor::new(bv.shape().to_vec(), gb)?;
                    self.acc(&mut grads, *b, gb);
                    self.acc(&mut grads, *x, g);
                }
                Op::MulRow(x, w) => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let c = g.cols();
                    let mut gw = vec![0.0; c];
                    let mut gx = g.clone();
                    for (i, (o, &xv)) in gx.data_mut().iter_mut().zip(xv.data()).enumerate() {
                        gw[i % c] += *o * xv;
                        *o *= wv.data()[i % c];
                    }
                    let gw = Tensor::new(wv.shape().to_vec(), gw)?;
                    self.acc(&mut grads, *w, gw);
                    self.acc(&mut grads, *x, gx);
                }
                Op::MulCol(x, c) => {
                    let (xv, cv) = (self.value(*x), self.value(*c));
                    let cols = g.cols();
                    let mut gc = vec![0.0; cv.numel()];
                    let mut gx = g.clone();
                    for (i, (o, &xv)) in gx.data_mut().iter_mut().zip(xv.data()).enumerate() {
                        gc[i / cols] += *o * xv;
                        *o *= cv.data()[i / cols];
                    }
                    let gc = Tensor::new(cv.shape().to_vec(), gc)?;
                    self.acc(&mut grads, *c, gc);
                    self.acc(&mut grads, *x, gx);
                }
                Op::ScaleBy(x, s) => {
                    let (xv, sv) = (self.value(*x), self.value(*s));
                    let k = sv.data()[0];
                    let gs: f64 = g.data().iter().zip(xv.data()).map(|(g, x)| g * x).sum();
                    self.acc(&mut grads, *s, Tensor::new(sv.shape().to_vec(), vec![gs])?);
                    self.acc(&mut grads, *x, g.map(|g| g * k));
                }
                Op::Matmul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.requires_grad(*a) {
                        self.acc(&mut grads, *a, g.matmul(&bv.transpose()?)?);
                    }
                    if self.requires_grad(*b) {
                        self.acc(&mut grads, *b, av.transpose()?.matmul(&g)?);
                    }
                }
                Op::Bmm(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (batch, n, k, m) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
                    if self.requires_grad(*a) {
                        let bt = bv.transpose()?;
                        let mut ga = vec![0.0; batch * n * k];
                        for i in 0..batch {
                            matmul_into(
                                &g.data()[i * n * m..(i + 1) * n * m],
                                &bt.data()[i * m * k..(i + 1) * m * k],
                                &mut ga[i * n * k..(i + 1) * n * k],
                                n,
                                m,
                                k,
                            );
                        }
                        self.acc(&mut grads, *a, Tensor::new(av.shape().to_vec(), ga)?);
                    }
                    if self.requires_grad(*b) {
                        let at = av.transpose()?;
                        let mut gb = vec![0.0; batch * k * m];
                        for i in 0..batch {
                            matmul_into(
                                &at.data()[i * k * n..(i + 1) * k * n],
                                &g.data()[i * n * m..(i + 1) * n * m],
                                &mut gb[i * k * m..(i + 1) * k * m],
                                k,
                                n,
                                m,
                            );
                        }
                        self.acc(&mut grads, *b, Tensor::new(bv.shape().to_vec(), gb)?);
                    }
                }
                Op::Transpose(x) => self.acc(&mut grads, *x, g.transpose()?),
                Op::Reshape(x) => {
                    let shape = self.shape(*x).to_vec();
                    self.acc(&mut grads, *x, g.reshape(&shape)?)
                }
                Op::SoftmaxLast(x) => {
                    let mut gx = g;
                    for r in 0..gx.rows() {
                        let yr = y.row(r);
                        let gr = gx.row_mut(r);
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for (gv, &yv) in gr.iter_mut().zip(yr) {
                            *gv = yv * (*gv - dot);
                        }
                    }
                    self.acc(&mut grads, *x, gx)
                }
                Op::LogSoftmaxLast(x) => {
                    let mut gx = g;
                    for r in 0..gx.rows() {
                        let yr = y.row(r);
                        let gr = gx.row_mut(r);
                        let total: f64 = gr.iter().sum();
                        for (gv, &yv) in gr.iter_mut().zip(yr) {
                            *gv -= yv.exp() * total;
                        }
                    }
                    self.acc(&mut grads, *x, gx)
                }
                Op::LayerNormLast(x, eps) => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    for r in 0..gx.rows() {
                        let xr = xv.row(r);
                        let yr = y.row(r);
                        let n = xr.len() as f64;
                        let mean = xr.iter().sum::<f64>() / n;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gr = gx.row_mut(r);
                        let gmean = gr.iter().sum::<f64>() / n;
                        let gy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n;
                        for (gv, &yv) in gr.iter_mut().zip(yr) {
                            *gv = inv * (*gv - gmean - yv * gy);
                        }
                    }
                    self.acc(&mut grads, *x, gx)
                }
                Op::SumLast(x) | Op::MeanLast(x) | Op::L1NormLast(x) | Op::L2NormLast(x) => {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let mut gx = xv.clone();
                    for r in 0..xv.rows() {
                        let gr = g.data()[r];
                        let xr = xv.row(r);
                        let out = gx.row_mut(r);
                        match &node.op {
                            Op::SumLast(_) => out.iter_mut().for_each(|v| *v = gr),
                            Op::MeanLast(_) => out.iter_mut().for_each(|v| *v = gr / c as f64),
                            Op::L1NormLast(_) => {
                                for (o, &xv) in out.iter_mut().zip(xr) {
                                    *o = if xv > 0.0 {
                                        gr
                                    } else if xv < 0.0 {
                                        -gr
                                    } else {
                                        0.0
                                    };
                                }
                            }
                            _ => {
                                let n = y.data()[r];
                                for (o, &xv) in out.iter_mut().zip(xr) {
                                    *o = if n > 0.0 { gr * xv / n } else { 0.0 };
                                }
                            }
                        }
                    }
                    self.acc(&mut grads, *x, gx)
                }
                Op::L2NormalizeLast(x, eps) => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    for r in 0..gx.rows() {
                        let xr = xv.row(r);
                        let yr = y.row(r);
                        let n = (xr.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
                        let gr = gx.row_mut(r);
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for (gv, &yv) in gr.iter_mut().zip(yr) {
                            *gv = (*gv - yv * dot) / n;
                        }
                    }
                    self.acc(&mut grads, *x, gx)
                }
                Op::ConcatLast(xs) => {
                    let total = g.cols();
                    let mut offset = 0;
                    for &x in xs {
                        let xv = self.value(x);
                        let c = xv.cols();
                        if self.requires_grad(x) {
                            let mut data = Vec::with_capacity(xv.numel());
                            for r in 0..xv.rows() {
                                data.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                            }
                            self.acc(&mut grads, x, Tensor::new(xv.shape().to_vec(), data)?);
                        }
                        offset += c;
                    }
                }
                Op::NarrowLast(x, start) => {
                    let xv = self.value(*x);
                    let (c, len) = (xv.cols(), g.cols());
                    let mut gx = Tensor::zeros(xv.shape());
                    for r in 0..xv.rows() {
                        gx.data_mut()[r * c + start..r * c + start + len].copy_from_slice(g.row(r));
                    }
                    self.acc(&mut grads, *x, gx)
                }
                Op::PickLast(x, index) => {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let mut gx = Tensor::zeros(xv.shape());
                    for (r, &i) in index.iter().enumerate() {
                        gx.data_mut()[r * c + i] = g.data()[r];
                    }
                    self.acc(&mut grads, *x, gx)
                }
                Op::GatherRows(x, index) => {
                    let xv = self.value(*x);
                    let stride = g.numel() / index.len().max(1);
                    let mut gx = Tensor::zeros(xv.shape());
                    for (e, &i) in index.iter().enumerate() {
                        let src = &g.data()[e * stride..(e + 1) * stride];
                        for (o, s) in gx.data_mut()[i * stride..(i + 1) * stride].iter_mut().zip(src) {
                            *o += s;
                        }
                    }
                    self.acc(&mut grads, *x, gx)
                }
                Op::ScatterAddRows(x, index) => {
                    let gx = g.gather_rows(index)?;
                    self.acc(&mut grads, *x, gx)
                }
                Op::SegmentSoftmax(x, segment) => {
                    let n = segment.iter().copied().max().map_or(0, |m| m + 1);
                    let mut dot = vec![0.0; n];
                    for ((&gv, &yv), &s) in g.data().iter().zip(y.data()).zip(segment) {
                        dot[s] += gv * yv;
                    }
                    let mut gx = g;
                    for ((gv, &yv), &s) in gx.data_mut().iter_mut().zip(y.data()).zip(segment) {
                        *gv = yv * (*gv - dot[s]);
                    }
                    self.acc(&mut grads, *x, gx)
                }
                Op::MeanRows(x) => {
                    let xv = self.value(*x);
                    let n = xv.shape()[0];
                    let stride = xv.numel() / n;
                    let mut gx = Tensor::zeros(xv.shape());
                    for r in 0..n {
                        for (o, v) in gx.data_mut()[r * stride..(r + 1) * stride]
                            .iter_mut()
                            .zip(g.data())
                        {
                            *o = v / n as f64;
                        }
                    }
                    self.acc(&mut grads, *x, gx)
                }
                Op::SumAll(x) => {
                    let gv = g.item();
                    self.acc(&mut grads, *x, Tensor::full(self.shape(*x), gv))
                }
                Op::MeanAll(x) => {
                    let n = self.value(*x).numel() as f64;
                    let gv = g.item() / n;
                    self.acc(&mut grads, *x, Tensor::full(self.shape(*x), gv))
                }
            }
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
