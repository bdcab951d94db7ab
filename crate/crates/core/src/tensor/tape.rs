use super::{axis_split, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel batch moments produced by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance, the one used for normalization.
    pub var: Vec<f64>,
    /// Elements per channel that went into the moments.
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Exp(Var),
    Sum(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    AddBias(Var, Var),
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<usize>,
        /// Per-row loss weight, already divided by the batch normalizer.
        row_weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Records operations in execution order so that gradients can be pushed
/// back from a scalar loss. Node indices are a topological order by
/// construction: an op can only consume vars that already exist.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients on `backward`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Clears every gradient slot so `backward` may run again.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|&a| f(a)).collect();
        let value = Tensor {
            shape: xv.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[x]);
        self.push(value, rg, op)
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av.shape(), bv.shape()));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor {
            shape: av.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |a| a * c, Op::Scale(x, c))
    }

    /// `max(x, 0)`; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |a| if a > 0.0 { a } else { 0.0 }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// Natural log. Non-positive inputs yield NaN/-inf which surface as a
    /// non-finite loss.
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    /// `(m × k) · (k × n) → m × n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            rg,
            Op::MatMul(a, b),
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.shape().len() != 2 {
            return Err(shape_err("transpose", xv.shape(), &[]));
        }
        let (r, c) = (xv.shape()[0], xv.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv.data()[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![c, r],
                data: out,
            },
            rg,
            Op::Transpose(x),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.nodes[first.0].value.shape().to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", &base, &[axis]));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.nodes[v.0].value.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in inputs {
                let t = &self.nodes[v.0].value;
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor { shape, data },
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if axis >= xv.shape().len() || start >= end || end > xv.shape()[axis] {
            return Err(Error::InvalidArgument(format!(
                "slice {start}..{end} on axis {axis} of shape {:?}",
                xv.shape()
            )));
        }
        let (outer, len, inner) = axis_split(xv.shape(), axis);
        let width = (end - start) * inner;
        let mut data = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let base = o * len * inner + start * inner;
            data.extend_from_slice(&xv.data()[base..base + width]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = end - start;
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor { shape, data },
            rg,
            Op::Slice {
                input: x,
                axis,
                start,
            },
        ))
    }

    /// Adds a vector `b` of length n to every row of `x` whose last axis is n.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        let n = *xv.shape().last().unwrap();
        if bv.shape() != [n] {
            return Err(shape_err("add_bias", xv.shape(), bv.shape()));
        }
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| a + bv.data()[i % n])
            .collect();
        let value = Tensor {
            shape: xv.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[x, b]);
        Ok(self.push(value, rg, Op::AddBias(x, b)))
    }

    /// `y[f][c][t] = x[f][c][t] * scale[c] + shift[c]` for `x` of shape
    /// `batch × channels × len`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (xv, sv, hv) = (
            &self.nodes[x.0].value,
            &self.nodes[scale.0].value,
            &self.nodes[shift.0].value,
        );
        if xv.shape().len() != 3 || sv.shape() != [xv.shape()[1]] || hv.shape() != sv.shape() {
            return Err(shape_err("channel_affine", xv.shape(), sv.shape()));
        }
        let (c, l) = (xv.shape()[1], xv.shape()[2]);
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let ch = (i / l) % c;
                a * sv.data()[ch] + hv.data()[ch]
            })
            .collect();
        let value = Tensor {
            shape: xv.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[x, scale, shift]);
        Ok(self.push(value, rg, Op::ChannelAffine { x, scale, shift }))
    }

    /// Valid (unpadded) 1-D convolution.
    ///
    /// `x`: batch × in_channels × len, `w`: out_channels × in_channels × kernel,
    /// `b`: out_channels. Output: batch × out_channels × (floor((len − kernel)/stride) + 1).
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (xv, wv, bv) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        if xv.shape().len() != 3
            || wv.shape().len() != 3
            || xv.shape()[1] != wv.shape()[1]
            || bv.shape() != [wv.shape()[0]]
        {
            return Err(shape_err("conv1d", xv.shape(), wv.shape()));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv1d stride must be >= 1".into()));
        }
        let (batch, cin, len) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (cout, k) = (wv.shape()[0], wv.shape()[2]);
        if len < k {
            return Err(Error::InvalidArgument(format!(
                "conv1d input length {len} shorter than kernel {k}"
            )));
        }
        let out_len = (len - k) / stride + 1;
        let mut out = vec![0.0; batch * cout * out_len];
        let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
        for f in 0..batch {
            let xf = &xd[f * cin * len..(f + 1) * cin * len];
            for o in 0..cout {
                let wo = &wd[o * cin * k..(o + 1) * cin * k];
                let dst = &mut out[(f * cout + o) * out_len..(f * cout + o + 1) * out_len];
                for (t, slot) in dst.iter_mut().enumerate() {
                    let mut acc = bd[o];
                    for c in 0..cin {
                        let xs = &xf[c * len + t * stride..c * len + t * stride + k];
                        acc += dot(&wo[c * k..(c + 1) * k], xs);
                    }
                    *slot = acc;
                }
            }
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(
            Tensor {
                shape: vec![batch, cout, out_len],
                data: out,
            },
            rg,
            Op::Conv1d { x, w, b, stride },
        ))
    }

    /// Non-overlapping max pooling over the last axis. The trailing
    /// `len mod width` elements are dropped; ties resolve to the lowest index.
    pub fn max_pool(&mut self, x: Var, width: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let len = *xv.shape().last().unwrap();
        if width == 0 || len < width {
            return Err(Error::InvalidArgument(format!(
                "max_pool width {width} does not fit length {len}"
            )));
        }
        let rows = xv.len() / len;
        let out_len = len / width;
        let mut data = Vec::with_capacity(rows * out_len);
        let mut argmax = Vec::with_capacity(rows * out_len);
        for r in 0..rows {
            for j in 0..out_len {
                let base = r * len + j * width;
                let mut best = base;
                for i in base + 1..base + width {
                    if xv.data()[i] > xv.data()[best] {
                        best = i;
                    }
                }
                data.push(xv.data()[best]);
                argmax.push(best);
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = out_len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape, data }, rg, Op::MaxPool { x, argmax }))
    }

    /// Training-mode batch normalization over `batch × channels × len`,
    /// normalizing each channel with the moments of its `batch·len` values.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (xv, gv, bv) = (
            &self.nodes[x.0].value,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
        );
        if xv.shape().len() != 3 || gv.shape() != [xv.shape()[1]] || bv.shape() != gv.shape() {
            return Err(shape_err("batch_norm", xv.shape(), gv.shape()));
        }
        let (batch, c, l) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let count = batch * l;
        if count < 2 {
            return Err(Error::InvalidArgument(
                "batch norm in training mode needs at least 2 values per channel; \
                 use eval mode or a larger batch"
                    .into(),
            ));
        }
        let xd = xv.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for f in 0..batch {
            for ch in 0..c {
                let row = &xd[(f * c + ch) * l..(f * c + ch + 1) * l];
                mean[ch] += row.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for f in 0..batch {
            for ch in 0..c {
                let row = &xd[(f * c + ch) * l..(f * c + ch + 1) * l];
                var[ch] += row.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for (i, (&xi, (h, o))) in xd.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let ch = (i / l) % c;
            *h = (xi - mean[ch]) * inv_std[ch];
            *o = *h * gv.data()[ch] + bv.data()[ch];
        }
        let value = Tensor {
            shape: xv.shape().to_vec(),
            data: out,
        };
        let stats = BatchStats { mean, var, count };
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            value,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        Ok((v, stats))
    }

    /// Mean (optionally class-weighted) softmax cross-entropy of `logits`
    /// (batch × classes) against integer targets. Returns a scalar.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        class_weights: Option<&[f64]>,
    ) -> Result<Var> {
        let lv = &self.nodes[logits.0].value;
        if lv.shape().len() != 2 || lv.shape()[0] != targets.len() {
            return Err(shape_err("softmax_cross_entropy", lv.shape(), &[targets.len()]));
        }
        let (batch, classes) = (lv.shape()[0], lv.shape()[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::InvalidArgument(format!(
                "target class {bad} outside 0..{classes}"
            )));
        }
        if let Some(w) = class_weights {
            if w.len() != classes {
                return Err(shape_err("class_weights", &[classes], &[w.len()]));
            }
        }
        let mut probs = vec![0.0; batch * classes];
        let mut nll = vec![0.0; batch];
        for r in 0..batch {
            let row = &lv.data()[r * classes..(r + 1) * classes];
            let lse = log_sum_exp(row);
            for (j, &z) in row.iter().enumerate() {
                probs[r * classes + j] = (z - lse).exp();
            }
            nll[r] = lse - row[targets[r]];
        }
        let raw: Vec<f64> = targets
            .iter()
            .map(|&t| class_weights.map_or(1.0, |w| w[t]))
            .collect();
        let norm: f64 = raw.iter().sum();
        if norm <= 0.0 {
            return Err(Error::InvalidArgument(
                "class weights sum to zero over the batch".into(),
            ));
        }
        let row_weights: Vec<f64> = raw.iter().map(|w| w / norm).collect();
        let loss = nll.iter().zip(&row_weights).map(|(l, w)| l * w).sum();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                row_weights,
            },
        ))
    }

    /// Back-propagates from the scalar `loss`. Gradients accumulate into
    /// every node that requires them; afterwards each `requires_grad` leaf
    /// holds a gradient, zero if the loss does not depend on it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::InvalidArgument(
                "backward called twice without zero_grads".into(),
            ));
        }
        let shape = self.nodes[loss.0].value.shape();
        if shape != [1] {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {shape:?}"
            )));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            self.propagate(i, &g);
            self.nodes[i].grad = Some(g);
        }
        for n in &mut self.nodes {
            if n.requires_grad && matches!(n.op, Op::Leaf) && n.grad.is_none() {
                n.grad = Some(vec![0.0; n.value.len()]);
            }
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64], &Tensor)) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let node = &mut self.nodes[v.0];
        let g = node.grad.get_or_insert_with(|| vec![0.0; node.value.len()]);
        f(g, &node.value);
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Take the op out so input nodes can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(*a, |ga, _| add_into(ga, g));
                self.acc(*b, |gb, _| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.acc(*a, |ga, _| add_into(ga, g));
                self.acc(*b, |gb, _| gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let bv = self.val(*b).data().to_vec();
                let av = self.val(*a).data().to_vec();
                self.acc(*a, |ga, _| {
                    ga.iter_mut()
                        .zip(g.iter().zip(&bv))
                        .for_each(|(d, (s, y))| *d += s * y)
                });
                self.acc(*b, |gb, _| {
                    gb.iter_mut()
                        .zip(g.iter().zip(&av))
                        .for_each(|(d, (s, x))| *d += s * x)
                });
            }
            Op::Scale(x, c) => self.acc(*x, |gx, _| {
                gx.iter_mut().zip(g).for_each(|(d, s)| *d += s * c)
            }),
            Op::Relu(x) => self.acc(*x, |gx, xv| {
                for ((d, s), &v) in gx.iter_mut().zip(g).zip(xv.data()) {
                    if v > 0.0 {
                        *d += s;
                    }
                }
            }),
            Op::Sigmoid(x) => {
                let y = self.nodes[i].value.data().to_vec();
                self.acc(*x, |gx, _| {
                    for ((d, s), y) in gx.iter_mut().zip(g).zip(&y) {
                        *d += s * y * (1.0 - y);
                    }
                })
            }
            Op::Tanh(x) => {
                let y = self.nodes[i].value.data().to_vec();
                self.acc(*x, |gx, _| {
                    for ((d, s), y) in gx.iter_mut().zip(g).zip(&y) {
                        *d += s * (1.0 - y * y);
                    }
                })
            }
            Op::Log(x) => self.acc(*x, |gx, xv| {
                for ((d, s), v) in gx.iter_mut().zip(g).zip(xv.data()) {
                    *d += s / v;
                }
            }),
            Op::Exp(x) => {
                let y = self.nodes[i].value.data().to_vec();
                self.acc(*x, |gx, _| {
                    for ((d, s), y) in gx.iter_mut().zip(g).zip(&y) {
                        *d += s * y;
                    }
                })
            }
            Op::Sum(x) => self.acc(*x, |gx, _| gx.iter_mut().for_each(|d| *d += g[0])),
            Op::MatMul(a, b) => {
                let (m, k) = (self.val(*a).shape()[0], self.val(*a).shape()[1]);
                let n = self.val(*b).shape()[1];
                if self.nodes[a.0].requires_grad {
                    // dA = dC · Bᵀ
                    let bt = transpose_data(self.val(*b).data(), k, n);
                    self.acc(*a, |ga, _| matmul_acc(g, &bt, ga, m, n, k));
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ · dC
                    let at = transpose_data(self.val(*a).data(), m, k);
                    self.acc(*b, |gb, _| matmul_acc(&at, g, gb, k, m, n));
                }
            }
            Op::Transpose(x) => {
                let s = self.nodes[i].value.shape().to_vec();
                let gt = transpose_data(g, s[0], s[1]);
                self.acc(*x, |gx, _| add_into(gx, &gt));
            }
            Op::Reshape(x) => self.acc(*x, |gx, _| add_into(gx, g)),
            Op::Concat { inputs, axis } => {
                let shape = self.nodes[i].value.shape().to_vec();
                let (outer, total, inner) = axis_split(&shape, *axis);
                let mut offset = 0;
                for v in inputs {
                    let part = self.val(*v).shape()[*axis];
                    self.acc(*v, |gv, _| {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            let dst = o * part * inner;
                            add_into(&mut gv[dst..dst + part * inner], &g[src..src + part * inner]);
                        }
                    });
                    offset += part;
                }
            }
            Op::Slice { input, axis, start } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let width = out_shape[*axis];
                self.acc(*input, |gx, xv| {
                    let (outer, len, inner) = axis_split(xv.shape(), *axis);
                    for o in 0..outer {
                        let dst = o * len * inner + start * inner;
                        let src = o * width * inner;
                        add_into(&mut gx[dst..dst + width * inner], &g[src..src + width * inner]);
                    }
                });
            }
            Op::AddBias(x, b) => {
                self.acc(*x, |gx, _| add_into(gx, g));
                self.acc(*b, |gb, bv| {
                    let n = bv.len();
                    for (j, s) in g.iter().enumerate() {
                        gb[j % n] += s;
                    }
                });
            }
            Op::ChannelAffine { x, scale, shift } => {
                let xs = self.val(*x).shape().to_vec();
                let (c, l) = (xs[1], xs[2]);
                let sv = self.val(*scale).data().to_vec();
                let xd = if self.nodes[scale.0].requires_grad {
                    self.val(*x).data().to_vec()
                } else {
                    Vec::new()
                };
                self.acc(*x, |gx, _| {
                    for (j, (d, s)) in gx.iter_mut().zip(g).enumerate() {
                        *d += s * sv[(j / l) % c];
                    }
                });
                self.acc(*scale, |gs, _| {
                    for (j, s) in g.iter().enumerate() {
                        gs[(j / l) % c] += s * xd[j];
                    }
                });
                self.acc(*shift, |gh, _| {
                    for (j, s) in g.iter().enumerate() {
                        gh[(j / l) % c] += s;
                    }
                });
            }
            Op::Conv1d { x, w, b, stride } => self.conv1d_backward(*x, *w, *b, *stride, g),
            Op::MaxPool { x, argmax } => self.acc(*x, |gx, _| {
                for (s, &j) in g.iter().zip(argmax) {
                    gx[j] += s;
                }
            }),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let xs = self.val(*x).shape().to_vec();
                let (batch, c, l) = (xs[0], xs[1], xs[2]);
                let n = (batch * l) as f64;
                let gam = self.val(*gamma).data().to_vec();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (j, (s, h)) in g.iter().zip(xhat).enumerate() {
                    let ch = (j / l) % c;
                    sum_g[ch] += s;
                    sum_gx[ch] += s * h;
                }
                self.acc(*gamma, |gg, _| add_into(gg, &sum_gx));
                self.acc(*beta, |gb, _| add_into(gb, &sum_g));
                self.acc(*x, |gx, _| {
                    for (j, (d, (s, h))) in gx.iter_mut().zip(g.iter().zip(xhat)).enumerate() {
                        let ch = (j / l) % c;
                        *d += gam[ch] * inv_std[ch] / n
                            * (n * s - sum_g[ch] - h * sum_gx[ch]);
                    }
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets,
                row_weights,
            } => {
                let classes = self.val(*logits).shape()[1];
                self.acc(*logits, |gl, _| {
                    for (r, (&t, &w)) in targets.iter().zip(row_weights).enumerate() {
                        for j in 0..classes {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * classes + j] += g[0] * w * (probs[r * classes + j] - onehot);
                        }
                    }
                });
            }
        }
        self.nodes[i].op = op;
    }

    fn conv1d_backward(&mut self, x: Var, w: Var, b: Var, stride: usize, g: &[f64]) {
        let xs = self.val(x).shape().to_vec();
        let ws = self.val(w).shape().to_vec();
        let (batch, cin, len) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        let out_len = (len - k) / stride + 1;
        self.acc(b, |gb, _| {
            for f in 0..batch {
                for (o, d) in gb.iter_mut().enumerate() {
                    let row = &g[(f * cout + o) * out_len..(f * cout + o + 1) * out_len];
                    *d += row.iter().sum::<f64>();
                }
            }
        });
        if self.nodes[w.0].requires_grad {
            let xd = self.val(x).data().to_vec();
            self.acc(w, |gw, _| {
                for f in 0..batch {
                    for o in 0..cout {
                        let row = &g[(f * cout + o) * out_len..(f * cout + o + 1) * out_len];
                        for c in 0..cin {
                            let gwc = &mut gw[(o * cin + c) * k..(o * cin + c + 1) * k];
                            let xc = &xd[(f * cin + c) * len..(f * cin + c + 1) * len];
                            for (t, &s) in row.iter().enumerate() {
                                if s != 0.0 {
                                    axpy(gwc, s, &xc[t * stride..t * stride + k]);
                                }
                            }
                        }
                    }
                }
            });
        }
        if self.nodes[x.0].requires_grad {
            let wd = self.val(w).data().to_vec();
            self.acc(x, |gx, _| {
                for f in 0..batch {
                    for o in 0..cout {
                        let row = &g[(f * cout + o) * out_len..(f * cout + o + 1) * out_len];
                        for c in 0..cin {
                            let wc = &wd[(o * cin + c) * k..(o * cin + c + 1) * k];
                            let base = (f * cin + c) * len;
                            for (t, &s) in row.iter().enumerate() {
                                if s != 0.0 {
                                    let start = base + t * stride;
                                    axpy(&mut gx[start..start + k], s, wc);
                                }
                            }
                        }
                    }
                }
            });
        }
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(d, v)| *d += a * v);
}

fn transpose_data(d: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    out
}

/// `out += a · b` for row-major `a: m×k`, `b: k×n`.
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != 0.0 {
                axpy(orow, aip, &b[p * n..(p + 1) * n]);
            }
        }
    }
}
