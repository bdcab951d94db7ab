//! Differentiable building blocks: convolution, pooling, batch norm,
//! dropout, linear, LSTM and softmax helpers.
//!
//! Layers hold [`ParamId`]s into a [`ParamSet`] rather than owning their
//! weights. A forward pass first binds the whole set onto a [`Tape`], which
//! lets gradient checks substitute perturbed parameters without touching
//! the layers themselves.

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
}

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

/// Tape variables for every parameter of a [`ParamSet`], in registration order.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = vec![0.0; value.len()];
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn find_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), requires_grad))
                .collect(),
        )
    }

    /// Adds the tape gradients of `bound` into each parameter's `grad`.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound) {
        for (p, &v) in self.params.iter_mut().zip(&bound.0) {
            if let Some(g) = tape.grad(v) {
                p.grad.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }
}

fn uniform(rng: &mut dyn RngCore, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data agree")
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv1d {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 || in_channels == 0 || out_channels == 0 {
            return Err(Error::Config(format!(
                "{name}: kernel, stride and channel counts must be >= 1"
            )));
        }
        let bound = 1.0 / ((in_channels * kernel) as f64).sqrt();
        let weight = params.add(
            format!("{name}.weight"),
            uniform(rng, &[out_channels, in_channels, kernel], bound),
        );
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
        })
    }

    pub fn out_len(&self, in_len: usize) -> Option<usize> {
        (in_len >= self.kernel).then(|| (in_len - self.kernel) / self.stride + 1)
    }

    /// `x`: batch × in_channels × len.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.conv1d(x, bound.get(self.weight), bound.get(self.bias), self.stride)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(params: &mut ParamSet, name: &str, channels: usize) -> Self {
        let gamma = params.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
        let beta = params.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        Self {
            gamma,
            beta,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// `x`: batch × channels × len. In training mode the batch moments are
    /// returned so the caller can fold them into the running statistics.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (gamma, beta) = (bound.get(self.gamma), bound.get(self.beta));
        match mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm(x, gamma, beta, self.eps)?;
                Ok((y, Some(stats)))
            }
            Mode::Eval => {
                // y = (x − μ)/σ · γ + β  =  x · (γ/σ) + (β − μ·γ/σ)
                let inv_std = Tensor::vector(
                    self.running_var
                        .iter()
                        .map(|v| 1.0 / (v + self.eps).sqrt())
                        .collect(),
                );
                let neg_mean = Tensor::vector(self.running_mean.iter().map(|m| -m).collect());
                let inv_std = tape.constant(inv_std);
                let neg_mean = tape.constant(neg_mean);
                let scale = tape.mul(gamma, inv_std)?;
                let offset = tape.mul(scale, neg_mean)?;
                let shift = tape.add(beta, offset)?;
                Ok((tape.channel_affine(x, scale, shift)?, None))
            }
        }
    }

    /// Exponential moving update; the running variance uses the unbiased
    /// batch variance.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let n = stats.count as f64;
        let unbias = if stats.count > 1 { n / (n - 1.0) } else { 1.0 };
        let m = self.momentum;
        for (r, &b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b * unbias;
        }
    }
}

/// Inverted dropout: kept units are scaled by `1/(1−p)` in training mode so
/// evaluation is the identity.
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub p: f64,
}

impl Dropout {
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        Ok(Self { p })
    }

    pub fn sample_mask(&self, shape: &[usize], rng: &mut dyn RngCore) -> Tensor {
        let keep = 1.0 - self.p;
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("shape/data agree")
    }

    /// A fresh mask is drawn on every training-mode call.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        match (mode, rng) {
            (Mode::Eval, _) => Ok(x),
            (Mode::Train, _) if self.p == 0.0 => Ok(x),
            (Mode::Train, Some(rng)) => {
                let mask = self.sample_mask(tape.shape(x), rng);
                apply_mask(tape, x, mask)
            }
            (Mode::Train, None) => Err(Error::InvalidArgument(
                "training-mode dropout needs a random source".into(),
            )),
        }
    }
}

pub fn apply_mask(tape: &mut Tape, x: Var, mask: Tensor) -> Result<Var> {
    let m = tape.constant(mask);
    tape.mul(x, m)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut dyn RngCore,
    ) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let weight = params.add(
            format!("{name}.weight"),
            uniform(rng, &[out_features, in_features], bound),
        );
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[out_features]));
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    /// `x`: batch × in → batch × out, `y = x·Wᵀ + b`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let wt = tape.transpose(bound.get(self.weight))?;
        let y = tape.matmul(x, wt)?;
        tape.add_bias(y, bound.get(self.bias))
    }
}

/// Single LSTM layer, gate order (input, forget, cell, output).
///
/// ```text
/// z   = x·W_ihᵀ + b_ih + h·W_hhᵀ + b_hh
/// c_t = σ(z_f)·c_{t-1} + σ(z_i)·tanh(z_g)
/// h_t = σ(z_o)·tanh(c_t)
/// ```
#[derive(Debug, Clone)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub input_size: usize,
    pub hidden_size: usize,
}

impl Lstm {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        input_size: usize,
        hidden_size: usize,
        rng: &mut dyn RngCore,
    ) -> Self {
        let h = hidden_size;
        let w_ih = params.add(
            format!("{name}.w_ih"),
            uniform(rng, &[4 * h, input_size], 1.0 / (input_size as f64).sqrt()),
        );
        let w_hh = params.add(
            format!("{name}.w_hh"),
            uniform(rng, &[4 * h, h], 1.0 / (h as f64).sqrt()),
        );
        let mut b = vec![0.0; 4 * h];
        b[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
        let b_ih = params.add(format!("{name}.b_ih"), Tensor::vector(b));
        let b_hh = params.add(format!("{name}.b_hh"), Tensor::zeros(&[4 * h]));
        Self {
            w_ih,
            w_hh,
            b_ih,
            b_hh,
            input_size,
            hidden_size,
        }
    }

    /// Runs the recurrence over `inputs` (each batch × input_size) from a
    /// zero state and returns every hidden state (each batch × hidden_size).
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, inputs: &[Var]) -> Result<Vec<Var>> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("LSTM over an empty sequence".into()))?;
        let batch = tape.shape(*first)[0];
        let h = self.hidden_size;
        let w_ih_t = tape.transpose(bound.get(self.w_ih))?;
        let w_hh_t = tape.transpose(bound.get(self.w_hh))?;
        let mut hidden = tape.constant(Tensor::zeros(&[batch, h]));
        let mut cell = tape.constant(Tensor::zeros(&[batch, h]));
        let mut outputs = Vec::with_capacity(inputs.len());
        for &x in inputs {
            let zx = tape.matmul(x, w_ih_t)?;
            let zh = tape.matmul(hidden, w_hh_t)?;
            let z = tape.add(zx, zh)?;
            let z = tape.add_bias(z, bound.get(self.b_ih))?;
            let z = tape.add_bias(z, bound.get(self.b_hh))?;
            let zi = tape.slice(z, 1, 0, h)?;
            let zf = tape.slice(z, 1, h, 2 * h)?;
            let zg = tape.slice(z, 1, 2 * h, 3 * h)?;
            let zo = tape.slice(z, 1, 3 * h, 4 * h)?;
            let i = tape.sigmoid(zi);
            let f = tape.sigmoid(zf);
            let g = tape.tanh(zg);
            let o = tape.sigmoid(zo);
            let keep = tape.mul(f, cell)?;
            let write = tape.mul(i, g)?;
            cell = tape.add(keep, write)?;
            let squashed = tape.tanh(cell);
            hidden = tape.mul(o, squashed)?;
            outputs.push(hidden);
        }
        Ok(outputs)
    }
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = crate::tensor::log_sum_exp(logits);
    logits.iter().map(|z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}
