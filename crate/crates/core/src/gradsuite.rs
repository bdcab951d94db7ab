//! Finite-difference checks for every differentiable layer and for the
//! whole CLDNN loss.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{apply_mask, BatchNorm, Bound, Conv1d, Dropout, Linear, Lstm, Mode, ParamSet};
use crate::model::{tiny_config, CldnnModel};
use crate::data::FrameSequence;
use crate::tensor::{grad_check, grad_check_coords, GradCheckReport, Tape, Tensor, Var};

pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Coordinates sampled per parameter tensor in the whole-model check.
pub const MODEL_COORDS_PER_TENSOR: usize = 8;
const EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Check {
    Conv1d,
    MaxPool,
    BatchNorm,
    Dropout,
    Linear,
    Lstm,
    SoftmaxCe,
    Cldnn,
}

impl Check {
    pub const ALL: [Check; 8] = [
        Check::Conv1d,
        Check::MaxPool,
        Check::BatchNorm,
        Check::Dropout,
        Check::Linear,
        Check::Lstm,
        Check::SoftmaxCe,
        Check::Cldnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Check::Conv1d => "conv1d",
            Check::MaxPool => "maxpool",
            Check::BatchNorm => "batchnorm",
            Check::Dropout => "dropout",
            Check::Linear => "linear",
            Check::Lstm => "lstm",
            Check::SoftmaxCe => "softmax_ce",
            Check::Cldnn => "cldnn",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Check::Cldnn => MODEL_TOLERANCE,
            _ => LAYER_TOLERANCE,
        }
    }

    pub fn run(self, seed: u64) -> Result<GradCheckReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self {
            Check::Conv1d => conv1d(&mut rng),
            Check::MaxPool => maxpool(&mut rng),
            Check::BatchNorm => batchnorm(&mut rng),
            Check::Dropout => dropout(&mut rng),
            Check::Linear => linear(&mut rng),
            Check::Lstm => lstm(&mut rng),
            Check::SoftmaxCe => softmax_ce(&mut rng),
            Check::Cldnn => cldnn(&mut rng),
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Check {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Check::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Check::ALL.iter().map(|c| c.name()).collect();
                Error::InvalidArgument(format!("unknown layer '{s}' (one of {})", names.join(", ")))
            })
    }
}

/// Worst error of one check over a range of seeds.
#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub check: Check,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub worst_seed: u64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.check.tolerance()
    }
}

pub fn run_check(check: Check, seeds: usize) -> Result<SuiteResult> {
    let mut out = SuiteResult {
        check,
        seeds,
        max_rel_error: 0.0,
        worst_seed: 0,
    };
    for seed in 0..seeds as u64 {
        let r = check.run(seed)?;
        if r.max_rel_error > out.max_rel_error {
            out.max_rel_error = r.max_rel_error;
            out.worst_seed = seed;
        }
    }
    Ok(out)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect())
        .expect("shape/data agree")
}

/// `sum(y ⊙ r)` with a fixed random `r`, so every output coordinate matters.
fn project(tape: &mut Tape, y: Var, r: &Tensor) -> Result<Var> {
    let r = tape.constant(r.clone());
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

/// Checks a layer whose parameters live in `ps`, with `x` as an extra input.
fn check_with_params<F>(ps: &ParamSet, x: Tensor, out_shape_probe: F, rng: &mut ChaCha8Rng) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bound, Var) -> Result<Var>,
{
    let probe = {
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = out_shape_probe(&mut tape, &bound, xv)?;
        tape.shape(y).to_vec()
    };
    let r = rand_tensor(rng, &probe, 1.0);
    let mut inputs = vec![x];
    inputs.extend(ps.values());
    grad_check(
        |tape, vars| {
            let bound = Bound::from_vars(vars[1..].to_vec());
            let y = out_shape_probe(tape, &bound, vars[0])?;
            project(tape, y, &r)
        },
        &inputs,
        EPS,
    )
}

fn conv1d(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (cin, cout, k) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=4));
    let stride = rng.random_range(1..=3);
    let len = k + rng.random_range(0..8);
    let mut ps = ParamSet::new();
    let layer = Conv1d::new(&mut ps, "c", cin, cout, k, stride, rng)?;
    for p in ps.iter_mut() {
        p.value = rand_tensor(rng, p.value.shape(), 1.0);
    }
    let x = rand_tensor(rng, &[2, cin, len], 1.0);
    check_with_params(&ps, x, |t, b, x| layer.forward(t, b, x), rng)
}

fn maxpool(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let width = rng.random_range(1..=4);
    let len = width * rng.random_range(1..=3) + rng.random_range(0..width);
    let shape = [2, 2, len];
    let n: usize = shape.iter().product();
    // Distinct values at least 0.03 apart keep the argmax stable under ±eps.
    let order = sample(rng, n, n).into_vec();
    let data = order.iter().map(|&i| i as f64 * 0.05 + rng.random_range(-0.01..0.01)).collect();
    let x = Tensor::new(shape.to_vec(), data)?;
    let out_len = len / width;
    let r = rand_tensor(rng, &[2, 2, out_len], 1.0);
    grad_check(
        |t, v| {
            let y = t.max_pool(v[0], width)?;
            project(t, y, &r)
        },
        &[x],
        EPS,
    )
}

fn batchnorm(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let c = rng.random_range(1..=3);
    let mut ps = ParamSet::new();
    let layer = BatchNorm::new(&mut ps, "bn", c);
    for p in ps.iter_mut() {
        p.value = rand_tensor(rng, p.value.shape(), 1.5);
    }
    let len = rng.random_range(1..=4);
    let x = rand_tensor(rng, &[3, c, len], 2.0);
    check_with_params(&ps, x, |t, b, x| Ok(layer.forward(t, b, x, Mode::Train)?.0), rng)
}

fn dropout(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let d = Dropout::new(rng.random_range(0.1..0.7))?;
    let shape = [3, rng.random_range(2..=6)];
    let mask = d.sample_mask(&shape, rng);
    let x = rand_tensor(rng, &shape, 1.0);
    let r = rand_tensor(rng, &shape, 1.0);
    grad_check(
        |t, v| {
            let y = apply_mask(t, v[0], mask.clone())?;
            project(t, y, &r)
        },
        &[x],
        EPS,
    )
}

fn linear(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (i, o) = (rng.random_range(1..=5), rng.random_range(1..=5));
    let mut ps = ParamSet::new();
    let layer = Linear::new(&mut ps, "l", i, o, rng);
    for p in ps.iter_mut() {
        p.value = rand_tensor(rng, p.value.shape(), 1.0);
    }
    let x = rand_tensor(rng, &[3, i], 1.0);
    check_with_params(&ps, x, |t, b, x| layer.forward(t, b, x), rng)
}

fn lstm(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (i, h, steps) = (rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4));
    let mut ps = ParamSet::new();
    let layer = Lstm::new(&mut ps, "lstm", i, h, rng);
    for p in ps.iter_mut() {
        p.value = rand_tensor(rng, p.value.shape(), 0.8);
    }
    let x = rand_tensor(rng, &[2, steps * i], 1.0);
    check_with_params(
        &ps,
        x,
        |t, b, x| {
            let inputs = (0..steps)
                .map(|s| t.slice(x, 1, s * i, (s + 1) * i))
                .collect::<Result<Vec<_>>>()?;
            let hs = layer.forward(t, b, &inputs)?;
            t.concat(&hs, 1)
        },
        rng,
    )
}

fn softmax_ce(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let batch = rng.random_range(1..=5);
    let targets: Vec<usize> = (0..batch).map(|_| rng.random_range(0..4)).collect();
    let weights: Option<Vec<f64>> = rng
        .random_bool(0.5)
        .then(|| (0..4).map(|_| rng.random_range(0.5..2.0)).collect());
    let logits = rand_tensor(rng, &[batch, 4], 3.0);
    grad_check(
        |t, v| t.softmax_cross_entropy(v[0], &targets, weights.as_deref()),
        &[logits],
        EPS,
    )
}

/// Cross-entropy of a small CLDNN in training mode with fixed dropout
/// masks, checked on sampled coordinates of every parameter tensor.
fn cldnn(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let config = tiny_config();
    let mut model = CldnnModel::build(&config, rng)?;
    // Jitter off the zero biases so a fully dropped layer does not sit on a ReLU kink.
    for p in model.params.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    }
    let batch: Vec<FrameSequence> = (0..2)
        .map(|_| {
            let frames: Vec<Vec<f64>> = (0..config.seq_len)
                .map(|_| (0..config.frame_len).map(|_| rng.random_range(-1.5..1.5)).collect())
                .collect();
            FrameSequence::from_frames(&frames, "g")
        })
        .collect::<Result<_>>()?;
    let targets: Vec<usize> = (0..batch.len()).map(|_| rng.random_range(0..4)).collect();
    let mask_seed: u64 = rng.random();
    let inputs = model.params.values();
    let mut coords = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        let n = t.len().min(MODEL_COORDS_PER_TENSOR);
        coords.extend(sample(rng, t.len(), n).into_iter().map(|j| (i, j)));
    }
    grad_check_coords(
        |tape, vars| {
            let bound = Bound::from_vars(vars.to_vec());
            let refs: Vec<&FrameSequence> = batch.iter().collect();
            let mut masks = ChaCha8Rng::seed_from_u64(mask_seed);
            let out = model.forward_bound(tape, &bound, &refs, Mode::Train, Some(&mut masks))?;
            tape.softmax_cross_entropy(out.logits, &targets, None)
        },
        &inputs,
        EPS,
        &coords,
    )
}
