//! The raw-waveform CLDNN.
//!
//! Per frame of `N` samples:
//!
//! ```text
//! time conv (39 filters, kernel 400, stride 160) → BN → ReLU
//!   → max-pool over every conv position            → 39 values
//! freq conv over those 39 values (1 → M maps, kernel 8) → BN → ReLU
//!   → non-overlapping max-pool (3) → flatten        → M·10 values
//! ```
//!
//! The per-frame vectors of a sequence feed two stacked LSTMs; the last
//! hidden state goes through one ReLU hidden layer and a 4-way output.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{parse_value, ConfigSection};
use crate::data::{FrameSequence, Label};
use crate::error::{Error, Result};
use crate::layers::{log_softmax, BatchNorm, Bound, Conv1d, Dropout, Linear, Lstm, Mode, ParamSet};
use crate::tensor::{BatchStats, Tape, Tensor, Var};

pub const N_CLASSES: usize = 4;
pub const LSTM_LAYERS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_time_filters: usize,
    pub time_kernel: usize,
    pub time_stride: usize,
    /// Frame length `N` in samples.
    pub frame_len: usize,
    /// Hop between frames; 0 means non-overlapping (`hop = frame_len`).
    pub frame_hop: usize,
    pub freq_maps: usize,
    pub freq_kernel: usize,
    pub freq_pool: usize,
    pub lstm_size: usize,
    pub lstm_layers: usize,
    pub dnn_hidden: usize,
    pub n_classes: usize,
    pub dropout_p: f64,
    /// Training sequence length `S`.
    pub seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::cldnn1()
    }
}

impl ModelConfig {
    /// The large setup: 256 frequency maps, 256 LSTM cells, 512 DNN units.
    pub fn cldnn1() -> Self {
        Self {
            n_time_filters: 39,
            time_kernel: 400,
            time_stride: 160,
            frame_len: 560,
            frame_hop: 0,
            freq_maps: 256,
            freq_kernel: 8,
            freq_pool: 3,
            lstm_size: 256,
            lstm_layers: LSTM_LAYERS,
            dnn_hidden: 512,
            n_classes: N_CLASSES,
            dropout_p: 0.5,
            seq_len: 25,
        }
    }

    /// The small setup: 128 frequency maps, 128 LSTM cells, 256 DNN units.
    pub fn cldnn2() -> Self {
        Self {
            freq_maps: 128,
            lstm_size: 128,
            dnn_hidden: 256,
            ..Self::cldnn1()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "cldnn1" | "cldnn-1" => Ok(Self::cldnn1()),
            "cldnn2" | "cldnn-2" => Ok(Self::cldnn2()),
            _ => Err(Error::Config(format!(
                "unknown preset '{name}' (expected cldnn1 or cldnn2)"
            ))),
        }
    }

    pub fn hop(&self) -> usize {
        if self.frame_hop == 0 {
            self.frame_len
        } else {
            self.frame_hop
        }
    }

    /// Time-convolution positions inside one frame; all are pooled into one value.
    pub fn time_positions(&self) -> usize {
        (self.frame_len.saturating_sub(self.time_kernel)) / self.time_stride.max(1) + 1
    }

    pub fn freq_conv_len(&self) -> usize {
        self.n_time_filters + 1 - self.freq_kernel
    }

    pub fn freq_pooled_len(&self) -> usize {
        self.freq_conv_len() / self.freq_pool
    }

    /// Width of the per-frame vector fed to the first LSTM.
    pub fn frame_feature_dim(&self) -> usize {
        self.freq_maps * self.freq_pooled_len()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        let positive = [
            ("n_time_filters", self.n_time_filters),
            ("time_kernel", self.time_kernel),
            ("time_stride", self.time_stride),
            ("frame_len", self.frame_len),
            ("freq_maps", self.freq_maps),
            ("freq_kernel", self.freq_kernel),
            ("freq_pool", self.freq_pool),
            ("lstm_size", self.lstm_size),
            ("dnn_hidden", self.dnn_hidden),
            ("seq_len", self.seq_len),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return err(format!("{k} must be >= 1"));
        }
        if self.frame_len < self.time_kernel {
            return err(format!(
                "frame_len {} shorter than time_kernel {}",
                self.frame_len, self.time_kernel
            ));
        }
        if self.freq_kernel > self.n_time_filters {
            return err(format!(
                "freq_kernel {} exceeds the {} time filters",
                self.freq_kernel, self.n_time_filters
            ));
        }
        if self.freq_conv_len() < self.freq_pool {
            return err(format!(
                "frequency conv output length {} shorter than freq_pool {}",
                self.freq_conv_len(),
                self.freq_pool
            ));
        }
        if self.lstm_layers != LSTM_LAYERS {
            return err(format!("lstm_layers must be {LSTM_LAYERS}"));
        }
        if self.n_classes != N_CLASSES {
            return err(format!("n_classes must be {N_CLASSES}"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return err(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        Ok(())
    }
}

impl ConfigSection for ModelConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "n_time_filters" => self.n_time_filters = parse_value(key, value)?,
            "time_kernel" => self.time_kernel = parse_value(key, value)?,
            "time_stride" => self.time_stride = parse_value(key, value)?,
            "frame_len" => self.frame_len = parse_value(key, value)?,
            "frame_hop" => self.frame_hop = parse_value(key, value)?,
            "freq_maps" => self.freq_maps = parse_value(key, value)?,
            "freq_kernel" => self.freq_kernel = parse_value(key, value)?,
            "freq_pool" => self.freq_pool = parse_value(key, value)?,
            "lstm_size" => self.lstm_size = parse_value(key, value)?,
            "lstm_layers" => self.lstm_layers = parse_value(key, value)?,
            "dnn_hidden" => self.dnn_hidden = parse_value(key, value)?,
            "n_classes" => self.n_classes = parse_value(key, value)?,
            "dropout_p" => self.dropout_p = parse_value(key, value)?,
            "seq_len" => self.seq_len = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n_time_filters", self.n_time_filters.to_string()),
            ("time_kernel", self.time_kernel.to_string()),
            ("time_stride", self.time_stride.to_string()),
            ("frame_len", self.frame_len.to_string()),
            ("frame_hop", self.frame_hop.to_string()),
            ("freq_maps", self.freq_maps.to_string()),
            ("freq_kernel", self.freq_kernel.to_string()),
            ("freq_pool", self.freq_pool.to_string()),
            ("lstm_size", self.lstm_size.to_string()),
            ("lstm_layers", self.lstm_layers.to_string()),
            ("dnn_hidden", self.dnn_hidden.to_string()),
            ("n_classes", self.n_classes.to_string()),
            ("dropout_p", self.dropout_p.to_string()),
            ("seq_len", self.seq_len.to_string()),
        ]
    }
}

/// Which batch-norm layer a [`BatchStats`] belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnSlot {
    Time,
    Freq,
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// batch × 4
    pub logits: Var,
    pub bn_stats: Vec<(BnSlot, BatchStats)>,
}

#[derive(Debug, Clone)]
pub struct CldnnModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub time_conv: Conv1d,
    pub time_bn: BatchNorm,
    pub freq_conv: Conv1d,
    pub freq_bn: BatchNorm,
    pub lstm1: Lstm,
    pub lstm2: Lstm,
    pub hidden: Linear,
    pub output: Linear,
    pub dropout: Dropout,
}

impl CldnnModel {
    pub fn build(config: &ModelConfig, rng: &mut dyn RngCore) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut params = ParamSet::new();
        let time_conv = Conv1d::new(
            &mut params,
            "time_conv",
            1,
            c.n_time_filters,
            c.time_kernel,
            c.time_stride,
            rng,
        )?;
        let time_bn = BatchNorm::new(&mut params, "time_bn", c.n_time_filters);
        let freq_conv = Conv1d::new(&mut params, "freq_conv", 1, c.freq_maps, c.freq_kernel, 1, rng)?;
        let freq_bn = BatchNorm::new(&mut params, "freq_bn", c.freq_maps);
        let lstm1 = Lstm::new(&mut params, "lstm1", c.frame_feature_dim(), c.lstm_size, rng);
        let lstm2 = Lstm::new(&mut params, "lstm2", c.lstm_size, c.lstm_size, rng);
        let hidden = Linear::new(&mut params, "dnn_hidden", c.lstm_size, c.dnn_hidden, rng);
        let output = Linear::new(&mut params, "output", c.dnn_hidden, c.n_classes, rng);
        Ok(Self {
            config: c.clone(),
            params,
            time_conv,
            time_bn,
            freq_conv,
            freq_bn,
            lstm1,
            lstm2,
            hidden,
            output,
            dropout: Dropout::new(c.dropout_p)?,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.numel()
    }

    /// Human-readable shape chain for one frame and one sequence.
    pub fn summary(&self) -> String {
        let c = &self.config;
        format!(
            "frame {n} → time conv {f}×{p} → pool → {f} → freq conv {m}×{fl} → pool → {m}×{pl}={d} \
             → LSTM {h} → LSTM {h} → DNN {dnn} → {k} logits; {params} parameters",
            n = c.frame_len,
            f = c.n_time_filters,
            p = c.time_positions(),
            m = c.freq_maps,
            fl = c.freq_conv_len(),
            pl = c.freq_pooled_len(),
            d = c.frame_feature_dim(),
            h = c.lstm_size,
            dnn = c.dnn_hidden,
            k = c.n_classes,
            params = self.num_parameters(),
        )
    }

    /// Per-frame front end: `frames` is `F × 1 × N`, the result `F × D`.
    pub fn frame_features(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        frames: Var,
        mode: Mode,
        stats: &mut Vec<(BnSlot, BatchStats)>,
    ) -> Result<Var> {
        let c = &self.config;
        let shape = tape.shape(frames).to_vec();
        if shape.len() != 3 || shape[1] != 1 || shape[2] != c.frame_len {
            return Err(Error::InvalidArgument(format!(
                "frames must be F × 1 × {}, got {shape:?}",
                c.frame_len
            )));
        }
        let f = shape[0];
        let y = self.time_conv.forward(tape, bound, frames)?;
        let (y, s) = self.time_bn.forward(tape, bound, y, mode)?;
        stats.extend(s.map(|s| (BnSlot::Time, s)));
        let y = tape.relu(y);
        let y = tape.max_pool(y, c.time_positions())?;
        let y = tape.reshape(y, &[f, 1, c.n_time_filters])?;
        let y = self.freq_conv.forward(tape, bound, y)?;
        let (y, s) = self.freq_bn.forward(tape, bound, y, mode)?;
        stats.extend(s.map(|s| (BnSlot::Freq, s)));
        let y = tape.relu(y);
        let y = tape.max_pool(y, c.freq_pool)?;
        tape.reshape(y, &[f, c.frame_feature_dim()])
    }

    /// Forward over a batch of equal-length sequences with parameters
    /// already bound on `tape`. Training mode requires `S = seq_len` and a
    /// random source for dropout.
    pub fn forward_bound(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &[&FrameSequence],
        mode: Mode,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<ForwardOutput> {
        let c = &self.config;
        let first = batch
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let s = first.len();
        if s == 0 {
            return Err(Error::InvalidArgument("empty sequence".into()));
        }
        for seq in batch {
            if seq.len() != s {
                return Err(Error::InvalidArgument(
                    "sequences in a batch must have equal length".into(),
                ));
            }
            if seq.frame_len() != c.frame_len {
                return Err(Error::InvalidArgument(format!(
                    "{}: frame length {} != {}",
                    seq.utterance_id,
                    seq.frame_len(),
                    c.frame_len
                )));
            }
        }
        if mode == Mode::Train && s != c.seq_len {
            return Err(Error::InvalidArgument(format!(
                "training sequences must have S = {}, got {s}",
                c.seq_len
            )));
        }
        let b = batch.len();
        let mut data = Vec::with_capacity(b * s * c.frame_len);
        for seq in batch {
            data.extend_from_slice(seq.data());
        }
        let frames = tape.constant(Tensor::new(vec![b * s, 1, c.frame_len], data)?);
        let mut bn_stats = Vec::new();
        let feats = self.frame_features(tape, bound, frames, mode, &mut bn_stats)?;
        let d = c.frame_feature_dim();
        let feats = tape.reshape(feats, &[b, s, d])?;
        let mut steps = Vec::with_capacity(s);
        for t in 0..s {
            let x = tape.slice(feats, 1, t, t + 1)?;
            steps.push(tape.reshape(x, &[b, d])?);
        }
        let h1 = self.lstm1.forward(tape, bound, &steps)?;
        let mut h1_dropped = Vec::with_capacity(s);
        for h in h1 {
            h1_dropped.push(self.dropout.forward(tape, h, mode, reborrow(&mut rng))?);
        }
        let h2 = self.lstm2.forward(tape, bound, &h1_dropped)?;
        let last = *h2.last().expect("non-empty sequence");
        let last = self.dropout.forward(tape, last, mode, reborrow(&mut rng))?;
        let z = self.hidden.forward(tape, bound, last)?;
        let z = tape.relu(z);
        let z = self.dropout.forward(tape, z, mode, reborrow(&mut rng))?;
        let logits = self.output.forward(tape, bound, z)?;
        Ok(ForwardOutput { logits, bn_stats })
    }

    pub fn apply_bn_stats(&mut self, stats: &[(BnSlot, BatchStats)]) {
        for (slot, s) in stats {
            match slot {
                BnSlot::Time => self.time_bn.update_running(s),
                BnSlot::Freq => self.freq_bn.update_running(s),
            }
        }
    }

    /// Evaluation-mode per-frame feature vector of a single frame.
    pub fn forward_frame(&self, frame: &[f64]) -> Result<Vec<f64>> {
        if frame.len() != self.config.frame_len {
            return Err(Error::InvalidArgument(format!(
                "frame has {} samples, expected {}",
                frame.len(),
                self.config.frame_len
            )));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(Tensor::new(vec![1, 1, frame.len()], frame.to_vec())?);
        let y = self.frame_features(&mut tape, &bound, x, Mode::Eval, &mut Vec::new())?;
        Ok(tape.value(y).data().to_vec())
    }

    /// Evaluation-mode logits for a whole sequence of any length.
    pub fn logits(&self, seq: &FrameSequence) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let out = self.forward_bound(&mut tape, &bound, &[seq], Mode::Eval, None)?;
        Ok(tape.value(out.logits).data().to_vec())
    }

    /// Genuine-class log-likelihood; larger means more likely genuine.
    pub fn score(&self, seq: &FrameSequence) -> Result<f64> {
        Ok(genuine_score(&self.logits(seq)?))
    }
}

fn reborrow<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

/// `log softmax(logits)[GENUINE]`.
pub fn genuine_score(logits: &[f64]) -> f64 {
    log_softmax(logits)[Label::Genuine.index()]
}

/// Small deterministic model, handy for tests and examples.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_time_filters: 6,
        time_kernel: 16,
        time_stride: 8,
        frame_len: 32,
        frame_hop: 0,
        freq_maps: 3,
        freq_kernel: 3,
        freq_pool: 2,
        lstm_size: 4,
        lstm_layers: LSTM_LAYERS,
        dnn_hidden: 5,
        n_classes: N_CLASSES,
        dropout_p: 0.5,
        seq_len: 3,
    }
}

pub fn build_seeded(config: &ModelConfig, seed: u64) -> Result<CldnnModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    CldnnModel::build(config, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_seq(c: &ModelConfig, s: usize, rng: &mut ChaCha8Rng) -> FrameSequence {
        let frames: Vec<Vec<f64>> = (0..s)
            .map(|_| (0..c.frame_len).map(|_| rng.random_range(-1.5..1.5)).collect())
            .collect();
        FrameSequence::from_frames(&frames, "r").unwrap()
    }

    #[test]
    fn presets_and_shape_arithmetic() {
        let c1 = ModelConfig::cldnn1();
        assert_eq!(c1.time_positions(), 2);
        assert_eq!(c1.frame_feature_dim(), 256 * 10);
        let c2 = ModelConfig::cldnn2();
        assert_eq!((c2.lstm_size, c2.dnn_hidden), (128, 256));
        assert_eq!(c2.frame_feature_dim(), 1280);
        assert!(ModelConfig::preset("cldnn3").is_err());
    }

    #[test]
    fn build_rejects_bad_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = ModelConfig {
            freq_kernel: 40,
            ..ModelConfig::cldnn2()
        };
        assert!(CldnnModel::build(&bad, &mut rng).is_err());
        let bad = ModelConfig {
            n_classes: 3,
            ..tiny_config()
        };
        assert!(CldnnModel::build(&bad, &mut rng).is_err());
    }

    #[test]
    fn time_conv_weight_shape() {
        let m = build_seeded(
            &ModelConfig {
                freq_maps: 4,
                lstm_size: 4,
                dnn_hidden: 4,
                ..ModelConfig::cldnn2()
            },
            0,
        )
        .unwrap();
        assert_eq!(m.params.get(m.time_conv.weight).value.shape(), &[39, 1, 400]);
    }

    #[test]
    fn forward_frame_deterministic_and_finite() {
        let m = build_seeded(&tiny_config(), 1).unwrap();
        let zero = vec![0.0; 32];
        let a = m.forward_frame(&zero).unwrap();
        assert_eq!(a.len(), tiny_config().frame_feature_dim());
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a, m.forward_frame(&zero).unwrap());
        assert!(m.forward_frame(&[0.0; 31]).is_err());
    }

    #[test]
    fn sequence_lengths_and_order_sensitivity() {
        let c = tiny_config();
        let m = build_seeded(&c, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let one = random_seq(&c, 1, &mut rng);
        assert_eq!(m.logits(&one).unwrap().len(), 4);
        let long = random_seq(&c, 9, &mut rng);
        assert_eq!(m.logits(&long).unwrap().len(), 4);

        let frames: Vec<Vec<f64>> = (0..9).map(|t| long.frame(t).to_vec()).collect();
        let reversed: Vec<Vec<f64>> = frames.iter().rev().cloned().collect();
        let rev = FrameSequence::from_frames(&reversed, "r").unwrap();
        assert_ne!(m.logits(&long).unwrap(), m.logits(&rev).unwrap());
    }

    #[test]
    fn train_mode_requires_seq_len() {
        let c = tiny_config();
        let m = build_seeded(&c, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_seq(&c, 4, &mut rng);
        let b = random_seq(&c, 4, &mut rng);
        let mut tape = Tape::new();
        let bound = m.params.bind(&mut tape, true);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(0);
        let r = m.forward_bound(&mut tape, &bound, &[&a, &b], Mode::Train, Some(&mut drop_rng));
        assert!(r.is_err());
    }

    #[test]
    fn score_examples() {
        assert!((genuine_score(&[0.0; 4]) + 4f64.ln()).abs() < 1e-15);
        let s = genuine_score(&[10.0, -10.0, -10.0, -10.0]);
        let expected = -(3.0 * (-20f64).exp()).ln_1p();
        assert!((s - expected).abs() < 1e-14, "{s} vs {expected}");
        assert!((-6.2e-9..-6.1e-9).contains(&s));
        let z = [0.3, -1.2, 2.0, 0.7];
        let shifted: Vec<f64> = z.iter().map(|v| v + 123.0).collect();
        assert!((genuine_score(&z) - genuine_score(&shifted)).abs() < 1e-12);
    }

    #[test]
    fn score_is_never_positive() {
        let c = tiny_config();
        let m = build_seeded(&c, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for s in 1..6 {
            assert!(m.score(&random_seq(&c, s, &mut rng)).unwrap() <= 0.0);
        }
    }
}
