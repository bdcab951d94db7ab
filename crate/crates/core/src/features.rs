//! Cepstral front-end for the GMM baseline.
//!
//! 25 ms Hamming windows every 10 ms, 26-band mel filterbank, DCT-II
//! keeping c1..c12, log-energy, per-utterance CMVN on the 13 statics, then
//! first and second order regression deltas: 39 values per frame.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::config::{parse_value, ConfigSection};
use crate::error::{Error, Result};
use crate::wav::SAMPLE_RATE;

const LOG_FLOOR: f64 = 1e-10;
const CMVN_MIN_STD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub window_ms: f64,
    pub shift_ms: f64,
    pub n_mels: usize,
    /// Cepstra kept after c0; log-energy takes c0's place.
    pub n_ceps: usize,
    pub fft_size: usize,
    /// Half-width of the delta regression window.
    pub delta_window: usize,
    pub cmvn: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            window_ms: 25.0,
            shift_ms: 10.0,
            n_mels: 26,
            n_ceps: 12,
            fft_size: 512,
            delta_window: 2,
            cmvn: true,
        }
    }
}

impl FeatureConfig {
    pub fn window_samples(&self) -> usize {
        (self.window_ms * f64::from(SAMPLE_RATE) / 1000.0).round() as usize
    }

    pub fn shift_samples(&self) -> usize {
        (self.shift_ms * f64::from(SAMPLE_RATE) / 1000.0).round() as usize
    }

    pub fn n_static(&self) -> usize {
        self.n_ceps + 1
    }

    /// Statics plus Δ and ΔΔ.
    pub fn dim(&self) -> usize {
        3 * self.n_static()
    }

    pub fn num_frames(&self, n_samples: usize) -> usize {
        let w = self.window_samples();
        if n_samples < w {
            0
        } else {
            (n_samples - w) / self.shift_samples() + 1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.into()));
        if self.window_samples() == 0 || self.shift_samples() == 0 {
            return err("feat_window_ms and feat_shift_ms must cover at least one sample");
        }
        if self.fft_size < self.window_samples() {
            return err("feat_fft_size must be >= the window length in samples");
        }
        if self.n_mels < 2 || self.n_ceps == 0 || self.n_ceps >= self.n_mels {
            return err("need 1 <= feat_n_ceps < feat_n_mels");
        }
        if self.delta_window == 0 {
            return err("feat_delta_window must be >= 1");
        }
        Ok(())
    }
}

impl ConfigSection for FeatureConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "feat_window_ms" => self.window_ms = parse_value(key, value)?,
            "feat_shift_ms" => self.shift_ms = parse_value(key, value)?,
            "feat_n_mels" => self.n_mels = parse_value(key, value)?,
            "feat_n_ceps" => self.n_ceps = parse_value(key, value)?,
            "feat_fft_size" => self.fft_size = parse_value(key, value)?,
            "feat_delta_window" => self.delta_window = parse_value(key, value)?,
            "feat_cmvn" => self.cmvn = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("feat_window_ms", self.window_ms.to_string()),
            ("feat_shift_ms", self.shift_ms.to_string()),
            ("feat_n_mels", self.n_mels.to_string()),
            ("feat_n_ceps", self.n_ceps.to_string()),
            ("feat_fft_size", self.fft_size.to_string()),
            ("feat_delta_window", self.delta_window.to_string()),
            ("feat_cmvn", self.cmvn.to_string()),
        ]
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters over FFT bins `0..=fft_size/2`, spanning 0 Hz to Nyquist.
fn mel_filterbank(n_mels: usize, fft_size: usize) -> Vec<Vec<f64>> {
    let n_bins = fft_size / 2 + 1;
    let nyquist = f64::from(SAMPLE_RATE) / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = f64::from(SAMPLE_RATE) / fft_size as f64;
    (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|b| {
                    let f = b as f64 * bin_hz;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// Reusable analysis state for one configuration.
pub struct FeatureExtractor {
    config: FeatureConfig,
    window: Vec<f64>,
    filters: Vec<Vec<f64>>,
    dct: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl FeatureExtractor {
    pub fn new(config: &FeatureConfig) -> Result<Self> {
        config.validate()?;
        let w = config.window_samples();
        let window = (0..w)
            .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (w - 1).max(1) as f64).cos())
            .collect();
        let m = config.n_mels as f64;
        let dct = (1..=config.n_ceps)
            .map(|k| {
                (0..config.n_mels)
                    .map(|j| (2.0 / m).sqrt() * (PI * k as f64 * (j as f64 + 0.5) / m).cos())
                    .collect()
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            window,
            filters: mel_filterbank(config.n_mels, config.fft_size),
            dct,
            fft: FftPlanner::new().plan_fft_forward(config.fft_size),
        })
    }

    /// `[log-energy, c1..c12]` for one window of samples.
    fn statics(&self, frame: &[f64], buf: &mut [Complex<f64>]) -> Vec<f64> {
        let energy: f64 = frame.iter().map(|v| v * v).sum();
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (i, (s, w)) in frame.iter().zip(&self.window).enumerate() {
            buf[i].re = s * w;
        }
        self.fft.process(buf);
        let power: Vec<f64> = buf[..self.config.fft_size / 2 + 1]
            .iter()
            .map(|c| c.norm_sqr())
            .collect();
        let log_mel: Vec<f64> = self
            .filters
            .iter()
            .map(|f| f.iter().zip(&power).map(|(a, b)| a * b).sum::<f64>().max(LOG_FLOOR).ln())
            .collect();
        let mut out = Vec::with_capacity(self.config.n_static());
        out.push(energy.max(LOG_FLOOR).ln());
        out.extend(
            self.dct
                .iter()
                .map(|row| row.iter().zip(&log_mel).map(|(a, b)| a * b).sum::<f64>()),
        );
        out
    }

    /// `T × dim` feature matrix for 16 kHz samples.
    pub fn extract(&self, samples: &[f64]) -> Result<Vec<Vec<f64>>> {
        let c = &self.config;
        let t = c.num_frames(samples.len());
        if t == 0 {
            return Err(Error::Data(format!(
                "utterance of {} samples is shorter than one {}-sample analysis window",
                samples.len(),
                c.window_samples()
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature extraction: non-finite sample".into()));
        }
        let (w, hop) = (c.window_samples(), c.shift_samples());
        let mut buf = vec![Complex::new(0.0, 0.0); c.fft_size];
        let mut statics: Vec<Vec<f64>> = (0..t)
            .map(|i| self.statics(&samples[i * hop..i * hop + w], &mut buf))
            .collect();
        if c.cmvn {
            cmvn(&mut statics);
        }
        let d1 = deltas(&statics, c.delta_window);
        let d2 = deltas(&d1, c.delta_window);
        Ok(statics
            .into_iter()
            .zip(d1)
            .zip(d2)
            .map(|((mut s, a), b)| {
                s.extend(a);
                s.extend(b);
                s
            })
            .collect())
    }
}

pub fn extract_features(samples: &[f64], config: &FeatureConfig) -> Result<Vec<Vec<f64>>> {
    FeatureExtractor::new(config)?.extract(samples)
}

/// Per-column zero mean and unit population variance. Near-constant
/// columns are only mean-subtracted.
pub fn cmvn(rows: &mut [Vec<f64>]) {
    let Some(dim) = rows.first().map(Vec::len) else {
        return;
    };
    let n = rows.len() as f64;
    for j in 0..dim {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        for r in rows.iter_mut() {
            r[j] -= mean;
            if std >= CMVN_MIN_STD {
                r[j] /= std;
            }
        }
    }
}

/// Regression deltas `Σ n (x[t+n] − x[t−n]) / (2 Σ n²)` with edge frames
/// replicated.
pub fn deltas(rows: &[Vec<f64>], half_width: usize) -> Vec<Vec<f64>> {
    let t_len = rows.len();
    let denom = 2.0 * (1..=half_width).map(|n| (n * n) as f64).sum::<f64>();
    (0..t_len)
        .map(|t| {
            let dim = rows[t].len();
            let mut out = vec![0.0; dim];
            for n in 1..=half_width {
                let fwd = &rows[(t + n).min(t_len - 1)];
                let back = &rows[t.saturating_sub(n)];
                for j in 0..dim {
                    out[j] += n as f64 * (fwd[j] - back[j]);
                }
            }
            out.iter_mut().for_each(|v| *v /= denom);
            out
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|i| rng.random_range(-0.5..0.5) + (i as f64 * 0.05).sin()).collect()
    }

    #[test]
    fn one_second_gives_98_frames_of_39() {
        let f = extract_features(&noise(16000, 1), &FeatureConfig::default()).unwrap();
        assert_eq!(f.len(), 98);
        assert!(f.iter().all(|r| r.len() == 39 && r.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn frame_count_matches_arithmetic() {
        let cfg = FeatureConfig::default();
        for n in [400, 401, 559, 560, 561, 4000, 12345] {
            let expected = (n - 400) / 160 + 1;
            assert_eq!(cfg.num_frames(n), expected);
            assert_eq!(extract_features(&noise(n, n as u64), &cfg).unwrap().len(), expected);
        }
        assert!(extract_features(&noise(399, 0), &cfg).is_err());
    }

    #[test]
    fn statics_are_normalized() {
        let f = extract_features(&noise(8000, 3), &FeatureConfig::default()).unwrap();
        let n = f.len() as f64;
        for j in 0..13 {
            let mean = f.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = f.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-8, "col {j} mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "col {j} var {var}");
        }
    }

    #[test]
    fn deltas_of_constant_and_ramp() {
        let constant = vec![vec![3.0, -1.0]; 7];
        let d = deltas(&constant, 2);
        assert!(d.iter().flatten().all(|&v| v == 0.0));
        assert!(deltas(&d, 2).iter().flatten().all(|&v| v == 0.0));
        let ramp: Vec<Vec<f64>> = (0..9).map(|t| vec![2.0 * t as f64]).collect();
        let d = deltas(&ramp, 2);
        for row in &d[2..7] {
            assert!((row[0] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mel_filters_are_triangles_inside_nyquist() {
        let fb = mel_filterbank(26, 512);
        assert_eq!(fb.len(), 26);
        for f in &fb {
            assert_eq!(f.len(), 257);
            assert!(f.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(f.iter().any(|&v| v > 0.0));
        }
    }

    #[test]
    fn config_keys_round_trip() {
        let mut c = FeatureConfig::default();
        assert!(c.set("feat_n_mels", "40").unwrap());
        assert!(!c.set("unknown", "1").unwrap());
        let mut d = FeatureConfig::default();
        for (k, v) in c.entries() {
            d.set(k, &v).unwrap();
        }
        assert_eq!(c, d);
        assert!(FeatureConfig { fft_size: 256, ..Default::default() }.validate().is_err());
    }
}
