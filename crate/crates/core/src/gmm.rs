//! Diagonal-covariance GMMs fitted by EM and the two-model
//! log-likelihood-ratio score `log p(x | M_g) − log p(x | M_s)`.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::index::sample;
use rand::RngCore;

use crate::config::{parse_kv, parse_value, ConfigSection};
use crate::container::{Container, Record};
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::tensor::log_sum_exp;

/// Responsibility mass below which a component counts as empty.
pub const EMPTY_MASS: f64 = 1e-10;
const ABS_VAR_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct GmmConfig {
    pub components: usize,
    pub iters: usize,
    /// Variance floor as a fraction of the global per-dimension variance.
    pub var_floor: f64,
    /// Average frame log-likelihoods instead of summing them.
    pub average: bool,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            components: 512,
            iters: 20,
            var_floor: 1e-3,
            average: true,
        }
    }
}

impl GmmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.components == 0 {
            return Err(Error::Config("gmm_components must be >= 1".into()));
        }
        if !(self.var_floor > 0.0 && self.var_floor.is_finite()) {
            return Err(Error::Config("gmm_var_floor must be positive".into()));
        }
        Ok(())
    }
}

impl ConfigSection for GmmConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "gmm_components" => self.components = parse_value(key, value)?,
            "gmm_iters" => self.iters = parse_value(key, value)?,
            "gmm_var_floor" => self.var_floor = parse_value(key, value)?,
            "gmm_average" => self.average = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("gmm_components", self.components.to_string()),
            ("gmm_iters", self.iters.to_string()),
            ("gmm_var_floor", self.var_floor.to_string()),
            ("gmm_average", self.average.to_string()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGmm {
    pub weights: Vec<f64>,
    /// K rows of D.
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

impl DiagonalGmm {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>) -> Result<Self> {
        let g = Self {
            weights,
            means,
            variances,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        let d = self.dim();
        if k == 0 || d == 0 || self.means.len() != k || self.variances.len() != k {
            return Err(Error::InvalidArgument("GMM needs K >= 1 components of equal dimension".into()));
        }
        if self.means.iter().chain(&self.variances).any(|r| r.len() != d) {
            return Err(Error::InvalidArgument("GMM rows of unequal dimension".into()));
        }
        if self.weights.iter().any(|&w| w.is_nan() || w <= 0.0) || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument("GMM weights must be positive and sum to 1".into()));
        }
        if self.variances.iter().flatten().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument("GMM variances must be positive".into()));
        }
        Ok(())
    }

    /// `log w_k − ½ Σ_d log(2π σ²_kd)` per component.
    fn log_consts(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.variances)
            .map(|(w, var)| w.ln() - 0.5 * var.iter().map(|v| (2.0 * PI * v).ln()).sum::<f64>())
            .collect()
    }

    fn component_log_probs(&self, consts: &[f64], x: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            let q: f64 = x
                .iter()
                .zip(&self.means[k])
                .zip(&self.variances[k])
                .map(|((x, m), v)| (x - m) * (x - m) / v)
                .sum();
            *o = consts[k] - 0.5 * q;
        }
    }

    fn check_frames(&self, frames: &[Vec<f64>]) -> Result<()> {
        if frames.is_empty() {
            return Err(Error::Data("no feature frames".into()));
        }
        for (t, f) in frames.iter().enumerate() {
            if f.len() != self.dim() {
                return Err(Error::Shape {
                    op: "gmm",
                    lhs: vec![self.dim()],
                    rhs: vec![f.len()],
                });
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("feature frame {t}")));
            }
        }
        Ok(())
    }

    /// `log Σ_k w_k N(x; μ_k, σ²_k)` for every frame.
    pub fn frame_logliks(&self, frames: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.check_frames(frames)?;
        let consts = self.log_consts();
        let mut buf = vec![0.0; self.k()];
        Ok(frames
            .iter()
            .map(|x| {
                self.component_log_probs(&consts, x, &mut buf);
                log_sum_exp(&buf)
            })
            .collect())
    }

    /// Mean frame log-likelihood.
    pub fn avg_loglik(&self, frames: &[Vec<f64>]) -> Result<f64> {
        let ll = self.frame_logliks(frames)?;
        Ok(ll.iter().sum::<f64>() / ll.len() as f64)
    }

    pub fn total_loglik(&self, frames: &[Vec<f64>]) -> Result<f64> {
        Ok(self.frame_logliks(frames)?.iter().sum())
    }

    fn records(&self, prefix: &str) -> Vec<Record> {
        let (k, d) = (self.k(), self.dim());
        vec![
            Record::from_f64(format!("{prefix}.weights"), &[k], &self.weights),
            Record::from_f64(format!("{prefix}.means"), &[k, d], &self.means.concat()),
            Record::from_f64(format!("{prefix}.variances"), &[k, d], &self.variances.concat()),
        ]
    }

    fn from_records(c: &Container, prefix: &str) -> Result<Self> {
        let get = |suffix: &str| {
            let name = format!("{prefix}.{suffix}");
            c.get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing record '{name}'")))
        };
        let w = get("weights")?;
        let m = get("means")?;
        let v = get("variances")?;
        let k = w.data.len();
        if w.dims != [k] || m.dims.len() != 2 || m.dims[0] != k || v.dims != m.dims {
            return Err(Error::Checkpoint(format!("inconsistent shapes for '{prefix}'")));
        }
        let d = m.dims[1];
        let rows = |r: &Record| r.to_f64().chunks(d.max(1)).map(<[f64]>::to_vec).collect();
        let mut weights = w.to_f64();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|x| *x /= total);
        Self::new(weights, rows(m), rows(v))
            .map_err(|e| Error::Checkpoint(format!("'{prefix}': {e}")))
    }
}

/// Result of [`em_fit`].
#[derive(Debug, Clone)]
pub struct EmFit {
    pub gmm: DiagonalGmm,
    /// Total log-likelihood of the data before each EM iteration and after the last.
    pub trace: Vec<f64>,
    /// Components reseeded because they captured no responsibility.
    pub reseeded: usize,
}

fn global_moments(frames: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = frames.len() as f64;
    let d = frames[0].len();
    let mut mean = vec![0.0; d];
    for f in frames {
        for (m, x) in mean.iter_mut().zip(f) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for f in frames {
        for ((v, x), m) in var.iter_mut().zip(f).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

/// Fits a `k`-component diagonal GMM by EM. Means start at `k` distinct
/// random frames, variances at the global variance, weights uniform.
/// Variances never drop below `var_floor` × the global variance.
pub fn em_fit(
    frames: &[Vec<f64>],
    k: usize,
    iters: usize,
    var_floor: f64,
    rng: &mut dyn RngCore,
) -> Result<EmFit> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be >= 1".into()));
    }
    if frames.len() < k {
        return Err(Error::Data(format!(
            "{} feature frames cannot support {k} components",
            frames.len()
        )));
    }
    let d = frames[0].len();
    if d == 0 || frames.iter().any(|f| f.len() != d) {
        return Err(Error::InvalidArgument("feature frames of unequal dimension".into()));
    }
    if frames.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("em_fit: non-finite feature value".into()));
    }
    let (gmean, gvar) = global_moments(frames);
    let floor: Vec<f64> = gvar.iter().map(|v| (v * var_floor).max(ABS_VAR_FLOOR)).collect();
    let init_var: Vec<f64> = gvar.iter().zip(&floor).map(|(v, f)| v.max(*f)).collect();
    // Sufficient statistics are accumulated on globally centered data.
    let centered: Vec<Vec<f64>> = frames
        .iter()
        .map(|f| f.iter().zip(&gmean).map(|(x, m)| x - m).collect())
        .collect();

    let mut gmm = DiagonalGmm {
        weights: vec![1.0 / k as f64; k],
        means: sample(rng, frames.len(), k)
            .into_iter()
            .map(|i| centered[i].clone())
            .collect(),
        variances: vec![init_var.clone(); k],
    };
    let n = frames.len() as f64;
    let mut trace = Vec::with_capacity(iters + 1);
    let mut reseeded = 0;
    let mut logp = vec![0.0; k];
    for _ in 0..iters {
        let consts = gmm.log_consts();
        let mut mass = vec![0.0; k];
        let mut s1 = vec![vec![0.0; d]; k];
        let mut s2 = vec![vec![0.0; d]; k];
        let mut total = 0.0;
        let mut worst = (f64::INFINITY, 0);
        for (t, x) in centered.iter().enumerate() {
            gmm.component_log_probs(&consts, x, &mut logp);
            let lse = log_sum_exp(&logp);
            total += lse;
            if lse < worst.0 {
                worst = (lse, t);
            }
            for j in 0..k {
                let r = (logp[j] - lse).exp();
                if r == 0.0 {
                    continue;
                }
                mass[j] += r;
                for ((a, b), v) in s1[j].iter_mut().zip(s2[j].iter_mut()).zip(x) {
                    *a += r * v;
                    *b += r * v * v;
                }
            }
        }
        trace.push(total);
        for j in 0..k {
            if mass[j] < EMPTY_MASS {
                reseeded += 1;
                gmm.means[j] = centered[worst.1].clone();
                gmm.variances[j] = init_var.clone();
                gmm.weights[j] = 1.0 / n;
                continue;
            }
            gmm.weights[j] = mass[j] / n;
            for dd in 0..d {
                let mu = s1[j][dd] / mass[j];
                let var = s2[j][dd] / mass[j] - mu * mu;
                gmm.means[j][dd] = mu;
                gmm.variances[j][dd] = var.max(floor[dd]);
            }
        }
        let wsum: f64 = gmm.weights.iter().sum();
        gmm.weights.iter_mut().for_each(|w| *w /= wsum);
    }
    trace.push(gmm.total_loglik(&centered)?);
    for m in gmm.means.iter_mut() {
        for (v, g) in m.iter_mut().zip(&gmean) {
            *v += g;
        }
    }
    Ok(EmFit {
        gmm,
        trace,
        reseeded,
    })
}

/// `avg_loglik(M_g) − avg_loglik(M_s)`, or the difference of summed
/// log-likelihoods when `average` is false.
pub fn llr_score(
    frames: &[Vec<f64>],
    genuine: &DiagonalGmm,
    spoof: &DiagonalGmm,
    average: bool,
) -> Result<f64> {
    if genuine.dim() != spoof.dim() {
        return Err(Error::Shape {
            op: "llr_score",
            lhs: vec![genuine.dim()],
            rhs: vec![spoof.dim()],
        });
    }
    if average {
        Ok(genuine.avg_loglik(frames)? - spoof.avg_loglik(frames)?)
    } else {
        Ok(genuine.total_loglik(frames)? - spoof.total_loglik(frames)?)
    }
}

/// The genuine/spoof model pair plus the front-end that produced its features.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmBaseline {
    pub genuine: DiagonalGmm,
    pub spoof: DiagonalGmm,
    pub features: FeatureConfig,
    pub average: bool,
}

impl GmmBaseline {
    pub fn score(&self, frames: &[Vec<f64>]) -> Result<f64> {
        llr_score(frames, &self.genuine, &self.spoof, self.average)
    }

    pub fn to_container(&self) -> Container {
        let mut header = String::from("kind = gmm\n");
        for (k, v) in self.features.entries() {
            header.push_str(&format!("{k} = {v}\n"));
        }
        header.push_str(&format!("gmm_average = {}\n", self.average));
        let mut c = Container::new(header);
        for r in self.genuine.records("genuine").into_iter().chain(self.spoof.records("spoof")) {
            c.push(r);
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let mut features = FeatureConfig::default();
        let mut average = true;
        let mut kind = None;
        for (_, k, v) in parse_kv(&c.header, Path::new("<gmm header>"))? {
            match k.as_str() {
                "kind" => kind = Some(v),
                "gmm_average" => average = parse_value(&k, &v)?,
                _ => {
                    if !features.set(&k, &v)? {
                        return Err(Error::Checkpoint(format!("unknown header key '{k}'")));
                    }
                }
            }
        }
        if kind.as_deref() != Some("gmm") {
            return Err(Error::Checkpoint("file does not hold a GMM baseline".into()));
        }
        features.validate()?;
        let genuine = DiagonalGmm::from_records(c, "genuine")?;
        let spoof = DiagonalGmm::from_records(c, "spoof")?;
        if genuine.dim() != features.dim() || spoof.dim() != features.dim() {
            return Err(Error::Checkpoint("GMM dimension disagrees with the feature config".into()));
        }
        Ok(Self {
            genuine,
            spoof,
            features,
            average,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn brute_density(g: &DiagonalGmm, x: &[f64]) -> f64 {
        let mut p = 0.0;
        for k in 0..g.k() {
            let mut dens = g.weights[k];
            for d in 0..g.dim() {
                let v = g.variances[k][d];
                dens *= (-(x[d] - g.means[k][d]).powi(2) / (2.0 * v)).exp() / (2.0 * PI * v).sqrt();
            }
            p += dens;
        }
        p.ln()
    }

    fn random_gmm(k: usize, d: usize, rng: &mut ChaCha8Rng) -> DiagonalGmm {
        let mut w: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= s);
        let rows = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
            (0..k).map(|_| (0..d).map(|_| rng.random_range(lo..hi)).collect()).collect()
        };
        let means = rows(rng, -2.0, 2.0);
        let vars = rows(rng, 0.3, 2.0);
        DiagonalGmm::new(w, means, vars).unwrap()
    }

    #[test]
    fn density_at_mean() {
        let g = DiagonalGmm::new(vec![1.0], vec![vec![0.5; 39]], vec![vec![1.0; 39]]).unwrap();
        let ll = g.avg_loglik(&[vec![0.5; 39]]).unwrap();
        assert!((ll + 19.5 * (2.0 * PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let k = rng.random_range(1..=4);
            let d = rng.random_range(1..=3);
            let t = rng.random_range(1..=10);
            let g = random_gmm(k, d, &mut rng);
            let frames: Vec<Vec<f64>> = (0..t)
                .map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect())
                .collect();
            let brute = frames.iter().map(|x| brute_density(&g, x)).sum::<f64>() / t as f64;
            assert!((g.avg_loglik(&frames).unwrap() - brute).abs() < 1e-10);
        }
    }

    #[test]
    fn duplicating_frames_keeps_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_gmm(3, 2, &mut rng);
        let frames: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 0.3, -0.2]).collect();
        let doubled: Vec<Vec<f64>> = frames.iter().flat_map(|f| [f.clone(), f.clone()]).collect();
        let (a, b) = (g.avg_loglik(&frames).unwrap(), g.avg_loglik(&doubled).unwrap());
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn k1_fit_is_sample_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let frames: Vec<Vec<f64>> = (0..300)
            .map(|_| vec![rng.random_range(-1.0..3.0), rng.random_range(5.0..6.0)])
            .collect();
        let fit = em_fit(&frames, 1, 1, 1e-3, &mut rng).unwrap();
        let (mean, var) = global_moments(&frames);
        for d in 0..2 {
            assert!((fit.gmm.means[0][d] - mean[d]).abs() < 1e-10);
            assert!((fit.gmm.variances[0][d] - var[d]).abs() < 1e-10);
        }
        assert_eq!(fit.gmm.weights, vec![1.0]);
    }

    #[test]
    fn recovers_two_component_mixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let left = Normal::new(-2.0, 0.5).unwrap();
        let right = Normal::new(2.0, 0.5).unwrap();
        let frames: Vec<Vec<f64>> = (0..2000)
            .map(|_| {
                let d = if rng.random_bool(0.5) { &left } else { &right };
                vec![d.sample(&mut rng)]
            })
            .collect();
        let fit = em_fit(&frames, 2, 30, 1e-3, &mut rng).unwrap();
        let mut means: Vec<f64> = fit.gmm.means.iter().map(|m| m[0]).collect();
        means.sort_by(f64::total_cmp);
        assert!((means[0] + 2.0).abs() < 0.1 && (means[1] - 2.0).abs() < 0.1, "{means:?}");
        assert!(fit.trace.windows(2).all(|w| w[1] >= w[0] - 1e-8));
        assert!(((fit.gmm.weights.iter().sum::<f64>()) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn llr_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_gmm(3, 2, &mut rng);
        let b = random_gmm(2, 2, &mut rng);
        let frames: Vec<Vec<f64>> = (0..6).map(|_| vec![rng.random(), rng.random()]).collect();
        assert_eq!(llr_score(&frames, &a, &a, true).unwrap(), 0.0);
        assert_eq!(
            llr_score(&frames, &a, &b, true).unwrap(),
            -llr_score(&frames, &b, &a, true).unwrap()
        );
        let c = random_gmm(2, 3, &mut rng);
        assert!(llr_score(&frames, &a, &c, true).is_err());
    }

    #[test]
    fn frames_from_genuine_model_score_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = DiagonalGmm::new(vec![1.0], vec![vec![3.0, -3.0]], vec![vec![0.5, 0.5]]).unwrap();
        let s = DiagonalGmm::new(vec![1.0], vec![vec![-3.0, 3.0]], vec![vec![0.5, 0.5]]).unwrap();
        let n = Normal::new(0.0, 0.5f64.sqrt()).unwrap();
        for _ in 0..20 {
            let frames: Vec<Vec<f64>> = (0..10)
                .map(|_| vec![3.0 + n.sample(&mut rng), -3.0 + n.sample(&mut rng)])
                .collect();
            assert!(llr_score(&frames, &g, &s, true).unwrap() > 0.0);
        }
    }

    #[test]
    fn too_few_frames_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(em_fit(&[vec![1.0], vec![2.0]], 3, 5, 1e-3, &mut rng).is_err());
    }

    #[test]
    fn baseline_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = FeatureConfig::default();
        let base = GmmBaseline {
            genuine: random_gmm(3, 39, &mut rng),
            spoof: random_gmm(2, 39, &mut rng),
            features: cfg,
            average: false,
        };
        let back = GmmBaseline::from_container(
            &Container::from_bytes(&base.to_container().to_bytes().unwrap()).unwrap(),
        )
        .unwrap();
        assert!(!back.average);
        for (a, b) in back.genuine.means.concat().iter().zip(base.genuine.means.concat()) {
            assert_eq!(*a, b as f32 as f64);
        }
    }
}
