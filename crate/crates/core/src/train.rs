//! Adadelta and the training loop with dev-set model selection.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::TrainingMeta;
use crate::config::{fmt_list, parse_list, parse_value, ConfigSection};
use crate::data::{make_eval_sequence, make_training_sequence, prepare_frames, FrameSequence, Label, Split};
use crate::error::{Error, Result};
use crate::layers::{log_softmax, Mode, ParamSet};
use crate::manifest::Manifest;
use crate::metrics::{select_threshold, ScoreRecord, Truth};
use crate::model::{genuine_score, CldnnModel, ModelConfig};
use crate::par;
use crate::tensor::Tape;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub patience: usize,
    pub rho: f64,
    pub eps: f64,
    /// Per-class loss weights in label order; `None` is uniform.
    pub class_weights: Option<Vec<f64>>,
    /// Treat an epoch that ties the best dev metric but lowers the dev
    /// cross-entropy as an improvement.
    pub dev_loss_tiebreak: bool,
    /// Threads for data loading and scoring; 0 means all available.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 50,
            seed: 0,
            patience: 8,
            rho: 0.95,
            eps: 1e-6,
            class_weights: None,
            dev_loss_tiebreak: true,
            workers: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size < 2 {
            return err("batch_size must be >= 2 (batch norm needs batch statistics)");
        }
        if self.max_epochs == 0 {
            return err("max_epochs must be >= 1");
        }
        if self.patience == 0 {
            return err("patience must be >= 1");
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return err("adadelta_rho must lie in (0, 1)");
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return err("adadelta_eps must be positive");
        }
        if let Some(w) = &self.class_weights {
            if w.len() != Label::ALL.len() || w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
                return err("class_weights needs 4 non-negative values");
            }
            if w.iter().sum::<f64>() <= 0.0 {
                return err("class_weights must not all be zero");
            }
        }
        Ok(())
    }
}

impl ConfigSection for TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "max_epochs" => self.max_epochs = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "patience" => self.patience = parse_value(key, value)?,
            "adadelta_rho" => self.rho = parse_value(key, value)?,
            "adadelta_eps" => self.eps = parse_value(key, value)?,
            "class_weights" => {
                self.class_weights = if value.eq_ignore_ascii_case("uniform") {
                    None
                } else {
                    Some(parse_list(key, value)?)
                }
            }
            "dev_loss_tiebreak" => self.dev_loss_tiebreak = parse_value(key, value)?,
            "workers" => self.workers = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("batch_size", self.batch_size.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("patience", self.patience.to_string()),
            ("adadelta_rho", self.rho.to_string()),
            ("adadelta_eps", self.eps.to_string()),
            (
                "class_weights",
                self.class_weights
                    .as_deref()
                    .map_or_else(|| "uniform".to_string(), fmt_list),
            ),
            ("dev_loss_tiebreak", self.dev_loss_tiebreak.to_string()),
            ("workers", self.workers.to_string()),
        ]
    }
}

/// Decayed accumulators of squared gradients and squared updates, one
/// vector per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdadeltaState {
    pub rho: f64,
    pub eps: f64,
    pub eg2: Vec<Vec<f64>>,
    pub edx2: Vec<Vec<f64>>,
}

impl AdadeltaState {
    pub fn new(params: &ParamSet, rho: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            rho,
            eps,
            eg2: zeros.clone(),
            edx2: zeros,
        }
    }
}

/// One coordinate: updates both accumulators and returns the step `Δ`.
pub fn adadelta_update(g: f64, eg2: &mut f64, edx2: &mut f64, rho: f64, eps: f64) -> f64 {
    *eg2 = rho * *eg2 + (1.0 - rho) * g * g;
    let delta = -((*edx2 + eps).sqrt() / (*eg2 + eps).sqrt()) * g;
    *edx2 = rho * *edx2 + (1.0 - rho) * delta * delta;
    delta
}

/// Applies one Adadelta step using each parameter's accumulated `grad`.
/// Nothing is modified if any gradient is non-finite.
pub fn adadelta_step(params: &mut ParamSet, state: &mut AdadeltaState) -> Result<()> {
    if state.eg2.len() != params.len()
        || params.iter().zip(&state.eg2).any(|(p, e)| p.value.len() != e.len())
    {
        return Err(Error::InvalidArgument(
            "optimizer state does not match the parameters".into(),
        ));
    }
    if let Some(p) = params.iter().find(|p| p.grad.iter().any(|g| !g.is_finite())) {
        return Err(Error::NonFinite(format!("gradient of '{}'", p.name)));
    }
    let (rho, eps) = (state.rho, state.eps);
    for ((p, eg2), edx2) in params.iter_mut().zip(&mut state.eg2).zip(&mut state.edx2) {
        let grad = &p.grad;
        for (((w, &g), a), b) in p.value.data_mut().iter_mut().zip(grad).zip(eg2).zip(edx2) {
            *w += adadelta_update(g, a, b, rho, eps);
        }
    }
    Ok(())
}

/// An utterance decoded, normalized and framed for the network.
#[derive(Debug, Clone)]
pub struct PreparedUtterance {
    pub id: String,
    pub label: Label,
    pub category: String,
    pub frames: Vec<Vec<f64>>,
}

impl PreparedUtterance {
    pub fn eval_sequence(&self) -> Result<FrameSequence> {
        make_eval_sequence(&self.frames, &self.id)
    }

    pub fn truth(&self) -> Truth {
        if self.label.is_genuine() {
            Truth::Genuine
        } else {
            Truth::Attack
        }
    }
}

/// Loads one split in manifest order. Utterances shorter than a frame come
/// back with an empty frame list.
pub fn prepare_split(
    manifest: &Manifest,
    split: Split,
    config: &ModelConfig,
    workers: usize,
) -> Result<Vec<PreparedUtterance>> {
    let records: Vec<_> = manifest.split(split).collect();
    par::map(&records, workers, |r| {
        let u = manifest.load_utterance(r)?;
        Ok(PreparedUtterance {
            frames: prepare_frames(&u.samples, config.frame_len, config.hop())?,
            id: u.id,
            label: u.label,
            category: u.category,
        })
    })
}

/// Eval-mode genuine scores, in input order.
pub fn score_utterances(
    model: &CldnnModel,
    utts: &[PreparedUtterance],
    workers: usize,
) -> Result<Vec<ScoreRecord>> {
    Ok(logits_for(model, utts, workers)?
        .into_iter()
        .zip(utts)
        .map(|(z, u)| ScoreRecord::new(u.id.clone(), genuine_score(&z), u.truth(), u.category.clone()))
        .collect())
}

fn logits_for(model: &CldnnModel, utts: &[PreparedUtterance], workers: usize) -> Result<Vec<Vec<f64>>> {
    par::map(utts, workers, |u| model.logits(&u.eval_sequence()?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_far: f64,
    pub dev_frr: f64,
    /// `(FAR + FRR)/2` on dev at its own optimal threshold, fraction.
    pub dev_metric: f64,
    pub dev_loss: f64,
    pub improved: bool,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// Patience-based stopping on the dev metric.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    pub use_loss_tiebreak: bool,
    best: Option<(f64, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, use_loss_tiebreak: bool) -> Self {
        Self {
            patience,
            use_loss_tiebreak,
            best: None,
            stale: 0,
        }
    }

    /// Records one epoch; returns whether it is the new best.
    pub fn observe(&mut self, metric: f64, loss: f64) -> bool {
        let better = match self.best {
            None => true,
            Some((m, l)) => metric < m || (self.use_loss_tiebreak && metric == m && loss < l),
        };
        if better {
            self.best = Some((metric, loss));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        better
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }
}

pub struct TrainOutcome {
    pub model: CldnnModel,
    pub meta: TrainingMeta,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Splits `n` shuffled positions into batches of `size`; a trailing batch
/// of one is merged into its predecessor.
pub fn batch_ranges(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<_> = (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().end = last.end;
    }
    out
}

/// Trains `model` in place and returns the best epoch's copy.
/// `on_epoch` sees every history record as soon as it is complete.
pub fn train(
    mut model: CldnnModel,
    train_set: &[PreparedUtterance],
    dev_set: &[PreparedUtterance],
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let usable: Vec<&PreparedUtterance> = train_set.iter().filter(|u| !u.frames.is_empty()).collect();
    if usable.len() < 2 {
        return Err(Error::Data("training needs at least two utterances of one frame or more".into()));
    }
    if dev_set.is_empty() {
        return Err(Error::Data("dev split required for model selection".into()));
    }
    for label in Label::ALL {
        if !usable.iter().any(|u| u.label == label) {
            eprintln!("warning: no training utterances of class {label}");
        }
    }
    let mut data_rng = ChaCha8Rng::seed_from_u64(config.seed);
    data_rng.set_stream(1);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(config.seed);
    drop_rng.set_stream(2);

    let mut opt = AdadeltaState::new(&model.params, config.rho, config.eps);
    let mut stopper = EarlyStopping::new(config.patience, config.dev_loss_tiebreak);
    let mut best: Option<(CldnnModel, TrainingMeta)> = None;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut stopped_early = false;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut data_rng);
        let seqs = order
            .iter()
            .map(|&i| make_training_sequence(&usable[i].frames, model.config.seq_len, &usable[i].id, &mut data_rng))
            .collect::<Result<Vec<_>>>()?;
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for (b, range) in batch_ranges(seqs.len(), config.batch_size).into_iter().enumerate() {
            let batch: Vec<&FrameSequence> = seqs[range.clone()].iter().collect();
            let targets: Vec<usize> = order[range].iter().map(|&i| usable[i].label.index()).collect();
            let loss = train_step(&mut model, &mut opt, &batch, &targets, config, &mut drop_rng)
                .map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch} batch {}: {m}", b + 1)),
                    other => other,
                })?;
            loss_sum += loss * batch.len() as f64;
            count += batch.len();
        }
        let (dev_choice, dev_loss) = dev_metrics(&model, dev_set, config.workers)?;
        let improved = stopper.observe(dev_choice.metric, dev_loss);
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / count as f64,
            dev_far: dev_choice.far,
            dev_frr: dev_choice.frr,
            dev_metric: dev_choice.metric,
            dev_loss,
            improved,
        };
        on_epoch(&rec);
        history.push(rec);
        if improved {
            let meta = TrainingMeta {
                epoch,
                seed: config.seed,
                dev_metric: dev_choice.metric,
            };
            best = Some((model.clone(), meta));
        }
        if stopper.should_stop() {
            stopped_early = epoch < config.max_epochs;
            break;
        }
    }
    let (model, meta) = best.expect("first epoch always improves");
    Ok(TrainOutcome {
        model,
        meta,
        history,
        stopped_early,
    })
}

/// One optimizer step on a batch; returns the batch loss before the step.
pub fn train_step(
    model: &mut CldnnModel,
    opt: &mut AdadeltaState,
    batch: &[&FrameSequence],
    targets: &[usize],
    config: &TrainConfig,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, true);
    let out = model.forward_bound(&mut tape, &bound, batch, Mode::Train, Some(rng))?;
    let loss = tape.softmax_cross_entropy(out.logits, targets, config.class_weights.as_deref())?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    tape.backward(loss)?;
    model.params.zero_grads();
    model.params.accumulate_grads(&tape, &bound);
    adadelta_step(&mut model.params, opt)?;
    model.apply_bn_stats(&out.bn_stats);
    Ok(value)
}

/// Dev threshold choice and mean cross-entropy.
pub fn dev_metrics(
    model: &CldnnModel,
    dev: &[PreparedUtterance],
    workers: usize,
) -> Result<(crate::metrics::ThresholdChoice, f64)> {
    let logits = logits_for(model, dev, workers)?;
    let mut records = Vec::with_capacity(dev.len());
    let mut loss = 0.0;
    for (z, u) in logits.iter().zip(dev) {
        let lp = log_softmax(z);
        loss -= lp[u.label.index()];
        records.push(ScoreRecord::new(u.id.clone(), lp[Label::Genuine.index()], u.truth(), ""));
    }
    Ok((select_threshold(&records)?, loss / dev.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_value() {
        let (mut a, mut b) = (0.0, 0.0);
        let d = adadelta_update(1.0, &mut a, &mut b, 0.95, 1e-6);
        assert!((a - 0.05).abs() < 1e-15);
        let expected = -(1e-6f64).sqrt() / 0.050001f64.sqrt();
        assert!((d - expected).abs() < 1e-15);
        assert!((d + 0.0044721).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let (mut a, mut b) = (0.4, 0.2);
        let d = adadelta_update(0.0, &mut a, &mut b, 0.95, 1e-6);
        assert_eq!(d, 0.0);
        assert!((a - 0.38).abs() < 1e-15);
    }

    #[test]
    fn step_opposes_gradient_on_quadratic() {
        let mut ps = ParamSet::new();
        ps.add("w", crate::tensor::Tensor::vector(vec![1.0]));
        let mut st = AdadeltaState::new(&ps, 0.95, 1e-6);
        for _ in 0..5 {
            let w = ps.iter().next().unwrap().value.data()[0];
            ps.iter_mut().next().unwrap().grad = vec![w];
            let before = w.abs();
            adadelta_step(&mut ps, &mut st).unwrap();
            assert!(ps.iter().next().unwrap().value.data()[0].abs() < before);
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut ps = ParamSet::new();
        ps.add("lstm1.w_ih", crate::tensor::Tensor::vector(vec![1.0, 2.0]));
        ps.iter_mut().next().unwrap().grad = vec![0.5, f64::NAN];
        let mut st = AdadeltaState::new(&ps, 0.95, 1e-6);
        let err = adadelta_step(&mut ps, &mut st).unwrap_err().to_string();
        assert!(err.contains("lstm1.w_ih"));
        assert_eq!(ps.iter().next().unwrap().value.data(), &[1.0, 2.0]);
    }

    #[test]
    fn patience_one_stops_at_epoch_two() {
        let mut s = EarlyStopping::new(1, false);
        assert!(s.observe(0.3, 1.0));
        assert!(!s.should_stop());
        assert!(!s.observe(0.3, 0.5));
        assert!(s.should_stop());
    }

    #[test]
    fn loss_tiebreak() {
        let mut s = EarlyStopping::new(2, true);
        s.observe(0.0, 1.0);
        assert!(s.observe(0.0, 0.5));
        assert!(!s.observe(0.0, 0.7));
        assert!(!s.observe(0.1, 0.1));
        assert!(s.should_stop());
    }

    #[test]
    fn batches_fold_singletons() {
        assert_eq!(batch_ranges(40, 32), vec![0..32, 32..40]);
        assert_eq!(batch_ranges(33, 32), vec![0..33]);
        assert_eq!(batch_ranges(64, 32), vec![0..32, 32..64]);
        assert_eq!(batch_ranges(5, 2), vec![0..2, 2..5]);
    }

    #[test]
    fn config_round_trip() {
        let mut c = TrainConfig::default();
        c.set("class_weights", "1,2,2,2").unwrap();
        let mut d = TrainConfig::default();
        for (k, v) in c.entries() {
            d.set(k, &v).unwrap();
        }
        assert_eq!(c, d);
        assert!(TrainConfig { batch_size: 1, ..Default::default() }.validate().is_err());
    }
}
