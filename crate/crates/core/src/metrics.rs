//! FAR/FRR/HTER evaluation.
//!
//! Attacks are accepted when `score >= θ` and genuine trials rejected when
//! `score < θ`. The threshold is chosen on development scores and then
//! applied unchanged to evaluation scores.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Truth {
    #[serde(rename = "GENUINE")]
    Genuine,
    #[serde(rename = "ATTACK")]
    Attack,
}

impl fmt::Display for Truth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Truth::Genuine => "GENUINE",
            Truth::Attack => "ATTACK",
        })
    }
}

impl FromStr for Truth {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_uppercase().as_str() {
            "GENUINE" => Ok(Truth::Genuine),
            "ATTACK" => Ok(Truth::Attack),
            _ => Err(format!("unknown truth '{s}' (expected GENUINE or ATTACK)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub utterance_id: String,
    pub score: f64,
    pub truth: Truth,
    /// Attack category; empty for genuine trials.
    pub category: String,
}

impl ScoreRecord {
    pub fn new(id: impl Into<String>, score: f64, truth: Truth, category: impl Into<String>) -> Self {
        Self {
            utterance_id: id.into(),
            score,
            truth,
            category: category.into(),
        }
    }
}

fn split_scores(records: &[ScoreRecord]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut real = Vec::new();
    let mut attack = Vec::new();
    for r in records {
        if !r.score.is_finite() {
            return Err(Error::NonFinite(format!("score of '{}'", r.utterance_id)));
        }
        match r.truth {
            Truth::Genuine => real.push(r.score),
            Truth::Attack => attack.push(r.score),
        }
    }
    Ok((real, attack))
}

/// Fraction of attack scores at or above `theta`.
pub fn far(attack_scores: &[f64], theta: f64) -> Result<f64> {
    if attack_scores.is_empty() {
        return Err(Error::Data("FAR undefined: no attack scores".into()));
    }
    let n = attack_scores.iter().filter(|&&s| s >= theta).count();
    Ok(n as f64 / attack_scores.len() as f64)
}

/// Fraction of genuine scores strictly below `theta`.
pub fn frr(real_scores: &[f64], theta: f64) -> Result<f64> {
    if real_scores.is_empty() {
        return Err(Error::Data("FRR undefined: no genuine scores".into()));
    }
    let n = real_scores.iter().filter(|&&s| s < theta).count();
    Ok(n as f64 / real_scores.len() as f64)
}

/// `(far + frr) / 2` in whatever unit the inputs use.
pub fn half_total(far: f64, frr: f64) -> f64 {
    (far + frr) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdChoice {
    pub theta: f64,
    /// Fractions in [0, 1].
    pub far: f64,
    pub frr: f64,
    pub metric: f64,
}

/// Minimizes `(FAR + FRR)/2` over every distinct score and one value below
/// the minimum. Ties go to the smallest observed score; the below-minimum
/// candidate always ties with the minimum itself, so it never wins.
pub fn select_threshold(dev: &[ScoreRecord]) -> Result<ThresholdChoice> {
    let (mut real, mut attack) = split_scores(dev)?;
    if real.is_empty() || attack.is_empty() {
        return Err(Error::Data(
            "threshold selection needs both genuine and attack dev scores".into(),
        ));
    }
    real.sort_by(f64::total_cmp);
    attack.sort_by(f64::total_cmp);
    let mut candidates: Vec<f64> = real.iter().chain(&attack).copied().collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let (nr, na) = (real.len() as f64, attack.len() as f64);
    let mut best: Option<ThresholdChoice> = None;
    for &theta in &candidates {
        let rejected = real.partition_point(|&s| s < theta);
        let accepted = attack.len() - attack.partition_point(|&s| s < theta);
        let (fa, fr) = (accepted as f64 / na, rejected as f64 / nr);
        let metric = half_total(fa, fr);
        if best.is_none_or(|b| metric < b.metric) {
            best = Some(ThresholdChoice {
                theta,
                far: fa,
                frr: fr,
                metric,
            });
        }
    }
    Ok(best.expect("at least one candidate"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryMetrics {
    pub count: usize,
    /// Percentages.
    pub far: f64,
    pub hter: f64,
}

/// Per attack category: FAR over that category's attacks and
/// `HTER_c = (FAR_c + FRR_all)/2` with the FRR of all genuine trials.
/// Categories in `expected` with no evaluation attacks are omitted and
/// reported in the returned warnings.
pub fn per_category_report(
    records: &[ScoreRecord],
    theta: f64,
    expected: &[String],
) -> Result<(BTreeMap<String, CategoryMetrics>, Vec<String>)> {
    let (real, _) = split_scores(records)?;
    let frr_all = 100.0 * frr(&real, theta)?;
    let mut by_cat: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.truth == Truth::Attack) {
        by_cat.entry(r.category.clone()).or_default().push(r.score);
    }
    let mut out = BTreeMap::new();
    for (cat, scores) in &by_cat {
        let far_c = 100.0 * far(scores, theta)?;
        out.insert(
            cat.clone(),
            CategoryMetrics {
                count: scores.len(),
                far: far_c,
                hter: half_total(far_c, frr_all),
            },
        );
    }
    let warnings = expected
        .iter()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|c| !c.is_empty() && !by_cat.contains_key(*c))
        .map(|c| format!("category '{c}' has no evaluation attacks; omitted"))
        .collect();
    Ok((out, warnings))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Counts {
    pub genuine: usize,
    pub attack: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub theta_dev: f64,
    /// Dev `(FAR+FRR)/2` at `theta_dev`, percent.
    pub dev_metric: f64,
    /// Percentages.
    pub far_eval: f64,
    pub frr_eval: f64,
    pub hter_eval: f64,
    pub per_category: BTreeMap<String, CategoryMetrics>,
    pub dev_counts: Counts,
    pub eval_counts: Counts,
    pub warnings: Vec<String>,
}

fn counts(records: &[ScoreRecord]) -> Counts {
    let genuine = records.iter().filter(|r| r.truth == Truth::Genuine).count();
    Counts {
        genuine,
        attack: records.len() - genuine,
    }
}

/// HTER of `eval` at a fixed threshold.
pub fn hter(
    eval: &[ScoreRecord],
    choice: &ThresholdChoice,
    dev_counts: Counts,
    expected_categories: &[String],
) -> Result<MetricsReport> {
    let (real, attack) = split_scores(eval)?;
    if real.is_empty() || attack.is_empty() {
        return Err(Error::Data(
            "evaluation needs both genuine and attack scores".into(),
        ));
    }
    let theta = choice.theta;
    let far_eval = 100.0 * far(&attack, theta)?;
    let frr_eval = 100.0 * frr(&real, theta)?;
    let (per_category, warnings) = per_category_report(eval, theta, expected_categories)?;
    Ok(MetricsReport {
        theta_dev: theta,
        dev_metric: 100.0 * choice.metric,
        far_eval,
        frr_eval,
        hter_eval: half_total(far_eval, frr_eval),
        per_category,
        dev_counts,
        eval_counts: counts(eval),
        warnings,
    })
}

/// Threshold on `dev`, HTER on `eval`.
pub fn evaluate(
    dev: &[ScoreRecord],
    eval: &[ScoreRecord],
    expected_categories: &[String],
) -> Result<MetricsReport> {
    let choice = select_threshold(dev)?;
    hter(eval, &choice, counts(dev), expected_categories)
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Two-decimal summary table.
    pub fn to_human(&self) -> String {
        let mut out = format!(
            "theta_dev {:.6}  dev (FAR+FRR)/2 {:.2}%\nEVAL  FAR {:.2}%  FRR {:.2}%  HTER {:.2}%\n",
            self.theta_dev, self.dev_metric, self.far_eval, self.frr_eval, self.hter_eval
        );
        out.push_str(&format!("{:<16}{:>8}{:>10}{:>10}\n", "category", "n", "FAR%", "HTER%"));
        for (c, m) in &self.per_category {
            out.push_str(&format!("{:<16}{:>8}{:>10.2}{:>10.2}\n", c, m.count, m.far, m.hter));
        }
        for w in &self.warnings {
            out.push_str(&format!("warning: {w}\n"));
        }
        out
    }
}

pub fn scores_to_tsv(records: &[ScoreRecord]) -> String {
    let mut out = String::from("# id\tscore\ttruth\tcategory\n");
    for r in records {
        let cat = if r.category.is_empty() { "-" } else { &r.category };
        out.push_str(&format!("{}\t{}\t{}\t{}\n", r.utterance_id, r.score, r.truth, cat));
    }
    out
}

pub fn parse_scores(text: &str, source: &Path) -> Result<Vec<ScoreRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: source.to_path_buf(),
            line: i + 1,
            msg,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(err(format!("expected 4 columns, got {}", cols.len())));
        }
        let score: f64 = cols[1]
            .parse()
            .map_err(|_| err(format!("bad score '{}'", cols[1])))?;
        let truth: Truth = cols[2].parse().map_err(err)?;
        let category = if cols[3] == "-" { "" } else { cols[3] };
        out.push(ScoreRecord::new(cols[0], score, truth, category));
    }
    Ok(out)
}

pub fn write_scores(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    std::fs::write(path, scores_to_tsv(records)).map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scores(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn recs(real: &[f64], attack: &[f64]) -> Vec<ScoreRecord> {
        real.iter()
            .map(|&s| ScoreRecord::new("r", s, Truth::Genuine, ""))
            .chain(attack.iter().map(|&s| ScoreRecord::new("a", s, Truth::Attack, "SS")))
            .collect()
    }

    #[test]
    fn far_frr_examples() {
        let s = [0.1, 0.5, 0.9];
        assert_eq!(far(&s, 0.5).unwrap(), 2.0 / 3.0);
        assert_eq!(frr(&s, 0.5).unwrap(), 1.0 / 3.0);
        assert_eq!(far(&s, f64::NEG_INFINITY).unwrap(), 1.0);
        assert_eq!(frr(&s, f64::NEG_INFINITY).unwrap(), 0.0);
        assert!(far(&[], 0.0).unwrap_err().to_string().contains("attack"));
        assert!(frr(&[], 0.0).unwrap_err().to_string().contains("genuine"));
        assert_eq!(half_total(2.0, 1.0), 1.5);
    }

    #[test]
    fn threshold_examples() {
        let c = select_threshold(&recs(&[2.0, 3.0], &[0.0, 1.0])).unwrap();
        assert_eq!((c.theta, c.metric), (2.0, 0.0));
        let c = select_threshold(&recs(&[0.0, 1.0], &[2.0, 3.0])).unwrap();
        assert_eq!(c.metric, 0.5);
        let c = select_threshold(&recs(&[4.0, 4.0], &[4.0])).unwrap();
        assert_eq!((c.theta, c.far, c.frr, c.metric), (4.0, 1.0, 0.0, 0.5));
        assert!(select_threshold(&recs(&[1.0], &[])).is_err());
    }

    #[test]
    fn per_category_reductions() {
        let r = recs(&[1.0, 2.0, 3.0], &[0.0, 2.5]);
        let report = evaluate(&r, &r, &[]).unwrap();
        assert_eq!(report.per_category["SS"].hter, report.hter_eval);

        let mut r = recs(&[1.0, 2.0], &[0.5]);
        r.push(ScoreRecord::new("x", 3.0, Truth::Attack, "RE-LP-LP"));
        let (cats, warn) =
            per_category_report(&r, 1.5, &["SS".into(), "VC-LP-LP".into()]).unwrap();
        assert_eq!(cats["SS"].far, 0.0);
        assert_eq!(cats["SS"].hter, 25.0);
        assert_eq!(cats["RE-LP-LP"].far, 100.0);
        assert_eq!(warn.len(), 1);
        assert!(warn[0].contains("VC-LP-LP"));
    }

    #[test]
    fn score_file_round_trip() {
        let r = recs(&[0.25, -1e-9], &[3.0]);
        let back = parse_scores(&scores_to_tsv(&r), Path::new("s.tsv")).unwrap();
        assert_eq!(back, r);
        assert!(parse_scores("a\t1\tMAYBE\t-\n", Path::new("s.tsv")).is_err());
    }

    proptest! {
        #[test]
        fn far_frr_monotone(
            scores in proptest::collection::vec(-5.0f64..5.0, 1..30),
            mut thetas in proptest::collection::vec(-6.0f64..6.0, 2..10),
        ) {
            thetas.sort_by(f64::total_cmp);
            for w in thetas.windows(2) {
                prop_assert!(far(&scores, w[1]).unwrap() <= far(&scores, w[0]).unwrap());
                prop_assert!(frr(&scores, w[1]).unwrap() >= frr(&scores, w[0]).unwrap());
            }
        }

        #[test]
        fn rank_transform_invariance(
            real in proptest::collection::vec(-3.0f64..3.0, 1..15),
            attack in proptest::collection::vec(-3.0f64..3.0, 1..15),
        ) {
            let a = evaluate(&recs(&real, &attack), &recs(&real, &attack), &[]).unwrap();
            let t = |v: &[f64]| v.iter().map(|x| x.exp() * 3.0 + 1.0).collect::<Vec<_>>();
            let b = evaluate(&recs(&t(&real), &t(&attack)), &recs(&t(&real), &t(&attack)), &[]).unwrap();
            prop_assert_eq!(a.hter_eval, b.hter_eval);
            prop_assert_eq!(a.dev_metric, b.dev_metric);
        }
    }
}
