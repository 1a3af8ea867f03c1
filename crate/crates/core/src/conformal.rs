//! Split conformal prediction for classification.
//!
//! Calibration scores are `s = 1 - p(true class)`. The threshold `q_hat` is
//! the `ceil((n + 1)(1 - alpha))`-th smallest calibration score, or `+inf`
//! when that rank exceeds `n`. A test sample's set holds every class whose
//! score `1 - p_y` is at most `q_hat`; on exchangeable data the set contains
//! the true class with probability in `[1 - alpha, 1 - alpha + 1/(n + 1)]`.
//!
//! Sets that would be empty get the top class added and are flagged
//! `forced_top1`. That can only raise coverage.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data_model::{Axis, DemographicMetadata};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    #[default]
    OneMinusTrueProb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub alpha: f64,
    pub n_calibration: usize,
    /// `f64::INFINITY` when the finite-sample rank exceeds `n_calibration`.
    #[serde(serialize_with = "ser_threshold", deserialize_with = "de_threshold")]
    pub q_hat: f64,
    pub score_kind: ScoreKind,
}

impl CalibrationResult {
    /// The guaranteed coverage band `[1 - alpha, 1 - alpha + 1/(n + 1)]`.
    pub fn coverage_band(&self) -> (f64, f64) {
        let lo = 1.0 - self.alpha;
        (lo, lo + 1.0 / (self.n_calibration as f64 + 1.0))
    }
}

fn ser_threshold<S: Serializer>(q: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if q.is_infinite() {
        s.serialize_str("+inf")
    } else {
        s.serialize_f64(*q)
    }
}

fn de_threshold<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(v) => Ok(v),
        Raw::Text(t) if t == "+inf" || t == "inf" => Ok(f64::INFINITY),
        Raw::Text(t) => Err(serde::de::Error::custom(format!("bad threshold {t:?}"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SetEntry {
    pub class: usize,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub sample_id: String,
    /// Sorted by confidence descending, ties by ascending class index.
    pub entries: Vec<SetEntry>,
    pub forced_top1: bool,
    pub truth: Option<usize>,
    pub contains_truth: bool,
    /// 1-based position of the true class in `entries`.
    pub truth_rank: Option<usize>,
    /// Confidence of the true class when it is in the set.
    pub truth_confidence: Option<f64>,
}

impl PredictionSet {
    pub fn size(&self) -> usize {
        self.entries.len()
    }

    /// Recomputes the truth fields from `entries` and `truth`.
    fn with_truth(mut self, truth: Option<usize>) -> Self {
        self.truth = truth;
        let pos = truth.and_then(|t| self.entries.iter().position(|e| e.class == t));
        self.contains_truth = pos.is_some();
        self.truth_rank = pos.map(|p| p + 1);
        self.truth_confidence = pos.map(|p| self.entries[p].confidence);
        self
    }
}

const ROW_SUM_TOL: f64 = 1e-6;

/// `1 - p[truth]` for each row.
pub fn nonconformity_scores(probs: &Matrix, truths: &[usize]) -> Result<Vec<f64>> {
    if probs.rows() != truths.len() {
        return Err(Error::data(format!("{} probability rows for {} truths", probs.rows(), truths.len())));
    }
    truths
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let row = probs.row(i);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::numeric(format!("probability row {i} sums to {sum}")));
            }
            let p = row
                .get(t)
                .ok_or_else(|| Error::data(format!("truth index {t} out of range for {} classes", row.len())))?;
            Ok((1.0 - p).clamp(0.0, 1.0))
        })
        .collect()
}

/// Rank of the calibration order statistic used as the threshold.
pub fn quantile_rank(n: usize, alpha: f64) -> usize {
    // guard against (n+1)(1-alpha) landing a hair above an integer
    ((n as f64 + 1.0) * (1.0 - alpha) - 1e-9).ceil().max(1.0) as usize
}

pub fn calibrate(scores: &[f64], alpha: f64) -> Result<CalibrationResult> {
    if scores.is_empty() {
        return Err(Error::data("cannot calibrate on an empty score vector"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config(format!("alpha {alpha} outside (0, 1)")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::numeric("NaN calibration score"));
    }
    let n = scores.len();
    let k = quantile_rank(n, alpha);
    let q_hat = if k > n {
        f64::INFINITY
    } else {
        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        sorted[k - 1]
    };
    Ok(CalibrationResult {
        alpha,
        n_calibration: n,
        q_hat,
        score_kind: ScoreKind::OneMinusTrueProb,
    })
}

/// Builds the conformal set for one probability row.
pub fn predict_set(prob_row: &[f64], calibration: &CalibrationResult, sample_id: &str, truth: Option<usize>) -> PredictionSet {
    let mut ranked: Vec<SetEntry> = prob_row
        .iter()
        .enumerate()
        .map(|(class, &confidence)| SetEntry { class, confidence })
        .collect();
    ranked.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.class.cmp(&b.class)));

    let mut entries: Vec<SetEntry> = ranked
        .iter()
        .copied()
        .filter(|e| 1.0 - e.confidence <= calibration.q_hat)
        .collect();
    let forced_top1 = entries.is_empty() && !ranked.is_empty();
    if forced_top1 {
        entries.push(ranked[0]);
    }
    PredictionSet {
        sample_id: sample_id.to_string(),
        entries,
        forced_top1,
        truth: None,
        contains_truth: false,
        truth_rank: None,
        truth_confidence: None,
    }
    .with_truth(truth)
}

/// One set per probability row.
pub fn predict_sets(probs: &Matrix, ids: &[String], truths: Option<&[usize]>, calibration: &CalibrationResult) -> Result<Vec<PredictionSet>> {
    if ids.len() != probs.rows() || truths.is_some_and(|t| t.len() != probs.rows()) {
        return Err(Error::data("ids, truths and probability rows must have equal lengths"));
    }
    Ok((0..probs.rows())
        .map(|i| predict_set(probs.row(i), calibration, &ids[i], truths.map(|t| t[i])))
        .collect())
}

/// Fraction of sets containing their true class.
pub fn empirical_coverage(sets: &[PredictionSet]) -> Result<f64> {
    if sets.is_empty() {
        return Err(Error::data("no prediction sets"));
    }
    if let Some(s) = sets.iter().find(|s| s.truth.is_none()) {
        return Err(Error::data(format!("prediction set {:?} has no truth label", s.sample_id)));
    }
    Ok(sets.iter().filter(|s| s.contains_truth).count() as f64 / sets.len() as f64)
}

pub type SizeHistogram = BTreeMap<usize, usize>;

/// Set-size counts per value of `axis`.
pub fn set_size_histogram(
    sets: &[PredictionSet],
    metadata: &HashMap<String, DemographicMetadata>,
    axis: Axis,
) -> Result<BTreeMap<String, SizeHistogram>> {
    let mut out: BTreeMap<String, SizeHistogram> = BTreeMap::new();
    for s in sets {
        let meta = metadata
            .get(&s.sample_id)
            .ok_or_else(|| Error::data(format!("no metadata for id {:?}", s.sample_id)))?;
        *out.entry(meta.axis_value(axis).to_string())
            .or_default()
            .entry(s.size())
            .or_insert(0) += 1;
    }
    Ok(out)
}

/// One JSON line per set; confidences printed with 6 decimals.
pub fn prediction_set_line(set: &PredictionSet) -> String {
    let id = serde_json::to_string(&set.sample_id).expect("string serializes");
    let entries: Vec<String> = set
        .entries
        .iter()
        .map(|e| format!("[{}, {:.6}]", e.class, e.confidence))
        .collect();
    let truth = set.truth.map_or_else(|| "null".to_string(), |t| t.to_string());
    format!(
        "{{\"id\": {id}, \"entries\": [{}], \"forced\": {}, \"truth\": {truth}, \"contains_truth\": {}}}",
        entries.join(", "),
        set.forced_top1,
        set.contains_truth
    )
}

pub fn write_prediction_sets(sets: &[PredictionSet], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for s in sets {
        writeln!(w, "{}", prediction_set_line(s)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Deserialize)]
struct SetRecord {
    id: String,
    entries: Vec<(usize, f64)>,
    forced: bool,
    truth: Option<usize>,
    contains_truth: bool,
}

pub fn parse_prediction_set_line(line: &str) -> Result<PredictionSet> {
    let rec: SetRecord = serde_json::from_str(line).map_err(|e| Error::data(format!("bad prediction-set record: {e}")))?;
    if rec.entries.is_empty() {
        return Err(Error::data(format!("prediction set {:?} has no entries", rec.id)));
    }
    let set = PredictionSet {
        sample_id: rec.id,
        entries: rec
            .entries
            .into_iter()
            .map(|(class, confidence)| SetEntry { class, confidence })
            .collect(),
        forced_top1: rec.forced,
        truth: None,
        contains_truth: false,
        truth_rank: None,
        truth_confidence: None,
    }
    .with_truth(rec.truth);
    if set.contains_truth != rec.contains_truth {
        return Err(Error::data(format!(
            "prediction set {:?}: contains_truth disagrees with its entries",
            set.sample_id
        )));
    }
    Ok(set)
}

pub fn read_prediction_sets(path: &Path) -> Result<Vec<PredictionSet>> {
    let reader = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(parse_prediction_set_line(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cal(q_hat: f64) -> CalibrationResult {
        CalibrationResult {
            alpha: 0.1,
            n_calibration: 10,
            q_hat,
            score_kind: ScoreKind::OneMinusTrueProb,
        }
    }

    #[test]
    fn scores() {
        let p = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]);
        assert_eq!(nonconformity_scores(&p, &[0, 1]).unwrap(), vec![0.0, 1.0]);
        let p = Matrix::from_rows(&[[0.7, 0.2, 0.1]]);
        assert!((nonconformity_scores(&p, &[1]).unwrap()[0] - 0.8).abs() < 1e-15);
        assert!(nonconformity_scores(&p, &[3]).is_err());
        assert!(nonconformity_scores(&Matrix::from_rows(&[[0.7, 0.2]]), &[0]).is_err());
    }

    #[test]
    fn calibrate_cases() {
        let c = calibrate(&[0.3, 0.9, 0.1, 0.2], 0.2).unwrap();
        assert_eq!(c.q_hat, 0.9);
        let c = calibrate(&[0.3, 0.9, 0.1, 0.2], 0.1).unwrap();
        assert!(c.q_hat.is_infinite());
        assert!(calibrate(&[], 0.2).is_err());
        assert!(calibrate(&[0.1], 0.0).is_err());

        assert_eq!(quantile_rank(985, 0.2), 789);
        let scores: Vec<f64> = (0..985).rev().map(|i| i as f64 / 1000.0).collect();
        assert_eq!(calibrate(&scores, 0.2).unwrap().q_hat, 0.788);
    }

    #[test]
    fn set_cases() {
        let s = predict_set(&[0.2, 0.5, 0.3], &cal(f64::INFINITY), "a", Some(2));
        assert_eq!(s.size(), 3);
        assert_eq!(s.entries.iter().map(|e| e.class).collect::<Vec<_>>(), vec![1, 2, 0]);
        assert_eq!(s.truth_rank, Some(2));

        let s = predict_set(&[0.7, 0.2, 0.1], &cal(0.5), "b", Some(0));
        assert_eq!(s.entries, vec![SetEntry { class: 0, confidence: 0.7 }]);
        assert!(!s.forced_top1 && s.contains_truth);
        assert_eq!(s.truth_confidence, Some(0.7));

        let s = predict_set(&[0.4, 0.35, 0.25], &cal(0.2), "c", Some(1));
        assert_eq!(s.entries, vec![SetEntry { class: 0, confidence: 0.4 }]);
        assert!(s.forced_top1 && !s.contains_truth);
        assert_eq!(s.truth_rank, None);
    }

    #[test]
    fn confidence_ties_break_by_class() {
        let s = predict_set(&[0.25, 0.5, 0.25], &cal(1.0), "t", None);
        assert_eq!(s.entries.iter().map(|e| e.class).collect::<Vec<_>>(), vec![1, 0, 2]);
    }

    #[test]
    fn coverage_counts() {
        let full = |t| predict_set(&[0.5, 0.5], &cal(f64::INFINITY), "x", Some(t));
        assert_eq!(empirical_coverage(&[full(0), full(1)]).unwrap(), 1.0);
        let one = |t| predict_set(&[0.9, 0.1], &cal(0.5), "x", Some(t));
        assert_eq!(empirical_coverage(&[one(0), one(0), one(1), one(0)]).unwrap(), 0.75);
        assert!(empirical_coverage(&[predict_set(&[1.0], &cal(0.5), "x", None)]).is_err());
    }

    #[test]
    fn histogram_cases() {
        let mut meta = HashMap::new();
        meta.insert("a".to_string(), DemographicMetadata::default());
        meta.insert("b".to_string(), DemographicMetadata::default());
        let sets = vec![
            predict_set(&[0.9, 0.1], &cal(0.5), "a", Some(0)),
            predict_set(&[0.9, 0.1], &cal(0.5), "b", Some(0)),
        ];
        let h = set_size_histogram(&sets, &meta, Axis::All).unwrap();
        assert_eq!(h, BTreeMap::from([("all".to_string(), BTreeMap::from([(1, 2)]))]));
        assert!(set_size_histogram(&[], &meta, Axis::Sex).unwrap().is_empty());
    }

    #[test]
    fn threshold_serializes_infinity() {
        let s = serde_json::to_string(&cal(f64::INFINITY)).unwrap();
        assert!(s.contains("\"+inf\""), "{s}");
        let back: CalibrationResult = serde_json::from_str(&s).unwrap();
        assert!(back.q_hat.is_infinite());
        let back: CalibrationResult = serde_json::from_str(&serde_json::to_string(&cal(0.25)).unwrap()).unwrap();
        assert_eq!(back.q_hat, 0.25);
    }

    #[test]
    fn export_line_format() {
        let s = predict_set(&[0.7, 0.2, 0.1], &cal(0.85), "img_1", Some(1));
        assert_eq!(
            prediction_set_line(&s),
            r#"{"id": "img_1", "entries": [[0, 0.700000], [1, 0.200000]], "forced": false, "truth": 1, "contains_truth": true}"#
        );
        let back = parse_prediction_set_line(&prediction_set_line(&s)).unwrap();
        assert_eq!(back, s);
    }

    proptest! {
        #[test]
        fn calibrate_is_order_invariant(mut scores in prop::collection::vec(0.0f64..=1.0, 1..40), alpha in 0.01f64..0.99, rot in 0usize..40) {
            let a = calibrate(&scores, alpha).unwrap();
            let r = rot % scores.len();
            scores.rotate_left(r);
            scores.reverse();
            prop_assert_eq!(a, calibrate(&scores, alpha).unwrap());
        }

        #[test]
        fn sets_are_well_formed(raw in prop::collection::vec(0.0f64..1.0, 1..8), q in 0.0f64..=1.0, truth in 0usize..8) {
            let sum: f64 = raw.iter().sum::<f64>() + 1e-9;
            let probs: Vec<f64> = raw.iter().map(|v| (v + 1e-9 / raw.len() as f64) / sum).collect();
            let t = truth % probs.len();
            let s = predict_set(&probs, &cal(q), "p", Some(t));
            prop_assert!(!s.entries.is_empty() && s.size() <= probs.len());
            for w in s.entries.windows(2) {
                prop_assert!(w[0].confidence > w[1].confidence
                    || (w[0].confidence == w[1].confidence && w[0].class < w[1].class));
            }
            if s.truth_rank == Some(1) {
                prop_assert_eq!(s.truth_confidence, Some(s.entries[0].confidence));
            }
        }
    }
}
