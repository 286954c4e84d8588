//! Segment prediction, patient-level voting and binary clinical metrics.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::datasets::SegmentedDataset;
use crate::prompts::{PromptMode, PromptPool};
use crate::trainer::{class_logits_for, verbalizer_for, Verbalizers};
use crate::ulm::UlmParameters;
use crate::verbalizer::predict_class;
use crate::{Error, Exec, Real, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentPrediction {
    pub patient_id: String,
    pub segment_index: usize,
    pub predicted: usize,
    pub probabilities: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VotingConfig {
    pub rho: f64,
    pub positive_class: usize,
}

impl Default for VotingConfig {
    fn default() -> Self {
        Self {
            rho: 0.5,
            positive_class: 1,
        }
    }
}

impl VotingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho {} must be in [0, 1]", self.rho)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Segment,
    Patient,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Segment => "segment",
            Level::Patient => "patient",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub level: Level,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Metrics that hit a zero denominator and were set to 0.
    pub undefined: Vec<String>,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "level,accuracy,precision,recall,f1,tp,fp,tn,fn";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{},{},{},{}",
            self.level, self.accuracy, self.precision, self.recall, self.f1, self.tp, self.fp, self.tn, self.fn_
        )
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "[{}]", self.level)?;
        writeln!(f, "accuracy = {:.6}", self.accuracy)?;
        writeln!(f, "precision = {:.6}", self.precision)?;
        writeln!(f, "recall = {:.6}", self.recall)?;
        writeln!(f, "f1 = {:.6}", self.f1)?;
        writeln!(f, "tp = {}", self.tp)?;
        writeln!(f, "fp = {}", self.fp)?;
        writeln!(f, "tn = {}", self.tn)?;
        writeln!(f, "fn = {}", self.fn_)?;
        let undefined = if self.undefined.is_empty() {
            "none".to_string()
        } else {
            self.undefined.join(",")
        };
        writeln!(f, "undefined = {undefined}")
    }
}

/// Eval-mode predictions for every segment of `data`, in dataset order.
pub fn predict_segments<F: Real>(
    data: &SegmentedDataset,
    model: &UlmParameters<F>,
    pool: &PromptPool<F>,
    verbalizers: &Verbalizers<F>,
    mode: PromptMode,
    exec: Exec,
) -> Result<Vec<SegmentPrediction>> {
    let vb = verbalizer_for(verbalizers, &data.task)?;
    let logits = class_logits_for(model, pool, vb, data, mode, exec)?;
    Ok(data
        .segments
        .iter()
        .zip(logits)
        .map(|(seg, z)| {
            let (predicted, probs) = predict_class(z.view());
            SegmentPrediction {
                patient_id: seg.units.patient_id.clone(),
                segment_index: seg.units.segment_index,
                predicted,
                probabilities: probs.iter().map(|p| p.as_f64()).collect(),
            }
        })
        .collect())
}

/// 1 if strictly more than `rho · n` segments predict the positive class, else 0.
pub fn vote(preds: &[SegmentPrediction], cfg: &VotingConfig) -> Result<usize> {
    let first = preds
        .first()
        .ok_or_else(|| Error::Invalid("cannot vote over zero segments".into()))?;
    if let Some(other) = preds.iter().find(|p| p.patient_id != first.patient_id) {
        return Err(Error::Invalid(format!(
            "mixed patients in one vote: {} and {}",
            first.patient_id, other.patient_id
        )));
    }
    let positives = preds.iter().filter(|p| p.predicted == cfg.positive_class).count();
    Ok(usize::from(positives as f64 > cfg.rho * preds.len() as f64))
}

/// Binary metrics with `positive_class` as the positive label.
pub fn metrics(pred: &[usize], truth: &[usize], positive_class: usize, level: Level) -> Result<MetricsReport> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension(format!("{} predictions vs {} labels", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::Invalid("no predictions to score".into()));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p == positive_class, t == positive_class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    Ok(metrics_from_counts(tp, fp, tn, fn_, level))
}

pub fn metrics_from_counts(tp: usize, fp: usize, tn: usize, fn_: usize, level: Level) -> MetricsReport {
    let mut undefined = Vec::new();
    let mut ratio = |num: usize, den: usize, name: &str| {
        if den == 0 {
            undefined.push(name.to_string());
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let total = tp + fp + tn + fn_;
    let accuracy = ratio(tp + tn, total, "accuracy");
    let precision = ratio(tp, tp + fp, "precision");
    let recall = ratio(tp, tp + fn_, "recall");
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        undefined.push("f1".into());
        0.0
    };
    MetricsReport {
        level,
        accuracy,
        precision,
        recall,
        f1,
        tp,
        fp,
        tn,
        fn_,
        undefined,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientPrediction {
    pub patient_id: String,
    pub label: usize,
    pub predicted: usize,
    pub n_segments: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub segment: MetricsReport,
    pub patient: MetricsReport,
    pub patients: Vec<PatientPrediction>,
}

impl EvalReport {
    pub fn csv(&self) -> String {
        format!(
            "{}\n{}\n{}\n",
            MetricsReport::CSV_HEADER,
            self.segment.csv_line(),
            self.patient.csv_line()
        )
    }

    pub fn text(&self) -> String {
        format!("{}\n{}", self.segment, self.patient)
    }
}

/// Segment- and patient-level metrics for predictions over `data`.
///
/// A patient voted positive is assigned `positive_class`; otherwise the
/// most frequent non-positive segment prediction (lowest index on ties), or
/// the lowest non-positive class when every segment was positive.
pub fn score(data: &SegmentedDataset, preds: &[SegmentPrediction], voting: &VotingConfig) -> Result<EvalReport> {
    voting.validate()?;
    if preds.len() != data.segments.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} segments",
            preds.len(),
            data.segments.len()
        )));
    }
    let pos = voting.positive_class;
    let n_classes = data.task.classes.len();
    if pos >= n_classes {
        return Err(Error::LabelOutOfRange {
            label: pos,
            classes: n_classes,
        });
    }
    let seg_pred: Vec<usize> = preds.iter().map(|p| p.predicted).collect();
    let segment = metrics(&seg_pred, &data.labels(), pos, Level::Segment)?;

    let mut patients = Vec::new();
    for (pid, info) in &data.patients {
        if info.segments.is_empty() {
            continue;
        }
        let mine: Vec<SegmentPrediction> = info.segments.iter().map(|&i| preds[i].clone()).collect();
        let predicted = if vote(&mine, voting)? == 1 {
            pos
        } else {
            let mut counts = vec![0usize; n_classes];
            mine.iter().filter(|p| p.predicted != pos).for_each(|p| counts[p.predicted] += 1);
            let fallback = (0..n_classes).find(|&c| c != pos).expect("at least two classes");
            (0..n_classes)
                .filter(|&c| c != pos)
                .max_by_key(|&c| (counts[c], std::cmp::Reverse(c)))
                .filter(|&c| counts[c] > 0)
                .unwrap_or(fallback)
        };
        patients.push(PatientPrediction {
            patient_id: pid.clone(),
            label: info.label,
            predicted,
            n_segments: mine.len(),
        });
    }
    let p_pred: Vec<usize> = patients.iter().map(|p| p.predicted).collect();
    let p_true: Vec<usize> = patients.iter().map(|p| p.label).collect();
    let patient = metrics(&p_pred, &p_true, pos, Level::Patient)?;
    Ok(EvalReport {
        segment,
        patient,
        patients,
    })
}

/// Predicts every segment of `data` and scores both levels.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<F: Real>(
    data: &SegmentedDataset,
    model: &UlmParameters<F>,
    pool: &PromptPool<F>,
    verbalizers: &Verbalizers<F>,
    mode: PromptMode,
    voting: &VotingConfig,
    exec: Exec,
) -> Result<EvalReport> {
    let preds = predict_segments(data, model, pool, verbalizers, mode, exec)?;
    score(data, &preds, voting)
}

/// Predicts the most frequent training label (lowest index on ties) for every
/// segment of `data`.
pub fn majority_baseline(train: &SegmentedDataset, data: &SegmentedDataset) -> Vec<SegmentPrediction> {
    let n = train.task.classes.len();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for s in &train.segments {
        *counts.entry(s.label).or_default() += 1;
    }
    let best = (0..n).max_by_key(|c| (counts.get(c).copied().unwrap_or(0), std::cmp::Reverse(*c))).unwrap_or(0);
    let probabilities: Vec<f64> = (0..n).map(|c| if c == best { 1.0 } else { 0.0 }).collect();
    data.segments
        .iter()
        .map(|s| SegmentPrediction {
            patient_id: s.units.patient_id.clone(),
            segment_index: s.units.segment_index,
            predicted: best,
            probabilities: probabilities.clone(),
        })
        .collect()
}
