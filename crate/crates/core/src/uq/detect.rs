use super::metrics::{aupr, auroc};
use super::scores::{uncertainty_scores, Measure, ScoreSource, ScoreVector};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{Model, Predictions};
use crate::nn::{argmax_rows, csv_err};
use crate::tensor::Tensor;
use std::path::Path;

/// Scores with binary abnormal labels and the resulting metrics.
#[derive(Clone, Debug)]
pub struct DetectionResult {
    pub scores: ScoreVector,
    /// `true` marks an abnormal sample (misclassified or out-of-distribution).
    pub labels: Vec<bool>,
    pub auroc: f64,
    pub aupr: f64,
}

impl DetectionResult {
    pub fn new(scores: ScoreVector, labels: Vec<bool>) -> Result<Self> {
        let auroc = auroc(&scores.values, &labels)?;
        let aupr = aupr(&scores.values, &labels)?;
        Ok(Self {
            scores,
            labels,
            auroc,
            aupr,
        })
    }

    pub fn n_pos(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn n_neg(&self) -> usize {
        self.labels.len() - self.n_pos()
    }

    /// Writes `score,label` rows.
    pub fn write_scores_csv(&self, path: &Path) -> Result<()> {
        write_scores_csv(path, &self.scores.values, &self.labels)
    }

    /// Writes the single `auroc,aupr,n_pos,n_neg` summary row.
    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["auroc", "aupr", "n_pos", "n_neg"]).map_err(csv_err)?;
        w.write_record([
            format!("{:e}", self.auroc),
            format!("{:e}", self.aupr),
            self.n_pos().to_string(),
            self.n_neg().to_string(),
        ])
        .map_err(csv_err)?;
        w.flush()?;
        Ok(())
    }

    /// Reads rows written by [`DetectionResult::write_scores_csv`].
    pub fn read_scores_csv(path: &Path, source: ScoreSource, measure: Measure) -> Result<Self> {
        let (values, labels) = read_scores_csv(path)?;
        Self::new(
            ScoreVector {
                values,
                source,
                measure,
            },
            labels,
        )
    }
}

/// Writes `score,label` rows, `label` being 1 for abnormal samples.
pub fn write_scores_csv(path: &Path, scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["score", "label"]).map_err(csv_err)?;
    for (s, &l) in scores.iter().zip(labels) {
        w.write_record([format!("{:e}", s), (l as u8).to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a `score,label` file back.
pub fn read_scores_csv(path: &Path) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let bad = || Error::Format {
            offset: rec.position().map_or(0, |p| p.byte() as usize),
            message: "expected score,label".into(),
        };
        let s: f64 = rec.get(0).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let l = match rec.get(1) {
            Some("0") => false,
            Some("1") => true,
            _ => return Err(bad()),
        };
        values.push(s);
        labels.push(l);
    }
    Ok((values, labels))
}

fn pick(pred: &Predictions, source: ScoreSource) -> &Tensor {
    match source {
        ScoreSource::Softmax => &pred.softmax,
        ScoreSource::Posterior => &pred.posterior,
    }
}

/// Misclassification detection from precomputed probabilities.
///
/// A sample is abnormal when the argmax of `probs` differs from its label.
pub fn misclassification_from_probs(
    probs: &Tensor,
    labels: &[usize],
    source: ScoreSource,
    measure: Measure,
) -> Result<DetectionResult> {
    let pred = argmax_rows(probs)?;
    if pred.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            pred.len(),
            labels.len()
        )));
    }
    let wrong = pred.iter().zip(labels).map(|(p, y)| p != y).collect();
    DetectionResult::new(uncertainty_scores(probs, measure, source)?, wrong)
}

/// OOD detection from precomputed probabilities; `out_probs` rows are positive.
pub fn ood_from_probs(
    in_probs: &Tensor,
    out_probs: &Tensor,
    source: ScoreSource,
    measure: Measure,
) -> Result<DetectionResult> {
    if in_probs.dims2()?.0 == 0 || out_probs.dims2()?.0 == 0 {
        return Err(Error::Contract("OOD detection needs two non-empty sets".into()));
    }
    let a = uncertainty_scores(in_probs, measure, source)?;
    let b = uncertainty_scores(out_probs, measure, source)?;
    let mut labels = vec![false; a.values.len()];
    labels.resize(a.values.len() + b.values.len(), true);
    let mut values = a.values;
    values.extend(b.values);
    DetectionResult::new(
        ScoreVector {
            values,
            source,
            measure,
        },
        labels,
    )
}

pub fn misclassification_detection(
    model: &Model,
    test: &Batch,
    source: ScoreSource,
    measure: Measure,
) -> Result<DetectionResult> {
    let labels = test
        .labels
        .as_ref()
        .ok_or_else(|| Error::Contract("misclassification detection needs labels".into()))?;
    let pred = model.predict(&test.features)?;
    misclassification_from_probs(pick(&pred, source), labels, source, measure)
}

pub fn ood_detection(
    model: &Model,
    in_set: &Batch,
    out_set: &Batch,
    source: ScoreSource,
    measure: Measure,
) -> Result<DetectionResult> {
    let a = model.predict(&in_set.features)?;
    let b = model.predict(&out_set.features)?;
    ood_from_probs(pick(&a, source), pick(&b, source), source, measure)
}
