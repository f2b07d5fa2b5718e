//! Metrics: accuracy, attack success rate, and patch-localization ROC curves.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::AttackResult;
use crate::backbone::FeatureGeometry;
use crate::dataset::LabeledDataset;
use crate::error::{ensure, Error, Result};
use crate::image::PatchMask;
use crate::model::Model;

/// First line of every ROC CSV file.
pub const ROC_CSV_SCHEMA: &str = "# compdef-roc v1";

/// Fraction of positions where `predicted` equals `labels`.
pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    ensure!(!labels.is_empty(), Empty, "no items to score");
    ensure!(predicted.len() == labels.len(), DimensionMismatch, "predictions and labels differ in length");
    let hits = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Predicted labels of `model` on every item of `dataset`.
pub fn predict_all(model: &Model, dataset: &LabeledDataset) -> Result<Vec<usize>> {
    dataset.items().par_iter().map(|it| model.predict(&it.image).map(|p| p.label)).collect()
}

pub fn model_accuracy(model: &Model, dataset: &LabeledDataset) -> Result<f64> {
    let labels: Vec<usize> = dataset.items().iter().map(|it| it.label).collect();
    accuracy(&predict_all(model, dataset)?, &labels)
}

/// One attack run together with the clean prediction that admitted it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackRecord {
    /// Index of the image within the evaluated subset.
    pub image: usize,
    pub label: usize,
    pub clean_label: usize,
    pub result: AttackResult,
}

/// Successes over attacked images. Every record must come from a correctly
/// classified clean image.
pub fn attack_success_rate(records: &[AttackRecord]) -> Result<f64> {
    ensure!(!records.is_empty(), Empty, "no correctly classified images were attacked");
    if let Some(r) = records.iter().find(|r| r.clean_label != r.label) {
        return Err(Error::InvalidArgument(format!(
            "image {} was misclassified when clean ({} != {}) and cannot count towards the success rate",
            r.image, r.clean_label, r.label
        )));
    }
    Ok(records.iter().filter(|r| r.result.success).count() as f64 / records.len() as f64)
}

/// Per feature position, whether at least `overlap` of its receptive field is masked.
pub fn localization_labels(mask: &PatchMask, geometry: &FeatureGeometry, overlap: f64) -> Result<Vec<bool>> {
    ensure!(
        mask.height() == geometry.image_height && mask.width() == geometry.image_width,
        DimensionMismatch,
        "mask is {}x{}, geometry expects {}x{}",
        mask.height(),
        mask.width(),
        geometry.image_height,
        geometry.image_width
    );
    ensure!(overlap > 0.0 && overlap <= 1.0, InvalidArgument, "overlap fraction must lie in (0, 1]");
    let mut out = Vec::with_capacity(geometry.n_positions());
    for r in 0..geometry.map_height {
        for c in 0..geometry.map_width {
            let (r0, c0, r1, c1) = geometry.receptive_field_of(r, c);
            let area = (r1 - r0) * (c1 - c0);
            let hit = (r0..r1).flat_map(|y| (c0..c1).map(move |x| (y, x))).filter(|&(y, x)| mask.get(y, x)).count();
            out.push(hit as f64 >= overlap * area as f64);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Scores `>= threshold` are called positive.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Roc {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RocMode {
    /// One curve over the scores of all images together.
    #[default]
    Pooled,
    /// Mean of per-image curves (images lacking either class are skipped).
    PerImage,
}

/// Threshold sweep over distinct scores (tied scores enter together) with trapezoidal AUC.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Roc> {
    ensure!(scores.len() == labels.len(), DimensionMismatch, "scores and labels differ in length");
    ensure!(scores.iter().all(|s| !s.is_nan()), InvalidArgument, "NaN score");
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    ensure!(n_pos > 0 && n_neg > 0, InvalidArgument, "need at least one positive and one negative label");
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut k = 0;
    while k < idx.len() {
        let s = scores[idx[k]];
        while k < idx.len() && scores[idx[k]] == s {
            if labels[idx[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        let p = RocPoint {
            threshold: s,
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
        };
        let last = points.last().expect("non-empty");
        auc += (p.fpr - last.fpr) * (p.tpr + last.tpr) / 2.0;
        points.push(p);
    }
    Ok(Roc { points, auc })
}

fn tpr_at(points: &[RocPoint], fpr: f64) -> f64 {
    let j = points.partition_point(|p| p.fpr < fpr);
    if j == 0 {
        return points[0].tpr;
    }
    if j == points.len() {
        return points[j - 1].tpr;
    }
    let (a, b) = (points[j - 1], points[j]);
    if b.fpr == a.fpr {
        return b.tpr;
    }
    a.tpr + (b.tpr - a.tpr) * (fpr - a.fpr) / (b.fpr - a.fpr)
}

/// ROC of per-position occlusion scores against ground-truth labels, over many images.
/// In per-image mode the curve is the vertical average on a 101-point FPR grid
/// (thresholds are reported as NaN) and the AUC is the mean per-image AUC.
pub fn localization_roc(scores: &[Vec<f64>], labels: &[Vec<bool>], mode: RocMode) -> Result<Roc> {
    ensure!(scores.len() == labels.len(), DimensionMismatch, "score maps and label maps differ in count");
    for (n, (s, l)) in scores.iter().zip(labels).enumerate() {
        ensure!(s.len() == l.len(), DimensionMismatch, "image {n}: {} scores for {} labels", s.len(), l.len());
    }
    match mode {
        RocMode::Pooled => {
            let s: Vec<f64> = scores.iter().flatten().copied().collect();
            let l: Vec<bool> = labels.iter().flatten().copied().collect();
            roc_curve(&s, &l)
        }
        RocMode::PerImage => {
            let curves: Vec<Roc> = scores
                .iter()
                .zip(labels)
                .filter(|(_, l)| l.iter().any(|&x| x) && l.iter().any(|&x| !x))
                .map(|(s, l)| roc_curve(s, l))
                .collect::<Result<_>>()?;
            ensure!(!curves.is_empty(), InvalidArgument, "no image has both positive and negative positions");
            let points = (0..=100)
                .map(|g| {
                    let fpr = g as f64 / 100.0;
                    let tpr = curves.iter().map(|c| tpr_at(&c.points, fpr)).sum::<f64>() / curves.len() as f64;
                    RocPoint {
                        threshold: f64::NAN,
                        fpr,
                        tpr,
                    }
                })
                .collect();
            let auc = curves.iter().map(|c| c.auc).sum::<f64>() / curves.len() as f64;
            Ok(Roc { points, auc })
        }
    }
}

impl Roc {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{ROC_CSV_SCHEMA}\nthreshold,fpr,tpr\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{}", p.threshold, p.fpr, p.tpr);
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}
