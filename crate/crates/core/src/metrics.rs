//! Classification metrics and cross-dataset evaluation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backbones::BackboneConfig;
use crate::data::{Dataset, ModalityInput, Sample};
use crate::error::{Error, Result};
use crate::explain::PruneMask;
use crate::model::{ModalityKind, Model};
use crate::scalar::argmax;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Averaging {
    /// AUC and F1 of one class against the rest.
    Binary { positive: usize },
    /// Unweighted mean of one-vs-rest AUC and F1 over classes.
    Macro,
}

impl Averaging {
    /// `Binary { positive: 1 }` for two classes, `Macro` otherwise.
    pub fn for_classes(num_classes: usize) -> Self {
        if num_classes == 2 {
            Averaging::Binary { positive: 1 }
        } else {
            Averaging::Macro
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc: f64,
    /// Absent when the ground truth has a single class.
    pub auc: Option<f64>,
    pub f1: f64,
    pub averaging: Averaging,
    pub samples: usize,
    pub per_class: Vec<ClassMetrics>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half. `None` without both positives and negatives.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    // rank-sum with average ranks over tie groups
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Metrics from per-sample class probabilities and true labels.
pub fn compute_metrics(probs: &[Vec<f64>], labels: &[usize], averaging: Averaging) -> Result<MetricReport> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "need equal, non-zero numbers of predictions and labels (got {} and {})",
            probs.len(),
            labels.len()
        )));
    }
    let c = probs[0].len();
    if c == 0 || probs.iter().any(|p| p.len() != c) {
        return Err(Error::InvalidInput("predictions have inconsistent class counts".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::InvalidInput(format!("label {bad} out of range for {c} classes")));
    }
    if let Averaging::Binary { positive } = averaging {
        if positive >= c {
            return Err(Error::InvalidInput(format!("positive class {positive} out of range")));
        }
    }
    let n = labels.len();
    let pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let acc = pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / n as f64;

    let per_class: Vec<ClassMetrics> = (0..c)
        .map(|k| {
            let tp = pred.iter().zip(labels).filter(|&(&p, &y)| p == k && y == k).count() as f64;
            let predicted = pred.iter().filter(|&&p| p == k).count() as f64;
            let support = labels.iter().filter(|&&y| y == k).count();
            let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
            let recall = if support > 0 { tp / support as f64 } else { 0.0 };
            let scores: Vec<f64> = probs.iter().map(|p| p[k]).collect();
            let positive: Vec<bool> = labels.iter().map(|&y| y == k).collect();
            ClassMetrics {
                class: k,
                support,
                precision,
                recall,
                f1: f1(precision, recall),
                auc: binary_auc(&scores, &positive),
            }
        })
        .collect();

    let mut warnings = Vec::new();
    let distinct = per_class.iter().filter(|m| m.support > 0).count();
    let (auc, f1) = match averaging {
        Averaging::Binary { positive } => (per_class[positive].auc, per_class[positive].f1),
        Averaging::Macro => {
            let aucs: Vec<f64> = per_class.iter().filter_map(|m| m.auc).collect();
            if distinct > 1 && aucs.len() < c {
                warnings.push(format!(
                    "AUC averaged over {} of {c} classes; the others are absent from the labels",
                    aucs.len()
                ));
            }
            let auc = (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64);
            (auc, per_class.iter().map(|m| m.f1).sum::<f64>() / c as f64)
        }
    };
    if distinct <= 1 {
        let msg = "ground truth contains a single class; AUC is undefined".to_string();
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok(MetricReport {
        acc,
        auc: if distinct > 1 { auc } else { None },
        f1,
        averaging,
        samples: n,
        per_class,
        warnings,
    })
}

/// Class probabilities of `model` for every sample.
pub fn predict_all(model: &Model<f32>, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
    samples
        .iter()
        .map(|s| {
            let x = model.gather_inputs(&s.modalities)?;
            let p = model.predict(&x)?;
            Ok(p.probabilities.iter().map(|&v| v as f64).collect())
        })
        .collect()
}

pub fn evaluate(model: &Model<f32>, samples: &[Sample]) -> Result<MetricReport> {
    let probs = predict_all(model, samples)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    compute_metrics(&probs, &labels, Averaging::for_classes(model.num_classes()))
}

/// Lists every modality whose input layout the model cannot consume.
pub fn check_compatibility(model: &Model<f32>, inputs: &[ModalityInput], num_classes: usize) -> Result<()> {
    let mut problems = Vec::new();
    if num_classes != model.num_classes() {
        problems.push(format!(
            "model predicts {} classes, dataset has {num_classes}",
            model.num_classes()
        ));
    }
    for b in &model.config().branches {
        let name = &b.modality.name;
        let Some(input) = inputs.iter().find(|i| &i.name == name) else {
            problems.push(format!("{name}: missing from dataset"));
            continue;
        };
        let expected = match (&b.backbone, b.modality.kind) {
            (BackboneConfig::Spatiotemporal { in_channels, .. }, ModalityKind::Spatiotemporal) => {
                format!("[T, H, W, {in_channels}]")
            }
            (BackboneConfig::Sequential { input_dim }, ModalityKind::Sequential) => format!("[T, {input_dim}]"),
            _ => format!("{:?} input", b.modality.kind),
        };
        let ok = input.kind == b.modality.kind
            && match &b.backbone {
                BackboneConfig::Spatiotemporal { in_channels, .. } => {
                    input.shape.len() == 4 && input.shape[3] == *in_channels
                }
                BackboneConfig::Sequential { input_dim } => input.shape.len() == 2 && input.shape[1] == *input_dim,
            };
        if !ok {
            problems.push(format!(
                "{name}: model expects {expected} ({:?}), dataset provides {:?} ({:?})",
                b.modality.kind, input.shape, input.kind
            ));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("modality mismatch: {}", problems.join("; "))))
    }
}

/// Metrics of `model` (optionally pruned) on another dataset.
pub fn cross_dataset_eval(model: &Model<f32>, dataset: &Dataset, mask: Option<&PruneMask>) -> Result<MetricReport> {
    check_compatibility(model, &dataset.spec().modalities, dataset.spec().num_classes)?;
    match mask {
        Some(m) => evaluate(&model.pruned(m)?, &dataset.samples),
        None => evaluate(model, &dataset.samples),
    }
}

/// One row of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub model: String,
    pub dataset: String,
    pub report: MetricReport,
}

/// `model,dataset,acc,auc,f1` rows; absent AUC is left empty.
pub fn metrics_table_csv(rows: &[TableRow]) -> String {
    let mut out = String::from("model,dataset,acc,auc,f1\n");
    for r in rows {
        let auc = r.report.auc.map(|a| format!("{a:.4}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{:.4},{},{:.4}",
            r.model, r.dataset, r.report.acc, auc, r.report.f1
        );
    }
    out
}
