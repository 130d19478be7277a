//! Classification metrics: AUC, accuracy, sensitivity, specificity, F1,
//! confusion matrices, and fold aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "binary")]
    Binary,
    #[serde(rename = "multi")]
    Multi,
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "binary" => Ok(Task::Binary),
            "multi" => Ok(Task::Multi),
            other => Err(Error::Config(format!("unknown task '{other}'"))),
        }
    }
}

/// One-vs-rest view of a single class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub class: usize,
    pub acc: f64,
    pub sen: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Pair-counting AUC; absent when only one class is present (binary) or
    /// no class has both positives and negatives (multi, macro).
    pub auc: Option<f64>,
    pub acc: f64,
    pub sen: f64,
    pub spe: f64,
    pub f1: f64,
    /// One-vs-rest metrics per class (multi-class tasks).
    pub per_class: Vec<ClassMetrics>,
    /// K x K counts, rows = true class, columns = predicted.
    pub confusion: Vec<Vec<usize>>,
    pub n: usize,
}

impl MetricsReport {
    /// Named scalar metrics, for CSV export.
    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut rows = vec![
            ("auc".to_string(), self.auc.unwrap_or(f64::NAN)),
            ("acc".to_string(), self.acc),
            ("sen".to_string(), self.sen),
            ("spe".to_string(), self.spe),
            ("f1".to_string(), self.f1),
        ];
        for c in &self.per_class {
            rows.push((format!("acc_class{}", c.class), c.acc));
            rows.push((format!("sen_class{}", c.class), c.sen));
        }
        rows
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Pair-counting AUC: the fraction of (positive, negative) pairs ranked
/// correctly, ties worth half. `None` when a class is missing.
pub fn auc_pair_counting(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let mut concordant = 0.0f64;
    let mut pairs = 0usize;
    for (&si, &li) in scores.iter().zip(labels) {
        if li != 1 {
            continue;
        }
        for (&sj, &lj) in scores.iter().zip(labels) {
            if lj != 0 {
                continue;
            }
            pairs += 1;
            if si > sj {
                concordant += 1.0;
            } else if si == sj {
                concordant += 0.5;
            }
        }
    }
    if pairs == 0 {
        None
    } else {
        Some(concordant / pairs as f64)
    }
}

/// Binary metrics from positive-class scores, thresholded at 0.5.
pub fn compute_metrics(scores: &[f64], labels: &[u8]) -> Result<MetricsReport> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::invalid("compute_metrics", "scores/labels length mismatch"));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::invalid("compute_metrics", "binary labels must be 0/1"));
    }
    let preds: Vec<usize> = scores.iter().map(|&s| usize::from(s >= 0.5)).collect();
    let mut confusion = vec![vec![0usize; 2]; 2];
    for (&l, &p) in labels.iter().zip(&preds) {
        confusion[l as usize][p] += 1;
    }
    let (tn, fp, fn_, tp) = (confusion[0][0], confusion[0][1], confusion[1][0], confusion[1][1]);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(MetricsReport {
        auc: auc_pair_counting(scores, labels),
        acc: ratio(tp + tn, labels.len()),
        sen: recall,
        spe: ratio(tn, tn + fp),
        f1,
        per_class: Vec::new(),
        confusion,
        n: labels.len(),
    })
}

/// Multi-class metrics with the one-versus-all strategy: per-class ACC/SEN,
/// macro averages overall, and the K x K confusion matrix. `scores[i][c]` is
/// subject i's score for class c (used for macro AUC).
pub fn multi_metrics(
    preds: &[usize],
    scores: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
) -> Result<MetricsReport> {
    if preds.len() != labels.len() || preds.is_empty() || scores.len() != preds.len() {
        return Err(Error::invalid("multi_metrics", "input length mismatch"));
    }
    if labels.iter().chain(preds).any(|&l| l >= classes) {
        return Err(Error::invalid("multi_metrics", "label out of range"));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&l, &p) in labels.iter().zip(preds) {
        confusion[l][p] += 1;
    }
    let n = labels.len();
    let trace: usize = (0..classes).map(|c| confusion[c][c]).sum();

    let mut per_class = Vec::with_capacity(classes);
    let mut macro_sen = 0.0;
    let mut macro_spe = 0.0;
    let mut macro_f1 = 0.0;
    let mut auc_sum = 0.0;
    let mut auc_defined = 0usize;
    for c in 0..classes {
        let tp = confusion[c][c];
        let fn_: usize = (0..classes).filter(|&j| j != c).map(|j| confusion[c][j]).sum();
        let fp: usize = (0..classes).filter(|&i| i != c).map(|i| confusion[i][c]).sum();
        let tn = n - tp - fn_ - fp;
        let sen = ratio(tp, tp + fn_);
        let spe = ratio(tn, tn + fp);
        let precision = ratio(tp, tp + fp);
        let f1 = if precision + sen == 0.0 {
            0.0
        } else {
            2.0 * precision * sen / (precision + sen)
        };
        per_class.push(ClassMetrics {
            class: c,
            acc: ratio(tp + tn, n),
            sen,
        });
        macro_sen += sen;
        macro_spe += spe;
        macro_f1 += f1;
        let ovr_scores: Vec<f64> = scores.iter().map(|s| s[c]).collect();
        let ovr_labels: Vec<u8> = labels.iter().map(|&l| u8::from(l == c)).collect();
        if let Some(a) = auc_pair_counting(&ovr_scores, &ovr_labels) {
            auc_sum += a;
            auc_defined += 1;
        }
    }
    Ok(MetricsReport {
        auc: (auc_defined > 0).then_some(auc_sum / auc_defined as f64),
        acc: ratio(trace, n),
        sen: macro_sen / classes as f64,
        spe: macro_spe / classes as f64,
        f1: macro_f1 / classes as f64,
        per_class,
        confusion,
        n,
    })
}

/// Mean and (population) standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
