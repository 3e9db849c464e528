//! Evaluation metrics: hierarchical F1, flat multi-label F1, ROC-AUC and
//! multi-run aggregation.
//!
//! All values are raw fractions in `[0, 1]`; conversion to percentage
//! points happens only when reports are rendered.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::label::{Label, LabelSet};
use crate::taxonomy::{Taxonomy, TaxonomyError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("gold has {gold} samples but predictions have {pred}")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("metric needs at least one sample")]
    Empty,
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error("label {0:?} is not in the label space")]
    OutsideLabelSpace(String),
    #[error("ROC-AUC is undefined with {positives} positives and {negatives} negatives")]
    UndefinedAuc { positives: usize, negatives: usize },
    #[error("score at index {0} is not finite")]
    NonFiniteScore(usize),
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HF1Result {
    pub h_precision: f64,
    pub h_recall: f64,
    pub h_f1: f64,
    pub n_samples: usize,
}

/// Micro-averaged hierarchical F1: gold and predicted sets are replaced by
/// their ancestor closures and overlap is counted over the whole corpus.
pub fn hierarchical_f1(
    gold: &[LabelSet],
    pred: &[LabelSet],
    taxonomy: &Taxonomy,
) -> Result<HF1Result, MetricsError> {
    if gold.len() != pred.len() {
        return Err(MetricsError::LengthMismatch { gold: gold.len(), pred: pred.len() });
    }
    if gold.is_empty() {
        return Err(MetricsError::Empty);
    }
    let (mut overlap, mut pred_total, mut gold_total) = (0usize, 0usize, 0usize);
    for (g, p) in gold.iter().zip(pred) {
        let g = taxonomy.expand(g)?;
        let p = taxonomy.expand(p)?;
        overlap += g.intersection_len(&p);
        pred_total += p.len();
        gold_total += g.len();
    }
    let h_precision = ratio(overlap, pred_total);
    let h_recall = ratio(overlap, gold_total);
    Ok(HF1Result {
        h_precision,
        h_recall,
        h_f1: harmonic(h_precision, h_recall),
        n_samples: gold.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    /// False when the label had neither gold nor predicted positives; such
    /// labels report f1 = 0 and are left out of the macro average.
    pub defined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatF1Result {
    pub per_label: BTreeMap<Label, LabelScores>,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
}

pub fn flat_f1(
    gold: &[LabelSet],
    pred: &[LabelSet],
    label_space: &[Label],
) -> Result<FlatF1Result, MetricsError> {
    if gold.len() != pred.len() {
        return Err(MetricsError::LengthMismatch { gold: gold.len(), pred: pred.len() });
    }
    let space: HashSet<&Label> = label_space.iter().collect();
    for set in gold.iter().chain(pred) {
        if let Some(stray) = set.iter().find(|l| !space.contains(l)) {
            return Err(MetricsError::OutsideLabelSpace(stray.to_string()));
        }
    }

    let mut per_label = BTreeMap::new();
    let (mut tp_all, mut fp_all, mut fn_all) = (0usize, 0usize, 0usize);
    for label in label_space {
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for (g, p) in gold.iter().zip(pred) {
            match (g.contains(label), p.contains(label)) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fneg += 1,
                (false, false) => {}
            }
        }
        tp_all += tp;
        fp_all += fp;
        fn_all += fneg;
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fneg);
        per_label.insert(
            label.clone(),
            LabelScores {
                precision,
                recall,
                f1: harmonic(precision, recall),
                support: tp + fneg,
                defined: tp + fp + fneg > 0,
            },
        );
    }

    let defined: Vec<f64> = per_label.values().filter(|s| s.defined).map(|s| s.f1).collect();
    let macro_f1 = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    let micro_precision = ratio(tp_all, tp_all + fp_all);
    let micro_recall = ratio(tp_all, tp_all + fn_all);
    Ok(FlatF1Result {
        per_label,
        micro_precision,
        micro_recall,
        micro_f1: harmonic(micro_precision, micro_recall),
        macro_f1,
    })
}

/// Area under the ROC curve as the normalized Mann-Whitney U statistic.
/// Tied positive/negative pairs count one half.
pub fn roc_auc(scores: &[f64], positives: &[bool]) -> Result<f64, MetricsError> {
    if scores.len() != positives.len() {
        return Err(MetricsError::LengthMismatch { gold: positives.len(), pred: scores.len() });
    }
    if let Some(bad) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricsError::NonFiniteScore(bad));
    }
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = positives.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::UndefinedAuc { positives: n_pos, negatives: n_neg });
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of 1-based midranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * order[i..=j].iter().filter(|&&k| positives[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Per-label ROC-AUC over a multi-label corpus plus the mean over labels
/// where it is defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiLabelAuc {
    pub per_label: BTreeMap<Label, Option<f64>>,
    pub macro_auc: Option<f64>,
}

pub fn macro_roc_auc(
    gold: &[LabelSet],
    scores: &[BTreeMap<Label, f64>],
    label_space: &[Label],
) -> Result<MultiLabelAuc, MetricsError> {
    if gold.len() != scores.len() {
        return Err(MetricsError::LengthMismatch { gold: gold.len(), pred: scores.len() });
    }
    let mut per_label = BTreeMap::new();
    for label in label_space {
        let s: Vec<f64> = scores.iter().map(|m| m.get(label).copied().unwrap_or(0.0)).collect();
        let y: Vec<bool> = gold.iter().map(|g| g.contains(label)).collect();
        let auc = match roc_auc(&s, &y) {
            Ok(v) => Some(v),
            Err(MetricsError::UndefinedAuc { .. }) => None,
            Err(e) => return Err(e),
        };
        per_label.insert(label.clone(), auc);
    }
    let defined: Vec<f64> = per_label.values().flatten().copied().collect();
    let macro_auc = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(MultiLabelAuc { per_label, macro_auc })
}

/// Summary of one metric over repeated runs. `std` is the sample standard
/// deviation (n − 1 denominator), zero for a single run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub mean: f64,
    pub std: f64,
    pub best: f64,
    pub per_run: Vec<f64>,
}

pub fn aggregate_runs(values: &[f64]) -> Result<RunAggregate, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(RunAggregate { mean, std, best, per_run: values.to_vec() })
}

impl RunAggregate {
    /// Same aggregate with every value multiplied by `factor` (e.g. 100 for
    /// percentage points).
    pub fn scaled(&self, factor: f64) -> RunAggregate {
        RunAggregate {
            mean: self.mean * factor,
            std: self.std * factor,
            best: self.best * factor,
            per_run: self.per_run.iter().map(|v| v * factor).collect(),
        }
    }

    /// Table cell in `avg (std) / best` form with one decimal.
    pub fn cell(&self) -> String {
        format!("{:.1} ({:.1}) / {:.1}", self.mean, self.std, self.best)
    }
}
