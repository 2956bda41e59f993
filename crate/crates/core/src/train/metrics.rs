use serde::{Deserialize, Serialize};

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    #[default]
    Macro,
    Micro,
    Weighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when the class has no positives or no negatives.
    pub auc: Option<f64>,
}

/// Classification metrics, all fractions in `[0, 1]`.
///
/// Classes absent from the evaluated cells are listed in `degenerate` and
/// left out of every macro and weighted average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub acc: f64,
    pub f1_macro: f64,
    pub auc_macro_ovr: f64,
    pub f1_micro: f64,
    pub f1_weighted: f64,
    pub auc_micro_ovr: f64,
    pub auc_weighted_ovr: f64,
    pub per_class: Vec<ClassMetrics>,
    pub degenerate: Vec<usize>,
}

impl Metrics {
    pub fn f1(&self, averaging: Averaging) -> f64 {
        match averaging {
            Averaging::Macro => self.f1_macro,
            Averaging::Micro => self.f1_micro,
            Averaging::Weighted => self.f1_weighted,
        }
    }

    pub fn auc(&self, averaging: Averaging) -> f64 {
        match averaging {
            Averaging::Macro => self.auc_macro_ovr,
            Averaging::Micro => self.auc_micro_ovr,
            Averaging::Weighted => self.auc_weighted_ovr,
        }
    }
}

/// Area under the ROC curve of `scores` against boolean `positive` labels.
///
/// The curve is the exact step ROC: thresholds sweep the distinct scores from
/// high to low, and tied scores move the curve diagonally. Returns `None`
/// when either class is empty.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let p = positive.iter().filter(|b| **b).count();
    let n = positive.len() - p;
    if p == 0 || n == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        let (tp0, fp0) = (tp, fp);
        while k < order.len() && scores[order[k]] == s {
            if positive[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        area += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
    }
    Some(area / (p * n) as f64)
}

/// Metrics from per-cell class scores (rows of `scores`, e.g. softmax
/// probabilities) and true labels.
pub fn compute_metrics(scores: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<Metrics, TrainError> {
    if labels.is_empty() {
        return Err(TrainError::EmptyMask);
    }
    if scores.len() != labels.len() || scores.iter().any(|s| s.len() != classes) {
        return Err(TrainError::Shape(format!(
            "{} score rows for {} labels over {classes} classes",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|l| **l >= classes) {
        return Err(TrainError::Shape(format!("label {bad} out of range for {classes} classes")));
    }
    let n = labels.len();
    let predicted: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
    let correct = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();

    let mut per_class = Vec::with_capacity(classes);
    let mut degenerate = Vec::new();
    for c in 0..classes {
        let support = labels.iter().filter(|l| **l == c).count();
        let tp = (0..n).filter(|i| predicted[*i] == c && labels[*i] == c).count();
        let fp = (0..n).filter(|i| predicted[*i] == c && labels[*i] != c).count();
        let fn_ = support - tp;
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        let col: Vec<f64> = scores.iter().map(|s| s[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|l| *l == c).collect();
        let auc = roc_auc(&col, &pos);
        if support == 0 {
            degenerate.push(c);
        }
        per_class.push(ClassMetrics {
            class: c,
            support,
            precision,
            recall,
            f1,
            auc,
        });
    }

    let live: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.support > 0).collect();
    let with_auc: Vec<(&ClassMetrics, f64)> = live.iter().filter_map(|m| m.auc.map(|a| (*m, a))).collect();
    if with_auc.is_empty() {
        return Err(TrainError::DegenerateClass(format!(
            "only class {:?} present; one-vs-rest AUC is undefined",
            live.iter().map(|m| m.class).collect::<Vec<_>>()
        )));
    }
    let f1_macro = live.iter().map(|m| m.f1).sum::<f64>() / live.len() as f64;
    let f1_weighted = live.iter().map(|m| m.f1 * m.support as f64).sum::<f64>() / n as f64;
    let auc_macro_ovr = with_auc.iter().map(|(_, a)| a).sum::<f64>() / with_auc.len() as f64;
    let auc_support: usize = with_auc.iter().map(|(m, _)| m.support).sum();
    let auc_weighted_ovr =
        with_auc.iter().map(|(m, a)| a * m.support as f64).sum::<f64>() / auc_support as f64;

    let flat_scores: Vec<f64> = scores.iter().flatten().copied().collect();
    let flat_pos: Vec<bool> = labels
        .iter()
        .flat_map(|l| (0..classes).map(move |c| c == *l))
        .collect();
    let auc_micro_ovr = roc_auc(&flat_scores, &flat_pos).unwrap_or(f64::NAN);

    let acc = correct as f64 / n as f64;
    Ok(Metrics {
        n,
        acc,
        f1_macro,
        auc_macro_ovr,
        f1_micro: acc,
        f1_weighted,
        auc_micro_ovr,
        auc_weighted_ovr,
        per_class,
        degenerate,
    })
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Index of the largest entry; the first wins ties.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Majority vote over `(week, class)` predictions. Tied classes are broken
/// toward the one predicted in the latest week. Returns `None` for an empty
/// input.
pub fn aggregate_final(predictions: &[(u32, usize)]) -> Option<usize> {
    let classes = predictions.iter().map(|p| p.1).max()? + 1;
    let mut counts = vec![0usize; classes];
    let mut latest = vec![None::<u32>; classes];
    for &(week, c) in predictions {
        counts[c] += 1;
        latest[c] = latest[c].max(Some(week));
    }
    (0..classes)
        .filter(|c| counts[*c] > 0)
        .max_by_key(|c| (counts[*c], latest[*c]))
}
