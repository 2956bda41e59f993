//! Loss, optimization, data splitting, the training loop and metrics.
//!
//! Every weekly graph is an independent sample over the shared student
//! universe. A sample's labels are the weekly grades (A→0, B→1, C→2) and a
//! split assigns each labeled (week, student) cell to exactly one of
//! train/val/test.

mod metrics;
mod optim;

use std::collections::BTreeMap;
use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Tape, Tensor};
use crate::model::{ClgtModel, Dropout, ForwardOptions, GraphInput, ModelError};

pub use metrics::{aggregate_final, compute_metrics, roc_auc, Averaging, ClassMetrics, Metrics};
pub use optim::{adam_step, AdamState, ReduceOnPlateau, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("split ratios {0}")]
    BadRatios(String),
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("no cells selected by the mask")]
    EmptyMask,
    #[error("masked vertex {vertex} of sample {sample} has no label")]
    MissingLabel { sample: usize, vertex: usize },
    #[error("degenerate class set: {0}")]
    DegenerateClass(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(TrainError::BadRatios(format!("must be non-negative, got {parts:?}")));
        }
        let total: f64 = parts.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(TrainError::BadRatios(format!("must sum to 1, got {total}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub decay_factor: f64,
    pub patience: usize,
    pub stop_lr: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub split: SplitRatios,
    /// Weight each cell's loss by the inverse frequency of its class in the
    /// training split.
    pub class_weighting: bool,
    pub averaging: Averaging,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 1e-3,
            decay_factor: 0.5,
            patience: 5,
            stop_lr: 1e-6,
            max_epochs: 200,
            seed: 0,
            split: SplitRatios::default(),
            class_weighting: false,
            averaging: Averaging::Macro,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::BadConfig(m));
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad(format!("initial_lr must be positive, got {}", self.initial_lr));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return bad(format!("decay_factor must lie in (0, 1), got {}", self.decay_factor));
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if !(self.stop_lr < self.initial_lr) {
            return bad(format!(
                "stop_lr {} must be below initial_lr {}",
                self.stop_lr, self.initial_lr
            ));
        }
        self.split.validate()
    }

    pub fn schedule(&self) -> ReduceOnPlateau {
        ReduceOnPlateau::new(self.initial_lr, self.decay_factor, self.patience, self.stop_lr)
    }
}

/// One weekly graph with its per-vertex labels.
#[derive(Debug, Clone)]
pub struct Sample {
    pub week: u32,
    pub input: GraphInput,
    /// Grade index per vertex; `None` for unlabeled cells.
    pub labels: Vec<Option<usize>>,
    /// Team index per vertex, used for stratification.
    pub teams: Vec<usize>,
}

impl Sample {
    pub fn num_vertices(&self) -> usize {
        self.input.num_nodes
    }
}

/// Per-sample, per-vertex membership flags.
pub type Mask = Vec<Vec<bool>>;

#[derive(Debug, Clone, PartialEq)]
pub struct SplitMasks {
    pub train: Mask,
    pub val: Mask,
    pub test: Mask,
}

pub fn mask_count(mask: &Mask) -> usize {
    mask.iter().flatten().filter(|b| **b).count()
}

/// A mask selecting every labeled cell.
pub fn full_mask(samples: &[Sample]) -> Mask {
    samples
        .iter()
        .map(|s| s.labels.iter().map(Option::is_some).collect())
        .collect()
}

/// Stratified split of labeled cells by (grade, team).
///
/// Strata are visited in key order and sized by cumulative rounding: after
/// `C` cells have been seen, exactly `round(C·r)` of them are in the part
/// with ratio `r`. Each stratum therefore gets its proportional share ±1
/// and the overall counts are `round(N·r)`. Which cells of a stratum land in
/// which part is decided by a seeded shuffle.
pub fn split_dataset(samples: &[Sample], ratios: SplitRatios, seed: u64) -> Result<SplitMasks> {
    ratios.validate()?;
    let mut strata: BTreeMap<(usize, usize), Vec<(usize, usize)>> = BTreeMap::new();
    for (s, sample) in samples.iter().enumerate() {
        for (v, label) in sample.labels.iter().enumerate() {
            if let Some(grade) = label {
                let team = sample.teams.get(v).copied().unwrap_or(0);
                strata.entry((*grade, team)).or_default().push((s, v));
            }
        }
    }
    let blank: Mask = samples.iter().map(|s| vec![false; s.num_vertices()]).collect();
    let mut masks = SplitMasks {
        train: blank.clone(),
        val: blank.clone(),
        test: blank,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first_cut = ratios.train;
    let second_cut = ratios.train + ratios.val;
    let mut seen = 0usize;
    for cells in strata.values_mut() {
        cells.shuffle(&mut rng);
        let before = seen;
        seen += cells.len();
        let cum = |count: usize, r: f64| ((count as f64 * r).round() as usize).min(count);
        let n_train = cum(seen, first_cut) - cum(before, first_cut);
        let n_train_val = cum(seen, second_cut) - cum(before, second_cut);
        let n_train_val = n_train_val.max(n_train);
        for (k, &(s, v)) in cells.iter().enumerate() {
            let part = if k < n_train {
                &mut masks.train
            } else if k < n_train_val {
                &mut masks.val
            } else {
                &mut masks.test
            };
            part[s][v] = true;
        }
    }
    Ok(masks)
}

/// `(row, class, weight)` cross-entropy targets for one sample's masked
/// cells.
pub fn loss_targets(
    sample_index: usize,
    labels: &[Option<usize>],
    mask: &[bool],
    class_weights: Option<&[f64]>,
) -> Result<Vec<(usize, usize, f64)>> {
    let mut out = Vec::new();
    for (v, selected) in mask.iter().enumerate() {
        if !*selected {
            continue;
        }
        let class = labels
            .get(v)
            .copied()
            .flatten()
            .ok_or(TrainError::MissingLabel {
                sample: sample_index,
                vertex: v,
            })?;
        let w = class_weights.map_or(1.0, |cw| cw.get(class).copied().unwrap_or(0.0));
        out.push((v, class, w));
    }
    Ok(out)
}

/// Weighted mean cross-entropy of `logits` over the masked vertices.
pub fn loss(
    logits: &Tensor,
    labels: &[Option<usize>],
    mask: &[bool],
    class_weights: Option<&[f64]>,
) -> Result<f64> {
    if logits.rows() != labels.len() || mask.len() != labels.len() {
        return Err(TrainError::Shape(format!(
            "logits {:?}, {} labels, mask of {}",
            logits.shape(),
            labels.len(),
            mask.len()
        )));
    }
    let targets = loss_targets(0, labels, mask, class_weights)?;
    if targets.is_empty() {
        return Err(TrainError::EmptyMask);
    }
    let mut tape = Tape::new();
    let x = tape.constant(logits.clone());
    let l = tape.cross_entropy(x, Rc::from(targets))?;
    Ok(tape.value(l).data()[0])
}

/// `w_c = N / (K · n_c)` over the `K` classes present in `mask`; absent
/// classes get 0.
pub fn inverse_frequency_weights(samples: &[Sample], mask: &Mask, classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    for (sample, m) in samples.iter().zip(mask) {
        for (label, selected) in sample.labels.iter().zip(m) {
            if let (Some(c), true) = (label, selected) {
                if *c < classes {
                    counts[*c] += 1;
                }
            }
        }
    }
    let total: usize = counts.iter().sum();
    let present = counts.iter().filter(|c| **c > 0).count();
    counts
        .iter()
        .map(|c| {
            if *c == 0 {
                0.0
            } else {
                total as f64 / (present * c) as f64
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Rate used during this epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    /// `None` when the validation split is empty.
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    LrFloor,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ClgtModel,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were restored; `None` if no epoch ran.
    pub best_epoch: Option<usize>,
    pub stop: StopReason,
    pub final_lr: f64,
}

/// Per-sample Adam steps over the training cells, one pass over the
/// shuffled samples per epoch.
///
/// After each epoch the validation loss (falling back to the epoch's
/// training loss when the validation split is empty) drives the schedule
/// and checkpoint selection. Training stops at `max_epochs` or once the rate
/// reaches `stop_lr`, and the best-validation parameters are restored.
pub fn train_loop(
    mut model: ClgtModel,
    samples: &[Sample],
    masks: &SplitMasks,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_mask_shape(samples, &masks.train)?;
    check_mask_shape(samples, &masks.val)?;
    let train_cells = mask_count(&masks.train);
    if train_cells == 0 {
        return Err(TrainError::EmptyMask);
    }
    let classes = model.config().classes;
    let weights = config
        .class_weighting
        .then(|| inverse_frequency_weights(samples, &masks.train, classes));
    let targets: Vec<Vec<(usize, usize, f64)>> = samples
        .iter()
        .zip(&masks.train)
        .enumerate()
        .map(|(i, (s, m))| loss_targets(i, &s.labels, m, weights.as_deref()))
        .collect::<Result<_>>()?;
    let active: Vec<usize> = (0..samples.len()).filter(|i| !targets[*i].is_empty()).collect();
    let has_val = mask_count(&masks.val) > 0;

    let mut schedule = config.schedule();
    let mut adam = AdamState::new(model.params());
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9E37_79B9_7F4A_7C15);
    let dropout_rate = model.config().dropout;
    let opts = ForwardOptions::default();

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let mut stop = StopReason::MaxEpochs;
    for epoch in 1..=config.max_epochs {
        if schedule.should_stop() {
            stop = StopReason::LrFloor;
            break;
        }
        let lr = schedule.lr;
        let mut order = active.clone();
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut weight_sum = 0.0;
        for &i in &order {
            let mut tape = Tape::new();
            let p = model.register(&mut tape);
            let dropout = (dropout_rate > 0.0).then(|| Dropout {
                rate: dropout_rate,
                rng: &mut dropout_rng,
            });
            let trace = model.record(&mut tape, &p, &samples[i].input, &opts, dropout)?;
            let l = tape.cross_entropy(trace.logits, Rc::from(targets[i].as_slice()))?;
            let cells = targets[i].len() as f64;
            loss_sum += tape.value(l).data()[0] * cells;
            weight_sum += cells;
            let mut grads = tape.backward(l)?;
            let g: Vec<Option<Tensor>> = p.iter().map(|v| grads.take(*v)).collect();
            adam_step(model.params_mut(), &g, &mut adam, lr);
        }
        let train_loss = loss_sum / weight_sum;
        let (val_loss, val_acc) = if has_val {
            let (l, a) = masked_loss_and_accuracy(&model, samples, &masks.val)?;
            (l, Some(a))
        } else {
            (train_loss, None)
        };
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, model.params().to_vec()));
        }
        schedule.observe(val_loss);
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
            val_acc,
        });
        if schedule.should_stop() {
            stop = StopReason::LrFloor;
            break;
        }
    }
    let best_epoch = best.as_ref().map(|b| b.1);
    if let Some((_, _, params)) = best {
        model.params_mut().clone_from_slice(&params);
    }
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        stop,
        final_lr: schedule.lr,
    })
}

fn check_mask_shape(samples: &[Sample], mask: &Mask) -> Result<()> {
    if mask.len() != samples.len() || samples.iter().zip(mask).any(|(s, m)| m.len() != s.num_vertices()) {
        return Err(TrainError::Shape("mask does not match samples".into()));
    }
    Ok(())
}

/// Softmax probabilities per sample. Samples are evaluated in parallel.
pub fn predict(model: &ClgtModel, samples: &[Sample]) -> Result<Vec<Tensor>> {
    samples
        .par_iter()
        .map(|s| Ok(model.forward(&s.input)?.softmax_rows()))
        .collect()
}

/// Unweighted mean cross-entropy and accuracy over the masked cells.
pub fn masked_loss_and_accuracy(model: &ClgtModel, samples: &[Sample], mask: &Mask) -> Result<(f64, f64)> {
    let per_sample: Vec<(f64, usize, usize)> = samples
        .par_iter()
        .zip(mask.par_iter())
        .enumerate()
        .map(|(i, (s, m))| {
            if !m.iter().any(|b| *b) {
                return Ok((0.0, 0, 0));
            }
            let probs = model.forward(&s.input)?.softmax_rows();
            let mut nll = 0.0;
            let (mut n, mut correct) = (0, 0);
            for (v, selected) in m.iter().enumerate() {
                if !*selected {
                    continue;
                }
                let Some(class) = s.labels[v] else {
                    return Err(TrainError::MissingLabel { sample: i, vertex: v });
                };
                let row = probs.row(v);
                nll -= row[class].max(f64::MIN_POSITIVE).ln();
                n += 1;
                if metrics::argmax(row) == class {
                    correct += 1;
                }
            }
            Ok((nll, n, correct))
        })
        .collect::<Result<_>>()?;
    let (nll, n, correct) = per_sample
        .iter()
        .fold((0.0, 0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    if n == 0 {
        return Err(TrainError::EmptyMask);
    }
    Ok((nll / n as f64, correct as f64 / n as f64))
}

/// Metrics over the masked cells, from softmax probabilities.
pub fn evaluate(model: &ClgtModel, samples: &[Sample], mask: &Mask) -> Result<Metrics> {
    check_mask_shape(samples, mask)?;
    let probs = predict(model, samples)?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (i, (s, m)) in samples.iter().zip(mask).enumerate() {
        for (v, selected) in m.iter().enumerate() {
            if !*selected {
                continue;
            }
            let class = s.labels[v].ok_or(TrainError::MissingLabel { sample: i, vertex: v })?;
            scores.push(probs[i].row(v).to_vec());
            labels.push(class);
        }
    }
    compute_metrics(&scores, &labels, model.config().classes)
}

/// Final-grade prediction per vertex by majority vote over the weekly
/// argmax predictions of every sample.
pub fn predict_final(model: &ClgtModel, samples: &[Sample]) -> Result<Vec<Option<usize>>> {
    let probs = predict(model, samples)?;
    let n = samples.iter().map(Sample::num_vertices).max().unwrap_or(0);
    let mut votes: Vec<Vec<(u32, usize)>> = vec![Vec::new(); n];
    for (s, p) in samples.iter().zip(&probs) {
        for (v, class) in p.argmax_rows().into_iter().enumerate() {
            votes[v].push((s.week, class));
        }
    }
    Ok(votes.iter().map(|v| aggregate_final(v)).collect())
}

pub const HISTORY_COLUMNS: [&str; 5] = ["epoch", "lr", "train_loss", "val_loss", "val_acc"];

pub fn write_history_csv(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(HISTORY_COLUMNS)?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.lr.to_string(),
            r.train_loss.to_string(),
            r.val_loss.to_string(),
            r.val_acc.map(|a| a.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(())
}

#[cfg(test)]
mod tests;
