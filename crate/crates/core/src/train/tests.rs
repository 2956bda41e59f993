use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{ClgtConfig, EDGE_FEATURE_DIM};

fn tiny_config(node_in: usize) -> ClgtConfig {
    ClgtConfig {
        hidden_dim: 8,
        heads: 2,
        layers: 2,
        node_in_dim: node_in,
        ..ClgtConfig::default()
    }
}

/// 30 vertices in three classes of ten; the class is readable from the node
/// features, and edges are random.
fn separable_sample(seed: u64) -> Sample {
    let n = 30;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut feats = Tensor::zeros(n, 4);
    let mut labels = Vec::new();
    for v in 0..n {
        let c = v % 3;
        feats.set(v, c, 1.0);
        feats.set(v, 3, rng.random_range(-0.1..0.1));
        labels.push(Some(c));
    }
    let edges: Vec<(usize, usize)> = (0..60)
        .map(|_| {
            let s = rng.random_range(0..n);
            (s, (s + rng.random_range(1..n)) % n)
        })
        .collect();
    let mut ef = Tensor::zeros(edges.len(), EDGE_FEATURE_DIM);
    let mut ew = Tensor::zeros(edges.len(), 1);
    for k in 0..edges.len() {
        ef.set(k, k % 3, 1.0);
        ew.set(k, 0, rng.random_range(0.0..1.0));
    }
    Sample {
        week: 1,
        input: GraphInput::new(feats, &edges, ef, ew).unwrap(),
        labels,
        teams: (0..n).map(|v| v / 5).collect(),
    }
}

fn grid_samples(students: usize, weeks: usize, teams: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..weeks)
        .map(|w| Sample {
            week: w as u32 + 1,
            input: GraphInput::new(
                Tensor::zeros(students, 1),
                &[],
                Tensor::zeros(0, EDGE_FEATURE_DIM),
                Tensor::zeros(0, 1),
            )
            .unwrap(),
            labels: (0..students).map(|_| Some(rng.random_range(0..3))).collect(),
            teams: (0..students).map(|s| s % teams).collect(),
        })
        .collect()
}

fn log_softmax(row: &[f64], class: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row[class] - lse
}

#[test]
fn uniform_logits_loss_is_ln3() {
    let logits = Tensor::zeros(4, 3);
    let labels = vec![Some(0), Some(2), Some(1), Some(2)];
    let l = loss(&logits, &labels, &[true; 4], None).unwrap();
    assert!((l - 3f64.ln()).abs() < 1e-12);
}

#[test]
fn confident_correct_logits_loss_near_zero() {
    let mut logits = Tensor::zeros(2, 3);
    logits.set(0, 1, 50.0);
    logits.set(1, 2, 50.0);
    let l = loss(&logits, &[Some(1), Some(2)], &[true, true], None).unwrap();
    assert!(l < 1e-20);
}

#[test]
fn two_vertex_loss_matches_hand_computation() {
    let rows = vec![vec![1.0, 2.0, 0.0], vec![0.5, -1.0, 3.0]];
    let logits = Tensor::from_rows(&rows).unwrap();
    let labels = [Some(0), Some(2)];
    let want = -(log_softmax(&rows[0], 0) + log_softmax(&rows[1], 2)) / 2.0;
    let got = loss(&logits, &labels, &[true, true], None).unwrap();
    assert!((got - want).abs() < 1e-12);

    // class weights (2, 1, 1): weighted mean
    let want_w = -(2.0 * log_softmax(&rows[0], 0) + log_softmax(&rows[1], 2)) / 3.0;
    let got_w = loss(&logits, &labels, &[true, true], Some(&[2.0, 1.0, 1.0])).unwrap();
    assert!((got_w - want_w).abs() < 1e-12);

    // masked-out cell is ignored
    let only_first = loss(&logits, &labels, &[true, false], None).unwrap();
    assert!((only_first + log_softmax(&rows[0], 0)).abs() < 1e-12);
}

#[test]
fn loss_errors() {
    let logits = Tensor::zeros(2, 3);
    assert!(matches!(
        loss(&logits, &[Some(0), Some(1)], &[false, false], None),
        Err(TrainError::EmptyMask)
    ));
    assert!(matches!(
        loss(&logits, &[Some(0), None], &[true, true], None),
        Err(TrainError::MissingLabel { vertex: 1, .. })
    ));
    assert!(matches!(loss(&logits, &[Some(0)], &[true], None), Err(TrainError::Shape(_))));
}

#[test]
fn inverse_frequency_weights_balance_classes() {
    let mut s = grid_samples(6, 1, 1, 0);
    s[0].labels = vec![Some(0), Some(0), Some(0), Some(0), Some(1), Some(1)];
    let w = inverse_frequency_weights(&s, &full_mask(&s), 3);
    // N=6, two classes present
    assert!((w[0] - 6.0 / 8.0).abs() < 1e-15);
    assert!((w[1] - 6.0 / 4.0).abs() < 1e-15);
    assert_eq!(w[2], 0.0);
    assert!((w[0] * 4.0 - w[1] * 2.0).abs() < 1e-12);
}

#[test]
fn adam_first_step_moves_by_lr() {
    for g in [1e-6, 0.3, -7.0, 1e4] {
        let mut p = vec![Tensor::scalar(2.0)];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Some(Tensor::scalar(g))], &mut st, 0.01);
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+ε)
        let step = 2.0 - p[0].data()[0];
        let want = 0.01 * g / (g.abs() + ADAM_EPS);
        assert!((step - want).abs() < 1e-15, "g={g}: {step} vs {want}");
        assert!((step.abs() - 0.01).abs() < 1e-4);
    }
}

#[test]
fn adam_zero_gradient_leaves_params() {
    let mut p = vec![Tensor::new(1, 3, vec![1.0, -2.0, 3.5]).unwrap()];
    let before = p.clone();
    let mut st = AdamState::new(&p);
    for _ in 0..100 {
        adam_step(&mut p, &[Some(Tensor::zeros(1, 3))], &mut st, 0.1);
        adam_step(&mut p, &[None], &mut st, 0.1);
    }
    assert_eq!(p, before);
    assert_eq!(st.t, 200);
}

#[test]
fn adam_converges_on_quadratic_bowl() {
    let mut p = vec![Tensor::scalar(1.0)];
    let mut st = AdamState::new(&p);
    for _ in 0..500 {
        let x = p[0].data()[0];
        adam_step(&mut p, &[Some(Tensor::scalar(2.0 * x))], &mut st, 0.1);
    }
    assert!(p[0].data()[0].abs() < 1e-3, "{}", p[0].data()[0]);
}

#[test]
fn schedule_never_decays_while_improving() {
    let mut s = ReduceOnPlateau::new(1e-3, 0.5, 1, 1e-6);
    for k in 0..100 {
        assert_eq!(s.observe(10.0 - k as f64 * 0.01), 1e-3);
    }
    assert_eq!(s.decays, 0);
}

#[test]
fn schedule_flat_loss_arithmetic() {
    let mut s = ReduceOnPlateau::new(1e-3, 0.5, 2, 1e-6);
    let mut epochs = 0;
    while !s.should_stop() {
        s.observe(1.0);
        epochs += 1;
        assert!(epochs < 1000);
    }
    // 1e-3 · 0.5^9 > 1e-6 ≥ 1e-3 · 0.5^10
    assert!(1e-3 * 0.5f64.powi(9) > 1e-6 && 1e-3 * 0.5f64.powi(10) <= 1e-6);
    assert_eq!(s.decays, 10);
    // the first epoch sets the baseline, then one decay per `patience` epochs
    assert_eq!(epochs, 1 + 10 * 2);
    assert!((s.lr - 1e-3 * 0.5f64.powi(10)).abs() < 1e-18);
}

#[test]
fn schedule_at_floor_stops_immediately() {
    let s = ReduceOnPlateau::new(1e-6, 0.5, 5, 1e-6);
    assert!(s.should_stop());
}

proptest! {
    #[test]
    fn schedule_is_non_increasing(losses in proptest::collection::vec(0.0f64..10.0, 1..200),
                                  patience in 1usize..6) {
        let mut s = ReduceOnPlateau::new(1e-2, 0.5, patience, 1e-6);
        let mut prev = s.lr;
        for l in losses {
            let lr = s.observe(l);
            prop_assert!(lr <= prev);
            prev = lr;
        }
    }
}

#[test]
fn train_config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let bad = [
        TrainConfig { stop_lr: 1e-3, ..TrainConfig::default() },
        TrainConfig { decay_factor: 1.0, ..TrainConfig::default() },
        TrainConfig { patience: 0, ..TrainConfig::default() },
        TrainConfig { initial_lr: 0.0, ..TrainConfig::default() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(TrainError::BadConfig(_))), "{c:?}");
    }
    let ratios = TrainConfig {
        split: SplitRatios { train: 0.5, val: 0.2, test: 0.2 },
        ..TrainConfig::default()
    };
    assert!(matches!(ratios.validate(), Err(TrainError::BadRatios(_))));
}

#[test]
fn split_counts_on_full_course() {
    let samples = grid_samples(75, 16, 11, 3);
    let m = split_dataset(&samples, SplitRatios::default(), 7).unwrap();
    assert_eq!(
        (mask_count(&m.train), mask_count(&m.val), mask_count(&m.test)),
        (720, 240, 240)
    );
}

#[test]
fn split_all_train() {
    let samples = grid_samples(10, 3, 2, 0);
    let m = split_dataset(&samples, SplitRatios { train: 1.0, val: 0.0, test: 0.0 }, 1).unwrap();
    assert_eq!(m.train, full_mask(&samples));
    assert_eq!(mask_count(&m.val) + mask_count(&m.test), 0);
}

fn stratum_counts(samples: &[Sample], mask: &Mask) -> BTreeMap<(usize, usize), usize> {
    let mut out = BTreeMap::new();
    for (s, m) in samples.iter().zip(mask) {
        for v in 0..m.len() {
            if m[v] {
                *out.entry((s.labels[v].unwrap(), s.teams[v])).or_insert(0) += 1;
            }
        }
    }
    out
}

#[test]
fn split_seeds_differ_but_strata_match() {
    let samples = grid_samples(75, 16, 11, 3);
    let a = split_dataset(&samples, SplitRatios::default(), 1).unwrap();
    let b = split_dataset(&samples, SplitRatios::default(), 2).unwrap();
    assert_ne!(a.train, b.train);
    let all = stratum_counts(&samples, &full_mask(&samples));
    for (ma, mb, r) in [(&a.train, &b.train, 0.6), (&a.val, &b.val, 0.2), (&a.test, &b.test, 0.2)] {
        let ca = stratum_counts(&samples, ma);
        let cb = stratum_counts(&samples, mb);
        for (key, total) in &all {
            let x = *ca.get(key).unwrap_or(&0) as f64;
            let y = *cb.get(key).unwrap_or(&0) as f64;
            assert!((x - y).abs() <= 1.0);
            assert!((x - *total as f64 * r).abs() <= 1.5, "{key:?}: {x} of {total}");
        }
    }
}

#[test]
fn split_is_deterministic() {
    let samples = grid_samples(20, 4, 3, 5);
    let a = split_dataset(&samples, SplitRatios::default(), 9).unwrap();
    let b = split_dataset(&samples, SplitRatios::default(), 9).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #[test]
    fn split_partitions_labeled_cells(students in 1usize..30, weeks in 1usize..5,
                                      train in 0.0f64..1.0, frac in 0.0f64..1.0, seed: u64) {
        let mut samples = grid_samples(students, weeks, 3, seed);
        // leave some cells unlabeled
        samples[0].labels[0] = None;
        let val = (1.0 - train) * frac;
        let ratios = SplitRatios { train, val, test: 1.0 - train - val };
        let m = split_dataset(&samples, ratios, seed).unwrap();
        for (i, s) in samples.iter().enumerate() {
            for v in 0..s.num_vertices() {
                let hits = [m.train[i][v], m.val[i][v], m.test[i][v]].iter().filter(|b| **b).count();
                prop_assert_eq!(hits, usize::from(s.labels[v].is_some()));
            }
        }
    }
}

#[test]
fn perfect_predictor_scores_one() {
    let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
    let scores: Vec<Vec<f64>> = labels
        .iter()
        .map(|l| (0..3).map(|c| if c == *l { 0.9 } else { 0.05 }).collect())
        .collect();
    let m = compute_metrics(&scores, &labels, 3).unwrap();
    assert_eq!((m.acc, m.f1_macro, m.auc_macro_ovr), (1.0, 1.0, 1.0));
    assert_eq!((m.f1_micro, m.f1_weighted, m.auc_weighted_ovr), (1.0, 1.0, 1.0));
    assert!(m.degenerate.is_empty());
}

/// Probability that a random positive outscores a random negative, ties
/// counted as one half.
fn pairwise_auc(scores: &[f64], pos: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if pos[i] && !pos[j] {
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

#[test]
fn auc_with_ties_hand_example() {
    // positives {0.8, 0.5}, negatives {0.5, 0.2}: pairs 1 + 1 + 0.5 + 1 of 4
    let auc = roc_auc(&[0.8, 0.5, 0.5, 0.2], &[true, true, false, false]).unwrap();
    assert!((auc - 0.875).abs() < 1e-15);
    assert_eq!(roc_auc(&[0.1, 0.2], &[true, true]), None);
}

proptest! {
    #[test]
    fn auc_matches_pairwise_count(data in proptest::collection::vec((0u8..6, any::<bool>()), 2..60)) {
        let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 5.0).collect();
        let pos: Vec<bool> = data.iter().map(|d| d.1).collect();
        match roc_auc(&scores, &pos) {
            Some(a) => prop_assert!((a - pairwise_auc(&scores, &pos)).abs() < 1e-12),
            None => prop_assert!(pos.iter().all(|p| *p) || pos.iter().all(|p| !*p)),
        }
    }

    #[test]
    fn metrics_are_bounded(rows in proptest::collection::vec(
        (proptest::collection::vec(0.0f64..1.0, 3), 0usize..3), 2..80)) {
        let scores: Vec<Vec<f64>> = rows.iter().map(|r| r.0.clone()).collect();
        let labels: Vec<usize> = rows.iter().map(|r| r.1).collect();
        if let Ok(m) = compute_metrics(&scores, &labels, 3) {
            for x in [m.acc, m.f1_macro, m.auc_macro_ovr, m.f1_weighted, m.auc_weighted_ovr, m.auc_micro_ovr] {
                prop_assert!((0.0..=1.0).contains(&x));
            }
        }
    }
}

#[test]
fn label_independent_scores_give_chance_auc() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 10_000;
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
    let scores: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|x| x / s).collect()
        })
        .collect();
    let m = compute_metrics(&scores, &labels, 3).unwrap();
    assert!((m.auc_macro_ovr - 0.5).abs() < 0.05, "{}", m.auc_macro_ovr);
}

#[test]
fn auc_invariant_under_monotone_transform() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let labels: Vec<usize> = (0..500).map(|_| rng.random_range(0..3)).collect();
    let scores: Vec<Vec<f64>> = labels
        .iter()
        .map(|l| (0..3).map(|c| rng.random::<f64>() + if c == *l { 0.3 } else { 0.0 }).collect())
        .collect();
    let base = compute_metrics(&scores, &labels, 3).unwrap();
    let transforms: [fn(f64) -> f64; 3] = [|x| x.ln(), |x| x * x * x + 2.0 * x, |x| 1.0 / (1.0 + (-5.0 * x).exp())];
    for f in transforms {
        let t: Vec<Vec<f64>> = scores.iter().map(|r| r.iter().map(|x| f(*x)).collect()).collect();
        let m = compute_metrics(&t, &labels, 3).unwrap();
        assert_eq!(m.auc_macro_ovr, base.auc_macro_ovr);
        assert_eq!(m.acc, base.acc);
    }
}

#[test]
fn absent_class_is_flagged_and_excluded() {
    let labels = vec![0, 0, 1, 1];
    let scores = vec![
        vec![0.8, 0.1, 0.1],
        vec![0.6, 0.3, 0.1],
        vec![0.2, 0.7, 0.1],
        vec![0.1, 0.2, 0.7],
    ];
    let m = compute_metrics(&scores, &labels, 3).unwrap();
    assert_eq!(m.degenerate, vec![2]);
    assert_eq!(m.per_class[2].support, 0);
    // class 0: f1 1; class 1: p=1 r=0.5 → f1 2/3
    assert!((m.f1_macro - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    assert!((m.acc - 0.75).abs() < 1e-15);
}

#[test]
fn single_class_has_no_auc() {
    let r = compute_metrics(&vec![vec![0.5, 0.3, 0.2]; 3], &[1, 1, 1], 3);
    assert!(matches!(r, Err(TrainError::DegenerateClass(_))));
    assert!(matches!(compute_metrics(&[], &[], 3), Err(TrainError::EmptyMask)));
}

#[test]
fn vote_identical_weeks() {
    let p: Vec<(u32, usize)> = (1..=16).map(|w| (w, 2)).collect();
    assert_eq!(aggregate_final(&p), Some(2));
    assert_eq!(aggregate_final(&[]), None);
}

#[test]
fn vote_tie_goes_to_later_week() {
    let p: Vec<(u32, usize)> = (1..=16).map(|w| (w, usize::from(w > 8))).collect();
    assert_eq!(aggregate_final(&p), Some(1));
    // order of the input does not matter
    let mut rev = p.clone();
    rev.reverse();
    assert_eq!(aggregate_final(&rev), Some(1));
}

proptest! {
    #[test]
    fn vote_matches_brute_force(classes in proptest::collection::vec(0usize..3, 1..17)) {
        let p: Vec<(u32, usize)> = classes.iter().enumerate().map(|(w, c)| (w as u32 + 1, *c)).collect();
        let counts: Vec<usize> = (0..3).map(|c| classes.iter().filter(|x| **x == c).count()).collect();
        let top = *counts.iter().max().unwrap();
        // among the most frequent classes, the one seen last
        let want = p.iter().rev().find(|(_, c)| counts[*c] == top).unwrap().1;
        prop_assert_eq!(aggregate_final(&p), Some(want));
    }
}

fn separable_masks(samples: &[Sample]) -> SplitMasks {
    let full = full_mask(samples);
    let empty: Mask = full.iter().map(|m| vec![false; m.len()]).collect();
    SplitMasks {
        train: full,
        val: empty.clone(),
        test: empty,
    }
}

#[test]
fn zero_epochs_returns_initial_model() {
    let samples = vec![separable_sample(1)];
    let model = ClgtModel::init(tiny_config(4), 3).unwrap();
    let cfg = TrainConfig {
        max_epochs: 0,
        ..TrainConfig::default()
    };
    let out = train_loop(model.clone(), &samples, &separable_masks(&samples), &cfg).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(out.best_epoch, None);
    assert_eq!(out.model.params(), model.params());
}

#[test]
fn empty_train_split_is_rejected() {
    let samples = vec![separable_sample(1)];
    let mut masks = separable_masks(&samples);
    std::mem::swap(&mut masks.train, &mut masks.test);
    let model = ClgtModel::init(tiny_config(4), 3).unwrap();
    let r = train_loop(model, &samples, &masks, &TrainConfig::default());
    assert!(matches!(r, Err(TrainError::EmptyMask)));
}

#[test]
fn separable_dataset_overfits() {
    let samples = vec![separable_sample(2)];
    let masks = separable_masks(&samples);
    let model = ClgtModel::init(tiny_config(4), 5).unwrap();
    let cfg = TrainConfig {
        initial_lr: 1e-2,
        max_epochs: 500,
        ..TrainConfig::default()
    };
    let out = train_loop(model, &samples, &masks, &cfg).unwrap();
    let m = evaluate(&out.model, &samples, &masks.train).unwrap();
    assert!(m.acc >= 0.99, "train acc {}", m.acc);

    let first: Vec<f64> = out.history.iter().take(11).map(|r| r.train_loss).collect();
    let drops = first.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(drops >= 8, "{first:?}");
}

#[test]
fn training_is_deterministic_and_restores_best() {
    let samples: Vec<Sample> = (0..3)
        .map(|w| Sample {
            week: w + 1,
            ..separable_sample(10 + w as u64)
        })
        .collect();
    let masks = split_dataset(&samples, SplitRatios::default(), 4).unwrap();
    let cfg = TrainConfig {
        initial_lr: 5e-3,
        max_epochs: 25,
        seed: 8,
        ..TrainConfig::default()
    };
    let run = || {
        let model = ClgtModel::init(tiny_config(4), 6).unwrap();
        train_loop(model, &samples, &masks, &cfg).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.params(), b.model.params());

    let best = a.best_epoch.unwrap();
    let best_val = a.history[best - 1].val_loss;
    assert!(a.history.iter().all(|r| r.val_loss >= best_val));
    let (restored, _) = masked_loss_and_accuracy(&a.model, &samples, &masks.val).unwrap();
    assert_eq!(restored, best_val);
    assert!(a.history.windows(2).all(|w| w[1].lr <= w[0].lr));
    assert!(a.history.iter().all(|r| r.val_acc.is_some()));
}

#[test]
fn history_csv_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("history.csv");
    let h = vec![
        EpochRecord { epoch: 1, lr: 1e-3, train_loss: 1.1, val_loss: 1.2, val_acc: Some(0.5) },
        EpochRecord { epoch: 2, lr: 5e-4, train_loss: 1.0, val_loss: 1.0, val_acc: None },
    ];
    write_history_csv(&h, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,lr,train_loss,val_loss,val_acc");
    assert_eq!(lines[1], "1,0.001,1.1,1.2,0.5");
    assert_eq!(lines[2], "2,0.0005,1,1,");
}

#[test]
fn predict_final_votes_across_weeks() {
    let samples: Vec<Sample> = (0..4)
        .map(|w| Sample {
            week: w + 1,
            ..separable_sample(1)
        })
        .collect();
    let model = ClgtModel::init(tiny_config(4), 2).unwrap();
    let fin = predict_final(&model, &samples).unwrap();
    let weekly = predict(&model, &samples).unwrap();
    assert_eq!(fin.len(), 30);
    // identical weeks → the weekly argmax
    assert_eq!(fin, weekly[0].argmax_rows().into_iter().map(Some).collect::<Vec<_>>());
}
