use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(rows, cols, data).unwrap()
}

/// Scalarize by a fixed random projection so every output entry matters.
fn project(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let (r, c) = tape.value(x).shape();
    let w = tape.constant(random(r, c, seed));
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

const EPS: f64 = 1e-5;

#[test]
fn softmax_of_equal_scores_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(3, 1, vec![1.0; 3]).unwrap());
    let y = tape.neighbor_softmax(x, Rc::from(vec![0, 0, 0]), 1).unwrap();
    for v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_normalizes_each_segment_and_column() {
    let mut tape = Tape::new();
    let x = tape.leaf(random(7, 4, 3));
    let seg: Rc<[usize]> = Rc::from(vec![2, 0, 2, 1, 0, 2, 0]);
    let y = tape.neighbor_softmax(x, seg.clone(), 4).unwrap();
    let yv = tape.value(y);
    for s in 0..3 {
        for c in 0..4 {
            let total: f64 = (0..7).filter(|k| seg[*k] == s).map(|k| yv.get(k, c)).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
    assert!(yv.data().iter().all(|v| *v >= 0.0));
}

#[test]
fn cross_entropy_uniform_logits() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(1, 3));
    for class in 0..3 {
        let l = tape.cross_entropy(x, Rc::from(vec![(0, class, 1.0)])).unwrap();
        assert!((tape.value(l).data()[0] - 3f64.ln()).abs() < 1e-12);
    }
    assert!(tape.cross_entropy(x, Rc::from(Vec::new())).is_err());
}

#[test]
fn layer_norm_hand_values() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
    let g = tape.leaf(Tensor::filled(1, 3, 1.0));
    let b = tape.leaf(Tensor::zeros(1, 3));
    let y = tape.layer_norm(x, g, b).unwrap();
    let want = [-1.2247, 0.0, 1.2247];
    for (v, w) in tape.value(y).data().iter().zip(want) {
        assert!((v - w).abs() < 1e-4, "{v} vs {w}");
    }
}

#[test]
fn shape_errors() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(2, 3));
    let b = tape.leaf(Tensor::zeros(2, 2));
    assert!(matches!(tape.add(a, b), Err(DiffError::ShapeMismatch { .. })));
    assert!(matches!(tape.mul(a, b), Err(DiffError::ShapeMismatch { .. })));
    assert!(matches!(tape.matmul(a, a), Err(DiffError::ShapeMismatch { .. })));
    assert!(matches!(
        tape.gather_rows(a, Rc::from(vec![5])),
        Err(DiffError::IndexOutOfRange { .. })
    ));
    assert!(matches!(tape.backward(a), Err(DiffError::NonScalarOutput(_))));
}

#[test]
fn linear_grad_check() {
    let inputs = [random(4, 5, 1), random(5, 3, 2), random(1, 3, 3)];
    let report = grad_check(
        |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            project(t, y, 9)
        },
        &inputs,
        EPS,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn softmax_cross_entropy_grad_check() {
    let seg: Rc<[usize]> = Rc::from(vec![0, 1, 0, 1, 1, 2]);
    let inputs = [random(6, 3, 4), random(6, 3, 5)];
    let report = grad_check(
        |t, v| {
            let a = t.neighbor_softmax(v[0], seg.clone(), 3)?;
            let agg = t.mul(a, v[1])?;
            let h = t.segment_sum(agg, seg.clone(), 3)?;
            t.cross_entropy(h, Rc::from(vec![(0, 2, 1.0), (1, 0, 0.5), (2, 1, 2.0)]))
        },
        &inputs,
        EPS,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn every_op_passes_grad_check() {
    type Case = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>);
    let idx: Rc<[usize]> = Rc::from(vec![2, 0, 0, 1]);
    let cases: Vec<Case> = vec![
        (
            "add",
            vec![random(3, 2, 10), random(3, 2, 11)],
            Box::new(|t, v| {
                let y = t.add(v[0], v[1])?;
                project(t, y, 1)
            }),
        ),
        (
            "mul",
            vec![random(3, 2, 12), random(3, 2, 13)],
            Box::new(|t, v| {
                let y = t.mul(v[0], v[1])?;
                project(t, y, 2)
            }),
        ),
        (
            "scale",
            vec![random(3, 2, 14)],
            Box::new(|t, v| {
                let y = t.scale(v[0], -0.37);
                project(t, y, 3)
            }),
        ),
        (
            "concat_cols",
            vec![random(3, 2, 15), random(3, 4, 16)],
            Box::new(|t, v| {
                let y = t.concat(&[v[0], v[1]], 1)?;
                project(t, y, 4)
            }),
        ),
        (
            "concat_rows",
            vec![random(1, 3, 17), random(2, 3, 18)],
            Box::new(|t, v| {
                let y = t.concat(&[v[0], v[1]], 0)?;
                project(t, y, 5)
            }),
        ),
        (
            "gather_segment",
            vec![random(3, 3, 19)],
            Box::new(move |t, v| {
                let g = t.gather_rows(v[0], idx.clone())?;
                let s = t.segment_sum(g, Rc::from(vec![1, 1, 0, 1]), 2)?;
                project(t, s, 6)
            }),
        ),
        (
            "layer_norm",
            vec![random(4, 5, 20), random(1, 5, 21), random(1, 5, 22)],
            Box::new(|t, v| {
                let y = t.layer_norm(v[0], v[1], v[2])?;
                project(t, y, 7)
            }),
        ),
        (
            // inputs bounded away from zero so no kink is crossed
            "relu",
            vec![Tensor::new(2, 3, vec![0.5, -0.7, 0.9, -0.2, 0.3, -1.1]).unwrap()],
            Box::new(|t, v| {
                let y = t.relu(v[0]);
                project(t, y, 8)
            }),
        ),
    ];
    for (name, inputs, f) in cases {
        let report = grad_check(|t, v| f(t, v), &inputs, EPS).unwrap();
        assert!(report.max_rel_error < 1e-4, "{name}: {}", report.max_rel_error);
    }
}

#[test]
fn fan_out_accumulates_path_gradients() {
    // diamond: x feeds two branches that rejoin
    let inputs = [random(3, 3, 30), random(3, 3, 31)];
    let report = grad_check(
        |t, v| {
            let a = t.matmul(v[0], v[1])?;
            let b = t.mul(v[0], v[0])?;
            let c = t.add(a, b)?;
            let d = t.mul(c, v[0])?;
            project(t, d, 12)
        },
        &inputs,
        EPS,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn constant_function_has_zero_gradient() {
    let inputs = [random(2, 2, 40)];
    let report = grad_check(
        |t, v| {
            let z = t.scale(v[0], 0.0);
            Ok(t.sum(z))
        },
        &inputs,
        EPS,
    )
    .unwrap();
    assert_eq!(report.max_rel_error, 0.0);
    assert!(report.analytic[0].data().iter().all(|g| *g == 0.0));
    assert!(report.numeric[0].data().iter().all(|g| *g == 0.0));
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut t = Tape::new();
        let x = t.leaf(random(5, 4, 50));
        let w = t.leaf(random(4, 4, 51));
        let y = t.matmul(x, w).unwrap();
        let s = t.neighbor_softmax(y, Rc::from(vec![0, 0, 1, 1, 1]), 2).unwrap();
        t.value(s).clone()
    };
    assert_eq!(run().data(), run().data());
}
