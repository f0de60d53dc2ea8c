use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

#[test]
fn relu_forward() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::row(vec![-1.0, 0.0, 2.0]));
    let y = t.relu(x).unwrap();
    assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn softmax_of_equal_inputs_is_uniform() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::row(vec![0.0, 0.0]));
    let y = t.softmax(x, 1).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn matmul_forward() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let b = t.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).shape(), &[2, 1]);
    assert_eq!(t.value(c).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_mismatch() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(vec![2, 3]));
    let b = t.constant(Tensor::zeros(vec![2, 3]));
    assert!(matches!(t.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn column_broadcast_is_rejected() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(vec![3, 2]));
    let b = t.constant(Tensor::zeros(vec![3, 1]));
    assert!(t.add(a, b).is_err());
}

#[test]
fn log_and_sqrt_domain_errors() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::row(vec![1.0, -0.5]));
    assert!(matches!(t.log(x), Err(TensorError::Domain { op: "log", index: 1, .. })));
    assert!(matches!(t.sqrt(x), Err(TensorError::Domain { op: "sqrt", .. })));
    let c = t.clamp_min(x, 1e-8).unwrap();
    assert!(t.log(c).is_ok());
}

#[test]
fn grad_of_sum_of_squares() {
    let mut t = Tape::new();
    let x = t.param(Tensor::row(vec![1.0, 2.0, 3.0]));
    let sq = t.square(x).unwrap();
    let loss = t.sum(sq).unwrap();
    let g = t.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn relu_subgradient_convention() {
    for (x, expected) in [(2.0, 1.0), (-1.0, 0.0), (0.0, 0.0)] {
        let mut t = Tape::new();
        let v = t.param(Tensor::scalar(x));
        let y = t.relu(v).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(v).unwrap().item(), expected, "x = {x}");
    }
}

#[test]
fn fan_out_accumulates() {
    let mut t = Tape::new();
    let x = t.param(Tensor::scalar(3.0));
    let y = t.hadamard(x, x).unwrap();
    let z = t.add(y, x).unwrap();
    let g = t.backward(z).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 7.0);
}

#[test]
fn constants_get_no_gradient_slot() {
    let mut t = Tape::new();
    let x = t.param(Tensor::row(vec![1.0, 2.0]));
    let c = t.constant(Tensor::row(vec![3.0, 4.0]));
    let y = t.hadamard(x, c).unwrap();
    let s = t.sum(y).unwrap();
    let g = t.backward(s).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.len(), 1);
}

#[test]
fn backward_rejects_non_scalar_and_foreign_vars() {
    let mut t = Tape::new();
    let x = t.param(Tensor::row(vec![1.0, 2.0]));
    assert!(matches!(t.backward(x), Err(TensorError::NonScalarLoss(_))));
    let mut other = Tape::new();
    let y = other.param(Tensor::scalar(1.0));
    assert!(matches!(t.backward(y), Err(TensorError::DetachedTape)));
    assert!(matches!(t.relu(y), Err(TensorError::DetachedTape)));
}

#[test]
fn l2_norm_of_hadamard_minus_c_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let point = [
            random(&mut rng, &[1, 8], -1.0, 1.0),
            random(&mut rng, &[1, 8], -1.0, 1.0),
            random(&mut rng, &[1, 8], -1.0, 1.0),
        ];
        let err = finite_difference_check(
            |t: &mut Tape, v: &[Var]| -> Result<Var, TensorError> {
                let ab = t.hadamard(v[0], v[1])?;
                let d = t.sub(ab, v[2])?;
                let n = t.l2_norm(d, 1)?;
                t.sum(n)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }
}

#[test]
fn linear_function_has_exact_gradient() {
    let point = [Tensor::row(vec![0.3, -2.0, 7.5])];
    let err = finite_difference_check(|t: &mut Tape, v: &[Var]| t.sum(v[0]), &point, 1e-5).unwrap();
    assert!(err < 1e-9);
}

#[test]
fn finite_difference_rejects_bad_inputs() {
    let point = [Tensor::row(vec![1.0])];
    let bad_step = finite_difference_check(|t: &mut Tape, v: &[Var]| t.sum(v[0]), &point, 0.0);
    assert!(matches!(bad_step, Err(TensorError::BadStep(_))));
    let point = [Tensor::row(vec![1e-6])];
    let r = finite_difference_check(
        |t: &mut Tape, v: &[Var]| {
            let l = t.log(v[0])?;
            let e = t.exp(l)?;
            let e = t.exp(e)?;
            let e = t.scalar_mul(e, 1e308)?;
            t.sum(e)
        },
        &point,
        1e-5,
    );
    assert!(r.is_err());
}

/// Every primitive against central differences on random instances.
#[test]
fn every_primitive_passes_gradient_check() {
    type Case = (&'static str, Vec<Vec<usize>>, f64, f64, fn(&mut Tape, &[Var]) -> Result<Var, TensorError>);
    let cases: Vec<Case> = vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], -1.0, 1.0, |t, v| {
            let y = t.matmul(v[0], v[1])?;
            let y = t.square(y)?;
            t.sum(y)
        }),
        ("add_row", vec![vec![3, 4], vec![1, 4]], -1.0, 1.0, |t, v| {
            let y = t.add(v[0], v[1])?;
            let y = t.square(y)?;
            t.sum(y)
        }),
        ("sub_scalar", vec![vec![3, 4], vec![]], -1.0, 1.0, |t, v| {
            let y = t.sub(v[0], v[1])?;
            let y = t.square(y)?;
            t.mean(y)
        }),
        ("hadamard_row", vec![vec![3, 4], vec![1, 4]], -1.0, 1.0, |t, v| {
            let y = t.hadamard(v[0], v[1])?;
            let y = t.exp(y)?;
            t.sum(y)
        }),
        ("scale_rows", vec![vec![3, 4], vec![3, 1]], -1.0, 1.0, |t, v| {
            let y = t.scale_rows(v[0], v[1])?;
            let y = t.square(y)?;
            t.sum(y)
        }),
        ("softplus_sqrt_log", vec![vec![2, 3]], -2.0, 2.0, |t, v| {
            let y = t.softplus(v[0])?;
            let y = t.sqrt(y)?;
            let y = t.log(y)?;
            let y = t.scalar_mul(y, 3.0)?;
            let y = t.add_scalar(y, 1.0)?;
            t.sum(y)
        }),
        ("relu", vec![vec![2, 5]], -1.0, 1.0, |t, v| {
            let y = t.relu(v[0])?;
            let y = t.square(y)?;
            t.sum(y)
        }),
        ("clamp_min", vec![vec![2, 5]], -1.0, 1.0, |t, v| {
            let y = t.clamp_min(v[0], 0.1)?;
            let y = t.square(y)?;
            t.sum(y)
        }),
        ("softmax_rows", vec![vec![3, 4], vec![3, 4]], -1.0, 1.0, |t, v| {
            let y = t.softmax(v[0], 1)?;
            let y = t.hadamard(y, v[1])?;
            t.sum(y)
        }),
        ("softmax_cols", vec![vec![3, 4], vec![3, 4]], -1.0, 1.0, |t, v| {
            let y = t.softmax(v[0], 0)?;
            let y = t.hadamard(y, v[1])?;
            t.sum(y)
        }),
        ("l2_norm_axes", vec![vec![3, 4]], -1.0, 1.0, |t, v| {
            let a = t.l2_norm(v[0], 0)?;
            let b = t.l2_norm(v[0], 1)?;
            let a = t.sum(a)?;
            let b = t.sum(b)?;
            t.add(a, b)
        }),
        ("sum_axis", vec![vec![3, 4]], -1.0, 1.0, |t, v| {
            let a = t.sum_axis(v[0], 0)?;
            let a = t.square(a)?;
            let b = t.sum_axis(v[0], 1)?;
            let b = t.exp(b)?;
            let a = t.sum(a)?;
            let b = t.sum(b)?;
            t.add(a, b)
        }),
        ("concat_reshape", vec![vec![2, 3], vec![2, 2], vec![1, 5]], -1.0, 1.0, |t, v| {
            let c = t.concat(&[v[0], v[1]], 1)?;
            let c = t.concat(&[c, v[2]], 0)?;
            let c = t.reshape(c, vec![5, 3])?;
            let c = t.square(c)?;
            let w = t.constant(Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap());
            let c = t.hadamard(c, w)?;
            t.sum(c)
        }),
        ("gather_segment", vec![vec![4, 3]], -1.0, 1.0, |t, v| {
            let g = t.gather_rows(v[0], &[0, 2, 2, 3, 1])?;
            let s = t.segment_softmax(g, &[0, 0, 1, 1, 1], 2)?;
            let y = t.hadamard(s, g)?;
            let y = t.segment_sum(y, &[1, 0, 1, 0, 0], 2)?;
            let y = t.square(y)?;
            t.sum(y)
        }),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for (name, shapes, lo, hi, f) in cases {
        for _ in 0..20 {
            let point: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s, lo, hi)).collect();
            let err = finite_difference_check(f, &point, 1e-5).unwrap();
            assert!(err < 1e-4, "{name}: rel err {err}");
        }
    }
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut t = Tape::new();
        let x = t.param(Tensor::row(vec![0.1, -0.7, 1.3]));
        let w = t.param(Tensor::from_rows(&[vec![0.2], vec![0.5], vec![-0.4]]).unwrap());
        let y = t.matmul(x, w).unwrap();
        let y = t.softplus(y).unwrap();
        let l = t.sum(y).unwrap();
        let g = t.backward(l).unwrap();
        (t.value(l).item(), g.get(x).unwrap().clone(), g.get(w).unwrap().clone())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}

#[test]
fn op_counts_track_recorded_kinds() {
    let mut t = Tape::new();
    let x = t.param(Tensor::row(vec![1.0, 2.0]));
    let y = t.relu(x).unwrap();
    let _ = t.relu(y).unwrap();
    let counts = t.op_counts();
    assert_eq!(counts["relu"], 2);
    assert_eq!(counts["leaf"], 1);
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(xs in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(xs));
        let s = t.softmax(x, 1).unwrap();
        let v = t.value(s);
        prop_assert!(v.data().iter().all(|&p| p >= 0.0));
        prop_assert!((v.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clamp_min_floor_and_gradient(xs in prop::collection::vec(-2.0f64..2.0, 1..10), lo in -1.0f64..1.0) {
        let mut t = Tape::new();
        let x = t.param(Tensor::row(xs.clone()));
        let c = t.clamp_min(x, lo).unwrap();
        prop_assert!(t.value(c).data().iter().all(|&v| v >= lo));
        let s = t.sum(c).unwrap();
        let g = t.backward(s).unwrap();
        for (gx, x) in g.get(x).unwrap().data().iter().zip(&xs) {
            prop_assert_eq!(*gx, if *x > lo { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn segment_softmax_groups_sum_to_one(xs in prop::collection::vec(-5.0f64..5.0, 6)) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::column(xs));
        let seg = [0, 1, 0, 2, 1, 0];
        let s = t.segment_softmax(x, &seg, 3).unwrap();
        let total = t.segment_sum(s, &seg, 3).unwrap();
        for v in t.value(total).data() {
            prop_assert!((v - 1.0).abs() < 1e-12);
        }
    }
}
