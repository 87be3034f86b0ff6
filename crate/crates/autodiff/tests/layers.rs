use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rtgnn_autodiff::{
    finite_difference_check, tape_objective, GradCheckConfig, GradientMap, ParamVars,
    ParameterStore, Result, Tape, Tensor, TensorError, Var,
};

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn store(entries: Vec<(&str, Tensor)>) -> ParameterStore {
    entries.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

fn check<B>(params: &ParameterStore, build: B) -> f64
where
    B: Fn(&mut Tape, &ParamVars) -> Result<Var>,
{
    finite_difference_check(params, tape_objective(build), GradCheckConfig::default())
        .unwrap()
        .max_rel_error
}

/// Weighted sum so that every output element carries a distinct adjoint.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(y).shape().to_vec();
    let w = tape.constant(random_tensor(&mut rng, &shape));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

#[test]
fn delta_kernel_convolution_is_center_crop() {
    let mut tape = Tape::new();
    let input: Vec<f64> = (0..25).map(f64::from).collect();
    let x = tape.constant(Tensor::new(vec![1, 1, 5, 5], input).unwrap());
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let w = tape.constant(Tensor::new(vec![1, 1, 3, 3], k).unwrap());
    let b = tape.constant(Tensor::from_vec(vec![0.0]));
    let y = tape.conv2d(x, w, b).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 3, 3]);
    let expected: Vec<f64> = (1..4)
        .flat_map(|r| (1..4).map(move |c| (r * 5 + c) as f64))
        .collect();
    assert_eq!(tape.value(y).data(), expected.as_slice());
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[4]));
    let y = tape.softmax(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.25; 4]);
}

#[test]
fn max_reduce_over_set() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[vec![1.0, -2.0], vec![0.0, 3.0]]).unwrap());
    let y = tape.segment_max(x, &[0, 0], 1).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 3.0]);
}

#[test]
fn empty_segment_yields_zero() {
    let mut tape = Tape::new();
    let x = tape.parameter(Tensor::from_rows(&[vec![-1.0, -2.0]]).unwrap());
    let y = tape.segment_max(x, &[1], 2).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, -1.0, -2.0]);
}

#[test]
fn shape_errors_name_the_layer() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 3]));
    let w = tape.constant(Tensor::zeros(&[4, 5]));
    let b = tape.constant(Tensor::zeros(&[4]));
    let err = tape.linear(x, w, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.starts_with("linear"), "{msg}");
    assert!(msg.contains('3') && msg.contains('5'), "{msg}");

    let img = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let k = tape.constant(Tensor::zeros(&[3, 1, 3, 3]));
    let kb = tape.constant(Tensor::zeros(&[3]));
    assert!(tape.conv2d(img, k, kb).unwrap_err().to_string().starts_with("conv2d"));
}

#[test]
fn sum_of_parameter_has_unit_gradient() {
    let mut tape = Tape::new();
    let p = tape.parameter(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -4.0]]).unwrap());
    let s = tape.sum(p);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(p).unwrap(), &Tensor::full(&[2, 2], 1.0));
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::new();
    let p = tape.parameter(Tensor::zeros(&[3]));
    assert!(matches!(tape.backward(p), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn cross_entropy_at_its_own_softmax_is_stationary() {
    let mut tape = Tape::new();
    let logits = tape.parameter(Tensor::from_vec(vec![0.3, -1.2, 2.0, 0.0]));
    let probs = tape.softmax(logits).unwrap();
    let target = tape.value(probs).clone();
    let logq = tape.log_softmax(logits).unwrap();
    let loss = tape.cross_entropy(logq, target).unwrap();
    let g = tape.backward(loss).unwrap();
    for v in g.get(logits).unwrap().data() {
        assert!(v.abs() < 1e-15, "{v}");
    }
}

#[test]
fn two_layer_perceptron_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let params = store(vec![
        ("w1", random_tensor(&mut rng, &[4, 3])),
        ("b1", random_tensor(&mut rng, &[4])),
        ("w2", random_tensor(&mut rng, &[1, 4])),
        ("b2", random_tensor(&mut rng, &[1])),
    ]);
    let input = random_tensor(&mut rng, &[5, 3]);
    let err = check(&params, |tape, v| {
        let x = tape.constant(input.clone());
        let h = tape.linear(x, v.get("w1"), v.get("b1"))?;
        let h = tape.leaky_relu(h, 0.01);
        let y = tape.linear(h, v.get("w2"), v.get("b2"))?;
        Ok(tape.sum(y))
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn squared_norm_gradient_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = store(vec![("p", random_tensor(&mut rng, &[3, 4]))]);
    let err = check(&params, |tape, v| {
        let p = v.get("p");
        let sq = tape.mul(p, p)?;
        Ok(tape.sum(sq))
    });
    assert!(err < 1e-8, "{err}");
}

#[test]
fn corrupted_adjoint_is_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = store(vec![("p", random_tensor(&mut rng, &[6]))]);
    let honest = tape_objective(|tape, v| {
        let p = v.get("p");
        let sq = tape.mul(p, p)?;
        Ok(tape.sum(sq))
    });
    let corrupted = |ps: &ParameterStore| -> Result<(f64, GradientMap)> {
        let (value, mut grads) = honest(ps)?;
        for g in grads.values_mut() {
            g.scale(1.1);
            g.data_mut()[0] += 0.5;
        }
        Ok((value, grads))
    };
    let report = finite_difference_check(&params, corrupted, GradCheckConfig::default()).unwrap();
    assert!(report.max_rel_error > 1e-2, "{}", report.max_rel_error);
}

#[test]
fn non_finite_values_are_reported_by_name() {
    let params = store(vec![("bad", Tensor::from_vec(vec![f64::NAN]))]);
    let res = finite_difference_check(
        &params,
        tape_objective(|tape, v| Ok(tape.sum(v.get("bad")))),
        GradCheckConfig::default(),
    );
    assert!(matches!(res, Err(TensorError::NonFinite(ref n)) if n == "bad"));
}

#[test]
fn maxpool_ties_route_to_first_element() {
    let mut tape = Tape::new();
    let x = tape.parameter(Tensor::full(&[1, 1, 2, 2], 1.0));
    let y = tape.maxpool2d(x).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);

    let mut tape = Tape::new();
    let x = tape.parameter(Tensor::from_rows(&[vec![2.0, 5.0], vec![5.0, 0.0]]).unwrap());
    let y = tape.segment_max(x, &[0, 0], 1).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
}

/// Every layer kind, composed with a random weighting of its output.
fn layer_case(kind: &str, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dim = |lo: usize, hi: usize| rng.random_range(lo..=hi);
    let (n, c, h, w, f, k) = (dim(1, 3), dim(1, 3), dim(4, 7), dim(4, 7), dim(1, 3), dim(1, 3));
    let (rows, cols) = (dim(1, 4), dim(2, 5));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    match kind {
        "conv2d" => {
            let params = store(vec![
                ("x", random_tensor(&mut rng, &[n, c, h, w])),
                ("w", random_tensor(&mut rng, &[f, c, k, k])),
                ("b", random_tensor(&mut rng, &[f])),
            ]);
            check(&params, |t, v| {
                let y = t.conv2d(v.get("x"), v.get("w"), v.get("b"))?;
                weighted_sum(t, y, seed)
            })
        }
        "maxpool2d" => {
            let params = store(vec![("x", random_tensor(&mut rng, &[n, c, h, w]))]);
            check(&params, |t, v| {
                let y = t.maxpool2d(v.get("x"))?;
                weighted_sum(t, y, seed)
            })
        }
        "adaptive_maxpool2d" => {
            let params = store(vec![("x", random_tensor(&mut rng, &[n, c, h, w]))]);
            check(&params, |t, v| {
                let y = t.adaptive_maxpool2d(v.get("x"), 1, 2)?;
                weighted_sum(t, y, seed)
            })
        }
        "relu" | "leaky_relu" => {
            let params = store(vec![("x", random_tensor(&mut rng, &[rows, cols]))]);
            check(&params, |t, v| {
                let y = if kind == "relu" {
                    t.relu(v.get("x"))
                } else {
                    t.leaky_relu(v.get("x"), 0.01)
                };
                weighted_sum(t, y, seed)
            })
        }
        "linear" => {
            let params = store(vec![
                ("x", random_tensor(&mut rng, &[rows, cols])),
                ("w", random_tensor(&mut rng, &[3, cols])),
                ("b", random_tensor(&mut rng, &[3])),
            ]);
            check(&params, |t, v| {
                let y = t.linear(v.get("x"), v.get("w"), v.get("b"))?;
                weighted_sum(t, y, seed)
            })
        }
        "concat" => {
            let params = store(vec![
                ("a", random_tensor(&mut rng, &[rows, cols])),
                ("b", random_tensor(&mut rng, &[rows, 2, 2])),
            ]);
            check(&params, |t, v| {
                let y = t.concat_cols(&[v.get("a"), v.get("b")])?;
                let z = t.concat_rows(&[y, y])?;
                let z = t.gather_rows(z, &[0, rows, 0])?;
                weighted_sum(t, z, seed)
            })
        }
        "softmax" | "log_softmax" => {
            let params = store(vec![("x", random_tensor(&mut rng, &[rows, cols]))]);
            check(&params, |t, v| {
                let y = if kind == "softmax" {
                    t.softmax(v.get("x"))?
                } else {
                    t.log_softmax(v.get("x"))?
                };
                weighted_sum(t, y, seed)
            })
        }
        "elementwise_max_reduce" => {
            let params = store(vec![("x", random_tensor(&mut rng, &[rows + 2, cols]))]);
            let segs: Vec<usize> = (0..rows + 2).map(|i| i % 2).collect();
            check(&params, |t, v| {
                let y = t.segment_max(v.get("x"), &segs, 3)?;
                weighted_sum(t, y, seed)
            })
        }
        "override_rows" => {
            let params = store(vec![("x", random_tensor(&mut rng, &[rows + 1, cols]))]);
            let fixed = Tensor::full(&[1, cols], 0.5);
            check(&params, |t, v| {
                let y = t.override_rows(v.get("x"), &[0], &fixed)?;
                weighted_sum(t, y, seed)
            })
        }
        other => panic!("unknown layer {other}"),
    }
}

const LAYERS: &[&str] = &[
    "conv2d",
    "maxpool2d",
    "adaptive_maxpool2d",
    "relu",
    "leaky_relu",
    "linear",
    "concat",
    "softmax",
    "log_softmax",
    "elementwise_max_reduce",
    "override_rows",
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn every_layer_matches_finite_differences(seed in any::<u64>()) {
        for kind in LAYERS {
            let err = layer_case(kind, seed);
            prop_assert!(err < 1e-4, "{} rel err {}", kind, err);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..5,
        cols in 1usize..30,
        scale in 0.1f64..50.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = random_tensor(&mut rng, &[rows, cols]);
        x.scale(scale);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let y = tape.softmax(v).unwrap();
        for r in 0..rows {
            let row = tape.value(y).row(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn max_reduce_is_permutation_invariant(
        rows in 1usize..8,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, &[rows, 4]);
        let mut order: Vec<usize> = (0..rows).collect();
        for i in (1..rows).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut tape = Tape::new();
        let a = tape.constant(x);
        let p = tape.gather_rows(a, &order).unwrap();
        let ra = tape.segment_max(a, &vec![0; rows], 1).unwrap();
        let rp = tape.segment_max(p, &vec![0; rows], 1).unwrap();
        prop_assert_eq!(tape.value(ra), tape.value(rp));
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let x = tape.constant(random_tensor(&mut rng, &[2, 2, 9, 9]));
        let w = tape.parameter(random_tensor(&mut rng, &[3, 2, 3, 3]));
        let b = tape.parameter(random_tensor(&mut rng, &[3]));
        let y = tape.conv2d(x, w, b).unwrap();
        let y = tape.maxpool2d(y).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        (tape.value(s).item(), g.get(w).unwrap().clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(ga, gb);
}
