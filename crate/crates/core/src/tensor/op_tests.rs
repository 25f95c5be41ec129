//! Op-level examples and finite-difference checks.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Weighted-sum loss makes every output coordinate matter with a distinct weight.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let w = random(tape.shape(y), seed ^ 0xABCD);
    let wv = tape.constant(w);
    let p = tape.mul(y, wv).unwrap();
    tape.sum(p).unwrap()
}

/// Central finite differences against the tape's analytic gradients;
/// returns the max relative error over all input coordinates.
fn fd_check(inputs: &[Tensor<f64>], build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let h = 1e-5;
    let eval = |xs: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let loss = build(&mut tape, &vars);
        (tape, vars, loss)
    };
    let (tape, vars, loss) = eval(inputs);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        for i in 0..x.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let (tp, _, lp) = eval(&plus);
            let (tm, _, lm) = eval(&minus);
            let numeric = (tp.value(lp).data()[0] - tm.value(lm).data()[0]) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn matmul_identity_and_scalar() {
    let mut tape = Tape::new();
    let eye = tape.constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
    let b = random(&[3, 2], 1);
    let bv = tape.constant(b.clone());
    let c = tape.matmul(eye, bv).unwrap();
    assert_eq!(tape.value(c), &b);

    let a = tape.constant(t(&[1, 1], &[2.0]));
    let b = tape.constant(t(&[1, 1], &[3.0]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[6.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 2]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let err = fd_check(&[random(&[4, 5], 2), random(&[5, 3], 3)], |tape, v| {
        let c = tape.matmul(v[0], v[1]).unwrap();
        weighted_sum(tape, c, 4)
    });
    assert!(err < 1e-6, "max rel err {err}");
}

#[test]
fn conv_pointwise_identity_kernel_is_identity() {
    let mut tape = Tape::new();
    let x = random(&[2, 3, 4, 4], 5);
    let mut k = Tensor::zeros(&[3, 3, 1, 1]);
    for c in 0..3 {
        k.data_mut()[c * 3 + c] = 1.0;
    }
    let xv = tape.constant(x.clone());
    let kv = tape.constant(k);
    let y = tape.conv2d(xv, kv, Conv2dConfig::POINTWISE).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn conv_same_on_constant_input_counts_taps() {
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::full(&[1, 1, 4, 4], 1.0));
    let kv = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = tape.conv2d(xv, kv, Conv2dConfig::SAME).unwrap();
    let y = tape.value(y);
    assert_eq!(y.shape(), &[1, 1, 4, 4]);
    // direct summation: count in-bounds taps per output location
    for r in 0..4 {
        for c in 0..4 {
            let rows = (r as i32 - 1..=r as i32 + 1).filter(|&i| (0..4).contains(&i)).count();
            let cols = (c as i32 - 1..=c as i32 + 1).filter(|&i| (0..4).contains(&i)).count();
            assert_eq!(y.at(&[0, 0, r, c]), (rows * cols) as f64);
        }
    }
    assert_eq!(y.at(&[0, 0, 1, 1]), 9.0);
    assert_eq!(y.at(&[0, 0, 0, 1]), 6.0);
    assert_eq!(y.at(&[0, 0, 0, 0]), 4.0);
}

#[test]
fn conv_rejects_unsupported_geometry() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
    let k = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
    let err = tape.conv2d(x, k, Conv2dConfig { padding: 0, stride: 1 }).unwrap_err();
    assert!(matches!(err, TensorError::Config { .. }));
    let k5 = tape.constant(Tensor::zeros(&[1, 1, 5, 5]));
    assert!(tape.conv2d(x, k5, Conv2dConfig { padding: 2, stride: 1 }).is_err());
}

#[test]
fn conv_gradients_match_finite_differences() {
    for (k, cfg) in [(3, Conv2dConfig::SAME), (1, Conv2dConfig::POINTWISE)] {
        let err = fd_check(&[random(&[2, 2, 3, 4], 6), random(&[3, 2, k, k], 7)], |tape, v| {
            let y = tape.conv2d(v[0], v[1], cfg).unwrap();
            weighted_sum(tape, y, 8)
        });
        assert!(err < 1e-6, "{k}x{k}: max rel err {err}");
    }
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3, 3], &[0.0, 0.0, 0.0, 1000.0, 0.0, -1000.0, 1.0, 2.0, 3.0]));
    let y = tape.softmax_rows(x).unwrap();
    let y = tape.value(y).data().to_vec();
    assert!((y[0] - 1.0 / 3.0).abs() < 1e-15);
    assert!((y[3] - 1.0).abs() < 1e-12 && y[4].abs() < 1e-12);
    // e^k / (e + e^2 + e^3)
    let z: f64 = (1..=3).map(|k| (k as f64).exp()).sum();
    let expect: Vec<f64> = (1..=3).map(|k| (k as f64).exp() / z).collect();
    for (got, want) in y[6..].iter().zip(&expect) {
        assert!((got - want).abs() < 1e-12);
    }
    for (got, want) in y[6..].iter().zip([0.09003, 0.24473, 0.66524]) {
        assert!((got - want).abs() < 1e-5);
    }

    let x = tape.constant(t(&[1, 2], &[0.0, 0.0]));
    let y = tape.softmax_rows(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let r = tape.relu(x).unwrap();
    assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
    let z = tape.constant(t(&[1], &[0.0]));
    let th = tape.tanh(z).unwrap();
    let sg = tape.sigmoid(z).unwrap();
    assert_eq!(tape.value(th).data(), &[0.0]);
    assert_eq!(tape.value(sg).data(), &[0.5]);
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]), true);
    let r = tape.relu(x).unwrap();
    let s = tape.sum(r).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn global_average_pool_examples() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::full(&[3, 2, 2], 1.75));
    let p = tape.mean_trailing(c, 3).unwrap();
    assert_eq!(tape.value(p).data(), &[1.75]);
    assert!(tape.value(p).shape().is_empty());

    let x = tape.leaf(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
    let p = tape.mean_trailing(x, 3).unwrap();
    assert_eq!(tape.value(p).data(), &[2.5]);
    let g = tape.backward(p).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.25; 4]);

    let err = fd_check(&[random(&[2, 3, 2], 9)], |tape, v| {
        let p = tape.mean_trailing(v[0], 3).unwrap();
        let q = tape.tanh(p).unwrap();
        tape.sum(q).unwrap()
    });
    assert!(err < 1e-6, "{err}");
}

fn channel_moments(y: &Tensor<f64>) -> Vec<(f64, f64)> {
    let s = y.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    (0..c)
        .map(|ch| {
            let vals: Vec<f64> = (0..n)
                .flat_map(|b| y.data()[(b * c + ch) * plane..][..plane].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            (m, v)
        })
        .collect()
}

#[test]
fn batch_norm_training_standardizes_channels() {
    let mut tape = Tape::new();
    let mut x = random(&[4, 3, 2, 2], 10);
    x.data_mut().iter_mut().for_each(|v| *v = *v * 5.0 + 3.0);
    let xv = tape.constant(x);
    let g = tape.constant(Tensor::full(&[3], 1.0));
    let b = tape.constant(Tensor::zeros(&[3]));
    let (y, _, _) = tape.batch_norm_train(xv, g, b, 1e-5).unwrap();
    for (m, v) in channel_moments(tape.value(y)) {
        assert!(m.abs() < 1e-5);
        assert!((v - 1.0).abs() < 1e-4, "{v}");
    }

    let g2 = tape.constant(Tensor::full(&[3], 2.0));
    let b2 = tape.constant(Tensor::full(&[3], 1.0));
    let (y, _, _) = tape.batch_norm_train(xv, g2, b2, 1e-5).unwrap();
    for (m, v) in channel_moments(tape.value(y)) {
        assert!((m - 1.0).abs() < 1e-5);
        assert!((v.sqrt() - 2.0).abs() < 1e-4);
    }
}

#[test]
fn batch_norm_eval_with_unit_stats_is_identity() {
    let mut tape = Tape::new();
    let x = random(&[2, 2, 3, 3], 11);
    let xv = tape.constant(x.clone());
    let g = tape.constant(Tensor::full(&[2], 1.0));
    let b = tape.constant(Tensor::zeros(&[2]));
    let y = tape.batch_norm_eval(xv, g, b, &[0.0, 0.0], &[1.0, 1.0], 1e-5).unwrap();
    assert!(tape.value(y).max_abs_diff(&x) < 1e-5);
}

#[test]
fn batch_norm_rejects_single_element_statistics() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 1, 1]));
    let g = tape.constant(Tensor::full(&[2], 1.0));
    let b = tape.constant(Tensor::zeros(&[2]));
    assert!(matches!(
        tape.batch_norm_train(x, g, b, 1e-5),
        Err(TensorError::DegenerateStats { count: 1 })
    ));
}

#[test]
fn batch_norm_gradients_match_finite_differences() {
    let inputs = [random(&[3, 2, 2, 2], 12), random(&[2], 13), random(&[2], 14)];
    let err = fd_check(&inputs, |tape, v| {
        let (y, _, _) = tape.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap();
        weighted_sum(tape, y, 15)
    });
    assert!(err < 1e-4, "train {err}");
    let err = fd_check(&inputs, |tape, v| {
        let y = tape.batch_norm_eval(v[0], v[1], v[2], &[0.3, -0.2], &[1.5, 0.7], 1e-5).unwrap();
        weighted_sum(tape, y, 16)
    });
    assert!(err < 1e-6, "eval {err}");
}

#[test]
fn backward_basic_cases() {
    let mut tape = Tape::new();
    let x = tape.leaf(random(&[2, 3, 2], 17), true);
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));

    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);

    assert!(matches!(tape.backward(sq), Err(TensorError::NotScalar { .. })));
}

#[test]
fn remaining_ops_match_finite_differences() {
    let x3 = random(&[2, 3, 4], 18);
    let checks: Vec<(&str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>)> = vec![
        (
            "bmm",
            vec![random(&[2, 3, 4], 19), random(&[2, 4, 2], 20)],
            Box::new(|t, v| {
                let y = t.bmm(v[0], v[1]).unwrap();
                weighted_sum(t, y, 1)
            }),
        ),
        (
            "transpose",
            vec![random(&[3, 4], 21)],
            Box::new(|t, v| {
                let y = t.transpose(v[0]).unwrap();
                weighted_sum(t, y, 2)
            }),
        ),
        (
            "transpose_last2",
            vec![x3.clone()],
            Box::new(|t, v| {
                let y = t.transpose_last2(v[0]).unwrap();
                weighted_sum(t, y, 3)
            }),
        ),
        (
            "softmax",
            vec![x3.clone()],
            Box::new(|t, v| {
                let y = t.softmax_rows(v[0]).unwrap();
                weighted_sum(t, y, 4)
            }),
        ),
        (
            "tanh_sigmoid",
            vec![x3.clone()],
            Box::new(|t, v| {
                let a = t.tanh(v[0]).unwrap();
                let b = t.sigmoid(a).unwrap();
                weighted_sum(t, b, 5)
            }),
        ),
        (
            "pairwise_sum",
            vec![x3.clone()],
            Box::new(|t, v| {
                let y = t.pairwise_sum(v[0]).unwrap();
                weighted_sum(t, y, 6)
            }),
        ),
        (
            "stack",
            vec![random(&[2, 3], 22), random(&[2, 3], 23)],
            Box::new(|t, v| {
                let y = t.stack(&[v[0], v[1]]).unwrap();
                weighted_sum(t, y, 7)
            }),
        ),
        (
            "scale_broadcast",
            vec![random(&[3, 2], 24), random(&[2], 25), random(&[1], 26)],
            Box::new(|t, v| {
                let a = t.scale_broadcast(v[0], v[1]).unwrap();
                let b = t.scale_broadcast(a, v[2]).unwrap();
                weighted_sum(t, b, 8)
            }),
        ),
        (
            "add_row_broadcast",
            vec![random(&[3, 2], 27), random(&[2], 28)],
            Box::new(|t, v| {
                let y = t.add_row_broadcast(v[0], v[1]).unwrap();
                weighted_sum(t, y, 9)
            }),
        ),
        (
            "channel_bias_pool",
            vec![random(&[2, 2, 4, 4], 29), random(&[2], 30)],
            Box::new(|t, v| {
                let y = t.channel_bias(v[0], v[1]).unwrap();
                let p = t.avg_pool2(y).unwrap();
                weighted_sum(t, p, 10)
            }),
        ),
        (
            "mean_axis1",
            vec![x3.clone()],
            Box::new(|t, v| {
                let y = t.mean_axis1(v[0]).unwrap();
                weighted_sum(t, y, 11)
            }),
        ),
        (
            "mean_trailing_reshape_scale",
            vec![x3.clone()],
            Box::new(|t, v| {
                let r = t.reshape(v[0], &[6, 4]).unwrap();
                let y = t.mean_trailing(r, 1).unwrap();
                let y = t.scale(y, -2.5).unwrap();
                weighted_sum(t, y, 12)
            }),
        ),
        (
            "cross_entropy",
            vec![random(&[3, 4], 31)],
            Box::new(|t, v| t.cross_entropy(v[0], &[0, 3, 1]).unwrap()),
        ),
        (
            "binary_sigmoid",
            vec![random(&[2, 3], 32)],
            Box::new(|t, v| {
                let y = Tensor::new(&[2, 3], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
                t.binary_sigmoid(v[0], &y).unwrap()
            }),
        ),
    ];
    for (name, inputs, build) in checks {
        let err = fd_check(&inputs, |t, v| build(t, v));
        assert!(err < 1e-6, "{name}: max rel err {err}");
    }
}

#[test]
fn non_finite_values_are_rejected() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1], &[1e200]));
    let y = tape.mul(x, x);
    assert!(matches!(y, Err(TensorError::NonFinite { op: "mul" })));
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut tape = Tape::new();
        let x = tape.constant(random(&[3, 2, 4, 4], 40));
        let k = tape.constant(random(&[2, 2, 3, 3], 41));
        let y = tape.conv2d(x, k, Conv2dConfig::SAME).unwrap();
        tape.value(y).clone()
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..7, seed in any::<u64>(), scale in 0.1f64..50.0) {
        let mut x = random(&[rows, cols], seed);
        x.data_mut().iter_mut().for_each(|v| *v *= scale);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = tape.softmax_rows(xv).unwrap();
        for row in tape.value(y).data().chunks(cols) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn conv_preserves_spatial_extent(h in 1usize..7, w in 1usize..7, pointwise in any::<bool>()) {
        let (k, cfg) = if pointwise { (1, Conv2dConfig::POINTWISE) } else { (3, Conv2dConfig::SAME) };
        let mut tape = Tape::new();
        let x = tape.constant(random(&[1, 2, h, w], 1));
        let kv = tape.constant(random(&[3, 2, k, k], 2));
        let y = tape.conv2d(x, kv, cfg).unwrap();
        prop_assert_eq!(tape.value(y).shape(), &[1, 3, h, w]);
    }
}
