use super::*;
use crate::rng::Rng;

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::seed_from(seed);
    Tensor::from_fn(shape, |_| rng.next_uniform(-1.0, 1.0))
}

/// Random values bounded away from zero, for kinked ops (relu, abs).
fn rand_t_off_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::seed_from(seed);
    Tensor::from_fn(shape, |_| {
        let v = rng.next_uniform(-1.0, 1.0);
        if v.abs() < 0.05 {
            v + 0.1 * v.signum() + if v == 0.0 { 0.1 } else { 0.0 }
        } else {
            v
        }
    })
}

fn rand_t_positive(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::seed_from(seed);
    Tensor::from_fn(shape, |_| rng.next_uniform(0.2, 1.5))
}

// ── Forward semantics ───────────────────────────────────────────────

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let t = Tensor::from_vec(vec![0.0, 0.0], &[2]);
    let s = t.softmax(0).unwrap();
    assert_eq!(s.data(), &[0.5, 0.5]);
}

#[test]
fn softmax_sums_to_one_and_positive() {
    let t = rand_t(&[3, 7], 11);
    let s = t.softmax(1).unwrap();
    for row in 0..3 {
        let sum: f64 = (0..7).map(|c| s.at(&[row, c])).sum();
        assert!((sum - 1.0).abs() < 1e-9, "row {row} sums to {sum}");
        for c in 0..7 {
            assert!(s.at(&[row, c]) > 0.0);
        }
    }
}

#[test]
fn conv2d_identity_kernel() {
    let x = rand_t(&[1, 1, 3, 3], 2);
    let k = Tensor::from_vec(vec![1.0], &[1, 1, 1, 1]);
    let y = x.conv2d(&k, 1, 0).unwrap();
    assert_eq!(y.shape(), x.shape());
    assert_eq!(y.data(), x.data());
}

/// Direct nested-loop convolution, independent of the tensor kernels.
fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let (n, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, _, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for ni in 0..n {
        for co in 0..cout {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for u in 0..kh {
                            for v in 0..kw {
                                let ih = (oh * stride + u) as isize - pad as isize;
                                let iw = (ow * stride + v) as isize - pad as isize;
                                if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w {
                                    acc += x.at(&[ni, ci, ih as usize, iw as usize])
                                        * k.at(&[co, ci, u, v]);
                                }
                            }
                        }
                    }
                    out[((ni * cout + co) * ho + oh) * wo + ow] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_nested_loop_oracle() {
    let x = rand_t(&[1, 2, 4, 4], 5);
    let k = rand_t(&[3, 2, 3, 3], 6);
    let y = x.conv2d(&k, 1, 1).unwrap();
    let oracle = conv_oracle(&x, &k, 1, 1);
    assert_eq!(y.shape(), &[1, 3, 4, 4]);
    for (a, b) in y.data().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn conv2d_strided_matches_oracle() {
    let x = rand_t(&[2, 3, 8, 8], 7);
    let k = rand_t(&[4, 3, 3, 3], 8);
    let y = x.conv2d(&k, 2, 1).unwrap();
    assert_eq!(y.shape(), &[2, 4, 4, 4]);
    let oracle = conv_oracle(&x, &k, 2, 1);
    for (a, b) in y.data().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn conv2d_shape_mismatch_names_op() {
    let x = rand_t(&[1, 2, 4, 4], 1);
    let k = rand_t(&[3, 5, 3, 3], 2);
    let err = x.conv2d(&k, 1, 1).unwrap_err().to_string();
    assert!(err.contains("conv2d"), "{err}");
    assert!(err.contains("channels"), "{err}");
}

#[test]
fn unknown_axis_rejected() {
    let t = rand_t(&[2, 3], 1);
    let err = t.sum_axes(&[5], false).unwrap_err().to_string();
    assert!(err.contains("axis 5"), "{err}");
}

#[test]
fn max_routes_to_first_attaining_element() {
    // Two equal maxima: subgradient goes to the first in row-major order.
    let x = Tensor::from_vec(vec![1.0, 3.0, 3.0, 0.0], &[4]);
    let tape = Tape::new();
    let xw = tape.watch(&x.clone().requires_grad(true));
    let y = xw.max_axes(&[0], false).unwrap();
    let g = tape.backward(&y, &[&xw], false).unwrap();
    assert_eq!(g[0].data(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn broadcasting_follows_trailing_axes() {
    let a = rand_t(&[2, 3, 2, 2], 3);
    let b = rand_t(&[3, 1, 1], 4); // per-channel bias
    let y = a.add(&b).unwrap();
    assert_eq!(y.shape(), &[2, 3, 2, 2]);
    assert_eq!(y.at(&[1, 2, 0, 1]), a.at(&[1, 2, 0, 1]) + b.at(&[2, 0, 0]));

    let c = rand_t(&[2, 2], 5); // per-pixel map
    let z = a.mul(&c).unwrap();
    assert_eq!(z.at(&[0, 1, 1, 0]), a.at(&[0, 1, 1, 0]) * c.at(&[1, 0]));
}

#[test]
fn concat_and_slice_roundtrip() {
    let a = rand_t(&[2, 3, 2], 6);
    let b = rand_t(&[2, 2, 2], 7);
    let cat = Tensor::concat(&[&a, &b], 1).unwrap();
    assert_eq!(cat.shape(), &[2, 5, 2]);
    let a2 = cat.slice(1, 0, 3).unwrap();
    let b2 = cat.slice(1, 3, 2).unwrap();
    assert_eq!(a2.data(), a.data());
    assert_eq!(b2.data(), b.data());
}

#[test]
fn upsample_then_downsample_scales_by_four() {
    let x = rand_t(&[1, 2, 3, 3], 8);
    let y = x.upsample_nn_2x().unwrap();
    assert_eq!(y.shape(), &[1, 2, 6, 6]);
    assert_eq!(y.at(&[0, 1, 5, 4]), x.at(&[0, 1, 2, 2]));
    let z = y.downsample_sum_2x().unwrap();
    for (a, b) in z.data().iter().zip(x.data()) {
        assert!((a - 4.0 * b).abs() < 1e-12);
    }
}

#[test]
fn determinism_bit_identical() {
    let x = rand_t(&[2, 3, 4, 4], 9);
    let k = rand_t(&[3, 3, 3, 3], 10);
    let run = || {
        let y = x.conv2d(&k, 1, 1).unwrap().tanh().unwrap();
        let z = y.softmax(1).unwrap().sum_all().unwrap();
        z.scalar_value().to_bits()
    };
    assert_eq!(run(), run());
}

#[test]
fn validate_finite_detects_nan() {
    let t = Tensor::from_vec(vec![1.0, f64::NAN], &[2]);
    let err = t.validate_finite("unit").unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

// ── Backward semantics ──────────────────────────────────────────────

#[test]
fn backward_of_sum_of_squares() {
    let x = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3]).requires_grad(true);
    let tape = Tape::new();
    let xw = tape.watch(&x);
    let root = xw.mul(&xw).unwrap().sum_all().unwrap();
    let grads = tape.backward(&root, &[&xw], false).unwrap();
    assert_eq!(grads[0].data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_of_constant_is_zero() {
    let x = Tensor::from_vec(vec![1.0, 2.0], &[2]).requires_grad(true);
    let c = Tensor::from_vec(vec![5.0], &[1]).requires_grad(true);
    let tape = Tape::new();
    let xw = tape.watch(&x);
    let cw = tape.watch(&c);
    let root = cw.mul(&cw).unwrap().sum_all().unwrap();
    let grads = tape.backward(&root, &[&xw], false).unwrap();
    assert!(grads[0].data().iter().all(|&v| v == 0.0));
}

#[test]
fn backward_rejects_non_scalar_root() {
    let x = rand_t(&[3], 1).requires_grad(true);
    let tape = Tape::new();
    let xw = tape.watch(&x);
    let y = xw.mul_scalar(2.0).unwrap();
    let err = tape.backward(&y, &[&xw], false).unwrap_err();
    assert!(matches!(err, crate::error::Error::NonScalarRoot(_)));
}

#[test]
fn backward_off_tape_wrt_warns_and_zeroes() {
    let x = rand_t(&[2], 1).requires_grad(true);
    let stranger = rand_t(&[4], 2).requires_grad(true);
    let tape = Tape::new();
    let xw = tape.watch(&x);
    let root = xw.sum_all().unwrap();
    let grads = tape.backward(&root, &[&stranger], false).unwrap();
    assert!(grads[0].data().iter().all(|&v| v == 0.0));
    assert_eq!(tape.take_warnings().len(), 1);
}

#[test]
fn gradient_accumulates_over_reuse() {
    // y = x*x + 3x  => dy/dx = 2x + 3
    let x = Tensor::from_vec(vec![2.0], &[1]).requires_grad(true);
    let tape = Tape::new();
    let xw = tape.watch(&x);
    let root = xw
        .mul(&xw)
        .unwrap()
        .add(&xw.mul_scalar(3.0).unwrap())
        .unwrap()
        .sum_all()
        .unwrap();
    let grads = tape.backward(&root, &[&xw], false).unwrap();
    assert_eq!(grads[0].data(), &[7.0]);
}

#[test]
fn params_auto_register_via_attached_inputs() {
    // Only x is watched; w rides along because it requires grad.
    let x = rand_t(&[2, 3], 1);
    let w = rand_t(&[3, 2], 2).requires_grad(true);
    let tape = Tape::new();
    let xw = tape.watch(&x);
    let y = xw.matmul(&w).unwrap().sum_all().unwrap();
    let grads = tape.backward(&y, &[&w], false).unwrap();
    assert_eq!(grads[0].shape(), &[3, 2]);
    assert!(grads[0].data().iter().any(|&v| v != 0.0));
}

// ── finite_diff_grad oracle ─────────────────────────────────────────

#[test]
fn finite_diff_of_sum_is_ones() {
    let x = rand_t(&[5], 3);
    let g = finite_diff_grad(&|t: &Tensor| t.sum_all(), &x, 1e-5).unwrap();
    for &v in g.data() {
        assert!((v - 1.0).abs() < 1e-8);
    }
}

#[test]
fn finite_diff_of_sum_of_squares() {
    let x = Tensor::from_vec(vec![1.0, -1.0], &[2]);
    let g = finite_diff_grad(&|t: &Tensor| t.mul(t)?.sum_all(), &x, 1e-5).unwrap();
    assert!((g.data()[0] - 2.0).abs() < 1e-6);
    assert!((g.data()[1] + 2.0).abs() < 1e-6);
}

#[test]
fn finite_diff_rejects_non_scalar() {
    let x = rand_t(&[2], 4);
    let err = finite_diff_grad(&|t: &Tensor| t.mul_scalar(1.0), &x, 1e-5).unwrap_err();
    assert!(err.to_string().contains("scalar"));
}

// ── Gradient checks for every primitive ─────────────────────────────

fn weighted_sum(t: &Tensor, seed: u64) -> crate::error::Result<Tensor> {
    // Random projection to a scalar so the full Jacobian is exercised.
    let r = rand_t(&[t.numel()], seed).reshape(t.shape())?;
    t.mul(&r)?.sum_all()
}

#[test]
fn gradcheck_all_primitives() {
    let items: Vec<GradCheckItem> = vec![
        GradCheckItem::new("add", vec![rand_t(&[2, 3], 1), rand_t(&[3], 2)], |_, xs| {
            weighted_sum(&xs[0].add(&xs[1])?, 100)
        }),
        GradCheckItem::new("sub", vec![rand_t(&[2, 3], 3), rand_t(&[2, 1], 4)], |_, xs| {
            weighted_sum(&xs[0].sub(&xs[1])?, 101)
        }),
        GradCheckItem::new("mul", vec![rand_t(&[2, 3], 5), rand_t(&[2, 3], 6)], |_, xs| {
            weighted_sum(&xs[0].mul(&xs[1])?, 102)
        }),
        GradCheckItem::new("div", vec![rand_t(&[2, 3], 7), rand_t_positive(&[2, 3], 8)], |_, xs| {
            weighted_sum(&xs[0].div(&xs[1])?, 103)
        }),
        GradCheckItem::new("add_scalar", vec![rand_t(&[4], 9)], |_, xs| {
            weighted_sum(&xs[0].add_scalar(0.7)?, 104)
        }),
        GradCheckItem::new("mul_scalar", vec![rand_t(&[4], 10)], |_, xs| {
            weighted_sum(&xs[0].mul_scalar(-1.3)?, 105)
        }),
        GradCheckItem::new("pow_scalar", vec![rand_t_positive(&[4], 11)], |_, xs| {
            weighted_sum(&xs[0].pow_scalar(2.5)?, 106)
        }),
        GradCheckItem::new("exp", vec![rand_t(&[4], 12)], |_, xs| {
            weighted_sum(&xs[0].exp()?, 107)
        }),
        GradCheckItem::new("log", vec![rand_t_positive(&[4], 13)], |_, xs| {
            weighted_sum(&xs[0].log()?, 108)
        }),
        GradCheckItem::new("tanh", vec![rand_t(&[4], 14)], |_, xs| {
            weighted_sum(&xs[0].tanh()?, 109)
        }),
        GradCheckItem::new("relu", vec![rand_t_off_zero(&[8], 15)], |_, xs| {
            weighted_sum(&xs[0].relu()?, 110)
        }),
        GradCheckItem::new("leaky_relu", vec![rand_t_off_zero(&[8], 16)], |_, xs| {
            weighted_sum(&xs[0].leaky_relu(0.2)?, 111)
        }),
        GradCheckItem::new("matmul", vec![rand_t(&[3, 4], 17), rand_t(&[4, 2], 18)], |_, xs| {
            weighted_sum(&xs[0].matmul(&xs[1])?, 112)
        }),
        GradCheckItem::new("transpose", vec![rand_t(&[3, 4], 19)], |_, xs| {
            weighted_sum(&xs[0].transpose()?, 113)
        }),
        GradCheckItem::new("sum_axes", vec![rand_t(&[2, 3, 4], 20)], |_, xs| {
            weighted_sum(&xs[0].sum_axes(&[0, 2], false)?, 114)
        }),
        GradCheckItem::new("max_axes", vec![rand_t(&[2, 3, 4], 21)], |_, xs| {
            weighted_sum(&xs[0].max_axes(&[2], true)?, 115)
        }),
        GradCheckItem::new("mean_axes", vec![rand_t(&[2, 3, 4], 22)], |_, xs| {
            weighted_sum(&xs[0].mean_axes(&[1], false)?, 116)
        }),
        GradCheckItem::new("reshape", vec![rand_t(&[2, 6], 23)], |_, xs| {
            weighted_sum(&xs[0].reshape(&[3, 4])?, 117)
        }),
        GradCheckItem::new("broadcast_to", vec![rand_t(&[1, 3, 1], 24)], |_, xs| {
            weighted_sum(&xs[0].broadcast_to(&[2, 3, 4])?, 118)
        }),
        GradCheckItem::new("concat", vec![rand_t(&[2, 2], 25), rand_t(&[2, 3], 26)], |_, xs| {
            weighted_sum(&Tensor::concat(&[&xs[0], &xs[1]], 1)?, 119)
        }),
        GradCheckItem::new("slice", vec![rand_t(&[2, 5], 27)], |_, xs| {
            weighted_sum(&xs[0].slice(1, 1, 3)?, 120)
        }),
        GradCheckItem::new(
            "conv2d",
            vec![rand_t(&[1, 2, 4, 4], 28), rand_t(&[3, 2, 3, 3], 29)],
            |_, xs| weighted_sum(&xs[0].conv2d(&xs[1], 1, 1)?, 121),
        ),
        GradCheckItem::new(
            "conv2d_strided",
            vec![rand_t(&[1, 2, 6, 6], 30), rand_t(&[3, 2, 3, 3], 31)],
            |_, xs| weighted_sum(&xs[0].conv2d(&xs[1], 2, 1)?, 122),
        ),
        GradCheckItem::new("upsample_nn_2x", vec![rand_t(&[1, 2, 3, 3], 32)], |_, xs| {
            weighted_sum(&xs[0].upsample_nn_2x()?, 123)
        }),
        GradCheckItem::new("downsample_sum_2x", vec![rand_t(&[1, 2, 4, 4], 33)], |_, xs| {
            weighted_sum(&xs[0].downsample_sum_2x()?, 124)
        }),
        GradCheckItem::new("softmax", vec![rand_t(&[3, 5], 34)], |_, xs| {
            weighted_sum(&xs[0].softmax(1)?, 125)
        }),
        GradCheckItem::new("sigmoid", vec![rand_t(&[6], 35)], |_, xs| {
            weighted_sum(&xs[0].sigmoid()?, 126)
        }),
        GradCheckItem::new("abs", vec![rand_t_off_zero(&[6], 36)], |_, xs| {
            weighted_sum(&xs[0].abs()?, 127)
        }),
        GradCheckItem::new("l2_norm_trailing", vec![rand_t(&[2, 5], 37)], |_, xs| {
            xs[0].l2_norm_trailing(1)?.sum_all()
        }),
    ];
    let report = GradCheckReport::run(&items).unwrap();
    for (name, err, tol, ok) in &report.lines {
        assert!(ok, "{name}: rel err {err} >= {tol}");
    }
}

#[test]
fn gradcheck_random_composites() {
    // Compositions of the primitive set on random inputs, sizes <= 64.
    for seed in 0..5u64 {
        let item = GradCheckItem::new(
            format!("composite_{seed}"),
            vec![rand_t(&[2, 2, 4, 4], 40 + seed), rand_t(&[2, 2, 3, 3], 50 + seed)],
            |_, xs| {
                let y = xs[0].conv2d(&xs[1], 1, 1)?.tanh()?;
                let p = y.mean_axes(&[2, 3], true)?;
                let s = y.mul(&p)?.softmax(1)?;
                s.mul(&y)?.sum_all()
            },
        );
        let err = item.run().unwrap();
        assert!(err < 1e-4, "composite {seed}: {err}");
    }
}

// ── Second order ────────────────────────────────────────────────────

fn smooth_scalar(x: &Tensor) -> crate::error::Result<Tensor> {
    // Small, twice-differentiable test function.
    let a = x.tanh()?.mul(x)?.sum_all()?;
    let b = x.mul_scalar(0.3)?.exp()?.sum_all()?;
    a.add(&b)
}

/// Penalty ‖∇ₓf(x)‖₂^p computed with a first-order-only pipeline
/// (numbers out of backward, norm taken in plain arithmetic).
fn penalty_first_order(x: &Tensor, p: f64) -> f64 {
    let tape = Tape::new();
    let xw = tape.watch(&x.detach().requires_grad(true));
    let f = smooth_scalar(&xw).unwrap();
    let g = tape.backward(&f, &[&xw], false).unwrap().remove(0);
    let norm: f64 = g.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    norm.powf(p)
}

#[test]
fn second_order_matches_finite_differences() {
    let p = 4.0;
    let x = rand_t(&[6], 60);

    // Analytic: differentiate the recorded penalty graph.
    let tape = Tape::new();
    let xw = tape.watch(&x.clone().requires_grad(true));
    let f = smooth_scalar(&xw).unwrap();
    let gx = tape.backward(&f, &[&xw], true).unwrap().remove(0);
    assert!(gx.is_attached(), "create_graph gradient must stay on tape");
    let penalty = gx.l2_norm_trailing(1).unwrap().pow_scalar(p).unwrap();
    let second = tape.backward(&penalty, &[&xw], false).unwrap().remove(0);

    // Numeric: central differences of the first-order pipeline.
    let step = 1e-5;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        let mut minus = plus.clone();
        plus[i] += step;
        minus[i] -= step;
        let fd = (penalty_first_order(&Tensor::from_vec(plus, x.shape()), p)
            - penalty_first_order(&Tensor::from_vec(minus, x.shape()), p))
            / (2.0 * step);
        let a = second.data()[i];
        let denom = a.abs().max(fd.abs()).max(0.1);
        assert!(
            (a - fd).abs() / denom < 1e-3,
            "element {i}: analytic {a} vs fd {fd}"
        );
    }
}

#[test]
fn create_graph_false_detaches_gradients() {
    let x = rand_t(&[4], 61);
    let tape = Tape::new();
    let xw = tape.watch(&x.clone().requires_grad(true));
    let f = smooth_scalar(&xw).unwrap();
    let g = tape.backward(&f, &[&xw], false).unwrap().remove(0);
    assert!(!g.is_attached());
}
