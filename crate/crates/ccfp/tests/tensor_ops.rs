//! Per-operation contracts: frozen example values, loop-oracle equivalence,
//! and finite-difference gradient checks.

mod common;

use ccfp::tensor::channel_stats;
use ccfp::{Error, Graph};
use common::*;
use rand::Rng;

fn graph() -> Graph<f64> {
    Graph::new()
}

// ── conv2d ──────────────────────────────────────────────────────────────────

#[test]
fn conv_ones_kernel_sums_window() {
    let g = graph();
    let x = g.tensor4(vec![1.0; 4], 1, 1, 2, 2, false).unwrap();
    let k = g.tensor4(vec![1.0; 4], 1, 1, 2, 2, false).unwrap();
    let y = x.conv2d(&k, 1, 0).unwrap();
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_close(y.value(), 4.0, 0.0, "2x2 ones conv");
}

#[test]
fn conv_identity_kernel_preserves_input() {
    let mut rng = test_rng("conv-id", 0);
    let data = gen_data(&mut rng, 2 * 3 * 4 * 4, Gen::Uniform(-1.0, 1.0));
    let g = graph();
    let x = g.tensor4(data.clone(), 2, 3, 4, 4, false).unwrap();
    // One 1x1 kernel per output channel selecting exactly one input channel
    // would change the channel count; the cleanest identity case is C=1.
    let g2 = graph();
    let x1 = g2.tensor4(data[..16].to_vec(), 1, 1, 4, 4, false).unwrap();
    let k1 = g2.tensor4(vec![1.0], 1, 1, 1, 1, false).unwrap();
    let y = x1.conv2d(&k1, 1, 0).unwrap();
    assert_slice_close(&y.data(), &data[..16], 0.0, "identity kernel");
    drop(x);
}

#[test]
fn conv_matches_loop_oracle() {
    let mut rng = test_rng("conv-oracle", 0);
    for case in 0..25 {
        let (b, c, o) = (1 + case % 2, 2, 3);
        let (h, w) = (4, 4);
        let (kh, kw) = (3, 3);
        let stride = 1 + case % 2;
        let padding = case % 2;
        let input = gen_data(&mut rng, b * c * h * w, Gen::Uniform(-1.0, 1.0));
        let kernel = gen_data(&mut rng, o * c * kh * kw, Gen::Uniform(-1.0, 1.0));
        let (want, oh, ow) =
            conv2d_ref(&input, (b, c, h, w), &kernel, (o, kh, kw), stride, padding);
        let g = graph();
        let x = g.tensor4(input, b, c, h, w, false).unwrap();
        let k = g.tensor4(kernel, o, c, kh, kw, false).unwrap();
        let y = x.conv2d(&k, stride, padding).unwrap();
        assert_eq!(y.shape(), &[b, o, oh, ow]);
        assert_slice_close(&y.data(), &want, 1e-10, "conv oracle");
    }
}

#[test]
fn conv_shape_mismatch_is_error() {
    let g = graph();
    let x = g.tensor4(vec![0.0; 2 * 3 * 4 * 4], 2, 3, 4, 4, false).unwrap();
    let k = g.tensor4(vec![0.0; 2 * 2 * 3 * 3], 2, 2, 3, 3, false).unwrap();
    assert!(matches!(x.conv2d(&k, 1, 0), Err(Error::Shape(_))));
    let kbig = g.tensor4(vec![0.0; 3 * 6 * 6], 1, 3, 6, 6, false).unwrap();
    assert!(matches!(x.conv2d(&kbig, 1, 0), Err(Error::Shape(_))));
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = test_rng("conv-grad", 0);
    for case in 0..30 {
        let stride = 1 + case % 2;
        let padding = case % 2;
        let wsum = gen_data(&mut rng, 3 * 2 * 2, Gen::Uniform(-1.0, 1.0));
        grad_check(
            "conv2d",
            &mut rng,
            &[
                GradSpec::new(&[2, 2, 4, 4], Gen::Uniform(-1.0, 1.0)),
                GradSpec::new(&[3, 2, 3, 3], Gen::Uniform(-1.0, 1.0)),
            ],
            1e-5,
            1e-4,
            move |g, leaves| {
                let y = leaves[0].conv2d(&leaves[1], stride, padding).unwrap();
                let b = y.shape()[0];
                let mut w = Vec::new();
                for _ in 0..b {
                    w.extend_from_slice(&wsum);
                }
                let r = g.constant(w, y.shape().to_vec()).unwrap();
                y.mul(&r).unwrap().sum_all()
            },
        );
    }
}

// ── max_pool2d ──────────────────────────────────────────────────────────────

#[test]
fn maxpool_basic_and_constant() {
    let g = graph();
    let x = g.tensor4(vec![1.0, 2.0, 3.0, 4.0], 1, 1, 2, 2, false).unwrap();
    let y = x.max_pool2d(2, 2).unwrap();
    assert_close(y.value(), 4.0, 0.0, "max of four");

    let c = g.tensor4(vec![0.7; 16], 1, 1, 4, 4, false).unwrap();
    let yc = c.max_pool2d(2, 2).unwrap();
    assert!(yc.data().iter().all(|&v| v == 0.7));
}

#[test]
fn maxpool_matches_loop_oracle() {
    let mut rng = test_rng("pool-oracle", 0);
    for _ in 0..25 {
        let (b, c, h, w) = (1, 1, 4, 4);
        let input = gen_data(&mut rng, b * c * h * w, Gen::Uniform(-1.0, 1.0));
        let (want, oh, ow) = maxpool_ref(&input, (b, c, h, w), 2, 2);
        let g = graph();
        let x = g.tensor4(input, b, c, h, w, false).unwrap();
        let y = x.max_pool2d(2, 2).unwrap();
        assert_eq!(y.shape(), &[b, c, oh, ow]);
        assert_slice_close(&y.data(), &want, 1e-10, "pool oracle");
    }
}

#[test]
fn maxpool_window_too_large_is_error() {
    let g = graph();
    let x = g.tensor4(vec![0.0; 4], 1, 1, 2, 2, false).unwrap();
    assert!(matches!(x.max_pool2d(3, 1), Err(Error::Shape(_))));
}

#[test]
fn maxpool_gradients_match_finite_differences() {
    let mut rng = test_rng("pool-grad", 0);
    for _ in 0..30 {
        let wsum = gen_data(&mut rng, 2 * 2 * 3 * 3, Gen::Uniform(-1.0, 1.0));
        grad_check(
            "max_pool2d",
            &mut rng,
            &[GradSpec::new(&[2, 2, 6, 6], Gen::Separated)],
            1e-5,
            1e-4,
            move |g, leaves| {
                let y = leaves[0].max_pool2d(2, 2).unwrap();
                let r = g.constant(wsum.clone(), y.shape().to_vec()).unwrap();
                y.mul(&r).unwrap().sum_all()
            },
        );
    }
}

// ── relu / linear ───────────────────────────────────────────────────────────

#[test]
fn relu_clamps_negative() {
    let g = graph();
    let x = g.leaf(vec![-1.0, 0.0, 2.0], vec![3], false, None).unwrap();
    assert_eq!(x.relu().data(), vec![0.0, 0.0, 2.0]);
}

#[test]
fn linear_identity_and_oracle() {
    let g = graph();
    // identity weight, zero bias
    let x = g.leaf(vec![1.0, -2.0, 3.0, 0.5, 0.25, -0.125], vec![2, 3], false, None).unwrap();
    let eye = g
        .leaf(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], vec![3, 3], false, None)
        .unwrap();
    let zb = g.leaf(vec![0.0; 3], vec![3], false, None).unwrap();
    let y = x.linear(&eye, &zb).unwrap();
    assert_slice_close(&y.data(), &x.data(), 0.0, "identity linear");

    let mut rng = test_rng("linear-oracle", 0);
    for _ in 0..25 {
        let (b, d, k) = (3, 4, 5);
        let xd = gen_data(&mut rng, b * d, Gen::Uniform(-1.0, 1.0));
        let wd = gen_data(&mut rng, d * k, Gen::Uniform(-1.0, 1.0));
        let bd = gen_data(&mut rng, k, Gen::Uniform(-1.0, 1.0));
        let want = linear_ref(&xd, &wd, &bd, b, d, k);
        let g = graph();
        let x = g.leaf(xd, vec![b, d], false, None).unwrap();
        let w = g.leaf(wd, vec![d, k], false, None).unwrap();
        let bias = g.leaf(bd, vec![k], false, None).unwrap();
        assert_slice_close(&x.linear(&w, &bias).unwrap().data(), &want, 1e-10, "linear oracle");
    }
}

#[test]
fn linear_inner_dimension_mismatch_is_error() {
    let g = graph();
    let x = g.leaf(vec![0.0; 6], vec![2, 3], false, None).unwrap();
    let w = g.leaf(vec![0.0; 8], vec![4, 2], false, None).unwrap();
    let b = g.leaf(vec![0.0; 2], vec![2], false, None).unwrap();
    assert!(matches!(x.linear(&w, &b), Err(Error::Shape(_))));
}

#[test]
fn relu_linear_gradients_match_finite_differences() {
    let mut rng = test_rng("lin-grad", 0);
    for _ in 0..30 {
        let wsum = gen_data(&mut rng, 3 * 5, Gen::Uniform(-1.0, 1.0));
        grad_check(
            "linear+relu",
            &mut rng,
            &[
                GradSpec::new(&[3, 4], Gen::AwayFromZero),
                GradSpec::new(&[4, 5], Gen::Uniform(-1.0, 1.0)),
                GradSpec::new(&[5], Gen::Uniform(-0.5, 0.5)),
            ],
            1e-5,
            1e-4,
            move |g, leaves| {
                let y = leaves[0].relu().linear(&leaves[1], &leaves[2]).unwrap();
                let r = g.constant(wsum.clone(), y.shape().to_vec()).unwrap();
                y.mul(&r).unwrap().sum_all()
            },
        );
    }
}

// ── channel statistics ──────────────────────────────────────────────────────

#[test]
fn channel_stats_reference_values() {
    let g = graph();
    let x = g.tensor4(vec![1.0, 2.0, 3.0, 4.0], 1, 1, 2, 2, false).unwrap();
    let (mu, sigma) = channel_stats(&x, 0.0).unwrap();
    assert_close(mu.value(), 2.5, 1e-12, "mu");
    assert_close(sigma.value(), 1.25f64.sqrt(), 1e-12, "sigma");
    assert_close(sigma.value(), 1.118034, 1e-6, "sigma frozen");
}

#[test]
fn channel_stats_constant_channel_uses_eps() {
    let g = graph();
    let x = g.tensor4(vec![0.3; 9], 1, 1, 3, 3, false).unwrap();
    let (mu, sigma) = channel_stats(&x, 1e-5).unwrap();
    assert_close(mu.value(), 0.3, 1e-12, "constant mu");
    assert_close(sigma.value(), 1e-5f64.sqrt(), 1e-12, "constant sigma");
    assert!(sigma.value() >= 1e-5f64.sqrt());
}

#[test]
fn channel_stats_recentred_input_has_zero_mean() {
    let mut rng = test_rng("stats-center", 0);
    let data = gen_data(&mut rng, 2 * 2 * 3 * 3, Gen::Uniform(-2.0, 2.0));
    let g = graph();
    let x = g.tensor4(data, 2, 2, 3, 3, false).unwrap();
    let (mu, sigma) = channel_stats(&x, 0.0).unwrap();
    let normed = x.bc_sub(&mu).unwrap().bc_div(&sigma).unwrap();
    let (mu2, _) = channel_stats(&normed, 0.0).unwrap();
    for v in mu2.data() {
        assert!(v.abs() < 1e-12, "recentred mean {v}");
    }
}

#[test]
fn channel_stats_match_loop_oracle() {
    let mut rng = test_rng("stats-oracle", 0);
    for _ in 0..25 {
        let (b, c, h, w) = (2, 3, 4, 4);
        let data = gen_data(&mut rng, b * c * h * w, Gen::Uniform(-1.0, 1.0));
        let (want_mu, want_sigma) = channel_stats_ref(&data, (b, c, h, w), 1e-5);
        let g = graph();
        let x = g.tensor4(data, b, c, h, w, false).unwrap();
        let (mu, sigma) = channel_stats(&x, 1e-5).unwrap();
        assert_slice_close(&mu.data(), &want_mu, 1e-10, "mu oracle");
        assert_slice_close(&sigma.data(), &want_sigma, 1e-10, "sigma oracle");
    }
}

#[test]
fn channel_stats_gradients_match_finite_differences() {
    let mut rng = test_rng("stats-grad", 0);
    for _ in 0..30 {
        let w1 = gen_data(&mut rng, 2 * 3, Gen::Uniform(-1.0, 1.0));
        let w2 = gen_data(&mut rng, 2 * 3, Gen::Uniform(-1.0, 1.0));
        grad_check(
            "channel_stats",
            &mut rng,
            &[GradSpec::new(&[2, 3, 4, 4], Gen::Uniform(-1.0, 1.0))],
            1e-5,
            1e-4,
            move |g, leaves| {
                let (mu, sigma) = channel_stats(&leaves[0], 1e-3).unwrap();
                let r1 = g.constant(w1.clone(), vec![2, 3]).unwrap();
                let r2 = g.constant(w2.clone(), vec![2, 3]).unwrap();
                mu.mul(&r1).unwrap().sum_all().add(&sigma.mul(&r2).unwrap().sum_all()).unwrap()
            },
        );
    }
}

// ── softmax cross-entropy ───────────────────────────────────────────────────

#[test]
fn cross_entropy_symmetric_and_saturated() {
    let g = graph();
    let x = g.leaf(vec![0.0, 0.0], vec![1, 2], false, None).unwrap();
    assert_close(x.cross_entropy(&[0]).unwrap().value(), 2.0f64.ln(), 1e-12, "ln 2");

    let y = g.leaf(vec![100.0, -100.0], vec![1, 2], false, None).unwrap();
    let v = y.cross_entropy(&[0]).unwrap().value();
    assert!(v.abs() < 1e-12 && v.is_finite(), "saturated CE {v}");
}

#[test]
fn cross_entropy_matches_loop_oracle() {
    let mut rng = test_rng("ce-oracle", 0);
    for _ in 0..25 {
        let (b, k) = (4, 6);
        let logits = gen_data(&mut rng, b * k, Gen::Uniform(-3.0, 3.0));
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..k)).collect();
        let want = softmax_ce_ref(&logits, &labels, b, k);
        let g = graph();
        let x = g.leaf(logits, vec![b, k], false, None).unwrap();
        assert_close(x.cross_entropy(&labels).unwrap().value(), want, 1e-10, "ce oracle");
    }
}

#[test]
fn cross_entropy_label_out_of_range_is_error() {
    let g = graph();
    let x = g.leaf(vec![0.0; 6], vec![2, 3], false, None).unwrap();
    assert!(matches!(x.cross_entropy(&[0, 3]), Err(Error::Index(_))));
}

#[test]
fn cross_entropy_gradients_match_finite_differences() {
    let mut rng = test_rng("ce-grad", 0);
    for _ in 0..30 {
        let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
        grad_check(
            "cross_entropy",
            &mut rng,
            &[GradSpec::new(&[4, 5], Gen::Uniform(-2.0, 2.0))],
            1e-5,
            1e-4,
            move |_, leaves| leaves[0].cross_entropy(&labels).unwrap(),
        );
    }
}

// ── l2_squared / frobenius_norm ─────────────────────────────────────────────

#[test]
fn l2_and_frobenius_reference_values() {
    let g = graph();
    let a = g.leaf(vec![1.0, 0.0], vec![2], false, None).unwrap();
    let b = g.leaf(vec![0.0, 1.0], vec![2], false, None).unwrap();
    assert_close(a.l2_squared(&b).unwrap().value(), 2.0, 1e-12, "l2 unit");
    assert_close(a.l2_squared(&a).unwrap().value(), 0.0, 0.0, "l2 self");

    let m = g.leaf(vec![3.0, 4.0, 0.0, 0.0], vec![2, 2], false, None).unwrap();
    assert_close(m.frobenius_norm().value(), 5.0, 1e-12, "frob 3-4-5");
}

#[test]
fn l2_shape_mismatch_is_error() {
    let g = graph();
    let a = g.leaf(vec![0.0; 2], vec![2], false, None).unwrap();
    let b = g.leaf(vec![0.0; 3], vec![3], false, None).unwrap();
    assert!(matches!(a.l2_squared(&b), Err(Error::Shape(_))));
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = test_rng("loss-grad", 0);
    for _ in 0..35 {
        grad_check(
            "l2_squared",
            &mut rng,
            &[GradSpec::new(&[3, 4], Gen::Uniform(-1.0, 1.0)), GradSpec::new(&[3, 4], Gen::Uniform(-1.0, 1.0))],
            1e-5,
            1e-4,
            |_, leaves| leaves[0].l2_squared(&leaves[1]).unwrap(),
        );
        grad_check(
            "frobenius_norm",
            &mut rng,
            &[GradSpec::new(&[3, 3], Gen::Uniform(0.2, 1.0))],
            1e-5,
            1e-4,
            |_, leaves| leaves[0].frobenius_norm(),
        );
        grad_check(
            "batch_frobenius_norm",
            &mut rng,
            &[GradSpec::new(&[2, 3, 3], Gen::Uniform(0.2, 1.0))],
            1e-5,
            1e-4,
            |_, leaves| leaves[0].batch_frobenius_norm().unwrap().sum_all(),
        );
    }
}

#[test]
fn frobenius_gradient_at_zero_is_zero() {
    let g = graph();
    let x = g.leaf(vec![0.0; 4], vec![2, 2], true, None).unwrap();
    let n = x.frobenius_norm();
    g.backward(&n).unwrap();
    assert_eq!(x.grad().unwrap(), vec![0.0; 4]);
}

// ── gram matrix ─────────────────────────────────────────────────────────────

#[test]
fn gram_reference_case() {
    // 1 sample, 2 channels with spatial extent 2: ch0=[1,0], ch1=[0,1].
    let g = graph();
    let x = g.tensor4(vec![1.0, 0.0, 0.0, 1.0], 1, 2, 1, 2, false).unwrap();
    let gm = x.gram().unwrap();
    assert_eq!(gm.shape(), &[1, 2, 2]);
    assert_slice_close(&gm.data(), &[0.25, 0.0, 0.0, 0.25], 1e-12, "gram ref");
}

#[test]
fn gram_zero_and_scaling() {
    let g = graph();
    let z = g.tensor4(vec![0.0; 8], 1, 2, 2, 2, false).unwrap();
    assert!(z.gram().unwrap().data().iter().all(|&v| v == 0.0));

    let mut rng = test_rng("gram-scale", 0);
    let data = gen_data(&mut rng, 2 * 3 * 2 * 2, Gen::Uniform(-1.0, 1.0));
    let x = g.tensor4(data.clone(), 2, 3, 2, 2, false).unwrap();
    let scaled = g.tensor4(data.iter().map(|v| v * 3.0).collect(), 2, 3, 2, 2, false).unwrap();
    let ga = x.gram().unwrap().data();
    let gb = scaled.gram().unwrap().data();
    for (a, b) in ga.iter().zip(&gb) {
        assert_close(*b, a * 9.0, 1e-10, "gram bilinearity");
    }
}

#[test]
fn gram_matches_loop_oracle() {
    let mut rng = test_rng("gram-oracle", 0);
    for _ in 0..25 {
        let (b, c, h, w) = (2, 3, 3, 4);
        let data = gen_data(&mut rng, b * c * h * w, Gen::Uniform(-1.0, 1.0));
        let want = gram_ref(&data, (b, c, h, w));
        let g = graph();
        let x = g.tensor4(data, b, c, h, w, false).unwrap();
        assert_slice_close(&x.gram().unwrap().data(), &want, 1e-10, "gram oracle");
    }
}

#[test]
fn gram_gradients_match_finite_differences() {
    let mut rng = test_rng("gram-grad", 0);
    for _ in 0..30 {
        let wsum = gen_data(&mut rng, 2 * 3 * 3, Gen::Uniform(-1.0, 1.0));
        grad_check(
            "gram",
            &mut rng,
            &[GradSpec::new(&[2, 3, 3, 3], Gen::Uniform(-1.0, 1.0))],
            1e-5,
            1e-4,
            move |g, leaves| {
                let gm = leaves[0].gram().unwrap();
                let r = g.constant(wsum.clone(), gm.shape().to_vec()).unwrap();
                gm.mul(&r).unwrap().sum_all()
            },
        );
    }
}

// ── broadcast / normalization plumbing ──────────────────────────────────────

#[test]
fn broadcast_ops_gradients_match_finite_differences() {
    let mut rng = test_rng("bc-grad", 0);
    for _ in 0..20 {
        grad_check(
            "instance-normalization composition",
            &mut rng,
            &[
                GradSpec::new(&[2, 3, 3, 3], Gen::Uniform(-1.0, 1.0)),
                GradSpec::new(&[3], Gen::Uniform(-0.5, 0.5)),
                GradSpec::new(&[3], Gen::Uniform(-0.5, 0.5)),
            ],
            1e-5,
            1e-4,
            |_, leaves| {
                let x = &leaves[0];
                let (mu, sigma) = channel_stats(x, 1e-3).unwrap();
                let centered = x.bc_sub(&mu).unwrap();
                let ratio = leaves[1].row_broadcast(2).unwrap().div(&sigma).unwrap();
                let scaled = centered.bc_mul(&ratio).unwrap();
                let shifted = x.add(&scaled).unwrap().bc_add_vec(&leaves[2]).unwrap();
                shifted.l2_squared(&x.scale(0.9)).unwrap()
            },
        );
        grad_check(
            "batch-normalization composition",
            &mut rng,
            &[
                GradSpec::new(&[3, 2, 3, 3], Gen::Uniform(-1.0, 1.0)),
                GradSpec::new(&[2], Gen::Uniform(0.5, 1.5)),
                GradSpec::new(&[2], Gen::Uniform(-0.5, 0.5)),
            ],
            1e-5,
            1e-4,
            |_, leaves| {
                let x = &leaves[0];
                let mean = x.batch_chan_mean().unwrap();
                let std = x.batch_chan_var().unwrap().add_scalar(1e-3).sqrt_elem();
                let normed = x.bc_sub_vec(&mean).unwrap().bc_div_vec(&std).unwrap();
                let out = normed.bc_mul_vec(&leaves[1]).unwrap().bc_add_vec(&leaves[2]).unwrap();
                out.l2_squared(&x.scale(0.5)).unwrap()
            },
        );
    }
}

#[test]
fn permute_and_scale_rows_gradients() {
    let mut rng = test_rng("perm-grad", 0);
    for _ in 0..20 {
        let weights = gen_data(&mut rng, 4, Gen::Uniform(0.1, 0.9));
        grad_check(
            "permute+scale rows",
            &mut rng,
            &[GradSpec::new(&[4, 3], Gen::Uniform(-1.0, 1.0))],
            1e-5,
            1e-4,
            move |g, leaves| {
                let p = leaves[0].permute_rows(&[2, 0, 3, 1]).unwrap();
                let s = p.scale_rows(&weights).unwrap();
                let r = g.constant(vec![0.3; 12], vec![4, 3]).unwrap();
                s.mul(&r).unwrap().sum_all()
            },
        );
    }
}

// ── determinism ─────────────────────────────────────────────────────────────

#[test]
fn identical_inputs_produce_bit_identical_outputs() {
    let mut rng = test_rng("det", 0);
    let input = gen_data(&mut rng, 2 * 3 * 6 * 6, Gen::Uniform(-1.0, 1.0));
    let kernel = gen_data(&mut rng, 4 * 3 * 3 * 3, Gen::Uniform(-1.0, 1.0));
    let run = || {
        let g = graph();
        let x = g.tensor4(input.clone(), 2, 3, 6, 6, true).unwrap();
        let k = g.tensor4(kernel.clone(), 4, 3, 3, 3, true).unwrap();
        let y = x.conv2d(&k, 1, 1).unwrap().relu().max_pool2d(2, 2).unwrap();
        let loss = y.gram().unwrap().sum_all();
        g.backward(&loss).unwrap();
        (loss.value(), x.grad().unwrap(), k.grad().unwrap())
    };
    let (v1, gx1, gk1) = run();
    let (v2, gx2, gk2) = run();
    assert!(v1 == v2 && gx1 == gx2 && gk1 == gk2, "bitwise determinism");
}

#[test]
fn parallel_and_sequential_paths_are_bit_identical() {
    let mut rng = test_rng("det-par", 0);
    let input = gen_data(&mut rng, 3 * 2 * 8 * 8, Gen::Uniform(-1.0, 1.0));
    let kernel = gen_data(&mut rng, 4 * 2 * 3 * 3, Gen::Uniform(-1.0, 1.0));
    let run = || {
        let g = graph();
        let x = g.tensor4(input.clone(), 3, 2, 8, 8, true).unwrap();
        let k = g.tensor4(kernel.clone(), 4, 2, 3, 3, true).unwrap();
        let y = x.conv2d(&k, 1, 1).unwrap();
        let loss = y.gram().unwrap().sum_all();
        g.backward(&loss).unwrap();
        (y.data(), x.grad().unwrap(), k.grad().unwrap())
    };
    ccfp::tensor::par::set_parallel(true);
    let par = run();
    ccfp::tensor::par::set_parallel(false);
    let seq = run();
    ccfp::tensor::par::set_parallel(true);
    assert!(par == seq, "parallel path must equal sequential path bitwise");
}
