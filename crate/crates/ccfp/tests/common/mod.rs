//! Shared test utilities: finite-difference gradient checking and naive loop
//! oracles kept independent of the library's compute kernels.

#![allow(dead_code)]

use ccfp::rng::derive_rng;
use ccfp::{Graph, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn test_rng(label: &str, index: u64) -> ChaCha8Rng {
    derive_rng(0xCCF9_0000, label, index)
}

pub fn assert_close(actual: f64, expected: f64, tol: f64, msg: &str) {
    assert!(
        (actual - expected).abs() <= tol,
        "{msg}: actual={actual} expected={expected} diff={}",
        (actual - expected).abs()
    );
}

pub fn assert_slice_close(actual: &[f64], expected: &[f64], tol: f64, msg: &str) {
    assert_eq!(actual.len(), expected.len(), "{msg}: length mismatch");
    for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
        assert!(
            (a - e).abs() <= tol,
            "{msg}[{i}]: actual={a} expected={e} diff={}",
            (a - e).abs()
        );
    }
}

// ── Random tensor generation ────────────────────────────────────────────────

#[derive(Clone, Copy)]
pub enum Gen {
    /// Uniform in [lo, hi].
    Uniform(f64, f64),
    /// Uniform in [-1,1] but quantized and index-salted so that no two values
    /// in the tensor are within 2e-5 of each other (keeps max-pool argmax
    /// stable under finite-difference perturbation).
    Separated,
    /// Uniform in [-1,1] with |x| >= 0.05 (keeps relu away from its kink).
    AwayFromZero,
}

pub fn gen_data(rng: &mut ChaCha8Rng, n: usize, gen: Gen) -> Vec<f64> {
    match gen {
        Gen::Uniform(lo, hi) => (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
        Gen::Separated => (0..n)
            .map(|i| {
                let v: f64 = rng.gen_range(-1.0..1.0);
                (v * 100.0).round() / 100.0 + (i as f64) * 1e-4
            })
            .collect(),
        Gen::AwayFromZero => (0..n)
            .map(|_| {
                let v: f64 = rng.gen_range(-1.0..1.0);
                if v.abs() < 0.05 {
                    0.05f64.copysign(v + f64::MIN_POSITIVE)
                } else {
                    v
                }
            })
            .collect(),
    }
}

pub struct GradSpec {
    pub shape: Vec<usize>,
    pub gen: Gen,
}

impl GradSpec {
    pub fn new(shape: &[usize], gen: Gen) -> Self {
        GradSpec { shape: shape.to_vec(), gen }
    }
}

/// Central finite-difference check of one case.
///
/// `build` constructs a scalar loss from grad-leaf inputs; every input element
/// is perturbed by ±h and the analytic gradient must match the central
/// difference with relative error <= `tol` (absolute floor 1e-8).
pub fn grad_check<F>(name: &str, rng: &mut ChaCha8Rng, specs: &[GradSpec], h: f64, tol: f64, build: F)
where
    F: Fn(&Graph<f64>, &[Tensor<f64>]) -> Tensor<f64>,
{
    let datas: Vec<Vec<f64>> =
        specs.iter().map(|s| gen_data(rng, s.shape.iter().product(), s.gen)).collect();

    let eval = |datas: &[Vec<f64>]| -> f64 {
        let g: Graph<f64> = Graph::new();
        let leaves: Vec<Tensor<f64>> = specs
            .iter()
            .zip(datas)
            .map(|(s, d)| g.leaf(d.clone(), s.shape.clone(), true, None).unwrap())
            .collect();
        build(&g, &leaves).value()
    };

    // Analytic gradients.
    let g: Graph<f64> = Graph::new();
    let leaves: Vec<Tensor<f64>> = specs
        .iter()
        .zip(&datas)
        .map(|(s, d)| g.leaf(d.clone(), s.shape.clone(), true, None).unwrap())
        .collect();
    let loss = build(&g, &leaves);
    g.backward(&loss).unwrap();
    let grads: Vec<Vec<f64>> = leaves
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    for (ti, data) in datas.iter().enumerate() {
        for ei in 0..data.len() {
            let mut plus = datas.clone();
            plus[ti][ei] += h;
            let mut minus = datas.clone();
            minus[ti][ei] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let analytic = grads[ti][ei];
            let denom = analytic.abs().max(numeric.abs());
            let diff = (analytic - numeric).abs();
            assert!(
                diff <= tol * denom || diff <= 1e-8,
                "{name}: tensor {ti} element {ei}: analytic={analytic} numeric={numeric} \
                 rel={}",
                diff / denom.max(1e-300)
            );
        }
    }
}

// ── Naive loop oracles (independent of the library kernels) ────────────────

/// Quadruple-loop cross-correlation with zero padding.
pub fn conv2d_ref(
    input: &[f64],
    (b, c, h, w): (usize, usize, usize, usize),
    kernel: &[f64],
    (o, kh, kw): (usize, usize, usize),
    stride: usize,
    padding: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0; b * o * oh * ow];
    for bi in 0..b {
        for oi in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (oy * stride + i) as isize - padding as isize;
                                let ix = (ox * stride + j) as isize - padding as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    let iv = input
                                        [((bi * c + ci) * h + iy as usize) * w + ix as usize];
                                    let kv = kernel[((oi * c + ci) * kh + i) * kw + j];
                                    acc += iv * kv;
                                }
                            }
                        }
                    }
                    out[((bi * o + oi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

pub fn maxpool_ref(
    input: &[f64],
    (b, c, h, w): (usize, usize, usize, usize),
    window: usize,
    stride: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = vec![0.0; b * c * oh * ow];
    for p in 0..b * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for i in 0..window {
                    for j in 0..window {
                        let v = input[p * h * w + (oy * stride + i) * w + (ox * stride + j)];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out[p * oh * ow + oy * ow + ox] = best;
            }
        }
    }
    (out, oh, ow)
}

pub fn linear_ref(x: &[f64], w: &[f64], bias: &[f64], b: usize, d: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * k];
    for bi in 0..b {
        for ki in 0..k {
            let mut acc = bias[ki];
            for di in 0..d {
                acc += x[bi * d + di] * w[di * k + ki];
            }
            out[bi * k + ki] = acc;
        }
    }
    out
}

pub fn channel_stats_ref(
    x: &[f64],
    (b, c, h, w): (usize, usize, usize, usize),
    eps: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = (h * w) as f64;
    let mut mu = vec![0.0; b * c];
    let mut sigma = vec![0.0; b * c];
    for bc in 0..b * c {
        let plane = &x[bc * h * w..(bc + 1) * h * w];
        let m: f64 = plane.iter().sum::<f64>() / n;
        let v: f64 = plane.iter().map(|&p| (p - m) * (p - m)).sum::<f64>() / n;
        mu[bc] = m;
        sigma[bc] = (v + eps).sqrt();
    }
    (mu, sigma)
}

pub fn gram_ref(x: &[f64], (b, c, h, w): (usize, usize, usize, usize)) -> Vec<f64> {
    let hw = h * w;
    let norm = (c * hw) as f64;
    let mut out = vec![0.0; b * c * c];
    for bi in 0..b {
        for i in 0..c {
            for j in 0..c {
                let mut acc = 0.0;
                for p in 0..hw {
                    acc += x[(bi * c + i) * hw + p] * x[(bi * c + j) * hw + p];
                }
                out[(bi * c + i) * c + j] = acc / norm;
            }
        }
    }
    out
}

pub fn softmax_ce_ref(logits: &[f64], labels: &[usize], b: usize, k: usize) -> f64 {
    let mut total = 0.0;
    for (bi, &label) in labels.iter().enumerate() {
        let row = &logits[bi * k..(bi + 1) * k];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse: f64 = row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln() + mx;
        total += lse - row[label];
    }
    total / b as f64
}

/// Eigenvalues of a small symmetric matrix by the cyclic Jacobi method.
pub fn symmetric_eigenvalues(mat: &[f64], n: usize) -> Vec<f64> {
    let mut a = mat.to_vec();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-30 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let cos = 1.0 / (t * t + 1.0).sqrt();
                let sin = t * cos;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = cos * akp - sin * akq;
                    a[k * n + q] = sin * akp + cos * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = cos * apk - sin * aqk;
                    a[q * n + k] = sin * apk + cos * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}
