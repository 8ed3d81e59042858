//! Ad-hoc timing probe (run explicitly with --ignored).

use ccfp::Graph;
use std::time::Instant;

#[test]
#[ignore]
fn probe_phase_timings() {
    // Kernel-only: conv2 shape through the public graph op, batch 32.
    let b = 32;
    let x_data: Vec<f32> = (0..b * 32 * 28 * 28).map(|i| (i % 17) as f32 * 0.05).collect();
    let k_data: Vec<f32> = (0..32 * 32 * 9).map(|i| (i % 13) as f32 * 0.01).collect();

    let reps = 10;
    let t = Instant::now();
    for _ in 0..reps {
        let g: Graph<f32> = Graph::new();
        let x = g.tensor4(x_data.clone(), b, 32, 28, 28, true).unwrap();
        let k = g.tensor4(k_data.clone(), 32, 32, 3, 3, true).unwrap();
        let _y = x.conv2d(&k, 1, 1).unwrap();
    }
    let fwd = t.elapsed().as_secs_f64() / reps as f64;
    let gflop = (2.0 * (b * 784 * 288 * 32) as f64) / 1e9;
    eprintln!("conv2 fwd: {:.1} ms ({:.2} GFLOP/s)", fwd * 1e3, gflop / fwd);

    let t = Instant::now();
    for _ in 0..reps {
        let g: Graph<f32> = Graph::new();
        let x = g.tensor4(x_data.clone(), b, 32, 28, 28, true).unwrap();
        let k = g.tensor4(k_data.clone(), 32, 32, 3, 3, true).unwrap();
        let y = x.conv2d(&k, 1, 1).unwrap();
        let loss = y.sum_all();
        g.backward(&loss).unwrap();
    }
    let both = t.elapsed().as_secs_f64() / reps as f64;
    eprintln!("conv2 fwd+bwd: {:.1} ms ({:.2} GFLOP/s)", both * 1e3, 3.0 * gflop / both);

    // Sequential path for comparison.
    ccfp::tensor::par::set_parallel(false);
    let t = Instant::now();
    for _ in 0..reps {
        let g: Graph<f32> = Graph::new();
        let x = g.tensor4(x_data.clone(), b, 32, 28, 28, true).unwrap();
        let k = g.tensor4(k_data.clone(), 32, 32, 3, 3, true).unwrap();
        let y = x.conv2d(&k, 1, 1).unwrap();
        let loss = y.sum_all();
        g.backward(&loss).unwrap();
    }
    let seq = t.elapsed().as_secs_f64() / reps as f64;
    eprintln!("conv2 fwd+bwd seq: {:.1} ms ({:.2} GFLOP/s)", seq * 1e3, 3.0 * gflop / seq);
    ccfp::tensor::par::set_parallel(true);
}

#[test]
#[ignore]
fn probe_par_scaling() {
    // How well does map_indexed scale on this machine for conv-sized tasks?
    use std::time::Instant;
    let work = |n: usize| -> f64 {
        let t = Instant::now();
        let v: Vec<f64> = ccfp::tensor::par::map_indexed(n, |i| {
            let mut acc = i as f64;
            for k in 0..2_000_000 {
                acc = acc * 0.999999 + (k % 7) as f64;
            }
            acc
        });
        assert!(v.len() == n);
        t.elapsed().as_secs_f64()
    };
    ccfp::tensor::par::set_parallel(false);
    let seq = work(32);
    ccfp::tensor::par::set_parallel(true);
    let par = work(32);
    eprintln!("par scaling: seq {:.0} ms, par {:.0} ms, speedup {:.2}x", seq * 1e3, par * 1e3, seq / par);
}

#[test]
#[ignore]
fn probe_kernel_direct() {
    use ccfp::tensor::kernels_probe::*;
    let b = 32;
    let x: Vec<f32> = (0..b * 32 * 28 * 28).map(|i| (i % 17) as f32 * 0.05).collect();
    let k: Vec<f32> = (0..32 * 32 * 9).map(|i| (i % 13) as f32 * 0.01).collect();
    let reps = 20;

    let t = std::time::Instant::now();
    let mut sink = 0.0f32;
    for _ in 0..reps {
        let out = conv_forward_probe(&x, &k, b);
        sink += out[0];
    }
    let dt = t.elapsed().as_secs_f64() / reps as f64;
    let gflop = (2.0 * (b * 784 * 288 * 32) as f64) / 1e9;
    eprintln!("kernel fwd direct: {:.1} ms ({:.2} GFLOP/s) sink={sink}", dt * 1e3, gflop / dt);

    let t = std::time::Instant::now();
    for _ in 0..reps {
        sink += matmul_probe_f32();
    }
    let dt = t.elapsed().as_secs_f64() / reps as f64;
    eprintln!("in-crate matmul 784x288x32: {:.3} ms/image-equivalent ({:.2} GFLOP/s) sink={sink}",
        dt * 1e3, (2.0 * (784 * 288 * 32) as f64) / 1e9 / dt);
}
