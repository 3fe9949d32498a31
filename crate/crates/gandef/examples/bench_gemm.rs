use gandef::tensor::{gemm, pack_b, gemm_prepacked};
use std::time::Instant;

fn bench(m: usize, k: usize, n: usize, reps: usize, label: &str) {
    let a: Vec<f64> = (0..m*k).map(|i| (i % 97) as f64 * 0.01).collect();
    let b: Vec<f64> = (0..k*n).map(|i| (i % 89) as f64 * 0.01).collect();
    let mut c = vec![0.0; m*n];
    // warmup
    gemm(m, k, n, &a, &b, &mut c);
    let t0 = Instant::now();
    for _ in 0..reps {
        c.iter_mut().for_each(|v| *v = 0.0);
        gemm(m, k, n, &a, &b, &mut c);
    }
    let dt = t0.elapsed().as_secs_f64();
    let gflops = (2.0 * (m*k*n*reps) as f64) / dt / 1e9;
    println!("{label:30} {m}x{k}x{n}: {gflops:.1} GFLOP/s ({:.1} ms/call)", dt*1000.0/reps as f64);
}

fn bench_st(m: usize, k: usize, n: usize, reps: usize, label: &str) {
    let a: Vec<f64> = (0..m*k).map(|i| (i % 97) as f64 * 0.01).collect();
    let b: Vec<f64> = (0..k*n).map(|i| (i % 89) as f64 * 0.01).collect();
    let pb = pack_b(k, n, &b);
    let mut c = vec![0.0; m*n];
    gemm_prepacked(m, &a, false, &pb, &mut c, false);
    let t0 = Instant::now();
    for _ in 0..reps {
        c.iter_mut().for_each(|v| *v = 0.0);
        gemm_prepacked(m, &a, false, &pb, &mut c, false);
    }
    let dt = t0.elapsed().as_secs_f64();
    let gflops = (2.0 * (m*k*n*reps) as f64) / dt / 1e9;
    println!("{label:30} {m}x{k}x{n}: {gflops:.1} GFLOP/s single-thread prepacked");
}

fn main() {
    println!("threads: {}", rayon::current_num_threads());
    bench_st(196, 800, 64, 200, "conv2-shaped per-image");
    bench_st(784, 25, 32, 400, "conv1-shaped per-image");
    bench(512, 512, 512, 20, "square 512 (par)");
    bench(128, 3136, 1024, 10, "fc1 fwd (par)");
    bench(3136, 128, 1024, 10, "fc1 dW (par)");
    bench(25088, 800, 64, 4, "conv2 batched-rows (par)");
}
