use mibench_core::autodiff::linalg;
use std::time::Instant;

fn main() {
    // the dominant shape in joint-critic training: (4096×256)·(256×256)
    let (m, k, n) = (4096, 256, 256);
    let a = vec![1.0_f64; m * k];
    let b = vec![1.0_f64; k * n];
    let mut c = vec![0.0_f64; m * n];
    // warmup
    for _ in 0..3 {
        linalg::matmul(m, k, n, &a, &b, &mut c);
    }
    let reps = 20;
    let t0 = Instant::now();
    for _ in 0..reps {
        linalg::matmul(m, k, n, &a, &b, &mut c);
    }
    let dt = t0.elapsed().as_secs_f64();
    let flops = 2.0 * (m * k * n) as f64 * reps as f64;
    println!("dgemm {}x{}x{}: {:.1} ms/call, {:.2} GFLOP/s", m, k, n, 1e3 * dt / reps as f64, flops / dt / 1e9);
}
