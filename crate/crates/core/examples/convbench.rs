use std::time::Instant;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxgan::nn::*;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // LR U-Net's enc1-like conv: 16ch 32^3 -> 32ch 16^3 stride 2 (57M MAC)
    let n = 16 * 32 * 32 * 32;
    let x = Tensor::<f32>::param(&[1, 16, 32, 32, 32], (0..n).map(|_| rng.gen()).collect());
    let w = Tensor::<f32>::param(&[32, 16, 3, 3, 3], (0..32*16*27).map(|_| rng.gen::<f32>() * 0.1).collect());
    let b = Tensor::<f32>::param(&[32], vec![0.0; 32]);
    // warmup
    let _ = conv3d(&x, &w, Some(&b), 2, 1, PadMode::Replicate);
    let t = Instant::now();
    let iters = 20;
    for _ in 0..iters {
        let y = conv3d(&x, &w, Some(&b), 2, 1, PadMode::Replicate);
        std::hint::black_box(y.len());
    }
    let fwd = t.elapsed().as_secs_f64() / iters as f64;
    let macs = 16.0 * 32.0 * 27.0 * (16.0f64 * 16.0 * 16.0);
    println!("fwd conv s2: {:.1} ms -> {:.2} GMAC/s", fwd * 1e3, macs / fwd / 1e9);

    // HR-like conv: 32ch 16^3 -> 32ch 16^3 stride 1 (113M MAC)
    let n = 32 * 16 * 16 * 16;
    let x = Tensor::<f32>::param(&[1, 32, 16, 16, 16], (0..n).map(|_| rng.gen()).collect());
    let w = Tensor::<f32>::param(&[32, 32, 3, 3, 3], (0..32*32*27).map(|_| rng.gen::<f32>() * 0.1).collect());
    let b = Tensor::<f32>::param(&[32], vec![0.0; 32]);
    let _ = conv3d(&x, &w, Some(&b), 1, 1, PadMode::Replicate);
    let t = Instant::now();
    for _ in 0..iters {
        let y = conv3d(&x, &w, Some(&b), 1, 1, PadMode::Replicate);
        std::hint::black_box(y.len());
    }
    let fwd = t.elapsed().as_secs_f64() / iters as f64;
    let macs = 32.0 * 32.0 * 27.0 * (16.0f64 * 16.0 * 16.0);
    println!("fwd conv s1: {:.1} ms -> {:.2} GMAC/s", fwd * 1e3, macs / fwd / 1e9);

    // fwd+bwd
    let t = Instant::now();
    for _ in 0..iters {
        let y = conv3d(&x, &w, Some(&b), 1, 1, PadMode::Replicate);
        let loss = mean_all(&y);
        loss.backward();
        x.zero_grad(); w.zero_grad(); b.zero_grad();
    }
    let total = t.elapsed().as_secs_f64() / iters as f64;
    println!("fwd+bwd conv s1: {:.1} ms", total * 1e3);
}
