//! Central finite-difference validation of every differentiable op and of
//! the full networks, at f64 with h = 1e-5.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{no_grad, Tensor};

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub evaluated: usize,
    /// Coordinates rejected by the step-halving consistency test (an
    /// activation kink inside the stencil makes the finite difference
    /// meaningless there).
    pub skipped: usize,
}

/// Compares analytic gradients of `f` (a scalar function of `inputs`)
/// against central finite differences at sampled coordinates.
///
/// Each coordinate is differenced at `h` and `h/2`; if the two estimates
/// disagree, a relu-style kink sits inside the stencil and the coordinate is
/// skipped. On accepted coordinates the kink contamination is bounded by the
/// consistency threshold, so a wrong gradient formula (errors on the order
/// of the gradient itself) cannot hide behind the skip. The relative error
/// uses a 0.01 denominator floor so noise on near-zero gradients does not
/// drown the check.
pub fn check_scalar_fn(
    name: &str,
    inputs: &[Tensor<f64>],
    f: impl Fn() -> Tensor<f64>,
    samples_per_tensor: usize,
    rng: &mut ChaCha8Rng,
) -> CheckReport {
    for t in inputs {
        t.zero_grad();
    }
    let loss = f();
    loss.backward();
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.grad_to_vec().unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    for t in inputs {
        t.zero_grad();
    }

    let mut max_rel = 0.0f64;
    let mut evaluated = 0usize;
    let mut skipped = 0usize;
    for (ti, t) in inputs.iter().enumerate() {
        let n = t.len();
        let samples = samples_per_tensor.min(n);
        for _ in 0..samples {
            let j = rng.gen_range(0..n);
            let orig = t.with_data(|d| d[j]);
            let diff_at = |step: f64| {
                t.with_data_mut(|d| d[j] = orig + step);
                let plus = no_grad(&f).item();
                t.with_data_mut(|d| d[j] = orig - step);
                let minus = no_grad(&f).item();
                t.with_data_mut(|d| d[j] = orig);
                (plus - minus) / (2.0 * step)
            };
            let n_full = diff_at(FD_STEP);
            let n_half = diff_at(FD_STEP * 0.5);
            let scale = n_full.abs().max(n_half.abs()).max(0.01);
            if (n_full - n_half).abs() > 2e-5 * scale {
                skipped += 1;
                continue;
            }
            let a = analytic[ti][j];
            let rel = (a - n_half).abs() / a.abs().max(n_half.abs()).max(0.01);
            max_rel = max_rel.max(rel);
            evaluated += 1;
        }
    }
    CheckReport {
        name: name.to_string(),
        max_rel_err: max_rel,
        evaluated,
        skipped,
    }
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    // Magnitudes in [0.1, 1.1] with random sign keep inputs away from the
    // relu/l1 kinks that finite differences cannot straddle.
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = 0.1 + rng.gen::<f64>();
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::param(shape, data)
}

fn rand_scores(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| 0.2 + 0.6 * rng.gen::<f64>()).collect();
    Tensor::param(shape, data)
}

/// L1 targets strictly above the sigmoid range, so |output - target| never
/// crosses its kink while finite differences perturb the network.
fn far_target(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| 1.5 + rng.gen::<f64>()).collect();
    Tensor::input(shape, data)
}

/// Finite-difference checks for every op in the core, one seed's worth.
pub fn op_suite(seed: u64) -> Vec<CheckReport> {
    use super::ops::*;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let samples = 10;

    {
        let x = rand_tensor(&[1, 2, 5, 5, 5], &mut rng);
        let w = rand_tensor(&[3, 2, 3, 3, 3], &mut rng);
        let b = rand_tensor(&[3], &mut rng);
        let tgt = rand_tensor(&[1, 3, 5, 5, 5], &mut rng);
        for (mode, label) in [(PadMode::Zero, "zero"), (PadMode::Replicate, "replicate")] {
            out.push(check_scalar_fn(
                &format!("conv3d_s1_{label}"),
                &[x.clone(), w.clone(), b.clone()],
                || l1_mean(&conv3d(&x, &w, Some(&b), 1, 1, mode), &tgt),
                samples,
                &mut rng,
            ));
        }
    }
    {
        let x = rand_tensor(&[2, 2, 6, 6, 6], &mut rng);
        let w = rand_tensor(&[2, 2, 4, 4, 4], &mut rng);
        let b = rand_tensor(&[2], &mut rng);
        let tgt = rand_tensor(&[2, 2, 3, 3, 3], &mut rng);
        out.push(check_scalar_fn(
            "conv3d_s2_zero",
            &[x.clone(), w.clone(), b.clone()],
            || l1_mean(&conv3d(&x, &w, Some(&b), 2, 1, PadMode::Zero), &tgt),
            samples,
            &mut rng,
        ));
    }
    {
        let x = rand_tensor(&[1, 2, 3, 3, 3], &mut rng);
        let w = rand_tensor(&[2, 3, 2, 2, 2], &mut rng);
        let b = rand_tensor(&[3], &mut rng);
        let tgt = rand_tensor(&[1, 3, 6, 6, 6], &mut rng);
        out.push(check_scalar_fn(
            "conv3d_transpose_s2",
            &[x.clone(), w.clone(), b.clone()],
            || l1_mean(&conv3d_transpose(&x, &w, Some(&b), 2, 0), &tgt),
            samples,
            &mut rng,
        ));
    }
    {
        let x = rand_tensor(&[1, 2, 4, 4, 4], &mut rng);
        let w = rand_tensor(&[2, 2, 3, 3, 3], &mut rng);
        let tgt = rand_tensor(&[1, 2, 4, 4, 4], &mut rng);
        out.push(check_scalar_fn(
            "conv3d_transpose_s1_pad1",
            &[x.clone(), w.clone()],
            || l1_mean(&conv3d_transpose(&x, &w, None, 1, 1), &tgt),
            samples,
            &mut rng,
        ));
    }
    {
        let x = rand_tensor(&[2, 3, 4, 4, 4], &mut rng);
        let gamma = rand_tensor(&[3], &mut rng);
        let beta = rand_tensor(&[3], &mut rng);
        let tgt = rand_tensor(&[2, 3, 4, 4, 4], &mut rng);
        out.push(check_scalar_fn(
            "instance_norm",
            &[x.clone(), gamma.clone(), beta.clone()],
            || l1_mean(&instance_norm(&x, &gamma, &beta, 1e-5), &tgt),
            samples,
            &mut rng,
        ));
    }
    {
        let x = rand_tensor(&[1, 2, 4, 4, 4], &mut rng);
        let tgt = rand_tensor(&[1, 2, 4, 4, 4], &mut rng);
        let checks: Vec<(&str, Box<dyn Fn(&Tensor<f64>) -> Tensor<f64>>)> = vec![
            ("leaky_relu", Box::new(|v| leaky_relu(v, 0.2))),
            ("relu", Box::new(relu)),
            ("tanh", Box::new(tanh)),
            ("sigmoid", Box::new(sigmoid)),
            ("scale", Box::new(|v| scale(v, 3.7))),
        ];
        for (name, op) in checks {
            out.push(check_scalar_fn(
                name,
                &[x.clone()],
                || l1_mean(&op(&x), &tgt),
                samples,
                &mut rng,
            ));
        }
    }
    {
        let x = rand_tensor(&[1, 1, 4, 4, 4], &mut rng);
        let tgt = rand_tensor(&[1, 1, 4, 4, 4], &mut rng);
        out.push(check_scalar_fn(
            "dropout",
            &[x.clone()],
            || {
                let mut drop_rng = ChaCha8Rng::seed_from_u64(99);
                l1_mean(&dropout(&x, 0.4, true, &mut drop_rng), &tgt)
            },
            samples,
            &mut rng,
        ));
    }
    {
        let x = rand_tensor(&[1, 2, 4, 4, 4], &mut rng);
        let tgt_up = rand_tensor(&[1, 2, 8, 8, 8], &mut rng);
        out.push(check_scalar_fn(
            "nearest_upsample2",
            &[x.clone()],
            || l1_mean(&nearest_upsample2(&x), &tgt_up),
            samples,
            &mut rng,
        ));
        let tgt_down = rand_tensor(&[1, 2, 2, 2, 2], &mut rng);
        out.push(check_scalar_fn(
            "avg_downsample2",
            &[x.clone()],
            || l1_mean(&avg_downsample2(&x), &tgt_down),
            samples,
            &mut rng,
        ));
    }
    {
        let a = rand_tensor(&[1, 1, 3, 3, 3], &mut rng);
        let b = rand_tensor(&[1, 2, 3, 3, 3], &mut rng);
        let tgt = rand_tensor(&[1, 3, 3, 3, 3], &mut rng);
        out.push(check_scalar_fn(
            "concat_add",
            &[a.clone(), b.clone()],
            || {
                let cat = concat_channels(&[&a, &b]);
                l1_mean(&add(&cat, &cat), &tgt)
            },
            samples,
            &mut rng,
        ));
    }
    {
        let s = rand_scores(&[1, 1, 3, 3, 3], &mut rng);
        out.push(check_scalar_fn(
            "adv_real_loss",
            &[s.clone()],
            || adv_real_loss(&s),
            samples,
            &mut rng,
        ));
        out.push(check_scalar_fn(
            "adv_fake_loss",
            &[s.clone()],
            || adv_fake_loss(&s),
            samples,
            &mut rng,
        ));
    }
    {
        let a = rand_tensor(&[1, 1, 3, 3, 3], &mut rng);
        let b = rand_tensor(&[1, 1, 3, 3, 3], &mut rng);
        out.push(check_scalar_fn(
            "l1_mean",
            &[a.clone(), b.clone()],
            || l1_mean(&a, &b),
            samples,
            &mut rng,
        ));
    }
    out
}

/// Finite-difference checks through small instances of the three full
/// networks (inputs and all parameters).
pub fn network_suite(seed: u64) -> Vec<CheckReport> {
    use super::ops::l1_mean;
    use crate::models::{
        build_discriminator, build_hr_generator, build_lr_generator, Ctx, NetConfig,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut out = Vec::new();
    let samples = 4;

    {
        // 32^3 input keeps every normalized feature map above one voxel;
        // a single-voxel bottleneck would pin pre-activations exactly onto
        // the leaky-relu kink, which central differences cannot straddle.
        let cfg = NetConfig::lr_generator(16, 4);
        let net = build_lr_generator::<f64>(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let x = rand_tensor(&[1, 1, 32, 32, 32], &mut rng);
        let tgt = far_target(&[1, 1, 16, 16, 16], &mut rng);
        let mut inputs = vec![x.clone()];
        inputs.extend(net.parameters());
        out.push(check_scalar_fn(
            "lr_unet_full",
            &inputs,
            || {
                let y = net.forward(&x, &mut Ctx::train(77)).unwrap();
                l1_mean(&y, &tgt)
            },
            samples,
            &mut rng,
        ));
    }
    {
        let cfg = NetConfig::hr_generator(8, 6, 2);
        let net = build_hr_generator::<f64>(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let x = rand_tensor(&[1, 2, 8, 8, 8], &mut rng);
        let tgt = far_target(&[1, 1, 8, 8, 8], &mut rng);
        let mut inputs = vec![x.clone()];
        inputs.extend(net.parameters());
        out.push(check_scalar_fn(
            "hr_resnet_full",
            &inputs,
            || {
                let y = net.forward(&x, &mut Ctx::eval()).unwrap();
                l1_mean(&y, &tgt)
            },
            samples,
            &mut rng,
        ));
    }
    {
        let cfg = NetConfig::discriminator(2, 4, 0, 32);
        let net = build_discriminator::<f64>(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let x = rand_tensor(&[1, 2, 32, 32, 32], &mut rng);
        let tgt = far_target(&[1, 1, 2, 2, 2], &mut rng);
        let mut inputs = vec![x.clone()];
        inputs.extend(net.parameters());
        out.push(check_scalar_fn(
            "discriminator_full",
            &inputs,
            || {
                let y = net.forward(&x).unwrap();
                l1_mean(&y, &tgt)
            },
            samples,
            &mut rng,
        ));
    }
    out
}
