//! Per-scale alternating adversarial training and full-cascade inference.
//!
//! HR scales train with teacher forcing: the previous-scale input is the
//! real image downsampled to the previous working shape, degraded by the
//! augmentation recipe (noise, blur, resolution halving) so the generator
//! learns to cope with the imperfect lower-scale outputs it will see at
//! inference. Scales therefore never depend on each other during training.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::models::{
    build_discriminator, build_hr_generator, build_lr_generator, Ctx, GeneratorNet, NetConfig,
};
use crate::nn::{
    self, adv_fake_loss, adv_real_loss, concat_channels, l1_mean, no_grad, Adam, AdamHyper,
    Tensor,
};
use crate::plan::{extract_patch, patch_grid, upsample_patch, Region, ScalePlan};
use crate::sketch::{canny3d, gaussian_blur3, overlay_labels, LabelTransform, Sketch};
use crate::volume::{resample_trilinear, Volume3};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub scale: usize,
    pub epochs: usize,
    pub patches_per_volume: usize,
    pub adam: AdamHyper,
    pub lambda_l1: f64,
    /// Gaussian blur probability for the previous-scale patch.
    pub p_blur: f64,
    /// Resolution-halving probability for the previous-scale patch.
    pub p_res_halve: f64,
    /// Additive noise std for both inputs.
    pub noise_std: f64,
    pub seed: u64,
    pub use_edges: bool,
    pub use_prev_scale: bool,
    pub lr_base_channels: usize,
    pub hr_channels: usize,
    pub hr_res_blocks: usize,
    pub disc_base_channels: usize,
}

impl TrainConfig {
    pub fn new(scale: usize, seed: u64) -> Self {
        TrainConfig {
            scale,
            epochs: 1,
            patches_per_volume: 4,
            adam: AdamHyper::default(),
            lambda_l1: 100.0,
            p_blur: 0.30,
            p_res_halve: 0.20,
            noise_std: 0.05,
            seed,
            use_edges: true,
            use_prev_scale: true,
            lr_base_channels: 16,
            hr_channels: 32,
            hr_res_blocks: 6,
            disc_base_channels: 16,
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, p) in [("p_blur", self.p_blur), ("p_res_halve", self.p_res_halve)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} must be in [0,1], got {p}")));
            }
        }
        if self.noise_std < 0.0 {
            return Err(Error::invalid("noise_std must be >= 0"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CannyParams {
    pub sigma: f64,
    pub lo_pct: f64,
    pub hi_pct: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        CannyParams {
            sigma: 1.0,
            lo_pct: 0.7,
            hi_pct: 0.9,
        }
    }
}

// ---------------------------------------------------------------------------
// Dataset preparation
// ---------------------------------------------------------------------------

/// One training item resampled for a given scale: the target at the working
/// shape, the teacher-forcing source at the previous shape, and the sketch
/// extracted at this scale's native resolution.
pub struct ScaleSample {
    pub target: Volume3,
    pub prev: Option<Volume3>,
    pub sketch: Volume3,
    pub mask: Option<Volume3>,
}

fn mask_at(mask: &Volume3, shape: [usize; 3]) -> Result<Volume3> {
    let r = resample_trilinear(mask, shape)?;
    Ok(Volume3::from_voxels(
        shape,
        r.spacing(),
        r.voxels().iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect(),
    )?)
}

fn sketch_at(
    vol: &Volume3,
    mask: Option<&Volume3>,
    shape: [usize; 3],
    canny: &CannyParams,
) -> Result<(Sketch, Option<Volume3>)> {
    let level = resample_trilinear(vol, shape)?;
    let mut sk = canny3d(&level, canny.sigma, canny.lo_pct, canny.hi_pct)?;
    let mut mask_level = None;
    if let Some(m) = mask {
        let ml = mask_at(m, shape)?;
        sk = overlay_labels(&sk, &ml, LabelTransform::Identity)?;
        mask_level = Some(ml);
    }
    Ok((sk, mask_level))
}

/// Resamples volumes (padded to the last working cube when the original
/// shape is not a power-of-two cube) and extracts per-scale sketches.
pub fn prepare_scale_dataset(
    items: &[(Volume3, Option<Volume3>)],
    plan: &ScalePlan,
    scale: usize,
    canny: &CannyParams,
) -> Result<Vec<ScaleSample>> {
    if scale > plan.n_scales() {
        return Err(Error::invalid(format!(
            "scale {scale} out of range 0..={}",
            plan.n_scales()
        )));
    }
    let full = plan.working_shape(plan.n_scales());
    let mut out = Vec::with_capacity(items.len());
    for (vol, mask) in items {
        for a in 0..3 {
            if vol.shape()[a] > full[a] {
                return Err(Error::invalid(format!(
                    "volume shape {:?} exceeds the plan's working shape {full:?}",
                    vol.shape()
                )));
            }
        }
        let v_full = vol.pad_to_shape(full);
        let m_full = mask.as_ref().map(|m| m.pad_to_shape(full));

        let target = resample_trilinear(&v_full, plan.working_shape(scale))?;
        let prev = if scale >= 1 {
            Some(resample_trilinear(&v_full, plan.working_shape(scale - 1))?)
        } else {
            None
        };
        let sketch_shape = if scale == 0 {
            [plan.lr_sketch_side(); 3]
        } else {
            plan.working_shape(scale)
        };
        let (sketch, mask_level) = sketch_at(&v_full, m_full.as_ref(), sketch_shape, canny)?;
        out.push(ScaleSample {
            target,
            prev,
            sketch: sketch.volume,
            mask: mask_level,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

/// Sampled augmentation decisions for one patch pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentPlan {
    pub blur_sigma: Option<f64>,
    pub res_halve: bool,
}

/// Draws the augmentation decisions in a fixed order: blur coin, blur sigma
/// (only when hit), halving coin.
pub fn sample_augment_plan(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> AugmentPlan {
    let blur_sigma = if rng.gen::<f64>() < cfg.p_blur {
        Some(0.5 + 0.5 * rng.gen::<f64>())
    } else {
        None
    };
    let res_halve = rng.gen::<f64>() < cfg.p_res_halve;
    AugmentPlan {
        blur_sigma,
        res_halve,
    }
}

/// 2x average-downsample followed by nearest-upsample; the patch becomes
/// piecewise constant on 2^3 blocks.
pub fn res_halve(v: &Volume3) -> Volume3 {
    let [nz, ny, nx] = v.shape();
    assert!(
        nz % 2 == 0 && ny % 2 == 0 && nx % 2 == 0,
        "res_halve needs even dims"
    );
    let mut coarse = vec![0.0f32; nz / 2 * ny / 2 * nx / 2];
    for z in 0..nz / 2 {
        for y in 0..ny / 2 {
            for x in 0..nx / 2 {
                let mut acc = 0.0f64;
                for dz in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc += v.get(2 * z + dz, 2 * y + dy, 2 * x + dx) as f64;
                        }
                    }
                }
                coarse[(z * (ny / 2) + y) * (nx / 2) + x] = (acc / 8.0) as f32;
            }
        }
    }
    Volume3::from_fn(v.shape(), v.spacing(), |z, y, x| {
        coarse[((z / 2) * (ny / 2) + y / 2) * (nx / 2) + x / 2]
    })
}

fn add_noise(v: &Volume3, std: f64, rng: &mut ChaCha8Rng) -> Volume3 {
    if std == 0.0 {
        return v.clone();
    }
    let dist = Normal::new(0.0, std).unwrap();
    Volume3::from_voxels(
        v.shape(),
        v.spacing(),
        v.voxels()
            .iter()
            .map(|&x| (x as f64 + dist.sample(rng)).clamp(0.0, 1.0) as f32)
            .collect(),
    )
    .expect("noise produced invalid volume")
}

/// Degrades a teacher-forced previous-scale patch and its sketch patch:
/// optional blur (sigma in [0.5, 1.0]) and resolution halving on the
/// previous-scale patch, additive clamped Gaussian noise on both.
pub fn augment_patch(
    prev_patch: &Volume3,
    sketch_patch: &Volume3,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> (Volume3, Volume3) {
    assert_eq!(
        prev_patch.shape(),
        sketch_patch.shape(),
        "augment_patch needs same-shape patches"
    );
    let plan = sample_augment_plan(cfg, rng);
    let mut prev = prev_patch.clone();
    if let Some(sigma) = plan.blur_sigma {
        prev = gaussian_blur3(&prev, sigma);
    }
    if plan.res_halve {
        prev = res_halve(&prev);
    }
    let prev = add_noise(&prev, cfg.noise_std, rng);
    let sketch = add_noise(sketch_patch, cfg.noise_std, rng);
    (prev, sketch)
}

// ---------------------------------------------------------------------------
// Volume <-> tensor plumbing
// ---------------------------------------------------------------------------

pub fn volume_to_tensor(v: &Volume3) -> Tensor<f32> {
    let [nz, ny, nx] = v.shape();
    Tensor::input(&[1, 1, nz, ny, nx], v.voxels().to_vec())
}

pub fn tensor_to_volume(t: &Tensor<f32>, spacing: [f64; 3]) -> Volume3 {
    let s = t.shape();
    assert!(s.len() == 5 && s[0] == 1 && s[1] == 1, "expected [1,1,z,y,x]");
    Volume3::from_voxels([s[2], s[3], s[4]], spacing, t.to_vec())
        .expect("tensor held non-finite values")
}

fn zeros_like(v: &Volume3) -> Volume3 {
    Volume3::constant(v.shape(), v.spacing(), 0.0)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct LossRow {
    pub step: usize,
    pub loss_d: f64,
    pub loss_g_adv: f64,
    pub loss_g_l1: f64,
}

pub struct TrainedScale {
    pub generator: GeneratorNet,
    pub ckpt_path: PathBuf,
    pub log: Vec<LossRow>,
}

fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |s: String| w.write_all(s.as_bytes()).map_err(|e| Error::io(path, e));
    put("step,loss_d,loss_g_adv,loss_g_l1\n".to_string())?;
    for r in rows {
        put(format!(
            "{},{:.9e},{:.9e},{:.9e}\n",
            r.step, r.loss_d, r.loss_g_adv, r.loss_g_l1
        ))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

struct History(Vec<(usize, f64, f64)>);

impl History {
    fn push(&mut self, step: usize, d: f64, g: f64) {
        self.0.push((step, d, g));
        if self.0.len() > 20 {
            self.0.remove(0);
        }
    }
}

/// Even patch start positions keep cross-scale center alignment on the voxel
/// grid; 50% of draws are centered on a mask voxel when a mask exists.
fn sample_out_region(
    side: usize,
    patch: usize,
    mask_voxels: Option<&Vec<[i64; 3]>>,
    rng: &mut ChaCha8Rng,
) -> Region {
    let max_start = (side - patch) as i64;
    let mut start = [0i64; 3];
    let centered = match mask_voxels {
        Some(v) if !v.is_empty() => rng.gen_bool(0.5),
        _ => false,
    };
    if centered {
        let voxels = mask_voxels.unwrap();
        let c = voxels[rng.gen_range(0..voxels.len())];
        for a in 0..3 {
            let s = (c[a] - patch as i64 / 2).clamp(0, max_start);
            start[a] = s & !1;
        }
    } else {
        for a in 0..3 {
            start[a] = 2 * rng.gen_range(0..=max_start / 2);
        }
    }
    Region::new(
        start,
        [
            start[0] + patch as i64,
            start[1] + patch as i64,
            start[2] + patch as i64,
        ],
    )
}

fn in_region_for(out: &Region, patch: usize) -> Region {
    let q = patch as i64 / 4;
    let lo = [out.lo[0] / 2 - q, out.lo[1] / 2 - q, out.lo[2] / 2 - q];
    Region::new(lo, [lo[0] + patch as i64, lo[1] + patch as i64, lo[2] + patch as i64])
}

/// Trains one scale with alternating D/G steps and returns the generator.
/// Writes per-epoch CKPT1 checkpoints and a loss CSV into `out_dir`.
pub fn train_scale(
    dataset: &[ScaleSample],
    plan: &ScalePlan,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainedScale> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("empty training dataset"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    if cfg.scale > plan.n_scales() {
        return Err(Error::invalid(format!(
            "scale {} out of range 0..={}",
            cfg.scale,
            plan.n_scales()
        )));
    }
    let patch = plan.patch_side();
    let disc_side = if cfg.scale == 0 { plan.lr_side() } else { patch };
    let disc_div = 1usize
        << NetConfig::discriminator(2, cfg.disc_base_channels, 0, disc_side).disc_depth();
    if disc_side % disc_div != 0 {
        return Err(Error::invalid(format!(
            "discriminator input side {disc_side} must be divisible by {disc_div}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let generator: GeneratorNet;
    let disc;
    if cfg.scale == 0 {
        let gcfg = NetConfig::lr_generator(plan.lr_side(), cfg.lr_base_channels);
        generator = GeneratorNet::Lr(build_lr_generator(&gcfg, &mut rng)?);
        disc = build_discriminator(
            &NetConfig::discriminator(2, cfg.disc_base_channels, 0, plan.lr_side()),
            &mut rng,
        )?;
    } else {
        let gcfg = NetConfig::hr_generator(patch, cfg.hr_channels, cfg.hr_res_blocks);
        generator = GeneratorNet::Hr(build_hr_generator(&gcfg, &mut rng)?);
        disc = build_discriminator(
            &NetConfig::discriminator(3, cfg.disc_base_channels, cfg.scale, patch),
            &mut rng,
        )?;
    }
    let g_params = match &generator {
        GeneratorNet::Lr(n) => n.parameters(),
        GeneratorNet::Hr(n) => n.parameters(),
    };
    let mut adam_g = Adam::new(g_params, cfg.adam);
    let mut adam_d = Adam::new(disc.parameters(), cfg.adam);

    // Mask voxel coordinates per sample, for the 50% lesion-centered draws.
    let mask_voxels: Vec<Option<Vec<[i64; 3]>>> = dataset
        .iter()
        .map(|s| {
            s.mask.as_ref().map(|m| {
                let [_, ny, nx] = m.shape();
                m.voxels()
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v >= 0.5)
                    .map(|(i, _)| {
                        [
                            (i / (ny * nx)) as i64,
                            ((i / nx) % ny) as i64,
                            (i % nx) as i64,
                        ]
                    })
                    .collect()
            })
        })
        .collect();

    let mut log = Vec::new();
    let mut history = History(Vec::new());
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &idx in &order {
            let sample = &dataset[idx];
            let reps = if cfg.scale == 0 {
                1
            } else {
                cfg.patches_per_volume
            };
            for _ in 0..reps {
                let row = if cfg.scale == 0 {
                    train_step_lr(sample, cfg, &generator, &disc, &mut adam_g, &mut adam_d, &mut rng, step)?
                } else {
                    train_step_hr(
                        sample,
                        plan,
                        cfg,
                        &generator,
                        &disc,
                        &mut adam_g,
                        &mut adam_d,
                        mask_voxels[idx].as_ref(),
                        &mut rng,
                        step,
                    )?
                };
                if !row.loss_d.is_finite() || !row.loss_g_adv.is_finite() || !row.loss_g_l1.is_finite()
                {
                    return Err(Error::NanLoss {
                        step,
                        history: history.0.clone(),
                    });
                }
                history.push(step, row.loss_d, row.loss_g_adv + row.loss_g_l1);
                log.push(row);
                step += 1;
            }
        }
        let ep_path = out_dir.join(format!("g_scale{}_ep{:03}.ckpt", cfg.scale, epoch));
        generator.save(&ep_path, cfg.seed)?;
    }

    let ckpt_path = out_dir.join(format!("g_scale{}.ckpt", cfg.scale));
    generator.save(&ckpt_path, cfg.seed)?;
    write_loss_csv(&out_dir.join(format!("losses_scale{}.csv", cfg.scale)), &log)?;
    Ok(TrainedScale {
        generator,
        ckpt_path,
        log,
    })
}

#[allow(clippy::too_many_arguments)]
fn train_step_lr(
    sample: &ScaleSample,
    cfg: &TrainConfig,
    generator: &GeneratorNet,
    disc: &crate::models::PatchDiscriminator<f32>,
    adam_g: &mut Adam<f32>,
    adam_d: &mut Adam<f32>,
    rng: &mut ChaCha8Rng,
    step: usize,
) -> Result<LossRow> {
    let net = match generator {
        GeneratorNet::Lr(n) => n,
        _ => unreachable!(),
    };
    let sketch_src = if cfg.use_edges {
        sample.sketch.clone()
    } else {
        zeros_like(&sample.sketch)
    };
    let sketch_aug = add_noise(&sketch_src, cfg.noise_std, rng);
    let x = volume_to_tensor(&sketch_aug);
    let y_real = volume_to_tensor(&sample.target);
    let ctx_seed = rng.gen::<u64>();

    let fake = net.forward(&x, &mut Ctx::train(ctx_seed))?;
    // Both discriminator inputs share the LR grid.
    let x_lr = nn::avg_downsample2(&x);

    let d_real = disc.forward(&concat_channels(&[&x_lr, &y_real]))?;
    let fake_det = fake.detach();
    let d_fake = disc.forward(&concat_channels(&[&x_lr, &fake_det]))?;
    let loss_d = nn::add(&adv_real_loss(&d_real), &adv_fake_loss(&d_fake));
    adam_d.zero_grad();
    loss_d.backward();
    adam_d.step();

    let d_fake_g = disc.forward(&concat_channels(&[&x_lr, &fake]))?;
    let adv = adv_real_loss(&d_fake_g);
    let l1 = l1_mean(&fake, &y_real);
    let loss_g = nn::add(&adv, &nn::scale(&l1, cfg.lambda_l1));
    adam_g.zero_grad();
    adam_d.zero_grad();
    loss_g.backward();
    adam_g.step();

    Ok(LossRow {
        step,
        loss_d: loss_d.item() as f64,
        loss_g_adv: adv.item() as f64,
        loss_g_l1: cfg.lambda_l1 * l1.item() as f64,
    })
}

#[allow(clippy::too_many_arguments)]
fn train_step_hr(
    sample: &ScaleSample,
    plan: &ScalePlan,
    cfg: &TrainConfig,
    generator: &GeneratorNet,
    disc: &crate::models::PatchDiscriminator<f32>,
    adam_g: &mut Adam<f32>,
    adam_d: &mut Adam<f32>,
    mask_voxels: Option<&Vec<[i64; 3]>>,
    rng: &mut ChaCha8Rng,
    step: usize,
) -> Result<LossRow> {
    let net = match generator {
        GeneratorNet::Hr(n) => n,
        _ => unreachable!(),
    };
    let patch = plan.patch_side();
    let side = plan.working_side(cfg.scale);
    let prev_side = plan.working_side(cfg.scale - 1);
    let prev_full = sample
        .prev
        .as_ref()
        .ok_or_else(|| Error::invalid("HR sample missing previous-scale volume"))?;

    let out_region = sample_out_region(side, patch, mask_voxels, rng);
    let in_region = in_region_for(&out_region, patch);

    let prev_patch = extract_patch(prev_full, &in_region);
    let sketch_patch = extract_patch(&sample.sketch, &out_region);
    let target_patch = extract_patch(&sample.target, &out_region);

    let (prev_aug, sketch_aug) = augment_patch(&prev_patch, &sketch_patch, cfg, rng);
    let prev_up = upsample_patch(&prev_aug, &in_region, &out_region, prev_side, side);

    let sketch_in = if cfg.use_edges {
        sketch_aug
    } else {
        zeros_like(&sketch_patch)
    };
    let prev_in = if cfg.use_prev_scale {
        prev_up
    } else {
        zeros_like(&target_patch)
    };

    let sketch_t = volume_to_tensor(&sketch_in);
    let prev_t = volume_to_tensor(&prev_in);
    let target_t = volume_to_tensor(&target_patch);
    let x = concat_channels(&[&sketch_t, &prev_t]);
    let ctx_seed = rng.gen::<u64>();
    let fake = net.forward(&x, &mut Ctx::train(ctx_seed))?;

    let d_real = disc.forward(&concat_channels(&[&sketch_t, &prev_t, &target_t]))?;
    let fake_det = fake.detach();
    let d_fake = disc.forward(&concat_channels(&[&sketch_t, &prev_t, &fake_det]))?;
    let loss_d = nn::add(&adv_real_loss(&d_real), &adv_fake_loss(&d_fake));
    adam_d.zero_grad();
    loss_d.backward();
    adam_d.step();

    let d_fake_g = disc.forward(&concat_channels(&[&sketch_t, &prev_t, &fake]))?;
    let adv = adv_real_loss(&d_fake_g);
    let l1 = l1_mean(&fake, &target_t);
    let loss_g = nn::add(&adv, &nn::scale(&l1, cfg.lambda_l1));
    adam_g.zero_grad();
    adam_d.zero_grad();
    loss_g.backward();
    adam_g.step();

    Ok(LossRow {
        step,
        loss_d: loss_d.item() as f64,
        loss_g_adv: adv.item() as f64,
        loss_g_l1: cfg.lambda_l1 * l1.item() as f64,
    })
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct AblationFlags {
    pub use_edges: bool,
    pub use_prev_scale: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            use_edges: true,
            use_prev_scale: true,
        }
    }
}

/// Anything that can drive the cascade: trained networks, or stubs for
/// geometry tests.
pub trait CascadeGenerator {
    /// Whole-image LR generation from the 2x sketch.
    fn generate_lr(&self, sketch_lr: &Volume3) -> Result<Volume3>;
    /// One patch refinement at `scale` from the sketch patch and the
    /// upsampled previous-scale patch.
    fn generate_patch(&self, scale: usize, sketch: &Volume3, prev_up: &Volume3)
        -> Result<Volume3>;
}

/// Trained generators loaded from CKPT1 files `g_scale0.ckpt ..
/// g_scale{n}.ckpt`.
pub struct TrainedCascade {
    pub lr: crate::models::LrUnet<f32>,
    pub hr: Vec<crate::models::HrResnet<f32>>,
}

impl TrainedCascade {
    pub fn load(ckpt_dir: &Path, n_scales: usize) -> Result<Self> {
        let lr = match GeneratorNet::load(ckpt_dir.join("g_scale0.ckpt"))? {
            GeneratorNet::Lr(n) => n,
            _ => return Err(Error::invalid("g_scale0.ckpt is not an LR generator")),
        };
        let mut hr = Vec::new();
        for i in 1..=n_scales {
            match GeneratorNet::load(ckpt_dir.join(format!("g_scale{i}.ckpt")))? {
                GeneratorNet::Hr(n) => hr.push(n),
                _ => {
                    return Err(Error::invalid(format!(
                        "g_scale{i}.ckpt is not an HR generator"
                    )))
                }
            }
        }
        Ok(TrainedCascade { lr, hr })
    }
}

impl CascadeGenerator for TrainedCascade {
    fn generate_lr(&self, sketch_lr: &Volume3) -> Result<Volume3> {
        no_grad(|| {
            let x = volume_to_tensor(sketch_lr);
            let y = self.lr.forward(&x, &mut Ctx::eval())?;
            Ok(tensor_to_volume(&y, sketch_lr.spacing()))
        })
    }

    fn generate_patch(
        &self,
        scale: usize,
        sketch: &Volume3,
        prev_up: &Volume3,
    ) -> Result<Volume3> {
        let net = self.hr.get(scale - 1).ok_or_else(|| {
            Error::invalid(format!("no checkpoint for scale {scale} (have {})", self.hr.len()))
        })?;
        no_grad(|| {
            let x = concat_channels(&[&volume_to_tensor(sketch), &volume_to_tensor(prev_up)]);
            let y = net.forward(&x, &mut Ctx::eval())?;
            Ok(tensor_to_volume(&y, sketch.spacing()))
        })
    }
}

/// Identity stub: emits a fixed LR volume and passes the upsampled
/// previous-scale patch through unchanged. The cascade then reproduces plain
/// trilinear upsampling, which is the geometry oracle.
pub struct IdentityCascade {
    pub y0: Volume3,
}

impl CascadeGenerator for IdentityCascade {
    fn generate_lr(&self, _sketch_lr: &Volume3) -> Result<Volume3> {
        Ok(self.y0.clone())
    }

    fn generate_patch(
        &self,
        _scale: usize,
        _sketch: &Volume3,
        prev_up: &Volume3,
    ) -> Result<Volume3> {
        Ok(prev_up.clone())
    }
}

/// Runs the full cascade: LR whole-image generation, then per-scale patch
/// refinement with receptive-field cropping and seam-free reassembly.
/// Returns one volume per scale; the last is cropped to the plan's original
/// shape.
pub fn infer_cascade(
    model: &dyn CascadeGenerator,
    sketch_pyramid: &[Sketch],
    plan: &ScalePlan,
    valid_margin: usize,
    flags: AblationFlags,
) -> Result<Vec<Volume3>> {
    let n = plan.n_scales();
    if sketch_pyramid.len() != n + 1 {
        return Err(Error::invalid(format!(
            "sketch pyramid has {} levels, plan needs {}",
            sketch_pyramid.len(),
            n + 1
        )));
    }
    let lr_sketch_shape = [plan.lr_sketch_side(); 3];
    if sketch_pyramid[0].volume.shape() != lr_sketch_shape {
        return Err(Error::invalid(format!(
            "LR sketch shape {:?} does not match {:?}",
            sketch_pyramid[0].volume.shape(),
            lr_sketch_shape
        )));
    }
    for i in 1..=n {
        if sketch_pyramid[i].volume.shape() != plan.working_shape(i) {
            return Err(Error::invalid(format!(
                "sketch level {i} shape {:?} does not match working shape {:?}",
                sketch_pyramid[i].volume.shape(),
                plan.working_shape(i)
            )));
        }
    }

    let x0 = if flags.use_edges {
        sketch_pyramid[0].volume.clone()
    } else {
        zeros_like(&sketch_pyramid[0].volume)
    };
    let y0 = model.generate_lr(&x0)?;
    if y0.shape() != plan.working_shape(0) {
        return Err(Error::invalid(format!(
            "LR generator produced {:?}, plan needs {:?}",
            y0.shape(),
            plan.working_shape(0)
        )));
    }

    let mut outputs = vec![y0];
    for scale in 1..=n {
        let jobs = patch_grid(plan, scale, valid_margin)?;
        let prev = &outputs[scale - 1];
        let prev_side = plan.working_side(scale - 1);
        let cur_side = plan.working_side(scale);
        let mut generated = Vec::with_capacity(jobs.len());
        for job in jobs {
            let prev_patch = extract_patch(prev, &job.in_region);
            let prev_up = upsample_patch(&prev_patch, &job.in_region, &job.out_region, prev_side, cur_side);
            let sketch_patch = extract_patch(&sketch_pyramid[scale].volume, &job.out_region);
            let sketch_in = if flags.use_edges {
                sketch_patch
            } else {
                zeros_like(&sketch_patch)
            };
            let prev_in = if flags.use_prev_scale {
                prev_up
            } else {
                zeros_like(&sketch_in)
            };
            let patch = model.generate_patch(scale, &sketch_in, &prev_in)?;
            if patch.shape() != job.out_region.size() {
                return Err(Error::invalid(format!(
                    "generated patch shape {:?} does not match out region {}",
                    patch.shape(),
                    job.out_region
                )));
            }
            generated.push((job, patch));
        }
        outputs.push(crate::plan::assemble(plan.working_shape(scale), &generated)?);
    }

    // Crop the last scale back to the original shape.
    if let Some(last) = outputs.last_mut() {
        let orig = plan.original_shape();
        if last.shape() != orig {
            *last = last.crop([0, 0, 0], orig);
        }
    }
    Ok(outputs)
}

/// Builds the sketch pyramid for inference from a source volume: the LR
/// sketch at twice the LR side, then one sketch per HR scale, each extracted
/// at that scale's resolution.
pub fn sketch_pyramid(
    vol: &Volume3,
    mask: Option<&Volume3>,
    plan: &ScalePlan,
    canny: &CannyParams,
) -> Result<Vec<Sketch>> {
    let full = plan.working_shape(plan.n_scales());
    let v_full = vol.pad_to_shape(full);
    let m_full = mask.map(|m| m.pad_to_shape(full));
    let mut levels = vec![[plan.lr_sketch_side(); 3]];
    for i in 1..=plan.n_scales() {
        levels.push(plan.working_shape(i));
    }
    let mut out = Vec::with_capacity(levels.len());
    for shape in levels {
        let (sk, _) = sketch_at(&v_full, m_full.as_ref(), shape, canny)?;
        out.push(sk);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{gen_phantom, Domain, PhantomSpec};

    fn tiny_cfg(scale: usize) -> TrainConfig {
        let mut cfg = TrainConfig::new(scale, 11);
        cfg.epochs = 2;
        cfg.patches_per_volume = 2;
        cfg.lr_base_channels = 4;
        cfg.hr_channels = 8;
        cfg.hr_res_blocks = 2;
        cfg.disc_base_channels = 4;
        cfg
    }

    #[test]
    fn augment_is_identity_when_disabled() {
        let mut cfg = TrainConfig::new(1, 0);
        cfg.p_blur = 0.0;
        cfg.p_res_halve = 0.0;
        cfg.noise_std = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let prev = Volume3::from_fn([8; 3], [1.0; 3], |z, y, x| ((z + y + x) % 5) as f32 / 5.0);
        let sketch = Volume3::from_fn([8; 3], [1.0; 3], |z, _, _| z as f32 / 8.0);
        let (p, s) = augment_patch(&prev, &sketch, &cfg, &mut rng);
        assert!(p.bit_eq(&prev));
        assert!(s.bit_eq(&sketch));
    }

    #[test]
    fn res_halve_makes_blocks_constant() {
        let checker = Volume3::from_fn([8; 3], [1.0; 3], |z, y, x| ((z + y + x) % 2) as f32);
        let halved = res_halve(&checker);
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    let v = halved.get(2 * z, 2 * y, 2 * x);
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                assert_eq!(halved.get(2 * z + dz, 2 * y + dy, 2 * x + dx), v);
                            }
                        }
                    }
                    assert!((v - 0.5).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn augment_frequencies_match_probabilities() {
        let cfg = TrainConfig::new(1, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let n = 10_000;
        let mut blurred = 0;
        let mut halved = 0;
        for _ in 0..n {
            let plan = sample_augment_plan(&cfg, &mut rng);
            if plan.blur_sigma.is_some() {
                blurred += 1;
            }
            if plan.res_halve {
                halved += 1;
            }
        }
        let blur_rate = blurred as f64 / n as f64;
        let halve_rate = halved as f64 / n as f64;
        assert!((blur_rate - 0.30).abs() < 0.02, "blur rate {blur_rate}");
        assert!((halve_rate - 0.20).abs() < 0.02, "halve rate {halve_rate}");
    }

    #[test]
    fn training_is_bit_deterministic() {
        let spec = PhantomSpec {
            seed: 9,
            side: 64,
            n_blobs: 3,
            domain: Domain::Smooth,
            lesion: None,
        };
        let (vol, _) = gen_phantom(&spec).unwrap();
        let plan = ScalePlan::new([64; 3], 32, 16).unwrap();
        let dataset =
            prepare_scale_dataset(&[(vol, None)], &plan, 0, &CannyParams::default()).unwrap();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(0);
        train_scale(&dataset, &plan, &cfg, dir_a.path()).unwrap();
        train_scale(&dataset, &plan, &cfg, dir_b.path()).unwrap();
        let a = std::fs::read(dir_a.path().join("g_scale0.ckpt")).unwrap();
        let b = std::fs::read(dir_b.path().join("g_scale0.ckpt")).unwrap();
        assert_eq!(a, b, "checkpoints differ between identical runs");
        let la = std::fs::read(dir_a.path().join("losses_scale0.csv")).unwrap();
        let lb = std::fs::read(dir_b.path().join("losses_scale0.csv")).unwrap();
        assert_eq!(la, lb);
    }

    #[test]
    fn hr_training_smoke_and_finite_losses() {
        let spec = PhantomSpec {
            seed: 21,
            side: 64,
            n_blobs: 3,
            domain: Domain::Smooth,
            lesion: Some(crate::phantom::Lesion { radius: 5.0, center: [30, 34, 28] }),
        };
        let (vol, mask) = gen_phantom(&spec).unwrap();
        let plan = ScalePlan::new([64; 3], 32, 16).unwrap();
        let dataset =
            prepare_scale_dataset(&[(vol, Some(mask))], &plan, 1, &CannyParams::default())
                .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = train_scale(&dataset, &plan, &tiny_cfg(1), dir.path()).unwrap();
        assert!(!out.log.is_empty());
        for row in &out.log {
            assert!(row.loss_d.is_finite() && row.loss_g_adv.is_finite());
        }
        assert!(out.ckpt_path.exists());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let plan = ScalePlan::new([64; 3], 32, 16).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(train_scale(&[], &plan, &tiny_cfg(0), dir.path()).is_err());
    }
}
