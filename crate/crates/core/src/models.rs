//! The three network families and the adversarial objectives.
//!
//! - LR generator: U-Net, consumes the whole 2x-resolution sketch and emits
//!   the low-resolution volume.
//! - HR generator: ResNet trunk, refines one patch conditioned on the sketch
//!   patch and the upsampled previous-scale patch. Fully convolutional, so
//!   inference may use a different patch side than training.
//! - Discriminator: fully-convolutional stride-2 ladder emitting a map of
//!   patch scores in (0, 1).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::memory::LayerRow;
use crate::nn::{
    add, concat_channels, conv3d, conv3d_transpose, dropout, instance_norm, leaky_relu,
    load_checkpoint, relu, save_checkpoint, sigmoid, CkptHeader, CkptTensorMeta, PadMode, Scalar,
    Tensor,
};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;
const WEIGHT_STD: f64 = 0.02;
const LEAKY_SLOPE: f64 = 0.2;
const DROPOUT_P: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetFamily {
    LrUnet,
    HrResnet,
    Discriminator,
}

/// Architecture hyperparameters, serialized into CKPT1 headers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub family: NetFamily,
    /// Output side for the LR generator (input is twice that); nominal patch
    /// side for the HR generator; nominal input side for the discriminator.
    pub side: usize,
    pub base_channels: usize,
    pub n_res_blocks: usize,
    pub in_channels: usize,
    pub scale_index: usize,
}

impl NetConfig {
    pub fn lr_generator(lr_side: usize, base_channels: usize) -> Self {
        NetConfig {
            family: NetFamily::LrUnet,
            side: lr_side,
            base_channels,
            n_res_blocks: 0,
            in_channels: 1,
            scale_index: 0,
        }
    }

    pub fn hr_generator(patch_side: usize, channels: usize, n_res_blocks: usize) -> Self {
        NetConfig {
            family: NetFamily::HrResnet,
            side: patch_side,
            base_channels: channels,
            n_res_blocks,
            in_channels: 2,
            scale_index: 1,
        }
    }

    /// Channel plan follows the per-scale objective signature: two inputs at
    /// scale 0 (sketch, image), three at higher scales (sketch, previous
    /// scale, image). `side` is the nominal input side; the stride-2 ladder
    /// depth adapts so no normalized feature map collapses to one voxel.
    pub fn discriminator(
        in_channels: usize,
        base_channels: usize,
        scale_index: usize,
        side: usize,
    ) -> Self {
        NetConfig {
            family: NetFamily::Discriminator,
            side,
            base_channels,
            n_res_blocks: 0,
            in_channels,
            scale_index,
        }
    }

    /// Stride-2 blocks in the discriminator: four when the input allows, but
    /// never downsampling below a 2^3 score map (instance norm over a single
    /// voxel has zero variance and stops all gradients).
    pub fn disc_depth(&self) -> usize {
        let mut depth = 0;
        let mut side = self.side;
        while depth < 4 && side >= 4 {
            side /= 2;
            depth += 1;
        }
        depth.max(1)
    }
}

/// Forward-pass context: training mode plus the seeded stream that dropout
/// draws from.
pub struct Ctx {
    pub train: bool,
    pub rng: ChaCha8Rng,
}

impl Ctx {
    pub fn eval() -> Self {
        Ctx {
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(seed: u64) -> Self {
        Ctx {
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

struct Conv<T: Scalar> {
    w: Tensor<T>,
    b: Tensor<T>,
    stride: usize,
    pad: usize,
    mode: PadMode,
}

impl<T: Scalar> Conv<T> {
    fn new(
        rng: &mut ChaCha8Rng,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        mode: PadMode,
    ) -> Self {
        let dist = Normal::new(0.0, WEIGHT_STD).unwrap();
        let w: Vec<T> = (0..cout * cin * k * k * k)
            .map(|_| T::from_f64(dist.sample(rng)))
            .collect();
        Conv {
            w: Tensor::param(&[cout, cin, k, k, k], w),
            b: Tensor::param(&[cout], vec![T::zero(); cout]),
            stride,
            pad,
            mode,
        }
    }

    fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        conv3d(x, &self.w, Some(&self.b), self.stride, self.pad, self.mode)
    }

    fn kernel(&self) -> usize {
        self.w.shape()[2]
    }
}

struct ConvT<T: Scalar> {
    w: Tensor<T>,
    b: Tensor<T>,
    stride: usize,
}

impl<T: Scalar> ConvT<T> {
    fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        let dist = Normal::new(0.0, WEIGHT_STD).unwrap();
        let w: Vec<T> = (0..cin * cout * k * k * k)
            .map(|_| T::from_f64(dist.sample(rng)))
            .collect();
        ConvT {
            w: Tensor::param(&[cin, cout, k, k, k], w),
            b: Tensor::param(&[cout], vec![T::zero(); cout]),
            stride,
        }
    }

    fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        conv3d_transpose(x, &self.w, Some(&self.b), self.stride, 0)
    }
}

struct Norm<T: Scalar> {
    gamma: Tensor<T>,
    beta: Tensor<T>,
}

impl<T: Scalar> Norm<T> {
    fn new(c: usize) -> Self {
        Norm {
            gamma: Tensor::param(&[c], vec![T::one(); c]),
            beta: Tensor::param(&[c], vec![T::zero(); c]),
        }
    }

    fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        instance_norm(x, &self.gamma, &self.beta, INSTANCE_NORM_EPS)
    }
}

fn push_conv<T: Scalar>(out: &mut Vec<(String, Tensor<T>)>, name: &str, c: &Conv<T>) {
    out.push((format!("{name}.w"), c.w.clone()));
    out.push((format!("{name}.b"), c.b.clone()));
}

fn push_convt<T: Scalar>(out: &mut Vec<(String, Tensor<T>)>, name: &str, c: &ConvT<T>) {
    out.push((format!("{name}.w"), c.w.clone()));
    out.push((format!("{name}.b"), c.b.clone()));
}

fn push_norm<T: Scalar>(out: &mut Vec<(String, Tensor<T>)>, name: &str, n: &Norm<T>) {
    out.push((format!("{name}.gamma"), n.gamma.clone()));
    out.push((format!("{name}.beta"), n.beta.clone()));
}

// ---------------------------------------------------------------------------
// LR generator (U-Net)
// ---------------------------------------------------------------------------

pub struct LrUnet<T: Scalar> {
    pub cfg: NetConfig,
    enc: Vec<(Conv<T>, Option<Norm<T>>)>,
    dec: Vec<(ConvT<T>, Conv<T>, Norm<T>, bool)>,
    head: Conv<T>,
}

/// Builds the LR U-Net: a stride-2 stem consumes the 2x sketch, three more
/// encoder levels double the channels, and the decoder mirrors back up to
/// the LR side with skip connections and dropout in the two innermost
/// blocks.
pub fn build_lr_generator<T: Scalar>(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Result<LrUnet<T>> {
    if cfg.family != NetFamily::LrUnet {
        return Err(Error::invalid("config family is not lr_unet"));
    }
    if cfg.in_channels != 1 {
        return Err(Error::invalid("LR generator takes a single sketch channel"));
    }
    if cfg.side % 8 != 0 || cfg.side == 0 {
        return Err(Error::invalid(format!(
            "lr_side {} must be a positive multiple of 8",
            cfg.side
        )));
    }
    let b = cfg.base_channels;
    let chans = [b, 2 * b, 4 * b, 8 * b];
    let mut enc = Vec::new();
    for (i, &c) in chans.iter().enumerate() {
        let cin = if i == 0 { 1 } else { chans[i - 1] };
        let conv = Conv::new(rng, cin, c, 3, 2, 1, PadMode::Replicate);
        let norm = if i == 0 { None } else { Some(Norm::new(c)) };
        enc.push((conv, norm));
    }
    let mut dec = Vec::new();
    for i in 0..3 {
        // 8b -> 4b -> 2b -> b, skip-concatenated with the mirror encoder level.
        let cin = chans[3 - i];
        let cout = chans[2 - i];
        let up = ConvT::new(rng, cin, cout, 2, 2);
        let conv = Conv::new(rng, 2 * cout, cout, 3, 1, 1, PadMode::Replicate);
        let norm = Norm::new(cout);
        dec.push((up, conv, norm, i < 2));
    }
    let head = Conv::new(rng, b, 1, 3, 1, 1, PadMode::Replicate);
    Ok(LrUnet {
        cfg: cfg.clone(),
        enc,
        dec,
        head,
    })
}

impl<T: Scalar> LrUnet<T> {
    /// Maps a `[1, 1, 2s, 2s, 2s]` sketch to a `[1, 1, s, s, s]` volume in
    /// [0, 1].
    pub fn forward(&self, x: &Tensor<T>, ctx: &mut Ctx) -> Result<Tensor<T>> {
        let s = x.shape();
        let expect = 2 * self.cfg.side;
        if s.len() != 5 || s[1] != 1 {
            return Err(Error::invalid(format!(
                "LR generator input must be [b, 1, {expect}, {expect}, {expect}], got {s:?}"
            )));
        }
        if s[2] != expect || s[3] != expect || s[4] != expect {
            return Err(Error::invalid(format!(
                "LR generator input side must be {expect} (2x lr_side), got {:?}",
                &s[2..]
            )));
        }
        let mut skips = Vec::new();
        let mut h = x.clone();
        for (conv, norm) in &self.enc {
            let mut t = conv.apply(&h);
            if let Some(n) = norm {
                t = n.apply(&t);
            }
            h = leaky_relu(&t, LEAKY_SLOPE);
            skips.push(h.clone());
        }
        // skips = [e0, e1, e2, e3]; bottleneck is e3.
        for (i, (up, conv, norm, use_dropout)) in self.dec.iter().enumerate() {
            let skip = &skips[2 - i];
            let u = up.apply(&h);
            let cat = concat_channels(&[&u, skip]);
            let t = relu(&norm.apply(&conv.apply(&cat)));
            h = if *use_dropout {
                dropout(&t, DROPOUT_P, ctx.train, &mut ctx.rng)
            } else {
                t
            };
        }
        Ok(sigmoid(&self.head.apply(&h)))
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, (conv, norm)) in self.enc.iter().enumerate() {
            push_conv(&mut out, &format!("enc{i}"), conv);
            if let Some(n) = norm {
                push_norm(&mut out, &format!("enc{i}.norm"), n);
            }
        }
        for (i, (up, conv, norm, _)) in self.dec.iter().enumerate() {
            push_convt(&mut out, &format!("dec{i}.up"), up);
            push_conv(&mut out, &format!("dec{i}"), conv);
            push_norm(&mut out, &format!("dec{i}.norm"), norm);
        }
        push_conv(&mut out, "head", &self.head);
        out
    }

    pub fn parameters(&self) -> Vec<Tensor<T>> {
        self.named_parameters().into_iter().map(|(_, t)| t).collect()
    }

    /// Zeroes the output head; sigmoid(0) makes the generator emit 0.5
    /// everywhere regardless of input.
    pub fn zero_head(&self) {
        self.head.w.set_data(vec![T::zero(); self.head.w.len()]);
        self.head.b.set_data(vec![T::zero(); self.head.b.len()]);
    }
}

/// Every tensor the LR forward pass retains, with parameter counts; must
/// mirror `LrUnet::forward` op for op (the instrumentation tests compare the
/// two).
pub fn lr_unet_layer_walk(cfg: &NetConfig) -> Vec<LayerRow> {
    let b = cfg.base_channels as u64;
    let chans = [b, 2 * b, 4 * b, 8 * b];
    let s = cfg.side as u64;
    let mut rows = Vec::new();
    let mut row = |name: &str, elems: u64, params: u64| {
        rows.push(LayerRow {
            name: name.to_string(),
            out_elems: elems,
            param_elems: params,
        });
    };
    let mut side = s; // output side of enc0
    for (i, &c) in chans.iter().enumerate() {
        let cin = if i == 0 { 1 } else { chans[i - 1] };
        let vox = side * side * side;
        row(&format!("enc{i}.conv"), vox * c, cin * c * 27 + c);
        if i > 0 {
            row(&format!("enc{i}.norm"), vox * c, 2 * c);
        }
        row(&format!("enc{i}.act"), vox * c, 0);
        side /= 2;
    }
    let mut side = s / 8;
    for i in 0..3u64 {
        let cin = chans[(3 - i) as usize];
        let cout = chans[(2 - i) as usize];
        let vox = side * side * side;
        row(&format!("dec{i}.up"), vox * cout, cin * cout * 8 + cout);
        row(&format!("dec{i}.cat"), vox * 2 * cout, 0);
        row(&format!("dec{i}.conv"), vox * cout, 2 * cout * cout * 27 + cout);
        row(&format!("dec{i}.norm"), vox * cout, 2 * cout);
        row(&format!("dec{i}.act"), vox * cout, 0);
        if i < 2 {
            row(&format!("dec{i}.dropout"), vox * cout, 0);
        }
        side *= 2;
    }
    row("head.conv", s * s * s, chans[0] * 27 + 1);
    row("head.sigmoid", s * s * s, 0);
    rows
}

// ---------------------------------------------------------------------------
// HR generator (ResNet)
// ---------------------------------------------------------------------------

pub struct HrResnet<T: Scalar> {
    pub cfg: NetConfig,
    // No norm on the stem: instance statistics would erase the absolute
    // intensity of flat patches, and the refinement task is
    // intensity-conditional.
    stem: Conv<T>,
    blocks: Vec<(Conv<T>, Norm<T>, Conv<T>, Norm<T>)>,
    head: Conv<T>,
}

/// Builds the HR patch generator: stem conv, `n_res_blocks` residual blocks
/// of two 3^3 convs with replicate padding, sigmoid head. Spatial shape is
/// preserved.
pub fn build_hr_generator<T: Scalar>(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Result<HrResnet<T>> {
    if cfg.family != NetFamily::HrResnet {
        return Err(Error::invalid("config family is not hr_resnet"));
    }
    if cfg.in_channels != 2 {
        return Err(Error::invalid(
            "HR generator takes 2 channels: sketch patch and upsampled previous-scale patch",
        ));
    }
    if cfg.n_res_blocks == 0 {
        return Err(Error::invalid("HR generator needs at least one residual block"));
    }
    let c = cfg.base_channels;
    let stem = Conv::new(rng, 2, c, 3, 1, 1, PadMode::Replicate);
    let blocks = (0..cfg.n_res_blocks)
        .map(|_| {
            (
                Conv::new(rng, c, c, 3, 1, 1, PadMode::Replicate),
                Norm::new(c),
                Conv::new(rng, c, c, 3, 1, 1, PadMode::Replicate),
                Norm::new(c),
            )
        })
        .collect();
    let head = Conv::new(rng, c, 1, 3, 1, 1, PadMode::Replicate);
    Ok(HrResnet {
        cfg: cfg.clone(),
        stem,
        blocks,
        head,
    })
}

impl<T: Scalar> HrResnet<T> {
    /// Refines a `[b, 2, p, p, p]` patch pair into `[b, 1, p, p, p]`; fully
    /// convolutional, any side >= 4 works.
    pub fn forward(&self, x: &Tensor<T>, _ctx: &mut Ctx) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 5 || s[1] != 2 {
            return Err(Error::invalid(format!(
                "HR generator input must be [b, 2, p, p, p], got {s:?}"
            )));
        }
        if s[2] < 4 || s[3] < 4 || s[4] < 4 {
            return Err(Error::invalid(format!("patch side too small: {:?}", &s[2..])));
        }
        let mut h = relu(&self.stem.apply(x));
        for (c1, n1, c2, n2) in &self.blocks {
            let branch = n2.apply(&c2.apply(&relu(&n1.apply(&c1.apply(&h)))));
            h = add(&h, &branch);
        }
        Ok(sigmoid(&self.head.apply(&h)))
    }

    /// Patch border depth contaminated by padding, which the paste step must
    /// discard. Accounting: the stem and head convs each contaminate
    /// (k-1)/2 voxels; the residual stack contributes its single worst
    /// branch, since each block's identity path re-anchors interior values
    /// rather than compounding border error.
    pub fn valid_margin(&self) -> usize {
        let per_conv = |k: usize| (k - 1) / 2;
        let stem = per_conv(self.stem.kernel());
        let worst_block = self
            .blocks
            .iter()
            .map(|(c1, _, c2, _)| per_conv(c1.kernel()) + per_conv(c2.kernel()))
            .max()
            .unwrap_or(0);
        let head = per_conv(self.head.kernel());
        stem + worst_block + head
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        push_conv(&mut out, "stem", &self.stem);
        for (i, (c1, n1, c2, n2)) in self.blocks.iter().enumerate() {
            push_conv(&mut out, &format!("block{i}.conv1"), c1);
            push_norm(&mut out, &format!("block{i}.norm1"), n1);
            push_conv(&mut out, &format!("block{i}.conv2"), c2);
            push_norm(&mut out, &format!("block{i}.norm2"), n2);
        }
        push_conv(&mut out, "head", &self.head);
        out
    }

    pub fn parameters(&self) -> Vec<Tensor<T>> {
        self.named_parameters().into_iter().map(|(_, t)| t).collect()
    }

    pub fn zero_head(&self) {
        self.head.w.set_data(vec![T::zero(); self.head.w.len()]);
        self.head.b.set_data(vec![T::zero(); self.head.b.len()]);
    }
}

/// Mirror of `HrResnet::forward` for the analytic memory model.
pub fn hr_resnet_layer_walk(cfg: &NetConfig) -> Vec<LayerRow> {
    let c = cfg.base_channels as u64;
    let vox = (cfg.side as u64).pow(3);
    let mut rows = Vec::new();
    let mut row = |name: String, elems: u64, params: u64| {
        rows.push(LayerRow {
            name,
            out_elems: elems,
            param_elems: params,
        });
    };
    row("stem.conv".into(), vox * c, 2 * c * 27 + c);
    row("stem.act".into(), vox * c, 0);
    for i in 0..cfg.n_res_blocks {
        row(format!("block{i}.conv1"), vox * c, c * c * 27 + c);
        row(format!("block{i}.norm1"), vox * c, 2 * c);
        row(format!("block{i}.act"), vox * c, 0);
        row(format!("block{i}.conv2"), vox * c, c * c * 27 + c);
        row(format!("block{i}.norm2"), vox * c, 2 * c);
        row(format!("block{i}.add"), vox * c, 0);
    }
    row("head.conv".into(), vox, c * 27 + 1);
    row("head.sigmoid".into(), vox, 0);
    rows
}

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

pub struct PatchDiscriminator<T: Scalar> {
    pub cfg: NetConfig,
    blocks: Vec<(Conv<T>, Option<Norm<T>>)>,
    head: Conv<T>,
}

/// Builds the fully-convolutional discriminator: four stride-2 conv blocks
/// with channels doubling from the base, leaky-relu activations, instance
/// norm from the second block, and a 1-channel sigmoid score map.
pub fn build_discriminator<T: Scalar>(
    cfg: &NetConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PatchDiscriminator<T>> {
    if cfg.family != NetFamily::Discriminator {
        return Err(Error::invalid("config family is not discriminator"));
    }
    let expected = if cfg.scale_index == 0 { 2 } else { 3 };
    if cfg.in_channels != expected {
        return Err(Error::invalid(format!(
            "discriminator at scale {} takes {} channels, got {}",
            cfg.scale_index, expected, cfg.in_channels
        )));
    }
    if cfg.side < 8 {
        return Err(Error::invalid(format!(
            "discriminator input side {} too small (need >= 8)",
            cfg.side
        )));
    }
    let b = cfg.base_channels;
    let depth = cfg.disc_depth();
    let mut blocks = Vec::new();
    let mut cin = cfg.in_channels;
    let mut c = b;
    for i in 0..depth {
        let conv = Conv::new(rng, cin, c, 4, 2, 1, PadMode::Zero);
        let norm = if i == 0 { None } else { Some(Norm::new(c)) };
        blocks.push((conv, norm));
        cin = c;
        c *= 2;
    }
    let head = Conv::new(rng, cin, 1, 3, 1, 1, PadMode::Zero);
    Ok(PatchDiscriminator {
        cfg: cfg.clone(),
        blocks,
        head,
    })
}

impl<T: Scalar> PatchDiscriminator<T> {
    /// Maps `[b, c, s, s, s]` to a `[b, 1, s/2^depth, ...]` map of scores in
    /// (0, 1); fully convolutional, any side the ladder divides works.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 5 || s[1] != self.cfg.in_channels {
            return Err(Error::invalid(format!(
                "discriminator input must be [b, {}, s, s, s], got {s:?}",
                self.cfg.in_channels
            )));
        }
        let div = 1 << self.blocks.len();
        if s[2] % div != 0 || s[3] % div != 0 || s[4] % div != 0 {
            return Err(Error::invalid(format!(
                "discriminator input side must be divisible by {div}, got {:?}",
                &s[2..]
            )));
        }
        let mut h = x.clone();
        for (conv, norm) in &self.blocks {
            let mut t = conv.apply(&h);
            if let Some(n) = norm {
                t = n.apply(&t);
            }
            h = leaky_relu(&t, LEAKY_SLOPE);
        }
        Ok(sigmoid(&self.head.apply(&h)))
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, (conv, norm)) in self.blocks.iter().enumerate() {
            push_conv(&mut out, &format!("block{i}"), conv);
            if let Some(n) = norm {
                push_norm(&mut out, &format!("block{i}.norm"), n);
            }
        }
        push_conv(&mut out, "head", &self.head);
        out
    }

    pub fn parameters(&self) -> Vec<Tensor<T>> {
        self.named_parameters().into_iter().map(|(_, t)| t).collect()
    }
}

/// Mirror of `PatchDiscriminator::forward` for the analytic memory model.
pub fn discriminator_layer_walk(cfg: &NetConfig) -> Vec<LayerRow> {
    let mut rows = Vec::new();
    let mut row = |name: String, elems: u64, params: u64| {
        rows.push(LayerRow {
            name,
            out_elems: elems,
            param_elems: params,
        });
    };
    let depth = cfg.disc_depth();
    let mut s = cfg.side as u64 / 2;
    let mut cin = cfg.in_channels as u64;
    let mut c = cfg.base_channels as u64;
    for i in 0..depth {
        let vox = s * s * s;
        row(format!("block{i}.conv"), vox * c, cin * c * 64 + c);
        if i > 0 {
            row(format!("block{i}.norm"), vox * c, 2 * c);
        }
        row(format!("block{i}.act"), vox * c, 0);
        cin = c;
        c *= 2;
        s /= 2;
    }
    let vox = (s * 2).pow(3);
    row("head.conv".into(), vox, cin * 27 + 1);
    row("head.sigmoid".into(), vox, 0);
    rows
}

// ---------------------------------------------------------------------------
// Objectives
// ---------------------------------------------------------------------------

/// Adversarial objectives with L1 mixing.
///
/// `loss_d = -mean log D(real) - mean log(1 - D(fake))`;
/// `loss_g = -mean log D(fake) + lambda_l1 * mean|fake - target|`
/// (non-saturating generator form). Scores are clamped away from 0 and 1
/// before the logs.
pub fn gan_losses<T: Scalar>(
    d_real_scores: &Tensor<T>,
    d_fake_scores: &Tensor<T>,
    fake: &Tensor<T>,
    target: &Tensor<T>,
    lambda_l1: f64,
) -> (Tensor<T>, Tensor<T>) {
    use crate::nn::{adv_fake_loss, adv_real_loss, l1_mean, scale};
    let loss_d = add(&adv_real_loss(d_real_scores), &adv_fake_loss(d_fake_scores));
    let loss_g = add(
        &adv_real_loss(d_fake_scores),
        &scale(&l1_mean(fake, target), lambda_l1),
    );
    (loss_d, loss_g)
}

// ---------------------------------------------------------------------------
// Checkpoint plumbing
// ---------------------------------------------------------------------------

/// A trained generator of either family.
pub enum GeneratorNet {
    Lr(LrUnet<f32>),
    Hr(HrResnet<f32>),
}

impl GeneratorNet {
    pub fn config(&self) -> &NetConfig {
        match self {
            GeneratorNet::Lr(n) => &n.cfg,
            GeneratorNet::Hr(n) => &n.cfg,
        }
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor<f32>)> {
        match self {
            GeneratorNet::Lr(n) => n.named_parameters(),
            GeneratorNet::Hr(n) => n.named_parameters(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>, seed: u64) -> Result<()> {
        let named = self.named_parameters();
        let header = CkptHeader {
            arch: serde_json::to_value(self.config()).expect("config serialization"),
            scale: self.config().scale_index,
            seed,
            tensors: named
                .iter()
                .map(|(name, t)| CkptTensorMeta {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let params: Vec<Tensor<f32>> = named.into_iter().map(|(_, t)| t).collect();
        save_checkpoint(path, &header, &params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<GeneratorNet> {
        let path = path.as_ref();
        let (header, data) = load_checkpoint(path)?;
        let cfg: NetConfig = serde_json::from_value(header.arch.clone())
            .map_err(|e| Error::format(path, 9, format!("bad architecture config: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = match cfg.family {
            NetFamily::LrUnet => GeneratorNet::Lr(build_lr_generator(&cfg, &mut rng)?),
            NetFamily::HrResnet => GeneratorNet::Hr(build_hr_generator(&cfg, &mut rng)?),
            NetFamily::Discriminator => {
                return Err(Error::invalid("checkpoint holds a discriminator, not a generator"))
            }
        };
        let params = net.named_parameters();
        if params.len() != data.len() {
            return Err(Error::format(
                path,
                9,
                format!("expected {} tensors, checkpoint has {}", params.len(), data.len()),
            ));
        }
        for ((name, t), values) in params.into_iter().zip(data) {
            if t.len() != values.len() {
                return Err(Error::format(path, 9, format!("size mismatch for {name}")));
            }
            t.set_data(values);
        }
        Ok(net)
    }
}
