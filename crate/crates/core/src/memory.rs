//! Analytic training-memory estimation and runtime allocation tracking.
//!
//! The estimator walks a symbolic layer list per architecture and sums, at
//! 4 bytes per scalar: activations retained for the backward pass, parameters,
//! gradient buffers (activation gradients plus parameter gradients for one
//! backward), Adam moments, and the input/output volumes. It is a lower-bound
//! summary model: transient kernel workspace and allocator overhead are not
//! counted.
//!
//! The runtime tracker instruments every `Volume3` voxel buffer and every
//! tensor buffer in the crate so that high-water marks can be measured around
//! arbitrary closures and compared against the analytic model.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{self, NetConfig};

// ---------------------------------------------------------------------------
// Runtime allocation tracking
// ---------------------------------------------------------------------------

/// Which bucket a tracked allocation belongs to.
///
/// `Volume` covers `Volume3` voxel buffers (whole images and extracted
/// patches); `Tensor` covers every buffer owned by the autodiff core. The
/// tensor bucket is the "patch workspace" of the cascade: it must stay
/// constant in the final image size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackClass {
    Volume,
    Tensor,
}

static CUR_VOLUME: AtomicUsize = AtomicUsize::new(0);
static CUR_TENSOR: AtomicUsize = AtomicUsize::new(0);
static PEAK_VOLUME: AtomicUsize = AtomicUsize::new(0);
static PEAK_TENSOR: AtomicUsize = AtomicUsize::new(0);
static PEAK_TOTAL: AtomicUsize = AtomicUsize::new(0);

/// Serializes measurement sessions; concurrent measurements would corrupt
/// each other's high-water marks.
static SESSION: Mutex<()> = Mutex::new(());

pub(crate) fn track_alloc(class: TrackClass, bytes: usize) {
    let (cur, peak) = match class {
        TrackClass::Volume => (&CUR_VOLUME, &PEAK_VOLUME),
        TrackClass::Tensor => (&CUR_TENSOR, &PEAK_TENSOR),
    };
    let new = cur.fetch_add(bytes, Ordering::Relaxed) + bytes;
    peak.fetch_max(new, Ordering::Relaxed);
    let total = CUR_VOLUME.load(Ordering::Relaxed) + CUR_TENSOR.load(Ordering::Relaxed);
    PEAK_TOTAL.fetch_max(total, Ordering::Relaxed);
}

pub(crate) fn track_free(class: TrackClass, bytes: usize) {
    let cur = match class {
        TrackClass::Volume => &CUR_VOLUME,
        TrackClass::Tensor => &CUR_TENSOR,
    };
    cur.fetch_sub(bytes, Ordering::Relaxed);
}

/// High-water marks observed while a measured closure ran, relative to the
/// bytes live when the measurement started.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryMeasurement {
    pub peak_total_bytes: usize,
    pub peak_tensor_bytes: usize,
    pub peak_volume_bytes: usize,
}

/// Runs `f` and returns its result together with the tracked allocation
/// high-water marks. Sessions are serialized on a global lock.
pub fn measure_runtime_memory<R>(f: impl FnOnce() -> R) -> (R, MemoryMeasurement) {
    let _guard = SESSION.lock().unwrap_or_else(|e| e.into_inner());
    let base_v = CUR_VOLUME.load(Ordering::Relaxed);
    let base_t = CUR_TENSOR.load(Ordering::Relaxed);
    PEAK_VOLUME.store(base_v, Ordering::Relaxed);
    PEAK_TENSOR.store(base_t, Ordering::Relaxed);
    PEAK_TOTAL.store(base_v + base_t, Ordering::Relaxed);
    let out = f();
    let m = MemoryMeasurement {
        peak_total_bytes: PEAK_TOTAL.load(Ordering::Relaxed).saturating_sub(base_v + base_t),
        peak_tensor_bytes: PEAK_TENSOR.load(Ordering::Relaxed).saturating_sub(base_t),
        peak_volume_bytes: PEAK_VOLUME.load(Ordering::Relaxed).saturating_sub(base_v),
    };
    (out, m)
}

// ---------------------------------------------------------------------------
// Analytic model
// ---------------------------------------------------------------------------

const BYTES_PER_SCALAR: u64 = 4;

/// Architectures the estimator knows about. The three baselines are
/// straightforward 3D translations of their 2D counterparts with a constant
/// trunk width; `Lr64`/`Hr32` are this crate's own networks and ignore the
/// requested side beyond validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchId {
    Dcgan3d,
    Pix2pix3d,
    Pggan3d,
    Lr64,
    Hr32,
}

impl ArchId {
    pub const ALL: [ArchId; 5] = [
        ArchId::Dcgan3d,
        ArchId::Pix2pix3d,
        ArchId::Pggan3d,
        ArchId::Lr64,
        ArchId::Hr32,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ArchId::Dcgan3d => "dcgan3d",
            ArchId::Pix2pix3d => "pix2pix3d",
            ArchId::Pggan3d => "pggan3d",
            ArchId::Lr64 => "lr64",
            ArchId::Hr32 => "hr32",
        }
    }

    pub fn is_full_volume_baseline(&self) -> bool {
        matches!(self, ArchId::Dcgan3d | ArchId::Pix2pix3d | ArchId::Pggan3d)
    }
}

impl fmt::Display for ArchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dcgan3d" => Ok(ArchId::Dcgan3d),
            "pix2pix3d" => Ok(ArchId::Pix2pix3d),
            "pggan3d" => Ok(ArchId::Pggan3d),
            "lr64" => Ok(ArchId::Lr64),
            "hr32" => Ok(ArchId::Hr32),
            other => Err(Error::invalid(format!("unknown architecture id: {other}"))),
        }
    }
}

/// One retained tensor in a symbolic layer walk.
#[derive(Debug, Clone)]
pub struct LayerRow {
    pub name: String,
    pub out_elems: u64,
    pub param_elems: u64,
}

/// Byte accounting for one architecture at one image side length.
#[derive(Debug, Clone, Serialize)]
pub struct MemoryReport {
    pub arch: ArchId,
    pub side: usize,
    pub activations_g: u64,
    pub activations_d: u64,
    pub params: u64,
    pub grads: u64,
    pub optimizer: u64,
    pub images: u64,
    pub total: u64,
    #[serde(skip)]
    pub layers_g: Vec<LayerRow>,
    #[serde(skip)]
    pub layers_d: Vec<LayerRow>,
}

impl MemoryReport {
    pub fn csv_header() -> &'static str {
        "arch,side,activations_G,activations_D,params,grads,optimizer,images,total_bytes"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.arch,
            self.side,
            self.activations_g,
            self.activations_d,
            self.params,
            self.grads,
            self.optimizer,
            self.images,
            self.total
        )
    }
}

fn is_power_of_two(n: usize) -> bool {
    n != 0 && n & (n - 1) == 0
}

struct Walk {
    rows: Vec<LayerRow>,
}

impl Walk {
    fn new() -> Self {
        Walk { rows: Vec::new() }
    }

    fn push(&mut self, name: impl Into<String>, out_elems: u64, param_elems: u64) {
        self.rows.push(LayerRow {
            name: name.into(),
            out_elems,
            param_elems,
        });
    }

    /// Conv block: conv output + instance norm output + activation output.
    fn conv_block(&mut self, name: &str, vox: u64, cin: u64, cout: u64, k: u64, norm: bool) {
        self.push(format!("{name}.conv"), vox * cout, cin * cout * k * k * k + cout);
        if norm {
            self.push(format!("{name}.norm"), vox * cout, 2 * cout);
        }
        self.push(format!("{name}.act"), vox * cout, 0);
    }
}

/// Width of the baseline trunks. Constant along the resolution ladder so the
/// activation footprint is volume-proportional at every size.
const BASE_W: u64 = 64;

/// Two-conv discriminator ladder from full resolution down to 8^3: one
/// stride-1 and one stride-2 3^3 conv per level.
fn baseline_disc_walk(d: &mut Walk, side: u64, in_ch: u64) {
    let mut res = side;
    let mut cin = in_ch;
    while res >= 16 {
        let vox = res * res * res;
        d.conv_block(&format!("d.{res}.a"), vox, cin, BASE_W, 3, cin != in_ch);
        d.conv_block(&format!("d.{res}.down"), vox / 8, BASE_W, BASE_W, 3, true);
        cin = BASE_W;
        res /= 2;
    }
    d.push("d.head", 1, BASE_W * 27 + 1);
}

fn dcgan3d_walk(side: usize) -> (Vec<LayerRow>, Vec<LayerRow>, u64) {
    let s = side as u64;
    // Generator: small latent projected to a 4^3 base, then per doubling a
    // k2 transpose conv plus a 3^3 refinement conv at the trunk width.
    let mut g = Walk::new();
    let zdim = 16u64;
    g.push("g.project", 64 * BASE_W, zdim * 64 * BASE_W + 64 * BASE_W);
    g.push("g.project.act", 64 * BASE_W, 0);
    let mut res = 8u64;
    while res <= s {
        let vox = res * res * res;
        g.push(format!("g.{res}.convt"), vox * BASE_W, BASE_W * BASE_W * 8 + BASE_W);
        g.push(format!("g.{res}.norm"), vox * BASE_W, 2 * BASE_W);
        g.push(format!("g.{res}.act"), vox * BASE_W, 0);
        g.conv_block(&format!("g.{res}.refine"), vox, BASE_W, BASE_W, 3, true);
        res *= 2;
    }
    g.push("g.head", s * s * s, BASE_W * 27 + 1);
    g.push("g.head.act", s * s * s, 0);

    let mut d = Walk::new();
    baseline_disc_walk(&mut d, s, 1);
    let images = (s * s * s) * 2 + zdim; // generated + real + latent
    (g.rows, d.rows, images)
}

fn pix2pix3d_walk(side: usize) -> (Vec<LayerRow>, Vec<LayerRow>, u64) {
    let s = side as u64;
    // U-Net generator: full-resolution stem, two-conv encoder blocks down to
    // 8^3, decoder blocks with skip concatenation back up.
    let mut g = Walk::new();
    g.push("g.stem", s * s * s * BASE_W, 27 * BASE_W + BASE_W);
    g.push("g.stem.act", s * s * s * BASE_W, 0);
    let mut res = s / 2;
    let mut depth = 0;
    while res >= 8 {
        let vox = res * res * res;
        g.conv_block(&format!("g.enc{depth}.down"), vox, BASE_W, BASE_W, 3, true);
        g.conv_block(&format!("g.enc{depth}.conv"), vox, BASE_W, BASE_W, 3, true);
        res /= 2;
        depth += 1;
    }
    let mut res = 16u64;
    for level in (0..depth).rev() {
        let vox = res * res * res;
        g.push(format!("g.dec{level}.convt"), vox * BASE_W, BASE_W * BASE_W * 8 + BASE_W);
        g.push(format!("g.dec{level}.cat"), vox * 2 * BASE_W, 0);
        g.conv_block(&format!("g.dec{level}.a"), vox, 2 * BASE_W, BASE_W, 3, true);
        g.conv_block(&format!("g.dec{level}.b"), vox, BASE_W, BASE_W, 3, true);
        res *= 2;
    }
    g.push("g.head", s * s * s, BASE_W * 27 + 1);
    g.push("g.head.act", s * s * s, 0);

    // PatchGAN-style discriminator on the (condition, image) pair.
    let mut d = Walk::new();
    baseline_disc_walk(&mut d, s, 2);
    let images = (s * s * s) * 3; // condition + generated + real
    (g.rows, d.rows, images)
}

fn pggan3d_walk(side: usize) -> (Vec<LayerRow>, Vec<LayerRow>, u64) {
    let s = side as u64;
    // Fully grown progressive ladder: every level processes its resolution
    // with two 3^3 convs at the trunk width.
    let mut g = Walk::new();
    g.push("g.base.dense", 64 * BASE_W, 64 * 64 * BASE_W);
    g.conv_block("g.base", 64, BASE_W, BASE_W, 3, true);
    let mut res = 8u64;
    while res <= s {
        let vox = res * res * res;
        g.push(format!("g.{res}.up"), vox * BASE_W, 0);
        g.conv_block(&format!("g.{res}.a"), vox, BASE_W, BASE_W, 3, true);
        g.conv_block(&format!("g.{res}.b"), vox, BASE_W, BASE_W, 3, true);
        res *= 2;
    }
    g.push("g.to_rgb", s * s * s, BASE_W + 1);

    let mut d = Walk::new();
    d.push("d.from_rgb", s * s * s * BASE_W, BASE_W + BASE_W);
    let mut res = s;
    while res >= 8 {
        let vox = res * res * res;
        d.conv_block(&format!("d.{res}.a"), vox, BASE_W, BASE_W, 3, false);
        d.conv_block(&format!("d.{res}.b"), vox, BASE_W, BASE_W, 3, false);
        d.push(format!("d.{res}.down"), vox / 8 * BASE_W, 0);
        res /= 2;
    }
    d.push("d.head", 1, BASE_W * 64 + 1);
    let images = (s * s * s) * 2 + 64;
    (g.rows, d.rows, images)
}

fn own_walk(arch: ArchId) -> (Vec<LayerRow>, Vec<LayerRow>, u64) {
    match arch {
        ArchId::Lr64 => {
            let g = models::lr_unet_layer_walk(&NetConfig::lr_generator(64, 16));
            let d = models::discriminator_layer_walk(&NetConfig::discriminator(2, 16, 0, 64));
            // 128^3 sketch + generated + real 64^3 volumes.
            let images = 128u64.pow(3) + 2 * 64u64.pow(3);
            (g, d, images)
        }
        ArchId::Hr32 => {
            let g = models::hr_resnet_layer_walk(&NetConfig::hr_generator(32, 32, 6));
            let d = models::discriminator_layer_walk(&NetConfig::discriminator(3, 16, 1, 32));
            // sketch patch + upsampled previous patch + generated + real.
            let images = 4 * 32u64.pow(3);
            (g, d, images)
        }
        _ => unreachable!(),
    }
}

/// Estimates the training-memory footprint of `arch` at image side `side`.
///
/// `lr64` and `hr32` work on fixed 64^3 / 32^3 buffers, so their reports are
/// byte-identical for every requested side.
pub fn estimate_memory(arch: ArchId, side: usize) -> Result<MemoryReport> {
    if !is_power_of_two(side) {
        return Err(Error::invalid(format!("side {side} is not a power of two")));
    }
    let min = if arch.is_full_volume_baseline() { 32 } else { 64 };
    if side < min {
        return Err(Error::invalid(format!(
            "side {side} below minimum {min} for {arch}"
        )));
    }
    let (layers_g, layers_d, image_elems) = match arch {
        ArchId::Dcgan3d => dcgan3d_walk(side),
        ArchId::Pix2pix3d => pix2pix3d_walk(side),
        ArchId::Pggan3d => pggan3d_walk(side),
        ArchId::Lr64 | ArchId::Hr32 => own_walk(arch),
    };
    let act = |rows: &[LayerRow]| rows.iter().map(|r| r.out_elems).sum::<u64>() * BYTES_PER_SCALAR;
    let par = |rows: &[LayerRow]| rows.iter().map(|r| r.param_elems).sum::<u64>() * BYTES_PER_SCALAR;
    let activations_g = act(&layers_g);
    let activations_d = act(&layers_d);
    let params = par(&layers_g) + par(&layers_d);
    // One backward pass needs a gradient buffer per retained activation and
    // per parameter.
    let grads = activations_g + activations_d + params;
    let optimizer = 2 * params;
    let images = image_elems * BYTES_PER_SCALAR;
    let total = activations_g + activations_d + params + grads + optimizer + images;
    Ok(MemoryReport {
        arch,
        side,
        activations_g,
        activations_d,
        params,
        grads,
        optimizer,
        images,
        total,
        layers_g,
        layers_d,
    })
}

/// Least-squares slope of `log(total)` vs `log(side)`, one entry per
/// architecture present in `reports`. Needs at least three sizes each.
pub fn fit_growth(reports: &[MemoryReport]) -> Result<Vec<(ArchId, f64)>> {
    let mut out = Vec::new();
    for arch in ArchId::ALL {
        let pts: Vec<(f64, f64)> = reports
            .iter()
            .filter(|r| r.arch == arch)
            .map(|r| ((r.side as f64).ln(), (r.total as f64).ln()))
            .collect();
        if pts.is_empty() {
            continue;
        }
        if pts.len() < 3 {
            return Err(Error::invalid(format!(
                "fit_growth needs >= 3 sizes for {arch}, got {}",
                pts.len()
            )));
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
        out.push((arch, sxy / sxx));
    }
    Ok(out)
}
