//! The scale ladder and the cross-scale patch coordinate algebra: patch grids
//! per scale, receptive-field-valid cropping and seam-free reassembly.
//!
//! Reassembly uses ownership tiling: every output voxel is written by exactly
//! one job's paste region, with no blending. Patch borders contaminated by
//! padding are discarded via the `valid_margin`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{align_corners_coord, Volume3};

/// A half-open axis-aligned box `[lo, hi)` in voxel coordinates. Coordinates
/// may be negative: input regions near volume borders extend outside and are
/// filled by edge replication on extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub lo: [i64; 3],
    pub hi: [i64; 3],
}

impl Region {
    pub fn new(lo: [i64; 3], hi: [i64; 3]) -> Self {
        for a in 0..3 {
            assert!(lo[a] < hi[a], "empty region on axis {a}: {lo:?}..{hi:?}");
        }
        Region { lo, hi }
    }

    pub fn size(&self) -> [usize; 3] {
        [
            (self.hi[0] - self.lo[0]) as usize,
            (self.hi[1] - self.lo[1]) as usize,
            (self.hi[2] - self.lo[2]) as usize,
        ]
    }

    pub fn num_voxels(&self) -> u64 {
        self.size().iter().map(|&s| s as u64).product()
    }

    pub fn contains(&self, z: i64, y: i64, x: i64) -> bool {
        let p = [z, y, x];
        (0..3).all(|a| self.lo[a] <= p[a] && p[a] < self.hi[a])
    }

    /// True if this region lies fully inside `[0, shape)`.
    pub fn inside(&self, shape: [usize; 3]) -> bool {
        (0..3).all(|a| self.lo[a] >= 0 && self.hi[a] <= shape[a] as i64)
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{},{})x[{},{})x[{},{})",
            self.lo[0], self.hi[0], self.lo[1], self.hi[1], self.lo[2], self.hi[2]
        )
    }
}

/// The scale ladder: working shapes are isotropic cubes of side
/// `lr_side * 2^i`, and the last one is cropped back to the original shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalePlan {
    original_shape: [usize; 3],
    lr_side: usize,
    patch_side: usize,
    n_scales: usize,
}

impl ScalePlan {
    /// Builds the plan. `patch_side` must be a multiple of 4 (center
    /// alignment between scales needs quarter-patch offsets on the voxel
    /// grid) and smaller than `lr_side`.
    pub fn new(original_shape: [usize; 3], lr_side: usize, patch_side: usize) -> Result<Self> {
        if original_shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("non-positive shape {original_shape:?}")));
        }
        if lr_side == 0 || patch_side == 0 {
            return Err(Error::invalid("lr_side and patch_side must be positive"));
        }
        if patch_side % 4 != 0 {
            return Err(Error::invalid(format!(
                "patch_side {patch_side} must be a multiple of 4"
            )));
        }
        if patch_side >= lr_side {
            return Err(Error::invalid(format!(
                "patch_side {patch_side} must be smaller than lr_side {lr_side}"
            )));
        }
        let n_scales = original_shape
            .iter()
            .map(|&d| {
                let mut n = 0usize;
                let mut side = lr_side;
                while side < d {
                    side *= 2;
                    n += 1;
                }
                n
            })
            .max()
            .unwrap();
        Ok(ScalePlan {
            original_shape,
            lr_side,
            patch_side,
            n_scales,
        })
    }

    pub fn original_shape(&self) -> [usize; 3] {
        self.original_shape
    }

    pub fn lr_side(&self) -> usize {
        self.lr_side
    }

    pub fn patch_side(&self) -> usize {
        self.patch_side
    }

    /// Number of HR scales; 0 means the LR image already covers the volume.
    pub fn n_scales(&self) -> usize {
        self.n_scales
    }

    /// Cube side at scale `i`.
    pub fn working_side(&self, scale: usize) -> usize {
        assert!(scale <= self.n_scales, "scale {scale} out of range");
        self.lr_side << scale
    }

    pub fn working_shape(&self, scale: usize) -> [usize; 3] {
        [self.working_side(scale); 3]
    }

    /// The LR generator consumes the sketch at twice its output resolution.
    pub fn lr_sketch_side(&self) -> usize {
        2 * self.lr_side
    }

    /// The corner box of the last working cube holding the original volume.
    pub fn crop_region(&self) -> Region {
        Region::new(
            [0, 0, 0],
            [
                self.original_shape[0] as i64,
                self.original_shape[1] as i64,
                self.original_shape[2] as i64,
            ],
        )
    }
}

/// One patch generation job at scale `i`: read `in_region` at scale `i-1`,
/// produce `out_region` at scale `i`, keep `paste_region` of it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchJob {
    pub scale: usize,
    pub out_region: Region,
    pub in_region: Region,
    pub paste_region: Region,
    /// True when `in_region` extends outside the previous-scale volume and
    /// extraction will replicate edges.
    pub needs_replication: bool,
}

/// Per-axis job positions: output starts plus the paste breakpoints that
/// partition `[0, side)`.
fn axis_positions(side: usize, patch: usize, margin: usize) -> (Vec<i64>, Vec<i64>) {
    let stride = (patch - 2 * margin) as i64;
    let side = side as i64;
    let patch = patch as i64;
    let mut starts = Vec::new();
    let mut j = 0i64;
    loop {
        let o = (j * stride).min(side - patch);
        if starts.last() != Some(&o) {
            starts.push(o);
        }
        if o == side - patch {
            break;
        }
        j += 1;
    }
    // Paste breakpoints: job 0 owns the low border, the last job owns the
    // high border; inward-shifted boundary jobs own any overlap.
    let mut breaks = vec![0i64];
    for &o in &starts[1..] {
        breaks.push(o + margin as i64);
    }
    breaks.push(side);
    (starts, breaks)
}

/// Builds the job list for scale `scale`. Paste regions partition the
/// working cube; strides are `patch_side - 2 * valid_margin`.
pub fn patch_grid(plan: &ScalePlan, scale: usize, valid_margin: usize) -> Result<Vec<PatchJob>> {
    if scale == 0 || scale > plan.n_scales() {
        return Err(Error::invalid(format!(
            "scale {scale} out of range 1..={}",
            plan.n_scales()
        )));
    }
    let patch = plan.patch_side();
    if 2 * valid_margin >= patch {
        return Err(Error::invalid(format!(
            "margin {valid_margin} leaves an empty paste region for patch side {patch}"
        )));
    }
    let side = plan.working_side(scale);
    let prev_side = plan.working_side(scale - 1) as i64;
    let (starts, breaks) = axis_positions(side, patch, valid_margin);
    let p = patch as i64;
    let quarter = p / 4;

    let mut jobs = Vec::with_capacity(starts.len().pow(3));
    for (jz, &oz) in starts.iter().enumerate() {
        for (jy, &oy) in starts.iter().enumerate() {
            for (jx, &ox) in starts.iter().enumerate() {
                let out_region = Region::new([oz, oy, ox], [oz + p, oy + p, ox + p]);
                // Center alignment: the center of in_region at scale i-1,
                // doubled, equals the center of out_region at scale i.
                let in_lo = [oz / 2 - quarter, oy / 2 - quarter, ox / 2 - quarter];
                let in_region = Region::new(
                    in_lo,
                    [in_lo[0] + p, in_lo[1] + p, in_lo[2] + p],
                );
                let paste_region = Region::new(
                    [breaks[jz], breaks[jy], breaks[jx]],
                    [breaks[jz + 1], breaks[jy + 1], breaks[jx + 1]],
                );
                let needs_replication = !in_region.inside([prev_side as usize; 3]);
                jobs.push(PatchJob {
                    scale,
                    out_region,
                    in_region,
                    paste_region,
                    needs_replication,
                });
            }
        }
    }
    Ok(jobs)
}

/// Copies `region` out of `v`, filling out-of-bounds coordinates by edge
/// replication. Spacing is inherited.
pub fn extract_patch(v: &Volume3, region: &Region) -> Volume3 {
    let size = region.size();
    Volume3::from_fn(size, v.spacing(), |z, y, x| {
        v.get_clamped(
            region.lo[0] + z as i64,
            region.lo[1] + y as i64,
            region.lo[2] + x as i64,
        )
    })
}

/// Trilinearly upsamples an extracted previous-scale patch onto the voxel
/// grid of `out_region` at the current scale.
///
/// Sampling uses global align-corners coordinates (`prev_side -> cur_side`),
/// so tiling these patches reproduces `resample_trilinear` of the whole
/// previous-scale volume exactly.
pub fn upsample_patch(
    prev_patch: &Volume3,
    in_region: &Region,
    out_region: &Region,
    prev_side: usize,
    cur_side: usize,
) -> Volume3 {
    let size = out_region.size();
    Volume3::from_fn(size, prev_patch.spacing(), |z, y, x| {
        let g = [
            out_region.lo[0] + z as i64,
            out_region.lo[1] + y as i64,
            out_region.lo[2] + x as i64,
        ];
        let mut local = [0.0f64; 3];
        for a in 0..3 {
            // Clamp to the working cube so protruding output voxels sample
            // like the replicated global field.
            let gi = g[a].clamp(0, cur_side as i64 - 1) as usize;
            let u = align_corners_coord(gi, prev_side, cur_side);
            local[a] = u - in_region.lo[a] as f64;
        }
        prev_patch.sample_trilinear(local[0], local[1], local[2]) as f32
    })
}

/// Writes each generated patch's paste region into a fresh working volume.
/// Every voxel must be covered exactly once; a missing job yields an error
/// naming the uncovered box.
pub fn assemble(working_shape: [usize; 3], jobs: &[(PatchJob, Volume3)]) -> Result<Volume3> {
    let n = working_shape[0] * working_shape[1] * working_shape[2];
    let mut voxels = vec![0.0f32; n];
    let mut written = vec![false; n];
    let [_, ny, nx] = working_shape;
    for (job, patch) in jobs {
        assert_eq!(
            patch.shape(),
            job.out_region.size(),
            "generated patch shape does not match its out region"
        );
        let p = &job.paste_region;
        if !p.inside(working_shape) {
            return Err(Error::invalid(format!(
                "paste region {p} outside working shape {working_shape:?}"
            )));
        }
        for z in p.lo[0]..p.hi[0] {
            for y in p.lo[1]..p.hi[1] {
                let row = ((z as usize * ny) + y as usize) * nx;
                let pz = (z - job.out_region.lo[0]) as usize;
                let py = (y - job.out_region.lo[1]) as usize;
                for x in p.lo[2]..p.hi[2] {
                    let px = (x - job.out_region.lo[2]) as usize;
                    let idx = row + x as usize;
                    if written[idx] {
                        return Err(Error::DoubleWrite(z, y, x));
                    }
                    written[idx] = true;
                    voxels[idx] = patch.get(pz, py, px);
                }
            }
        }
    }
    if let Some(first) = written.iter().position(|&w| !w) {
        // Report the bounding box of everything uncovered; for a single
        // missing job this is exactly its paste region.
        let coord = |idx: usize| {
            let z = idx / (ny * nx);
            let y = (idx / nx) % ny;
            let x = idx % nx;
            [z as i64, y as i64, x as i64]
        };
        let mut lo = coord(first);
        let mut hi = lo;
        for (idx, w) in written.iter().enumerate() {
            if !w {
                let c = coord(idx);
                for a in 0..3 {
                    lo[a] = lo[a].min(c[a]);
                    hi[a] = hi[a].max(c[a]);
                }
            }
        }
        return Err(Error::Uncovered(Region::new(
            lo,
            [hi[0] + 1, hi[1] + 1, hi[2] + 1],
        )));
    }
    Volume3::from_voxels(working_shape, [1.0; 3], voxels)
}

/// Seam diagnostic: mean absolute intensity jump across paste-region faces
/// divided by the mean jump between all other adjacent voxel pairs. A ratio
/// near 1 means the tiling is invisible.
pub fn seam_jump_ratio(v: &Volume3, jobs: &[PatchJob]) -> f64 {
    let [nz, ny, nx] = v.shape();
    let shape = [nz, ny, nx];
    // Interior paste boundaries per axis.
    let mut seams: [Vec<bool>; 3] = [vec![false; nz], vec![false; ny], vec![false; nx]];
    for job in jobs {
        for a in 0..3 {
            let lo = job.paste_region.lo[a];
            if lo > 0 && (lo as usize) < shape[a] {
                seams[a][lo as usize] = true;
            }
        }
    }
    let mut seam_sum = 0.0f64;
    let mut seam_n = 0u64;
    let mut int_sum = 0.0f64;
    let mut int_n = 0u64;
    let mut visit = |at_seam: bool, a: f32, b: f32| {
        let d = (a as f64 - b as f64).abs();
        if at_seam {
            seam_sum += d;
            seam_n += 1;
        } else {
            int_sum += d;
            int_n += 1;
        }
    };
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let v0 = v.get(z, y, x);
                if z + 1 < nz {
                    visit(seams[0][z + 1], v0, v.get(z + 1, y, x));
                }
                if y + 1 < ny {
                    visit(seams[1][y + 1], v0, v.get(z, y + 1, x));
                }
                if x + 1 < nx {
                    visit(seams[2][x + 1], v0, v.get(z, y, x + 1));
                }
            }
        }
    }
    (seam_sum / seam_n.max(1) as f64) / (int_sum / int_n.max(1) as f64).max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn plan_512_has_three_hr_scales() {
        let p = ScalePlan::new([512, 512, 512], 64, 32).unwrap();
        assert_eq!(p.n_scales(), 3);
        for (i, side) in [64usize, 128, 256, 512].iter().enumerate() {
            assert_eq!(p.working_shape(i), [*side; 3]);
        }
        assert_eq!(p.lr_sketch_side(), 128);
    }

    #[test]
    fn plan_64_is_lr_only() {
        let p = ScalePlan::new([64, 64, 64], 64, 32).unwrap();
        assert_eq!(p.n_scales(), 0);
    }

    #[test]
    fn plan_brats_shape_has_two_hr_scales() {
        let p = ScalePlan::new([155, 240, 240], 64, 32).unwrap();
        assert_eq!(p.n_scales(), 2);
        assert_eq!(p.working_shape(2), [256, 256, 256]);
        assert_eq!(p.crop_region().size(), [155, 240, 240]);
    }

    #[test]
    fn plan_rejects_bad_patch_sides() {
        assert!(ScalePlan::new([128; 3], 64, 64).is_err());
        assert!(ScalePlan::new([128; 3], 64, 30).is_err());
        assert!(ScalePlan::new([128; 3], 64, 0).is_err());
    }

    #[test]
    fn grid_margin_zero_tiles_exactly() {
        let p = ScalePlan::new([128; 3], 64, 32).unwrap();
        let jobs = patch_grid(&p, 1, 0).unwrap();
        assert_eq!(jobs.len(), 64);
        for job in &jobs {
            assert_eq!(job.paste_region, job.out_region);
        }
    }

    #[test]
    fn corner_in_region_needs_replication() {
        let p = ScalePlan::new([128; 3], 64, 32).unwrap();
        let jobs = patch_grid(&p, 1, 0).unwrap();
        let corner = jobs
            .iter()
            .find(|j| j.out_region.lo == [0, 0, 0])
            .unwrap();
        assert_eq!(corner.in_region.lo, [-8, -8, -8]);
        assert_eq!(corner.in_region.hi, [24, 24, 24]);
        assert!(corner.needs_replication);
    }

    #[test]
    fn grid_margin_four_gives_125_jobs() {
        let p = ScalePlan::new([128; 3], 64, 32).unwrap();
        let jobs = patch_grid(&p, 1, 4).unwrap();
        assert_eq!(jobs.len(), 125);
        assert_partition(&jobs, [128; 3]);
    }

    #[test]
    fn margin_too_large_is_rejected() {
        let p = ScalePlan::new([128; 3], 64, 32).unwrap();
        assert!(patch_grid(&p, 1, 16).is_err());
    }

    fn assert_partition(jobs: &[PatchJob], shape: [usize; 3]) {
        let total: u64 = jobs.iter().map(|j| j.paste_region.num_voxels()).sum();
        assert_eq!(total, (shape[0] * shape[1] * shape[2]) as u64);
        // Exhaustive ownership: each voxel in exactly one paste region.
        let mut counts = vec![0u8; shape[0] * shape[1] * shape[2]];
        for j in jobs {
            let p = &j.paste_region;
            for z in p.lo[0]..p.hi[0] {
                for y in p.lo[1]..p.hi[1] {
                    for x in p.lo[2]..p.hi[2] {
                        counts[(z as usize * shape[1] + y as usize) * shape[2] + x as usize] += 1;
                    }
                }
            }
        }
        assert!(counts.iter().all(|&c| c == 1));
    }

    #[test]
    fn alignment_recovers_out_region() {
        let p = ScalePlan::new([256; 3], 64, 32).unwrap();
        for scale in 1..=p.n_scales() {
            for job in patch_grid(&p, scale, 4).unwrap() {
                for a in 0..3 {
                    // in center * 2 == out center
                    let in_c2 = job.in_region.lo[a] + job.in_region.hi[a];
                    let out_c2 = job.out_region.lo[a] + job.out_region.hi[a];
                    assert_eq!(in_c2 * 2, out_c2);
                    // central half of the 2x footprint == out region
                    let foot_lo = job.in_region.lo[a] * 2;
                    let p = job.out_region.hi[a] - job.out_region.lo[a];
                    assert_eq!(foot_lo + p / 2, job.out_region.lo[a]);
                    assert_eq!(foot_lo + p / 2 + p, job.out_region.hi[a]);
                }
            }
        }
    }

    #[test]
    fn extract_interior_is_exact_subarray() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v = Volume3::from_fn([16; 3], [1.0; 3], |_, _, _| rng.gen());
        let r = Region::new([2, 3, 4], [10, 11, 12]);
        let p = extract_patch(&v, &r);
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    assert_eq!(p.get(z, y, x), v.get(z + 2, y + 3, x + 4));
                }
            }
        }
    }

    #[test]
    fn extract_constant_with_protrusion_is_constant() {
        let v = Volume3::constant([16; 3], [1.0; 3], 0.25);
        let p = extract_patch(&v, &Region::new([-2; 3], [30; 3]));
        assert!(p.voxels().iter().all(|&x| x == 0.25));
    }

    #[test]
    fn extract_replicates_high_face_of_ramp() {
        let v = Volume3::from_fn([8, 8, 8], [1.0; 3], |_, _, x| x as f32);
        let p = extract_patch(&v, &Region::new([0, 0, 4], [8, 8, 12]));
        // Index-clamping oracle: columns past the high face replicate x = 7.
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    let expected = (x as i64 + 4).min(7) as f32;
                    assert_eq!(p.get(z, y, x), expected);
                }
            }
        }
    }

    #[test]
    fn assemble_round_trips_random_patches() {
        let p = ScalePlan::new([128; 3], 64, 32).unwrap();
        let jobs = patch_grid(&p, 1, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let with_patches: Vec<(PatchJob, Volume3)> = jobs
            .into_iter()
            .map(|j| {
                let patch = Volume3::from_fn([32; 3], [1.0; 3], |_, _, _| rng.gen());
                (j, patch)
            })
            .collect();
        let vol = assemble([128; 3], &with_patches).unwrap();
        // Re-extracting each paste region gives back the pasted values.
        for (job, patch) in &with_patches {
            let got = extract_patch(&vol, &job.paste_region);
            let pr = &job.paste_region;
            for z in 0..got.shape()[0] {
                for y in 0..got.shape()[1] {
                    for x in 0..got.shape()[2] {
                        let pz = (pr.lo[0] - job.out_region.lo[0]) as usize + z;
                        let py = (pr.lo[1] - job.out_region.lo[1]) as usize + y;
                        let px = (pr.lo[2] - job.out_region.lo[2]) as usize + x;
                        assert_eq!(got.get(z, y, x).to_bits(), patch.get(pz, py, px).to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn missing_job_names_its_paste_box() {
        let p = ScalePlan::new([128; 3], 64, 32).unwrap();
        let jobs = patch_grid(&p, 1, 0).unwrap();
        let missing = jobs[13].clone();
        let with_patches: Vec<(PatchJob, Volume3)> = jobs
            .into_iter()
            .enumerate()
            .filter(|(i, _)| *i != 13)
            .map(|(_, j)| (j, Volume3::constant([32; 3], [1.0; 3], 0.0)))
            .collect();
        match assemble([128; 3], &with_patches) {
            Err(Error::Uncovered(region)) => assert_eq!(region, missing.paste_region),
            other => panic!("expected coverage error, got {other:?}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn paste_regions_always_partition(
            side_exp in 1usize..3, margin in 0usize..16, scale_pick in 0usize..4
        ) {
            let original = 64usize << side_exp;
            let plan = ScalePlan::new([original; 3], 64, 32).unwrap();
            let scale = 1 + scale_pick % plan.n_scales().max(1);
            if scale <= plan.n_scales() {
                match patch_grid(&plan, scale, margin) {
                    Ok(jobs) => {
                        let shape = plan.working_shape(scale);
                        let total: u64 =
                            jobs.iter().map(|j| j.paste_region.num_voxels()).sum();
                        prop_assert_eq!(total, (shape[0] * shape[1] * shape[2]) as u64);
                    }
                    Err(_) => prop_assert!(2 * margin >= 32),
                }
            }
        }
    }
}
