//! The `Volume3` scalar field, VOL1 file I/O, trilinear resampling and
//! percentile intensity normalization.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{track_alloc, track_free, TrackClass};

/// A 3D scalar field. Voxels are stored row-major with x fastest; shape is
/// `(nz, ny, nx)` and spacing is millimeters per voxel `(sz, sy, sx)`.
///
/// Immutable after construction; safe to share across parallel workers.
#[derive(Debug)]
pub struct Volume3 {
    shape: [usize; 3],
    spacing: [f64; 3],
    voxels: Vec<f32>,
}

impl Volume3 {
    /// Builds a volume from raw voxels, validating the type invariants:
    /// positive shape and spacing, matching voxel count, all values finite.
    pub fn from_voxels(shape: [usize; 3], spacing: [f64; 3], voxels: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("non-positive shape {shape:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!("non-positive spacing {spacing:?}")));
        }
        let n = shape[0] * shape[1] * shape[2];
        if voxels.len() != n {
            return Err(Error::invalid(format!(
                "voxel count {} does not match shape {:?} (expected {})",
                voxels.len(),
                shape,
                n
            )));
        }
        if let Some(bad) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite voxel at index {bad}")));
        }
        track_alloc(TrackClass::Volume, n * 4);
        Ok(Volume3 {
            shape,
            spacing,
            voxels,
        })
    }

    /// Builds a volume by evaluating `f(z, y, x)` at every voxel.
    pub fn from_fn(
        shape: [usize; 3],
        spacing: [f64; 3],
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut voxels = Vec::with_capacity(shape[0] * shape[1] * shape[2]);
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    voxels.push(f(z, y, x));
                }
            }
        }
        Self::from_voxels(shape, spacing, voxels).expect("from_fn produced invalid volume")
    }

    pub fn constant(shape: [usize; 3], spacing: [f64; 3], value: f32) -> Self {
        Self::from_fn(shape, spacing, |_, _, _| value)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.voxels[self.index(z, y, x)]
    }

    /// Value at clamped integer coordinates (edge replication).
    #[inline]
    pub fn get_clamped(&self, z: i64, y: i64, x: i64) -> f32 {
        let c = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
        self.get(c(z, self.shape[0]), c(y, self.shape[1]), c(x, self.shape[2]))
    }

    pub fn min_max(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.voxels {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    /// Bitwise voxel equality (shape and every f32 bit pattern).
    pub fn bit_eq(&self, other: &Volume3) -> bool {
        self.shape == other.shape
            && self
                .voxels
                .iter()
                .zip(&other.voxels)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Volume3) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        self.voxels
            .iter()
            .zip(&other.voxels)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .fold(0.0, f64::max)
    }

    /// Trilinear sample at fractional voxel coordinates (f64 math, clamped
    /// borders).
    pub fn sample_trilinear(&self, z: f64, y: f64, x: f64) -> f64 {
        let [nz, ny, nx] = self.shape;
        let part = |u: f64, n: usize| -> (i64, i64, f64) {
            let u = u.clamp(0.0, (n - 1) as f64);
            let lo = u.floor();
            let hi = (lo as i64 + 1).min(n as i64 - 1);
            (lo as i64, hi, u - lo)
        };
        let (z0, z1, fz) = part(z, nz);
        let (y0, y1, fy) = part(y, ny);
        let (x0, x1, fx) = part(x, nx);
        let at = |z: i64, y: i64, x: i64| self.get(z as usize, y as usize, x as usize) as f64;
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), fx);
        let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), fx);
        let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), fx);
        let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), fx);
        lerp(lerp(c00, c01, fy), lerp(c10, c11, fy), fz)
    }

    /// Copies the half-open box `[lo, lo+size)`, which must lie inside the
    /// volume.
    pub fn crop(&self, lo: [usize; 3], size: [usize; 3]) -> Volume3 {
        for a in 0..3 {
            assert!(lo[a] + size[a] <= self.shape[a], "crop out of bounds");
        }
        Volume3::from_fn(size, self.spacing, |z, y, x| {
            self.get(lo[0] + z, lo[1] + y, lo[2] + x)
        })
    }

    /// Grows the volume to `target` by replicating the high faces. The
    /// original content stays at the origin corner.
    pub fn pad_to_shape(&self, target: [usize; 3]) -> Volume3 {
        for a in 0..3 {
            assert!(target[a] >= self.shape[a], "pad target smaller than volume");
        }
        Volume3::from_fn(target, self.spacing, |z, y, x| {
            self.get(
                z.min(self.shape[0] - 1),
                y.min(self.shape[1] - 1),
                x.min(self.shape[2] - 1),
            )
        })
    }
}

impl Clone for Volume3 {
    fn clone(&self) -> Self {
        track_alloc(TrackClass::Volume, self.voxels.len() * 4);
        Volume3 {
            shape: self.shape,
            spacing: self.spacing,
            voxels: self.voxels.clone(),
        }
    }
}

impl Drop for Volume3 {
    fn drop(&mut self) {
        track_free(TrackClass::Volume, self.voxels.len() * 4);
    }
}

// ---------------------------------------------------------------------------
// VOL1 file format
// ---------------------------------------------------------------------------

const VOL1_MAGIC: &[u8; 4] = b"VOL1";

#[derive(Serialize, Deserialize)]
struct Vol1Header {
    shape: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
}

/// Writes the VOL1 byte layout: magic, u32 LE header length, JSON header,
/// then little-endian f32 voxels (x fastest).
pub fn save_volume(v: &Volume3, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = Vol1Header {
        shape: v.shape,
        spacing: v.spacing,
        dtype: "f32".to_string(),
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serialization");
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let put = |w: &mut BufWriter<File>, bytes: &[u8]| -> Result<()> {
        w.write_all(bytes).map_err(|e| Error::io(path, e))
    };
    put(&mut w, VOL1_MAGIC)?;
    put(&mut w, &(header_bytes.len() as u32).to_le_bytes())?;
    put(&mut w, &header_bytes)?;
    for v in &v.voxels {
        put(&mut w, &v.to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads a VOL1 file; round-trips with [`save_volume`] bit-exactly.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume3> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format(path, 0, "truncated before magic"))?;
    if &magic != VOL1_MAGIC {
        return Err(Error::format(
            path,
            0,
            format!("bad magic {:?}, expected \"VOL1\"", String::from_utf8_lossy(&magic)),
        ));
    }
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)
        .map_err(|_| Error::format(path, 4, "truncated header length"))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|_| Error::format(path, 8, "truncated JSON header"))?;
    let header: Vol1Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::format(path, 8, format!("bad JSON header: {e}")))?;
    if header.dtype != "f32" {
        return Err(Error::format(path, 8, format!("unsupported dtype {}", header.dtype)));
    }
    if header.shape.iter().any(|&d| d == 0) {
        return Err(Error::format(path, 8, format!("non-positive shape {:?}", header.shape)));
    }
    let n = header.shape[0] * header.shape[1] * header.shape[2];
    let payload_offset = 8 + header_len as u64;
    let mut payload = Vec::with_capacity(n);
    let mut buf = [0u8; 4];
    for i in 0..n {
        r.read_exact(&mut buf).map_err(|_| {
            Error::format(
                path,
                payload_offset + i as u64 * 4,
                format!("payload truncated: expected {n} voxels, got {i}"),
            )
        })?;
        payload.push(f32::from_le_bytes(buf));
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::format(
            path,
            payload_offset + n as u64 * 4,
            "trailing bytes after payload",
        ));
    }
    Volume3::from_voxels(header.shape, header.spacing, payload)
        .map_err(|e| Error::format(path, 8, e.to_string()))
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

/// Source coordinate for target index `i` under half-voxel ("align corners")
/// mapping: corner voxel centers map onto corner voxel centers, so
/// `u = i * (src - 1) / (dst - 1)`.
#[inline]
pub fn align_corners_coord(i: usize, src: usize, dst: usize) -> f64 {
    if dst <= 1 {
        (src - 1) as f64 * 0.5
    } else {
        i as f64 * (src - 1) as f64 / (dst - 1) as f64
    }
}

/// Trilinear resampling to `target_shape` with half-voxel-aligned sampling.
/// Spacing is rescaled so the physical extent between corner voxel centers is
/// preserved. Separable: one linear-interpolation pass per axis, f64 math.
pub fn resample_trilinear(v: &Volume3, target_shape: [usize; 3]) -> Result<Volume3> {
    if target_shape.iter().any(|&d| d == 0) {
        return Err(Error::invalid(format!("non-positive target shape {target_shape:?}")));
    }
    let src = v.shape;
    // f64 working buffer, resampled axis by axis (z, then y, then x).
    let mut data: Vec<f64> = v.voxels.iter().map(|&x| x as f64).collect();
    let mut shape = src;

    for axis in 0..3 {
        let from = shape[axis];
        let to = target_shape[axis];
        if from == to {
            continue;
        }
        let mut out_shape = shape;
        out_shape[axis] = to;
        let mut out = vec![0.0f64; out_shape[0] * out_shape[1] * out_shape[2]];
        let stride = |s: [usize; 3]| [s[1] * s[2], s[2], 1usize];
        let in_st = stride(shape);
        let out_st = stride(out_shape);
        for i in 0..to {
            let u = align_corners_coord(i, from, to);
            let lo = u.floor() as usize;
            let hi = (lo + 1).min(from - 1);
            let f = u - lo as f64;
            // Copy the interpolated slice orthogonal to `axis`.
            let mut rest = [0usize; 2];
            let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
            for a0 in 0..out_shape[others[0]] {
                rest[0] = a0;
                for a1 in 0..out_shape[others[1]] {
                    rest[1] = a1;
                    let off = |st: [usize; 3], i_axis: usize| {
                        i_axis * st[axis] + rest[0] * st[others[0]] + rest[1] * st[others[1]]
                    };
                    let a = data[off(in_st, lo)];
                    let b = data[off(in_st, hi)];
                    out[off(out_st, i)] = a + (b - a) * f;
                }
            }
        }
        data = out;
        shape = out_shape;
    }

    let mut spacing = v.spacing;
    for a in 0..3 {
        if target_shape[a] > 1 {
            spacing[a] = v.spacing[a] * (src[a].saturating_sub(1)) as f64
                / (target_shape[a] - 1) as f64;
        } else {
            spacing[a] = v.spacing[a] * src[a] as f64;
        }
        if spacing[a] <= 0.0 {
            spacing[a] = v.spacing[a];
        }
    }
    Volume3::from_voxels(target_shape, spacing, data.iter().map(|&x| x as f32).collect())
}

// ---------------------------------------------------------------------------
// Intensity normalization
// ---------------------------------------------------------------------------

/// Result of [`normalize_intensity`]; `degenerate` marks a constant input
/// (zero percentile span), which maps to an all-zero volume.
#[derive(Debug, Clone)]
pub struct Normalized {
    pub volume: Volume3,
    pub degenerate: bool,
}

/// Linearly interpolated percentile (`p` in [0,1]) of a sorted slice.
fn percentile_sorted(sorted: &[f32], p: f64) -> f64 {
    let n = sorted.len();
    let pos = p * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let f = pos - lo as f64;
    sorted[lo] as f64 + (sorted[hi] as f64 - sorted[lo] as f64) * f
}

/// Maps the `lo_pct`/`hi_pct` intensity percentiles to 0/1 and clamps.
pub fn normalize_intensity(v: &Volume3, lo_pct: f64, hi_pct: f64) -> Result<Normalized> {
    if !(0.0..1.0).contains(&lo_pct) || !(lo_pct < hi_pct) || hi_pct > 1.0 {
        return Err(Error::invalid(format!(
            "percentiles must satisfy 0 <= lo < hi <= 1, got ({lo_pct}, {hi_pct})"
        )));
    }
    let mut sorted = v.voxels.clone();
    sorted.sort_by(f32::total_cmp);
    let lo = percentile_sorted(&sorted, lo_pct);
    let hi = percentile_sorted(&sorted, hi_pct);
    let span = hi - lo;
    if span <= 0.0 {
        return Ok(Normalized {
            volume: Volume3::constant(v.shape, v.spacing, 0.0),
            degenerate: true,
        });
    }
    let voxels = v
        .voxels
        .iter()
        .map(|&x| (((x as f64 - lo) / span).clamp(0.0, 1.0)) as f32)
        .collect();
    Ok(Normalized {
        volume: Volume3::from_voxels(v.shape, v.spacing, voxels)?,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(shape: [usize; 3], seed: u64) -> Volume3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume3::from_fn(shape, [1.0; 3], |_, _, _| rng.gen::<f32>())
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vol");
        let v = random_volume([8, 8, 8], 1);
        save_volume(&v, &path).unwrap();
        let w = load_volume(&path).unwrap();
        assert!(v.bit_eq(&w));
        assert_eq!(v.spacing(), w.spacing());
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.vol");
        // Header advertises 2x2x2 but only 7 floats follow.
        let header = br#"{"shape":[2,2,2],"spacing":[1.0,1.0,1.0],"dtype":"f32"}"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"VOL1");
        bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bytes.extend_from_slice(header);
        for _ in 0..7 {
            bytes.extend_from_slice(&1.0f32.to_le_bytes());
        }
        std::fs::write(&path, bytes).unwrap();
        match load_volume(&path) {
            Err(Error::Format { offset, reason, .. }) => {
                assert_eq!(offset, 8 + header.len() as u64 + 7 * 4);
                assert!(reason.contains("truncated"), "{reason}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_names_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.vol");
        std::fs::write(&path, b"VOL9somethingsomething").unwrap();
        match load_volume(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn non_positive_shape_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zero.vol");
        let header = br#"{"shape":[0,2,2],"spacing":[1.0,1.0,1.0],"dtype":"f32"}"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"VOL1");
        bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bytes.extend_from_slice(header);
        std::fs::write(&path, bytes).unwrap();
        match load_volume(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn resample_constant_stays_constant() {
        let v = Volume3::constant([5, 7, 9], [1.0; 3], 0.37);
        let r = resample_trilinear(&v, [12, 3, 20]).unwrap();
        for &x in r.voxels() {
            assert!((x - 0.37).abs() < 1e-6);
        }
    }

    #[test]
    fn resample_same_shape_is_identity() {
        let v = random_volume([6, 5, 7], 2);
        let r = resample_trilinear(&v, v.shape()).unwrap();
        assert!(v.max_abs_diff(&r) < 1e-6);
    }

    #[test]
    fn up_then_down_recovers_linear_ramp() {
        let nx = 16;
        let v = Volume3::from_fn([4, 4, nx], [1.0; 3], |_, _, x| x as f32 / nx as f32);
        let up = resample_trilinear(&v, [4, 4, 2 * nx]).unwrap();
        let down = resample_trilinear(&up, [4, 4, nx]).unwrap();
        assert!(v.max_abs_diff(&down) < 1e-6);
    }

    /// Direct-formula trilinear oracle, independent of the separable pass.
    fn resample_oracle(v: &Volume3, target: [usize; 3]) -> Vec<f64> {
        let mut out = Vec::with_capacity(target[0] * target[1] * target[2]);
        for z in 0..target[0] {
            for y in 0..target[1] {
                for x in 0..target[2] {
                    let uz = align_corners_coord(z, v.shape()[0], target[0]);
                    let uy = align_corners_coord(y, v.shape()[1], target[1]);
                    let ux = align_corners_coord(x, v.shape()[2], target[2]);
                    out.push(v.sample_trilinear(uz, uy, ux));
                }
            }
        }
        out
    }

    #[test]
    fn downsample_matches_direct_formula_oracle() {
        let v = random_volume([64, 64, 64], 3);
        let r = resample_trilinear(&v, [32, 32, 32]).unwrap();
        let oracle = resample_oracle(&v, [32, 32, 32]);
        let max_diff = r
            .voxels()
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (*a as f64 - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff < 1e-6, "max diff {max_diff}");
    }

    #[test]
    fn resample_stays_within_input_range() {
        let v = random_volume([9, 11, 13], 4);
        let (lo, hi) = v.min_max();
        let r = resample_trilinear(&v, [17, 5, 23]).unwrap();
        let (rlo, rhi) = r.min_max();
        assert!(rlo >= lo && rhi <= hi);
    }

    #[test]
    fn normalize_ramp_is_unchanged() {
        let n = 64;
        let v = Volume3::from_fn([4, 4, n], [1.0; 3], |_, _, x| x as f32 / (n - 1) as f32);
        let r = normalize_intensity(&v, 0.0, 1.0).unwrap();
        assert!(!r.degenerate);
        assert!(v.max_abs_diff(&r.volume) < 1e-6);
    }

    #[test]
    fn normalize_constant_is_degenerate() {
        let v = Volume3::constant([4, 4, 4], [1.0; 3], 0.7);
        let r = normalize_intensity(&v, 0.005, 0.995).unwrap();
        assert!(r.degenerate);
        assert!(r.volume.voxels().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn normalize_cut_points_match_sort_oracle() {
        let v = random_volume([10, 10, 10], 5);
        let lo_pct = 0.1;
        let hi_pct = 0.9;
        // Sort-the-voxels oracle for the cut points.
        let mut sorted: Vec<f32> = v.voxels().to_vec();
        sorted.sort_by(f32::total_cmp);
        let lo = percentile_sorted(&sorted, lo_pct);
        let hi = percentile_sorted(&sorted, hi_pct);
        let r = normalize_intensity(&v, lo_pct, hi_pct).unwrap();
        for (i, &x) in v.voxels().iter().enumerate() {
            let expected = ((x as f64 - lo) / (hi - lo)).clamp(0.0, 1.0);
            assert!((r.volume.voxels()[i] as f64 - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_rejects_bad_percentiles() {
        let v = Volume3::constant([2, 2, 2], [1.0; 3], 0.0);
        assert!(normalize_intensity(&v, 0.9, 0.1).is_err());
        assert!(normalize_intensity(&v, 0.5, 0.5).is_err());
    }

    #[test]
    fn pad_and_crop_are_inverse() {
        let v = random_volume([5, 6, 7], 6);
        let padded = v.pad_to_shape([8, 8, 8]);
        assert_eq!(padded.get(7, 7, 7), v.get(4, 5, 6));
        let back = padded.crop([0, 0, 0], v.shape());
        assert!(v.bit_eq(&back));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn save_load_round_trips(
            nz in 1usize..5, ny in 1usize..5, nx in 1usize..5, seed in 0u64..1000
        ) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.vol");
            let v = random_volume([nz, ny, nx], seed);
            save_volume(&v, &path).unwrap();
            let w = load_volume(&path).unwrap();
            prop_assert!(v.bit_eq(&w));
        }
    }
}
