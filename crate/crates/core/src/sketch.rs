//! The conditioning sketch: gradient-magnitude-weighted 3D Canny edges with
//! optional pathology-label overlay.
//!
//! Sketch values are single-channel: 0 for non-edge voxels, weights in
//! (0, 0.9] for edge voxels, and exactly 1.0 for overlaid label voxels. The
//! reserved band above 0.9 keeps labels separable from edges.

use std::collections::VecDeque;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::Volume3;

/// Maximum edge weight; the band (0.9, 1.0) is reserved for labels.
pub const EDGE_WEIGHT_CAP: f32 = 0.9;

/// A conditioning field shaped like its source volume.
#[derive(Debug, Clone)]
pub struct Sketch {
    pub volume: Volume3,
    /// Set when the source volume had no intensity variation and the sketch
    /// is all zeros.
    pub degenerate: bool,
}

// ---------------------------------------------------------------------------
// Gaussian smoothing
// ---------------------------------------------------------------------------

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

fn smooth_axis(data: &[f64], shape: [usize; 3], axis: usize, kernel: &[f64]) -> Vec<f64> {
    if kernel.len() == 1 {
        return data.to_vec();
    }
    let radius = (kernel.len() / 2) as i64;
    let strides = [shape[1] * shape[2], shape[2], 1usize];
    let n_axis = shape[axis] as i64;
    let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
    let lines: Vec<(usize, usize)> = (0..shape[others[0]])
        .flat_map(|a| (0..shape[others[1]]).map(move |b| (a, b)))
        .collect();
    let mut out = vec![0.0f64; data.len()];
    // Each task owns one line along `axis`; disjoint writes.
    let line_stride = strides[axis];
    let results: Vec<(usize, Vec<f64>)> = lines
        .par_iter()
        .map(|&(a, b)| {
            let base = a * strides[others[0]] + b * strides[others[1]];
            let mut line = vec![0.0f64; n_axis as usize];
            for i in 0..n_axis {
                let mut acc = 0.0;
                for (j, &w) in kernel.iter().enumerate() {
                    let src = (i + j as i64 - radius).clamp(0, n_axis - 1) as usize;
                    acc += w * data[base + src * line_stride];
                }
                line[i as usize] = acc;
            }
            (base, line)
        })
        .collect();
    for (base, line) in results {
        for (i, v) in line.into_iter().enumerate() {
            out[base + i * line_stride] = v;
        }
    }
    out
}

fn smooth_f64(data: &[f64], shape: [usize; 3], sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let mut cur = data.to_vec();
    for axis in 0..3 {
        cur = smooth_axis(&cur, shape, axis, &kernel);
    }
    cur
}

/// Separable Gaussian blur (truncated at 3 sigma, edge-replicated borders).
pub fn gaussian_blur3(v: &Volume3, sigma: f64) -> Volume3 {
    let data: Vec<f64> = v.voxels().iter().map(|&x| x as f64).collect();
    let smoothed = smooth_f64(&data, v.shape(), sigma);
    Volume3::from_voxels(
        v.shape(),
        v.spacing(),
        smoothed.into_iter().map(|x| x as f32).collect(),
    )
    .expect("blur produced invalid volume")
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

fn central_diff(data: &[f64], shape: [usize; 3], axis: usize) -> Vec<f64> {
    let strides = [shape[1] * shape[2], shape[2], 1usize];
    let n_axis = shape[axis] as i64;
    let stride = strides[axis] as i64;
    let mut out = vec![0.0f64; data.len()];
    out.par_iter_mut().enumerate().for_each(|(idx, o)| {
        let i = match axis {
            0 => (idx / strides[0]) as i64,
            1 => ((idx / strides[1]) % shape[1]) as i64,
            _ => (idx % shape[2]) as i64,
        };
        let fwd = if i + 1 < n_axis { idx as i64 + stride } else { idx as i64 };
        let bwd = if i > 0 { idx as i64 - stride } else { idx as i64 };
        *o = (data[fwd as usize] - data[bwd as usize]) * 0.5;
    });
    out
}

/// Gaussian smoothing followed by per-axis central differences. Returns
/// `(gx, gy, gz, magnitude)` as volumes.
pub fn gradient3d(v: &Volume3, sigma: f64) -> Result<[Volume3; 4]> {
    if sigma < 0.0 {
        return Err(Error::invalid("sigma must be >= 0"));
    }
    let shape = v.shape();
    let data: Vec<f64> = v.voxels().iter().map(|&x| x as f64).collect();
    let smoothed = smooth_f64(&data, shape, sigma);
    let gz = central_diff(&smoothed, shape, 0);
    let gy = central_diff(&smoothed, shape, 1);
    let gx = central_diff(&smoothed, shape, 2);
    let mag: Vec<f64> = gx
        .iter()
        .zip(&gy)
        .zip(&gz)
        .map(|((x, y), z)| (x * x + y * y + z * z).sqrt())
        .collect();
    let mk = |d: Vec<f64>| {
        Volume3::from_voxels(shape, v.spacing(), d.into_iter().map(|x| x as f32).collect())
    };
    Ok([mk(gx)?, mk(gy)?, mk(gz)?, mk(mag)?])
}

// ---------------------------------------------------------------------------
// Canny
// ---------------------------------------------------------------------------

fn percentile_of(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let pos = p * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// 3D Canny: smoothed gradients, non-maximum suppression along the quantized
/// gradient direction (26-neighborhood), percentile hysteresis, and
/// gradient-magnitude weights capped at 0.9.
pub fn canny3d(v: &Volume3, sigma: f64, lo_pct: f64, hi_pct: f64) -> Result<Sketch> {
    if !(0.0 < lo_pct && lo_pct < hi_pct && hi_pct < 1.0) {
        return Err(Error::invalid(format!(
            "thresholds must satisfy 0 < lo < hi < 1, got ({lo_pct}, {hi_pct})"
        )));
    }
    let shape = v.shape();
    let data: Vec<f64> = v.voxels().iter().map(|&x| x as f64).collect();
    let smoothed = smooth_f64(&data, shape, sigma);
    let gz = central_diff(&smoothed, shape, 0);
    let gy = central_diff(&smoothed, shape, 1);
    let gx = central_diff(&smoothed, shape, 2);
    let mag: Vec<f64> = gx
        .iter()
        .zip(&gy)
        .zip(&gz)
        .map(|((x, y), z)| (x * x + y * y + z * z).sqrt())
        .collect();
    let max_mag = mag.iter().cloned().fold(0.0f64, f64::max);
    if max_mag == 0.0 {
        return Ok(Sketch {
            volume: Volume3::constant(shape, v.spacing(), 0.0),
            degenerate: true,
        });
    }

    let [nz, ny, nx] = shape;
    let at = |z: i64, y: i64, x: i64| -> f64 {
        if z < 0 || y < 0 || x < 0 || z >= nz as i64 || y >= ny as i64 || x >= nx as i64 {
            0.0
        } else {
            mag[(z as usize * ny + y as usize) * nx + x as usize]
        }
    };

    // Non-maximum suppression along the quantized gradient direction.
    let survives: Vec<bool> = (0..mag.len())
        .into_par_iter()
        .map(|idx| {
            let m = mag[idx];
            if m <= 0.0 {
                return false;
            }
            let z = (idx / (ny * nx)) as i64;
            let y = ((idx / nx) % ny) as i64;
            let x = (idx % nx) as i64;
            let dz = (gz[idx] / m).round() as i64;
            let dy = (gy[idx] / m).round() as i64;
            let dx = (gx[idx] / m).round() as i64;
            let fwd = at(z + dz, y + dy, x + dx);
            let bwd = at(z - dz, y - dy, x - dx);
            m >= fwd && m > bwd
        })
        .collect();

    // Hysteresis thresholds from the percentiles of nonzero magnitudes.
    let mut nonzero: Vec<f64> = mag.iter().cloned().filter(|&m| m > 0.0).collect();
    nonzero.sort_by(f64::total_cmp);
    let lo_t = percentile_of(&nonzero, lo_pct);
    let hi_t = percentile_of(&nonzero, hi_pct);

    // BFS from strong seeds through weak survivors, 26-connected.
    let mut edge = vec![false; mag.len()];
    let mut queue = VecDeque::new();
    for idx in 0..mag.len() {
        if survives[idx] && mag[idx] >= hi_t {
            edge[idx] = true;
            queue.push_back(idx);
        }
    }
    while let Some(idx) = queue.pop_front() {
        let z = (idx / (ny * nx)) as i64;
        let y = ((idx / nx) % ny) as i64;
        let x = (idx % nx) as i64;
        for dz in -1..=1i64 {
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    if dz == 0 && dy == 0 && dx == 0 {
                        continue;
                    }
                    let (pz, py, px) = (z + dz, y + dy, x + dx);
                    if pz < 0 || py < 0 || px < 0
                        || pz >= nz as i64 || py >= ny as i64 || px >= nx as i64
                    {
                        continue;
                    }
                    let n = (pz as usize * ny + py as usize) * nx + px as usize;
                    if !edge[n] && survives[n] && mag[n] >= lo_t {
                        edge[n] = true;
                        queue.push_back(n);
                    }
                }
            }
        }
    }

    let voxels: Vec<f32> = (0..mag.len())
        .map(|i| {
            if edge[i] {
                (EDGE_WEIGHT_CAP as f64 * mag[i] / max_mag) as f32
            } else {
                0.0
            }
        })
        .collect();
    Ok(Sketch {
        volume: Volume3::from_voxels(shape, v.spacing(), voxels)?,
        degenerate: false,
    })
}

// ---------------------------------------------------------------------------
// Label overlay
// ---------------------------------------------------------------------------

/// Affine transforms applied to a label mask about its centroid before
/// overlay. Mirroring flips the y axis; scaling is uniform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LabelTransform {
    Identity,
    MirrorY,
    Scale(f64),
}

fn mask_centroid(mask: &Volume3) -> Option<[f64; 3]> {
    let [_, ny, nx] = mask.shape();
    let mut sum = [0.0f64; 3];
    let mut count = 0usize;
    for (idx, &m) in mask.voxels().iter().enumerate() {
        if m >= 0.5 {
            let z = idx / (ny * nx);
            let y = (idx / nx) % ny;
            let x = idx % nx;
            sum[0] += z as f64;
            sum[1] += y as f64;
            sum[2] += x as f64;
            count += 1;
        }
    }
    if count == 0 {
        None
    } else {
        Some([sum[0] / count as f64, sum[1] / count as f64, sum[2] / count as f64])
    }
}

/// Applies `transform` to the binary mask (nearest-neighbor resampling about
/// the mask centroid) and returns the transformed mask volume.
pub fn transform_mask(mask: &Volume3, transform: LabelTransform) -> Result<Volume3> {
    if let LabelTransform::Scale(s) = transform {
        if !(s > 0.0) {
            return Err(Error::invalid(format!("scale factor must be positive, got {s}")));
        }
    }
    let centroid = match mask_centroid(mask) {
        Some(c) => c,
        None => return Ok(mask.clone()),
    };
    let shape = mask.shape();
    let inb = |p: i64, n: usize| p >= 0 && p < n as i64;
    let out = match transform {
        LabelTransform::Identity => mask.clone(),
        LabelTransform::MirrorY => {
            // Rounding 2*centroid once makes the mirror an exact integer
            // involution.
            let d = (2.0 * centroid[1]).round() as i64;
            Volume3::from_fn(shape, mask.spacing(), |z, y, x| {
                let sy = d - y as i64;
                if inb(sy, shape[1]) && mask.get(z, sy as usize, x) >= 0.5 {
                    1.0
                } else {
                    0.0
                }
            })
        }
        LabelTransform::Scale(s) => Volume3::from_fn(shape, mask.spacing(), |z, y, x| {
            let src = [
                (centroid[0] + (z as f64 - centroid[0]) / s).round() as i64,
                (centroid[1] + (y as f64 - centroid[1]) / s).round() as i64,
                (centroid[2] + (x as f64 - centroid[2]) / s).round() as i64,
            ];
            if inb(src[0], shape[0])
                && inb(src[1], shape[1])
                && inb(src[2], shape[2])
                && mask.get(src[0] as usize, src[1] as usize, src[2] as usize) >= 0.5
            {
                1.0
            } else {
                0.0
            }
        }),
    };
    Ok(out)
}

/// Sets sketch voxels under the (transformed) mask to exactly 1.0, leaving
/// every other value unchanged. An empty mask returns the sketch as is.
pub fn overlay_labels(s: &Sketch, mask: &Volume3, transform: LabelTransform) -> Result<Sketch> {
    if mask.shape() != s.volume.shape() {
        return Err(Error::invalid(format!(
            "mask shape {:?} does not match sketch shape {:?}",
            mask.shape(),
            s.volume.shape()
        )));
    }
    if mask_centroid(mask).is_none() {
        return Ok(s.clone());
    }
    let transformed = transform_mask(mask, transform)?;
    let voxels: Vec<f32> = s
        .volume
        .voxels()
        .iter()
        .zip(transformed.voxels())
        .map(|(&v, &m)| if m >= 0.5 { 1.0 } else { v })
        .collect();
    Ok(Sketch {
        volume: Volume3::from_voxels(s.volume.shape(), s.volume.spacing(), voxels)?,
        degenerate: s.degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gradient_of_ramp_is_constant_in_interior() {
        let nx = 16;
        let v = Volume3::from_fn([8, 8, nx], [1.0; 3], |_, _, x| x as f32 / nx as f32);
        let [gx, gy, gz, _] = gradient3d(&v, 0.0).unwrap();
        for z in 0..8 {
            for y in 0..8 {
                for x in 1..nx - 1 {
                    assert!((gx.get(z, y, x) - 1.0 / nx as f32).abs() < 1e-6);
                    assert!(gy.get(z, y, x).abs() < 1e-7);
                    assert!(gz.get(z, y, x).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let v = Volume3::constant([8; 3], [1.0; 3], 0.4);
        let [gx, gy, gz, mag] = gradient3d(&v, 1.0).unwrap();
        for g in [&gx, &gy, &gz, &mag] {
            assert!(g.voxels().iter().all(|&x| x.abs() < 1e-9));
        }
    }

    /// Explicit dense 3D Gaussian convolution + differences, the slow oracle.
    fn gradient_oracle(v: &Volume3, sigma: f64) -> [Vec<f64>; 4] {
        let shape = v.shape();
        let [nz, ny, nx] = shape;
        let kernel = gaussian_kernel(sigma);
        let radius = (kernel.len() / 2) as i64;
        let clamp = |p: i64, n: usize| p.clamp(0, n as i64 - 1) as usize;
        let mut smoothed = vec![0.0f64; v.len()];
        for z in 0..nz as i64 {
            for y in 0..ny as i64 {
                for x in 0..nx as i64 {
                    let mut acc = 0.0;
                    for (kz, wz) in kernel.iter().enumerate() {
                        for (ky, wy) in kernel.iter().enumerate() {
                            for (kx, wx) in kernel.iter().enumerate() {
                                let sz = clamp(z + kz as i64 - radius, nz);
                                let sy = clamp(y + ky as i64 - radius, ny);
                                let sx = clamp(x + kx as i64 - radius, nx);
                                acc += wz * wy * wx * v.get(sz, sy, sx) as f64;
                            }
                        }
                    }
                    smoothed[(z as usize * ny + y as usize) * nx + x as usize] = acc;
                }
            }
        }
        let get = |z: i64, y: i64, x: i64| {
            smoothed[(clamp(z, nz) * ny + clamp(y, ny)) * nx + clamp(x, nx)]
        };
        let mut gx = vec![0.0; v.len()];
        let mut gy = vec![0.0; v.len()];
        let mut gz = vec![0.0; v.len()];
        let mut mag = vec![0.0; v.len()];
        for z in 0..nz as i64 {
            for y in 0..ny as i64 {
                for x in 0..nx as i64 {
                    let i = (z as usize * ny + y as usize) * nx + x as usize;
                    gx[i] = (get(z, y, x + 1) - get(z, y, x - 1)) * 0.5;
                    gy[i] = (get(z, y + 1, x) - get(z, y - 1, x)) * 0.5;
                    gz[i] = (get(z + 1, y, x) - get(z - 1, y, x)) * 0.5;
                    mag[i] = (gx[i] * gx[i] + gy[i] * gy[i] + gz[i] * gz[i]).sqrt();
                }
            }
        }
        [gx, gy, gz, mag]
    }

    #[test]
    fn gradient_matches_dense_convolution_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v = Volume3::from_fn([16; 3], [1.0; 3], |_, _, _| rng.gen());
        let got = gradient3d(&v, 1.0).unwrap();
        let want = gradient_oracle(&v, 1.0);
        for (g, w) in got.iter().zip(&want) {
            let max_diff = g
                .voxels()
                .iter()
                .zip(w)
                .map(|(a, b)| (*a as f64 - b).abs())
                .fold(0.0, f64::max);
            assert!(max_diff < 1e-6, "max diff {max_diff}");
        }
    }

    fn sphere_volume(side: usize, radius: f64, value: f32) -> Volume3 {
        let c = (side as f64 - 1.0) / 2.0;
        Volume3::from_fn([side; 3], [1.0; 3], |z, y, x| {
            let d = ((z as f64 - c).powi(2) + (y as f64 - c).powi(2) + (x as f64 - c).powi(2))
                .sqrt();
            if d <= radius {
                value
            } else {
                0.0
            }
        })
    }

    #[test]
    fn canny_finds_sphere_surface() {
        let side = 48;
        let radius = 10.0;
        let v = sphere_volume(side, radius, 1.0);
        let s = canny3d(&v, 1.0, 0.7, 0.9).unwrap();
        assert!(!s.degenerate);
        let c = (side as f64 - 1.0) / 2.0;
        let mut near = 0usize;
        let mut total = 0usize;
        for z in 0..side {
            for y in 0..side {
                for x in 0..side {
                    if s.volume.get(z, y, x) > 0.0 {
                        total += 1;
                        let d = ((z as f64 - c).powi(2)
                            + (y as f64 - c).powi(2)
                            + (x as f64 - c).powi(2))
                        .sqrt();
                        if (d - radius).abs() <= 1.0 {
                            near += 1;
                        }
                    }
                }
            }
        }
        assert!(total > 0, "no edges found");
        assert!(
            near as f64 >= 0.95 * total as f64,
            "only {near}/{total} edge voxels near the surface"
        );
    }

    #[test]
    fn canny_on_constant_is_degenerate() {
        let v = Volume3::constant([16; 3], [1.0; 3], 0.5);
        let s = canny3d(&v, 1.0, 0.7, 0.9).unwrap();
        assert!(s.degenerate);
        assert!(s.volume.voxels().iter().all(|&x| x == 0.0));
    }

    /// 26-connected component count.
    fn component_count(edges: &Volume3) -> usize {
        let [nz, ny, nx] = edges.shape();
        let mut seen = vec![false; edges.len()];
        let mut count = 0;
        for start in 0..edges.len() {
            if seen[start] || edges.voxels()[start] == 0.0 {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(idx) = stack.pop() {
                let z = (idx / (ny * nx)) as i64;
                let y = ((idx / nx) % ny) as i64;
                let x = (idx % nx) as i64;
                for dz in -1..=1i64 {
                    for dy in -1..=1i64 {
                        for dx in -1..=1i64 {
                            let (pz, py, px) = (z + dz, y + dy, x + dx);
                            if pz < 0 || py < 0 || px < 0
                                || pz >= nz as i64 || py >= ny as i64 || px >= nx as i64
                            {
                                continue;
                            }
                            let n = (pz as usize * ny + py as usize) * nx + px as usize;
                            if !seen[n] && edges.voxels()[n] > 0.0 {
                                seen[n] = true;
                                stack.push(n);
                            }
                        }
                    }
                }
            }
        }
        count
    }

    #[test]
    fn nested_spheres_give_two_shells() {
        let side = 48;
        let c = (side as f64 - 1.0) / 2.0;
        let v = Volume3::from_fn([side; 3], [1.0; 3], |z, y, x| {
            let d = ((z as f64 - c).powi(2) + (y as f64 - c).powi(2) + (x as f64 - c).powi(2))
                .sqrt();
            if d <= 7.0 {
                1.0
            } else if d <= 14.0 {
                0.5
            } else {
                0.0
            }
        });
        let s = canny3d(&v, 1.0, 0.7, 0.9).unwrap();
        assert_eq!(component_count(&s.volume), 2);
    }

    #[test]
    fn canny_is_invariant_to_affine_rescaling() {
        let v = sphere_volume(32, 8.0, 0.5);
        let scaled = Volume3::from_voxels(
            v.shape(),
            v.spacing(),
            v.voxels().iter().map(|&x| 2.0 * x + 0.25).collect(),
        )
        .unwrap();
        let a = canny3d(&v, 1.0, 0.7, 0.9).unwrap();
        let b = canny3d(&scaled, 1.0, 0.7, 0.9).unwrap();
        let set_a: Vec<bool> = a.volume.voxels().iter().map(|&x| x > 0.0).collect();
        let set_b: Vec<bool> = b.volume.voxels().iter().map(|&x| x > 0.0).collect();
        assert_eq!(set_a, set_b);
    }

    #[test]
    fn sketch_values_stay_in_bands() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let v = Volume3::from_fn([24; 3], [1.0; 3], |_, _, _| rng.gen());
        let s = canny3d(&v, 1.0, 0.7, 0.9).unwrap();
        let ball = Volume3::from_fn([24; 3], [1.0; 3], |z, y, x| {
            let d = ((z as f64 - 12.0).powi(2) + (y as f64 - 12.0).powi(2)
                + (x as f64 - 12.0).powi(2))
            .sqrt();
            if d <= 4.0 {
                1.0
            } else {
                0.0
            }
        });
        let o = overlay_labels(&s, &ball, LabelTransform::Identity).unwrap();
        for (i, &x) in o.volume.voxels().iter().enumerate() {
            assert!((0.0..=1.0).contains(&x));
            if ball.voxels()[i] >= 0.5 {
                assert_eq!(x, 1.0);
            } else {
                assert!(x <= EDGE_WEIGHT_CAP);
                // Edges outside the mask are untouched.
                assert_eq!(x, s.volume.voxels()[i]);
            }
        }
    }

    #[test]
    fn empty_mask_leaves_sketch_unchanged() {
        let v = sphere_volume(24, 6.0, 1.0);
        let s = canny3d(&v, 1.0, 0.7, 0.9).unwrap();
        let empty = Volume3::constant([24; 3], [1.0; 3], 0.0);
        let o = overlay_labels(&s, &empty, LabelTransform::Scale(1.15)).unwrap();
        assert!(o.volume.bit_eq(&s.volume));
    }

    #[test]
    fn mirror_twice_is_identity_on_voxel_set() {
        // y-asymmetric blob (two fused balls) so the mirror about the
        // centroid actually moves voxels.
        let mask = Volume3::from_fn([20; 3], [1.0; 3], |z, y, x| {
            let d1 = ((z as f64 - 9.0).powi(2) + (y as f64 - 6.0).powi(2)
                + (x as f64 - 11.0).powi(2))
            .sqrt();
            let d2 = ((z as f64 - 9.0).powi(2) + (y as f64 - 10.0).powi(2)
                + (x as f64 - 11.0).powi(2))
            .sqrt();
            if d1 <= 3.5 || d2 <= 2.0 {
                1.0
            } else {
                0.0
            }
        });
        let once = transform_mask(&mask, LabelTransform::MirrorY).unwrap();
        assert!(!once.bit_eq(&mask), "mirror should move an off-center mask");
        let twice = transform_mask(&once, LabelTransform::MirrorY).unwrap();
        assert!(twice.bit_eq(&mask));
    }

    #[test]
    fn zoom_scales_voxel_count_cubically() {
        let mask = Volume3::from_fn([32; 3], [1.0; 3], |z, y, x| {
            let d = ((z as f64 - 15.5).powi(2) + (y as f64 - 15.5).powi(2)
                + (x as f64 - 15.5).powi(2))
            .sqrt();
            if d <= 8.0 {
                1.0
            } else {
                0.0
            }
        });
        let count = |m: &Volume3| m.voxels().iter().filter(|&&x| x >= 0.5).count() as f64;
        let zoomed = transform_mask(&mask, LabelTransform::Scale(1.15)).unwrap();
        let ratio = count(&zoomed) / count(&mask);
        let expected = 1.15f64.powi(3);
        assert!(
            (ratio - expected).abs() / expected < 0.10,
            "ratio {ratio} vs {expected}"
        );
    }
}
