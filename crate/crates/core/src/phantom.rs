//! Procedural paired-topology phantom dataset.
//!
//! One seed fixes the geometry: a union of random ellipsoids with distinct
//! intensities and a nested internal shell per blob, plus an optional lesion
//! ball that also fills the mask. The two appearance domains share that
//! geometry voxel for voxel: `smooth` blurs it, `noisy` sharpens it and adds
//! multiplicative speckle. That gives ground truth for unpaired translation
//! evaluation: translate a noisy phantom, compare against its smooth twin.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sketch::gaussian_blur3;
use crate::volume::Volume3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Smooth,
    Noisy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub radius: f64,
    pub center: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub side: usize,
    pub n_blobs: usize,
    pub domain: Domain,
    pub lesion: Option<Lesion>,
}

const BACKGROUND: f32 = 0.22;
const SPECKLE_STD: f64 = 0.15;
const LESION_INTENSITY: f32 = 0.95;

fn validate(spec: &PhantomSpec) -> Result<()> {
    let s = spec.side;
    if s < 64 || s & (s - 1) != 0 {
        return Err(Error::invalid(format!(
            "phantom side must be a power of two >= 64, got {s}"
        )));
    }
    if spec.n_blobs == 0 {
        return Err(Error::invalid("phantom needs at least one blob"));
    }
    if let Some(l) = &spec.lesion {
        let r = l.radius.ceil() as i64;
        for &c in &l.center {
            if (c as i64) < r || c as i64 + r >= s as i64 {
                return Err(Error::invalid(format!(
                    "lesion (radius {}, center {:?}) extends outside the {s}^3 volume",
                    l.radius, l.center
                )));
            }
        }
    }
    Ok(())
}

struct Blob {
    center: [f64; 3],
    semi_axes: [f64; 3],
    intensity: f32,
    shell_intensity: f32,
}

impl Blob {
    fn contains(&self, p: [f64; 3], scale: f64) -> bool {
        let mut acc = 0.0;
        for a in 0..3 {
            let d = (p[a] - self.center[a]) / (self.semi_axes[a] * scale);
            acc += d * d;
        }
        acc <= 1.0
    }
}

/// The shared piecewise-constant geometry of one seed, before any appearance
/// processing, plus the lesion mask.
pub fn gen_geometry(spec: &PhantomSpec) -> Result<(Volume3, Volume3)> {
    validate(spec)?;
    let s = spec.side;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let blobs: Vec<Blob> = (0..spec.n_blobs)
        .map(|i| {
            let center = [
                (0.25 + 0.5 * rng.gen::<f64>()) * s as f64,
                (0.25 + 0.5 * rng.gen::<f64>()) * s as f64,
                (0.25 + 0.5 * rng.gen::<f64>()) * s as f64,
            ];
            let semi_axes = [
                (0.10 + 0.10 * rng.gen::<f64>()) * s as f64,
                (0.10 + 0.10 * rng.gen::<f64>()) * s as f64,
                (0.10 + 0.10 * rng.gen::<f64>()) * s as f64,
            ];
            // Distinct base intensity per blob with a small jitter.
            let base = 0.45 + 0.45 * (i as f64 + rng.gen::<f64>() * 0.5) / spec.n_blobs as f64;
            let shell = if base > 0.65 { base - 0.25 } else { base + 0.25 };
            Blob {
                center,
                semi_axes,
                intensity: base as f32,
                shell_intensity: shell as f32,
            }
        })
        .collect();

    let geometry = Volume3::from_fn([s; 3], [1.0; 3], |z, y, x| {
        let p = [z as f64, y as f64, x as f64];
        let mut v = BACKGROUND;
        // Later blobs paint over earlier ones.
        for blob in &blobs {
            if blob.contains(p, 0.55) {
                v = blob.shell_intensity;
            } else if blob.contains(p, 1.0) {
                v = blob.intensity;
            }
        }
        v
    });

    let mask = match &spec.lesion {
        None => Volume3::constant([s; 3], [1.0; 3], 0.0),
        Some(l) => Volume3::from_fn([s; 3], [1.0; 3], |z, y, x| {
            let d = ((z as f64 - l.center[0] as f64).powi(2)
                + (y as f64 - l.center[1] as f64).powi(2)
                + (x as f64 - l.center[2] as f64).powi(2))
            .sqrt();
            if d <= l.radius {
                1.0
            } else {
                0.0
            }
        }),
    };

    if spec.lesion.is_some() {
        let mut voxels = geometry.voxels().to_vec();
        for (v, &m) in voxels.iter_mut().zip(mask.voxels()) {
            if m >= 0.5 {
                *v = LESION_INTENSITY;
            }
        }
        return Ok((
            Volume3::from_voxels([s; 3], [1.0; 3], voxels)?,
            mask,
        ));
    }
    Ok((geometry, mask))
}

/// Deterministic phantom in the requested appearance domain, with its lesion
/// mask.
pub fn gen_phantom(spec: &PhantomSpec) -> Result<(Volume3, Volume3)> {
    let (geometry, mask) = gen_geometry(spec)?;
    // The appearance stream is derived from the seed but separate from the
    // geometry stream, so both domains see identical geometry.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let volume = match spec.domain {
        Domain::Smooth => gaussian_blur3(&geometry, 1.0),
        Domain::Noisy => {
            let blurred = gaussian_blur3(&geometry, 1.0);
            let noise = Normal::new(0.0, SPECKLE_STD).unwrap();
            let voxels: Vec<f32> = geometry
                .voxels()
                .iter()
                .zip(blurred.voxels())
                .map(|(&v, &b)| {
                    // Unsharp mask then multiplicative speckle.
                    let sharp = v as f64 + 1.2 * (v as f64 - b as f64);
                    let n = noise.sample(&mut rng);
                    (sharp * (1.0 + n)).clamp(0.0, 1.0) as f32
                })
                .collect();
            Volume3::from_voxels([spec.side; 3], [1.0; 3], voxels)?
        }
    };
    Ok((volume, mask))
}
