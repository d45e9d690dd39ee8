//! Volumetric image quality metrics and the paired two-sided t-test.
//!
//! All reductions run in f64 over the f32 voxel data. SSIM uses a uniform
//! cubic window averaged over fully interior positions, with dynamic range
//! L = 1 (intensities are normalized to [0, 1]).

use crate::error::{Error, Result};
use crate::volume::Volume3;

pub const SSIM_DEFAULT_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// 3D summed-area table; `table[z][y][x]` holds the sum over `[0,z) x [0,y)
/// x [0,x)`.
struct PrefixSum3 {
    data: Vec<f64>,
    ny: usize,
    nx: usize,
}

impl PrefixSum3 {
    fn build(values: impl Iterator<Item = f64>, shape: [usize; 3]) -> Self {
        let [nz, ny, nx] = shape;
        let (py, px) = (ny + 1, nx + 1);
        let mut data = vec![0.0f64; (nz + 1) * py * px];
        let mut src = values;
        for z in 1..=nz {
            for y in 1..=ny {
                let mut row_acc = 0.0;
                for x in 1..=nx {
                    row_acc += src.next().expect("value iterator too short");
                    let idx = (z * py + y) * px + x;
                    data[idx] = row_acc + data[idx - px] + data[((z - 1) * py + y) * px + x]
                        - data[((z - 1) * py + y - 1) * px + x];
                }
            }
        }
        PrefixSum3 { data, ny: py, nx: px }
    }

    /// Sum over the half-open box `[lo, lo+w)^3`.
    fn box_sum(&self, lo: [usize; 3], w: usize) -> f64 {
        let at = |z: usize, y: usize, x: usize| self.data[(z * self.ny + y) * self.nx + x];
        let (z0, y0, x0) = (lo[0], lo[1], lo[2]);
        let (z1, y1, x1) = (lo[0] + w, lo[1] + w, lo[2] + w);
        at(z1, y1, x1) - at(z0, y1, x1) - at(z1, y0, x1) - at(z1, y1, x0)
            + at(z0, y0, x1)
            + at(z0, y1, x0)
            + at(z1, y0, x0)
            - at(z0, y0, x0)
    }
}

/// Mean SSIM over all fully interior cubic windows.
pub fn ssim3d(a: &Volume3, b: &Volume3, window: usize, k1: f64, k2: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let shape = a.shape();
    if shape.iter().any(|&d| d < window) || window == 0 {
        return Err(Error::invalid(format!(
            "volume {shape:?} smaller than SSIM window {window}"
        )));
    }
    let c1 = (k1 * 1.0f64).powi(2);
    let c2 = (k2 * 1.0f64).powi(2);
    let av = a.voxels();
    let bv = b.voxels();
    let sa = PrefixSum3::build(av.iter().map(|&v| v as f64), shape);
    let sb = PrefixSum3::build(bv.iter().map(|&v| v as f64), shape);
    let saa = PrefixSum3::build(av.iter().map(|&v| (v as f64) * (v as f64)), shape);
    let sbb = PrefixSum3::build(bv.iter().map(|&v| (v as f64) * (v as f64)), shape);
    let sab = PrefixSum3::build(
        av.iter().zip(bv).map(|(&x, &y)| x as f64 * y as f64),
        shape,
    );
    let n = (window * window * window) as f64;
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for z in 0..=shape[0] - window {
        for y in 0..=shape[1] - window {
            for x in 0..=shape[2] - window {
                let lo = [z, y, x];
                let mu_a = sa.box_sum(lo, window) / n;
                let mu_b = sb.box_sum(lo, window) / n;
                let var_a = saa.box_sum(lo, window) / n - mu_a * mu_a;
                let var_b = sbb.box_sum(lo, window) / n - mu_b * mu_b;
                let cov = sab.box_sum(lo, window) / n - mu_a * mu_b;
                let s = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                    / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                acc += s;
                count += 1;
            }
        }
    }
    Ok(acc / count as f64)
}

pub fn ssim3d_default(a: &Volume3, b: &Volume3) -> Result<f64> {
    ssim3d(a, b, SSIM_DEFAULT_WINDOW, SSIM_K1, SSIM_K2)
}

pub fn mse(a: &Volume3, b: &Volume3) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::invalid("shape mismatch"));
    }
    let sum: f64 = a
        .voxels()
        .iter()
        .zip(b.voxels())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

pub fn mae(a: &Volume3, b: &Volume3) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::invalid("shape mismatch"));
    }
    let sum: f64 = a
        .voxels()
        .iter()
        .zip(b.voxels())
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum();
    Ok(sum / a.len() as f64)
}

/// `10 log10(1 / mse)` with L = 1; identical volumes report +infinity.
pub fn psnr(a: &Volume3, b: &Volume3) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (1.0 / m).log10())
    }
}

// ---------------------------------------------------------------------------
// Paired t-test
// ---------------------------------------------------------------------------

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7, n = 9.
    const COEFFS: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return pi.ln() - (pi * x).sin().ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEFFS[0];
    let t = x + 7.5;
    for (i, &c) in COEFFS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the regularized incomplete beta (modified Lentz).
fn betacf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 3e-16;
    const FPMIN: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function I_x(a, b).
fn betai(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let bt = (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        bt * betacf(a, b, x) / a
    } else {
        1.0 - bt * betacf(b, a, 1.0 - x) / b
    }
}

/// Paired two-sided t-test. Returns `(t, p)`; errors on fewer than two pairs
/// or zero-variance differences.
pub fn paired_ttest(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() {
        return Err(Error::invalid("paired t-test needs equal-length samples"));
    }
    let n = xs.len();
    if n < 2 {
        return Err(Error::invalid("paired t-test needs at least two pairs"));
    }
    let d: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    if var == 0.0 {
        return Err(Error::Degenerate(
            "all paired differences are identical (zero variance)".into(),
        ));
    }
    let t = mean / (var / n as f64).sqrt();
    let nu = (n - 1) as f64;
    // Two-sided p from the t CDF via the incomplete beta.
    let p = betai(0.5 * nu, 0.5, nu / (nu + t * t));
    Ok((t, p))
}
