//! Forward and backward implementations of the op set.
//!
//! Parallel sections only ever write disjoint output chunks in a fixed inner
//! order, so results are bit-identical regardless of worker count.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};

/// Border handling for convolution inputs. Generators use replication to
/// soften border artifacts; discriminators use zeros.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    Zero,
    Replicate,
}

const PAR_THRESHOLD: usize = 1 << 15;

fn par_map<T: Scalar>(src: &[T], f: impl Fn(T) -> T + Sync) -> Vec<T> {
    if src.len() >= PAR_THRESHOLD {
        src.par_iter().map(|&v| f(v)).collect()
    } else {
        src.iter().map(|&v| f(v)).collect()
    }
}

fn dims5<T: Scalar>(t: &Tensor<T>, what: &str) -> [usize; 5] {
    let s = t.shape();
    assert!(s.len() == 5, "{what} must be 5D (b, c, z, y, x), got {s:?}");
    [s[0], s[1], s[2], s[3], s[4]]
}

/// Copies `[b, c, z, y, x]` into a `[b, c, z+2p, y+2p, x+2p]` buffer.
fn pad_input<T: Scalar>(
    data: &[T],
    dims: [usize; 5],
    p: usize,
    mode: PadMode,
) -> (Vec<T>, [usize; 3]) {
    let [b, c, z, y, x] = dims;
    let (pz, py, px) = (z + 2 * p, y + 2 * p, x + 2 * p);
    if p == 0 {
        return (data.to_vec(), [pz, py, px]);
    }
    let mut out = vec![T::zero(); b * c * pz * py * px];
    out.par_chunks_mut(pz * py * px)
        .enumerate()
        .for_each(|(bc, slab)| {
            let src = &data[bc * z * y * x..][..z * y * x];
            match mode {
                PadMode::Zero => {
                    for iz in 0..z {
                        for iy in 0..y {
                            let dst = ((iz + p) * py + iy + p) * px + p;
                            let s = (iz * y + iy) * x;
                            slab[dst..dst + x].copy_from_slice(&src[s..s + x]);
                        }
                    }
                }
                PadMode::Replicate => {
                    for qz in 0..pz {
                        let sz = (qz as i64 - p as i64).clamp(0, z as i64 - 1) as usize;
                        for qy in 0..py {
                            let sy = (qy as i64 - p as i64).clamp(0, y as i64 - 1) as usize;
                            let row = &src[(sz * y + sy) * x..][..x];
                            let dst = (qz * py + qy) * px;
                            for qx in 0..px {
                                let sx =
                                    (qx as i64 - p as i64).clamp(0, x as i64 - 1) as usize;
                                slab[dst + qx] = row[sx];
                            }
                        }
                    }
                }
            }
        });
    (out, [pz, py, px])
}

/// Folds a padded-gradient buffer back onto the input grid: each padded cell
/// contributes to the voxel it was read from.
fn unpad_grad<T: Scalar>(
    dpad: &[T],
    dims: [usize; 5],
    pdims: [usize; 3],
    p: usize,
    mode: PadMode,
    dinput: &mut [T],
) {
    let [_, _, z, y, x] = dims;
    let [pz, py, px] = pdims;
    dinput
        .par_chunks_mut(z * y * x)
        .enumerate()
        .for_each(|(bc, dst)| {
            let src = &dpad[bc * pz * py * px..][..pz * py * px];
            match mode {
                PadMode::Zero => {
                    for iz in 0..z {
                        for iy in 0..y {
                            let s = ((iz + p) * py + iy + p) * px + p;
                            let d = (iz * y + iy) * x;
                            for ix in 0..x {
                                dst[d + ix] += src[s + ix];
                            }
                        }
                    }
                }
                PadMode::Replicate => {
                    for qz in 0..pz {
                        let tz = (qz as i64 - p as i64).clamp(0, z as i64 - 1) as usize;
                        for qy in 0..py {
                            let ty = (qy as i64 - p as i64).clamp(0, y as i64 - 1) as usize;
                            let s = (qz * py + qy) * px;
                            let d = (tz * y + ty) * x;
                            for qx in 0..px {
                                let tx =
                                    (qx as i64 - p as i64).clamp(0, x as i64 - 1) as usize;
                                dst[d + tx] += src[s + qx];
                            }
                        }
                    }
                }
            }
        });
}

/// One output row: `out[x] += sum_kx w[kx] * in[x*stride + kx]`. The const
/// kernel width unrolls the tap loop so the row vectorizes; `in_row` must be
/// pre-sliced to exactly `(out.len()-1)*stride + K` so bounds checks vanish.
#[inline]
fn conv_row<T: Scalar, const K: usize>(out_row: &mut [T], in_row: &[T], w: &[T; K], stride: usize) {
    let n = out_row.len();
    debug_assert_eq!(in_row.len(), (n - 1) * stride + K);
    if stride == 1 {
        for x in 0..n {
            let window = &in_row[x..x + K];
            let mut acc = out_row[x];
            for kx in 0..K {
                acc = acc + w[kx] * window[kx];
            }
            out_row[x] = acc;
        }
    } else {
        for x in 0..n {
            let window = &in_row[x * stride..x * stride + K];
            let mut acc = out_row[x];
            for kx in 0..K {
                acc = acc + w[kx] * window[kx];
            }
            out_row[x] = acc;
        }
    }
}

/// Per-tap partial sums of `sum_x g[x] * in[x*stride + kx]`. Eight explicit
/// lanes per tap turn the reduction into vectorizable independent chains;
/// the summation order is fixed, so results stay bit-reproducible.
#[inline]
fn dot_row<T: Scalar, const K: usize>(g_row: &[T], in_row: &[T], stride: usize, acc: &mut [T; K]) {
    debug_assert_eq!(in_row.len(), (g_row.len() - 1) * stride + K);
    if stride == 1 {
        const L: usize = 8;
        let n = g_row.len();
        let chunks = n / L;
        let mut lanes = [[T::zero(); L]; K];
        for c in 0..chunks {
            let gs = &g_row[c * L..c * L + L];
            for kx in 0..K {
                let ins = &in_row[c * L + kx..c * L + kx + L];
                let lane = &mut lanes[kx];
                for l in 0..L {
                    lane[l] += gs[l] * ins[l];
                }
            }
        }
        for kx in 0..K {
            let mut tap = T::zero();
            for l in 0..L {
                tap += lanes[kx][l];
            }
            for x in chunks * L..n {
                tap += g_row[x] * in_row[x + kx];
            }
            acc[kx] += tap;
        }
    } else {
        for (x, &gv) in g_row.iter().enumerate() {
            let window = &in_row[x * stride..x * stride + K];
            for kx in 0..K {
                acc[kx] += gv * window[kx];
            }
        }
    }
}

struct ConvGeom {
    cin: usize,
    k: usize,
    stride: usize,
    oz: usize,
    oy: usize,
    ox: usize,
    py: usize,
    px: usize,
    slab_len: usize,
}

fn conv_fwd_slab<T: Scalar, const K: usize>(
    slab: &mut [T],
    bi: usize,
    co: usize,
    padded: &[T],
    w_data: &[T],
    g: &ConvGeom,
) {
    for ci in 0..g.cin {
        let in_slab = &padded[(bi * g.cin + ci) * g.slab_len..][..g.slab_len];
        let w_base = (co * g.cin + ci) * g.k * g.k * g.k;
        for kz in 0..g.k {
            for ky in 0..g.k {
                let mut w = [T::zero(); K];
                w.copy_from_slice(&w_data[w_base + (kz * g.k + ky) * g.k..][..K]);
                let row_len = (g.ox - 1) * g.stride + K;
                for ozi in 0..g.oz {
                    let iz = ozi * g.stride + kz;
                    for oyi in 0..g.oy {
                        let iy = oyi * g.stride + ky;
                        let in_row = &in_slab[(iz * g.py + iy) * g.px..][..row_len];
                        let out_row = &mut slab[(ozi * g.oy + oyi) * g.ox..][..g.ox];
                        conv_row::<T, K>(out_row, in_row, &w, g.stride);
                    }
                }
            }
        }
    }
}

fn conv_dw_slab<T: Scalar, const K: usize>(
    dwc: &mut [T],
    b: usize,
    cout: usize,
    co: usize,
    gr: &[T],
    padded: &[T],
    g: &ConvGeom,
) {
    for bi in 0..b {
        let gs = &gr[(bi * cout + co) * g.oz * g.oy * g.ox..][..g.oz * g.oy * g.ox];
        for ci in 0..g.cin {
            let in_slab = &padded[(bi * g.cin + ci) * g.slab_len..][..g.slab_len];
            for kz in 0..g.k {
                for ky in 0..g.k {
                    let mut acc = [T::zero(); K];
                    let row_len = (g.ox - 1) * g.stride + K;
                    for ozi in 0..g.oz {
                        let iz = ozi * g.stride + kz;
                        for oyi in 0..g.oy {
                            let iy = oyi * g.stride + ky;
                            let in_row = &in_slab[(iz * g.py + iy) * g.px..][..row_len];
                            let g_row = &gs[(ozi * g.oy + oyi) * g.ox..][..g.ox];
                            dot_row::<T, K>(g_row, in_row, g.stride, &mut acc);
                        }
                    }
                    let dst = &mut dwc[(ci * g.k + kz) * g.k * g.k + ky * g.k..][..K];
                    for (d, a) in dst.iter_mut().zip(&acc) {
                        *d += *a;
                    }
                }
            }
        }
    }
}

macro_rules! dispatch_k {
    ($k:expr, $fn:ident, ($($arg:expr),*)) => {
        match $k {
            1 => $fn::<T, 1>($($arg),*),
            2 => $fn::<T, 2>($($arg),*),
            3 => $fn::<T, 3>($($arg),*),
            4 => $fn::<T, 4>($($arg),*),
            5 => $fn::<T, 5>($($arg),*),
            7 => $fn::<T, 7>($($arg),*),
            other => panic!("unsupported conv kernel size {other}"),
        }
    };
}

/// 3D cross-correlation. `input` is `[b, cin, z, y, x]`, `weight` is
/// `[cout, cin, k, k, k]`, `bias` is `[cout]`.
pub fn conv3d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    pad_mode: PadMode,
) -> Tensor<T> {
    let idims = dims5(input, "conv3d input");
    let [b, cin, z, y, x] = idims;
    let ws = weight.shape().to_vec();
    assert!(
        ws.len() == 5 && ws[1] == cin && ws[2] == ws[3] && ws[3] == ws[4],
        "conv3d weight must be [cout, cin={cin}, k, k, k], got {ws:?}"
    );
    let (cout, k) = (ws[0], ws[2]);
    if let Some(bt) = bias {
        assert_eq!(bt.shape(), [cout], "conv3d bias must be [cout]");
    }
    assert!(stride >= 1, "stride must be >= 1");
    for (name, d) in [("z", z), ("y", y), ("x", x)] {
        assert!(
            d + 2 * padding >= k,
            "conv3d {name} dim {d} + 2*padding {padding} smaller than kernel {k}"
        );
    }
    let od = |d: usize| (d + 2 * padding - k) / stride + 1;
    let (oz, oy, ox) = (od(z), od(y), od(x));

    let in_data = input.to_vec();
    let (padded, pdims) = pad_input(&in_data, idims, padding, pad_mode);
    let [pz, py, px] = pdims;
    let w_data = weight.to_vec();
    let b_data = bias.map(|t| t.to_vec());

    let geom = ConvGeom {
        cin,
        k,
        stride,
        oz,
        oy,
        ox,
        py,
        px,
        slab_len: pz * py * px,
    };
    let mut out = vec![T::zero(); b * cout * oz * oy * ox];
    out.par_chunks_mut(oz * oy * ox)
        .enumerate()
        .for_each(|(bc, slab)| {
            let (bi, co) = (bc / cout, bc % cout);
            if let Some(bd) = &b_data {
                slab.fill(bd[co]);
            }
            dispatch_k!(k, conv_fwd_slab, (slab, bi, co, &padded, &w_data, &geom));
        });

    let inp = input.clone();
    let wt = weight.clone();
    let bt = bias.cloned();
    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(ref t) = bt {
        parents.push(t.clone());
    }
    Tensor::from_op(
        vec![b, cout, oz, oy, ox],
        out,
        parents,
        Box::new(move |node| {
            let g = node.grad.borrow();
            let g = g.as_ref().unwrap();
            let in_data = inp.to_vec();
            let w_data = wt.to_vec();
            let (padded, pdims) = pad_input(&in_data, idims, padding, pad_mode);
            let [pz, py, px] = pdims;

            if let Some(ref bias_t) = bt {
                if bias_t.tracked() {
                    bias_t.0.accum_grad(|dbias| {
                        for bi in 0..b {
                            for co in 0..cout {
                                let gs = &g[(bi * cout + co) * oz * oy * ox..][..oz * oy * ox];
                                dbias[co] += gs.iter().copied().sum();
                            }
                        }
                    });
                }
            }

            if wt.tracked() {
                let geom = ConvGeom {
                    cin,
                    k,
                    stride,
                    oz,
                    oy,
                    ox,
                    py,
                    px,
                    slab_len: pz * py * px,
                };
                let mut dw = vec![T::zero(); cout * cin * k * k * k];
                dw.par_chunks_mut(cin * k * k * k)
                    .enumerate()
                    .for_each(|(co, dwc)| {
                        dispatch_k!(k, conv_dw_slab, (dwc, b, cout, co, g, &padded, &geom));
                    });
                wt.0.accum_grad(|gw| {
                    for (o, d) in gw.iter_mut().zip(&dw) {
                        *o += *d;
                    }
                });
            }

            if inp.tracked() {
                let mut dpad = vec![T::zero(); b * cin * pz * py * px];
                dpad.par_chunks_mut(pz * py * px)
                    .enumerate()
                    .for_each(|(bc, dslab)| {
                        let (bi, ci) = (bc / cin, bc % cin);
                        for co in 0..cout {
                            let gs = &g[(bi * cout + co) * oz * oy * ox..][..oz * oy * ox];
                            let w_base = (co * cin + ci) * k * k * k;
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let w = w_data[w_base + (kz * k + ky) * k + kx];
                                        for ozi in 0..oz {
                                            let iz = ozi * stride + kz;
                                            for oyi in 0..oy {
                                                let iy = oyi * stride + ky;
                                                let d_row = &mut dslab
                                                    [(iz * py + iy) * px + kx..];
                                                let g_row =
                                                    &gs[(ozi * oy + oyi) * ox..][..ox];
                                                if stride == 1 {
                                                    for (d, &gv) in d_row
                                                        .iter_mut()
                                                        .zip(g_row)
                                                        .take(ox)
                                                    {
                                                        *d += w * gv;
                                                    }
                                                } else {
                                                    for (xi, &gv) in g_row.iter().enumerate()
                                                    {
                                                        d_row[xi * stride] += w * gv;
                                                    }
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                inp.0.accum_grad(|dinput| {
                    unpad_grad(&dpad, idims, pdims, padding, pad_mode, dinput);
                });
            }
        }),
    )
}

/// Transposed 3D convolution (the adjoint scatter of [`conv3d`]). `input` is
/// `[b, cin, z, y, x]`, `weight` is `[cin, cout, k, k, k]`; output spatial
/// dims are `(d - 1) * stride + k - 2 * padding`.
pub fn conv3d_transpose<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Tensor<T> {
    let [b, cin, z, y, x] = dims5(input, "conv3d_transpose input");
    let ws = weight.shape().to_vec();
    assert!(
        ws.len() == 5 && ws[0] == cin && ws[2] == ws[3] && ws[3] == ws[4],
        "conv3d_transpose weight must be [cin={cin}, cout, k, k, k], got {ws:?}"
    );
    let (cout, k) = (ws[1], ws[2]);
    if let Some(bt) = bias {
        assert_eq!(bt.shape(), [cout], "conv3d_transpose bias must be [cout]");
    }
    let od = |d: usize| (d - 1) * stride + k - 2 * padding;
    let (oz, oy, ox) = (od(z), od(y), od(x));

    let in_data = input.to_vec();
    let w_data = weight.to_vec();
    let b_data = bias.map(|t| t.to_vec());
    let p = padding as i64;

    // Valid input range so that `i*stride + k_off - padding` lands in bounds.
    let in_range = move |kof: usize, n: usize, on: usize| -> (usize, usize) {
        let kof = kof as i64;
        let lo = (p - kof).max(0);
        let lo = ((lo + stride as i64 - 1) / stride as i64).max(0);
        let hi = ((on as i64 - 1 - kof + p) / stride as i64).min(n as i64 - 1);
        if hi < lo {
            (1, 0)
        } else {
            (lo as usize, hi as usize)
        }
    };

    let mut out = vec![T::zero(); b * cout * oz * oy * ox];
    out.par_chunks_mut(oz * oy * ox)
        .enumerate()
        .for_each(|(bc, slab)| {
            let (bi, co) = (bc / cout, bc % cout);
            if let Some(bd) = &b_data {
                slab.fill(bd[co]);
            }
            for ci in 0..cin {
                let in_slab = &in_data[(bi * cin + ci) * z * y * x..][..z * y * x];
                for kz in 0..k {
                    let (z0, z1) = in_range(kz, z, oz);
                    for ky in 0..k {
                        let (y0, y1) = in_range(ky, y, oy);
                        for kx in 0..k {
                            let (x0, x1) = in_range(kx, x, ox);
                            let w = w_data[((ci * cout + co) * k + kz) * k * k + ky * k + kx];
                            for iz in z0..=z1 {
                                let tz = (iz * stride + kz) as i64 - p;
                                for iy in y0..=y1 {
                                    let ty = (iy * stride + ky) as i64 - p;
                                    let in_row = &in_slab[(iz * y + iy) * x..][..x];
                                    let o_base = ((tz as usize) * oy + ty as usize) * ox;
                                    for ix in x0..=x1 {
                                        let tx = (ix * stride + kx) as i64 - p;
                                        slab[o_base + tx as usize] += w * in_row[ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });

    let inp = input.clone();
    let wt = weight.clone();
    let bt = bias.cloned();
    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(ref t) = bt {
        parents.push(t.clone());
    }
    Tensor::from_op(
        vec![b, cout, oz, oy, ox],
        out,
        parents,
        Box::new(move |node| {
            let g = node.grad.borrow();
            let g = g.as_ref().unwrap();
            let in_data = inp.to_vec();
            let w_data = wt.to_vec();

            if let Some(ref bias_t) = bt {
                if bias_t.tracked() {
                    bias_t.0.accum_grad(|dbias| {
                        for bi in 0..b {
                            for co in 0..cout {
                                let gs = &g[(bi * cout + co) * oz * oy * ox..][..oz * oy * ox];
                                dbias[co] += gs.iter().copied().sum();
                            }
                        }
                    });
                }
            }

            if wt.tracked() {
                let mut dw = vec![T::zero(); cin * cout * k * k * k];
                dw.par_chunks_mut(cout * k * k * k)
                    .enumerate()
                    .for_each(|(ci, dwc)| {
                        for bi in 0..b {
                            let in_slab =
                                &in_data[(bi * cin + ci) * z * y * x..][..z * y * x];
                            for co in 0..cout {
                                let gs =
                                    &g[(bi * cout + co) * oz * oy * ox..][..oz * oy * ox];
                                for kz in 0..k {
                                    let (z0, z1) = in_range(kz, z, oz);
                                    for ky in 0..k {
                                        let (y0, y1) = in_range(ky, y, oy);
                                        for kx in 0..k {
                                            let (x0, x1) = in_range(kx, x, ox);
                                            let mut acc = T::zero();
                                            for iz in z0..=z1 {
                                                let tz =
                                                    (iz * stride + kz) as i64 - p;
                                                for iy in y0..=y1 {
                                                    let ty =
                                                        (iy * stride + ky) as i64 - p;
                                                    let in_row =
                                                        &in_slab[(iz * y + iy) * x..][..x];
                                                    let g_base = ((tz as usize) * oy
                                                        + ty as usize)
                                                        * ox;
                                                    for ix in x0..=x1 {
                                                        let tx = (ix * stride + kx) as i64
                                                            - p;
                                                        acc += in_row[ix]
                                                            * gs[g_base + tx as usize];
                                                    }
                                                }
                                            }
                                            dwc[(co * k + kz) * k * k + ky * k + kx] += acc;
                                        }
                                    }
                                }
                            }
                        }
                    });
                wt.0.accum_grad(|gw| {
                    for (o, d) in gw.iter_mut().zip(&dw) {
                        *o += *d;
                    }
                });
            }

            if inp.tracked() {
                let mut din = vec![T::zero(); b * cin * z * y * x];
                din.par_chunks_mut(z * y * x)
                    .enumerate()
                    .for_each(|(bc, dslab)| {
                        let (bi, ci) = (bc / cin, bc % cin);
                        for co in 0..cout {
                            let gs = &g[(bi * cout + co) * oz * oy * ox..][..oz * oy * ox];
                            for kz in 0..k {
                                let (z0, z1) = in_range(kz, z, oz);
                                for ky in 0..k {
                                    let (y0, y1) = in_range(ky, y, oy);
                                    for kx in 0..k {
                                        let (x0, x1) = in_range(kx, x, ox);
                                        let w = w_data
                                            [((ci * cout + co) * k + kz) * k * k + ky * k + kx];
                                        for iz in z0..=z1 {
                                            let tz = (iz * stride + kz) as i64 - p;
                                            for iy in y0..=y1 {
                                                let ty = (iy * stride + ky) as i64 - p;
                                                let d_row =
                                                    &mut dslab[(iz * y + iy) * x..][..x];
                                                let g_base = ((tz as usize) * oy
                                                    + ty as usize)
                                                    * ox;
                                                for ix in x0..=x1 {
                                                    let tx =
                                                        (ix * stride + kx) as i64 - p;
                                                    d_row[ix] +=
                                                        w * gs[g_base + tx as usize];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                inp.0.accum_grad(|dinput| {
                    for (o, d) in dinput.iter_mut().zip(&din) {
                        *o += *d;
                    }
                });
            }
        }),
    )
}

/// Instance normalization over the spatial axes of `[b, c, ...]` with
/// learnable per-channel affine parameters.
pub fn instance_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Tensor<T> {
    let s = x.shape().to_vec();
    assert!(s.len() >= 3, "instance_norm input must be [b, c, ...], got {s:?}");
    let (b, c) = (s[0], s[1]);
    let n: usize = s[2..].iter().product();
    assert_eq!(gamma.shape(), [c], "gamma must be [c]");
    assert_eq!(beta.shape(), [c], "beta must be [c]");

    let data = x.to_vec();
    let g_data = gamma.to_vec();
    let b_data = beta.to_vec();
    let eps_t = T::from_f64(eps);
    let inv_n = T::from_f64(1.0 / n as f64);

    let mut out = vec![T::zero(); data.len()];
    let mut stats = vec![(T::zero(), T::zero()); b * c];
    out.par_chunks_mut(n)
        .zip(stats.par_iter_mut())
        .enumerate()
        .for_each(|(bc, (slab, stat))| {
            let ci = bc % c;
            let src = &data[bc * n..][..n];
            let mean = src.iter().copied().sum::<T>() * inv_n;
            let var = src
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<T>()
                * inv_n;
            let ivar = T::one() / (var + eps_t).sqrt();
            *stat = (mean, ivar);
            let (ga, be) = (g_data[ci], b_data[ci]);
            for (o, &v) in slab.iter_mut().zip(src) {
                *o = ga * (v - mean) * ivar + be;
            }
        });

    let xt = x.clone();
    let gt = gamma.clone();
    let bt = beta.clone();
    Tensor::from_op(
        s.clone(),
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |node| {
            let g = node.grad.borrow();
            let g = g.as_ref().unwrap();
            let data = xt.to_vec();
            let g_data = gt.to_vec();

            // Per-(b, c) reductions, folded in channel order for determinism.
            let partials: Vec<(T, T)> = (0..b * c)
                .into_par_iter()
                .map(|bc| {
                    let (mean, ivar) = stats[bc];
                    let src = &data[bc * n..][..n];
                    let gs = &g[bc * n..][..n];
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for (&gv, &v) in gs.iter().zip(src) {
                        sum_g += gv;
                        sum_gx += gv * (v - mean) * ivar;
                    }
                    (sum_g, sum_gx)
                })
                .collect();

            if bt.tracked() {
                bt.0.accum_grad(|db| {
                    for bc in 0..b * c {
                        db[bc % c] += partials[bc].0;
                    }
                });
            }
            if gt.tracked() {
                gt.0.accum_grad(|dg| {
                    for bc in 0..b * c {
                        dg[bc % c] += partials[bc].1;
                    }
                });
            }
            if xt.tracked() {
                let mut dx = vec![T::zero(); data.len()];
                dx.par_chunks_mut(n).enumerate().for_each(|(bc, dst)| {
                    let (mean, ivar) = stats[bc];
                    let ga = g_data[bc % c];
                    let (sum_g, sum_gx) = partials[bc];
                    let src = &data[bc * n..][..n];
                    let gs = &g[bc * n..][..n];
                    for ((d, &gv), &v) in dst.iter_mut().zip(gs).zip(src) {
                        let xhat = (v - mean) * ivar;
                        *d = ga * ivar * (gv - (sum_g + xhat * sum_gx) * inv_n);
                    }
                });
                xt.0.accum_grad(|dinput| {
                    for (o, d) in dinput.iter_mut().zip(&dx) {
                        *o += *d;
                    }
                });
            }
        }),
    )
}

fn pointwise<T: Scalar>(
    x: &Tensor<T>,
    fwd: impl Fn(T) -> T + Sync,
    // backward receives (input value, output value, upstream grad)
    bwd: impl Fn(T, T, T) -> T + Sync + 'static,
) -> Tensor<T> {
    let data = x.to_vec();
    let out = par_map(&data, fwd);
    let xt = x.clone();
    Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |node| {
            if !xt.tracked() {
                return;
            }
            let g = node.grad.borrow();
            let g = g.as_ref().unwrap();
            let y = node.data.borrow();
            let xd = xt.0.data.borrow();
            xt.0.accum_grad(|dx| {
                for i in 0..dx.len() {
                    dx[i] += bwd(xd[i], y[i], g[i]);
                }
            });
        }),
    )
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, alpha: f64) -> Tensor<T> {
    let a = T::from_f64(alpha);
    pointwise(
        x,
        move |v| if v > T::zero() { v } else { a * v },
        move |v, _, g| if v > T::zero() { g } else { a * g },
    )
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    leaky_relu(x, 0.0)
}

pub fn tanh<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    pointwise(x, |v| v.tanh(), |_, y, g| g * (T::one() - y * y))
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    pointwise(
        x,
        |v| T::one() / (T::one() + (-v).exp()),
        |_, y, g| g * y * (T::one() - y),
    )
}

/// Inverted dropout: active only in training mode, mask drawn sequentially
/// from the caller's seeded stream so runs are bit-reproducible.
pub fn dropout<T: Scalar>(x: &Tensor<T>, p: f64, train: bool, rng: &mut ChaCha8Rng) -> Tensor<T> {
    assert!((0.0..1.0).contains(&p), "dropout p must be in [0, 1)");
    if !train || p == 0.0 {
        return x.clone();
    }
    let keep = T::from_f64(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..x.len())
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
        .collect();
    let data = x.to_vec();
    let out: Vec<T> = data.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    let xt = x.clone();
    Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |node| {
            if !xt.tracked() {
                return;
            }
            let g = node.grad.borrow();
            let g = g.as_ref().unwrap();
            xt.0.accum_grad(|dx| {
                for i in 0..dx.len() {
                    dx[i] += g[i] * mask[i];
                }
            });
        }),
    )
}

/// Nearest-neighbor 2x spatial upsampling of `[b, c, z, y, x]`.
pub fn nearest_upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [b, c, z, y, xx] = dims5(x, "nearest_upsample2 input");
    let (oz, oy, ox) = (2 * z, 2 * y, 2 * xx);
    let data = x.to_vec();
    let mut out = vec![T::zero(); b * c * oz * oy * ox];
    out.par_chunks_mut(oz * oy * ox)
        .enumerate()
        .for_each(|(bc, slab)| {
            let src = &data[bc * z * y * xx..][..z * y * xx];
            for tz in 0..oz {
                for ty in 0..oy {
                    let row = &src[((tz / 2) * y + ty / 2) * xx..][..xx];
                    let dst = (tz * oy + ty) * ox;
                    for tx in 0..ox {
                        slab[dst + tx] = row[tx / 2];
                    }
                }
            }
        });
    let xt = x.clone();
    Tensor::from_op(
        vec![b, c, oz, oy, ox],
        out,
        vec![x.clone()],
        Box::new(move |node| {
            if !xt.tracked() {
                return;
            }
            let g = node.grad.borrow();
            let g = g.as_ref().unwrap();
            let mut dx = vec![T::zero(); b * c * z * y * xx];
            dx.par_chunks_mut(z * y * xx).enumerate().for_each(|(bc, dst)| {
                let gs = &g[bc * oz * oy * ox..][..oz * oy * ox];
                for tz in 0..oz {
                    for ty in 0..oy {
                        let gr = &gs[(tz * oy + ty) * ox..][..ox];
                        let d = ((tz / 2) * y + ty / 2) * xx;
                        for tx in 0..ox {
                            dst[d + tx / 2] += gr[tx];
                        }
                    }
                }
            });
            xt.0.accum_grad(|dinput| {
                for (o, d) in dinput.iter_mut().zip(&dx) {
                    *o += *d;
                }
            });
        }),
    )
}

/// 2x average pooling of `[b, c, z, y, x]`; spatial dims must be even.
pub fn avg_downsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [b, c, z, y, xx] = dims5(x, "avg_downsample2 input");
    assert!(
        z % 2 == 0 && y % 2 == 0 && xx % 2 == 0,
        "avg_downsample2 needs even spatial dims, got {:?}",
        x.shape()
    );
    let (oz, oy, ox) = (z / 2, y / 2, xx / 2);
    let eighth = T::from_f64(0.125);
    let data = x.to_vec();
    let mut out = vec![T::zero(); b * c * oz * oy * ox];
    out.par_chunks_mut(oz * oy * ox)
        .enumerate()
        .for_each(|(bc, slab)| {
            let src = &data[bc * z * y * xx..][..z * y * xx];
            for tz in 0..oz {
                for ty in 0..oy {
                    let dst = (tz * oy + ty) * ox;
                    for tx in 0..ox {
                        let mut acc = T::zero();
                        for dz in 0..2 {
                            for dy in 0..2 {
                                let r = ((2 * tz + dz) * y + 2 * ty + dy) * xx + 2 * tx;
                                acc += src[r] + src[r + 1];
                            }
                        }
                        slab[dst + tx] = acc * eighth;
                    }
                }
            }
        });
    let xt = x.clone();
    Tensor::from_op(
        vec![b, c, oz, oy, ox],
        out,
        vec![x.clone()],
        Box::new(move |node| {
            if !xt.tracked() {
                return;
            }
            let g = node.grad.borrow();
            let g = g.as_ref().unwrap();
            let mut dx = vec![T::zero(); b * c * z * y * xx];
            dx.par_chunks_mut(z * y * xx).enumerate().for_each(|(bc, dst)| {
                let gs = &g[bc * oz * oy * ox..][..oz * oy * ox];
                for tz in 0..oz {
                    for ty in 0..oy {
                        for tx in 0..ox {
                            let gv = gs[(tz * oy + ty) * ox + tx] * eighth;
                            for dz in 0..2 {
                                for dy in 0..2 {
                                    let r = ((2 * tz + dz) * y + 2 * ty + dy) * xx + 2 * tx;
                                    dst[r] += gv;
                                    dst[r + 1] += gv;
                                }
                            }
                        }
                    }
                }
            });
            xt.0.accum_grad(|dinput| {
                for (o, d) in dinput.iter_mut().zip(&dx) {
                    *o += *d;
                }
            });
        }),
    )
}

/// Concatenates along the channel axis; batch and spatial dims must match.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Tensor<T> {
    assert!(!parts.is_empty(), "concat_channels needs at least one tensor");
    let first = dims5(parts[0], "concat input");
    let [b, _, z, y, x] = first;
    let mut channels = Vec::with_capacity(parts.len());
    for p in parts {
        let d = dims5(p, "concat input");
        assert!(
            d[0] == b && d[2] == z && d[3] == y && d[4] == x,
            "concat dims mismatch: {:?} vs {:?}",
            d,
            first
        );
        channels.push(d[1]);
    }
    let c_total: usize = channels.iter().sum();
    let n = z * y * x;
    let mut out = vec![T::zero(); b * c_total * n];
    for bi in 0..b {
        let mut c_off = 0;
        for (pi, p) in parts.iter().enumerate() {
            let cp = channels[pi];
            p.with_data(|src| {
                let s = &src[bi * cp * n..][..cp * n];
                out[(bi * c_total + c_off) * n..][..cp * n].copy_from_slice(s);
            });
            c_off += cp;
        }
    }
    let owned: Vec<Tensor<T>> = parts.iter().map(|&p| p.clone()).collect();
    let chans = channels.clone();
    Tensor::from_op(
        vec![b, c_total, z, y, x],
        out,
        owned.clone(),
        Box::new(move |node| {
            let g = node.grad.borrow();
            let g = g.as_ref().unwrap();
            let mut c_off = 0;
            for (pi, p) in owned.iter().enumerate() {
                let cp = chans[pi];
                if p.tracked() {
                    p.0.accum_grad(|dp| {
                        for bi in 0..b {
                            let src = &g[(bi * c_total + c_off) * n..][..cp * n];
                            let dst = &mut dp[bi * cp * n..][..cp * n];
                            for (o, &v) in dst.iter_mut().zip(src) {
                                *o += v;
                            }
                        }
                    });
                }
                c_off += cp;
            }
        }),
    )
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.shape(), b.shape(), "add shape mismatch");
    let out: Vec<T> = a
        .to_vec()
        .iter()
        .zip(&b.to_vec())
        .map(|(&x, &y)| x + y)
        .collect();
    let at = a.clone();
    let bt = b.clone();
    Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |node| {
            let g = node.grad.borrow();
            let g = g.as_ref().unwrap();
            for t in [&at, &bt] {
                if t.tracked() {
                    t.0.accum_grad(|d| {
                        for (o, &v) in d.iter_mut().zip(g.iter()) {
                            *o += v;
                        }
                    });
                }
            }
        }),
    )
}

pub fn scale<T: Scalar>(x: &Tensor<T>, factor: f64) -> Tensor<T> {
    let f = T::from_f64(factor);
    pointwise(x, move |v| v * f, move |_, _, g| g * f)
}

/// Mean over all elements, as a scalar tensor.
pub fn mean_all<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.len();
    let inv = T::from_f64(1.0 / n as f64);
    let m = x.with_data(|d| d.iter().copied().sum::<T>()) * inv;
    let xt = x.clone();
    Tensor::from_op(
        vec![1],
        vec![m],
        vec![x.clone()],
        Box::new(move |node| {
            if !xt.tracked() {
                return;
            }
            let g = node.grad.borrow().as_ref().unwrap()[0];
            xt.0.accum_grad(|dx| {
                for o in dx.iter_mut() {
                    *o += g * inv;
                }
            });
        }),
    )
}

/// `mean |a - b|` as a scalar tensor.
pub fn l1_mean<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.shape(), b.shape(), "l1_mean shape mismatch");
    let n = a.len();
    let inv = T::from_f64(1.0 / n as f64);
    let m = a.with_data(|ad| {
        b.with_data(|bd| {
            ad.iter()
                .zip(bd)
                .map(|(&x, &y)| (x - y).abs())
                .sum::<T>()
        })
    }) * inv;
    let at = a.clone();
    let bt = b.clone();
    Tensor::from_op(
        vec![1],
        vec![m],
        vec![a.clone(), b.clone()],
        Box::new(move |node| {
            let g = node.grad.borrow().as_ref().unwrap()[0];
            let ad = at.0.data.borrow();
            let bd = bt.0.data.borrow();
            let signs: Vec<T> = ad
                .iter()
                .zip(bd.iter())
                .map(|(&x, &y)| {
                    if x > y {
                        T::one()
                    } else if x < y {
                        -T::one()
                    } else {
                        T::zero()
                    }
                })
                .collect();
            drop(ad);
            drop(bd);
            if at.tracked() {
                at.0.accum_grad(|da| {
                    for (o, &s) in da.iter_mut().zip(&signs) {
                        *o += g * inv * s;
                    }
                });
            }
            if bt.tracked() {
                bt.0.accum_grad(|db| {
                    for (o, &s) in db.iter_mut().zip(&signs) {
                        *o -= g * inv * s;
                    }
                });
            }
        }),
    )
}

const SCORE_CLAMP: f64 = 1e-7;

/// `-mean log s` over discriminator scores, clamped to `[1e-7, 1 - 1e-7]`
/// before the log. Gradients vanish on clamped scores.
pub fn adv_real_loss<T: Scalar>(scores: &Tensor<T>) -> Tensor<T> {
    neg_log_loss(scores, false)
}

/// `-mean log(1 - s)` with the same clamping.
pub fn adv_fake_loss<T: Scalar>(scores: &Tensor<T>) -> Tensor<T> {
    neg_log_loss(scores, true)
}

fn neg_log_loss<T: Scalar>(scores: &Tensor<T>, one_minus: bool) -> Tensor<T> {
    let lo = T::from_f64(SCORE_CLAMP);
    let hi = T::from_f64(1.0 - SCORE_CLAMP);
    let n = scores.len();
    let inv = T::from_f64(1.0 / n as f64);
    let m = scores.with_data(|d| {
        d.iter()
            .map(|&s| {
                let s = if one_minus { T::one() - s } else { s };
                -s.max(lo).min(hi).ln()
            })
            .sum::<T>()
    }) * inv;
    let st = scores.clone();
    Tensor::from_op(
        vec![1],
        vec![m],
        vec![scores.clone()],
        Box::new(move |node| {
            if !st.tracked() {
                return;
            }
            let g = node.grad.borrow().as_ref().unwrap()[0];
            let sd = st.0.data.borrow();
            let deltas: Vec<T> = sd
                .iter()
                .map(|&s_raw| {
                    let s = if one_minus { T::one() - s_raw } else { s_raw };
                    if s <= lo || s >= hi {
                        T::zero()
                    } else if one_minus {
                        g * inv / s
                    } else {
                        -g * inv / s
                    }
                })
                .collect();
            drop(sd);
            st.0.accum_grad(|ds| {
                for (o, &d) in ds.iter_mut().zip(&deltas) {
                    *o += d;
                }
            });
        }),
    )
}
