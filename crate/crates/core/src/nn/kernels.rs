//! Forward/backward kernels for each layer kind.
//!
//! Activations are viewed as `[N, C, P]` where `P` is the product of any
//! trailing spatial axes (1 for `[N, C]` inputs).

use crate::tensor::Real;

pub(crate) fn ncp(shape: &[usize]) -> (usize, usize, usize) {
    let p = shape[2..].iter().product::<usize>();
    (shape[0], shape[1], p)
}

/// Indices `i < count` with `0 <= i*stride + offset < limit`.
fn span(count: usize, stride: usize, offset: isize, limit: usize) -> std::ops::Range<usize> {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let top = limit as isize - 1 - offset;
    if top < 0 {
        return 0..0;
    }
    let hi = (top / s + 1).min(count as isize);
    let lo = lo.min(hi).max(0);
    lo as usize..hi as usize
}

pub(crate) fn dense_forward<T: Real>(
    x: &[T],
    n: usize,
    p: usize,
    w: &[T],
    b: &[T],
    inputs: usize,
    outputs: usize,
) -> Vec<T> {
    let mut y = vec![T::zero(); n * outputs * p];
    for ni in 0..n {
        let xs = &x[ni * inputs * p..(ni + 1) * inputs * p];
        let ys = &mut y[ni * outputs * p..(ni + 1) * outputs * p];
        for o in 0..outputs {
            let yrow = &mut ys[o * p..(o + 1) * p];
            yrow.fill(b[o]);
            let wrow = &w[o * inputs..(o + 1) * inputs];
            for (i, &wv) in wrow.iter().enumerate() {
                for (yv, &xv) in yrow.iter_mut().zip(&xs[i * p..(i + 1) * p]) {
                    *yv += wv * xv;
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_backward<T: Real>(
    x: &[T],
    gy: &[T],
    n: usize,
    p: usize,
    w: &[T],
    gw: &mut [T],
    gb: &mut [T],
    inputs: usize,
    outputs: usize,
) -> Vec<T> {
    let mut gx = vec![T::zero(); x.len()];
    for ni in 0..n {
        let xs = &x[ni * inputs * p..(ni + 1) * inputs * p];
        let gys = &gy[ni * outputs * p..(ni + 1) * outputs * p];
        let gxs = &mut gx[ni * inputs * p..(ni + 1) * inputs * p];
        for o in 0..outputs {
            let grow = &gys[o * p..(o + 1) * p];
            gb[o] += grow.iter().copied().sum::<T>();
            for i in 0..inputs {
                let xrow = &xs[i * p..(i + 1) * p];
                let mut acc = T::zero();
                for (&g, &xv) in grow.iter().zip(xrow) {
                    acc += g * xv;
                }
                gw[o * inputs + i] += acc;
                let wv = w[o * inputs + i];
                for (gxv, &g) in gxs[i * p..(i + 1) * p].iter_mut().zip(grow) {
                    *gxv += wv * g;
                }
            }
        }
    }
    gx
}

/// Geometry shared by the convolution kernels.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

pub(crate) fn conv_forward<T: Real>(x: &[T], wt: &[T], b: &[T], g: ConvGeom) -> Vec<T> {
    let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
    let mut y = vec![T::zero(); g.n * g.cout * ohw];
    for ni in 0..g.n {
        for co in 0..g.cout {
            let yp = &mut y[(ni * g.cout + co) * ohw..(ni * g.cout + co + 1) * ohw];
            yp.fill(b[co]);
            for ci in 0..g.cin {
                let xp = &x[(ni * g.cin + ci) * hw..(ni * g.cin + ci + 1) * hw];
                for ky in 0..g.k {
                    let oy_range = span(g.oh, g.stride, ky as isize - g.pad as isize, g.h);
                    for kx in 0..g.k {
                        let wv = wt[((co * g.cin + ci) * g.k + ky) * g.k + kx];
                        let ox_range = span(g.ow, g.stride, kx as isize - g.pad as isize, g.w);
                        for oy in oy_range.clone() {
                            let iy = oy * g.stride + ky - g.pad;
                            let xrow = &xp[iy * g.w..(iy + 1) * g.w];
                            let yrow = &mut yp[oy * g.ow..(oy + 1) * g.ow];
                            for ox in ox_range.clone() {
                                yrow[ox] += wv * xrow[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

pub(crate) fn conv_backward<T: Real>(
    x: &[T],
    gy: &[T],
    wt: &[T],
    gw: &mut [T],
    gb: &mut [T],
    g: ConvGeom,
) -> Vec<T> {
    let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
    let mut gx = vec![T::zero(); x.len()];
    for ni in 0..g.n {
        for co in 0..g.cout {
            let gp = &gy[(ni * g.cout + co) * ohw..(ni * g.cout + co + 1) * ohw];
            gb[co] += gp.iter().copied().sum::<T>();
            for ci in 0..g.cin {
                let base = (ni * g.cin + ci) * hw;
                for ky in 0..g.k {
                    let oy_range = span(g.oh, g.stride, ky as isize - g.pad as isize, g.h);
                    for kx in 0..g.k {
                        let widx = ((co * g.cin + ci) * g.k + ky) * g.k + kx;
                        let wv = wt[widx];
                        let ox_range = span(g.ow, g.stride, kx as isize - g.pad as isize, g.w);
                        let mut acc = T::zero();
                        for oy in oy_range.clone() {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &gp[oy * g.ow..(oy + 1) * g.ow];
                            let row = base + iy * g.w;
                            for ox in ox_range.clone() {
                                let ix = ox * g.stride + kx - g.pad;
                                acc += grow[ox] * x[row + ix];
                                gx[row + ix] += wv * grow[ox];
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    gx
}

/// Transposed convolution; weights are laid out `[cin, cout, k, k]` and the
/// geometry's `h, w` are input sizes, `oh, ow` output sizes.
pub(crate) fn deconv_forward<T: Real>(x: &[T], wt: &[T], b: &[T], g: ConvGeom) -> Vec<T> {
    let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
    let mut y = vec![T::zero(); g.n * g.cout * ohw];
    for ni in 0..g.n {
        for co in 0..g.cout {
            y[(ni * g.cout + co) * ohw..(ni * g.cout + co + 1) * ohw].fill(b[co]);
        }
        for ci in 0..g.cin {
            let xp = &x[(ni * g.cin + ci) * hw..(ni * g.cin + ci + 1) * hw];
            for co in 0..g.cout {
                let yp = &mut y[(ni * g.cout + co) * ohw..(ni * g.cout + co + 1) * ohw];
                for ky in 0..g.k {
                    let iy_range = span(g.h, g.stride, ky as isize - g.pad as isize, g.oh);
                    for kx in 0..g.k {
                        let wv = wt[((ci * g.cout + co) * g.k + ky) * g.k + kx];
                        let ix_range = span(g.w, g.stride, kx as isize - g.pad as isize, g.ow);
                        for iy in iy_range.clone() {
                            let oy = iy * g.stride + ky - g.pad;
                            let xrow = &xp[iy * g.w..(iy + 1) * g.w];
                            let yrow = &mut yp[oy * g.ow..(oy + 1) * g.ow];
                            for ix in ix_range.clone() {
                                yrow[ix * g.stride + kx - g.pad] += wv * xrow[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

pub(crate) fn deconv_backward<T: Real>(
    x: &[T],
    gy: &[T],
    wt: &[T],
    gw: &mut [T],
    gb: &mut [T],
    g: ConvGeom,
) -> Vec<T> {
    let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
    let mut gx = vec![T::zero(); x.len()];
    for ni in 0..g.n {
        for co in 0..g.cout {
            let gp = &gy[(ni * g.cout + co) * ohw..(ni * g.cout + co + 1) * ohw];
            gb[co] += gp.iter().copied().sum::<T>();
        }
        for ci in 0..g.cin {
            let xoff = (ni * g.cin + ci) * hw;
            for co in 0..g.cout {
                let gp = &gy[(ni * g.cout + co) * ohw..(ni * g.cout + co + 1) * ohw];
                for ky in 0..g.k {
                    let iy_range = span(g.h, g.stride, ky as isize - g.pad as isize, g.oh);
                    for kx in 0..g.k {
                        let widx = ((ci * g.cout + co) * g.k + ky) * g.k + kx;
                        let wv = wt[widx];
                        let ix_range = span(g.w, g.stride, kx as isize - g.pad as isize, g.ow);
                        let mut acc = T::zero();
                        for iy in iy_range.clone() {
                            let oy = iy * g.stride + ky - g.pad;
                            let grow = &gp[oy * g.ow..(oy + 1) * g.ow];
                            let row = xoff + iy * g.w;
                            for ix in ix_range.clone() {
                                let gv = grow[ix * g.stride + kx - g.pad];
                                acc += gv * x[row + ix];
                                gx[row + ix] += wv * gv;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    gx
}

/// Rearranges non-overlapping `patch × patch` blocks into columns:
/// `[N, C, H, W]` → `[N, C·patch², (H/patch)·(W/patch)]`.
pub(crate) fn patches_to_cols<T: Real>(
    x: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    patch: usize,
) -> Vec<T> {
    let (gh, gw) = (h / patch, w / patch);
    let q = gh * gw;
    let k = c * patch * patch;
    let mut cols = vec![T::zero(); n * k * q];
    for ni in 0..n {
        for ci in 0..c {
            for dy in 0..patch {
                for dx in 0..patch {
                    let row = (ci * patch + dy) * patch + dx;
                    let dst = &mut cols[(ni * k + row) * q..(ni * k + row + 1) * q];
                    for by in 0..gh {
                        let src = ((ni * c + ci) * h + by * patch + dy) * w;
                        for bx in 0..gw {
                            dst[by * gw + bx] = x[src + bx * patch + dx];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn cols_to_patches<T: Real>(
    cols: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    patch: usize,
) -> Vec<T> {
    let (gh, gw) = (h / patch, w / patch);
    let q = gh * gw;
    let k = c * patch * patch;
    let mut x = vec![T::zero(); n * c * h * w];
    for ni in 0..n {
        for ci in 0..c {
            for dy in 0..patch {
                for dx in 0..patch {
                    let row = (ci * patch + dy) * patch + dx;
                    let src = &cols[(ni * k + row) * q..(ni * k + row + 1) * q];
                    for by in 0..gh {
                        let dst = ((ni * c + ci) * h + by * patch + dy) * w;
                        for bx in 0..gw {
                            x[dst + bx * patch + dx] = src[by * gw + bx];
                        }
                    }
                }
            }
        }
    }
    x
}

pub(crate) fn upsample_forward<T: Real>(
    x: &[T],
    nc: usize,
    h: usize,
    w: usize,
    f: usize,
) -> Vec<T> {
    let (oh, ow) = (h * f, w * f);
    let mut y = vec![T::zero(); nc * oh * ow];
    for plane in 0..nc {
        for oy in 0..oh {
            let src = &x[(plane * h + oy / f) * w..(plane * h + oy / f + 1) * w];
            let dst = &mut y[(plane * oh + oy) * ow..(plane * oh + oy + 1) * ow];
            for (ox, d) in dst.iter_mut().enumerate() {
                *d = src[ox / f];
            }
        }
    }
    y
}

pub(crate) fn upsample_backward<T: Real>(
    gy: &[T],
    nc: usize,
    h: usize,
    w: usize,
    f: usize,
) -> Vec<T> {
    let (oh, ow) = (h * f, w * f);
    let mut gx = vec![T::zero(); nc * h * w];
    for plane in 0..nc {
        for oy in 0..oh {
            let src = &gy[(plane * oh + oy) * ow..(plane * oh + oy + 1) * ow];
            let dst = &mut gx[(plane * h + oy / f) * w..(plane * h + oy / f + 1) * w];
            for (ox, &g) in src.iter().enumerate() {
                dst[ox / f] += g;
            }
        }
    }
    gx
}

/// Softmax over the channel axis of an `[N, C, P]` view.
pub(crate) fn softmax_forward<T: Real>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for ni in 0..n {
        for pi in 0..p {
            let idx = |ci: usize| (ni * c + ci) * p + pi;
            let mut max = T::neg_infinity();
            for ci in 0..c {
                max = max.max(x[idx(ci)]);
            }
            let mut sum = T::zero();
            for ci in 0..c {
                let e = (x[idx(ci)] - max).exp();
                y[idx(ci)] = e;
                sum += e;
            }
            for ci in 0..c {
                y[idx(ci)] /= sum;
            }
        }
    }
    y
}

pub(crate) fn softmax_backward<T: Real>(y: &[T], gy: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut gx = vec![T::zero(); y.len()];
    for ni in 0..n {
        for pi in 0..p {
            let idx = |ci: usize| (ni * c + ci) * p + pi;
            let dot: T = (0..c).map(|ci| gy[idx(ci)] * y[idx(ci)]).sum();
            for ci in 0..c {
                gx[idx(ci)] = y[idx(ci)] * (gy[idx(ci)] - dot);
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn span_bounds() {
        // stride 2, offset -1, 8 targets: i*2-1 in [0,8) -> i in 1..=4
        assert_eq!(span(8, 2, -1, 8), 1..5);
        assert_eq!(span(4, 1, 0, 4), 0..4);
        assert_eq!(span(4, 1, 2, 4), 0..2);
        assert_eq!(span(4, 1, 9, 4), 0..0);
    }

    #[test]
    fn deconv_stride2_doubles() {
        // 1x1 channel, 2x2 input, k=4, s=2, p=1 -> 4x4 output
        let g = ConvGeom { n: 1, cin: 1, cout: 1, h: 2, w: 2, oh: 4, ow: 4, k: 4, stride: 2, pad: 1 };
        let x = [1.0f64, 0.0, 0.0, 0.0];
        let wt: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let y = deconv_forward(&x, &wt, &[0.0], g);
        // input (0,0) lands on output (ky-1, kx-1) for ky,kx >= 1
        assert_eq!(y[0], wt[5]);
        assert_eq!(y[1], wt[6]);
        assert_eq!(y[4], wt[9]);
        assert_eq!(y[15], 0.0);
    }

    #[test]
    fn patches_roundtrip() {
        let x: Vec<f64> = (0..2 * 3 * 8 * 8).map(|i| i as f64).collect();
        let cols = patches_to_cols(&x, 2, 3, 8, 8, 4);
        assert_eq!(cols_to_patches(&cols, 2, 3, 8, 8, 4), x);
    }
}
