//! Forward and backward kernels behind the tape primitives.
//!
//! Work is split across batch items or output channels with rayon. Every
//! output element is produced by exactly one task with a fixed summation
//! order, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::error::{dim_err, Result};
use crate::tensor::{Shape, Tensor5D};

/// Stride, padding and dilation per (time, height, width) axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub dilation: [usize; 3],
}

impl ConvGeom {
    pub fn unit() -> Self {
        ConvGeom {
            stride: [1; 3],
            pad: [0; 3],
            dilation: [1; 3],
        }
    }
}

fn out_dim(input: usize, k: usize, stride: usize, pad: usize, dil: usize) -> Option<usize> {
    let span = dil * (k - 1) + 1;
    let padded = input + 2 * pad;
    if stride == 0 || padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

/// Output positions `o` in `[lo, hi)` with `0 <= o*stride + off < size`.
#[inline]
fn valid_range(off: isize, stride: usize, size: usize, out: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let hi = if (size as isize) - off <= 0 {
        0
    } else {
        ((size as isize - off - 1) / s + 1).min(out as isize)
    };
    let lo = lo.min(out as isize) as usize;
    (lo, (hi.max(lo as isize)) as usize)
}

#[inline]
fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn conv_output_shape(x: Shape, w: Shape, g: &ConvGeom) -> Result<Shape> {
    if w.c() != x.c() {
        return Err(dim_err!(
            "conv weight {w:?} expects {} input channels, input {x:?} has {}",
            w.c(),
            x.c()
        ));
    }
    let k = [w.t(), w.h(), w.w()];
    let i = [x.t(), x.h(), x.w()];
    let mut o = [0; 3];
    for a in 0..3 {
        o[a] = out_dim(i[a], k[a], g.stride[a], g.pad[a], g.dilation[a]).ok_or_else(|| {
            dim_err!("conv kernel {w:?} with {g:?} does not fit input {x:?}")
        })?;
    }
    Ok(Shape::new(x.n(), w.n(), o[0], o[1], o[2]))
}

/// Per-axis valid ranges and offsets for one kernel tap.
struct Tap {
    offs: [isize; 3],
    lo: [usize; 3],
    hi: [usize; 3],
}

fn taps(xs: Shape, ws: Shape, os: Shape, g: &ConvGeom) -> Vec<Tap> {
    let i = [xs.t(), xs.h(), xs.w()];
    let o = [os.t(), os.h(), os.w()];
    let mut out = Vec::with_capacity(ws.plane());
    for kt in 0..ws.t() {
        for kh in 0..ws.h() {
            for kw in 0..ws.w() {
                let k = [kt, kh, kw];
                let mut tap = Tap {
                    offs: [0; 3],
                    lo: [0; 3],
                    hi: [0; 3],
                };
                for a in 0..3 {
                    let off = (k[a] * g.dilation[a]) as isize - g.pad[a] as isize;
                    let (lo, hi) = valid_range(off, g.stride[a], i[a], o[a]);
                    tap.offs[a] = off;
                    tap.lo[a] = lo;
                    tap.hi[a] = hi;
                }
                out.push(tap);
            }
        }
    }
    out
}

/// Calls `f(out_row_start, in_row_start, len)` for every row touched
/// by one tap. Row starts index the (t, h, w) planes of output and input.
#[inline]
fn for_each_row(
    tap: &Tap,
    g: &ConvGeom,
    xs: Shape,
    os: Shape,
    mut f: impl FnMut(usize, usize, usize),
) {
    let (wlo, whi) = (tap.lo[2], tap.hi[2]);
    if wlo >= whi {
        return;
    }
    let len = whi - wlo;
    let iw0 = (wlo * g.stride[2]) as isize + tap.offs[2];
    for ot in tap.lo[0]..tap.hi[0] {
        let it = ((ot * g.stride[0]) as isize + tap.offs[0]) as usize;
        for oh in tap.lo[1]..tap.hi[1] {
            let ih = ((oh * g.stride[1]) as isize + tap.offs[1]) as usize;
            let orow = (ot * os.h() + oh) * os.w() + wlo;
            let irow = (it * xs.h() + ih) * xs.w() + iw0 as usize;
            f(orow, irow, len);
        }
    }
}

pub fn conv_forward(x: &Tensor5D, w: &Tensor5D, g: &ConvGeom) -> Result<Tensor5D> {
    let (xs, ws) = (x.shape(), w.shape());
    let os = conv_output_shape(xs, ws, g)?;
    let taps = taps(xs, ws, os, g);
    let mut out = Tensor5D::zeros(os);
    let (po, pi, kk) = (os.plane(), xs.plane(), ws.plane());
    let sw = g.stride[2];
    let (cout, cin) = (ws.n(), ws.c());
    let xd = x.data();
    let wd = w.data();
    out.data_mut()
        .par_chunks_mut(po)
        .enumerate()
        .for_each(|(idx, oplane)| {
            let (n, co) = (idx / cout, idx % cout);
            for ci in 0..cin {
                let xin = &xd[(n * cin + ci) * pi..(n * cin + ci + 1) * pi];
                let wrow = &wd[(co * cin + ci) * kk..(co * cin + ci + 1) * kk];
                for (tap, &wv) in taps.iter().zip(wrow) {
                    for_each_row(tap, g, xs, os, |orow, irow, len| {
                        let dst = &mut oplane[orow..orow + len];
                        if sw == 1 {
                            axpy(dst, wv, &xin[irow..irow + len]);
                        } else {
                            for (j, d) in dst.iter_mut().enumerate() {
                                *d += wv * xin[irow + j * sw];
                            }
                        }
                    });
                }
            }
        });
    Ok(out)
}

pub fn conv_backward_input(dy: &Tensor5D, w: &Tensor5D, xs: Shape, g: &ConvGeom) -> Tensor5D {
    let (os, ws) = (dy.shape(), w.shape());
    let taps = taps(xs, ws, os, g);
    let mut dx = Tensor5D::zeros(xs);
    let (po, pi, kk) = (os.plane(), xs.plane(), ws.plane());
    let sw = g.stride[2];
    let (cout, cin) = (ws.n(), ws.c());
    let dyd = dy.data();
    let wd = w.data();
    dx.data_mut()
        .par_chunks_mut(pi)
        .enumerate()
        .for_each(|(idx, xplane)| {
            let (n, ci) = (idx / cin, idx % cin);
            for co in 0..cout {
                let gout = &dyd[(n * cout + co) * po..(n * cout + co + 1) * po];
                let wrow = &wd[(co * cin + ci) * kk..(co * cin + ci + 1) * kk];
                for (tap, &wv) in taps.iter().zip(wrow) {
                    for_each_row(tap, g, xs, os, |orow, irow, len| {
                        if sw == 1 {
                            axpy(&mut xplane[irow..irow + len], wv, &gout[orow..orow + len]);
                        } else {
                            for j in 0..len {
                                xplane[irow + j * sw] += wv * gout[orow + j];
                            }
                        }
                    });
                }
            }
        });
    dx
}

pub fn conv_backward_weight(dy: &Tensor5D, x: &Tensor5D, ws: Shape, g: &ConvGeom) -> Tensor5D {
    let (os, xs) = (dy.shape(), x.shape());
    let taps = taps(xs, ws, os, g);
    let mut dw = Tensor5D::zeros(ws);
    let (po, pi, kk) = (os.plane(), xs.plane(), ws.plane());
    let sw = g.stride[2];
    let (cout, cin) = (ws.n(), ws.c());
    let dyd = dy.data();
    let xd = x.data();
    let batch = xs.n();
    dw.data_mut()
        .par_chunks_mut(kk)
        .enumerate()
        .for_each(|(idx, wrow)| {
            let (co, ci) = (idx / cin, idx % cin);
            for (tap, wv) in taps.iter().zip(wrow.iter_mut()) {
                let mut acc = 0.0;
                for n in 0..batch {
                    let gout = &dyd[(n * cout + co) * po..(n * cout + co + 1) * po];
                    let xin = &xd[(n * cin + ci) * pi..(n * cin + ci + 1) * pi];
                    for_each_row(tap, g, xs, os, |orow, irow, len| {
                        if sw == 1 {
                            acc += dot(&gout[orow..orow + len], &xin[irow..irow + len]);
                        } else {
                            for j in 0..len {
                                acc += gout[orow + j] * xin[irow + j * sw];
                            }
                        }
                    });
                }
                *wv = acc;
            }
        });
    dw
}

/// Pooling window geometry per (time, height, width) axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

pub fn pool_output_shape(x: Shape, g: &PoolGeom) -> Result<Shape> {
    let i = [x.t(), x.h(), x.w()];
    let mut o = [0; 3];
    for a in 0..3 {
        if g.pad[a] >= g.kernel[a] {
            return Err(dim_err!("pool padding {:?} too large for kernel", g.pad));
        }
        o[a] = out_dim(i[a], g.kernel[a], g.stride[a], g.pad[a], 1)
            .ok_or_else(|| dim_err!("pool {g:?} does not fit input {x:?}"))?;
    }
    Ok(Shape::new(x.n(), x.c(), o[0], o[1], o[2]))
}

/// Visits the in-bounds input offsets of the window for output (ot, oh, ow).
#[inline]
fn window(
    g: &PoolGeom,
    xs: Shape,
    o: [usize; 3],
    mut f: impl FnMut(usize),
) {
    let i = [xs.t(), xs.h(), xs.w()];
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        let start = (o[a] * g.stride[a]) as isize - g.pad[a] as isize;
        let end = (start + g.kernel[a] as isize).min(i[a] as isize);
        lo[a] = start.max(0) as usize;
        hi[a] = end.max(0) as usize;
    }
    for t in lo[0]..hi[0] {
        for h in lo[1]..hi[1] {
            let row = (t * xs.h() + h) * xs.w();
            for w in lo[2]..hi[2] {
                f(row + w);
            }
        }
    }
}

/// Max pooling; padded positions never win. Returns the output and, for each
/// output element, the in-plane offset of the winning input.
pub fn max_pool_forward(x: &Tensor5D, g: &PoolGeom) -> Result<(Tensor5D, Vec<u32>)> {
    let xs = x.shape();
    let os = pool_output_shape(xs, g)?;
    let mut out = Tensor5D::zeros(os);
    let mut arg = vec![0u32; os.numel()];
    let (po, pi) = (os.plane(), xs.plane());
    let xd = x.data();
    out.data_mut()
        .par_chunks_mut(po)
        .zip(arg.par_chunks_mut(po))
        .enumerate()
        .for_each(|(idx, (oplane, aplane))| {
            let xin = &xd[idx * pi..(idx + 1) * pi];
            let mut k = 0;
            for ot in 0..os.t() {
                for oh in 0..os.h() {
                    for ow in 0..os.w() {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_at = usize::MAX;
                        window(g, xs, [ot, oh, ow], |off| {
                            if xin[off] > best || best_at == usize::MAX {
                                best = xin[off];
                                best_at = off;
                            }
                        });
                        oplane[k] = best;
                        aplane[k] = best_at as u32;
                        k += 1;
                    }
                }
            }
        });
    Ok((out, arg))
}

pub fn max_pool_backward(dy: &Tensor5D, arg: &[u32], xs: Shape) -> Tensor5D {
    let mut dx = Tensor5D::zeros(xs);
    let (po, pi) = (dy.shape().plane(), xs.plane());
    let dyd = dy.data();
    dx.data_mut()
        .par_chunks_mut(pi)
        .enumerate()
        .for_each(|(idx, xplane)| {
            let g = &dyd[idx * po..(idx + 1) * po];
            let a = &arg[idx * po..(idx + 1) * po];
            for (gv, &at) in g.iter().zip(a) {
                xplane[at as usize] += gv;
            }
        });
    dx
}

/// Average pooling over the in-bounds part of each window.
pub fn avg_pool_forward(x: &Tensor5D, g: &PoolGeom) -> Result<Tensor5D> {
    let xs = x.shape();
    let os = pool_output_shape(xs, g)?;
    let mut out = Tensor5D::zeros(os);
    let (po, pi) = (os.plane(), xs.plane());
    let xd = x.data();
    out.data_mut()
        .par_chunks_mut(po)
        .enumerate()
        .for_each(|(idx, oplane)| {
            let xin = &xd[idx * pi..(idx + 1) * pi];
            let mut k = 0;
            for ot in 0..os.t() {
                for oh in 0..os.h() {
                    for ow in 0..os.w() {
                        let mut sum = 0.0;
                        let mut count = 0usize;
                        window(g, xs, [ot, oh, ow], |off| {
                            sum += xin[off];
                            count += 1;
                        });
                        oplane[k] = sum / count as f64;
                        k += 1;
                    }
                }
            }
        });
    Ok(out)
}

pub fn avg_pool_backward(dy: &Tensor5D, xs: Shape, g: &PoolGeom) -> Tensor5D {
    let os = dy.shape();
    let mut dx = Tensor5D::zeros(xs);
    let (po, pi) = (os.plane(), xs.plane());
    let dyd = dy.data();
    dx.data_mut()
        .par_chunks_mut(pi)
        .enumerate()
        .for_each(|(idx, xplane)| {
            let gp = &dyd[idx * po..(idx + 1) * po];
            let mut k = 0;
            for ot in 0..os.t() {
                for oh in 0..os.h() {
                    for ow in 0..os.w() {
                        let mut count = 0usize;
                        window(g, xs, [ot, oh, ow], |_| count += 1);
                        let share = gp[k] / count as f64;
                        window(g, xs, [ot, oh, ow], |off| xplane[off] += share);
                        k += 1;
                    }
                }
            }
        });
    dx
}

/// Per-channel batch statistics over (N, T, H, W): (mean, biased variance).
pub fn channel_stats(x: &Tensor5D) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let count = (s.n() * s.plane()) as f64;
    (0..s.c())
        .into_par_iter()
        .map(|c| {
            let mut sum = 0.0;
            for n in 0..s.n() {
                sum += x.channel(n, c).iter().sum::<f64>();
            }
            let mean = sum / count;
            let mut sq = 0.0;
            for n in 0..s.n() {
                sq += x.channel(n, c).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
            }
            (mean, sq / count)
        })
        .unzip()
}

/// `y = scale * (x - mean) * inv_std + shift`, per channel.
pub fn norm_affine(
    x: &Tensor5D,
    mean: &[f64],
    inv_std: &[f64],
    scale: &[f64],
    shift: &[f64],
) -> Tensor5D {
    let s = x.shape();
    let p = s.plane();
    let mut out = Tensor5D::zeros(s);
    let xd = x.data();
    out.data_mut()
        .par_chunks_mut(p)
        .enumerate()
        .for_each(|(idx, plane)| {
            let c = idx % s.c();
            let a = scale[c] * inv_std[c];
            let b = shift[c] - a * mean[c];
            for (o, &v) in plane.iter_mut().zip(&xd[idx * p..(idx + 1) * p]) {
                *o = a * v + b;
            }
        });
    out
}

/// Gradients of [`norm_affine`] w.r.t. (x, scale, shift). With `batch_stats`
/// the mean and variance are treated as functions of `x`.
pub fn norm_backward(
    dy: &Tensor5D,
    x: &Tensor5D,
    mean: &[f64],
    inv_std: &[f64],
    scale: &[f64],
    batch_stats: bool,
    need_x: bool,
) -> (Option<Tensor5D>, Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let p = s.plane();
    let count = (s.n() * p) as f64;
    let (dscale, dshift): (Vec<f64>, Vec<f64>) = (0..s.c())
        .into_par_iter()
        .map(|c| {
            let mut dsc = 0.0;
            let mut dsh = 0.0;
            for n in 0..s.n() {
                for (g, v) in dy.channel(n, c).iter().zip(x.channel(n, c)) {
                    dsh += g;
                    dsc += g * (v - mean[c]) * inv_std[c];
                }
            }
            (dsc, dsh)
        })
        .unzip();
    if !need_x {
        return (None, dscale, dshift);
    }
    let mut dx = Tensor5D::zeros(s);
    let (dyd, xd) = (dy.data(), x.data());
    dx.data_mut()
        .par_chunks_mut(p)
        .enumerate()
        .for_each(|(idx, plane)| {
            let c = idx % s.c();
            let g = &dyd[idx * p..(idx + 1) * p];
            let k = scale[c] * inv_std[c];
            if batch_stats {
                // dxhat = dy * scale; dx = inv_std/N (N dxhat - sum dxhat - xhat sum(dxhat xhat))
                let sum_dxhat = dshift[c] * scale[c];
                let sum_dxhat_xhat = dscale[c] * scale[c];
                let xin = &xd[idx * p..(idx + 1) * p];
                for ((o, gv), v) in plane.iter_mut().zip(g).zip(xin) {
                    let xhat = (v - mean[c]) * inv_std[c];
                    *o = inv_std[c] / count
                        * (count * gv * scale[c] - sum_dxhat - xhat * sum_dxhat_xhat);
                }
            } else {
                for (o, gv) in plane.iter_mut().zip(g) {
                    *o = k * gv;
                }
            }
        });
    (Some(dx), dscale, dshift)
}
