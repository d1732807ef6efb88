//! Forward and backward kernels for the differentiable primitives.
//!
//! Everything here works on plain slices; the tape in `super` decides which
//! backward pieces are needed.

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar};

/// Zero-padded `im2col` for a `c×h×w` input and odd kernel `k`.
/// Row `(ci·k + ky)·k + kx` of the result holds the input shifted by `(ky-r, kx-r)`.
fn im2col<T: Scalar>(input: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let r = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![T::zero(); c * k * k * hw];
    for ci in 0..c {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - r;
            for kx in 0..k {
                let dx = kx as isize - r;
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let (x0, x1) = valid_range(w, dx);
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        continue;
                    }
                    let sy = sy as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    dst[y * w + x0..y * w + x1]
                        .copy_from_slice(&plane[sy * w + sx0..sy * w + sx0 + (x1 - x0)]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let r = (k / 2) as isize;
    let hw = h * w;
    let mut out = vec![T::zero(); c * hw];
    for ci in 0..c {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - r;
            for kx in 0..k {
                let dx = kx as isize - r;
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let (x0, x1) = valid_range(w, dx);
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        continue;
                    }
                    let sy = sy as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    let dst = &mut plane[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                    for (d, s) in dst.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *d += *s;
                    }
                }
            }
        }
    }
    out
}

/// Output columns `x` for which `x + dx` lies inside `0..w`.
fn valid_range(w: usize, dx: isize) -> (usize, usize) {
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx).clamp(0, w as isize) as usize;
    (x0.min(w), x1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

pub(crate) fn conv2d_forward<T: Scalar>(input: &[T], weight: &[T], bias: &[T], d: ConvDims) -> Vec<T> {
    let hw = d.h * d.w;
    let kk = d.c_in * d.k * d.k;
    let mut out = Vec::with_capacity(d.c_out * hw);
    for &b in bias {
        out.extend(std::iter::repeat_n(b, hw));
    }
    let owned;
    let cols: &[T] = if d.k == 1 {
        input
    } else {
        owned = im2col(input, d.c_in, d.h, d.w, d.k);
        &owned
    };
    gemm(MatRef::rm(weight, d.c_out, kk), MatRef::rm(cols, kk, hw), T::one(), &mut out);
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    d: ConvDims,
    need: [bool; 3],
) -> ConvGrads<T> {
    let hw = d.h * d.w;
    let kk = d.c_in * d.k * d.k;
    let mut grads = ConvGrads { input: None, weight: None, bias: None };
    if need[2] {
        grads.bias = Some(grad_out.chunks_exact(hw).map(|row| row.iter().copied().sum()).collect());
    }
    if need[1] {
        let owned;
        let cols: &[T] = if d.k == 1 {
            input
        } else {
            owned = im2col(input, d.c_in, d.h, d.w, d.k);
            &owned
        };
        let mut dw = vec![T::zero(); d.c_out * kk];
        gemm(MatRef::rm(grad_out, d.c_out, hw), MatRef::rm_t(cols, hw, kk), T::zero(), &mut dw);
        grads.weight = Some(dw);
    }
    if need[0] {
        let mut dcols = vec![T::zero(); kk * hw];
        gemm(MatRef::rm_t(weight, kk, d.c_out), MatRef::rm(grad_out, d.c_out, hw), T::zero(), &mut dcols);
        grads.input = Some(if d.k == 1 { dcols } else { col2im(&dcols, d.c_in, d.h, d.w, d.k) });
    }
    grads
}

pub(crate) fn relu_forward<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
}

pub(crate) fn relu_backward<T: Scalar>(x: &[T], grad_out: &[T]) -> Vec<T> {
    x.iter()
        .zip(grad_out)
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect()
}

/// Per-axis interpolation taps for align-corners-false bilinear resampling.
fn bilinear_taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn upsample_forward<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let ty = bilinear_taps(h, f);
    let tx = bilinear_taps(w, f);
    let (oh, ow) = (h * f, w * f);
    let mut out = Vec::with_capacity(c * oh * ow);
    for plane in x.chunks_exact(h * w) {
        for &(y0, y1, ly) in &ty {
            let ly = T::lit(ly);
            let (r0, r1) = (&plane[y0 * w..(y0 + 1) * w], &plane[y1 * w..(y1 + 1) * w]);
            for &(x0, x1, lx) in &tx {
                let lx = T::lit(lx);
                let top = (T::one() - lx) * r0[x0] + lx * r0[x1];
                let bot = (T::one() - lx) * r1[x0] + lx * r1[x1];
                out.push((T::one() - ly) * top + ly * bot);
            }
        }
    }
    out
}

pub(crate) fn upsample_backward<T: Scalar>(g: &[T], c: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let ty = bilinear_taps(h, f);
    let tx = bilinear_taps(w, f);
    let ow = w * f;
    let mut dx = vec![T::zero(); c * h * w];
    for (plane, gplane) in dx.chunks_exact_mut(h * w).zip(g.chunks_exact(h * f * ow)) {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::lit(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::lit(lx);
                let go = gplane[oy * ow + ox];
                let top = (T::one() - ly) * go;
                let bot = ly * go;
                plane[y0 * w + x0] += (T::one() - lx) * top;
                plane[y0 * w + x1] += lx * top;
                plane[y1 * w + x0] += (T::one() - lx) * bot;
                plane[y1 * w + x1] += lx * bot;
            }
        }
    }
    dx
}

pub(crate) fn avg_pool_forward<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let (oh, ow) = (h / f, w / f);
    let inv = T::one() / T::lit((f * f) as f64);
    let mut out = Vec::with_capacity(c * oh * ow);
    for plane in x.chunks_exact(h * w) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for y in oy * f..(oy + 1) * f {
                    for &v in &plane[y * w + ox * f..y * w + (ox + 1) * f] {
                        acc += v;
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward<T: Scalar>(g: &[T], c: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let (oh, ow) = (h / f, w / f);
    let inv = T::one() / T::lit((f * f) as f64);
    let mut dx = vec![T::zero(); c * h * w];
    for (plane, gp) in dx.chunks_exact_mut(h * w).zip(g.chunks_exact(oh * ow)) {
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = gp[(y / f) * ow + x / f] * inv;
            }
        }
    }
    dx
}

/// Numerically stable softmax of one logit vector; the normalizer is summed in f64.
pub fn softmax<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    if v.iter().any(|x| x.is_nan()) {
        return Err(Error::numeric("softmax", "NaN logit"));
    }
    if v.is_empty() {
        return Err(Error::arg("softmax of an empty vector"));
    }
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = out.iter().map(|o| o.as_f64()).sum();
    for o in &mut out {
        *o = T::lit(o.as_f64() / sum);
    }
    Ok(out)
}

/// Softmax over the leading axis of an `L × rest` buffer, independently for
/// every trailing position.
pub(crate) fn softmax_leading_forward<T: Scalar>(x: &[T], l: usize) -> Vec<T> {
    let n = x.len() / l;
    let mut out = vec![T::zero(); x.len()];
    for p in 0..n {
        let mut max = T::neg_infinity();
        for i in 0..l {
            max = max.max(x[i * n + p]);
        }
        let mut sum = 0.0f64;
        for i in 0..l {
            let e = (x[i * n + p] - max).exp();
            out[i * n + p] = e;
            sum += e.as_f64();
        }
        for i in 0..l {
            out[i * n + p] = T::lit(out[i * n + p].as_f64() / sum);
        }
    }
    out
}

pub(crate) fn softmax_leading_backward<T: Scalar>(y: &[T], g: &[T], l: usize) -> Vec<T> {
    let n = y.len() / l;
    let mut dx = vec![T::zero(); y.len()];
    for p in 0..n {
        let mut dot = T::zero();
        for i in 0..l {
            dot += y[i * n + p] * g[i * n + p];
        }
        for i in 0..l {
            dx[i * n + p] = y[i * n + p] * (g[i * n + p] - dot);
        }
    }
    dx
}

pub(crate) fn l1_forward<T: Scalar>(a: &[T], b: &[T]) -> T {
    let sum: T = a.iter().zip(b).map(|(&x, &y)| (x - y).abs()).sum();
    sum / T::lit(a.len() as f64)
}

/// Gradient of the mean absolute error with respect to `a`; the gradient for
/// `b` is its negation. Ties get zero.
pub(crate) fn l1_backward<T: Scalar>(a: &[T], b: &[T], g: T) -> Vec<T> {
    let scale = g / T::lit(a.len() as f64);
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            if x > y {
                scale
            } else if x < y {
                -scale
            } else {
                T::zero()
            }
        })
        .collect()
}
