//! Slice-level kernels behind the cross-domain adaptive filters.
//!
//! Layout conventions: feature maps are `C×H×W`, neighborhood stacks are
//! `C×L×H×W` with `L = size²` in row-major window order, composable filter
//! weights are `L×H×W`. The fused path keeps its per-pixel weights as `HW×L`
//! and works internally in channel-last order so every neighbor is one
//! contiguous `C`-vector.

use rayon::prelude::*;

use crate::tensor::Scalar;

/// `table[d * n + i] = clamp(i + d - r, 0, n - 1)` for window offsets `d` in `0..size`.
pub(crate) fn clamp_table(n: usize, size: usize) -> Vec<usize> {
    let r = (size / 2) as isize;
    let mut table = Vec::with_capacity(size * n);
    for d in 0..size as isize {
        for i in 0..n as isize {
            table.push((i + d - r).clamp(0, n as isize - 1) as usize);
        }
    }
    table
}

/// Tiled transpose of a row-major `rows×cols` matrix.
fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    const TILE: usize = 32;
    let mut out = vec![T::zero(); x.len()];
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    out[c * rows + r] = x[r * cols + c];
                }
            }
        }
    }
    out
}

pub(crate) fn to_hwc<T: Scalar>(x: &[T], c: usize, hw: usize) -> Vec<T> {
    transpose(x, c, hw)
}

pub(crate) fn to_chw<T: Scalar>(x: &[T], c: usize, hw: usize) -> Vec<T> {
    transpose(x, hw, c)
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 32];
    let wide = a.len() / 32 * 32;
    for (x, y) in a[..wide].chunks_exact(32).zip(b[..wide].chunks_exact(32)) {
        for i in 0..32 {
            acc[i] += x[i] * y[i];
        }
    }
    let ca = a[wide..].chunks_exact(8);
    let cb = b[wide..].chunks_exact(8);
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut lanes = [T::zero(); 8];
    for i in 0..8 {
        lanes[i] = (acc[i] + acc[i + 16]) + (acc[i + 8] + acc[i + 24]);
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7])) + tail
}

/// Runs `f` in a context compiled for AVX2 when the CPU has it. Only the
/// vector width changes; no operations are contracted, so results match the
/// baseline build bit for bit.
#[inline(always)]
fn with_simd<R>(f: impl FnOnce() -> R) -> R {
    #[cfg(target_arch = "x86_64")]
    {
        #[target_feature(enable = "avx2")]
        fn run<R>(f: impl FnOnce() -> R) -> R {
            f()
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            return unsafe { run(f) };
        }
    }
    f()
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct MapDims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl MapDims {
    fn hw(&self) -> usize {
        self.h * self.w
    }
}

/// Replicate-padded neighborhood gathering: `C×H×W -> C×L×H×W`.
pub(crate) fn unfold_forward<T: Scalar>(x: &[T], d: MapDims, size: usize) -> Vec<T> {
    let (ry, rx) = (clamp_table(d.h, size), clamp_table(d.w, size));
    let hw = d.hw();
    let l = size * size;
    let mut out = vec![T::zero(); d.c * l * hw];
    for ci in 0..d.c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for dy in 0..size {
            for dx in 0..size {
                let li = dy * size + dx;
                let dst = &mut out[(ci * l + li) * hw..(ci * l + li + 1) * hw];
                for i in 0..d.h {
                    let row = &plane[ry[dy * d.h + i] * d.w..][..d.w];
                    let cols = &rx[dx * d.w..(dx + 1) * d.w];
                    for (o, &sj) in dst[i * d.w..(i + 1) * d.w].iter_mut().zip(cols) {
                        *o = row[sj];
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn unfold_backward<T: Scalar>(g: &[T], d: MapDims, size: usize) -> Vec<T> {
    let (ry, rx) = (clamp_table(d.h, size), clamp_table(d.w, size));
    let hw = d.hw();
    let l = size * size;
    let mut dx_out = vec![T::zero(); d.c * hw];
    dx_out.par_chunks_mut(hw).enumerate().for_each(|(ci, plane)| {
        for dy in 0..size {
            for dx in 0..size {
                let li = dy * size + dx;
                let src = &g[(ci * l + li) * hw..(ci * l + li + 1) * hw];
                for i in 0..d.h {
                    let base = ry[dy * d.h + i] * d.w;
                    for j in 0..d.w {
                        plane[base + rx[dx * d.w + j]] += src[i * d.w + j];
                    }
                }
            }
        }
    });
    dx_out
}

/// `logit[l, p] = Σ_c stack[c, l, p] · target[c, p]`.
pub(crate) fn logits_forward<T: Scalar>(stack: &[T], target: &[T], c: usize, l: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); l * hw];
    for ci in 0..c {
        let t = &target[ci * hw..(ci + 1) * hw];
        for li in 0..l {
            let s = &stack[(ci * l + li) * hw..(ci * l + li + 1) * hw];
            for ((o, &sv), &tv) in out[li * hw..(li + 1) * hw].iter_mut().zip(s).zip(t) {
                *o += sv * tv;
            }
        }
    }
    out
}

pub(crate) fn logits_backward<T: Scalar>(
    stack: &[T],
    target: &[T],
    g: &[T],
    c: usize,
    l: usize,
    hw: usize,
) -> (Vec<T>, Vec<T>) {
    let mut dstack = vec![T::zero(); stack.len()];
    let mut dtarget = vec![T::zero(); target.len()];
    for ci in 0..c {
        let t = &target[ci * hw..(ci + 1) * hw];
        for li in 0..l {
            let off = (ci * l + li) * hw;
            let gl = &g[li * hw..(li + 1) * hw];
            for p in 0..hw {
                dstack[off + p] = gl[p] * t[p];
                dtarget[ci * hw + p] += gl[p] * stack[off + p];
            }
        }
    }
    (dstack, dtarget)
}

/// `out[c, p] = Σ_l weights[l, p] · stack[c, l, p]`.
pub(crate) fn aggregate_forward<T: Scalar>(stack: &[T], weights: &[T], c: usize, l: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c * hw];
    for ci in 0..c {
        let o = &mut out[ci * hw..(ci + 1) * hw];
        for li in 0..l {
            let s = &stack[(ci * l + li) * hw..(ci * l + li + 1) * hw];
            for ((ov, &sv), &wv) in o.iter_mut().zip(s).zip(&weights[li * hw..(li + 1) * hw]) {
                *ov += wv * sv;
            }
        }
    }
    out
}

pub(crate) fn aggregate_backward<T: Scalar>(
    stack: &[T],
    weights: &[T],
    g: &[T],
    c: usize,
    l: usize,
    hw: usize,
) -> (Vec<T>, Vec<T>) {
    let mut dstack = vec![T::zero(); stack.len()];
    let mut dweights = vec![T::zero(); weights.len()];
    for ci in 0..c {
        let gc = &g[ci * hw..(ci + 1) * hw];
        for li in 0..l {
            let off = (ci * l + li) * hw;
            for p in 0..hw {
                dstack[off + p] = weights[li * hw + p] * gc[p];
                dweights[li * hw + p] += gc[p] * stack[off + p];
            }
        }
    }
    (dstack, dweights)
}

/// Fused cross-domain filter.
///
/// For every pixel `p`, the `size×size` replicate-padded neighborhood of
/// `source` around `p` is correlated with `target[p]`; the softmax of those
/// correlations weights the neighbors into the output pixel.
/// Returns the filtered `C×H×W` map and the `HW×L` weights.
pub(crate) fn modulate_forward<T: Scalar>(source: &[T], target: &[T], d: MapDims, size: usize) -> (Vec<T>, Vec<T>) {
    let (c, h, w) = (d.c, d.h, d.w);
    let hw = d.hw();
    let l = size * size;
    let src = to_hwc(source, c, hw);
    let tgt = to_hwc(target, c, hw);
    let (ry, rx) = (clamp_table(h, size), clamp_table(w, size));

    let mut out = vec![T::zero(); c * hw];
    let mut weights = vec![T::zero(); hw * l];
    out.par_chunks_mut(w * c)
        .zip(weights.par_chunks_mut(w * l))
        .enumerate()
        .for_each(|(i, (out_row, w_row))| with_simd(|| {
            let mut partial = vec![T::zero(); c];
            for j in 0..w {
                let t = &tgt[(i * w + j) * c..][..c];
                let wp = &mut w_row[j * l..(j + 1) * l];
                let mut max = T::neg_infinity();
                for dy in 0..size {
                    let row = ry[dy * h + i] * w;
                    for dx in 0..size {
                        let q = row + rx[dx * w + j];
                        let logit = dot(&src[q * c..(q + 1) * c], t);
                        wp[dy * size + dx] = logit;
                        max = max.max(logit);
                    }
                }
                let mut sum = 0.0f64;
                for v in wp.iter_mut() {
                    *v = (*v - max).exp();
                    sum += v.as_f64();
                }
                // Two-level summation: each window row into `partial`, then rows into the output.
                let o = &mut out_row[j * c..(j + 1) * c];
                for dy in 0..size {
                    let row = ry[dy * h + i] * w;
                    partial.fill(T::zero());
                    for dx in 0..size {
                        let li = dy * size + dx;
                        wp[li] = T::lit(wp[li].as_f64() / sum);
                        let q = row + rx[dx * w + j];
                        axpy(wp[li], &src[q * c..(q + 1) * c], &mut partial);
                    }
                    for (ov, &pv) in o.iter_mut().zip(&partial) {
                        *ov += pv;
                    }
                }
            }
        }));
    (to_chw(&out, c, hw), weights)
}

/// Backward pass of [`modulate_forward`]; returns `(d source, d target)`.
pub(crate) fn modulate_backward<T: Scalar>(
    source: &[T],
    target: &[T],
    weights: &[T],
    grad_out: &[T],
    d: MapDims,
    size: usize,
    need_target: bool,
) -> (Vec<T>, Option<Vec<T>>) {
    let (c, h, w) = (d.c, d.h, d.w);
    let hw = d.hw();
    let l = size * size;
    let src = to_hwc(source, c, hw);
    let tgt = to_hwc(target, c, hw);
    let gout = to_hwc(grad_out, c, hw);
    let (ry, rx) = (clamp_table(h, size), clamp_table(w, size));

    // Softmax-input gradients per pixel, plus the target gradient which is
    // local to each pixel.
    let mut dlogit = vec![T::zero(); hw * l];
    let mut dtgt = vec![T::zero(); if need_target { c * hw } else { 0 }];
    let row_len = if need_target { w * c } else { 0 };
    let fill = |i: usize, dl_row: &mut [T], dt_row: &mut [T]| with_simd(|| {
        for j in 0..w {
            let p = i * w + j;
            let g = &gout[p * c..(p + 1) * c];
            let wp = &weights[p * l..(p + 1) * l];
            let dl = &mut dl_row[j * l..(j + 1) * l];
            let mut mean = T::zero();
            for dy in 0..size {
                let row = ry[dy * h + i] * w;
                for dx in 0..size {
                    let li = dy * size + dx;
                    let q = row + rx[dx * w + j];
                    dl[li] = dot(g, &src[q * c..(q + 1) * c]);
                    mean += wp[li] * dl[li];
                }
            }
            for (v, &wv) in dl.iter_mut().zip(wp) {
                *v = wv * (*v - mean);
            }
            if !dt_row.is_empty() {
                let dt = &mut dt_row[j * c..(j + 1) * c];
                for dy in 0..size {
                    let row = ry[dy * h + i] * w;
                    for dx in 0..size {
                        let q = row + rx[dx * w + j];
                        axpy(dl[dy * size + dx], &src[q * c..(q + 1) * c], dt);
                    }
                }
            }
        }
    });
    if need_target {
        dlogit
            .par_chunks_mut(w * l)
            .zip(dtgt.par_chunks_mut(row_len))
            .enumerate()
            .for_each(|(i, (dl_row, dt_row))| fill(i, dl_row, dt_row));
    } else {
        dlogit
            .par_chunks_mut(w * l)
            .enumerate()
            .for_each(|(i, dl_row)| fill(i, dl_row, &mut []));
    }

    // Scatter into the source: each neighbor gets its aggregation weight times
    // the output gradient plus its logit gradient times the target pixel.
    let mut dsrc = vec![T::zero(); c * hw];
    with_simd(|| for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let g = &gout[p * c..(p + 1) * c];
            let t = &tgt[p * c..(p + 1) * c];
            for dy in 0..size {
                let row = ry[dy * h + i] * w;
                for dx in 0..size {
                    let li = dy * size + dx;
                    let q = row + rx[dx * w + j];
                    let (a, b) = (weights[p * l + li], dlogit[p * l + li]);
                    for ((s, &gv), &tv) in dsrc[q * c..(q + 1) * c].iter_mut().zip(g).zip(t) {
                        *s += a * gv + b * tv;
                    }
                }
            }
        }
    });
    (
        to_chw(&dsrc, c, hw),
        need_target.then(|| to_chw(&dtgt, c, hw)),
    )
}
