//! Per-pixel reference implementation of the adaptive filters.
//!
//! Deliberately literal: every pixel gathers its neighbor vectors, computes
//! each correlation and the softmax by hand, and forms the weighted sum.
//! Accumulates in f64 and rounds once. Shares no code with the fused kernels.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Which pixel a filter correlates its neighborhood against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetMode {
    /// The co-located pixel of the other map.
    Cross,
    /// The center pixel of the filtered map itself.
    SelfTarget,
}

/// Filters `filtered` with `size×size` windows.
///
/// Returns the output map and the `L×H×W` weights.
pub fn reference_modulate<T: Scalar>(
    filtered: &Tensor<T>,
    other: &Tensor<T>,
    size: usize,
    mode: TargetMode,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, h, w) = filtered.dims3()?;
    if mode == TargetMode::Cross && other.shape() != filtered.shape() {
        return Err(Error::arg("reference_modulate: maps differ in shape"));
    }
    if size.is_multiple_of(2) {
        return Err(Error::arg("reference_modulate: window size must be odd"));
    }
    let r = (size / 2) as isize;
    let l = size * size;
    let at = |t: &Tensor<T>, ch: usize, y: isize, x: isize| -> T {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        t.data()[(ch * h + y) * w + x]
    };

    let mut out = Tensor::zeros(&[c, h, w]);
    let mut weights = Tensor::zeros(&[l, h, w]);
    for i in 0..h {
        for j in 0..w {
            let target_map = match mode {
                TargetMode::Cross => other,
                TargetMode::SelfTarget => filtered,
            };
            let target: Vec<T> = (0..c).map(|ch| at(target_map, ch, i as isize, j as isize)).collect();

            let mut neighbors: Vec<Vec<T>> = Vec::with_capacity(l);
            for dy in -r..=r {
                for dx in -r..=r {
                    neighbors.push((0..c).map(|ch| at(filtered, ch, i as isize + dy, j as isize + dx)).collect());
                }
            }

            let logits: Vec<f64> = neighbors
                .iter()
                .map(|nb| nb.iter().zip(&target).map(|(&a, &b)| a.as_f64() * b.as_f64()).sum())
                .collect();
            let peak = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let exps: Vec<f64> = logits.iter().map(|&v| (v - peak).exp()).collect();
            let total: f64 = exps.iter().sum();
            let wts: Vec<f64> = exps.iter().map(|&e| e / total).collect();

            for ch in 0..c {
                let acc: f64 = neighbors.iter().zip(&wts).map(|(nb, &wt)| wt * nb[ch].as_f64()).sum();
                out.data_mut()[(ch * h + i) * w + j] = T::lit(acc);
            }
            for (li, &wt) in wts.iter().enumerate() {
                weights.data_mut()[(li * h + i) * w + j] = T::lit(wt);
            }
        }
    }
    Ok((out, weights))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_one_is_identity() {
        let a = Tensor::from_fn(&[2, 3, 3], |i| i as f64 - 4.0);
        let b = Tensor::from_fn(&[2, 3, 3], |i| (i as f64).sin());
        let (out, w) = reference_modulate(&a, &b, 1, TargetMode::Cross).unwrap();
        assert_eq!(out, a);
        assert!(w.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn constant_map_fixpoint() {
        let a = Tensor::full(&[3, 4, 4], 0.75f64);
        let b = Tensor::from_fn(&[3, 4, 4], |i| (i as f64 * 0.3).cos());
        for mode in [TargetMode::Cross, TargetMode::SelfTarget] {
            let (out, _) = reference_modulate(&a, &b, 3, mode).unwrap();
            assert!(out.max_abs_diff(&a).unwrap() < 1e-15);
        }
    }
}
