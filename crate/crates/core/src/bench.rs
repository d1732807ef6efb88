//! Throughput of the fused modulation kernel against the per-pixel reference.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::modulation::{modulate_tensors, reference_modulate, TargetMode};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Serialize)]
pub struct BenchResult {
    pub channels: usize,
    pub hw: usize,
    pub size: usize,
    /// Pixels per second of the per-pixel reference.
    pub naive_px_per_s: f64,
    /// Pixels per second of the fused kernel.
    pub fused_px_per_s: f64,
}

impl BenchResult {
    pub fn speedup(&self) -> f64 {
        self.fused_px_per_s / self.naive_px_per_s
    }
}

fn time(f: impl FnOnce() -> Result<()>) -> Result<f64> {
    let t = Instant::now();
    f()?;
    Ok(t.elapsed().as_secs_f64())
}

/// Times one cross-domain filter pass of random `channels×hw×hw` f32 maps.
/// Reference and fused passes alternate; each keeps its best of `reps`.
pub fn bench_modulation(channels: usize, hw: usize, size: usize, reps: usize, seed: u64) -> Result<BenchResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = || Tensor::<f32>::from_fn(&[channels, hw, hw], |_| rng.random_range(-1.0..1.0));
    let (a, b) = (map(), map());
    let (mut naive, mut fused) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..reps.max(1) {
        naive = naive.min(time(|| reference_modulate(&a, &b, size, TargetMode::Cross).map(drop))?);
        fused = fused.min(time(|| modulate_tensors(&a, &b, size).map(drop))?);
    }
    let px = (hw * hw) as f64;
    Ok(BenchResult { channels, hw, size, naive_px_per_s: px / naive, fused_px_per_s: px / fused })
}
