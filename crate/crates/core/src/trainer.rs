//! Per-pair online training with the cycle-consistency loss.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::adam::{adam_step, AdamConfig, AdamState};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::network::{forward, predict, ModelConfig, ModelParams, Variant};
use crate::tensor::{DType, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub seed: u64,
    pub dtype: DType,
    /// Epoch interval for the `on_epoch` log callback; 0 disables it.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 1000, lr0: 0.002, decay: 0.9998, decay_every: 5, seed: 0, dtype: DType::F32, log_every: 50 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("initial learning rate must be positive, got {}", self.lr0)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("decay must lie in (0, 1], got {}", self.decay)));
        }
        if self.decay_every == 0 {
            return Err(Error::Config("decay interval must be at least one epoch".into()));
        }
        Ok(())
    }
}

/// `lr0 · decay^⌊epoch / decay_every⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let steps = (epoch / cfg.decay_every.max(1)) as i32;
    cfg.lr0 * cfg.decay.powi(steps)
}

/// One epoch of the loss trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

impl EpochRecord {
    /// The plain-text log line `epoch lr loss`.
    pub fn log_line(&self) -> String {
        format!("{} {:e} {:e}", self.epoch, self.lr, self.loss)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub trace: Vec<EpochRecord>,
    /// Mean `|avg_pool(SR) − LR|` of the final output, as a fraction of the dynamic range.
    pub final_residual: f64,
    pub wall_seconds: f64,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.trace.iter().map(|r| r.loss).collect()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.trace.last().map(|r| r.loss)
    }

    pub fn log_text(&self) -> String {
        self.trace.iter().map(|r| r.log_line() + "\n").collect()
    }
}

/// Trained parameters, the SR output and the run report.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub params: ModelParams<T>,
    pub sr: Image,
    pub report: TrainReport,
}

fn check_pair(lr: &Image, guide: &Image, scale: usize) -> Result<()> {
    if lr.channels() != 1 {
        return Err(Error::arg(format!("source must have one channel, got {}", lr.channels())));
    }
    if guide.channels() != 3 {
        return Err(Error::arg(format!("guide must have three channels, got {}", guide.channels())));
    }
    if (guide.height(), guide.width()) != (lr.height() * scale, lr.width() * scale) {
        return Err(Error::arg(format!(
            "guide is {}×{} but a {}×{} source at scale {scale} needs {}×{}",
            guide.height(),
            guide.width(),
            lr.height(),
            lr.width(),
            lr.height() * scale,
            lr.width() * scale
        )));
    }
    Ok(())
}

/// `l1(avg_pool_down(sr, scale), lr)`, in normalized units.
pub fn cycle_loss(sr: &Image, lr: &Image, scale: usize) -> Result<f64> {
    if sr.channels() != lr.channels() || (sr.height(), sr.width()) != (lr.height() * scale, lr.width() * scale) {
        return Err(Error::arg(format!(
            "SR image {:?} is not the source {:?} scaled by {scale}",
            sr.dims(),
            lr.dims()
        )));
    }
    let mut g = Graph::<f64>::new();
    let s = g.input(sr.to_tensor());
    let l = g.input(lr.to_tensor());
    let pooled = g.avg_pool_down(s, scale)?;
    let loss = g.l1_loss(pooled, l)?;
    g.value(loss).item()
}

/// Trains a fresh model on one pair, with a callback every `log_every` epochs.
pub fn train_pair_with<T: Scalar>(
    lr: &Image,
    guide: &Image,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    mcfg.validate()?;
    tcfg.validate()?;
    check_pair(lr, guide, mcfg.scale)?;
    let start = Instant::now();
    let mut params = ModelParams::<T>::build(*mcfg, tcfg.seed)?;
    let mut adam = AdamState::new(params.tensors(), AdamConfig::default());
    let lr_t = lr.to_tensor::<T>();
    let guide_t = guide.to_tensor::<T>();
    let mut trace = Vec::with_capacity(tcfg.epochs);
    for epoch in 0..tcfg.epochs {
        let diverged = |e: Error| match e.root() {
            Error::Numeric { .. } => Error::Training { epoch, detail: e.to_string() },
            _ => e,
        };
        let mut g = Graph::new();
        let bound = params.bind(&mut g, true);
        let s = g.input(lr_t.clone());
        let gd = g.input(guide_t.clone());
        let out = forward(&mut g, &bound, mcfg, s, gd).map_err(diverged)?.output;
        let pooled = g.avg_pool_down(out, mcfg.scale).map_err(diverged)?;
        let loss_var = g.l1_loss(pooled, s).map_err(diverged)?;
        let loss = g.value(loss_var).item()?.as_f64();
        if !loss.is_finite() {
            return Err(Error::Training { epoch, detail: format!("loss is {loss}") });
        }
        g.backward(loss_var).map_err(diverged)?;
        let grads: Vec<&[T]> = bound
            .vars()
            .iter()
            .map(|&v| g.grad(v).map(|t| t.data()).ok_or_else(|| Error::State("parameter without gradient".into())))
            .collect::<Result<_>>()?;
        if grads.iter().any(|gr| gr.iter().any(|x| !x.is_finite())) {
            return Err(Error::Training { epoch, detail: "non-finite gradient".into() });
        }
        let rate = lr_at(epoch, tcfg);
        adam_step(params.tensors_mut(), &grads, &mut adam, rate)?;
        if params.tensors().iter().any(|t| !t.is_finite()) {
            return Err(Error::Training { epoch, detail: "non-finite parameter after update".into() });
        }
        let rec = EpochRecord { epoch, lr: rate, loss };
        if tcfg.log_every > 0 && (epoch % tcfg.log_every == 0 || epoch + 1 == tcfg.epochs) {
            on_epoch(&rec);
        }
        trace.push(rec);
    }
    let sr = predict(&params, lr, guide)?;
    let final_residual = cycle_loss(&sr, lr, mcfg.scale)?;
    let report = TrainReport { trace, final_residual, wall_seconds: start.elapsed().as_secs_f64() };
    Ok(TrainOutcome { params, sr, report })
}

/// Trains a fresh model on one pair.
pub fn train_pair<T: Scalar>(lr: &Image, guide: &Image, mcfg: &ModelConfig, tcfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    train_pair_with(lr, guide, mcfg, tcfg, |_| {})
}

/// Trains in the precision named by `tcfg.dtype`; parameters come back as `f64`.
pub fn train_pair_dyn(lr: &Image, guide: &Image, mcfg: &ModelConfig, tcfg: &TrainConfig) -> Result<TrainOutcome<f64>> {
    match tcfg.dtype {
        DType::F64 => train_pair::<f64>(lr, guide, mcfg, tcfg),
        DType::F32 => {
            let o = train_pair::<f32>(lr, guide, mcfg, tcfg)?;
            Ok(TrainOutcome { params: o.params.cast(), sr: o.sr, report: o.report })
        }
    }
}

/// Root mean squared error in native units (`a`'s dynamic range).
pub fn rmse(a: &Image, b: &Image) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::arg(format!("cannot compare {:?} with {:?}", a.dims(), b.dims())));
    }
    let sq: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok((sq / a.data().len() as f64).sqrt() * a.dynamic_range() as f64)
}

/// Bilinear upsampling of a source image, the no-guide baseline.
pub fn bilinear_baseline(lr: &Image, scale: usize) -> Result<Image> {
    let mut g = Graph::<f32>::new();
    let x = g.input(lr.to_tensor());
    let up = g.bilinear_upsample(x, scale)?;
    Image::from_tensor(g.value(up), lr.dynamic_range())
}

/// One evaluation pair for the ablation runner.
#[derive(Clone, Debug)]
pub struct AblationPair {
    pub name: String,
    pub lr: Image,
    pub guide: Image,
    pub gt: Image,
}

/// One table row: a variant at given window sizes, averaged over pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub n: usize,
    pub m: usize,
    pub scale: usize,
    pub mean_rmse: f64,
    pub pair_rmse: Vec<f64>,
}

pub const ABLATION_CSV_HEADER: &str = "variant,n,m,scale,mean_rmse";

impl AblationRow {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{},{:.6}", self.variant, self.n, self.m, self.scale, self.mean_rmse)
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from(ABLATION_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// Init seed for a pair; shared by every variant trained on it.
pub fn pair_seed(seed: u64, pair_index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(pair_index as u64 + 1)
}

/// Trains every variant on every pair and averages RMSE per variant.
///
/// Rows follow `variants` in order, then one Model3 row per entry of
/// `m_sweep` (at the base `n`). Sessions run in parallel; each pair's
/// init seed is derived from `tcfg.seed` and the pair index.
pub fn run_ablation(
    pairs: &[AblationPair],
    variants: &[Variant],
    m_sweep: &[usize],
    base: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    if pairs.is_empty() {
        return Err(Error::arg("ablation needs at least one pair"));
    }
    let mut configs: Vec<ModelConfig> = variants.iter().map(|&v| base.with_variant(v)).collect();
    configs.extend(m_sweep.iter().map(|&m| ModelConfig { m, ..base.with_variant(Variant::Model3) }));
    for c in &configs {
        c.validate()?;
    }
    let jobs: Vec<(usize, usize)> = (0..configs.len()).flat_map(|c| (0..pairs.len()).map(move |p| (c, p))).collect();
    let scores: Vec<f64> = jobs
        .par_iter()
        .map(|&(ci, pi)| {
            let cfg = &configs[ci];
            let pair = &pairs[pi];
            let t = TrainConfig { seed: pair_seed(tcfg.seed, pi), log_every: 0, ..*tcfg };
            let label = |e: Error| e.context(format!("pair {} variant {} (n={}, m={})", pair.name, cfg.variant, cfg.n, cfg.m));
            let out = train_pair_dyn(&pair.lr, &pair.guide, cfg, &t).map_err(label)?;
            rmse(&out.sr, &pair.gt).map_err(label)
        })
        .collect::<Result<_>>()?;
    Ok(configs
        .iter()
        .enumerate()
        .map(|(ci, cfg)| {
            let pair_rmse = scores[ci * pairs.len()..(ci + 1) * pairs.len()].to_vec();
            let mean_rmse = pair_rmse.iter().sum::<f64>() / pair_rmse.len() as f64;
            AblationRow { variant: cfg.variant, n: cfg.n, m: cfg.m, scale: cfg.scale, mean_rmse, pair_rmse }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{degrade_pool, replicate_up};

    #[test]
    fn schedule_values() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.002);
        assert_eq!(lr_at(4, &cfg), 0.002);
        assert!((lr_at(10, &cfg) - 0.00199920008).abs() < 1e-15);
    }

    #[test]
    fn cycle_loss_cases() {
        let lr = Image::new(2, 2, 1, vec![0.1, 0.5, 0.7, 0.2], 1.0).unwrap();
        assert_eq!(cycle_loss(&replicate_up(&lr, 3).unwrap(), &lr, 3).unwrap(), 0.0);
        let sr = Image::filled(4, 4, 1, 0.25, 1.0).unwrap();
        let lr = Image::filled(2, 2, 1, 1.25, 1.0).unwrap();
        assert!((cycle_loss(&sr, &lr, 2).unwrap() - 1.0).abs() < 1e-12);
        assert!(cycle_loss(&sr, &lr, 3).is_err());
    }

    #[test]
    fn rmse_cases() {
        let z = Image::new(1, 2, 1, vec![0.0, 0.0], 1.0).unwrap();
        let b = Image::new(1, 2, 1, vec![3.0, 4.0], 1.0).unwrap();
        assert!((rmse(&z, &b).unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(rmse(&b, &b).unwrap(), 0.0);
        let one = Image::filled(1, 2, 1, 1.0, 1.0).unwrap();
        assert_eq!(rmse(&z, &one).unwrap(), 1.0);
        assert!(rmse(&z, &Image::filled(2, 1, 1, 0.0, 1.0).unwrap()).is_err());
    }

    #[test]
    fn invalid_train_configs() {
        for cfg in [
            TrainConfig { lr0: 0.0, ..Default::default() },
            TrainConfig { decay: 1.5, ..Default::default() },
            TrainConfig { decay: 0.0, ..Default::default() },
            TrainConfig { decay_every: 0, ..Default::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    fn tiny_pair() -> (Image, Image) {
        let gt = Image::new(8, 8, 1, (0..64).map(|i| if i % 8 < 4 { 0.3 } else { 0.7 }).collect(), 1.0).unwrap();
        let guide = Image::new(8, 8, 3, (0..192).map(|i| if (i / 3) % 8 < 4 { 0.2 } else { 0.9 }).collect(), 255.0).unwrap();
        (degrade_pool(&gt, 2).unwrap(), guide)
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig { variant: Variant::Model3, n: 3, m: 3, channels: 4, scale: 2 }
    }

    #[test]
    fn zero_epochs_is_untrained_forward() {
        let (lr, guide) = tiny_pair();
        let tcfg = TrainConfig { epochs: 0, seed: 9, ..Default::default() };
        let out = train_pair::<f32>(&lr, &guide, &tiny_cfg(), &tcfg).unwrap();
        assert!(out.report.trace.is_empty());
        let fresh = ModelParams::<f32>::build(tiny_cfg(), 9).unwrap();
        assert_eq!(out.params, fresh);
        assert_eq!(out.sr, predict(&fresh, &lr, &guide).unwrap());
    }

    #[test]
    fn short_run_is_deterministic_and_logged() {
        let (lr, guide) = tiny_pair();
        let tcfg = TrainConfig { epochs: 6, seed: 2, log_every: 5, ..Default::default() };
        let mut logged = Vec::new();
        let a = train_pair_with::<f32>(&lr, &guide, &tiny_cfg(), &tcfg, |r| logged.push(r.epoch)).unwrap();
        let b = train_pair::<f32>(&lr, &guide, &tiny_cfg(), &tcfg).unwrap();
        assert_eq!(logged, vec![0, 5]);
        assert_eq!(a.report.trace.len(), 6);
        assert_eq!(a.report.losses(), b.report.losses());
        assert_eq!(a.sr, b.sr);
        assert_eq!(a.report.trace[5].lr, lr_at(5, &tcfg));
    }

    #[test]
    fn mismatched_pair_rejected() {
        let (lr, guide) = tiny_pair();
        let cfg = ModelConfig { scale: 4, ..tiny_cfg() };
        let r = train_pair::<f32>(&lr, &guide, &cfg, &TrainConfig { epochs: 1, ..Default::default() });
        assert!(matches!(r, Err(Error::Argument(_))));
    }

    #[test]
    fn huge_rate_reports_epoch() {
        let (lr, guide) = tiny_pair();
        let tcfg = TrainConfig { epochs: 50, lr0: 1e30, ..Default::default() };
        match train_pair::<f32>(&lr, &guide, &tiny_cfg(), &tcfg) {
            Err(Error::Training { epoch, .. }) => assert!(epoch < 50),
            Ok(_) => panic!("expected divergence"),
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn csv_layout() {
        let rows = vec![AblationRow { variant: Variant::Model3, n: 11, m: 5, scale: 4, mean_rmse: 0.5, pair_rmse: vec![0.5] }];
        assert_eq!(ablation_csv(&rows), "variant,n,m,scale,mean_rmse\nmodel3,11,5,4,0.500000\n");
    }

    #[test]
    fn ablation_rows_follow_input_order() {
        let (lr, guide) = tiny_pair();
        let gt = replicate_up(&lr, 2).unwrap();
        let pairs = vec![AblationPair { name: "p".into(), lr, guide, gt }];
        let tcfg = TrainConfig { epochs: 2, ..Default::default() };
        let rows = run_ablation(&pairs, &[Variant::Model1, Variant::Model0], &[1, 3], &tiny_cfg(), &tcfg).unwrap();
        let got: Vec<_> = rows.iter().map(|r| (r.variant, r.m)).collect();
        assert_eq!(got, vec![(Variant::Model1, 3), (Variant::Model0, 3), (Variant::Model3, 1), (Variant::Model3, 3)]);
        assert!(matches!(run_ablation(&[], &[Variant::Model0], &[], &tiny_cfg(), &tcfg), Err(Error::Argument(_))));
    }
}
