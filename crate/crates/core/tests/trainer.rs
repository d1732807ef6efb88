use mmsr_core::synth::synth_pair;
use mmsr_core::trainer::{
    ablation_csv, bilinear_baseline, cycle_loss, lr_at, rmse, run_ablation, train_pair, AblationPair, TrainConfig,
};
use mmsr_core::{Error, Image, ModelConfig, Variant};

fn small(variant: Variant) -> ModelConfig {
    ModelConfig { variant, n: 3, m: 3, channels: 8, scale: 2 }
}

#[test]
fn cycle_loss_matches_hand_oracle() {
    let sr = Image::new(4, 4, 1, (0..16).map(|i| i as f32 / 16.0).collect(), 1.0).unwrap();
    let lr = Image::new(2, 2, 1, vec![0.1, 0.3, 0.6, 0.9], 1.0).unwrap();
    let pooled: Vec<f64> = (0..2)
        .flat_map(|by| (0..2).map(move |bx| (by, bx)))
        .map(|(by, bx)| {
            let mut s = 0.0;
            for y in 2 * by..2 * by + 2 {
                for x in 2 * bx..2 * bx + 2 {
                    s += (y * 4 + x) as f64 / 16.0;
                }
            }
            s / 4.0
        })
        .collect();
    let expect: f64 = pooled.iter().zip(lr.data()).map(|(p, &l)| (p - l as f64).abs()).sum::<f64>() / 4.0;
    assert!((cycle_loss(&sr, &lr, 2).unwrap() - expect).abs() < 1e-7);
    assert!(matches!(cycle_loss(&sr, &lr, 3), Err(Error::Argument(_))));
}

#[test]
fn schedule_reference_values() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at(0, &cfg), 0.002);
    assert!((lr_at(10, &cfg) - 0.00199920008).abs() <= 1e-12 * 0.002);
    assert_eq!(lr_at(4, &cfg), lr_at(0, &cfg));
    assert!(lr_at(5, &cfg) < lr_at(4, &cfg));
}

#[test]
fn short_training_descends_and_repeats() {
    let pair = synth_pair(3, 24, 2).unwrap();
    let tcfg = TrainConfig { epochs: 40, seed: 11, ..TrainConfig::default() };
    let a = train_pair::<f32>(&pair.lr, &pair.guide, &small(Variant::Model3), &tcfg).unwrap();
    let losses = a.report.losses();
    assert_eq!(losses.len(), 40);
    assert!(losses[39] < 0.5 * losses[0], "{} -> {}", losses[0], losses[39]);
    let b = train_pair::<f32>(&pair.lr, &pair.guide, &small(Variant::Model3), &tcfg).unwrap();
    assert_eq!(a.sr, b.sr);
    assert_eq!(a.report.log_text(), b.report.log_text());
    assert_eq!(a.sr.dims(), pair.gt.dims());
    assert_eq!(a.report.trace[7].lr, lr_at(7, &tcfg));
}

#[test]
fn f64_training_descends() {
    let pair = synth_pair(5, 16, 2).unwrap();
    let tcfg = TrainConfig { epochs: 30, ..TrainConfig::default() };
    let out = train_pair::<f64>(&pair.lr, &pair.guide, &small(Variant::Model6), &tcfg).unwrap();
    let l = out.report.losses();
    assert!(l[29] < l[0]);
    assert!((out.report.final_residual - cycle_loss(&out.sr, &pair.lr, 2).unwrap()).abs() < 1e-12);
}

#[test]
fn mismatched_pairs_are_rejected() {
    let pair = synth_pair(1, 16, 2).unwrap();
    let tcfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
    let err = train_pair::<f32>(&pair.lr, &pair.lr, &small(Variant::Model3), &tcfg).unwrap_err();
    assert!(matches!(err, Error::Argument(_)));
    let cfg = ModelConfig { scale: 4, ..small(Variant::Model3) };
    assert!(train_pair::<f32>(&pair.lr, &pair.guide, &cfg, &tcfg).is_err());
}

#[test]
fn bilinear_of_constant_is_exact() {
    let lr = Image::filled(4, 5, 1, 0.25, 255.0).unwrap();
    let up = bilinear_baseline(&lr, 3).unwrap();
    let gt = Image::filled(12, 15, 1, 0.25, 255.0).unwrap();
    assert_eq!(rmse(&up, &gt).unwrap(), 0.0);
    let off = Image::filled(12, 15, 1, 0.25 + 2.0 / 255.0, 255.0).unwrap();
    assert!((rmse(&off, &gt).unwrap() - 2.0).abs() < 1e-4);
}

#[test]
fn ablation_rows_follow_request_order() {
    let pairs: Vec<AblationPair> = (0..2)
        .map(|i| {
            let p = synth_pair(i, 16, 2).unwrap();
            AblationPair { name: format!("p{i}"), lr: p.lr, guide: p.guide, gt: p.gt }
        })
        .collect();
    let tcfg = TrainConfig { epochs: 3, ..TrainConfig::default() };
    let rows = run_ablation(&pairs, &[Variant::Model0, Variant::Model3], &[1], &small(Variant::Model3), &tcfg).unwrap();
    let keys: Vec<(Variant, usize)> = rows.iter().map(|r| (r.variant, r.m)).collect();
    assert_eq!(keys, [(Variant::Model0, 3), (Variant::Model3, 3), (Variant::Model3, 1)]);
    for r in &rows {
        assert_eq!(r.pair_rmse.len(), 2);
        assert!((r.mean_rmse - (r.pair_rmse[0] + r.pair_rmse[1]) / 2.0).abs() < 1e-15);
    }
    let csv = ablation_csv(&rows);
    assert!(csv.starts_with("variant,n,m,scale,mean_rmse\n"));
    assert_eq!(csv.lines().count(), 4);
    assert!(run_ablation(&[], &[Variant::Model0], &[], &small(Variant::Model0), &tcfg).is_err());
}
