use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use mmsr_core::bench::bench_modulation;
use mmsr_core::gradcheck::{run_suite, TOLERANCE};
use mmsr_core::image::{self, add_gaussian_noise, degrade_pool, Format};
use mmsr_core::network::{predict, read_checkpoint, write_checkpoint};
use mmsr_core::synth::synth_pair;
use mmsr_core::trainer::{ablation_csv, rmse, run_ablation, train_pair_with, AblationPair, TrainConfig, TrainOutcome};
use mmsr_core::{DType, Error, Image, ModelConfig, ModelParams, Result, Scalar, Variant};
use serde::Serialize;
use serde_json::json;

use crate::manifest::{sidecar, RunManifest};

#[derive(Args, Serialize)]
pub struct SrArgs {
    /// Low-resolution source image (.pgm or .f32r).
    #[arg(long)]
    source: PathBuf,
    /// High-resolution RGB guide image (.ppm or .f32r).
    #[arg(long)]
    guide: PathBuf,
    #[arg(long, default_value_t = 4)]
    scale: usize,
    /// Source-side window size.
    #[arg(long, default_value_t = 11)]
    n: usize,
    /// Guide-side window size.
    #[arg(long, default_value_t = 5)]
    m: usize,
    #[arg(long, default_value = "model3")]
    variant: Variant,
    #[arg(long, default_value_t = 64)]
    channels: usize,
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    #[arg(long, default_value_t = 0.002)]
    lr0: f64,
    #[arg(long, default_value_t = 0.9998)]
    decay: f64,
    #[arg(long, default_value_t = 5)]
    decay_every: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "f32")]
    dtype: DType,
    /// Progress interval on stderr; 0 is silent.
    #[arg(long, default_value_t = 100)]
    log_every: usize,
    /// Output SR image, in the same format family as the source.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint path; defaults to `<out>.ckpt`.
    #[arg(long)]
    ckpt_out: Option<PathBuf>,
    /// Ground truth, for an RMSE line in the summary.
    #[arg(long)]
    gt: Option<PathBuf>,
}

fn family(f: Format) -> &'static str {
    match f {
        Format::Pgm | Format::Ppm => "netpbm",
        Format::F32r => "f32r",
    }
}

fn train_typed<T: Scalar>(
    src: &Image,
    guide: &Image,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    ckpt: &Path,
) -> Result<TrainOutcome<T>> {
    let out = train_pair_with::<T>(src, guide, mcfg, tcfg, |r| eprintln!("epoch {} lr {:.6e} loss {:.6e}", r.epoch, r.lr, r.loss))?;
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &out.params)?;
    fs::write(ckpt, buf)?;
    Ok(out)
}

pub fn sr(a: SrArgs) -> Result<u8> {
    let mut manifest = RunManifest::begin("sr", &a)?;
    let src_format = Format::from_path(&a.source)?;
    let out_format = Format::from_path(&a.out)?;
    if family(src_format) != family(out_format) {
        return Err(Error::Argument(format!(
            "output {} must use the source's format family ({})",
            a.out.display(),
            src_format.extension()
        )));
    }
    let src = image::load(&a.source).map_err(|e| e.context(format!("reading {}", a.source.display())))?;
    let guide = image::load(&a.guide).map_err(|e| e.context(format!("reading {}", a.guide.display())))?;
    let gt = match &a.gt {
        Some(p) => Some(image::load(p).map_err(|e| e.context(format!("reading {}", p.display())))?),
        None => None,
    };
    let mcfg = ModelConfig { variant: a.variant, n: a.n, m: a.m, channels: a.channels, scale: a.scale };
    let tcfg = TrainConfig {
        epochs: a.epochs,
        lr0: a.lr0,
        decay: a.decay,
        decay_every: a.decay_every,
        seed: a.seed,
        dtype: a.dtype,
        log_every: a.log_every,
    };
    let ckpt = a.ckpt_out.clone().unwrap_or_else(|| sidecar(&a.out, "ckpt"));
    let log = sidecar(&a.out, "log");
    let (sr, report) = match a.dtype {
        DType::F32 => {
            let o = train_typed::<f32>(&src, &guide, &mcfg, &tcfg, &ckpt)?;
            (o.sr, o.report)
        }
        DType::F64 => {
            let o = train_typed::<f64>(&src, &guide, &mcfg, &tcfg, &ckpt)?;
            (o.sr, o.report)
        }
    };
    image::save(&a.out, &sr)?;
    fs::write(&log, report.log_text())?;
    let gt_rmse = gt.as_ref().map(|g| rmse(&sr, g)).transpose()?;

    manifest.model = Some(mcfg);
    manifest.train = Some(tcfg);
    manifest.seed = Some(a.seed);
    for (role, p) in [("source", &a.source), ("guide", &a.guide), ("out", &a.out), ("ckpt", &ckpt), ("log", &log)] {
        manifest.path(role, p)?;
    }
    if let Some(p) = &a.gt {
        manifest.path("gt", p)?;
    }
    manifest.summary = json!({
        "final_loss": report.final_loss(),
        "final_residual": report.final_residual,
        "rmse": gt_rmse,
        "wall_seconds": report.wall_seconds,
    });
    manifest.finish(&sidecar(&a.out, "manifest.json"))?;

    let loss = report.final_loss().map_or("n/a".to_string(), |l| format!("{l:.6e}"));
    let mut line = format!("final_loss {loss} residual {:.6e} wall_seconds {:.2}", report.final_residual, report.wall_seconds);
    if let Some(r) = gt_rmse {
        line += &format!(" rmse {r}");
    }
    println!("{line}");
    Ok(0)
}

#[derive(Args, Serialize)]
pub struct ReplayArgs {
    /// Manifest written by `mmsr sr`.
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint override; defaults to the one named in the manifest.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn replay_typed<T: Scalar>(bytes: &[u8], src: &Image, guide: &Image, expect: &ModelConfig) -> Result<Image> {
    let params: ModelParams<T> = read_checkpoint(bytes)?;
    if params.config() != expect {
        return Err(Error::Argument("checkpoint config does not match the manifest".into()));
    }
    predict(&params, src, guide)
}

pub fn replay(a: ReplayArgs) -> Result<u8> {
    let m = RunManifest::load(&a.manifest)?;
    let (Some(mcfg), Some(tcfg)) = (m.model, m.train) else {
        return Err(Error::Argument(format!("{} is not an sr manifest", a.manifest.display())));
    };
    let path = |role: &str| {
        m.paths.get(role).cloned().ok_or_else(|| Error::Argument(format!("manifest has no {role} path")))
    };
    let ckpt = match a.ckpt {
        Some(p) => p,
        None => path("ckpt")?,
    };
    let src = image::load(path("source")?)?;
    let guide = image::load(path("guide")?)?;
    let bytes = fs::read(&ckpt)?;
    let sr = match tcfg.dtype {
        DType::F32 => replay_typed::<f32>(&bytes, &src, &guide, &mcfg)?,
        DType::F64 => replay_typed::<f64>(&bytes, &src, &guide, &mcfg)?,
    };
    image::save(&a.out, &sr)?;
    Ok(0)
}

#[derive(Args, Serialize)]
pub struct DownsampleArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    scale: usize,
    #[arg(long)]
    out: PathBuf,
}

pub fn downsample(a: DownsampleArgs) -> Result<u8> {
    let mut manifest = RunManifest::begin("downsample", &a)?;
    let img = image::load(&a.input)?;
    image::save(&a.out, &degrade_pool(&img, a.scale)?)?;
    manifest.path("in", &a.input)?;
    manifest.path("out", &a.out)?;
    manifest.finish(&sidecar(&a.out, "manifest.json"))?;
    Ok(0)
}

#[derive(Args, Serialize)]
pub struct NoiseArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    sigma255: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

pub fn noise(a: NoiseArgs) -> Result<u8> {
    let mut manifest = RunManifest::begin("noise", &a)?;
    let img = image::load(&a.input)?;
    image::save(&a.out, &add_gaussian_noise(&img, a.sigma255, a.seed)?)?;
    manifest.seed = Some(a.seed);
    manifest.path("in", &a.input)?;
    manifest.path("out", &a.out)?;
    manifest.finish(&sidecar(&a.out, "manifest.json"))?;
    Ok(0)
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Dynamic range for denormalization; defaults to that of `--a`.
    #[arg(long)]
    range: Option<f32>,
}

pub fn eval(a: EvalArgs) -> Result<u8> {
    let mut x = image::load(&a.a)?;
    let y = image::load(&a.b)?;
    if let Some(r) = a.range {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::Argument(format!("range must be positive, got {r}")));
        }
        x = x.with_dynamic_range(r);
    }
    println!("{}", rmse(&x, &y)?);
    Ok(0)
}

#[derive(Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 4)]
    scale: usize,
    /// Number of pairs, with consecutive seeds.
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

pub fn synth(a: SynthArgs) -> Result<u8> {
    let mut manifest = RunManifest::begin("synth", &a)?;
    fs::create_dir_all(&a.out_dir)?;
    for k in 0..a.count as u64 {
        let seed = a.seed + k;
        let pair = synth_pair(seed, a.size, a.scale)?;
        let dir = a.out_dir.join(format!("pair_{seed:04}"));
        fs::create_dir_all(&dir)?;
        image::save(dir.join("lr.f32r"), &pair.lr)?;
        image::save(dir.join("gt.f32r"), &pair.gt)?;
        image::save(dir.join("guide.ppm"), &pair.guide)?;
        println!("{}", dir.display());
    }
    manifest.seed = Some(a.seed);
    manifest.path("out_dir", &a.out_dir)?;
    manifest.finish(&a.out_dir.join("synth.manifest.json"))?;
    Ok(0)
}

#[derive(Args, Serialize)]
pub struct AblateArgs {
    /// Directory of subdirectories, each holding `lr.*`, `guide.*` and `gt.*`.
    #[arg(long)]
    pairs_dir: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "model0,model1,model2,model3")]
    variants: Vec<Variant>,
    #[arg(long, default_value_t = 11)]
    n: usize,
    #[arg(long, default_value_t = 5)]
    m: usize,
    /// Extra Model3 rows, one per guide-side window size.
    #[arg(long, value_delimiter = ',')]
    m_sweep: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    channels: usize,
    #[arg(long, default_value_t = 4)]
    scale: usize,
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "f32")]
    dtype: DType,
    #[arg(long)]
    out_csv: PathBuf,
}

fn find_role(dir: &Path, stem: &str) -> Result<PathBuf> {
    let mut hits: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_stem().is_some_and(|s| s == stem) && Format::from_path(p).is_ok())
        .collect();
    hits.sort();
    hits.into_iter()
        .next()
        .ok_or_else(|| Error::Argument(format!("{} has no {stem} image", dir.display())))
}

fn load_pairs(root: &Path) -> Result<Vec<AblationPair>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Argument(format!("{} contains no pair directories", root.display())));
    }
    dirs.iter()
        .map(|d| {
            let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let load = |stem: &str| image::load(find_role(d, stem)?).map_err(|e| e.context(format!("pair {name}")));
            Ok(AblationPair { lr: load("lr")?, guide: load("guide")?, gt: load("gt")?, name })
        })
        .collect()
}

pub fn ablate(a: AblateArgs) -> Result<u8> {
    let mut manifest = RunManifest::begin("ablate", &a)?;
    let pairs = load_pairs(&a.pairs_dir)?;
    let base = ModelConfig { variant: Variant::Model3, n: a.n, m: a.m, channels: a.channels, scale: a.scale };
    let tcfg = TrainConfig { epochs: a.epochs, seed: a.seed, dtype: a.dtype, log_every: 0, ..TrainConfig::default() };
    let rows = run_ablation(&pairs, &a.variants, &a.m_sweep, &base, &tcfg)?;
    let csv = ablation_csv(&rows);
    fs::write(&a.out_csv, &csv)?;
    print!("{csv}");
    manifest.model = Some(base);
    manifest.train = Some(tcfg);
    manifest.seed = Some(a.seed);
    manifest.path("pairs_dir", &a.pairs_dir)?;
    manifest.path("out_csv", &a.out_csv)?;
    manifest.summary = serde_json::to_value(&rows).map_err(|e| Error::State(e.to_string()))?;
    manifest.finish(&sidecar(&a.out_csv, "manifest.json"))?;
    Ok(0)
}

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "1,3,5,7,11")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    channels: usize,
    /// Edge length of the square feature maps.
    #[arg(long, default_value_t = 128)]
    hw: usize,
    /// Timed repetitions; the best is reported.
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

pub fn bench(a: BenchArgs) -> Result<u8> {
    println!("size channels hw naive_px_per_s fused_px_per_s speedup");
    for &size in &a.sizes {
        let r = bench_modulation(a.channels, a.hw, size, a.reps, a.seed)?;
        println!(
            "{} {} {} {:.0} {:.0} {:.2}",
            r.size, r.channels, r.hw, r.naive_px_per_s, r.fused_px_per_s, r.speedup()
        );
    }
    Ok(0)
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random configurations per op.
    #[arg(long, default_value_t = 20)]
    configs: usize,
}

pub fn gradcheck(a: GradcheckArgs) -> Result<u8> {
    let report = run_suite(a.seed, a.configs)?;
    println!("op configs worst_rel_err status");
    for r in &report.results {
        println!("{} {} {:.3e} {}", r.op, r.configs, r.worst_rel_err, if r.passed() { "ok" } else { "FAIL" });
    }
    println!("seconds {:.2}", report.seconds);
    if report.passed() {
        return Ok(0);
    }
    for r in report.failing() {
        eprintln!(
            "mmsr: gradcheck failed: {} relative error {:.3e} exceeds {TOLERANCE:e} ({})",
            r.op, r.worst_rel_err, r.worst_label
        );
    }
    Ok(5)
}
