//! Central finite-difference checks of every differentiable operation.
//!
//! Each case projects the op output onto a random fixed tensor, so the scalar
//! loss is linear in the output and exercises every output element. Inputs to
//! piecewise-linear ops are drawn away from their kinks.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::modulation::{composed_modulate, g2s_modulate, s2g_modulate, self_modulate, Domain, FeatureMap};
use crate::network::{forward, fuse, residual_block, ModelConfig, ModelParams, Variant};
use crate::tensor::Tensor;

/// Relative error bound for a passing check.
pub const TOLERANCE: f64 = 1e-4;
/// Central-difference step for single ops.
pub const STEP: f64 = 1e-5;
/// Step for whole-network cases, whose many relu inputs cannot all be kept
/// away from zero.
pub const NETWORK_STEP: f64 = 1e-7;

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// One randomized instance: the inputs to differentiate and the op applied to them.
pub struct Case {
    pub label: String,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Build,
    /// Entries probed per input tensor; the rest are skipped.
    pub probes_per_input: usize,
    pub step: f64,
}

/// Worst relative error of one op over all its configurations.
#[derive(Clone, Debug, PartialEq)]
pub struct OpResult {
    pub op: &'static str,
    pub configs: usize,
    pub failures: usize,
    pub worst_rel_err: f64,
    pub worst_label: String,
}

impl OpResult {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub results: Vec<OpResult>,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(OpResult::passed)
    }

    pub fn failing(&self) -> impl Iterator<Item = &OpResult> {
        self.results.iter().filter(|r| !r.passed())
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Magnitudes in `[0.05, 1]` with random sign.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> (usize, usize) {
    (rng.random_range(lo..=hi), rng.random_range(lo..=hi))
}

fn eval_loss(case: &Case, inputs: &[Tensor<f64>], proj: &Tensor<f64>) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let y = (case.build)(&mut g, &vars)?;
    let loss = g.dot_const(y, proj)?;
    g.value(loss).item()
}

/// Largest relative error between analytic and central-difference gradients.
///
/// The relative error of one entry is `|a − n| / max(|a|, |n|, 1e-3·s)`, where
/// `s` is the largest numeric gradient magnitude in the case.
pub fn check_case(case: &Case, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = (case.build)(&mut g, &vars)?;
    let proj = uniform(rng, g.value(y).shape());
    let loss = g.dot_const(y, &proj)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(&case.inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut pairs = Vec::new();
    let mut work = case.inputs.clone();
    for (ti, t) in case.inputs.iter().enumerate() {
        let n = t.numel();
        let picks: Vec<usize> = if n <= case.probes_per_input {
            (0..n).collect()
        } else {
            (0..case.probes_per_input).map(|_| rng.random_range(0..n)).collect()
        };
        for i in picks {
            let orig = t.data()[i];
            work[ti].data_mut()[i] = orig + case.step;
            let plus = eval_loss(case, &work, &proj)?;
            work[ti].data_mut()[i] = orig - case.step;
            let minus = eval_loss(case, &work, &proj)?;
            work[ti].data_mut()[i] = orig;
            pairs.push((analytic[ti].data()[i], (plus - minus) / (2.0 * case.step)));
        }
    }
    let scale = pairs.iter().fold(0.0f64, |m, &(_, n)| m.max(n.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    Ok(pairs.iter().fold(0.0f64, |worst, &(a, n)| worst.max((a - n).abs() / a.abs().max(n.abs()).max(floor))))
}

fn case(label: String, inputs: Vec<Tensor<f64>>, build: Build) -> Case {
    Case { label, inputs, build, probes_per_input: 48, step: STEP }
}

type Generator = fn(&mut ChaCha8Rng) -> Result<Case>;

fn gen_conv2d(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (ci, co) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let k = [1, 3, 5][rng.random_range(0..3)];
    let (h, w) = dims(rng, 2, 6);
    let inputs = vec![uniform(rng, &[ci, h, w]), uniform(rng, &[co, ci, k, k]), uniform(rng, &[co])];
    Ok(case(format!("c_in={ci} c_out={co} k={k} {h}×{w}"), inputs, Box::new(|g, v| g.conv2d(v[0], v[1], v[2]))))
}

fn gen_relu(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (h, w) = dims(rng, 1, 6);
    let c = rng.random_range(1..=3);
    Ok(case(format!("{c}×{h}×{w}"), vec![off_zero(rng, &[c, h, w])], Box::new(|g, v| g.relu(v[0]))))
}

fn gen_add(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (h, w) = dims(rng, 1, 6);
    let c = rng.random_range(1..=3);
    let inputs = vec![uniform(rng, &[c, h, w]), uniform(rng, &[c, h, w])];
    Ok(case(format!("{c}×{h}×{w}"), inputs, Box::new(|g, v| g.add(v[0], v[1]))))
}

fn gen_concat(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (h, w) = dims(rng, 1, 6);
    let (ca, cb) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let inputs = vec![uniform(rng, &[ca, h, w]), uniform(rng, &[cb, h, w])];
    Ok(case(format!("{ca}+{cb}×{h}×{w}"), inputs, Box::new(|g, v| g.concat(v[0], v[1]))))
}

fn gen_upsample(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (h, w) = dims(rng, 1, 4);
    let (c, f) = (rng.random_range(1..=2), rng.random_range(2..=4));
    Ok(case(
        format!("{c}×{h}×{w} factor {f}"),
        vec![uniform(rng, &[c, h, w])],
        Box::new(move |g, v| g.bilinear_upsample(v[0], f)),
    ))
}

fn gen_pool(rng: &mut ChaCha8Rng) -> Result<Case> {
    let f = rng.random_range(2..=3);
    let (h, w) = dims(rng, 1, 3);
    let c = rng.random_range(1..=2);
    Ok(case(
        format!("{c}×{}×{} factor {f}", h * f, w * f),
        vec![uniform(rng, &[c, h * f, w * f])],
        Box::new(move |g, v| g.avg_pool_down(v[0], f)),
    ))
}

fn gen_softmax(rng: &mut ChaCha8Rng) -> Result<Case> {
    let l = rng.random_range(1..=9);
    let (h, w) = dims(rng, 1, 4);
    Ok(case(format!("L={l} {h}×{w}"), vec![Tensor::from_fn(&[l, h, w], |_| rng.random_range(-3.0..3.0))], Box::new(|g, v| g.softmax(v[0]))))
}

fn gen_l1(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (h, w) = dims(rng, 1, 5);
    let c = rng.random_range(1..=2);
    let a = uniform(rng, &[c, h, w]);
    let gap = off_zero(rng, &[c, h, w]);
    let b = Tensor::new(&[c, h, w], a.data().iter().zip(gap.data()).map(|(x, d)| x + d).collect())?;
    Ok(case(format!("{c}×{h}×{w}"), vec![a, b], Box::new(|g, v| g.l1_loss(v[0], v[1]))))
}

fn gen_sum(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (h, w) = dims(rng, 1, 5);
    Ok(case(format!("{h}×{w}"), vec![uniform(rng, &[2, h, w])], Box::new(|g, v| g.sum(v[0]))))
}

fn gen_unfold(rng: &mut ChaCha8Rng) -> Result<Case> {
    let size = [1, 3, 5][rng.random_range(0..3)];
    let (h, w) = dims(rng, 1, 5);
    let c = rng.random_range(1..=3);
    Ok(case(
        format!("{c}×{h}×{w} size {size}"),
        vec![uniform(rng, &[c, h, w])],
        Box::new(move |g, v| g.unfold(v[0], size)),
    ))
}

fn gen_logits(rng: &mut ChaCha8Rng) -> Result<Case> {
    let l = [1, 9, 25][rng.random_range(0..3)];
    let (h, w) = dims(rng, 1, 4);
    let c = rng.random_range(1..=3);
    let inputs = vec![uniform(rng, &[c, l, h, w]), uniform(rng, &[c, h, w])];
    Ok(case(format!("C={c} L={l} {h}×{w}"), inputs, Box::new(|g, v| g.neighborhood_logits(v[0], v[1]))))
}

fn gen_aggregate(rng: &mut ChaCha8Rng) -> Result<Case> {
    let l = [1, 9, 25][rng.random_range(0..3)];
    let (h, w) = dims(rng, 1, 4);
    let c = rng.random_range(1..=3);
    let inputs = vec![uniform(rng, &[c, l, h, w]), uniform(rng, &[l, h, w])];
    Ok(case(format!("C={c} L={l} {h}×{w}"), inputs, Box::new(|g, v| g.neighborhood_aggregate(v[0], v[1]))))
}

fn modulation_inputs(rng: &mut ChaCha8Rng) -> (usize, Vec<Tensor<f64>>, String) {
    let size = [1, 3, 5, 7][rng.random_range(0..4)];
    let (h, w) = dims(rng, 1, 7);
    let c = rng.random_range(1..=4);
    (size, vec![uniform(rng, &[c, h, w]), uniform(rng, &[c, h, w])], format!("C={c} {h}×{w} size {size}"))
}

fn gen_s2g(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (size, inputs, label) = modulation_inputs(rng);
    Ok(case(
        label,
        inputs,
        Box::new(move |g, v| {
            let fs = FeatureMap::new(v[0], Domain::Source);
            let fg = FeatureMap::new(v[1], Domain::Guide);
            Ok(s2g_modulate(g, &fs, &fg, size)?.var)
        }),
    ))
}

fn gen_g2s(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (size, inputs, label) = modulation_inputs(rng);
    Ok(case(
        label,
        inputs,
        Box::new(move |g, v| {
            let fg = FeatureMap::new(v[0], Domain::Guide);
            let fs = FeatureMap::new(v[1], Domain::Source);
            Ok(g2s_modulate(g, &fg, &fs, size)?.var)
        }),
    ))
}

fn gen_self(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (size, mut inputs, label) = modulation_inputs(rng);
    inputs.truncate(1);
    Ok(case(
        label,
        inputs,
        Box::new(move |g, v| Ok(self_modulate(g, &FeatureMap::new(v[0], Domain::Source), size)?.var)),
    ))
}

fn gen_composed(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (size, inputs, label) = modulation_inputs(rng);
    Ok(case(
        label,
        inputs,
        Box::new(move |g, v| {
            composed_modulate(g, &FeatureMap::new(v[0], Domain::Source), &FeatureMap::new(v[1], Domain::Guide), size)
        }),
    ))
}

fn small_model(rng: &mut ChaCha8Rng, variant: Variant) -> Result<ModelParams<f64>> {
    let pick = |rng: &mut ChaCha8Rng| [1, 3, 5][rng.random_range(0..3)];
    let cfg = ModelConfig { variant, n: pick(rng), m: pick(rng), channels: rng.random_range(2..=4), scale: 2 };
    ModelParams::build(cfg, rng.random())
}

fn gen_residual(rng: &mut ChaCha8Rng) -> Result<Case> {
    let params = small_model(rng, Variant::Model0)?;
    let prefix = ["src.res1", "guide.res2", "pred.res3"][rng.random_range(0..3)];
    let c = params.config().channels;
    let (h, w) = dims(rng, 2, 5);
    let mut inputs = vec![off_zero(rng, &[c, h, w])];
    let names: Vec<String> = ["conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias"]
        .iter()
        .map(|s| format!("{prefix}.{s}"))
        .collect();
    for n in &names {
        inputs.push(params.get(n).ok_or_else(|| Error::State(format!("missing {n}")))?.clone());
    }
    let label = format!("{prefix} C={c} {h}×{w}");
    Ok(case(
        label,
        inputs,
        Box::new(move |g, v| {
            let mut all: Vec<Var> = params.tensors().iter().map(|t| g.input(t.clone())).collect();
            for (name, &var) in names.iter().zip(&v[1..]) {
                let i = params.names().iter().position(|n| n == name).expect("name exists");
                all[i] = var;
            }
            let bound = params.bind_vars(all)?;
            residual_block(g, &bound, prefix, v[0])
        }),
    ))
}

fn gen_fuse(rng: &mut ChaCha8Rng) -> Result<Case> {
    let params = small_model(rng, Variant::Model3)?;
    let c = params.config().channels;
    let (h, w) = dims(rng, 1, 5);
    let inputs = vec![
        uniform(rng, &[c, h, w]),
        uniform(rng, &[c, h, w]),
        params.get("fuse.weight").expect("fuse layer").clone(),
        params.get("fuse.bias").expect("fuse layer").clone(),
    ];
    Ok(case(
        format!("C={c} {h}×{w}"),
        inputs,
        Box::new(move |g, v| {
            let mut all: Vec<Var> = params.tensors().iter().map(|t| g.input(t.clone())).collect();
            let wi = params.names().iter().position(|n| n == "fuse.weight").expect("fuse layer");
            all[wi] = v[2];
            all[wi + 1] = v[3];
            let bound = params.bind_vars(all)?;
            fuse(g, &bound, &FeatureMap::new(v[0], Domain::Source), &FeatureMap::new(v[1], Domain::Guide))
        }),
    ))
}

fn gen_forward(rng: &mut ChaCha8Rng) -> Result<Case> {
    let variant = Variant::ALL[rng.random_range(0..Variant::ALL.len())];
    let params = small_model(rng, variant)?;
    let cfg = *params.config();
    let (h, w) = dims(rng, 2, 4);
    let mut inputs = params.tensors().to_vec();
    inputs.push(Tensor::from_fn(&[1, h, w], |_| rng.random_range(0.0..1.0)));
    let guide = Tensor::from_fn(&[3, h * cfg.scale, w * cfg.scale], |_| rng.random_range(0.0..1.0));
    let label = format!("{variant} n={} m={} C={} {h}×{w}", cfg.n, cfg.m, cfg.channels);
    let count = params.len();
    let mut c = case(
        label,
        inputs,
        Box::new(move |g, v| {
            let bound = params.bind_vars(v[..count].to_vec())?;
            let gd = g.input(guide.clone());
            Ok(forward(g, &bound, &cfg, v[count], gd)?.output)
        }),
    );
    c.probes_per_input = 3;
    c.step = NETWORK_STEP;
    Ok(c)
}

/// Op names and their case generators, in report order.
pub fn generators() -> Vec<(&'static str, Generator)> {
    vec![
        ("conv2d", gen_conv2d),
        ("relu", gen_relu),
        ("add", gen_add),
        ("concat", gen_concat),
        ("bilinear_upsample", gen_upsample),
        ("avg_pool_down", gen_pool),
        ("softmax", gen_softmax),
        ("l1_loss", gen_l1),
        ("sum", gen_sum),
        ("unfold", gen_unfold),
        ("neighborhood_logits", gen_logits),
        ("neighborhood_aggregate", gen_aggregate),
        ("s2g_modulate", gen_s2g),
        ("g2s_modulate", gen_g2s),
        ("self_modulate", gen_self),
        ("composed_modulate", gen_composed),
        ("residual_block", gen_residual),
        ("fuse", gen_fuse),
        ("forward", gen_forward),
    ]
}

/// Runs `configs_per_op` random cases for every op.
pub fn run_suite(seed: u64, configs_per_op: usize) -> Result<GradcheckReport> {
    let start = Instant::now();
    let mut results = Vec::new();
    for (k, (op, gen)) in generators().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((k as u64 + 1) << 32));
        let mut r = OpResult { op, configs: 0, failures: 0, worst_rel_err: 0.0, worst_label: String::new() };
        for _ in 0..configs_per_op {
            let c = gen(&mut rng)?;
            let err = check_case(&c, &mut rng).map_err(|e| e.context(format!("gradcheck {op} [{}]", c.label)))?;
            r.configs += 1;
            if err.is_nan() || err >= TOLERANCE {
                r.failures += 1;
            }
            if err.is_nan() || err > r.worst_rel_err {
                r.worst_rel_err = err;
                r.worst_label = c.label.clone();
            }
        }
        results.push(r);
    }
    Ok(GradcheckReport { results, seconds: start.elapsed().as_secs_f64() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // at the kink the subgradient 0 differs from the central difference 0.5
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = Case {
            label: "kink".into(),
            inputs: vec![Tensor::new(&[1, 1, 1], vec![0.0]).unwrap()],
            build: Box::new(|g, v| g.relu(v[0])),
            probes_per_input: 1,
            step: STEP,
        };
        assert!(check_case(&c, &mut rng).unwrap() > TOLERANCE);
    }

    #[test]
    fn small_suite_passes() {
        let report = run_suite(3, 2).unwrap();
        for r in &report.results {
            assert!(r.passed(), "{} failed: {:e} at {}", r.op, r.worst_rel_err, r.worst_label);
        }
    }
}
