//! The super-resolution network and its ablation variants.
//!
//! Every variant shares the two feature branches and the prediction head:
//!
//! - source branch on the bilinearly upsampled source: two 1×1 convs, two
//!   residual blocks of 1×1 convs (1 → C channels)
//! - guide branch on the guide image: two 3×3 convs, two residual blocks of
//!   3×3 convs (3 → C channels)
//! - prediction head: three residual blocks of 1×1 convs, then a 1×1 conv to
//!   one channel
//!
//! They differ in how the branch features are combined before the head; see
//! [`Variant`].

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::modulation::{g2s_modulate, s2g_modulate, self_modulate, Domain, FeatureMap};
use crate::tensor::{DType, Scalar, Tensor};

/// How source and guide features meet before the prediction head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// No modulation: fuse the raw branch features.
    Model0,
    /// Guide-to-source modulation only.
    Model1,
    /// Source-to-guide modulation only.
    Model2,
    /// Mutual modulation (the full model).
    Model3,
    /// Learned `n×n` / `m×m` convolutions in place of the adaptive filters.
    Model4,
    /// Concatenate the branch features and fuse them with one `n×n` convolution.
    Model5,
    /// Self-targeted (non-local style) filters in place of the cross-domain ones.
    Model6,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Model0,
        Variant::Model1,
        Variant::Model2,
        Variant::Model3,
        Variant::Model4,
        Variant::Model5,
        Variant::Model6,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        ["model0", "model1", "model2", "model3", "model4", "model5", "model6"][self as usize]
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        if lower == "mmsr" {
            return Ok(Variant::Model3);
        }
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == lower)
            .ok_or_else(|| Error::arg(format!("unknown variant {s:?} (expected model0..model6 or mmsr)")))
    }
}

/// Architecture settings. `n` and `m` are the source-to-guide and
/// guide-to-source neighborhood sizes of Model1–3. Model4–6 use `n` alone:
/// both learned filter kernels (Model4), the fusion kernel (Model5), and
/// both self-filter windows (Model6).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub n: usize,
    pub m: usize,
    pub channels: usize,
    pub scale: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { variant: Variant::Model3, n: 11, m: 5, channels: 64, scale: 4 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("n", self.n), ("m", self.m)] {
            if v == 0 || v % 2 == 0 {
                return Err(Error::Config(format!("neighborhood size {name}={v} must be odd and at least 1")));
            }
        }
        if self.channels == 0 {
            return Err(Error::Config("channel width must be at least 1".into()));
        }
        if self.scale < 2 {
            return Err(Error::Config(format!("scale factor must be at least 2, got {}", self.scale)));
        }
        Ok(())
    }

    pub fn with_variant(self, variant: Variant) -> Self {
        ModelConfig { variant, ..self }
    }
}

/// One convolution layer of the inventory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

/// Convolution layers in build order; a pure function of the config.
pub fn layer_inventory(cfg: &ModelConfig) -> Vec<ConvSpec> {
    let c = cfg.channels;
    let mut layers = Vec::new();
    let mut conv = |name: &str, c_in, c_out, k| layers.push(ConvSpec { name: name.to_string(), c_in, c_out, k });
    for (branch, c0, k) in [("src", 1, 1), ("guide", 3, 3)] {
        conv(&format!("{branch}.conv1"), c0, c, k);
        conv(&format!("{branch}.conv2"), c, c, k);
        for r in 1..=2 {
            conv(&format!("{branch}.res{r}.conv1"), c, c, k);
            conv(&format!("{branch}.res{r}.conv2"), c, c, k);
        }
    }
    match cfg.variant {
        Variant::Model4 => {
            conv("src.filter", c, c, cfg.n);
            conv("guide.filter", c, c, cfg.n);
            conv("fuse", 2 * c, c, 1);
        }
        Variant::Model5 => conv("fuse", 2 * c, c, cfg.n),
        _ => conv("fuse", 2 * c, c, 1),
    }
    for r in 1..=3 {
        conv(&format!("pred.res{r}.conv1"), c, c, 1);
        conv(&format!("pred.res{r}.conv2"), c, c, 1);
    }
    conv("pred.out", c, 1, 1);
    layers
}

/// Named parameter tensors in inventory order (`<layer>.weight`, `<layer>.bias`).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Fan-in scaled uniform weights (bound `1/√fan_in`), zero biases.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for layer in layer_inventory(&config) {
            let fan_in = layer.c_in * layer.k * layer.k;
            let bound = 1.0 / (fan_in as f64).sqrt();
            let shape = [layer.c_out, layer.c_in, layer.k, layer.k];
            tensors.push(Tensor::from_fn(&shape, |_| T::lit(rng.random_range(-bound..bound))));
            names.push(format!("{}.weight", layer.name));
            tensors.push(Tensor::zeros(&[layer.c_out]));
            names.push(format!("{}.bias", layer.name));
        }
        Ok(ModelParams { config, names, tensors })
    }

    pub fn from_parts(config: ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let mut expected = Vec::new();
        for layer in layer_inventory(&config) {
            expected.push((format!("{}.weight", layer.name), vec![layer.c_out, layer.c_in, layer.k, layer.k]));
            expected.push((format!("{}.bias", layer.name), vec![layer.c_out]));
        }
        if named.len() != expected.len() {
            return Err(Error::Config(format!(
                "{} parameter tensors given, {} expected for {}",
                named.len(),
                expected.len(),
                config.variant
            )));
        }
        for ((name, t), (want_name, want_shape)) in named.iter().zip(&expected) {
            if name != want_name || t.shape() != want_shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {name} {:?} does not match expected {want_name} {want_shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::numeric(name.clone(), "non-finite parameter"));
            }
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(ModelParams { config, names, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config,
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Places every tensor on the graph as a leaf.
    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> BoundParams {
        let vars: Vec<Var> = self.tensors.iter().map(|t| g.leaf(t.clone(), requires_grad)).collect();
        let index = self.names.iter().cloned().zip(0..).collect();
        BoundParams { vars, index }
    }

    /// Addresses existing graph handles, given in tensor order, by layer name.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<BoundParams> {
        if vars.len() != self.tensors.len() {
            return Err(Error::arg(format!("{} handles given for {} parameters", vars.len(), self.tensors.len())));
        }
        let index = self.names.iter().cloned().zip(0..).collect();
        Ok(BoundParams { vars, index })
    }
}

/// Parameters placed on a graph, addressable by layer name.
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    /// Graph handles in the same order as [`ModelParams::tensors`].
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn conv(&self, layer: &str) -> Result<(Var, Var)> {
        let find = |suffix: &str| {
            self.index
                .get(&format!("{layer}.{suffix}"))
                .map(|&i| self.vars[i])
                .ok_or_else(|| Error::Config(format!("missing parameter {layer}.{suffix}")))
        };
        Ok((find("weight")?, find("bias")?))
    }
}

fn conv_layer<T: Scalar>(g: &mut Graph<T>, p: &BoundParams, layer: &str, x: Var) -> Result<Var> {
    let (w, b) = p.conv(layer)?;
    g.conv2d(x, w, b).map_err(|e| e.context(format!("layer {layer}")))
}

/// `x + conv2(relu(conv1(x)))`.
pub fn residual_block<T: Scalar>(g: &mut Graph<T>, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let h = conv_layer(g, p, &format!("{prefix}.conv1"), x)?;
    let h = g.relu(h).map_err(|e| e.context(format!("layer {prefix}.relu")))?;
    let h = conv_layer(g, p, &format!("{prefix}.conv2"), h)?;
    g.add(x, h).map_err(|e| e.context(format!("layer {prefix}.skip")))
}

fn branch<T: Scalar>(g: &mut Graph<T>, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let x = conv_layer(g, p, &format!("{name}.conv1"), x)?;
    let x = conv_layer(g, p, &format!("{name}.conv2"), x)?;
    let x = residual_block(g, p, &format!("{name}.res1"), x)?;
    residual_block(g, p, &format!("{name}.res2"), x)
}

/// Channel concatenation followed by the `fuse` convolution.
pub fn fuse<T: Scalar>(g: &mut Graph<T>, p: &BoundParams, a: &FeatureMap, b: &FeatureMap) -> Result<Var> {
    if g.value(a.var).shape() != g.value(b.var).shape() {
        return Err(Error::arg(format!(
            "fuse: feature maps {:?} and {:?} differ",
            g.value(a.var).shape(),
            g.value(b.var).shape()
        )));
    }
    let cat = g.concat(a.var, b.var)?;
    conv_layer(g, p, "fuse", cat)
}

/// Intermediate handles of one forward pass.
pub struct ForwardTrace {
    pub upsampled: Var,
    pub source_features: FeatureMap,
    pub guide_features: FeatureMap,
    pub fused: Var,
    pub output: Var,
}

/// Runs the network on a `1×h×w` LR source and a `3×(h·s)×(w·s)` guide.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    source_lr: Var,
    guide: Var,
) -> Result<ForwardTrace> {
    cfg.validate()?;
    let (sc, sh, sw) = g.value(source_lr).dims3()?;
    let (gc, gh, gw) = g.value(guide).dims3()?;
    if sc != 1 || gc != 3 {
        return Err(Error::arg(format!("expected a 1-channel source and 3-channel guide, got {sc} and {gc}")));
    }
    if (gh, gw) != (sh * cfg.scale, sw * cfg.scale) {
        return Err(Error::arg(format!(
            "guide is {gh}×{gw} but the {sh}×{sw} source at scale {} needs {}×{}",
            cfg.scale,
            sh * cfg.scale,
            sw * cfg.scale
        )));
    }
    let upsampled = g.bilinear_upsample(source_lr, cfg.scale)?;
    let f_s = FeatureMap::new(branch(g, p, "src", upsampled)?, Domain::Source);
    let f_g = FeatureMap::new(branch(g, p, "guide", guide)?, Domain::Guide);

    let stage = |e: Error, what: &str| e.context(format!("layer {what}"));
    let fused = match cfg.variant {
        Variant::Model0 => fuse(g, p, &f_s, &f_g)?,
        Variant::Model1 => {
            let g2s = g2s_modulate(g, &f_g, &f_s, cfg.m).map_err(|e| stage(e, "g2s"))?;
            fuse(g, p, &f_s, &g2s)?
        }
        Variant::Model2 => {
            let s2g = s2g_modulate(g, &f_s, &f_g, cfg.n).map_err(|e| stage(e, "s2g"))?;
            fuse(g, p, &s2g, &f_g)?
        }
        Variant::Model3 => {
            let s2g = s2g_modulate(g, &f_s, &f_g, cfg.n).map_err(|e| stage(e, "s2g"))?;
            let g2s = g2s_modulate(g, &f_g, &f_s, cfg.m).map_err(|e| stage(e, "g2s"))?;
            fuse(g, p, &s2g, &g2s)?
        }
        Variant::Model4 => {
            let a = FeatureMap::new(conv_layer(g, p, "src.filter", f_s.var)?, Domain::Source);
            let b = FeatureMap::new(conv_layer(g, p, "guide.filter", f_g.var)?, Domain::Guide);
            fuse(g, p, &a, &b)?
        }
        Variant::Model5 => fuse(g, p, &f_s, &f_g)?,
        Variant::Model6 => {
            let s2s = self_modulate(g, &f_s, cfg.n).map_err(|e| stage(e, "s2s"))?;
            let g2g = self_modulate(g, &f_g, cfg.n).map_err(|e| stage(e, "g2g"))?;
            fuse(g, p, &s2s, &g2g)?
        }
    };
    let mut x = fused;
    for r in 1..=3 {
        x = residual_block(g, p, &format!("pred.res{r}"), x)?;
    }
    let output = conv_layer(g, p, "pred.out", x)?;
    Ok(ForwardTrace { upsampled, source_features: f_s, guide_features: f_g, fused, output })
}

/// Inference on images: returns the raw `1×H×W` prediction.
pub fn predict_tensor<T: Scalar>(params: &ModelParams<T>, source_lr: &Image, guide: &Image) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let s = g.input(source_lr.to_tensor());
    let gd = g.input(guide.to_tensor());
    let trace = forward(&mut g, &bound, params.config(), s, gd)?;
    Ok(g.value(trace.output).clone())
}

/// Inference on images: the SR source, clamped to the valid range.
pub fn predict<T: Scalar>(params: &ModelParams<T>, source_lr: &Image, guide: &Image) -> Result<Image> {
    Image::from_tensor(&predict_tensor(params, source_lr, guide)?, source_lr.dynamic_range())
}

const CKPT_MAGIC: &[u8; 8] = b"MMSRCKPT";
const CKPT_VERSION: u32 = 1;

/// Serializes parameters: magic, version, config record
/// (`variant u8, n, m, channels, scale` as `u32`), tensor count, then each
/// tensor as `name_len u32, name, dtype u8, rank u32, dims u32[], data`.
/// All integers and samples are little-endian.
pub fn write_checkpoint<T: Scalar>(mut w: impl Write, params: &ModelParams<T>) -> Result<()> {
    let cfg = params.config();
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    w.write_all(&[cfg.variant.code()])?;
    for v in [cfg.n, cfg.m, cfg.channels, cfg.scale, params.len()] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[dtype_code(T::DTYPE)])?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 8);
        for &v in t.data() {
            match T::DTYPE {
                DType::F32 => buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                DType::F64 => buf.extend_from_slice(&v.as_f64().to_le_bytes()),
            }
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn dtype_code(d: DType) -> u8 {
    match d {
        DType::F32 => 0,
        DType::F64 => 1,
    }
}

struct ByteReader {
    bytes: Vec<u8>,
    pos: usize,
}

impl ByteReader {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.pos, format!("truncated checkpoint while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

/// Reads a checkpoint, converting stored samples to `T`.
pub fn read_checkpoint<T: Scalar>(mut r: impl Read) -> Result<ModelParams<T>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut rd = ByteReader { bytes, pos: 0 };
    if rd.take(8, "magic")? != CKPT_MAGIC {
        return Err(Error::format(0, "not an MMSR checkpoint"));
    }
    let version = rd.u32("version")?;
    if version != CKPT_VERSION as usize {
        return Err(Error::format(8, format!("unsupported checkpoint version {version}")));
    }
    let at = rd.pos;
    let variant = Variant::from_code(rd.u8("variant")?)
        .ok_or_else(|| Error::format(at, "unknown variant code"))?;
    let config = ModelConfig {
        variant,
        n: rd.u32("n")?,
        m: rd.u32("m")?,
        channels: rd.u32("channels")?,
        scale: rd.u32("scale")?,
    };
    let count = rd.u32("tensor count")?;
    let mut named = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = rd.u32("name length")?;
        let at = rd.pos;
        let name = String::from_utf8(rd.take(len, "name")?.to_vec())
            .map_err(|_| Error::format(at, "parameter name is not UTF-8"))?;
        let at = rd.pos;
        let width = match rd.u8("dtype")? {
            0 => 4,
            1 => 8,
            other => return Err(Error::format(at, format!("unknown dtype code {other}"))),
        };
        let rank = rd.u32("rank")?;
        if rank > 8 {
            return Err(Error::format(rd.pos - 4, format!("implausible tensor rank {rank}")));
        }
        let dims = (0..rank).map(|_| rd.u32("dims")).collect::<Result<Vec<_>>>()?;
        let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::format(rd.pos, "tensor size overflows"))?;
        let raw = rd.take(numel.saturating_mul(width), "tensor data")?;
        let data: Vec<T> = if width == 4 {
            raw.chunks_exact(4).map(|b| T::lit(f32::from_le_bytes(b.try_into().unwrap()) as f64)).collect()
        } else {
            raw.chunks_exact(8).map(|b| T::lit(f64::from_le_bytes(b.try_into().unwrap()))).collect()
        };
        named.push((name, Tensor::new(&dims, data)?));
    }
    ModelParams::from_parts(config, named)
}
