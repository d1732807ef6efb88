//! Cross-domain adaptive filters.
//!
//! Source-to-guide modulation refilters every source feature pixel from its
//! `n×n` neighborhood, weighting neighbors by their softmax correlation with
//! the co-located guide pixel. Guide-to-source modulation is the mirror image
//! with an `m×m` guide neighborhood and the source pixel as target.
//! Self-modulation uses the map's own center pixel as target.
//!
//! Two routes compute the same thing: the fused [`Graph::modulate`] kernel,
//! and the composition [`unfold`] → weights → [`aggregate`]. The naive
//! per-pixel loop in [`reference`] is the conformance oracle for both.

pub(crate) mod kernel;
pub mod reference;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use reference::{reference_modulate, TargetMode};

/// Modality domain of a feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Guide,
    SourceToGuide,
    GuideToSource,
    /// Source filtered against itself (no cross-domain target).
    SourceToSource,
    /// Guide filtered against itself.
    GuideToGuide,
}

/// A `C×H×W` feature tensor on a graph, tagged with its domain.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub var: Var,
    pub domain: Domain,
}

impl FeatureMap {
    pub fn new(var: Var, domain: Domain) -> Self {
        FeatureMap { var, domain }
    }
}

/// `C×L×H×W` replicate-padded neighborhoods, `L = size²`.
#[derive(Clone, Copy, Debug)]
pub struct NeighborhoodStack {
    pub var: Var,
    pub size: usize,
}

/// `L×H×W` per-pixel filter weights; nonnegative, summing to one per pixel.
#[derive(Clone, Copy, Debug)]
pub struct FilterWeights {
    pub var: Var,
    pub size: usize,
}

pub fn unfold<T: Scalar>(g: &mut Graph<T>, f: &FeatureMap, size: usize) -> Result<NeighborhoodStack> {
    let var = g.unfold(f.var, size)?;
    Ok(NeighborhoodStack { var, size })
}

fn correlation_weights<T: Scalar>(
    g: &mut Graph<T>,
    stack: &NeighborhoodStack,
    target: &FeatureMap,
) -> Result<FilterWeights> {
    let logits = g.neighborhood_logits(stack.var, target.var)?;
    let var = g.softmax(logits)?;
    Ok(FilterWeights { var, size: stack.size })
}

/// `w = softmax(N_sᵀ g)` per pixel, for a source neighborhood stack and the guide map.
pub fn s2g_weights<T: Scalar>(g: &mut Graph<T>, n_s: &NeighborhoodStack, f_g: &FeatureMap) -> Result<FilterWeights> {
    correlation_weights(g, n_s, f_g)
}

/// `w = softmax(M_gᵀ s)` per pixel, for a guide neighborhood stack and the source map.
pub fn g2s_weights<T: Scalar>(g: &mut Graph<T>, m_g: &NeighborhoodStack, f_s: &FeatureMap) -> Result<FilterWeights> {
    correlation_weights(g, m_g, f_s)
}

/// Weighted combination `N · w` of each pixel's neighborhood.
pub fn aggregate<T: Scalar>(g: &mut Graph<T>, stack: &NeighborhoodStack, weights: &FilterWeights) -> Result<Var> {
    if stack.size != weights.size {
        return Err(Error::arg("filter weights and neighborhood stack use different window sizes"));
    }
    g.neighborhood_aggregate(stack.var, weights.var)
}

pub fn s2g_modulate<T: Scalar>(g: &mut Graph<T>, f_s: &FeatureMap, f_g: &FeatureMap, n: usize) -> Result<FeatureMap> {
    let var = g.modulate(f_s.var, f_g.var, n)?;
    Ok(FeatureMap::new(var, Domain::SourceToGuide))
}

pub fn g2s_modulate<T: Scalar>(g: &mut Graph<T>, f_g: &FeatureMap, f_s: &FeatureMap, m: usize) -> Result<FeatureMap> {
    let var = g.modulate(f_g.var, f_s.var, m)?;
    Ok(FeatureMap::new(var, Domain::GuideToSource))
}

/// Non-local style filtering where each pixel targets itself.
pub fn self_modulate<T: Scalar>(g: &mut Graph<T>, f: &FeatureMap, size: usize) -> Result<FeatureMap> {
    let var = g.modulate(f.var, f.var, size)?;
    let domain = match f.domain {
        Domain::Guide | Domain::GuideToSource | Domain::GuideToGuide => Domain::GuideToGuide,
        _ => Domain::SourceToSource,
    };
    Ok(FeatureMap::new(var, domain))
}

/// Unfused route: unfold, correlate, softmax, aggregate.
pub fn composed_modulate<T: Scalar>(
    g: &mut Graph<T>,
    filtered: &FeatureMap,
    target: &FeatureMap,
    size: usize,
) -> Result<Var> {
    let stack = unfold(g, filtered, size)?;
    let weights = correlation_weights(g, &stack, target)?;
    aggregate(g, &stack, &weights)
}

/// Fused filter on plain tensors, outside any graph.
/// Returns the filtered map and its `L×H×W` weights.
pub fn modulate_tensors<T: Scalar>(
    filtered: &Tensor<T>,
    target: &Tensor<T>,
    size: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let a = g.input(filtered.clone());
    let b = g.input(target.clone());
    let out = g.modulate(a, b, size)?;
    let weights = g.modulation_weights(out)?;
    Ok((g.value(out).clone(), weights))
}
