//! Per-layer weight-only signals and the composite score.

use serde::{Deserialize, Serialize};

use crate::error::{LarvError, Result};
use crate::gates::Tier;
use crate::spectral::{
    commutator_norm, effective_rank, frobenius_norm, gram_commutator_norms, Matrix, SketchSeed,
    SvdConfig,
};

/// A delta whose Frobenius norm is at most this fraction of the base norm counts as zero.
pub const ZERO_DELTA_RTOL: f64 = 1e-12;

/// Standard deviations below this are treated as degenerate by [`standardize`].
pub const DEGENERATE_STD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreParams {
    /// Exponent on the effective-rank contrast.
    pub eta: f64,
    /// Exponent on the depth prior.
    pub rho: f64,
    /// Exponent on the conflict penalty.
    pub zeta: f64,
    pub eps: f64,
}

impl Default for ScoreParams {
    fn default() -> Self {
        Self {
            eta: 1.0,
            rho: 0.5,
            zeta: 1.0,
            eps: 1e-8,
        }
    }
}

impl ScoreParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eta", self.eta), ("rho", self.rho), ("zeta", self.zeta)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(LarvError::InvalidParameter(format!(
                    "{name} must be a finite non-negative number, got {v}"
                )));
            }
        }
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(LarvError::InvalidParameter(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// One row of the diagnostics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    pub layer: usize,
    /// Effective-rank contrast.
    pub e: f64,
    /// Commutator conflict coefficient.
    pub c: f64,
    /// Depth prior.
    pub r: f64,
    pub z_c: f64,
    /// Composite score.
    pub w: f64,
    /// Applied scale.
    pub s: f64,
    pub tier: Option<Tier>,
}

/// Options shared by the spectral parts of the diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SpectralOptions {
    pub svd: SvdConfig,
    pub seed: u64,
}

impl SpectralOptions {
    /// Sketch stream for one matrix: layer, view and role (base/delta) packed into 64 bits.
    /// `task` distinguishes per-task diagnostics; it is 0 for the merged delta.
    pub fn sketch_seed(&self, task: usize, layer: usize, view: usize, is_delta: bool) -> SketchSeed {
        let stream = ((task as u64) << 48)
            ^ ((layer as u64) << 24)
            ^ ((view as u64) << 1)
            ^ is_delta as u64;
        SketchSeed::new(self.seed, stream)
    }
}

fn check_aligned(base: &[Matrix], delta: &[Matrix]) -> Result<()> {
    if base.len() != delta.len() {
        return Err(LarvError::ShapeMismatch(format!(
            "group has {} base views but {} delta views",
            base.len(),
            delta.len()
        )));
    }
    if base.is_empty() {
        return Err(LarvError::Empty("layer group has no matrix views"));
    }
    for (i, (b, d)) in base.iter().zip(delta).enumerate() {
        if b.shape() != d.shape() {
            return Err(LarvError::ShapeMismatch(format!(
                "view {i}: base {:?} vs delta {:?}",
                b.shape(),
                d.shape()
            )));
        }
    }
    Ok(())
}

fn is_zero_delta(base_norm: f64, delta_norm: f64) -> bool {
    delta_norm == 0.0 || delta_norm <= ZERO_DELTA_RTOL * base_norm
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Effective-rank contrast of one view.
pub fn view_eer(
    base: &Matrix,
    delta: &Matrix,
    eps: f64,
    svd: &SvdConfig,
    base_seed: SketchSeed,
    delta_seed: SketchSeed,
) -> Result<f64> {
    let base_norm = frobenius_norm(base);
    if base_norm == 0.0 {
        return Err(LarvError::ZeroSpectrum);
    }
    if is_zero_delta(base_norm, frobenius_norm(delta)) {
        return Ok(0.0);
    }
    let rb = effective_rank(base, svd, base_seed)?;
    let rd = effective_rank(delta, svd, delta_seed)?;
    Ok(rb / (rd + eps))
}

/// Commutator conflict coefficient of one view: the plain commutator for square views, the
/// mean of the two normalized Gram-commutators otherwise.
pub fn view_ccc(base: &Matrix, delta: &Matrix, eps: f64) -> Result<f64> {
    let base_norm = frobenius_norm(base);
    let delta_norm = frobenius_norm(delta);
    if is_zero_delta(base_norm, delta_norm) {
        return Ok(0.0);
    }
    let denom = base_norm * delta_norm + eps;
    if base.is_square() {
        Ok(commutator_norm(base, delta)? / denom)
    } else {
        let (left, right) = gram_commutator_norms(base, delta)?;
        Ok(0.5 * left / denom + 0.5 * right / denom)
    }
}

/// Group effective-rank contrast: the mean of the per-view values.
///
/// `layer` is used for sketch streams and error messages.
pub fn eer(
    base: &[Matrix],
    delta: &[Matrix],
    eps: f64,
    spectral: &SpectralOptions,
    layer: usize,
) -> Result<f64> {
    Ok(mean(&eer_views(base, delta, eps, spectral, 0, layer)?))
}

pub(crate) fn eer_views(
    base: &[Matrix],
    delta: &[Matrix],
    eps: f64,
    spectral: &SpectralOptions,
    task: usize,
    layer: usize,
) -> Result<Vec<f64>> {
    check_aligned(base, delta)?;
    base.iter()
        .zip(delta)
        .enumerate()
        .map(|(v, (b, d))| {
            view_eer(
                b,
                d,
                eps,
                &spectral.svd,
                spectral.sketch_seed(task, layer, v, false),
                spectral.sketch_seed(task, layer, v, true),
            )
            .map_err(|e| match e {
                LarvError::ZeroSpectrum if frobenius_norm(b) == 0.0 => LarvError::ZeroBase { layer },
                other => other,
            })
        })
        .collect()
}

/// Group commutator conflict coefficient: the mean of the per-view values.
pub fn ccc(base: &[Matrix], delta: &[Matrix], eps: f64) -> Result<f64> {
    Ok(mean(&ccc_views(base, delta, eps)?))
}

pub(crate) fn ccc_views(base: &[Matrix], delta: &[Matrix], eps: f64) -> Result<Vec<f64>> {
    check_aligned(base, delta)?;
    base.iter().zip(delta).map(|(b, d)| view_ccc(b, d, eps)).collect()
}

/// Normalized layer index `layer / total`.
pub fn depth_prior(layer: usize, total: usize) -> Result<f64> {
    if layer == 0 || layer > total {
        return Err(LarvError::LayerOutOfRange { layer, total });
    }
    Ok(layer as f64 / total as f64)
}

/// Z-scores with the population standard deviation. A degenerate spread maps everything to 0.
pub fn standardize(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(LarvError::Empty("standardize needs at least one value"));
    }
    let mu = mean(values);
    let var = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / values.len() as f64;
    let sd = var.sqrt();
    if !(sd >= DEGENERATE_STD) {
        return Ok(vec![0.0; values.len()]);
    }
    Ok(values.iter().map(|v| (v - mu) / sd).collect())
}

/// `log(1 + e^t)` without overflow.
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// `e^eta * r^rho / (softplus(z_c) + 1)^zeta`.
pub fn composite_score(e: f64, r: f64, z_c: f64, params: &ScoreParams) -> f64 {
    e.powf(params.eta) * r.powf(params.rho) / (softplus(z_c) + 1.0).powf(params.zeta)
}
