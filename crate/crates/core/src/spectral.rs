//! Singular spectra, effective rank and commutator norms.
//!
//! Everything here works on `f64` matrices. Randomized sketches draw from a ChaCha stream
//! keyed by `(seed, stream)`, so a layer's sketch does not depend on which thread runs it or
//! in what order layers are visited.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LarvError, Result};

pub type Matrix = DMatrix<f64>;

/// Normalized energies below this are dropped from the entropy sum.
pub const ENERGY_FLOOR: f64 = 1e-15;

/// Singular values in non-increasing order.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub values: Vec<f64>,
    /// `true` when every singular value was computed, `false` for a truncated sketch.
    pub exact: bool,
}

impl Spectrum {
    fn from_unsorted(mut values: Vec<f64>, exact: bool) -> Self {
        values.iter_mut().for_each(|v| *v = v.max(0.0));
        values.sort_by(|a, b| b.total_cmp(a));
        Self { values, exact }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn largest(&self) -> f64 {
        self.values.first().copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SvdMode {
    /// Exact below the size threshold, randomized above it.
    #[default]
    Auto,
    Exact,
    Randomized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvdConfig {
    pub mode: SvdMode,
    /// Target rank of the randomized sketch.
    pub rank: usize,
    pub oversample: usize,
    /// In `Auto` mode, matrices with `min(m, n)` at most this use the exact SVD.
    pub exact_threshold: usize,
}

impl Default for SvdConfig {
    fn default() -> Self {
        Self {
            mode: SvdMode::Auto,
            rank: 64,
            oversample: 10,
            exact_threshold: 128,
        }
    }
}

impl SvdConfig {
    pub fn exact() -> Self {
        Self {
            mode: SvdMode::Exact,
            ..Self::default()
        }
    }

    pub fn randomized(rank: usize, oversample: usize) -> Self {
        Self {
            mode: SvdMode::Randomized,
            rank,
            oversample,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(LarvError::InvalidParameter("svd rank must be at least 1".into()));
        }
        Ok(())
    }

    fn uses_exact(&self, rows: usize, cols: usize) -> bool {
        match self.mode {
            SvdMode::Exact => true,
            SvdMode::Randomized => false,
            SvdMode::Auto => rows.min(cols) <= self.exact_threshold,
        }
    }
}

/// Seed plus stream id for one sketch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SketchSeed {
    pub seed: u64,
    pub stream: u64,
}

impl SketchSeed {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    pub fn rng(self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

pub fn matrix_from_f32(rows: usize, cols: usize, data: &[f32]) -> Matrix {
    Matrix::from_iterator(cols, rows, data.iter().map(|&v| v as f64)).transpose()
}

pub fn matrix_from_f64(rows: usize, cols: usize, data: &[f64]) -> Matrix {
    Matrix::from_row_slice(rows, cols, data)
}

/// Row-major copy of `m`.
pub fn to_row_major(m: &Matrix) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn check_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LarvError::NonFinite(what.to_string()))
    }
}

/// All `min(m, n)` singular values.
pub fn exact_svd(m: &Matrix) -> Result<Spectrum> {
    check_finite(m, "matrix passed to exact_svd")?;
    let values = m.singular_values();
    Ok(Spectrum::from_unsorted(values.iter().copied().collect(), true))
}

/// Top-`k` singular values from a Gaussian range sketch of width
/// `min(k + oversample, min(m, n))`, without power iterations.
pub fn randomized_svd(m: &Matrix, k: usize, oversample: usize, seed: u64) -> Result<Spectrum> {
    randomized_svd_with(m, k, oversample, SketchSeed::new(seed, 0))
}

pub fn randomized_svd_with(
    m: &Matrix,
    k: usize,
    oversample: usize,
    seed: SketchSeed,
) -> Result<Spectrum> {
    let (rows, cols) = m.shape();
    let max_rank = rows.min(cols);
    if k == 0 || k > max_rank {
        return Err(LarvError::RankOutOfRange { k, max: max_rank });
    }
    check_finite(m, "matrix passed to randomized_svd")?;
    let width = (k + oversample).min(max_rank);

    let mut rng = seed.rng();
    let omega = Matrix::from_fn(cols, width, |_, _| rng.sample::<f64, _>(StandardNormal));
    let sketch = m * omega;
    let q = sketch.qr().q();
    let projected = q.transpose() * m;
    let mut spectrum = Spectrum::from_unsorted(projected.singular_values().iter().copied().collect(), false);
    spectrum.values.truncate(k);
    spectrum.exact = k == max_rank;
    Ok(spectrum)
}

/// Spectrum according to `config`. Randomized requests are clamped to `min(m, n)`.
pub fn spectrum(m: &Matrix, config: &SvdConfig, seed: SketchSeed) -> Result<Spectrum> {
    let (rows, cols) = m.shape();
    if config.uses_exact(rows, cols) {
        exact_svd(m)
    } else {
        let k = config.rank.min(rows.min(cols));
        randomized_svd_with(m, k, config.oversample, seed)
    }
}

/// Shannon entropy (nats) of the normalized energies `sigma_j^2 / sum sigma^2`.
///
/// For a truncated spectrum the energies are normalized over the captured values.
pub fn spectral_entropy(s: &Spectrum) -> Result<f64> {
    let total: f64 = s.values.iter().map(|v| v * v).sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(LarvError::ZeroSpectrum);
    }
    let h: f64 = s
        .values
        .iter()
        .map(|v| v * v / total)
        .filter(|&p| p >= ENERGY_FLOOR)
        .map(|p| -p * p.ln())
        .sum();
    Ok(h.max(0.0))
}

/// `exp` of the spectral entropy, clamped to `[1, #nonzero singular values]`.
pub fn effective_rank_of(s: &Spectrum) -> Result<f64> {
    let h = spectral_entropy(s)?;
    let total: f64 = s.values.iter().map(|v| v * v).sum();
    let support = s
        .values
        .iter()
        .filter(|v| *v * *v / total >= ENERGY_FLOOR)
        .count()
        .max(1);
    Ok(h.exp().clamp(1.0, support as f64))
}

pub fn effective_rank(m: &Matrix, config: &SvdConfig, seed: SketchSeed) -> Result<f64> {
    effective_rank_of(&spectrum(m, config, seed)?)
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.norm()
}

/// `||AB - BA||_F` for square matrices.
pub fn commutator_norm(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() || !a.is_square() {
        return Err(LarvError::ShapeMismatch(format!(
            "commutator needs equal square shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok((a * b - b * a).norm())
}

/// `(||AB^T - BA^T||_F, ||A^T B - B^T A||_F)`.
pub fn gram_commutator_norms(a: &Matrix, b: &Matrix) -> Result<(f64, f64)> {
    if a.shape() != b.shape() {
        return Err(LarvError::ShapeMismatch(format!(
            "gram commutator needs equal shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let left = outer_antisym_norm(a, b);
    let right = outer_antisym_norm(&a.transpose(), &b.transpose());
    Ok((left, right))
}

/// `||A B^T - B A^T||_F` for `A, B` of shape `m x n`.
///
/// When `m > 2n` the `m x m` product is avoided: with `[A | B] = QR` (thin), the norm equals
/// `||Ra Rb^T - Rb Ra^T||_F` on the `2n x 2n` factor, costing `O(m n^2)` instead of `O(m^2 n)`.
fn outer_antisym_norm(a: &Matrix, b: &Matrix) -> f64 {
    let (m, n) = a.shape();
    if m <= 2 * n {
        let x = a * b.transpose();
        return (&x - x.transpose()).norm();
    }
    let mut stacked = Matrix::zeros(m, 2 * n);
    stacked.columns_mut(0, n).copy_from(a);
    stacked.columns_mut(n, n).copy_from(b);
    let r = stacked.qr().r();
    let ra = r.columns(0, n);
    let rb = r.columns(n, n);
    let x = ra * rb.transpose();
    (&x - x.transpose()).norm()
}
