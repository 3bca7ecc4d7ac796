//! Timing harness for the diagnostics cost: growth in depth, in layer size and in sketch rank.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{view_ccc, view_eer, SpectralOptions};
use crate::error::Result;
use crate::spectral::{Matrix, SvdConfig, SvdMode};

/// Best-of-`repeats` timing of the diagnostics over `layers` random `rows x cols` layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexityProbe {
    pub layers: usize,
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    /// Effective-rank contrast plus commutator conflict, summed over layers.
    pub seconds: f64,
    /// Effective-rank contrast alone.
    pub spectral_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetCheck {
    pub description: String,
    pub observed: f64,
    pub limit: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetVerdict {
    pub checks: Vec<BudgetCheck>,
    pub pass: bool,
}

/// Runs the per-layer diagnostics sequentially with randomized spectra of rank `rank`.
pub fn measure_diagnostics(
    layers: usize,
    rows: usize,
    cols: usize,
    rank: usize,
    seed: u64,
    repeats: usize,
) -> Result<ComplexityProbe> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaussian = || Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
    let pairs: Vec<(Matrix, Matrix)> = (0..layers).map(|_| (gaussian(), gaussian())).collect();
    let opts = SpectralOptions {
        svd: SvdConfig {
            mode: SvdMode::Randomized,
            rank: rank.min(rows.min(cols)),
            ..SvdConfig::default()
        },
        seed,
    };

    let mut best = (f64::INFINITY, f64::INFINITY);
    for _ in 0..repeats.max(1) {
        let (mut spectral, mut total) = (0.0, 0.0);
        for (l, (b, d)) in pairs.iter().enumerate() {
            let t = Instant::now();
            std::hint::black_box(view_eer(
                b,
                d,
                1e-8,
                &opts.svd,
                opts.sketch_seed(0, l + 1, 0, false),
                opts.sketch_seed(0, l + 1, 0, true),
            )?);
            let s = t.elapsed().as_secs_f64();
            std::hint::black_box(view_ccc(b, d, 1e-8)?);
            spectral += s;
            total += t.elapsed().as_secs_f64();
        }
        best = (best.0.min(total), best.1.min(spectral));
    }
    Ok(ComplexityProbe {
        layers,
        rows,
        cols,
        rank,
        seconds: best.0,
        spectral_seconds: best.1,
    })
}

/// Compares every pair of probes that differ in exactly one respect:
///
/// - twice the layers: time at most `2 * slope_tolerance` times the smaller run;
/// - twice `rows * cols`: same bound;
/// - larger rank: spectral time not smaller.
///
/// With no comparable pair (for instance a single probe) the verdict passes.
pub fn complexity_budget_check(probes: &[ComplexityProbe], slope_tolerance: f64) -> BudgetVerdict {
    let mut checks = Vec::new();
    for a in probes {
        for b in probes {
            let same_shape = (a.rows, a.cols) == (b.rows, b.cols);
            if same_shape && a.rank == b.rank && b.layers == 2 * a.layers {
                let limit = 2.0 * slope_tolerance;
                let observed = b.seconds / a.seconds;
                checks.push(BudgetCheck {
                    description: format!(
                        "L {} -> {} at {}x{}, k={}",
                        a.layers, b.layers, a.rows, a.cols, a.rank
                    ),
                    observed,
                    limit,
                    pass: observed <= limit,
                });
            }
            if a.layers == b.layers && a.rank == b.rank && b.rows * b.cols == 2 * a.rows * a.cols {
                let limit = 2.0 * slope_tolerance;
                let observed = b.seconds / a.seconds;
                checks.push(BudgetCheck {
                    description: format!(
                        "m*n {}x{} -> {}x{} at L={}, k={}",
                        a.rows, a.cols, b.rows, b.cols, a.layers, a.rank
                    ),
                    observed,
                    limit,
                    pass: observed <= limit,
                });
            }
            if same_shape && a.layers == b.layers && b.rank > a.rank {
                let observed = b.spectral_seconds / a.spectral_seconds;
                checks.push(BudgetCheck {
                    description: format!(
                        "k {} -> {} at {}x{}, L={}",
                        a.rank, b.rank, a.rows, a.cols, a.layers
                    ),
                    observed,
                    limit: 1.0,
                    pass: observed >= 1.0,
                });
            }
        }
    }
    let pass = checks.iter().all(|c| c.pass);
    BudgetVerdict { checks, pass }
}
