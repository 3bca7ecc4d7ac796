//! Base merge rules over per-tensor task deltas.
//!
//! Deltas are `f64` slices of equal length. Per-entry sums run over values sorted by
//! `total_cmp`, so every rule gives the same bits for any task order.

use serde::{Deserialize, Serialize};

use crate::error::{LarvError, Result};
use crate::spectral::{matrix_from_f64, to_row_major};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeRule {
    Average,
    TaskArithmetic,
    Ties,
    IsoC,
}

impl MergeRule {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "average" | "avg" => Ok(MergeRule::Average),
            "task-arithmetic" | "ta" => Ok(MergeRule::TaskArithmetic),
            "ties" => Ok(MergeRule::Ties),
            "iso-c" | "isoc" => Ok(MergeRule::IsoC),
            other => Err(LarvError::InvalidConfig(format!("unknown merger `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MergeRule::Average => "average",
            MergeRule::TaskArithmetic => "task-arithmetic",
            MergeRule::Ties => "ties",
            MergeRule::IsoC => "iso-c",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergerSpec {
    pub rule: MergeRule,
    /// Global blend applied at composition (task arithmetic, TIES).
    #[serde(default = "default_coefficient")]
    pub coefficient: f64,
    /// Fraction of entries TIES keeps per task, by magnitude.
    #[serde(default = "default_trim")]
    pub trim_fraction: f64,
    /// Rescaling of the isotropized matrix (Iso-C).
    #[serde(default = "default_iso_scale")]
    pub iso_scale: f64,
}

fn default_coefficient() -> f64 {
    0.3
}

fn default_trim() -> f64 {
    0.2
}

fn default_iso_scale() -> f64 {
    1.3
}

impl MergerSpec {
    pub fn new(rule: MergeRule) -> Self {
        Self {
            rule,
            coefficient: default_coefficient(),
            trim_fraction: default_trim(),
            iso_scale: default_iso_scale(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.coefficient >= 0.0) || !self.coefficient.is_finite() {
            return Err(LarvError::InvalidParameter(format!(
                "merger coefficient must be non-negative, got {}",
                self.coefficient
            )));
        }
        if !(self.trim_fraction > 0.0 && self.trim_fraction <= 1.0) {
            return Err(LarvError::InvalidParameter(format!(
                "trim fraction must be in (0, 1], got {}",
                self.trim_fraction
            )));
        }
        if !self.iso_scale.is_finite() {
            return Err(LarvError::InvalidParameter("iso scale must be finite".into()));
        }
        Ok(())
    }

    /// Multiplier applied to the merged delta when composing with the base.
    pub fn composition_factor(&self) -> f64 {
        match self.rule {
            MergeRule::TaskArithmetic | MergeRule::Ties => self.coefficient,
            MergeRule::Average | MergeRule::IsoC => 1.0,
        }
    }

    /// Merged delta for one tensor of the given shape.
    pub fn merge_tensor(&self, deltas: &[&[f64]], shape: &[usize]) -> Result<Vec<f64>> {
        match self.rule {
            MergeRule::Average => merge_average(deltas),
            MergeRule::TaskArithmetic => merge_task_arithmetic(deltas),
            MergeRule::Ties => merge_ties(deltas, self.trim_fraction),
            MergeRule::IsoC => match shape {
                [rows, cols] => merge_isoc(deltas, *rows, *cols, self.iso_scale),
                _ => merge_task_arithmetic(deltas),
            },
        }
    }
}

impl Default for MergerSpec {
    fn default() -> Self {
        Self::new(MergeRule::TaskArithmetic)
    }
}

fn check_deltas(deltas: &[&[f64]]) -> Result<usize> {
    let first = deltas
        .first()
        .ok_or(LarvError::Empty("merge needs at least one task delta"))?;
    let n = first.len();
    if let Some(i) = deltas.iter().position(|d| d.len() != n) {
        return Err(LarvError::ShapeMismatch(format!(
            "task delta {i} has {} elements, expected {n}",
            deltas[i].len()
        )));
    }
    Ok(n)
}

/// Order-independent sum of one entry across tasks.
fn sorted_sum(buf: &mut [f64]) -> f64 {
    buf.sort_unstable_by(f64::total_cmp);
    buf.iter().sum()
}

fn entrywise(deltas: &[&[f64]], mut f: impl FnMut(&mut [f64]) -> f64) -> Result<Vec<f64>> {
    let n = check_deltas(deltas)?;
    let mut buf = vec![0.0; deltas.len()];
    Ok((0..n)
        .map(|j| {
            buf.iter_mut().zip(deltas).for_each(|(b, d)| *b = d[j]);
            f(&mut buf)
        })
        .collect())
}

/// Elementwise mean.
pub fn merge_average(deltas: &[&[f64]]) -> Result<Vec<f64>> {
    let k = deltas.len() as f64;
    entrywise(deltas, |buf| sorted_sum(buf) / k)
}

/// Elementwise sum; the coefficient is applied at composition.
pub fn merge_task_arithmetic(deltas: &[&[f64]]) -> Result<Vec<f64>> {
    entrywise(deltas, sorted_sum)
}

/// Keeps the `ceil(fraction * n)` largest-magnitude entries (ties broken by position).
fn trim(delta: &[f64], fraction: f64) -> Vec<f64> {
    let n = delta.len();
    // the 1e-9 slack keeps e.g. 0.3 * 10 from rounding up to 4
    let keep = ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    if keep == n {
        return delta.to_vec();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.select_nth_unstable_by(keep - 1, |&a, &b| {
        delta[b].abs().total_cmp(&delta[a].abs()).then(a.cmp(&b))
    });
    let mut out = vec![0.0; n];
    for &i in &order[..keep] {
        out[i] = delta[i];
    }
    out
}

/// TIES: per-task magnitude trim, sign election by summed mass, mean over agreeing entries.
pub fn merge_ties(deltas: &[&[f64]], trim_fraction: f64) -> Result<Vec<f64>> {
    if !(trim_fraction > 0.0 && trim_fraction <= 1.0) {
        return Err(LarvError::InvalidParameter(format!(
            "trim fraction must be in (0, 1], got {trim_fraction}"
        )));
    }
    check_deltas(deltas)?;
    let trimmed: Vec<Vec<f64>> = deltas.iter().map(|d| trim(d, trim_fraction)).collect();
    let views: Vec<&[f64]> = trimmed.iter().map(Vec::as_slice).collect();
    entrywise(&views, |buf| {
        let sign = sorted_sum(buf).signum_or_zero();
        if sign == 0.0 {
            return 0.0;
        }
        let mut agreeing: Vec<f64> = buf.iter().copied().filter(|v| v.signum_or_zero() == sign).collect();
        if agreeing.is_empty() {
            return 0.0;
        }
        sorted_sum(&mut agreeing) / agreeing.len() as f64
    })
}

trait SignOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

/// Iso-C: sums the deltas as a `rows x cols` matrix and replaces its nonzero singular values
/// by their mean, then multiplies by `iso_scale`.
pub fn merge_isoc(deltas: &[&[f64]], rows: usize, cols: usize, iso_scale: f64) -> Result<Vec<f64>> {
    let summed = merge_task_arithmetic(deltas)?;
    if summed.len() != rows * cols {
        return Err(LarvError::ShapeMismatch(format!(
            "iso-c: {} elements do not form a {rows}x{cols} matrix",
            summed.len()
        )));
    }
    if summed.iter().all(|&v| v == 0.0) {
        return Ok(summed);
    }
    if summed.iter().any(|v| !v.is_finite()) {
        return Err(LarvError::NonFinite("iso-c merged matrix".into()));
    }
    let svd = matrix_from_f64(rows, cols, &summed).svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let sigma = &svd.singular_values;
    let largest = sigma.max();
    let tol = rows.max(cols) as f64 * f64::EPSILON * largest;
    let kept: Vec<usize> = (0..sigma.len()).filter(|&i| sigma[i] > tol).collect();
    let mean = kept.iter().map(|&i| sigma[i]).sum::<f64>() / kept.len() as f64;

    let mut out = nalgebra::DMatrix::<f64>::zeros(rows, cols);
    for &i in &kept {
        out += u.column(i) * v_t.row(i);
    }
    out *= iso_scale * mean;
    Ok(to_row_major(&out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::exact_svd;
    use approx::assert_relative_eq;

    #[test]
    fn average_examples() {
        let d = [1.0, -2.0, 0.5];
        assert_eq!(merge_average(&[&d, &d, &d]).unwrap(), d.to_vec());
        let neg: Vec<f64> = d.iter().map(|v| -v).collect();
        assert_eq!(merge_average(&[&d, &neg]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn task_arithmetic_examples() {
        assert_eq!(merge_task_arithmetic(&[&[0.0; 4], &[0.0; 4]]).unwrap(), vec![0.0; 4]);
        assert_eq!(merge_task_arithmetic(&[&[1.0, 2.0], &[3.0, -5.0]]).unwrap(), vec![4.0, -3.0]);
        let spec = MergerSpec::new(MergeRule::TaskArithmetic);
        assert_eq!(spec.composition_factor(), 0.3);
    }

    #[test]
    fn misaligned_and_empty_inputs() {
        assert!(matches!(merge_average(&[]), Err(LarvError::Empty(_))));
        assert!(matches!(
            merge_task_arithmetic(&[&[1.0, 2.0], &[1.0]]),
            Err(LarvError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn ties_single_task_is_trimmed_delta() {
        let d = [0.1, -5.0, 0.3, 2.0, -0.2, 0.0, 1.0, 0.05, -3.0, 0.4];
        let out = merge_ties(&[&d], 0.3).unwrap();
        assert_eq!(out, vec![0.0, -5.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, -3.0, 0.0]);
        assert_eq!(merge_ties(&[&d], 1.0).unwrap(), d.to_vec());
    }

    #[test]
    fn ties_two_value_election() {
        assert_eq!(merge_ties(&[&[2.0], &[-3.0]], 1.0).unwrap(), vec![-3.0]);
    }

    #[test]
    fn ties_perfect_conflict_annihilates() {
        let d = [1.0, -2.0, 3.0];
        let neg = [-1.0, 2.0, -3.0];
        assert_eq!(merge_ties(&[&d, &neg], 1.0).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn ties_disjoint_mean() {
        // entry 0: (+1, +3, -1) -> sign +, mean(1, 3) = 2
        let out = merge_ties(&[&[1.0], &[3.0], &[-1.0]], 1.0).unwrap();
        assert_eq!(out, vec![2.0]);
    }

    #[test]
    fn ties_rejects_bad_fraction() {
        assert!(merge_ties(&[&[1.0]], 0.0).is_err());
        assert!(merge_ties(&[&[1.0]], 1.5).is_err());
    }

    #[test]
    fn trim_breaks_magnitude_ties_by_position() {
        assert_eq!(trim(&[1.0, -1.0, 1.0, 0.5], 0.5), vec![1.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn isoc_diag() {
        let out = merge_isoc(&[&[3.0, 0.0, 0.0, 1.0]], 2, 2, 1.0).unwrap();
        for (g, w) in out.iter().zip([2.0, 0.0, 0.0, 2.0]) {
            assert_relative_eq!(*g, w, epsilon = 1e-12);
        }
    }

    #[test]
    fn isoc_rank_one_is_scaled_input() {
        let u = [1.0, -2.0, 0.5];
        let v = [2.0, 1.0, 0.0, -1.0];
        let m: Vec<f64> = u.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect();
        let out = merge_isoc(&[&m], 3, 4, 1.4).unwrap();
        for (g, w) in out.iter().zip(&m) {
            assert_relative_eq!(*g, 1.4 * w, epsilon = 1e-12);
        }
    }

    #[test]
    fn isoc_output_is_flat_and_norm_matches() {
        let a: Vec<f64> = (0..20).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let b: Vec<f64> = (0..20).map(|i| ((i * 5 % 13) as f64 - 6.0) / 4.0).collect();
        let out = merge_isoc(&[&a, &b], 4, 5, 1.3).unwrap();
        let s = exact_svd(&matrix_from_f64(4, 5, &out)).unwrap();
        let max = s.values[0];
        let min = s.values.iter().copied().filter(|v| *v > 1e-9 * max).fold(f64::MAX, f64::min);
        assert_relative_eq!(max / min, 1.0, max_relative = 1e-10);

        let sum = merge_task_arithmetic(&[&a, &b]).unwrap();
        let input = exact_svd(&matrix_from_f64(4, 5, &sum)).unwrap();
        let rank = input.values.iter().filter(|v| **v > 1e-9 * input.values[0]).count();
        let mean = input.values[..rank].iter().sum::<f64>() / rank as f64;
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert_relative_eq!(norm, 1.3 * mean * (rank as f64).sqrt(), max_relative = 1e-10);
    }

    #[test]
    fn isoc_zero_and_non_matrix_fallback() {
        assert_eq!(merge_isoc(&[&[0.0; 6]], 2, 3, 1.3).unwrap(), vec![0.0; 6]);
        let spec = MergerSpec::new(MergeRule::IsoC);
        assert_eq!(
            spec.merge_tensor(&[&[1.0, 2.0], &[0.5, 0.5]], &[2]).unwrap(),
            vec![1.5, 2.5]
        );
        assert_eq!(spec.composition_factor(), 1.0);
    }

    #[test]
    fn spec_validation_and_parsing() {
        assert!(MergerSpec::new(MergeRule::Ties).validate().is_ok());
        let bad = MergerSpec { coefficient: -0.1, ..MergerSpec::new(MergeRule::Ties) };
        assert!(bad.validate().is_err());
        let bad = MergerSpec { trim_fraction: 0.0, ..MergerSpec::new(MergeRule::Ties) };
        assert!(bad.validate().is_err());
        assert_eq!(MergeRule::parse("iso-c").unwrap(), MergeRule::IsoC);
        assert!(MergeRule::parse("dare").is_err());
    }
}
