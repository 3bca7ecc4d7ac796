//! Mapping composite scores (or plain depth) to per-layer scales.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LarvError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Shrink,
    Neutral,
    Amplify,
}

impl Tier {
    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Shrink => "shrink",
            Tier::Neutral => "neutral",
            Tier::Amplify => "amplify",
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Scales for the shrink / neutral / amplify buckets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierValues {
    pub shrink: f64,
    pub neutral: f64,
    pub amplify: f64,
}

impl Default for TierValues {
    fn default() -> Self {
        Self {
            shrink: 0.5,
            neutral: 1.0,
            amplify: 1.5,
        }
    }
}

impl TierValues {
    pub fn scale(&self, tier: Tier) -> f64 {
        match tier {
            Tier::Shrink => self.shrink,
            Tier::Neutral => self.neutral,
            Tier::Amplify => self.amplify,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TierThresholds {
    pub t1: f64,
    pub t2: f64,
}

/// `1 + 0.5 tanh(gamma (w - 1))`, a bounded gate centred at `w = 1`.
pub fn continuous_gate(w: f64, gamma: f64) -> f64 {
    1.0 + 0.5 * (gamma * (w - 1.0)).tanh()
}

/// Lower `q`-quantile of the empirical CDF: the smallest score `t` with `F(t) >= q`.
fn inf_quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len() as f64;
    let mut i = 0;
    while i < sorted.len() {
        // advance past ties so `count` is the number of scores <= sorted[i]
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        if j as f64 / n >= q {
            return sorted[i];
        }
        i = j;
    }
    sorted[sorted.len() - 1]
}

/// Tier thresholds as the `(alpha, beta)` lower quantiles of the scores.
pub fn tier_thresholds(scores: &[f64], alpha: f64, beta: f64) -> Result<TierThresholds> {
    if scores.is_empty() {
        return Err(LarvError::Empty("tier thresholds need at least one score"));
    }
    validate_quantiles(alpha, beta)?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(LarvError::NonFinite("composite scores".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(TierThresholds {
        t1: inf_quantile(&sorted, alpha),
        t2: inf_quantile(&sorted, beta),
    })
}

pub fn classify(w: f64, th: &TierThresholds) -> Tier {
    if w <= th.t1 {
        Tier::Shrink
    } else if w <= th.t2 {
        Tier::Neutral
    } else {
        Tier::Amplify
    }
}

/// Three-level gate: shrink when `w <= t1`, neutral when `t1 < w <= t2`, amplify above `t2`.
pub fn tiered_gate(w: f64, th: &TierThresholds, values: &TierValues) -> f64 {
    values.scale(classify(w, th))
}

pub(crate) fn validate_quantiles(alpha: f64, beta: f64) -> Result<()> {
    if !(0.0 < alpha && alpha < beta && beta < 1.0) {
        return Err(LarvError::InvalidParameter(format!(
            "quantiles must satisfy 0 < alpha < beta < 1, got ({alpha}, {beta})"
        )));
    }
    Ok(())
}

/// Depth-only baseline schedules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "scales")]
pub enum ScheduleKind {
    /// The same scale everywhere.
    Uniform(f64),
    /// Per-layer interpolation from the shrink to the amplify value.
    Linear,
    /// Shallow half at the shrink value, deep half at the amplify value.
    Tier2,
    /// Shrink / neutral / amplify thirds.
    Tier3,
    /// Six evenly spaced stages from shrink to amplify.
    Tier6,
    /// Twelve evenly spaced stages from shrink to amplify.
    Tier12,
    /// Arbitrary per-stage scales, shallow to deep (e.g. `[0, 1, 1.5]` freezes the shallow third).
    FreezeCustom(Vec<f64>),
}

impl ScheduleKind {
    /// Parses a schedule name. `uniform` defaults to 1.0; `freeze-custom` needs `scales`.
    pub fn parse(kind: &str, scales: &[f64]) -> Result<Self> {
        Ok(match kind {
            "uniform" => ScheduleKind::Uniform(scales.first().copied().unwrap_or(1.0)),
            "linear" => ScheduleKind::Linear,
            "tier2" => ScheduleKind::Tier2,
            "tier3" => ScheduleKind::Tier3,
            "tier6" => ScheduleKind::Tier6,
            "tier12" => ScheduleKind::Tier12,
            "freeze-custom" | "freeze" => {
                if scales.is_empty() {
                    return Err(LarvError::InvalidParameter(
                        "freeze-custom schedule needs at least one stage scale".into(),
                    ));
                }
                ScheduleKind::FreezeCustom(scales.to_vec())
            }
            other => return Err(LarvError::UnknownSchedule(other.to_string())),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::Uniform(_) => "uniform",
            ScheduleKind::Linear => "linear",
            ScheduleKind::Tier2 => "tier2",
            ScheduleKind::Tier3 => "tier3",
            ScheduleKind::Tier6 => "tier6",
            ScheduleKind::Tier12 => "tier12",
            ScheduleKind::FreezeCustom(_) => "freeze-custom",
        }
    }
}

impl FromStr for ScheduleKind {
    type Err = LarvError;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s, &[])
    }
}

fn evenly_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..count)
        .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
        .collect()
}

/// Spreads `stages` over `layers` contiguous near-equal blocks, shallow to deep.
fn spread(stages: &[f64], layers: usize) -> Vec<f64> {
    let s = stages.len();
    (0..layers).map(|l| stages[l * s / layers]).collect()
}

/// Per-layer scales of a depth-only schedule for `layers` layers.
pub fn depth_schedule(kind: &ScheduleKind, layers: usize, tiers: &TierValues) -> Result<Vec<f64>> {
    if layers == 0 {
        return Err(LarvError::InvalidParameter("schedule needs at least one layer".into()));
    }
    let (lo, hi) = (tiers.shrink, tiers.amplify);
    Ok(match kind {
        ScheduleKind::Uniform(v) => vec![*v; layers],
        ScheduleKind::Linear => evenly_spaced(lo, hi, layers),
        ScheduleKind::Tier2 => spread(&[lo, hi], layers),
        ScheduleKind::Tier3 => spread(&[lo, tiers.neutral, hi], layers),
        ScheduleKind::Tier6 => spread(&evenly_spaced(lo, hi, 6), layers),
        ScheduleKind::Tier12 => spread(&evenly_spaced(lo, hi, 12), layers),
        ScheduleKind::FreezeCustom(stages) => {
            if stages.is_empty() {
                return Err(LarvError::InvalidParameter(
                    "freeze-custom schedule needs at least one stage scale".into(),
                ));
            }
            spread(stages, layers)
        }
    })
}
