//! Run configuration, read from JSON and overridable from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::GroupingConfig;
use crate::diagnostics::ScoreParams;
use crate::error::{LarvError, Result};
use crate::gates::{validate_quantiles, ScheduleKind, TierValues};
use crate::mergers::MergerSpec;
use crate::report::ReportFormat;
use crate::spectral::SvdConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateMode {
    Continuous,
    #[default]
    Tiered,
    /// Produce both the continuous and the tiered variant.
    Both,
    /// Depth-only baseline schedule; diagnostics are still reported.
    Schedule,
}

impl GateMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "continuous" => Ok(GateMode::Continuous),
            "tiered" => Ok(GateMode::Tiered),
            "both" => Ok(GateMode::Both),
            "schedule" | "depth-schedule" => Ok(GateMode::Schedule),
            other => Err(LarvError::InvalidConfig(format!("unknown gate mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub mode: GateMode,
    /// Sharpness of the continuous gate.
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub tiers: TierValues,
    pub schedule: ScheduleKind,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            mode: GateMode::Tiered,
            gamma: 3.0,
            alpha: 1.0 / 3.0,
            beta: 2.0 / 3.0,
            tiers: TierValues::default(),
            schedule: ScheduleKind::Tier3,
        }
    }
}

impl GateConfig {
    /// A gate that applies scale 1.0 to every layer.
    pub fn neutral() -> Self {
        Self {
            mode: GateMode::Schedule,
            schedule: ScheduleKind::Uniform(1.0),
            ..Self::default()
        }
    }

    pub fn with_mode(mode: GateMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(LarvError::InvalidParameter(format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        validate_quantiles(self.alpha, self.beta)
    }
}

/// Where the layer scales are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RescaleTarget {
    /// Diagnose and rescale the merged delta.
    #[default]
    Merged,
    /// Diagnose and rescale each task delta before the base merge.
    PerTask,
}

/// Element type of the merged checkpoint on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputDtype {
    #[default]
    F32,
    /// Same dtype as the corresponding base tensor.
    Input,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeConfig {
    pub base: PathBuf,
    pub finetuned: Vec<PathBuf>,
    pub merger: MergerSpec,
    pub gate: GateConfig,
    pub score: ScoreParams,
    pub grouping: GroupingConfig,
    pub svd: SvdConfig,
    pub seed: u64,
    pub rescale: RescaleTarget,
    pub output: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub report_format: Option<ReportFormat>,
    pub output_dtype: OutputDtype,
    /// Record per-view scores in the JSON report.
    pub verbose: bool,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            base: PathBuf::new(),
            finetuned: Vec::new(),
            merger: MergerSpec::default(),
            gate: GateConfig::default(),
            score: ScoreParams::default(),
            grouping: GroupingConfig::default(),
            svd: SvdConfig::default(),
            seed: 0,
            rescale: RescaleTarget::Merged,
            output: None,
            report: None,
            report_format: None,
            output_dtype: OutputDtype::F32,
            verbose: false,
        }
    }
}

impl MergeConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(LarvError::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| LarvError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| LarvError::InvalidConfig(format!("{}: {e}", path.display())))
    }

    /// Checks parameter ranges; does not touch the filesystem.
    pub fn validate_params(&self) -> Result<()> {
        self.merger.validate()?;
        self.gate.validate()?;
        self.score.validate()?;
        self.svd.validate()?;
        Ok(())
    }

    /// Full validation including presence of every input file.
    pub fn validate(&self) -> Result<()> {
        if self.base.as_os_str().is_empty() {
            return Err(LarvError::InvalidConfig("no base checkpoint given".into()));
        }
        if self.finetuned.is_empty() {
            return Err(LarvError::InvalidConfig(
                "at least one fine-tuned checkpoint is required".into(),
            ));
        }
        for p in std::iter::once(&self.base).chain(&self.finetuned) {
            if !p.is_file() {
                return Err(LarvError::MissingFile(p.clone()));
            }
        }
        self.validate_params()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_settings() {
        let c = MergeConfig::default();
        assert_eq!((c.score.eta, c.score.rho, c.score.zeta), (1.0, 0.5, 1.0));
        assert_eq!(c.score.eps, 1e-8);
        assert_eq!(c.gate.gamma, 3.0);
        assert_eq!((c.gate.alpha, c.gate.beta), (1.0 / 3.0, 2.0 / 3.0));
        assert_eq!(c.gate.tiers, TierValues { shrink: 0.5, neutral: 1.0, amplify: 1.5 });
        assert_eq!((c.svd.rank, c.svd.oversample), (64, 10));
        assert_eq!(c.seed, 0);
        assert_eq!(c.gate.mode, GateMode::Tiered);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: MergeConfig = serde_json::from_str(
            r#"{"base": "b.st", "finetuned": ["x.st"], "merger": {"rule": "ties"},
                "gate": {"mode": "continuous", "gamma": 2.0}, "svd": {"rank": 8}}"#,
        )
        .unwrap();
        assert_eq!(c.merger.rule, crate::mergers::MergeRule::Ties);
        assert_eq!(c.merger.coefficient, 0.3);
        assert_eq!(c.gate.gamma, 2.0);
        assert_eq!(c.gate.alpha, 1.0 / 3.0);
        assert_eq!(c.svd.rank, 8);
        assert_eq!(c.svd.oversample, 10);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<MergeConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn json_round_trip_and_stable_hash() {
        let mut c = MergeConfig::default();
        c.gate.schedule = ScheduleKind::FreezeCustom(vec![0.0, 1.0, 1.5]);
        let back: MergeConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        c.seed = 1;
        assert_ne!(back.hash(), c.hash());
    }

    #[test]
    fn validation_reports_missing_files() {
        let c = MergeConfig {
            base: "/nonexistent/base.safetensors".into(),
            finetuned: vec!["/nonexistent/ft.safetensors".into()],
            ..MergeConfig::default()
        };
        match c.validate() {
            Err(LarvError::MissingFile(p)) => assert_eq!(p, PathBuf::from("/nonexistent/base.safetensors")),
            other => panic!("unexpected {other:?}"),
        }
        let mut g = GateConfig::default();
        g.alpha = 0.9;
        assert!(g.validate().is_err());
    }
}
