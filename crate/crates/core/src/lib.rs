//! Layer-wise adaptive rescaling of task-vector merges.
//!
//! Given a base checkpoint and several fine-tuned checkpoints, a base merger (averaging, task
//! arithmetic, TIES, Iso-C) produces a merged update per parameter. Each block of the network
//! is then scored from weights alone (effective-rank contrast, commutator conflict, depth) and
//! its update rescaled before being added back to the base.

pub mod checkpoint;
pub mod complexity;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod gates;
pub mod mergers;
pub mod pipeline;
pub mod report;
pub mod spectral;
pub mod synthetic;

pub use checkpoint::{
    compute_task_vector, group_layers, load_checkpoint, save_checkpoint, Checkpoint, DType,
    GroupingConfig, LayerPartition, Tensor,
};
pub use config::{GateConfig, GateMode, MergeConfig, OutputDtype, RescaleTarget};
pub use diagnostics::{LayerDiagnostics, ScoreParams};
pub use error::{LarvError, Result};
pub use gates::{ScheduleKind, Tier, TierThresholds, TierValues};
pub use mergers::{MergeRule, MergerSpec};
pub use pipeline::{run_larv, run_larv_on, run_larv_variants, uniform_merge, LarvOutput};
pub use report::{emit_report, DiagnosticsReport, ReportFormat};
pub use spectral::{SvdConfig, SvdMode};
