//! End-to-end layer-wise rescaling over a base merger.
//!
//! Stages: merge per-tensor deltas (parallel) -> per-layer effective-rank contrast and
//! commutator conflict (parallel) -> standardize and score (single-threaded reduction) ->
//! gate -> compose `base + scale * merged delta` (parallel).
//!
//! Task deltas are formed in `f64` from the `f32` checkpoints, so a neutral scale of 1.0
//! reproduces the fine-tuned weights exactly for a single task.

use std::path::{Path, PathBuf};
use std::time::Instant;

use indexmap::IndexMap;
use rayon::prelude::*;

use crate::checkpoint::{
    group_layers, load_checkpoint, save_checkpoint_with, Checkpoint, LayerPartition, MatrixView,
    SaveDtype, Tensor,
};
use crate::config::{GateMode, MergeConfig, OutputDtype, RescaleTarget};
use crate::diagnostics::{
    ccc_views, composite_score, depth_prior, eer_views, standardize, LayerDiagnostics,
    SpectralOptions,
};
use crate::error::{LarvError, Result, StageExt};
use crate::gates::{classify, continuous_gate, depth_schedule, tier_thresholds, TierThresholds};
use crate::mergers::MergerSpec;
use crate::report::{emit_report, DiagnosticsReport, ReportFormat, ReportMeta, Timings, ViewScore};
use crate::spectral::{matrix_from_f32, matrix_from_f64, Matrix};

/// A concrete gate applied to one output variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppliedGate {
    Continuous,
    Tiered,
    Schedule,
}

impl AppliedGate {
    pub fn label(self) -> &'static str {
        match self {
            AppliedGate::Continuous => "continuous",
            AppliedGate::Tiered => "tiered",
            AppliedGate::Schedule => "schedule",
        }
    }

    fn for_mode(mode: GateMode) -> Vec<AppliedGate> {
        match mode {
            GateMode::Continuous => vec![AppliedGate::Continuous],
            GateMode::Tiered => vec![AppliedGate::Tiered],
            GateMode::Both => vec![AppliedGate::Continuous, AppliedGate::Tiered],
            GateMode::Schedule => vec![AppliedGate::Schedule],
        }
    }
}

/// One gated result.
#[derive(Debug, Clone)]
pub struct LarvOutput {
    pub gate: AppliedGate,
    /// `None` for diagnose-only runs.
    pub checkpoint: Option<Checkpoint>,
    pub report: DiagnosticsReport,
}

/// `fine-tuned - base` in `f64`.
pub fn task_delta(base: &Tensor, finetuned: &Tensor) -> Vec<f64> {
    finetuned
        .data()
        .iter()
        .zip(base.data())
        .map(|(&f, &b)| f as f64 - b as f64)
        .collect()
}

/// `base + factor * delta`, rounded to `f32`.
pub fn compose(base: &[f32], delta: &[f64], factor: f64) -> Vec<f32> {
    base.iter()
        .zip(delta)
        .map(|(&b, &d)| (b as f64 + factor * d) as f32)
        .collect()
}

fn check_inputs(base: &Checkpoint, finetuned: &[Checkpoint]) -> Result<()> {
    if finetuned.is_empty() {
        return Err(LarvError::InvalidConfig(
            "at least one fine-tuned checkpoint is required".into(),
        ));
    }
    for ft in finetuned {
        base.check_aligned(ft)?;
    }
    Ok(())
}

fn merger_meta(merger: &MergerSpec) -> std::collections::BTreeMap<String, String> {
    [("larv.merger".to_string(), merger.rule.as_str().to_string())]
        .into_iter()
        .collect()
}

fn output_tensor(base: &Tensor, data: Vec<f32>, dtype: OutputDtype) -> Result<Tensor> {
    let dt = match dtype {
        OutputDtype::F32 => crate::checkpoint::DType::F32,
        OutputDtype::Input => base.dtype,
    };
    Tensor::with_dtype(dt, base.shape().to_vec(), data)
}

fn merge_all(
    base: &Checkpoint,
    finetuned: &[Checkpoint],
    merger: &MergerSpec,
) -> Result<IndexMap<String, Vec<f64>>> {
    let entries: Vec<(&String, &Tensor)> = base.tensors.iter().collect();
    let merged = entries
        .par_iter()
        .map(|(name, b)| {
            let deltas: Vec<Vec<f64>> = finetuned.iter().map(|ft| task_delta(b, &ft.tensors[*name])).collect();
            let views: Vec<&[f64]> = deltas.iter().map(Vec::as_slice).collect();
            merger
                .merge_tensor(&views, b.shape())
                .map(|m| ((*name).clone(), m))
                .map_err(|e| LarvError::MalformedTensor {
                    name: (*name).clone(),
                    reason: e.to_string(),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(merged.into_iter().collect())
}

/// Base merge with one global coefficient and no layer scaling.
pub fn uniform_merge(
    base: &Checkpoint,
    finetuned: &[Checkpoint],
    merger: &MergerSpec,
    dtype: OutputDtype,
) -> Result<Checkpoint> {
    merger.validate()?;
    check_inputs(base, finetuned).stage("align")?;
    let merged = merge_all(base, finetuned, merger).stage("merge")?;
    let factor = merger.composition_factor();
    let mut out = Checkpoint {
        meta: merger_meta(merger),
        ..Checkpoint::default()
    };
    for (name, b) in &base.tensors {
        let data = compose(b.data(), &merged[name], factor);
        out.insert(name.clone(), output_tensor(b, data, dtype)?)?;
    }
    Ok(out)
}

struct LayerSignal {
    e: f64,
    c: f64,
    views: Vec<ViewScore>,
    seconds: f64,
}

/// Effective-rank contrast and commutator conflict for every group, in parallel.
fn layer_signals<F>(
    base: &Checkpoint,
    partition: &LayerPartition,
    delta_view: F,
    eps: f64,
    spectral: &SpectralOptions,
    task: Option<usize>,
) -> Result<Vec<LayerSignal>>
where
    F: Fn(&MatrixView) -> Matrix + Sync,
{
    partition
        .groups
        .par_iter()
        .map(|g| {
            let start = Instant::now();
            let base_views: Vec<Matrix> = g
                .matrix_views
                .iter()
                .map(|v| matrix_from_f32(v.rows, v.cols, base.tensors[&v.name].data()))
                .collect();
            let delta_views: Vec<Matrix> = g.matrix_views.iter().map(&delta_view).collect();
            let task_id = task.map_or(0, |t| t + 1);
            let es = eer_views(&base_views, &delta_views, eps, spectral, task_id, g.index)
                .map_err(|e| e.in_layer(g.index))?;
            let cs = ccc_views(&base_views, &delta_views, eps).map_err(|e| e.in_layer(g.index))?;
            let n = es.len() as f64;
            let views = g
                .matrix_views
                .iter()
                .zip(es.iter().zip(&cs))
                .map(|(v, (&e, &c))| ViewScore {
                    layer: g.index,
                    task,
                    name: v.name.clone(),
                    rows: v.rows,
                    cols: v.cols,
                    e,
                    c,
                })
                .collect();
            Ok(LayerSignal {
                e: es.iter().sum::<f64>() / n,
                c: cs.iter().sum::<f64>() / n,
                views,
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

/// Depth prior, standardized conflict and composite score. Scales are filled in by the gate.
fn score_layers(signals: &[LayerSignal], config: &MergeConfig) -> Result<Vec<LayerDiagnostics>> {
    let total = signals.len();
    let cs: Vec<f64> = signals.iter().map(|s| s.c).collect();
    let z = standardize(&cs)?;
    signals
        .iter()
        .zip(z)
        .enumerate()
        .map(|(i, (sig, z_c))| {
            let r = depth_prior(i + 1, total)?;
            Ok(LayerDiagnostics {
                layer: i + 1,
                e: sig.e,
                c: sig.c,
                r,
                z_c,
                w: composite_score(sig.e, r, z_c, &config.score),
                s: 1.0,
                tier: None,
            })
        })
        .collect()
}

fn apply_gate(
    rows: &mut [LayerDiagnostics],
    gate: AppliedGate,
    config: &MergeConfig,
) -> Result<Option<TierThresholds>> {
    let g = &config.gate;
    match gate {
        AppliedGate::Continuous => {
            rows.iter_mut().for_each(|r| {
                r.s = continuous_gate(r.w, g.gamma);
                r.tier = None;
            });
            Ok(None)
        }
        AppliedGate::Tiered => {
            let ws: Vec<f64> = rows.iter().map(|r| r.w).collect();
            let th = tier_thresholds(&ws, g.alpha, g.beta)?;
            rows.iter_mut().for_each(|r| {
                let tier = classify(r.w, &th);
                r.s = g.tiers.scale(tier);
                r.tier = Some(tier);
            });
            Ok(Some(th))
        }
        AppliedGate::Schedule => {
            let scales = depth_schedule(&g.schedule, rows.len(), &g.tiers)?;
            rows.iter_mut().zip(scales).for_each(|(r, s)| {
                r.s = s;
                r.tier = None;
            });
            Ok(None)
        }
    }
}

fn gate_label(gate: AppliedGate, config: &MergeConfig) -> String {
    match gate {
        AppliedGate::Schedule => format!("schedule:{}", config.gate.schedule.name()),
        other => other.label().to_string(),
    }
}

fn base_meta(config: &MergeConfig, partition: &LayerPartition) -> ReportMeta {
    ReportMeta {
        config_hash: config.hash(),
        seed: config.seed,
        merger: config.merger.rule.as_str().to_string(),
        gate: String::new(),
        rescale: match config.rescale {
            RescaleTarget::Merged => "merged".into(),
            RescaleTarget::PerTask => "per-task".into(),
        },
        num_layers: partition.num_layers(),
        skipped: partition.skipped.clone(),
        thresholds: None,
        timings: Timings::default(),
    }
}

/// Runs the veneer on in-memory checkpoints. Produces one output per applied gate; the
/// checkpoint is omitted when `compose` is false.
pub fn run_larv_on(
    base: &Checkpoint,
    finetuned: &[Checkpoint],
    config: &MergeConfig,
    compose_output: bool,
) -> Result<Vec<LarvOutput>> {
    config.validate_params().stage("config")?;
    check_inputs(base, finetuned).stage("align")?;
    let partition = group_layers(base, &config.grouping).stage("group")?;
    match config.rescale {
        RescaleTarget::Merged => run_merged(base, finetuned, config, &partition, compose_output),
        RescaleTarget::PerTask => run_per_task(base, finetuned, config, &partition, compose_output),
    }
}

fn spectral_options(config: &MergeConfig) -> SpectralOptions {
    SpectralOptions {
        svd: config.svd,
        seed: config.seed,
    }
}

fn run_merged(
    base: &Checkpoint,
    finetuned: &[Checkpoint],
    config: &MergeConfig,
    partition: &LayerPartition,
    compose_output: bool,
) -> Result<Vec<LarvOutput>> {
    let t = Instant::now();
    let merged = merge_all(base, finetuned, &config.merger).stage("merge")?;
    let merge_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let signals = layer_signals(
        base,
        partition,
        |v| matrix_from_f64(v.rows, v.cols, &merged[&v.name]),
        config.score.eps,
        &spectral_options(config),
        None,
    )
    .stage("diagnostics")?;
    let rows = score_layers(&signals, config).stage("score")?;
    let diagnostics_s = t.elapsed().as_secs_f64();

    let group_of = partition.group_of();
    let factor = config.merger.composition_factor();
    let mut outputs = Vec::new();
    for gate in AppliedGate::for_mode(config.gate.mode) {
        let mut rows = rows.clone();
        let thresholds = apply_gate(&mut rows, gate, config).stage("gate")?;

        let t = Instant::now();
        let checkpoint = if compose_output {
            let entries: Vec<(&String, &Tensor)> = base.tensors.iter().collect();
            let tensors = entries
                .par_iter()
                .map(|(name, b)| {
                    let s = group_of.get(name.as_str()).map_or(1.0, |&g| rows[g].s);
                    let data = compose(b.data(), &merged[*name], s * factor);
                    Ok(((*name).clone(), output_tensor(b, data, config.output_dtype)?))
                })
                .collect::<Result<Vec<_>>>()
                .stage("compose")?;
            let mut ckpt = Checkpoint {
                meta: merger_meta(&config.merger),
                ..Checkpoint::default()
            };
            for (name, tensor) in tensors {
                ckpt.insert(name, tensor)?;
            }
            Some(ckpt)
        } else {
            None
        };
        let compose_s = t.elapsed().as_secs_f64();

        let mut meta = base_meta(config, partition);
        meta.gate = gate_label(gate, config);
        meta.thresholds = thresholds;
        meta.timings = Timings {
            load_s: 0.0,
            merge_s,
            diagnostics_s,
            per_layer_diagnostics_s: signals.iter().map(|s| s.seconds).collect(),
            compose_s,
        };
        let views = if config.verbose {
            signals.iter().flat_map(|s| s.views.iter().cloned()).collect()
        } else {
            Vec::new()
        };
        outputs.push(LarvOutput {
            gate,
            checkpoint,
            report: DiagnosticsReport {
                rows,
                meta,
                views,
                per_task: Vec::new(),
            },
        });
    }
    Ok(outputs)
}

fn mean_rows(per_task: &[Vec<LayerDiagnostics>]) -> Vec<LayerDiagnostics> {
    let k = per_task.len() as f64;
    (0..per_task[0].len())
        .map(|l| {
            let avg = |f: fn(&LayerDiagnostics) -> f64| per_task.iter().map(|rows| f(&rows[l])).sum::<f64>() / k;
            LayerDiagnostics {
                layer: l + 1,
                e: avg(|r| r.e),
                c: avg(|r| r.c),
                r: avg(|r| r.r),
                z_c: avg(|r| r.z_c),
                w: avg(|r| r.w),
                s: avg(|r| r.s),
                tier: None,
            }
        })
        .collect()
}

fn run_per_task(
    base: &Checkpoint,
    finetuned: &[Checkpoint],
    config: &MergeConfig,
    partition: &LayerPartition,
    compose_output: bool,
) -> Result<Vec<LarvOutput>> {
    let t = Instant::now();
    let spectral = spectral_options(config);
    let mut task_signals = Vec::with_capacity(finetuned.len());
    for (i, ft) in finetuned.iter().enumerate() {
        let signals = layer_signals(
            base,
            partition,
            |v| {
                let delta = task_delta(&base.tensors[&v.name], &ft.tensors[&v.name]);
                matrix_from_f64(v.rows, v.cols, &delta)
            },
            config.score.eps,
            &spectral,
            Some(i),
        )
        .stage("diagnostics")?;
        task_signals.push(signals);
    }
    let task_rows = task_signals
        .iter()
        .map(|s| score_layers(s, config))
        .collect::<Result<Vec<_>>>()
        .stage("score")?;
    let diagnostics_s = t.elapsed().as_secs_f64();

    let group_of = partition.group_of();
    let factor = config.merger.composition_factor();
    let mut outputs = Vec::new();
    for gate in AppliedGate::for_mode(config.gate.mode) {
        let mut per_task = task_rows.clone();
        for rows in per_task.iter_mut() {
            apply_gate(rows, gate, config).stage("gate")?;
        }

        let t = Instant::now();
        let checkpoint = if compose_output {
            let entries: Vec<(&String, &Tensor)> = base.tensors.iter().collect();
            let tensors = entries
                .par_iter()
                .map(|(name, b)| {
                    let group = group_of.get(name.as_str()).copied();
                    let deltas: Vec<Vec<f64>> = finetuned
                        .iter()
                        .zip(&per_task)
                        .map(|(ft, rows)| {
                            let s = group.map_or(1.0, |g| rows[g].s);
                            let mut d = task_delta(b, &ft.tensors[*name]);
                            d.iter_mut().for_each(|v| *v *= s);
                            d
                        })
                        .collect();
                    let views: Vec<&[f64]> = deltas.iter().map(Vec::as_slice).collect();
                    let merged = config.merger.merge_tensor(&views, b.shape())?;
                    let data = compose(b.data(), &merged, factor);
                    Ok(((*name).clone(), output_tensor(b, data, config.output_dtype)?))
                })
                .collect::<Result<Vec<_>>>()
                .stage("compose")?;
            let mut ckpt = Checkpoint {
                meta: merger_meta(&config.merger),
                ..Checkpoint::default()
            };
            for (name, tensor) in tensors {
                ckpt.insert(name, tensor)?;
            }
            Some(ckpt)
        } else {
            None
        };
        let compose_s = t.elapsed().as_secs_f64();

        let mut meta = base_meta(config, partition);
        meta.gate = gate_label(gate, config);
        meta.timings = Timings {
            load_s: 0.0,
            merge_s: 0.0,
            diagnostics_s,
            per_layer_diagnostics_s: (0..partition.num_layers())
                .map(|l| task_signals.iter().map(|s| s[l].seconds).sum())
                .collect(),
            compose_s,
        };
        let views = if config.verbose {
            task_signals
                .iter()
                .flat_map(|s| s.iter().flat_map(|l| l.views.iter().cloned()))
                .collect()
        } else {
            Vec::new()
        };
        outputs.push(LarvOutput {
            gate,
            checkpoint,
            report: DiagnosticsReport {
                rows: mean_rows(&per_task),
                meta,
                views,
                per_task,
            },
        });
    }
    Ok(outputs)
}

fn load_inputs(config: &MergeConfig) -> Result<(Checkpoint, Vec<Checkpoint>, f64)> {
    config.validate().stage("config")?;
    let t = Instant::now();
    let load = |p: &PathBuf| -> Result<Checkpoint> {
        let mut c = load_checkpoint(p)?;
        c.meta
            .entry("source".into())
            .or_insert_with(|| p.display().to_string());
        Ok(c)
    };
    let base = load(&config.base).stage("load")?;
    let finetuned = config
        .finetuned
        .par_iter()
        .map(load)
        .collect::<Result<Vec<_>>>()
        .stage("load")?;
    Ok((base, finetuned, t.elapsed().as_secs_f64()))
}

/// Loads the configured checkpoints and runs every gate variant the config asks for.
pub fn run_larv_variants(config: &MergeConfig, compose_output: bool) -> Result<Vec<LarvOutput>> {
    let (base, finetuned, load_s) = load_inputs(config)?;
    let mut outputs = run_larv_on(&base, &finetuned, config, compose_output)?;
    for o in &mut outputs {
        o.report.meta.timings.load_s = load_s;
    }
    Ok(outputs)
}

/// Single-variant run: merged checkpoint plus report. Use [`run_larv_variants`] for
/// `GateMode::Both`.
pub fn run_larv(config: &MergeConfig) -> Result<(Checkpoint, DiagnosticsReport)> {
    if config.gate.mode == GateMode::Both {
        return Err(LarvError::InvalidConfig(
            "gate mode `both` yields two outputs; use run_larv_variants".into(),
        ));
    }
    let mut outputs = run_larv_variants(config, true)?;
    let out = outputs.remove(0);
    Ok((out.checkpoint.expect("composed"), out.report))
}

/// `path` with `.{suffix}` inserted before the extension: `m.safetensors` -> `m.tiered.safetensors`.
pub fn suffixed_path(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.{suffix}.{}", ext.to_string_lossy()),
        None => format!("{stem}.{suffix}"),
    };
    path.with_file_name(name)
}

/// Writes checkpoints and reports for every variant. With several variants, each path gets
/// the gate name as a suffix. Returns the written paths.
pub fn write_outputs(outputs: &[LarvOutput], config: &MergeConfig) -> Result<Vec<PathBuf>> {
    let multi = outputs.len() > 1;
    let mut written = Vec::new();
    for out in outputs {
        let place = |p: &Path| if multi { suffixed_path(p, out.gate.label()) } else { p.to_path_buf() };
        if let (Some(ckpt), Some(path)) = (&out.checkpoint, &config.output) {
            let path = place(path);
            let dtype = match config.output_dtype {
                OutputDtype::F32 => SaveDtype::F32,
                OutputDtype::Input => SaveDtype::Source,
            };
            save_checkpoint_with(ckpt, &path, dtype).stage("write")?;
            written.push(path);
        }
        if let Some(path) = &config.report {
            let path = place(path);
            let format = config.report_format.unwrap_or_else(|| ReportFormat::from_path(&path));
            emit_report(&out.report, &path, format).stage("write")?;
            written.push(path);
        }
    }
    Ok(written)
}
