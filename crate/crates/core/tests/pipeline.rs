use larv::checkpoint::{group_layers, to_bytes, GroupingConfig, SaveDtype};
use larv::pipeline::{compose, run_larv_on, task_delta, uniform_merge};
use larv::synthetic::{depth_monotone, parameter_distance, planted_conflict, random_tasks, PlantedConflict};
use larv::{
    Checkpoint, GateConfig, GateMode, LarvError, MergeConfig, MergeRule, MergerSpec, OutputDtype,
    RescaleTarget, ScheduleKind, Tier,
};

fn config(rule: MergeRule, gate: GateConfig) -> MergeConfig {
    MergeConfig {
        merger: MergerSpec::new(rule),
        gate,
        ..MergeConfig::default()
    }
}

fn single(base: &Checkpoint, fts: &[Checkpoint], cfg: &MergeConfig) -> (Checkpoint, larv::DiagnosticsReport) {
    let mut out = run_larv_on(base, fts, cfg, true).unwrap();
    assert_eq!(out.len(), 1);
    let o = out.remove(0);
    (o.checkpoint.unwrap(), o.report)
}

const RULES: [MergeRule; 4] = [MergeRule::Average, MergeRule::TaskArithmetic, MergeRule::Ties, MergeRule::IsoC];

#[test]
fn single_task_average_with_unit_scales_is_the_finetuned_model() {
    let f = random_tasks(3, 8, 1, 4);
    let cfg = config(MergeRule::Average, GateConfig::neutral());
    let (out, _) = single(&f.base, &f.finetuned, &cfg);
    for (name, t) in &out.tensors {
        assert_eq!(t.data(), f.finetuned[0].tensors[name].data(), "{name}");
    }
}

#[test]
fn neutral_gate_matches_uniform_bytes() {
    let f = random_tasks(3, 8, 3, 11);
    for rule in RULES {
        let cfg = config(rule, GateConfig::neutral());
        let (larv, _) = single(&f.base, &f.finetuned, &cfg);
        let uniform = uniform_merge(&f.base, &f.finetuned, &cfg.merger, OutputDtype::F32).unwrap();
        assert_eq!(
            to_bytes(&larv, SaveDtype::F32).unwrap(),
            to_bytes(&uniform, SaveDtype::F32).unwrap(),
            "{rule:?}"
        );
    }
}

#[test]
fn every_parameter_follows_its_group_scale() {
    let f = random_tasks(4, 6, 2, 5);
    let cfg = config(MergeRule::TaskArithmetic, GateConfig::default());
    let (out, report) = single(&f.base, &f.finetuned, &cfg);
    let partition = group_layers(&f.base, &GroupingConfig::default()).unwrap();
    let group_of = partition.group_of();
    for (name, b) in &f.base.tensors {
        let d0 = task_delta(b, &f.finetuned[0].tensors[name]);
        let d1 = task_delta(b, &f.finetuned[1].tensors[name]);
        let sum: Vec<f64> = d0.iter().zip(&d1).map(|(a, c)| a + c).collect();
        let s = group_of.get(name.as_str()).map_or(1.0, |&g| report.rows[g].s);
        assert_eq!(out.tensors[name].data(), compose(b.data(), &sum, s * 0.3), "{name}");
    }
    assert_eq!(out.names().collect::<Vec<_>>(), f.base.names().collect::<Vec<_>>());
}

#[test]
fn planted_conflict_is_shrunk_and_agreement_amplified() {
    let f = planted_conflict(PlantedConflict::default());
    let cfg = config(MergeRule::TaskArithmetic, GateConfig::default());
    let (out, report) = single(&f.base, &f.finetuned, &cfg);
    let tiers: Vec<Tier> = report.rows.iter().map(|r| r.tier.unwrap()).collect();
    assert_eq!(tiers[..2], [Tier::Shrink, Tier::Shrink], "{:#?}", report.rows);
    assert_eq!(tiers[4..], [Tier::Amplify, Tier::Amplify], "{:#?}", report.rows);

    let uniform = uniform_merge(&f.base, &f.finetuned, &cfg.merger, OutputDtype::F32).unwrap();
    let target = f.target.as_ref().unwrap();
    assert!(parameter_distance(&out, target) < parameter_distance(&uniform, target));
}

#[test]
fn commuting_low_rank_depth_fixture_has_increasing_contrast() {
    let f = depth_monotone(8, 16, 3);
    let cfg = config(MergeRule::Average, GateConfig::default());
    let (_, report) = single(&f.base, &f.finetuned, &cfg);
    let e: Vec<f64> = report.rows.iter().map(|r| r.e).collect();
    assert!(e.windows(2).all(|w| w[1] > w[0]), "{e:?}");
    assert!(report.rows.iter().all(|r| r.c < 1e-6));
}

#[test]
fn task_order_does_not_matter() {
    let f = random_tasks(3, 8, 3, 21);
    let mut reversed = f.finetuned.clone();
    reversed.reverse();
    for rule in RULES {
        let cfg = config(rule, GateConfig::default());
        let (a, ra) = single(&f.base, &f.finetuned, &cfg);
        let (b, rb) = single(&f.base, &reversed, &cfg);
        assert_eq!(ra.rows, rb.rows, "{rule:?}");
        if rule == MergeRule::IsoC {
            assert!(parameter_distance(&a, &b) < 1e-5);
        } else {
            assert_eq!(a, b, "{rule:?}");
        }
    }
}

#[test]
fn both_gates_yield_two_variants() {
    let f = random_tasks(3, 8, 2, 1);
    let cfg = config(MergeRule::Ties, GateConfig::with_mode(GateMode::Both));
    let out = run_larv_on(&f.base, &f.finetuned, &cfg, true).unwrap();
    assert_eq!(out.len(), 2);
    assert_eq!(out[0].report.meta.gate, "continuous");
    assert_eq!(out[1].report.meta.gate, "tiered");
    assert!(out[0].report.rows.iter().all(|r| r.tier.is_none() && r.s > 0.5 && r.s < 1.5));
    assert!(out[1].report.meta.thresholds.is_some());
}

#[test]
fn depth_schedule_ignores_scores() {
    let f = random_tasks(6, 6, 2, 2);
    let mut gate = GateConfig::with_mode(GateMode::Schedule);
    gate.schedule = ScheduleKind::Tier3;
    let (_, report) = single(&f.base, &f.finetuned, &config(MergeRule::Average, gate));
    let s: Vec<f64> = report.rows.iter().map(|r| r.s).collect();
    assert_eq!(s, [0.5, 0.5, 1.0, 1.0, 1.5, 1.5]);
    assert_eq!(report.meta.gate, "schedule:tier3");
}

#[test]
fn per_task_rescaling_reports_each_task() {
    let f = random_tasks(3, 8, 2, 8);
    let mut cfg = config(MergeRule::TaskArithmetic, GateConfig::default());
    cfg.rescale = RescaleTarget::PerTask;
    cfg.verbose = true;
    let (out, report) = single(&f.base, &f.finetuned, &cfg);
    assert_eq!(report.per_task.len(), 2);
    assert_eq!(report.rows.len(), 3);
    assert!(report.views.iter().any(|v| v.task == Some(1)));
    f.base.check_aligned(&out).unwrap();

    let neutral = MergeConfig { gate: GateConfig::neutral(), ..cfg };
    let (n, _) = single(&f.base, &f.finetuned, &neutral);
    let uniform = uniform_merge(&f.base, &f.finetuned, &neutral.merger, OutputDtype::F32).unwrap();
    assert_eq!(n, uniform);
}

#[test]
fn report_has_one_sorted_row_per_block() {
    let f = random_tasks(12, 4, 2, 0);
    let (_, report) = single(&f.base, &f.finetuned, &MergeConfig::default());
    let layers: Vec<usize> = report.rows.iter().map(|r| r.layer).collect();
    assert_eq!(layers, (1..=12).collect::<Vec<_>>());
    assert_eq!(report.meta.timings.per_layer_diagnostics_s.len(), 12);
    assert_eq!(report.meta.skipped, ["embed.weight", "head.weight"]);
    assert_eq!(report.to_csv().unwrap().lines().count(), 13);
}

#[test]
fn zero_base_block_names_the_layer() {
    let mut f = random_tasks(3, 4, 1, 0);
    let t = f.base.tensors.get_mut("blocks.1.attn.weight").unwrap();
    *t = larv::Tensor::zeros(vec![4, 4]).unwrap();
    let t = f.base.tensors.get_mut("blocks.1.mlp.weight").unwrap();
    *t = larv::Tensor::zeros(vec![8, 4]).unwrap();
    let err = run_larv_on(&f.base, &f.finetuned, &MergeConfig::default(), true).unwrap_err();
    let msg = err.to_string();
    assert!(msg.starts_with("[diagnostics]"), "{msg}");
    assert!(msg.contains("layer 2"), "{msg}");
}

#[test]
fn misaligned_inputs_fail_at_alignment() {
    let f = random_tasks(2, 4, 1, 0);
    let mut ft = f.finetuned[0].clone();
    ft.tensors.shift_remove("blocks.0.attn.bias");
    let err = run_larv_on(&f.base, &[ft], &MergeConfig::default(), true).unwrap_err();
    match err {
        LarvError::Stage { stage, source } => {
            assert_eq!(stage, "align");
            assert!(matches!(*source, LarvError::Misaligned { .. }));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn input_dtype_is_preserved_on_request() {
    let mut f = random_tasks(2, 4, 2, 0);
    let t = f.base.tensors.get_mut("blocks.0.attn.weight").unwrap();
    *t = larv::Tensor::with_dtype(larv::DType::F16, t.shape().to_vec(), t.data().to_vec()).unwrap();
    let cfg = MergeConfig { output_dtype: OutputDtype::Input, ..MergeConfig::default() };
    let (out, _) = single(&f.base, &f.finetuned, &cfg);
    assert_eq!(out.tensors["blocks.0.attn.weight"].dtype, larv::DType::F16);
    assert_eq!(out.tensors["blocks.0.mlp.weight"].dtype, larv::DType::F32);
}

#[test]
fn planted_conflict_ordering_holds_across_seeds() {
    for seed in 0..10 {
        let f = planted_conflict(PlantedConflict { seed, ..PlantedConflict::default() });
        for rule in [MergeRule::TaskArithmetic, MergeRule::Ties, MergeRule::Average] {
            let (_, report) = single(&f.base, &f.finetuned, &config(rule, GateConfig::default()));
            let s: Vec<f64> = report.rows.iter().map(|r| r.s).collect();
            assert_eq!(s, [0.5, 0.5, 1.0, 1.0, 1.5, 1.5], "seed {seed} {rule:?}");
        }
    }
}
