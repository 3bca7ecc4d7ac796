use proptest::prelude::*;

use larv::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Tensor};
use larv::diagnostics::{composite_score, standardize, view_ccc, ScoreParams};
use larv::gates::{classify, continuous_gate, depth_schedule, tier_thresholds, Tier};
use larv::mergers::{merge_average, merge_isoc, merge_task_arithmetic, merge_ties};
use larv::pipeline::{compose, task_delta};
use larv::spectral::{effective_rank, exact_svd, gram_commutator_norms, Matrix, SketchSeed, SvdConfig};
use larv::{ScheduleKind, TierValues};

fn matrix(max: usize) -> impl Strategy<Value = Matrix> {
    (1..=max, 1..=max).prop_flat_map(|(r, c)| {
        prop::collection::vec(-3.0f64..3.0, r * c).prop_map(move |v| Matrix::from_row_slice(r, c, &v))
    })
}

fn pair(max: usize) -> impl Strategy<Value = (Matrix, Matrix)> {
    (2..=max, 2..=max).prop_flat_map(|(r, c)| {
        (
            prop::collection::vec(-3.0f64..3.0, r * c),
            prop::collection::vec(-3.0f64..3.0, r * c),
        )
            .prop_map(move |(a, b)| (Matrix::from_row_slice(r, c, &a), Matrix::from_row_slice(r, c, &b)))
    })
}

fn deltas(max_k: usize, n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-2.0f64..2.0, n), 1..=max_k)
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

fn nonzero(m: &Matrix) -> bool {
    m.norm() > 1e-3
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn checkpoint_round_trips(
        tensors in prop::collection::vec(
            (prop::collection::vec(1usize..5, 1..4), any::<u64>()),
            1..6,
        )
    ) {
        let mut ckpt = Checkpoint::new();
        for (i, (shape, seed)) in tensors.iter().enumerate() {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|j| f32::from_bits((seed.wrapping_mul(j as u64 + 1) as u32) & 0x3fff_ffff)).collect();
            ckpt.insert(format!("t{i}.w"), Tensor::new(shape.clone(), data).unwrap()).unwrap();
        }
        ckpt.meta.insert("source".into(), "prop".into());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.safetensors");
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        prop_assert_eq!(back.names().collect::<Vec<_>>(), ckpt.names().collect::<Vec<_>>());
        prop_assert_eq!(back, ckpt);
    }

    #[test]
    fn task_delta_reconstructs_finetuned(b in prop::collection::vec(-1e3f32..1e3, 1..64), seed in any::<u32>()) {
        let f: Vec<f32> = b.iter().enumerate().map(|(i, &x)| x + ((seed.wrapping_add(i as u32) % 2001) as f32 - 1000.0) * 1e-3).collect();
        let bt = Tensor::new(vec![b.len()], b.clone()).unwrap();
        let ft = Tensor::new(vec![f.len()], f.clone()).unwrap();
        prop_assert_eq!(compose(&b, &task_delta(&bt, &ft), 1.0), f);
    }

    #[test]
    fn effective_rank_is_scale_invariant_and_bounded(m in matrix(7), a in 1e-3f64..1e3) {
        prop_assume!(nonzero(&m));
        let cfg = SvdConfig::exact();
        let seed = SketchSeed::new(0, 0);
        let r = effective_rank(&m, &cfg, seed).unwrap();
        prop_assert!(r >= 1.0 && r <= m.nrows().min(m.ncols()) as f64 + 1e-12);
        let scaled = effective_rank(&(&m * a), &cfg, seed).unwrap();
        prop_assert!(rel_close(r, scaled, 1e-9), "{} vs {}", r, scaled);
    }

    #[test]
    fn singular_values_are_sorted_and_nonnegative(m in matrix(8)) {
        let s = exact_svd(&m).unwrap();
        prop_assert_eq!(s.values.len(), m.nrows().min(m.ncols()));
        prop_assert!(s.values.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(s.values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn conflict_is_invariant_to_positive_scaling((a, b) in pair(6), x in 1e-2f64..1e2, y in 1e-2f64..1e2) {
        prop_assume!(nonzero(&a) && nonzero(&b));
        let c = view_ccc(&a, &b, 0.0).unwrap();
        let scaled = view_ccc(&(&a * x), &(&b * y), 0.0).unwrap();
        prop_assert!((c - scaled).abs() <= 1e-9 * c.max(1e-12) + 1e-12, "{} vs {}", c, scaled);
        prop_assert!(c >= 0.0);
    }

    #[test]
    fn gram_commutators_are_symmetric_and_bilinear((a, b) in pair(7), x in 0.1f64..10.0, y in 0.1f64..10.0) {
        let (l, r) = gram_commutator_norms(&a, &b).unwrap();
        let (ls, rs) = gram_commutator_norms(&b, &a).unwrap();
        prop_assert!(rel_close(l, ls, 1e-9) || (l - ls).abs() < 1e-12);
        prop_assert!(rel_close(r, rs, 1e-9) || (r - rs).abs() < 1e-12);
        let (lx, rx) = gram_commutator_norms(&(&a * x), &(&b * y)).unwrap();
        prop_assert!((lx - x * y * l).abs() <= 1e-9 * (x * y * l).max(1e-9));
        prop_assert!((rx - x * y * r).abs() <= 1e-9 * (x * y * r).max(1e-9));
    }

    #[test]
    fn gram_commutators_agree_with_direct_products((a, b) in pair(7)) {
        let (l, r) = gram_commutator_norms(&a, &b).unwrap();
        let direct_l = (&a * b.transpose() - &b * a.transpose()).norm();
        let direct_r = (a.transpose() * &b - b.transpose() * &a).norm();
        prop_assert!((l - direct_l).abs() <= 1e-9 * direct_l.max(1.0));
        prop_assert!((r - direct_r).abs() <= 1e-9 * direct_r.max(1.0));
    }

    #[test]
    fn entrywise_mergers_ignore_task_order(ds in deltas(5, 12), shift in 0usize..5) {
        let mut rotated = ds.clone();
        rotated.rotate_left(shift % ds.len());
        let v: Vec<&[f64]> = ds.iter().map(Vec::as_slice).collect();
        let w: Vec<&[f64]> = rotated.iter().map(Vec::as_slice).collect();
        prop_assert_eq!(merge_average(&v).unwrap(), merge_average(&w).unwrap());
        prop_assert_eq!(merge_task_arithmetic(&v).unwrap(), merge_task_arithmetic(&w).unwrap());
        prop_assert_eq!(merge_ties(&v, 0.2).unwrap(), merge_ties(&w, 0.2).unwrap());
    }

    #[test]
    fn mergers_commute_with_positive_scaling(ds in deltas(4, 12), c in 0.1f64..10.0) {
        let v: Vec<&[f64]> = ds.iter().map(Vec::as_slice).collect();
        let scaled: Vec<Vec<f64>> = ds.iter().map(|d| d.iter().map(|x| c * x).collect()).collect();
        let w: Vec<&[f64]> = scaled.iter().map(Vec::as_slice).collect();
        type Merge = fn(&[&[f64]]) -> larv::Result<Vec<f64>>;
        let rules: [(&str, Merge); 4] = [
            ("average", merge_average),
            ("sum", merge_task_arithmetic),
            ("ties", |d| merge_ties(d, 0.3)),
            ("isoc", |d| merge_isoc(d, 3, 4, 1.3)),
        ];
        for (name, f) in rules {
            let a = f(&v).unwrap();
            let b = f(&w).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((c * x - y).abs() <= 1e-9 * (1.0 + y.abs()), "{}: {} vs {}", name, c * x, y);
            }
        }
    }

    #[test]
    fn continuous_gate_is_bounded_and_monotone(w1 in 0.0f64..10.0, w2 in 0.0f64..10.0, gamma in 0.1f64..10.0) {
        let (lo, hi) = if w1 <= w2 { (w1, w2) } else { (w2, w1) };
        let (a, b) = (continuous_gate(lo, gamma), continuous_gate(hi, gamma));
        prop_assert!(a <= b);
        prop_assert!((0.5..=1.5).contains(&a) && (0.5..=1.5).contains(&b));
    }

    #[test]
    fn thresholds_ignore_score_order(mut ws in prop::collection::vec(0.0f64..5.0, 1..40), shift in 0usize..40) {
        let a = tier_thresholds(&ws, 1.0 / 3.0, 2.0 / 3.0).unwrap();
        let n = ws.len();
        ws.rotate_left(shift % n);
        ws.reverse();
        prop_assert_eq!(a, tier_thresholds(&ws, 1.0 / 3.0, 2.0 / 3.0).unwrap());
        prop_assert!(a.t1 <= a.t2);
    }

    #[test]
    fn tercile_buckets_have_ceiling_sizes(layers in 1usize..60, seed in any::<u64>()) {
        // distinct scores in a seed-dependent order
        let ws: Vec<f64> = (0..layers).map(|i| ((i as u64 * 2654435761 + seed) % 1_000_003) as f64 + i as f64 * 1e-7).collect();
        let th = tier_thresholds(&ws, 1.0 / 3.0, 2.0 / 3.0).unwrap();
        let shrink = ws.iter().filter(|&&w| classify(w, &th) == Tier::Shrink).count();
        let not_amplify = ws.iter().filter(|&&w| classify(w, &th) != Tier::Amplify).count();
        prop_assert_eq!(shrink, layers.div_ceil(3));
        prop_assert_eq!(not_amplify, (2 * layers).div_ceil(3));
    }

    #[test]
    fn standardized_values_are_centered(xs in prop::collection::vec(-100.0f64..100.0, 2..50)) {
        let z = standardize(&xs).unwrap();
        let n = z.len() as f64;
        let mean = z.iter().sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9);
        let var = z.iter().map(|v| v * v).sum::<f64>() / n;
        prop_assert!(var.abs() < 1e-12 || (var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn composite_score_moves_the_right_way(e in 0.0f64..20.0, r in 0.01f64..1.0, z in -3.0f64..3.0, h in 1e-3f64..0.5) {
        let p = ScoreParams::default();
        let w = composite_score(e, r, z, &p);
        prop_assert!(w >= 0.0);
        prop_assert!(composite_score(e + h, r, z, &p) >= w);
        prop_assert!(composite_score(e, (r + h).min(1.0), z, &p) >= w);
        prop_assert!(composite_score(e, r, z + h, &p) <= w);
    }

    #[test]
    fn tier_schedules_are_nondecreasing(layers in 1usize..48, kind in 0usize..5) {
        let kind = [ScheduleKind::Linear, ScheduleKind::Tier2, ScheduleKind::Tier3, ScheduleKind::Tier6, ScheduleKind::Tier12][kind].clone();
        let s = depth_schedule(&kind, layers, &TierValues::default()).unwrap();
        prop_assert_eq!(s.len(), layers);
        prop_assert!(s.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(s.iter().all(|&v| (0.5..=1.5).contains(&v)));
    }
}
