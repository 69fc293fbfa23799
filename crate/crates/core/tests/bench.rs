use amlb_core::bench::experiments::*;
use amlb_core::bench::report::{aggregate, mean_std};
use amlb_core::bench::*;
use amlb_core::flow::PredictionKind;
use amlb_core::g3t::FusionStrategy;
use amlb_core::world::{generate_dataset, OcclusionConfig, OcclusionSide, PerturbationSpec};
use amlb_core::Error;

fn tiny_config() -> RunConfig {
    RunConfig {
        seeds: vec![0, 1, 2],
        train_steps: 2,
        warmup: 1,
        batch: 4,
        hidden: 8,
        blocks: 1,
        time_dim: 4,
        episodes: 2,
        rollouts: 2,
        model_dim: 8,
        heads: 2,
        gate_hidden: 8,
        lattice: 4,
        fusion_steps: 2,
        fusion_batch: 2,
        fusion_episodes: 1,
        probe_train_scenes: 4,
        probe_test_scenes: 2,
        gate_scenes: 2,
        ..RunConfig::default()
    }
}

#[test]
fn expert_succeeds_and_random_fails() {
    let s = EvalSettings::default();
    let expert = run_rollouts(&mut ExpertPolicy { horizon: 8 }, &s).unwrap();
    assert!(expert.rate() >= 0.99, "expert {}", expert.rate());
    let random = run_rollouts(&mut RandomPolicy { horizon: 8 }, &s).unwrap();
    assert!(random.rate() <= 0.05, "random {}", random.rate());
    assert_eq!(expert.rollouts, 200);
}

#[test]
fn zero_magnitude_rows_equal_unperturbed() {
    let cfg = RunConfig {
        rollouts: 20,
        perturbations: ["camera:0", "noise:0", "layout:0", "light:0"]
            .iter()
            .map(|s| PerturbationSpec::parse(s).unwrap())
            .collect(),
        ..tiny_config()
    };
    let p = train_for_seed(&cfg, 0).unwrap();
    let rows = evaluate_state_policy(&cfg, ExperimentKind::Eval, &p, 0).unwrap();
    assert_eq!(rows.len(), 5);
    for r in &rows[1..] {
        assert_eq!(r.success_rate, rows[0].success_rate);
        assert_eq!(r.perturbation_magnitude, Some(0.0));
    }
}

#[test]
fn smoke_training_halves_loss() {
    for seed in 0..3 {
        let ds = generate_dataset(32, 8, seed + 40, OcclusionConfig::none()).unwrap();
        let s = PolicySettings {
            hidden: 32,
            blocks: 2,
            steps: 3000,
            batch: 32,
            seed,
            ..Default::default()
        };
        let p = train_state_policy(&ds, &s).unwrap();
        let head: f64 = p.losses[..50].iter().sum::<f64>() / 50.0;
        let tail: f64 = p.losses[p.losses.len() - 50..].iter().sum::<f64>() / 50.0;
        assert!(tail <= 0.5 * head, "seed {seed}: {head} -> {tail}");
    }
}

#[test]
fn zero_steps_checkpoint_is_initialization() {
    let ds = generate_dataset(2, 8, 1, OcclusionConfig::none()).unwrap();
    let s = PolicySettings {
        hidden: 8,
        blocks: 1,
        steps: 0,
        ..Default::default()
    };
    let p = train_state_policy(&ds, &s).unwrap();
    let (_, init) = amlb_core::bench::train::init_policy(&s, amlb_core::bench::train::STATE_COND_DIM).unwrap();
    let c = p.to_checkpoint();
    assert_eq!(c.step, 0);
    for (t, q) in c.params.iter().zip(init.iter()) {
        assert_eq!(t.name, q.name);
        assert_eq!(t.data, q.value.data());
    }
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let ds = generate_dataset(3, 8, 2, OcclusionConfig::none()).unwrap();
    let s = PolicySettings {
        hidden: 8,
        blocks: 1,
        steps: 20,
        batch: 8,
        ..Default::default()
    };
    let a = train_state_policy(&ds, &s).unwrap().to_checkpoint().to_bytes();
    let b = train_state_policy(&ds, &s).unwrap().to_checkpoint().to_bytes();
    assert_eq!(a, b);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.amlb");
    Checkpoint::from_bytes(&a).unwrap().save(&path).unwrap();
    let back = TrainedPolicy::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(back.to_checkpoint().to_bytes(), a);
    assert_eq!(back.settings, s);
}

#[test]
fn periodic_checkpoints_are_emitted() {
    let ds = generate_dataset(2, 8, 3, OcclusionConfig::none()).unwrap();
    let s = PolicySettings {
        hidden: 8,
        blocks: 1,
        steps: 10,
        batch: 4,
        ..Default::default()
    };
    let mut steps = Vec::new();
    train_state_policy_with(&ds, &s, 4, &mut |c| {
        steps.push(c.step);
        Ok(())
    })
    .unwrap();
    assert_eq!(steps, [4, 8]);
}

#[test]
fn ablation_grid_is_complete_and_deterministic() {
    let cfg = tiny_config();
    let a = ablation_grid(&cfg).unwrap();
    assert_eq!(a.rows.len(), 2 * 3 * 3 * 3);
    let mut ids: Vec<&str> = a.rows.iter().map(|r| r.run_id.as_str()).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 54);
    assert_eq!(a.degradations.len(), 2 * 3 * 3);
    for d in &a.degradations {
        let find = |h| {
            a.rows
                .iter()
                .find(|r| r.seed == d.seed && r.head_kind == d.head_kind.as_str() && r.denoise_steps == Some(d.denoise_steps) && r.chunk_h == Some(h))
                .unwrap()
                .success_rate
                .unwrap()
        };
        assert_eq!(d.delta(), find(30) - find(10));
    }
    let b = ablation_grid(&cfg).unwrap();
    let (mut x, mut y) = (Vec::new(), Vec::new());
    write_metrics(&a.rows, &mut x).unwrap();
    write_metrics(&b.rows, &mut y).unwrap();
    assert_eq!(x, y);
}

#[test]
fn fusion_ablation_rows_and_gate_columns() {
    let cfg = tiny_config();
    let rows = fusion_ablation(&cfg).unwrap();
    assert_eq!(rows.len(), 15);
    for r in &rows {
        let g3t = r.fusion_strategy == FusionStrategy::G3t.as_str();
        assert_eq!(r.gate_mean_clean.is_some(), g3t, "{}", r.run_id);
        assert_eq!(r.gate_mean_corrupted.is_some(), g3t);
        assert!(r.success_rate.is_some());
    }
}

#[test]
fn depth_probe_and_gate_export() {
    let cfg = RunConfig {
        seeds: vec![4],
        ..tiny_config()
    };
    let res = depth_probe(&cfg, &mut |_| Ok(None)).unwrap();
    assert_eq!(res.rows.len(), 2);
    assert_eq!(res.rows[0].fusion_strategy, "mono");
    assert!(res.rows.iter().all(|r| r.probe_rmse.unwrap() >= 0.0));

    let model = train_fusion_stack(&cfg, 4).unwrap();
    let scenes = gate_scenes(&cfg, 4, &OcclusionConfig::full(OcclusionSide::Left)).unwrap();
    let recs = export_gate_maps(&model, &scenes).unwrap();
    assert_eq!(recs.len(), 2 * 16);
    assert!(recs.iter().all(|g| g.gate > 0.0 && g.gate < 1.0 && g.corrupted_left && !g.corrupted_right));
    let mut buf = Vec::new();
    write_gate_maps(&recs, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.lines().all(|l| l.split(',').count() == 6));
    assert_eq!(text.lines().next().unwrap(), GATE_COLUMNS.join(","));
}

fn ablate_row(seed: u64, kind: &str, n: usize, h: usize, rate: f64) -> MetricsRow {
    MetricsRow {
        run_id: format!("r{seed}{kind}{n}{h}"),
        seed,
        experiment: "ablate".into(),
        head_kind: kind.into(),
        denoise_steps: Some(n),
        chunk_h: Some(h),
        success_rate: Some(rate),
        ..Default::default()
    }
}

#[test]
fn report_aggregates_by_hand() {
    let rows = vec![
        ablate_row(0, "action", 4, 10, 0.5),
        ablate_row(1, "action", 4, 10, 0.7),
        ablate_row(2, "action", 4, 10, 0.9),
    ];
    let aggs = aggregate(&rows).unwrap();
    assert_eq!(aggs.len(), 1);
    let s = aggs[0].metrics[0].unwrap();
    assert!((s.mean - 0.7).abs() < 1e-12);
    assert!((s.std - 0.2).abs() < 1e-12);
    assert_eq!(mean_std(&[0.3]).unwrap().std, 0.0);
    assert!(matches!(emit_report(&[]), Err(Error::NoData(_))));
}

#[test]
fn report_svgs_are_well_formed() {
    let mut rows = Vec::new();
    for seed in 0..2 {
        for kind in ["action", "velocity"] {
            for n in [2, 4] {
                for h in [8, 10, 30] {
                    rows.push(ablate_row(seed, kind, n, h, 0.1 * (seed as f64 + n as f64) / h as f64));
                }
            }
        }
    }
    rows.push(MetricsRow {
        experiment: "depth_probe".into(),
        fusion_strategy: "mono".into(),
        probe_rmse: Some(0.1),
        ..Default::default()
    });
    rows.push(MetricsRow {
        experiment: "depth_probe".into(),
        fusion_strategy: "g3t".into(),
        probe_rmse: Some(0.05),
        ..Default::default()
    });
    let rep = emit_report(&rows).unwrap();
    let names: Vec<&str> = rep.tables.iter().map(|t| t.0.as_str()).collect();
    assert_eq!(names, ["ablate_summary.csv", "depth_probe_summary.csv"]);
    assert_eq!(rep.tables[0].1.lines().count(), 1 + 12);
    let expected = [("success_vs_chunk.svg", 4), ("success_vs_steps.svg", 6), ("probe_rmse.svg", 0)];
    for ((name, svg), (want_name, lines)) in rep.plots.iter().zip(expected) {
        assert_eq!(name, want_name);
        let doc = roxmltree::Document::parse(svg).unwrap();
        let polylines = doc.descendants().filter(|n| n.has_tag_name("polyline")).count();
        assert_eq!(polylines, lines, "{name}");
    }
    assert_eq!(rep.plots.len(), 3);
}

#[test]
fn selftest_passes() {
    for c in run_selftest() {
        assert!(c.passed, "{}: {}", c.name, c.detail);
    }
}

#[test]
fn config_lists_every_missing_key() {
    let err = RunConfig::parse("[policy]\nhead =\nchunk_h =\n[fusion]\nlattice = \n").unwrap_err();
    let msg = err.to_string();
    for k in ["policy.head", "policy.chunk_h", "fusion.lattice"] {
        assert!(msg.contains(k), "{msg}");
    }
    let err = RunConfig::parse("[policy]\nchunk_h = eight\n").unwrap_err().to_string();
    assert!(err.contains("policy.chunk_h") && err.contains("unsigned integer") && err.contains("eight"), "{err}");
    assert_eq!(RunConfig::parse("[policy]\nhead = velocity\n").unwrap().head, PredictionKind::Velocity);
}
