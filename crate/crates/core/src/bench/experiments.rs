//! The headline experiments, each turning a [`RunConfig`] into metrics rows.
//!
//! Every seed derives its own dataset, held-out scenes and rollout seeds, so
//! a `(config, seed)` pair always yields the same rows.

use log::info;

use super::config::{ExperimentKind, RunConfig};
use super::eval::{run_rollouts, EvalSettings, FlowPolicy};
use super::fusion::{gate_side_means, render_scenes, train_vision_policy, FusionSettings, VisionModel, VisionPolicy};
use super::metrics::MetricsRow;
use super::probe::{DepthMetrics, LinearProbe};
use super::train::{train_state_policy, PolicySettings, TrainedPolicy};
use crate::error::{Error, Result};
use crate::flow::PredictionKind;
use crate::g3t::FusionStrategy;
use crate::nn::Tensor;
use crate::world::{generate_dataset, generate_dataset_with, Dataset, DatasetConfig, LayoutParams, OcclusionConfig, RenderOutput};

/// Short horizon and long horizon compared by the degradation rows.
pub const DELTA_SHORT: usize = 10;
pub const DELTA_LONG: usize = 30;

/// Per-seed offsets for the derived data seeds.
const SEED_STATE_DATA: u64 = 1;
const SEED_VIEW_DATA: u64 = 3;
const SEED_GATE_SCENES: u64 = 4;
const SEED_PROBE_TRAIN: u64 = 5;
const SEED_PROBE_TEST: u64 = 6;
const ROLLOUT_SEED_BASE: u64 = 1000;

fn derived(seed: u64, offset: u64) -> u64 {
    seed.wrapping_mul(7).wrapping_add(offset)
}

pub fn policy_settings(cfg: &RunConfig, kind: PredictionKind, horizon: usize, seed: u64) -> PolicySettings {
    PolicySettings {
        kind,
        horizon,
        hidden: cfg.hidden,
        blocks: cfg.blocks,
        time_dim: cfg.time_dim,
        schedule: cfg.tau_schedule,
        steps: cfg.train_steps,
        batch: cfg.batch,
        lr: cfg.lr,
        warmup: cfg.warmup,
        weight_decay: cfg.weight_decay,
        seed,
    }
}

pub fn fusion_settings(cfg: &RunConfig, strategy: FusionStrategy, seed: u64, policy_weight: f64) -> FusionSettings {
    FusionSettings {
        strategy,
        model_dim: cfg.model_dim,
        heads: cfg.heads,
        gate_hidden: cfg.gate_hidden,
        positional: cfg.positional,
        lattice: cfg.lattice,
        policy: PolicySettings {
            steps: cfg.fusion_steps,
            batch: cfg.fusion_batch,
            lr: cfg.fusion_lr,
            warmup: cfg.fusion_steps / 20,
            ..policy_settings(cfg, cfg.head, cfg.chunk_h, seed)
        },
        policy_weight,
        aux_weight: cfg.aux_weight,
    }
}

/// Expert demonstrations with state observations for one seed.
pub fn state_dataset(cfg: &RunConfig, horizon: usize, seed: u64) -> Result<Dataset> {
    generate_dataset(cfg.episodes, horizon, derived(seed, SEED_STATE_DATA), OcclusionConfig::none())
}

/// Expert demonstrations with rendered views under the configured occlusion.
pub fn view_dataset(cfg: &RunConfig, seed: u64) -> Result<Dataset> {
    let mut d = DatasetConfig::new(cfg.fusion_episodes, cfg.chunk_h, derived(seed, SEED_VIEW_DATA), cfg.occlusion);
    d.with_views = true;
    d.grid = cfg.lattice;
    generate_dataset_with(&d)
}

pub fn eval_settings(cfg: &RunConfig, seed: u64) -> EvalSettings {
    EvalSettings {
        rollouts: cfg.rollouts,
        seed: ROLLOUT_SEED_BASE + seed,
        layout: LayoutParams::default(),
        perturbation: None,
        grid: cfg.lattice,
    }
}

/// Mean of the last 100 training losses.
pub fn final_loss(losses: &[f64]) -> Option<f64> {
    let n = losses.len().min(100);
    (n > 0).then(|| losses[losses.len() - n..].iter().sum::<f64>() / n as f64)
}

fn state_row(experiment: ExperimentKind, seed: u64, p: &TrainedPolicy, steps: usize) -> MetricsRow {
    MetricsRow {
        run_id: format!("{experiment}-s{seed}-{}-n{steps}-h{}", p.settings.kind, p.settings.horizon),
        seed,
        experiment: experiment.to_string(),
        head_kind: p.settings.kind.to_string(),
        denoise_steps: Some(steps),
        chunk_h: Some(p.settings.horizon),
        final_loss: final_loss(&p.losses),
        ..Default::default()
    }
}

/// Success rates of a state policy, unperturbed and under each configured
/// perturbation.
pub fn evaluate_state_policy(cfg: &RunConfig, experiment: ExperimentKind, p: &TrainedPolicy, seed: u64) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    let base = eval_settings(cfg, seed);
    for pert in std::iter::once(None).chain(cfg.perturbations.iter().copied().map(Some)) {
        let mut fp = FlowPolicy {
            policy: p,
            denoise_steps: cfg.denoise_steps,
        };
        let out = run_rollouts(&mut fp, &EvalSettings { perturbation: pert, ..base.clone() })?;
        let mut row = state_row(experiment, seed, p, cfg.denoise_steps);
        row.success_rate = Some(out.rate());
        if let Some(s) = pert {
            row.run_id = format!("{}-{}", row.run_id, s);
            row.perturbation_kind = s.kind.to_string();
            row.perturbation_magnitude = Some(s.magnitude);
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Trains the configured head for one seed.
pub fn train_for_seed(cfg: &RunConfig, seed: u64) -> Result<TrainedPolicy> {
    let ds = state_dataset(cfg, cfg.chunk_h, seed)?;
    train_state_policy(&ds, &policy_settings(cfg, cfg.head, cfg.chunk_h, seed))
}

/// H=30 rate minus H=10 rate for one kind, seed and step count.
#[derive(Debug, Clone, PartialEq)]
pub struct Degradation {
    pub seed: u64,
    pub head_kind: PredictionKind,
    pub denoise_steps: usize,
    pub short_rate: f64,
    pub long_rate: f64,
}

impl Degradation {
    pub fn delta(&self) -> f64 {
        self.long_rate - self.short_rate
    }
}

pub const DEGRADATION_COLUMNS: [&str; 6] = ["seed", "head_kind", "denoise_steps", "rate_h10", "rate_h30", "delta"];

pub fn write_degradations(d: &[Degradation], out: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(DEGRADATION_COLUMNS)?;
    for x in d {
        w.write_record([
            x.seed.to_string(),
            x.head_kind.to_string(),
            x.denoise_steps.to_string(),
            x.short_rate.to_string(),
            x.long_rate.to_string(),
            x.delta().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub rows: Vec<MetricsRow>,
    pub degradations: Vec<Degradation>,
}

/// Trains every (seed, kind, H) cell once and evaluates it at every step
/// count. Degradations are present when both H=10 and H=30 are in the grid.
pub fn ablation_grid(cfg: &RunConfig) -> Result<AblationResult> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        for &kind in &cfg.grid_kinds {
            for &h in &cfg.grid_chunks {
                let ds = state_dataset(cfg, h, seed)?;
                let p = train_state_policy(&ds, &policy_settings(cfg, kind, h, seed))?;
                for &n in &cfg.grid_steps {
                    let mut fp = FlowPolicy {
                        policy: &p,
                        denoise_steps: n,
                    };
                    let out = run_rollouts(&mut fp, &eval_settings(cfg, seed))?;
                    let mut row = state_row(ExperimentKind::Ablate, seed, &p, n);
                    row.success_rate = Some(out.rate());
                    info!("ablate seed {seed} {kind} H={h} N={n}: {:.3}", out.rate());
                    rows.push(row);
                }
            }
        }
    }
    let degradations = degradations(&rows);
    Ok(AblationResult { rows, degradations })
}

/// Pairs H=10 and H=30 rows sharing seed, kind and step count.
pub fn degradations(rows: &[MetricsRow]) -> Vec<Degradation> {
    let rate = |r: &MetricsRow| r.success_rate.unwrap_or(f64::NAN);
    rows.iter()
        .filter(|r| r.chunk_h == Some(DELTA_SHORT) && r.perturbation_kind.is_empty())
        .filter_map(|s| {
            let l = rows.iter().find(|l| {
                l.chunk_h == Some(DELTA_LONG)
                    && l.seed == s.seed
                    && l.head_kind == s.head_kind
                    && l.denoise_steps == s.denoise_steps
                    && l.perturbation_kind.is_empty()
            })?;
            Some(Degradation {
                seed: s.seed,
                head_kind: s.head_kind.parse().ok()?,
                denoise_steps: s.denoise_steps?,
                short_rate: rate(s),
                long_rate: rate(l),
            })
        })
        .collect()
}

pub fn vision_rate(cfg: &RunConfig, model: &VisionModel, seed: u64) -> Result<f64> {
    let mut vp = VisionPolicy::new(model, cfg.denoise_steps, cfg.occlusion, None);
    Ok(run_rollouts(&mut vp, &eval_settings(cfg, seed))?.rate())
}

/// Held-out scenes used for gate statistics.
pub fn gate_scenes(cfg: &RunConfig, seed: u64, occlusion: &OcclusionConfig) -> Result<Vec<RenderOutput>> {
    render_scenes(derived(seed, SEED_GATE_SCENES), cfg.gate_scenes, cfg.lattice, occlusion)
}

/// Trains and evaluates every configured strategy under one budget.
pub fn fusion_ablation(cfg: &RunConfig) -> Result<Vec<MetricsRow>> {
    let n_objects = LayoutParams::default().n_objects;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let ds = view_dataset(cfg, seed)?;
        for &strategy in &cfg.strategies {
            let model = train_vision_policy(&ds, &fusion_settings(cfg, strategy, seed, cfg.policy_weight), n_objects)?;
            let rate = vision_rate(cfg, &model, seed)?;
            let gates = gate_side_means(&model, &gate_scenes(cfg, seed, &cfg.occlusion)?)?;
            info!("fusion {strategy} seed {seed}: {rate:.3}");
            rows.push(MetricsRow {
                run_id: format!("fusion_ablate-s{seed}-{strategy}-n{}-h{}", cfg.denoise_steps, cfg.chunk_h),
                seed,
                experiment: ExperimentKind::FusionAblate.to_string(),
                head_kind: cfg.head.to_string(),
                fusion_strategy: strategy.to_string(),
                denoise_steps: Some(cfg.denoise_steps),
                chunk_h: Some(cfg.chunk_h),
                success_rate: Some(rate),
                final_loss: final_loss(&model.losses),
                gate_mean_clean: gates.map(|g| g.0),
                gate_mean_corrupted: gates.map(|g| g.1),
                ..Default::default()
            });
        }
    }
    Ok(rows)
}

/// Trains the configured fusion stack on the depth objective alone. Probing
/// and gate export read only the stack, so the flow head is left untrained.
pub fn train_fusion_stack(cfg: &RunConfig, seed: u64) -> Result<VisionModel> {
    let ds = view_dataset(cfg, seed)?;
    train_vision_policy(&ds, &fusion_settings(cfg, cfg.strategy, seed, 0.0), LayoutParams::default().n_objects)
}

/// Probe results for one feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    pub features: String,
    pub metrics: DepthMetrics,
    pub ridge: bool,
}

pub const PROBE_COLUMNS: [&str; 6] = ["seed", "features", "rmse", "absrel", "delta1", "ridge"];

/// Fits linear depth probes on monocular tokens and on the stack's spatial
/// features, then scores both on held-out scenes.
pub fn probe_model(cfg: &RunConfig, model: &VisionModel, seed: u64) -> Result<[ProbeOutcome; 2]> {
    let train = render_scenes(derived(seed, SEED_PROBE_TRAIN), cfg.probe_train_scenes, cfg.lattice, &cfg.occlusion)?;
    let test = render_scenes(derived(seed, SEED_PROBE_TEST), cfg.probe_test_scenes, cfg.lattice, &cfg.occlusion)?;
    let depth = |rs: &[RenderOutput]| rs.iter().map(|r| r.depth_truth.clone()).collect::<Vec<_>>();
    let mono = |rs: &[RenderOutput]| rs.iter().map(|r| r.mono.clone()).collect::<Vec<_>>();
    let fused = |rs: &[RenderOutput]| rs.iter().map(|r| model.spatial_features(r)).collect::<Result<Vec<Tensor<f64>>>>();
    let fit = |name: &str, tr: Vec<Tensor<f64>>, te: Vec<Tensor<f64>>| -> Result<ProbeOutcome> {
        let p = LinearProbe::fit(&tr, &depth(&train))?;
        Ok(ProbeOutcome {
            features: name.to_string(),
            metrics: p.evaluate(&te, &depth(&test))?,
            ridge: p.ridge,
        })
    };
    Ok([
        fit("mono", mono(&train), mono(&test))?,
        fit(model.settings.strategy.as_str(), fused(&train)?, fused(&test)?)?,
    ])
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub rows: Vec<MetricsRow>,
    pub details: Vec<(u64, ProbeOutcome)>,
}

pub fn write_probe_details(d: &[(u64, ProbeOutcome)], out: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PROBE_COLUMNS)?;
    for (seed, o) in d {
        w.write_record([
            seed.to_string(),
            o.features.clone(),
            o.metrics.rmse.to_string(),
            o.metrics.absrel.to_string(),
            o.metrics.delta1.to_string(),
            o.ridge.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Monocular versus fused depth probes, one pair of rows per seed. A model
/// given for a seed is probed as is; otherwise a stack is trained.
pub fn depth_probe(cfg: &RunConfig, trained: &mut dyn FnMut(u64) -> Result<Option<VisionModel>>) -> Result<ProbeResult> {
    let mut rows = Vec::new();
    let mut details = Vec::new();
    for &seed in &cfg.seeds {
        let model = match trained(seed)? {
            Some(m) => m,
            None => train_fusion_stack(cfg, seed)?,
        };
        for o in probe_model(cfg, &model, seed)? {
            info!("probe seed {seed} {}: rmse {:.4}", o.features, o.metrics.rmse);
            rows.push(MetricsRow {
                run_id: format!("depth_probe-s{seed}-{}{}", o.features, if o.ridge { "-ridge" } else { "" }),
                seed,
                experiment: ExperimentKind::DepthProbe.to_string(),
                fusion_strategy: o.features.clone(),
                probe_rmse: Some(o.metrics.rmse),
                probe_absrel: Some(o.metrics.absrel),
                ..Default::default()
            });
            details.push((seed, o));
        }
    }
    Ok(ProbeResult { rows, details })
}

/// One exported gate value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateRecord {
    pub token: usize,
    pub row: usize,
    pub col: usize,
    pub gate: f64,
    pub corrupted_left: bool,
    pub corrupted_right: bool,
}

pub const GATE_COLUMNS: [&str; 6] = ["token", "row", "col", "gate", "corrupted_left", "corrupted_right"];

/// Gate values for each scene, scenes in order and tokens in lattice order.
pub fn export_gate_maps(model: &VisionModel, scenes: &[RenderOutput]) -> Result<Vec<GateRecord>> {
    let mut out = Vec::new();
    for r in scenes {
        let gate = model
            .gate_values(r)?
            .ok_or_else(|| Error::Config(format!("strategy {} has no gate", model.settings.strategy)))?;
        out.extend(gate.iter().enumerate().map(|(t, &g)| GateRecord {
            token: t,
            row: t / r.grid,
            col: t % r.grid,
            gate: g,
            corrupted_left: r.corrupted_left.contains(&t),
            corrupted_right: r.corrupted_right.contains(&t),
        }));
    }
    Ok(out)
}

pub fn write_gate_maps(records: &[GateRecord], out: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(GATE_COLUMNS)?;
    for g in records {
        w.write_record([
            g.token.to_string(),
            g.row.to_string(),
            g.col.to_string(),
            g.gate.to_string(),
            (g.corrupted_left as u8).to_string(),
            (g.corrupted_right as u8).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// The metrics row summarizing a gate export.
pub fn gate_row(model: &VisionModel, seed: u64, scenes: &[RenderOutput]) -> Result<MetricsRow> {
    let gates = gate_side_means(model, scenes)?;
    Ok(MetricsRow {
        run_id: format!("export_gates-s{seed}-{}", model.settings.strategy),
        seed,
        experiment: ExperimentKind::ExportGates.to_string(),
        fusion_strategy: model.settings.strategy.to_string(),
        gate_mean_clean: gates.map(|g| g.0),
        gate_mean_corrupted: gates.map(|g| g.1),
        ..Default::default()
    })
}
