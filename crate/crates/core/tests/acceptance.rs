//! Acceptance suite: runs each criterion in sequence and prints one
//! PASS/FAIL line per criterion. Pass criterion numbers as arguments to run
//! a subset, e.g. `cargo test --test acceptance -- 1 2 6`.

use std::time::{Duration, Instant};

use amlb_core::bench::experiments::{ablation_grid, gate_scenes, probe_model, train_fusion_stack, export_gate_maps};
use amlb_core::bench::*;
use amlb_core::flow::*;
use amlb_core::g3t::*;
use amlb_core::nn::{grad_check, AdamW, AdamWConfig, CosineSchedule, Graph, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamStore, RngStream, Tensor, Var};
use amlb_core::world::OcclusionConfig;
use amlb_core::{Error, Result};

type T = Tensor<f64>;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { passed, detail })
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

// 1. Velocity-form loss equals the weighted action loss.
fn loss_identity() -> Result<Outcome> {
    let t0 = Instant::now();
    let mut r = RngStream::new(1, 0);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (h, d) = (1 + r.below(30), 1 + r.below(7));
        let clean = ActionChunk::new(r.normal_tensor(&[h, d]))?;
        let noise: T = r.normal_tensor(&[h, d]);
        let tau = r.uniform() * (1.0 - TAU_GUARD);
        let sample = interpolate(&clean, &noise, tau)?;
        let pred: T = r.normal_tensor(&[h, d]);
        let v_form = action_loss_velocity_form(&pred, clean.values(), &sample)?;
        let a_form = pred.sub(clean.values())?.sq_norm();
        let expect = loss_weight(tau)? * a_form;
        worst = worst.max((v_form - expect).abs() / expect.abs().max(1e-300));
    }
    let dt = t0.elapsed();
    outcome(worst < 1e-10 && within(dt, 5.0), format!("max rel err {worst:.2e}, {:.2}s", dt.as_secs_f64()))
}

// 2. A clean-predicting oracle is integrated exactly.
fn oracle_sampler() -> Result<Outcome> {
    let t0 = Instant::now();
    let mut r = RngStream::new(2, 0);
    let clean: T = r.normal_tensor(&[8, 7]);
    let mut worst = 0.0f64;
    for n in [1, 2, 4, 10] {
        let mut oracle = CleanOracle::new(clean.clone(), PredictionKind::Action);
        let out = sample_actions(&mut oracle, 8, 7, n, &mut RngStream::new(n as u64, 1))?;
        worst = worst.max(out.max_abs_diff(&clean)?);
    }
    let dt = t0.elapsed();
    outcome(worst < 1e-9 && within(dt, 1.0), format!("max abs err {worst:.2e}, {:.3}s", dt.as_secs_f64()))
}

fn near_atom_fraction(x: &T) -> f64 {
    x.data().iter().filter(|v| (v.abs() - 1.0).abs() < 0.1).count() as f64 / x.data().len() as f64
}

// 3. Sampling a two-atom mixture with the posterior oracle and a trained net.
fn mixture_sampling() -> Result<Outcome> {
    let t0 = Instant::now();
    let n = 10_000;
    let mut oracle = MixtureOracle {
        atoms: vec![(-1.0, 0.5), (1.0, 0.5)],
    };
    let oracle_frac = near_atom_fraction(&sample_actions(&mut oracle, n, 1, 10, &mut RngStream::new(3, 0))?);

    let cfg = PolicyConfig {
        horizon: 1,
        action_dim: 1,
        cond_dim: 1,
        hidden: 32,
        blocks: 2,
        time_dim: 16,
        kind: PredictionKind::Action,
    };
    let mut store = ParamStore::<f64>::new();
    let mut r = RngStream::new(3, 1);
    let net = PolicyNetwork::new(&mut store, "mix", cfg, &mut r)?;
    let (steps, batch) = (3000, 128);
    let mut opt = AdamW::new(&store, AdamWConfig { lr: 1e-3, ..Default::default() });
    let sched = CosineSchedule {
        base_lr: 1e-3,
        warmup: 150,
        total: steps,
    };
    let cond = T::zeros(&[batch, 1]);
    for step in 0..steps {
        let clean = Tensor::matrix(batch, 1, (0..batch).map(|_| if r.uniform() < 0.5 { -1.0 } else { 1.0 }).collect())?;
        let draws = sample_draws(batch, 1, TauSchedule::default(), &mut r);
        let mut g = Graph::new();
        let c = g.constant(cond.clone());
        let loss = flow_loss(&mut g, &store, &net, c, &clean, &draws)?;
        g.backward(loss)?;
        g.accumulate_param_grads(&mut store)?;
        opt.step(&mut store, sched.lr(step))?;
    }
    let mut den = PolicyDenoiser::new(&net, &store, T::zeros(&[n, 1]));
    let net_frac = near_atom_fraction(&sample_actions(&mut den, n, 1, 10, &mut RngStream::new(3, 2))?);
    let dt = t0.elapsed();
    outcome(
        oracle_frac >= 0.99 && net_frac >= 0.95 && within(dt, 120.0),
        format!("oracle {:.2}%, trained {:.2}%, {:.1}s", 100.0 * oracle_frac, 100.0 * net_frac, dt.as_secs_f64()),
    )
}

fn probe_loss(g: &mut Graph<f64>, y: Var, probe: &T) -> Result<Var> {
    let p = g.constant(probe.clone());
    let m = g.mul(y, p)?;
    Ok(g.sum(m))
}

// 4. Finite-difference gradients for every layer and the full loss.
fn gradient_suite() -> Result<Outcome> {
    let t0 = Instant::now();
    let tol = 1e-4;
    let mut r = RngStream::new(4, 0);
    let x: T = r.normal_tensor(&[6, 6]);
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    let mut record = |name: &str, rep: amlb_core::nn::GradCheckReport| {
        worst = worst.max(rep.max_rel_error);
        if !rep.passed() {
            failed.push(name.to_string());
        }
    };

    let mut store = ParamStore::<f64>::new();
    let lin = Linear::new(&mut store, "lin", 6, 5, true, &mut r)?;
    let probe: T = r.normal_tensor(&[6, 5]);
    record("linear", grad_check(&mut store, |g, st| {
        let xv = g.constant(x.clone());
        let y = lin.forward(g, st, xv)?;
        probe_loss(g, y, &probe)
    }, tol)?);

    let mut store = ParamStore::<f64>::new();
    let ln = LayerNorm::new(&mut store, "ln", 6)?;
    store.set_value(ln.gamma, r.normal_tensor(&[1, 6]))?;
    let probe: T = r.normal_tensor(&[6, 6]);
    record("layer_norm", grad_check(&mut store, |g, st| {
        let xv = g.constant(x.clone());
        let y = ln.forward(g, st, xv)?;
        probe_loss(g, y, &probe)
    }, tol)?);

    let mut store = ParamStore::<f64>::new();
    let mlp = Mlp::new(&mut store, "mlp", &[6, 10, 3], &mut r)?;
    let probe: T = r.normal_tensor(&[6, 3]);
    record("mlp", grad_check(&mut store, |g, st| {
        let xv = g.constant(x.clone());
        let y = mlp.forward(g, st, xv)?;
        probe_loss(g, y, &probe)
    }, tol)?);

    let mut store = ParamStore::<f64>::new();
    let mha = MultiHeadAttention::new(&mut store, "mha", 6, 6, 8, 2, &mut r)?;
    let probe: T = r.normal_tensor(&[6, 6]);
    record("attention", grad_check(&mut store, |g, st| {
        let xv = g.constant(x.clone());
        let y = mha.forward(g, st, xv, xv, 2)?;
        probe_loss(g, y, &probe)
    }, tol)?);

    for s in FusionStrategy::ALL {
        let cfg = G3TConfig {
            model_dim: 8,
            heads: 2,
            gate_hidden: 8,
            positional: true,
            strategy: s,
            ..G3TConfig::new(3, 4, 2, 2)
        };
        let mut store = ParamStore::<f64>::new();
        let p = G3TParams::new(&mut store, "g3t", cfg, &mut r)?;
        let (mono, left, right): (T, T, T) = (r.normal_tensor(&[2, 3]), r.normal_tensor(&[2, 4]), r.normal_tensor(&[2, 4]));
        record(s.as_str(), grad_check(&mut store, |g, st| {
            let t = TokenBatch {
                mono: g.constant(mono.clone()),
                left: g.constant(left.clone()),
                right: g.constant(right.clone()),
                batch: 1,
            };
            let out = p.forward(g, st, &t)?;
            let sq = g.square(out.tokens);
            let mut loss = g.sum(sq);
            if let Some(gate) = out.gate {
                let gs = g.sum(gate);
                loss = g.add(loss, gs)?;
            }
            Ok(loss)
        }, tol)?);
    }

    let mut store = ParamStore::<f64>::new();
    let sem = SemanticFusion::new(&mut store, "sem", 6, 8, 8, 2, &mut r)?;
    let (q, kv): (T, T) = (r.normal_tensor(&[2, 6]), r.normal_tensor(&[6, 8]));
    let probe: T = r.normal_tensor(&[2, 6]);
    record("semantic_fusion", grad_check(&mut store, |g, st| {
        let (qv, kvv) = (g.constant(q.clone()), g.constant(kv.clone()));
        let y = sem.forward(g, st, qv, kvv, 2)?;
        probe_loss(g, y, &probe)
    }, tol)?);

    for kind in PredictionKind::ALL {
        let cfg = PolicyConfig {
            horizon: 3,
            action_dim: 2,
            cond_dim: 4,
            hidden: 8,
            blocks: 2,
            time_dim: 4,
            kind,
        };
        let mut store = ParamStore::<f64>::new();
        let net = PolicyNetwork::new(&mut store, "p", cfg, &mut r)?;
        let batch = TrainBatch::new(r.normal_tensor(&[4, 2]), r.normal_tensor(&[4, 2]), r.normal_tensor(&[4, 6]))?;
        record(kind.as_str(), grad_check(&mut store, |g, st| {
            Ok(training_loss(g, st, &net, &batch, TauSchedule::default(), &mut RngStream::new(5, 5))?.0)
        }, tol)?);
    }
    let dt = t0.elapsed();
    outcome(
        failed.is_empty() && within(dt, 60.0),
        format!("max rel err {worst:.2e}, failing {failed:?}, {:.1}s", dt.as_secs_f64()),
    )
}

// 5. Long chunks hurt the action head less than the velocity head.
fn chunk_degradation() -> Result<Outcome> {
    let t0 = Instant::now();
    let cfg = RunConfig {
        grid_kinds: vec![PredictionKind::Action, PredictionKind::Velocity],
        grid_steps: vec![4],
        grid_chunks: vec![10, 30],
        ..RunConfig::default()
    };
    let res = ablation_grid(&cfg)?;
    let delta = |seed: u64, kind: PredictionKind| {
        res.degradations
            .iter()
            .find(|d| d.seed == seed && d.head_kind == kind)
            .map(|d| d.delta())
            .ok_or_else(|| Error::NoData(format!("no degradation for seed {seed} {kind}")))
    };
    let mut wins = 0;
    let (mut sum_a, mut sum_v) = (0.0, 0.0);
    let mut per_seed = Vec::new();
    for &seed in &cfg.seeds {
        let (a, v) = (delta(seed, PredictionKind::Action)?, delta(seed, PredictionKind::Velocity)?);
        wins += (a.abs() < v.abs()) as usize;
        sum_a += a;
        sum_v += v;
        per_seed.push(format!("{:+.3}/{:+.3}", a, v));
    }
    let n = cfg.seeds.len() as f64;
    let (mean_a, mean_v) = (sum_a / n, sum_v / n);
    let dt = t0.elapsed();
    outcome(
        wins >= 2 && mean_a.abs() < mean_v.abs() && within(dt, 45.0 * 60.0),
        format!(
            "action/velocity delta per seed [{}], mean {mean_a:+.3}/{mean_v:+.3}, {wins}/3 seeds, {:.0}s",
            per_seed.join(", "),
            dt.as_secs_f64()
        ),
    )
}

fn permute_rows(t: &T, perm: &[usize]) -> Result<T> {
    Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>())
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..n {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

// 6. Gate range, the equal-views fixed point and permutation equivariance.
fn gate_properties() -> Result<Outcome> {
    let t0 = Instant::now();
    let cfg = RunConfig {
        model_dim: 8,
        heads: 2,
        gate_hidden: 8,
        lattice: 4,
        ..RunConfig::default()
    };
    let model = VisionModel::new(&experiments::fusion_settings(&cfg, FusionStrategy::G3t, 6, 1.0))?;
    let scenes = gate_scenes(&cfg, 6, &cfg.occlusion)?;
    let exported = export_gate_maps(&model, &scenes)?;
    let in_range = exported.iter().all(|g| g.gate > 0.0 && g.gate < 1.0);

    let m = 6;
    let g3t = G3TConfig {
        model_dim: 8,
        heads: 2,
        gate_hidden: 8,
        positional: false,
        strategy: FusionStrategy::G3t,
        ..G3TConfig::new(3, 5, 2, m)
    };
    let mut store = ParamStore::<f64>::new();
    let mut r = RngStream::new(6, 0);
    let p = G3TParams::new(&mut store, "g3t", g3t, &mut r)?;
    let (mono, left, right): (T, T, T) = (r.normal_tensor(&[2, 3]), r.normal_tensor(&[m, 5]), r.normal_tensor(&[m, 5]));

    let mut g = Graph::new();
    let t = TokenBatch {
        mono: g.constant(mono.clone()),
        left: g.constant(left.clone()),
        right: g.constant(right.clone()),
        batch: 1,
    };
    let joint = p.project_and_concat(&mut g, &store, &t)?;
    let (_, l, _) = p.cross_view_align(&mut g, &store, joint, 1)?;
    let gate = p.compute_gate(&mut g, &store, l, l)?;
    let same = p.gated_fuse(&mut g, l, l, gate)?;
    let fixed = g.value(same).max_abs_diff(g.value(l))?;

    let fused = |l: &T, rr: &T| -> Result<T> {
        let (geo, _) = p.fuse_tokens(
            &store,
            &TokenMatrix::new(mono.clone(), TokenRole::Monocular)?,
            &TokenMatrix::new(l.clone(), TokenRole::LeftView)?,
            &TokenMatrix::new(rr.clone(), TokenRole::RightView)?,
        )?;
        geo.tokens.slice_rows(2, m)
    };
    let base = fused(&left, &right)?;
    let mut worst = 0.0f64;
    for perm in permutations(m) {
        let out = fused(&permute_rows(&left, &perm)?, &permute_rows(&right, &perm)?)?;
        worst = worst.max(out.max_abs_diff(&permute_rows(&base, &perm)?)?);
    }
    let dt = t0.elapsed();
    outcome(
        in_range && fixed < 1e-12 && worst < 1e-10 && within(dt, 10.0),
        format!(
            "{} gates in (0,1): {in_range}, fixed point {fixed:.1e}, equivariance over 720 permutations {worst:.1e}, {:.2}s",
            exported.len(),
            dt.as_secs_f64()
        ),
    )
}

/// Fusion stacks shared by criteria 7 and 8, trained once per seed.
fn fusion_models(cfg: &RunConfig) -> Result<(Vec<VisionModel>, Duration)> {
    let t0 = Instant::now();
    let models = cfg.seeds.iter().map(|&s| train_fusion_stack(cfg, s)).collect::<Result<Vec<_>>>()?;
    Ok((models, t0.elapsed()))
}

// 7. The gate leans away from the occluded side.
fn occlusion_suppression(cfg: &RunConfig, models: &[VisionModel], train_time: Duration) -> Result<Outcome> {
    let t0 = Instant::now();
    let mut wins = 0;
    let mut per_seed = Vec::new();
    for (m, &seed) in models.iter().zip(&cfg.seeds) {
        let (clean, corrupted) = gate_side_means(m, &gate_scenes(cfg, seed, &cfg.occlusion)?)?
            .ok_or_else(|| Error::NoData("no corrupted tokens".into()))?;
        wins += (clean - corrupted >= 0.1) as usize;
        per_seed.push(format!("{clean:.3}/{corrupted:.3}"));
    }
    let dt = t0.elapsed() + train_time;
    outcome(
        wins >= 2 && within(dt, 20.0 * 60.0),
        format!("clean/corrupted gate per seed [{}], {wins}/3 seeds, {:.0}s", per_seed.join(", "), dt.as_secs_f64()),
    )
}

// 8. Fused features carry more depth than the monocular tokens.
fn depth_probe_direction(cfg: &RunConfig, models: &[VisionModel], train_time: Duration) -> Result<Outcome> {
    let t0 = Instant::now();
    let mut wins = 0;
    let mut per_seed = Vec::new();
    for (m, &seed) in models.iter().zip(&cfg.seeds) {
        let [mono, fused] = probe_model(cfg, m, seed)?;
        wins += (fused.metrics.rmse < mono.metrics.rmse) as usize;
        per_seed.push(format!("{:.4}/{:.4}", fused.metrics.rmse, mono.metrics.rmse));
    }
    let dt = t0.elapsed() + train_time;
    outcome(
        wins >= 2 && within(dt, 10.0 * 60.0),
        format!("fused/mono RMSE per seed [{}], {wins}/3 seeds, {:.0}s", per_seed.join(", "), dt.as_secs_f64()),
    )
}

// 9. Two ablation runs produce byte-identical metrics.
fn determinism() -> Result<Outcome> {
    let t0 = Instant::now();
    let cfg = RunConfig {
        seeds: vec![7],
        train_steps: 30,
        warmup: 3,
        hidden: 16,
        blocks: 1,
        episodes: 4,
        rollouts: 10,
        grid_steps: vec![2, 4],
        grid_chunks: vec![8, 10],
        ..RunConfig::default()
    };
    let csv = || -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        write_metrics(&ablation_grid(&cfg)?.rows, &mut buf)?;
        Ok(buf)
    };
    let (a, b) = (csv()?, csv()?);
    outcome(a == b, format!("{} bytes, identical: {}, {:.1}s", a.len(), a == b, t0.elapsed().as_secs_f64()))
}

// 10. Checkpoints round-trip and reject other format versions.
fn checkpoint_round_trip() -> Result<Outcome> {
    let ds = amlb_core::world::generate_dataset(2, 8, 10, OcclusionConfig::none())?;
    let s = PolicySettings {
        hidden: 16,
        blocks: 1,
        steps: 5,
        batch: 4,
        ..Default::default()
    };
    let bytes = train_state_policy(&ds, &s)?.to_checkpoint().to_bytes();
    let dir = std::env::temp_dir().join(format!("amlb-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("policy.amlb");
    std::fs::write(&path, &bytes)?;
    let loaded = TrainedPolicy::from_checkpoint(&Checkpoint::load(&path)?)?;
    let again = loaded.to_checkpoint().to_bytes();
    let mut bad = bytes.clone();
    bad[4..8].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    let rejected = matches!(Checkpoint::from_bytes(&bad), Err(Error::Version { .. }));
    std::fs::remove_dir_all(&dir)?;
    outcome(again == bytes && rejected, format!("{} bytes identical: {}, version mismatch rejected: {rejected}", bytes.len(), again == bytes))
}

fn report(n: usize, name: &str, result: Result<Outcome>) -> bool {
    match result {
        Ok(o) => {
            println!("criterion {n:>2} {name}: {} ({})", if o.passed { "PASS" } else { "FAIL" }, o.detail);
            o.passed
        }
        Err(e) => {
            println!("criterion {n:>2} {name}: FAIL (error: {e})");
            false
        }
    }
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let mut all = true;
    if run(1) {
        all &= report(1, "loss identity", loss_identity());
    }
    if run(2) {
        all &= report(2, "oracle sampler exactness", oracle_sampler());
    }
    if run(3) {
        all &= report(3, "mixture sampling", mixture_sampling());
    }
    if run(4) {
        all &= report(4, "gradient suite", gradient_suite());
    }
    if run(5) {
        all &= report(5, "chunk-size degradation direction", chunk_degradation());
    }
    if run(6) {
        all &= report(6, "gate properties", gate_properties());
    }
    if run(7) || run(8) {
        let cfg = RunConfig::default();
        match fusion_models(&cfg) {
            Ok((models, dt)) => {
                if run(7) {
                    all &= report(7, "occlusion suppression", occlusion_suppression(&cfg, &models, dt));
                }
                if run(8) {
                    all &= report(8, "depth probe direction", depth_probe_direction(&cfg, &models, dt));
                }
            }
            Err(e) => {
                for (n, name) in [(7, "occlusion suppression"), (8, "depth probe direction")] {
                    if run(n) {
                        all &= report(n, name, Err(Error::Invariant(e.to_string())));
                    }
                }
            }
        }
    }
    if run(9) {
        all &= report(9, "determinism", determinism());
    }
    if run(10) {
        all &= report(10, "checkpoint round trip", checkpoint_round_trip());
    }
    if !all {
        std::process::exit(1);
    }
}
