//! Fast invariant checks bundled for first-run validation.

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::metrics::{read_metrics, write_metrics, MetricsRow};
use super::report::emit_report;
use crate::error::{Error, Result};
use crate::flow::{
    action_loss_velocity_form, interpolate, loss_weight, sample_actions, ActionChunk, CleanOracle, PredictionKind, TAU_GUARD,
};
use crate::g3t::{gated_fuse, FusionStrategy, G3TConfig, G3TParams, TokenBatch, TokenMatrix, TokenRole};
use crate::nn::{grad_check, Graph, Linear, ParamStore, RngStream, Tensor};
use crate::world::{apply_perturbation, render_views, reset, LayoutParams, OcclusionConfig, PerturbationKind, PerturbationSpec, ViewSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type T = Tensor<f64>;

fn loss_identity() -> Result<String> {
    let mut r = RngStream::new(100, 0);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (h, d) = (1 + r.below(30), 1 + r.below(7));
        let clean = ActionChunk::new(r.normal_tensor(&[h, d]))?;
        let noise: T = r.normal_tensor(&[h, d]);
        let tau = r.uniform() * (1.0 - TAU_GUARD);
        let sample = interpolate(&clean, &noise, tau)?;
        let pred: T = r.normal_tensor(&[h, d]);
        let v = action_loss_velocity_form(&pred, clean.values(), &sample)?;
        let a = loss_weight(tau)? * pred.sub(clean.values())?.sq_norm();
        worst = worst.max((v - a).abs() / a.abs().max(1e-300));
    }
    ensure(worst < 1e-10, format!("max relative error {worst:.2e}"))
}

fn oracle_sampler() -> Result<String> {
    let mut r = RngStream::new(102, 0);
    let clean: T = r.normal_tensor(&[6, 4]);
    let mut worst = 0.0f64;
    for n in [1, 2, 4, 10] {
        let mut oracle = CleanOracle::new(clean.clone(), PredictionKind::Action);
        let out = sample_actions(&mut oracle, 6, 4, n, &mut RngStream::new(n as u64, 1))?;
        worst = worst.max(out.max_abs_diff(&clean)?);
    }
    ensure(worst < 1e-9, format!("max abs error {worst:.2e}"))
}

fn small_stack(positional: bool, m: usize, seed: u64) -> Result<(G3TParams, ParamStore<f64>)> {
    let cfg = G3TConfig {
        model_dim: 8,
        heads: 2,
        gate_hidden: 16,
        positional,
        strategy: FusionStrategy::G3t,
        ..G3TConfig::new(3, 5, m, m)
    };
    let mut store = ParamStore::new();
    let p = G3TParams::new(&mut store, "g3t", cfg, &mut RngStream::new(seed, 0))?;
    Ok((p, store))
}

fn gate_properties() -> Result<String> {
    let m = 4;
    let (p, store) = small_stack(false, m, 3)?;
    let mut r = RngStream::new(3, 1);
    let mono: T = r.normal_tensor(&[m, 3]);
    let left: T = r.normal_tensor(&[m, 5]);
    let right: T = r.normal_tensor(&[m, 5]);
    let (_, gate) = p.fuse_tokens(
        &store,
        &TokenMatrix::new(mono.clone(), TokenRole::Monocular)?,
        &TokenMatrix::new(left.clone(), TokenRole::LeftView)?,
        &TokenMatrix::new(right.clone(), TokenRole::RightView)?,
    )?;
    let gate = gate.ok_or_else(|| Error::Invariant("g3t produced no gate".into()))?;
    if !gate.values().iter().all(|&g| g > 0.0 && g < 1.0) {
        return Err(Error::Invariant("gate value outside (0,1)".into()));
    }
    let same = gated_fuse(&left, &left, &gate)?;
    let fixed = same.max_abs_diff(&left)?;
    if fixed >= 1e-12 {
        return Err(Error::Invariant(format!("equal views moved by {fixed:.2e}")));
    }
    let align = |l: &T| -> Result<T> {
        let mut g = Graph::new();
        let t = TokenBatch {
            mono: g.constant(mono.clone()),
            left: g.constant(l.clone()),
            right: g.constant(right.clone()),
            batch: 1,
        };
        let joint = p.project_and_concat(&mut g, &store, &t)?;
        let (_, lv, _) = p.cross_view_align(&mut g, &store, joint, 1)?;
        Ok(g.value(lv).clone())
    };
    let base = align(&left)?;
    let permute = |t: &T, perm: &[usize]| Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>());
    let mut worst = 0.0f64;
    for perm in [[1, 0, 2, 3], [3, 2, 1, 0], [2, 3, 0, 1], [1, 2, 3, 0]] {
        let out = align(&permute(&left, &perm)?)?;
        worst = worst.max(out.max_abs_diff(&permute(&base, &perm)?)?);
    }
    ensure(worst < 1e-12, format!("fixed point {fixed:.1e}, permutation {worst:.1e}"))
}

fn gradients() -> Result<String> {
    let mut r = RngStream::new(7, 0);
    let mut store = ParamStore::<f64>::new();
    let lin = Linear::new(&mut store, "lin", 4, 3, true, &mut r)?;
    let x: T = r.normal_tensor(&[5, 4]);
    let rep = grad_check(
        &mut store,
        |g, st| {
            let xv = g.constant(x.clone());
            let y = lin.forward(g, st, xv)?;
            let t = g.tanh(y);
            let s = g.square(t);
            Ok(g.mean(s))
        },
        1e-4,
    )?;
    ensure(rep.passed(), format!("max relative error {:.2e}", rep.max_rel_error))
}

fn checkpoint_round_trip() -> Result<String> {
    let mut store = ParamStore::<f64>::new();
    Linear::new(&mut store, "lin", 3, 2, true, &mut RngStream::new(1, 0))?;
    let c = Checkpoint::from_store(vec![("k".into(), "v".into())], &store, crate::world::NormStats::identity(3), 5);
    let bytes = c.to_bytes();
    let again = Checkpoint::from_bytes(&bytes)?.to_bytes();
    if again != bytes {
        return Err(Error::Invariant("save/load/save changed bytes".into()));
    }
    let mut bad = bytes.clone();
    bad[4] ^= 0xff;
    let rejected = matches!(Checkpoint::from_bytes(&bad), Err(Error::Version { .. }));
    ensure(rejected, format!("{} bytes, version mismatch rejected", bytes.len()))
}

fn config_rules() -> Result<String> {
    let empty = RunConfig::parse("")?;
    if empty != RunConfig::default() || empty.denoise_steps != 4 {
        return Err(Error::Invariant("empty config is not the default".into()));
    }
    if RunConfig::parse(&empty.to_text())? != empty {
        return Err(Error::Invariant("config echo does not round-trip".into()));
    }
    let ok = RunConfig::parse("[policy]\nchunk_h = 30\n")?.chunk_h == 30;
    ensure(ok && RunConfig::parse("[policy]\nchunk_h = 0\n").is_err(), "defaults, echo and range rules".into())
}

fn metrics_and_report() -> Result<String> {
    let row = MetricsRow {
        run_id: "x".into(),
        seed: 1,
        experiment: "ablate".into(),
        head_kind: "action".into(),
        denoise_steps: Some(4),
        chunk_h: Some(8),
        success_rate: Some(0.5),
        ..Default::default()
    };
    let mut buf = Vec::new();
    write_metrics(std::slice::from_ref(&row), &mut buf)?;
    if read_metrics(buf.as_slice())? != [row.clone()] {
        return Err(Error::Invariant("metrics CSV does not round-trip".into()));
    }
    if !matches!(emit_report(&[]), Err(Error::NoData(_))) {
        return Err(Error::Invariant("empty report did not fail".into()));
    }
    let rep = emit_report(&[row])?;
    let table = &rep.tables[0].1;
    let std_zero = table.lines().nth(1).is_some_and(|l| l.split(',').nth(9) == Some("0"));
    ensure(std_zero, "round trip, empty input, single-seed std".into())
}

fn zero_perturbation() -> Result<String> {
    let state = reset(3, &LayoutParams::default())?;
    let render = render_views(&state, &ViewSpec::defaults(8), &OcclusionConfig::none(), &RngStream::new(3, 0))?;
    for kind in PerturbationKind::HEADLINE {
        let out = apply_perturbation(&render, &PerturbationSpec::new(kind, 0.0)?, &mut RngStream::new(0, 0))?;
        if out != render {
            return Err(Error::Invariant(format!("{kind} at magnitude 0 changed the render")));
        }
    }
    Ok("identity for every headline kind".into())
}

fn ensure(ok: bool, detail: String) -> Result<String> {
    if ok {
        Ok(detail)
    } else {
        Err(Error::Invariant(detail))
    }
}

/// Runs every check; failures are reported, not raised.
pub fn run_selftest() -> Vec<CheckResult> {
    let checks: [(&'static str, fn() -> Result<String>); 8] = [
        ("loss_identity", loss_identity),
        ("oracle_sampler", oracle_sampler),
        ("gate_properties", gate_properties),
        ("gradients", gradients),
        ("checkpoint_round_trip", checkpoint_round_trip),
        ("config_rules", config_rules),
        ("metrics_and_report", metrics_and_report),
        ("zero_perturbation", zero_perturbation),
    ];
    checks
        .into_iter()
        .map(|(name, f)| match f() {
            Ok(detail) => CheckResult { name, passed: true, detail },
            Err(e) => CheckResult {
                name,
                passed: false,
                detail: e.to_string(),
            },
        })
        .collect()
}
