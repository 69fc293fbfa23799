use std::fmt;
use std::str::FromStr;

use super::network::PolicyNetwork;
use super::{derive_velocity, loss_weight, FlowSample, PredictionKind, TAU_GUARD};
use crate::error::{Error, Result};
use crate::nn::{Graph, ParamStore, RngStream, Tensor, Var};
use crate::scalar::Scalar;

/// Training-time distribution of flow times.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TauSchedule {
    /// Uniform on `[0, 1 − TAU_GUARD]`.
    Uniform,
    /// `sigmoid(mean + std·z)`, clamped to `1 − TAU_GUARD`. Puts most mass at
    /// noisy times, where a clean-chunk head has to do real work.
    LogitNormal { mean: f64, std: f64 },
}

impl TauSchedule {
    pub const DEFAULT_LOGIT_NORMAL: TauSchedule = TauSchedule::LogitNormal { mean: -0.8, std: 0.8 };

    pub fn draw(self, rng: &mut RngStream) -> f64 {
        let hi = 1.0 - TAU_GUARD;
        match self {
            Self::Uniform => rng.uniform() * hi,
            Self::LogitNormal { mean, std } => {
                let z = mean + std * rng.normal();
                (1.0 / (1.0 + (-z).exp())).min(hi)
            }
        }
    }
}

impl Default for TauSchedule {
    fn default() -> Self {
        Self::DEFAULT_LOGIT_NORMAL
    }
}

impl fmt::Display for TauSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Uniform => f.write_str("uniform"),
            Self::LogitNormal { mean, std } => write!(f, "logit_normal:{mean}:{std}"),
        }
    }
}

/// Accepts `uniform`, `logit_normal` (default parameters) or
/// `logit_normal:<mean>:<std>`.
impl FromStr for TauSchedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown tau schedule `{s}`"));
        match s.split(':').collect::<Vec<_>>().as_slice() {
            ["uniform"] => Ok(Self::Uniform),
            ["logit_normal"] => Ok(Self::DEFAULT_LOGIT_NORMAL),
            ["logit_normal", m, sd] => {
                let mean: f64 = m.trim().parse().map_err(|_| bad())?;
                let std: f64 = sd.trim().parse().map_err(|_| bad())?;
                if !mean.is_finite() || !std.is_finite() || std < 0.0 {
                    return Err(bad());
                }
                Ok(Self::LogitNormal { mean, std })
            }
            _ => Err(bad()),
        }
    }
}

/// Flow times and noise for one batch, drawn up front so a loss can be
/// re-evaluated deterministically.
#[derive(Debug, Clone)]
pub struct FlowDraws<T> {
    pub taus: Vec<T>,
    pub noise: Tensor<T>,
}

pub fn sample_draws<T: Scalar>(batch: usize, chunk_len: usize, schedule: TauSchedule, rng: &mut RngStream) -> FlowDraws<T> {
    let taus = (0..batch).map(|_| T::lit(schedule.draw(rng))).collect();
    FlowDraws {
        taus,
        noise: rng.normal_tensor(&[batch, chunk_len]),
    }
}

/// Row-stacked flattened chunks with their conditioning.
#[derive(Debug, Clone)]
pub struct TrainBatch<T> {
    /// `B×Cφ`
    pub contexts: Tensor<T>,
    /// `B×Dq`
    pub states: Tensor<T>,
    /// `B×(H·D)`
    pub clean: Tensor<T>,
}

impl<T: Scalar> TrainBatch<T> {
    pub fn new(contexts: Tensor<T>, states: Tensor<T>, clean: Tensor<T>) -> Result<Self> {
        let b = clean.rows();
        if contexts.rows() != b || states.rows() != b {
            return Err(Error::shape("train batch", &[contexts.rows(), states.rows()], &[b]));
        }
        Ok(Self { contexts, states, clean })
    }

    pub fn len(&self) -> usize {
        self.clean.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.rows() == 0
    }

    /// `[φ ; q]` per row.
    pub fn conditioning(&self) -> Result<Tensor<T>> {
        let b = self.len();
        let (c, q) = (self.contexts.cols(), self.states.cols());
        let mut data = Vec::with_capacity(b * (c + q));
        for r in 0..b {
            data.extend_from_slice(self.contexts.row(r));
            data.extend_from_slice(self.states.row(r));
        }
        Tensor::matrix(b, c + q, data)
    }
}

/// Noisy inputs `τ·A + (1−τ)·ε`, row by row.
pub fn noisy_rows<T: Scalar>(clean: &Tensor<T>, draws: &FlowDraws<T>) -> Result<Tensor<T>> {
    if clean.shape() != draws.noise.shape() || draws.taus.len() != clean.rows() {
        return Err(Error::shape("noisy_rows", clean.shape(), draws.noise.shape()));
    }
    let mut out = clean.clone();
    for (r, &tau) in draws.taus.iter().enumerate() {
        let one_m = T::one() - tau;
        for (x, &e) in out.row_mut(r).iter_mut().zip(draws.noise.row(r)) {
            *x = tau * *x + one_m * e;
        }
    }
    Ok(out)
}

/// Regression target of each head kind for the given draws.
pub fn head_target<T: Scalar>(kind: PredictionKind, clean: &Tensor<T>, draws: &FlowDraws<T>) -> Result<Tensor<T>> {
    match kind {
        PredictionKind::Action => Ok(clean.clone()),
        PredictionKind::Velocity => clean.sub(&draws.noise),
        PredictionKind::Epsilon => Ok(draws.noise.clone()),
    }
}

/// Batch-mean flow loss for a conditioning node already on the graph.
///
/// Action kind: `w(τ)·‖Â − A‖²`; velocity: `‖out − (A − ε)‖²`; epsilon:
/// `‖out − ε‖²`. Norms are summed over the chunk.
pub fn flow_loss<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    net: &PolicyNetwork,
    cond: Var,
    clean: &Tensor<T>,
    draws: &FlowDraws<T>,
) -> Result<Var> {
    let b = clean.rows();
    let noisy = g.constant(noisy_rows(clean, draws)?);
    let out = net.forward(g, store, noisy, &draws.taus, cond)?;
    let kind = net.kind();
    let target = g.constant(head_target(kind, clean, draws)?);
    let diff = g.sub(out, target)?;
    let sq = g.square(diff);
    let mut per = g.sum_cols(sq);
    if kind == PredictionKind::Action {
        let w: Vec<T> = draws.taus.iter().map(|&t| loss_weight(t)).collect::<Result<_>>()?;
        let w = g.constant(Tensor::matrix(b, 1, w)?);
        per = g.mul(per, w)?;
    }
    if let Some(r) = g.value(per).data().iter().position(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite {kind} loss at tau {}",
            draws.taus[r]
        )));
    }
    Ok(g.mean(per))
}

/// Loss for a state-conditioned batch, drawing flow times from `rng`.
pub fn training_loss<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    net: &PolicyNetwork,
    batch: &TrainBatch<T>,
    schedule: TauSchedule,
    rng: &mut RngStream,
) -> Result<(Var, FlowDraws<T>)> {
    let draws = sample_draws(batch.len(), batch.clean.cols(), schedule, rng);
    let cond = g.constant(batch.conditioning()?);
    let loss = flow_loss(g, store, net, cond, &batch.clean, &draws)?;
    Ok((loss, draws))
}

/// `‖v̂ − v‖²` computed through `derive_velocity`, for one chunk.
pub fn action_loss_velocity_form<T: Scalar>(pred_clean: &Tensor<T>, clean: &Tensor<T>, sample: &FlowSample<T>) -> Result<T> {
    let vhat = derive_velocity(pred_clean, sample)?;
    let v = derive_velocity(clean, sample)?;
    Ok(vhat.sub(&v)?.sq_norm())
}
