use super::train::TrainedPolicy;
use crate::error::{Error, Result};
use crate::flow::{sample_from_noise, PolicyDenoiser};
use crate::nn::{RngStream, Tensor};
use crate::world::{
    evaluate_success, perturb_state_obs, reset, scripted_expert, LayoutParams, PerturbationKind, PerturbationSpec,
    ToyAction, WorldState, ACTION_DIM, MAX_EPISODE_STEPS, MAX_STEP, SUCCESS_TOL,
};

const STREAM_EVAL: u64 = 21;
const STREAM_NOISE: u64 = 22;
const STREAM_PERTURB: u64 = 23;

/// Indices of the x coordinates of `(x, y)` pairs in a `[context; state]` row.
pub const STATE_POSITIONS: [usize; 3] = [0, 2, 4];

/// Something that emits the next `H` actions for a batch of rollouts.
pub trait ChunkPolicy {
    fn horizon(&self) -> usize;
    /// `obs[i]` is the (possibly perturbed) observation row of `states[i]`;
    /// `rngs[i]` is that rollout's private stream.
    fn plan(&mut self, states: &[&WorldState], obs: &[Vec<f64>], rngs: &mut [RngStream]) -> Result<Vec<Vec<[f64; 3]>>>;
}

pub struct ExpertPolicy {
    pub horizon: usize,
}

impl ChunkPolicy for ExpertPolicy {
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn plan(&mut self, states: &[&WorldState], _: &[Vec<f64>], _: &mut [RngStream]) -> Result<Vec<Vec<[f64; 3]>>> {
        Ok(states.iter().map(|s| scripted_expert(s, self.horizon)).collect())
    }
}

/// Uniform actions over the valid range.
pub struct RandomPolicy {
    pub horizon: usize,
}

impl ChunkPolicy for RandomPolicy {
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn plan(&mut self, states: &[&WorldState], _: &[Vec<f64>], rngs: &mut [RngStream]) -> Result<Vec<Vec<[f64; 3]>>> {
        Ok(rngs
            .iter_mut()
            .take(states.len())
            .map(|r| {
                (0..self.horizon)
                    .map(|_| [r.uniform_in(-MAX_STEP, MAX_STEP), r.uniform_in(-MAX_STEP, MAX_STEP), r.uniform_in(-1.0, 1.0)])
                    .collect()
            })
            .collect())
    }
}

/// A trained flow policy sampled with a fixed number of Euler steps.
pub struct FlowPolicy<'a> {
    pub policy: &'a TrainedPolicy,
    pub denoise_steps: usize,
}

impl ChunkPolicy for FlowPolicy<'_> {
    fn horizon(&self) -> usize {
        self.policy.net.config.horizon
    }

    fn plan(&mut self, _: &[&WorldState], obs: &[Vec<f64>], rngs: &mut [RngStream]) -> Result<Vec<Vec<[f64; 3]>>> {
        let b = obs.len();
        let cond_dim = self.policy.net.config.cond_dim;
        let chunk_len = self.policy.net.config.chunk_len();
        let cond = Tensor::matrix(b, cond_dim, obs.iter().flatten().copied().collect())?;
        let mut a0 = Vec::with_capacity(b * chunk_len);
        for r in rngs.iter_mut().take(b) {
            a0.extend((0..chunk_len).map(|_| r.normal()));
        }
        let mut den = PolicyDenoiser::new(&self.policy.net, &self.policy.store, cond);
        let out = sample_from_noise(&mut den, Tensor::matrix(b, chunk_len, a0)?, self.denoise_steps)?;
        Ok((0..b)
            .map(|i| {
                let mut row = out.row(i).to_vec();
                self.policy.norm.denormalize(&mut row);
                row.chunks(ACTION_DIM).map(|a| [a[0], a[1], a[2]]).collect()
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub rollouts: usize,
    pub seed: u64,
    pub layout: LayoutParams,
    pub perturbation: Option<PerturbationSpec>,
    pub grid: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            rollouts: 200,
            seed: 0,
            layout: LayoutParams::default(),
            perturbation: None,
            grid: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOutcome {
    pub successes: usize,
    pub rollouts: usize,
}

impl EvalOutcome {
    pub fn rate(&self) -> f64 {
        self.successes as f64 / self.rollouts as f64
    }
}

pub fn rollout_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = RngStream::new(seed, STREAM_EVAL);
    (0..n).map(|_| rng.next_u64()).collect()
}

fn observe(s: &WorldState) -> Vec<f64> {
    let mut o = s.context_vector().to_vec();
    o.extend_from_slice(&s.state_vector());
    o
}

/// Runs seeded rollouts in lockstep, executing each chunk open-loop and
/// re-planning when it is exhausted.
pub fn run_rollouts(policy: &mut dyn ChunkPolicy, settings: &EvalSettings) -> Result<EvalOutcome> {
    if settings.rollouts == 0 {
        return Err(Error::Config("evaluation needs at least one rollout".into()));
    }
    let h = policy.horizon();
    if h == 0 {
        return Err(Error::Config("policy horizon must be positive".into()));
    }
    let mut layout = settings.layout.clone();
    if let Some(p) = settings.perturbation {
        match p.kind {
            PerturbationKind::Layout => layout.spread += p.magnitude,
            PerturbationKind::Robot => layout.gripper_spread += p.magnitude,
            _ => {}
        }
    }
    let seeds = rollout_seeds(settings.seed, settings.rollouts);
    let mut states = seeds.iter().map(|&s| reset(s, &layout)).collect::<Result<Vec<_>>>()?;
    let mut noise: Vec<RngStream> = seeds.iter().map(|&s| RngStream::new(s, STREAM_NOISE)).collect();
    let mut perturb: Vec<RngStream> = seeds.iter().map(|&s| RngStream::new(s, STREAM_PERTURB)).collect();
    let mut done = vec![false; seeds.len()];
    let mut success = vec![false; seeds.len()];

    let mut t = 0;
    while t < MAX_EPISODE_STEPS && done.iter().any(|d| !d) {
        let active: Vec<usize> = (0..seeds.len()).filter(|&i| !done[i]).collect();
        let mut obs = Vec::with_capacity(active.len());
        for &i in &active {
            let mut o = observe(&states[i]);
            if let Some(p) = &settings.perturbation {
                perturb_state_obs(&mut o, &STATE_POSITIONS, p, settings.grid, &mut perturb[i])?;
            }
            obs.push(o);
        }
        let refs: Vec<&WorldState> = active.iter().map(|&i| &states[i]).collect();
        let mut rngs: Vec<RngStream> = active.iter().map(|&i| noise[i].clone()).collect();
        let plans = policy.plan(&refs, &obs, &mut rngs)?;
        for (k, &i) in active.iter().enumerate() {
            noise[i] = rngs[k].clone();
        }
        for (k, &i) in active.iter().enumerate() {
            for a in plans[k].iter().take(h.min(MAX_EPISODE_STEPS - t)) {
                states[i].step(ToyAction::from_slice(a));
                if evaluate_success(&states[i], SUCCESS_TOL)? {
                    success[i] = true;
                    done[i] = true;
                    break;
                }
            }
        }
        t += h;
    }
    Ok(EvalOutcome {
        successes: success.iter().filter(|&&s| s).count(),
        rollouts: seeds.len(),
    })
}
