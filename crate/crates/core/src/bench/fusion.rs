//! Vision-conditioned policies: the fusion stack reads rendered tokens, a
//! semantic query token attends over its output, and the flow head is
//! conditioned on that summary plus the proprioceptive state.
//!
//! Training optionally adds a per-token depth regression from the stack's
//! spatial features. That auxiliary signal is what teaches the gate to lean
//! away from a corrupted side view at desk scale.

use log::{debug, info};

use super::checkpoint::Checkpoint;
use super::eval::ChunkPolicy;
use super::train::PolicySettings;
use crate::error::{Error, Result};
use crate::flow::{flow_loss, sample_draws, sample_from_noise, Denoiser, PolicyNetwork, PredictionKind};
use crate::g3t::{FusionStrategy, G3TConfig, G3TParams, SemanticFusion, TokenBatch};
use crate::nn::{AdamW, AdamWConfig, CosineSchedule, Graph, Linear, ParamStore, RngStream, Tensor, Var};
use crate::world::{
    apply_perturbation, render_views, Dataset, NormStats, OcclusionConfig, PerturbationSpec, RenderOutput, ViewSpec,
    WorldState, ACTION_DIM, CHANNELS, STATE_DIM,
};

const STREAM_INIT: u64 = 31;
const STREAM_BATCH: u64 = 32;
const STREAM_FLOW: u64 = 33;
const FORK_PERTURB: u64 = 9;
/// Render keys during evaluation: `(rollout seed, EVAL_RENDER_STREAM + plan index)`.
pub const EVAL_RENDER_STREAM: u64 = 5000;
/// Width of the semantic query input: goal xy and the target's class code.
pub const SEMANTIC_DIM: usize = 3;
/// Depth targets are regressed around this offset.
const DEPTH_CENTER: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct FusionSettings {
    pub strategy: FusionStrategy,
    pub model_dim: usize,
    pub heads: usize,
    pub gate_hidden: usize,
    pub positional: bool,
    pub lattice: usize,
    pub policy: PolicySettings,
    /// Weight of the flow loss; 0 trains the stack on depth alone.
    pub policy_weight: f64,
    pub aux_weight: f64,
}

impl Default for FusionSettings {
    fn default() -> Self {
        Self {
            strategy: FusionStrategy::G3t,
            model_dim: 32,
            heads: 4,
            gate_hidden: 64,
            positional: true,
            lattice: 8,
            policy: PolicySettings {
                batch: 8,
                steps: 1000,
                hidden: 64,
                ..PolicySettings::default()
            },
            policy_weight: 1.0,
            aux_weight: 1.0,
        }
    }
}

impl FusionSettings {
    pub fn stack_config(&self) -> G3TConfig {
        let m = self.lattice * self.lattice;
        G3TConfig {
            model_dim: self.model_dim,
            heads: self.heads,
            gate_hidden: self.gate_hidden,
            positional: self.positional,
            strategy: self.strategy,
            ..G3TConfig::new(CHANNELS, CHANNELS, m, m)
        }
    }

    fn meta(&self) -> Vec<(String, String)> {
        let p = &self.policy;
        [
            ("model", "vision".to_string()),
            ("strategy", self.strategy.to_string()),
            ("model_dim", self.model_dim.to_string()),
            ("heads", self.heads.to_string()),
            ("gate_hidden", self.gate_hidden.to_string()),
            ("positional", self.positional.to_string()),
            ("lattice", self.lattice.to_string()),
            ("policy_weight", self.policy_weight.to_string()),
            ("aux_weight", self.aux_weight.to_string()),
            ("kind", p.kind.to_string()),
            ("horizon", p.horizon.to_string()),
            ("hidden", p.hidden.to_string()),
            ("blocks", p.blocks.to_string()),
            ("time_dim", p.time_dim.to_string()),
            ("schedule", p.schedule.to_string()),
            ("steps", p.steps.to_string()),
            ("batch", p.batch.to_string()),
            ("lr", p.lr.to_string()),
            ("warmup", p.warmup.to_string()),
            ("weight_decay", p.weight_decay.to_string()),
            ("seed", p.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    fn from_meta(c: &Checkpoint) -> Result<Self> {
        if c.meta("model")? != "vision" {
            return Err(Error::Format(format!("expected a vision checkpoint, got `{}`", c.meta("model")?)));
        }
        Ok(Self {
            strategy: c.meta_parse("strategy")?,
            model_dim: c.meta_parse("model_dim")?,
            heads: c.meta_parse("heads")?,
            gate_hidden: c.meta_parse("gate_hidden")?,
            positional: c.meta_parse("positional")?,
            lattice: c.meta_parse("lattice")?,
            policy_weight: c.meta_parse("policy_weight")?,
            aux_weight: c.meta_parse("aux_weight")?,
            policy: PolicySettings {
                kind: c.meta_parse("kind")?,
                horizon: c.meta_parse("horizon")?,
                hidden: c.meta_parse("hidden")?,
                blocks: c.meta_parse("blocks")?,
                time_dim: c.meta_parse("time_dim")?,
                schedule: c.meta_parse("schedule")?,
                steps: c.meta_parse("steps")?,
                batch: c.meta_parse("batch")?,
                lr: c.meta_parse("lr")?,
                warmup: c.meta_parse("warmup")?,
                weight_decay: c.meta_parse("weight_decay")?,
                seed: c.meta_parse("seed")?,
            },
        })
    }
}

/// Fusion stack, semantic read-out, depth probe head and flow head.
#[derive(Debug, Clone)]
pub struct VisionModel {
    pub settings: FusionSettings,
    pub stack: G3TParams,
    pub sem_in: Linear,
    pub sem: SemanticFusion,
    pub depth_head: Linear,
    pub net: PolicyNetwork,
    pub store: ParamStore<f64>,
    pub norm: NormStats,
    pub step: u64,
    pub losses: Vec<f64>,
}

/// One observation as the vision model consumes it.
#[derive(Debug, Clone)]
pub struct VisionObs<'a> {
    pub render: &'a RenderOutput,
    pub semantic: [f64; SEMANTIC_DIM],
    pub state: &'a [f64],
}

/// Goal position (centered) and the target's class code as rendered.
pub fn semantic_vector(context: &[f64], target: u32, n_objects: usize) -> [f64; SEMANTIC_DIM] {
    [context[2], context[3], (target as f64 + 1.0) / (n_objects as f64 + 1.0)]
}

fn stack_rows(parts: impl Iterator<Item = Vec<f64>>, cols: usize) -> Result<Tensor<f64>> {
    let data: Vec<f64> = parts.flatten().collect();
    Tensor::matrix(data.len() / cols, cols, data)
}

/// Graph inputs for a batch of observations.
struct ObsBatch {
    mono: Tensor<f64>,
    left: Tensor<f64>,
    right: Tensor<f64>,
    semantic: Tensor<f64>,
    state: Tensor<f64>,
    depth: Tensor<f64>,
    batch: usize,
}

impl ObsBatch {
    fn new(obs: &[VisionObs]) -> Result<Self> {
        let b = obs.len();
        Ok(Self {
            mono: stack_rows(obs.iter().map(|o| o.render.mono.data().to_vec()), CHANNELS)?,
            left: stack_rows(obs.iter().map(|o| o.render.left.data().to_vec()), CHANNELS)?,
            right: stack_rows(obs.iter().map(|o| o.render.right.data().to_vec()), CHANNELS)?,
            semantic: stack_rows(obs.iter().map(|o| o.semantic.to_vec()), SEMANTIC_DIM)?,
            state: stack_rows(obs.iter().map(|o| o.state.to_vec()), STATE_DIM)?,
            depth: stack_rows(obs.iter().map(|o| o.render.depth_truth.iter().map(|d| d - DEPTH_CENTER).collect()), 1)?,
            batch: b,
        })
    }
}

/// Graph nodes produced by one forward pass over a batch.
pub struct VisionForward {
    pub cond: Var,
    pub spatial: Var,
    pub gate: Option<Var>,
}

impl VisionModel {
    pub fn new(settings: &FusionSettings) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(settings.policy.seed, STREAM_INIT);
        let cfg = settings.stack_config();
        let c = settings.model_dim;
        let stack = G3TParams::new(&mut store, "g3t", cfg.clone(), &mut rng)?;
        let sem_in = Linear::new(&mut store, "sem.in", SEMANTIC_DIM, c, true, &mut rng)?;
        let sem = SemanticFusion::new(&mut store, "sem.cross", c, c, c, settings.heads, &mut rng)?;
        let depth_head = Linear::new(&mut store, "depth", cfg.spatial_dim(), 1, true, &mut rng)?;
        let net = PolicyNetwork::new(&mut store, "policy", settings.policy.network_config(c + STATE_DIM), &mut rng)?;
        Ok(Self {
            settings: settings.clone(),
            stack,
            sem_in,
            sem,
            depth_head,
            net,
            store,
            norm: NormStats::identity(ACTION_DIM),
            step: 0,
            losses: Vec::new(),
        })
    }

    fn forward(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, ob: &ObsBatch) -> Result<VisionForward> {
        let t = TokenBatch {
            mono: g.constant(ob.mono.clone()),
            left: g.constant(ob.left.clone()),
            right: g.constant(ob.right.clone()),
            batch: ob.batch,
        };
        let out = self.stack.forward(g, store, &t)?;
        let spatial = self.stack.spatial_features(g, &out, ob.batch)?;
        let s = g.constant(ob.semantic.clone());
        let q = self.sem_in.forward(g, store, s)?;
        let summary = self.sem.forward(g, store, q, out.tokens, ob.batch)?;
        let state = g.constant(ob.state.clone());
        let cond = g.concat_cols(&[summary, state])?;
        Ok(VisionForward {
            cond,
            spatial,
            gate: out.gate,
        })
    }

    /// Predicted per-token depth, `(B·M)×1`, in scene units.
    fn depth_pred(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, spatial: Var) -> Result<Var> {
        self.depth_head.forward(g, store, spatial)
    }

    /// Gate values for one observation (G3T only).
    pub fn gate_values(&self, render: &RenderOutput) -> Result<Option<Vec<f64>>> {
        let obs = VisionObs {
            render,
            semantic: [0.0; SEMANTIC_DIM],
            state: &[0.0; STATE_DIM],
        };
        let ob = ObsBatch::new(std::slice::from_ref(&obs))?;
        let mut g = Graph::new();
        let f = self.forward(&mut g, &self.store, &ob)?;
        Ok(f.gate.map(|v| g.value(v).data().to_vec()))
    }

    /// Frozen per-lattice-cell features, `M×spatial_dim`.
    pub fn spatial_features(&self, render: &RenderOutput) -> Result<Tensor<f64>> {
        let obs = VisionObs {
            render,
            semantic: [0.0; SEMANTIC_DIM],
            state: &[0.0; STATE_DIM],
        };
        let ob = ObsBatch::new(std::slice::from_ref(&obs))?;
        let mut g = Graph::new();
        let f = self.forward(&mut g, &self.store, &ob)?;
        Ok(g.value(f.spatial).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(self.settings.meta(), &self.store, self.norm.clone(), self.step)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let settings = FusionSettings::from_meta(c)?;
        let mut m = Self::new(&settings)?;
        c.load_into(&mut m.store)?;
        m.norm = c.norm.clone();
        m.step = c.step;
        Ok(m)
    }

    /// Samples normalized-then-denormalized chunks for a batch of observations.
    pub fn plan(&self, obs: &[VisionObs], noise: Tensor<f64>, steps: usize) -> Result<Vec<Vec<[f64; 3]>>> {
        let ob = ObsBatch::new(obs)?;
        let mut g = Graph::new();
        let f = self.forward(&mut g, &self.store, &ob)?;
        let cond = g.value(f.cond).clone();
        let mut den = VisionDenoiser {
            net: &self.net,
            store: &self.store,
            cond,
        };
        let out = sample_from_noise(&mut den, noise, steps)?;
        Ok((0..obs.len())
            .map(|i| {
                let mut row = out.row(i).to_vec();
                self.norm.denormalize(&mut row);
                row.chunks(ACTION_DIM).map(|a| [a[0], a[1], a[2]]).collect()
            })
            .collect())
    }
}

struct VisionDenoiser<'a> {
    net: &'a PolicyNetwork,
    store: &'a ParamStore<f64>,
    cond: Tensor<f64>,
}

impl Denoiser<f64> for VisionDenoiser<'_> {
    fn kind(&self) -> PredictionKind {
        self.net.kind()
    }

    fn predict(&mut self, noisy: &Tensor<f64>, tau: f64) -> Result<Tensor<f64>> {
        let mut g = Graph::new();
        let x = g.constant(noisy.clone());
        let c = g.constant(self.cond.clone());
        let y = self.net.forward(&mut g, self.store, x, &vec![tau; noisy.rows()], c)?;
        Ok(g.value(y).clone())
    }
}

/// Flattened vision training samples.
struct VisionTable<'a> {
    obs: Vec<VisionObs<'a>>,
    chunks: Vec<Vec<f64>>,
}

impl<'a> VisionTable<'a> {
    fn from_dataset(ds: &'a Dataset, n_objects: usize) -> Result<Self> {
        let mut obs = Vec::new();
        let mut chunks = Vec::new();
        for e in &ds.episodes {
            for s in &e.steps {
                let render = s
                    .views
                    .as_ref()
                    .ok_or_else(|| Error::Config("fusion training needs a dataset rendered with views".into()))?;
                obs.push(VisionObs {
                    render,
                    semantic: semantic_vector(&s.context, e.goal.target, n_objects),
                    state: &s.state,
                });
                let mut c = s.chunk.clone();
                ds.norm.normalize(&mut c);
                chunks.push(c);
            }
        }
        if obs.is_empty() {
            return Err(Error::NoData("dataset has no steps".into()));
        }
        Ok(Self { obs, chunks })
    }
}

/// Trains the fusion stack and flow head end to end.
pub fn train_vision_policy(ds: &Dataset, settings: &FusionSettings, n_objects: usize) -> Result<VisionModel> {
    let p = &settings.policy;
    if ds.horizon != p.horizon || ds.grid != settings.lattice {
        return Err(Error::Config(format!(
            "dataset (H={}, lattice {}) does not match settings (H={}, lattice {})",
            ds.horizon, ds.grid, p.horizon, settings.lattice
        )));
    }
    let table = VisionTable::from_dataset(ds, n_objects)?;
    let mut model = VisionModel::new(settings)?;
    model.norm = ds.norm.clone();
    let mut store = std::mem::take(&mut model.store);
    let mut opt = AdamW::new(
        &store,
        AdamWConfig {
            lr: p.lr,
            weight_decay: p.weight_decay,
            ..Default::default()
        },
    );
    let sched = CosineSchedule {
        base_lr: p.lr,
        warmup: p.warmup,
        total: p.steps,
    };
    let mut batch_rng = RngStream::new(p.seed, STREAM_BATCH);
    let mut flow_rng = RngStream::new(p.seed, STREAM_FLOW);
    let chunk_len = p.horizon * ACTION_DIM;
    for step in 0..p.steps {
        let idx: Vec<usize> = (0..p.batch).map(|_| batch_rng.below(table.obs.len())).collect();
        let obs: Vec<VisionObs> = idx.iter().map(|&i| table.obs[i].clone()).collect();
        let ob = ObsBatch::new(&obs)?;
        let clean = Tensor::matrix(p.batch, chunk_len, idx.iter().flat_map(|&i| table.chunks[i].clone()).collect())?;
        let draws = sample_draws(p.batch, chunk_len, p.schedule, &mut flow_rng);
        let mut g = Graph::new();
        let f = model.forward(&mut g, &store, &ob)?;
        let mut loss = None;
        if settings.policy_weight > 0.0 {
            let l = flow_loss(&mut g, &store, &model.net, f.cond, &clean, &draws)
                .map_err(|e| Error::Numeric(format!("training aborted at step {step} ({settings:?}): {e}")))?;
            loss = Some(g.scale(l, settings.policy_weight));
        }
        if settings.aux_weight > 0.0 {
            let pred = model.depth_pred(&mut g, &store, f.spatial)?;
            let target = g.constant(ob.depth.clone());
            let d = g.sub(pred, target)?;
            let sq = g.square(d);
            let m = g.mean(sq);
            let m = g.scale(m, settings.aux_weight);
            loss = Some(match loss {
                Some(l) => g.add(l, m)?,
                None => m,
            });
        }
        let loss = loss.ok_or_else(|| Error::Config("fusion training needs a positive loss weight".into()))?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Numeric(format!("training aborted at step {step} ({settings:?}): loss {value}")));
        }
        g.backward(loss)?;
        g.accumulate_param_grads(&mut store)?;
        opt.step(&mut store, sched.lr(step))
            .map_err(|e| Error::Numeric(format!("training aborted at step {step} ({settings:?}): {e}")))?;
        model.losses.push(value);
        if step % 100 == 0 {
            debug!("{} step {step} loss {value:.5}", settings.strategy);
        }
    }
    info!(
        "trained {} fusion policy, {} steps, final loss {:.5}",
        settings.strategy,
        p.steps,
        model.losses.last().copied().unwrap_or(f64::NAN)
    );
    model.store = store;
    model.step = p.steps as u64;
    Ok(model)
}

/// Mean weight the gate gives the clean side and the corrupted side, over
/// corrupted tokens of each render. `None` without a gate or corruption.
pub fn gate_side_means(model: &VisionModel, renders: &[RenderOutput]) -> Result<Option<(f64, f64)>> {
    let (mut corrupted, mut n) = (0.0, 0usize);
    for r in renders {
        let Some(gate) = model.gate_values(r)? else {
            return Ok(None);
        };
        for &t in &r.corrupted_left {
            corrupted += gate[t];
            n += 1;
        }
        for &t in &r.corrupted_right {
            corrupted += 1.0 - gate[t];
            n += 1;
        }
    }
    if n == 0 {
        return Ok(None);
    }
    let c = corrupted / n as f64;
    Ok(Some((1.0 - c, c)))
}

/// Renders `n` held-out scenes keyed by `(seed, stream base + i)`.
pub fn render_scenes(seed: u64, n: usize, lattice: usize, occlusion: &OcclusionConfig) -> Result<Vec<RenderOutput>> {
    let layout = crate::world::LayoutParams::default();
    let specs = ViewSpec::defaults(lattice);
    crate::world::episode_seeds(seed, n)
        .into_iter()
        .map(|s| {
            let state = crate::world::reset(s, &layout)?;
            render_views(&state, &specs, occlusion, &RngStream::new(s, crate::world::dataset::RENDER_STREAM))
        })
        .collect()
}

/// Wraps a trained vision model for the rollout harness.
pub struct VisionPolicy<'a> {
    pub model: &'a VisionModel,
    pub denoise_steps: usize,
    pub occlusion: OcclusionConfig,
    pub perturbation: Option<PerturbationSpec>,
    pub n_objects: usize,
    calls: u64,
}

impl<'a> VisionPolicy<'a> {
    pub fn new(model: &'a VisionModel, denoise_steps: usize, occlusion: OcclusionConfig, perturbation: Option<PerturbationSpec>) -> Self {
        Self {
            model,
            denoise_steps,
            occlusion,
            perturbation,
            n_objects: crate::world::LayoutParams::default().n_objects,
            calls: 0,
        }
    }
}

impl ChunkPolicy for VisionPolicy<'_> {
    fn horizon(&self) -> usize {
        self.model.net.config.horizon
    }

    fn plan(&mut self, states: &[&WorldState], obs: &[Vec<f64>], rngs: &mut [RngStream]) -> Result<Vec<Vec<[f64; 3]>>> {
        let specs = ViewSpec::defaults(self.model.settings.lattice);
        let key = EVAL_RENDER_STREAM + self.calls;
        self.calls += 1;
        let mut renders = Vec::with_capacity(states.len());
        for (s, r) in states.iter().zip(rngs.iter()) {
            let k = RngStream::new(r.seed(), key);
            let mut render = render_views(s, &specs, &self.occlusion, &k)?;
            if let Some(p) = &self.perturbation {
                render = apply_perturbation(&render, p, &mut k.fork(FORK_PERTURB))?;
            }
            renders.push(render);
        }
        let vo: Vec<VisionObs> = renders
            .iter()
            .zip(states.iter().zip(obs))
            .map(|(render, (s, o))| VisionObs {
                render,
                semantic: semantic_vector(&s.context_vector(), s.goal.target, self.n_objects),
                state: &o[o.len() - STATE_DIM..],
            })
            .collect();
        let chunk_len = self.model.net.config.chunk_len();
        let mut a0 = Vec::with_capacity(states.len() * chunk_len);
        for r in rngs.iter_mut().take(states.len()) {
            a0.extend((0..chunk_len).map(|_| r.normal()));
        }
        self.model.plan(&vo, Tensor::matrix(states.len(), chunk_len, a0)?, self.denoise_steps)
    }
}
