use log::{debug, info};

use crate::error::{Error, Result};
use crate::flow::{flow_loss, sample_draws, PolicyConfig, PolicyNetwork, PredictionKind, TauSchedule};
use crate::nn::{AdamW, AdamWConfig, CosineSchedule, Graph, ParamStore, RngStream, Tensor};
use super::checkpoint::Checkpoint;
use crate::world::{Dataset, NormStats, ACTION_DIM, CONTEXT_DIM, STATE_DIM};

const STREAM_INIT: u64 = 11;
const STREAM_BATCH: u64 = 12;
const STREAM_FLOW: u64 = 13;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicySettings {
    pub kind: PredictionKind,
    pub horizon: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub time_dim: usize,
    pub schedule: TauSchedule,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PolicySettings {
    fn default() -> Self {
        Self {
            kind: PredictionKind::Action,
            horizon: 8,
            hidden: 128,
            blocks: 4,
            time_dim: 32,
            schedule: TauSchedule::default(),
            steps: 5000,
            batch: 64,
            lr: 1e-3,
            warmup: 250,
            weight_decay: 1e-8,
            seed: 0,
        }
    }
}

impl PolicySettings {
    pub fn network_config(&self, cond_dim: usize) -> PolicyConfig {
        PolicyConfig {
            horizon: self.horizon,
            action_dim: ACTION_DIM,
            cond_dim,
            hidden: self.hidden,
            blocks: self.blocks,
            time_dim: self.time_dim,
            kind: self.kind,
        }
    }
}

/// A trained state-conditioned policy with its normalization.
#[derive(Debug, Clone)]
pub struct TrainedPolicy {
    pub settings: PolicySettings,
    pub net: PolicyNetwork,
    pub store: ParamStore<f64>,
    pub norm: NormStats,
    pub step: u64,
    pub losses: Vec<f64>,
}

pub const STATE_COND_DIM: usize = CONTEXT_DIM + STATE_DIM;

pub fn init_policy(settings: &PolicySettings, cond_dim: usize) -> Result<(PolicyNetwork, ParamStore<f64>)> {
    let mut store = ParamStore::new();
    let mut rng = RngStream::new(settings.seed, STREAM_INIT);
    let net = PolicyNetwork::new(&mut store, "policy", settings.network_config(cond_dim), &mut rng)?;
    Ok((net, store))
}

/// Flattened training pairs: conditioning rows and normalized chunks.
pub struct StateTable {
    pub cond: Vec<f64>,
    pub chunks: Vec<f64>,
    pub rows: usize,
    pub cond_dim: usize,
    pub chunk_len: usize,
}

impl StateTable {
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        let chunk_len = ds.horizon * ds.action_dim;
        let mut cond = Vec::new();
        let mut chunks = Vec::new();
        for s in ds.steps() {
            cond.extend_from_slice(&s.context);
            cond.extend_from_slice(&s.state);
            let mut c = s.chunk.clone();
            ds.norm.normalize(&mut c);
            chunks.extend_from_slice(&c);
        }
        let rows = ds.len();
        if rows == 0 {
            return Err(Error::NoData("dataset has no steps".into()));
        }
        Ok(Self {
            cond,
            chunks,
            rows,
            cond_dim: STATE_COND_DIM,
            chunk_len,
        })
    }

    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor<f64>, Tensor<f64>)> {
        let mut c = Vec::with_capacity(idx.len() * self.cond_dim);
        let mut a = Vec::with_capacity(idx.len() * self.chunk_len);
        for &i in idx {
            c.extend_from_slice(&self.cond[i * self.cond_dim..(i + 1) * self.cond_dim]);
            a.extend_from_slice(&self.chunks[i * self.chunk_len..(i + 1) * self.chunk_len]);
        }
        Ok((Tensor::matrix(idx.len(), self.cond_dim, c)?, Tensor::matrix(idx.len(), self.chunk_len, a)?))
    }
}

/// Trains a state-conditioned flow policy with AdamW under a warmup+cosine
/// schedule. A non-finite loss aborts with the step number.
pub fn train_state_policy(ds: &Dataset, settings: &PolicySettings) -> Result<TrainedPolicy> {
    train_state_policy_with(ds, settings, 0, &mut |_| Ok(()))
}

/// As [`train_state_policy`], handing a snapshot to `on_checkpoint` every
/// `every` steps (never when `every` is 0).
pub fn train_state_policy_with(
    ds: &Dataset,
    settings: &PolicySettings,
    every: usize,
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainedPolicy> {
    if ds.horizon != settings.horizon {
        return Err(Error::Config(format!(
            "dataset horizon {} does not match policy horizon {}",
            ds.horizon, settings.horizon
        )));
    }
    let table = StateTable::from_dataset(ds)?;
    let (net, mut store) = init_policy(settings, table.cond_dim)?;
    let mut opt = AdamW::new(
        &store,
        AdamWConfig {
            lr: settings.lr,
            weight_decay: settings.weight_decay,
            ..Default::default()
        },
    );
    let sched = CosineSchedule {
        base_lr: settings.lr,
        warmup: settings.warmup,
        total: settings.steps,
    };
    let mut batch_rng = RngStream::new(settings.seed, STREAM_BATCH);
    let mut flow_rng = RngStream::new(settings.seed, STREAM_FLOW);
    let mut losses = Vec::with_capacity(settings.steps);
    for step in 0..settings.steps {
        let idx: Vec<usize> = (0..settings.batch).map(|_| batch_rng.below(table.rows)).collect();
        let (cond, clean) = table.gather(&idx)?;
        let draws = sample_draws(settings.batch, table.chunk_len, settings.schedule, &mut flow_rng);
        let mut g = Graph::new();
        let c = g.constant(cond);
        let loss = flow_loss(&mut g, &store, &net, c, &clean, &draws)
            .map_err(|e| Error::Numeric(format!("training aborted at step {step} ({settings:?}): {e}")))?;
        let value = g.value(loss).data()[0];
        g.backward(loss)?;
        g.accumulate_param_grads(&mut store)?;
        opt.step(&mut store, sched.lr(step))
            .map_err(|e| Error::Numeric(format!("training aborted at step {step}: {e}")))?;
        losses.push(value);
        if every > 0 && (step + 1) % every == 0 && step + 1 < settings.steps {
            on_checkpoint(&policy_checkpoint(settings, table.cond_dim, &store, &ds.norm, step as u64 + 1))?;
        }
        if step % 500 == 0 {
            debug!("{} H={} step {step} loss {value:.5}", settings.kind, settings.horizon);
        }
    }
    info!(
        "trained {} head, H={}, {} steps, final loss {:.5}",
        settings.kind,
        settings.horizon,
        settings.steps,
        losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(TrainedPolicy {
        settings: settings.clone(),
        net,
        store,
        norm: ds.norm.clone(),
        step: settings.steps as u64,
        losses,
    })
}

fn policy_checkpoint(settings: &PolicySettings, cond_dim: usize, store: &ParamStore<f64>, norm: &NormStats, step: u64) -> Checkpoint {
    let meta = vec![
        ("model".to_string(), "state".to_string()),
        ("kind".to_string(), settings.kind.to_string()),
        ("horizon".to_string(), settings.horizon.to_string()),
        ("hidden".to_string(), settings.hidden.to_string()),
        ("blocks".to_string(), settings.blocks.to_string()),
        ("time_dim".to_string(), settings.time_dim.to_string()),
        ("cond_dim".to_string(), cond_dim.to_string()),
        ("schedule".to_string(), settings.schedule.to_string()),
        ("steps".to_string(), settings.steps.to_string()),
        ("batch".to_string(), settings.batch.to_string()),
        ("lr".to_string(), settings.lr.to_string()),
        ("warmup".to_string(), settings.warmup.to_string()),
        ("weight_decay".to_string(), settings.weight_decay.to_string()),
        ("seed".to_string(), settings.seed.to_string()),
    ];
    Checkpoint::from_store(meta, store, norm.clone(), step)
}

impl TrainedPolicy {
    pub fn to_checkpoint(&self) -> Checkpoint {
        policy_checkpoint(&self.settings, self.net.config.cond_dim, &self.store, &self.norm, self.step)
    }

    /// Rebuilds the network from checkpoint hyperparameters and loads its
    /// weights. The loss curve is not stored.
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.meta("model")? != "state" {
            return Err(Error::Format(format!("expected a state-policy checkpoint, got `{}`", c.meta("model")?)));
        }
        let settings = PolicySettings {
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
        };
        let (net, mut store) = init_policy(&settings, c.meta_parse("cond_dim")?)?;
        c.load_into(&mut store)?;
        Ok(Self {
            settings,
            net,
            store,
            norm: c.norm.clone(),
            step: c.step,
            losses: Vec::new(),
        })
    }
}
