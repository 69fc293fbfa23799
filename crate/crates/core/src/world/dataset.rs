use std::io::{Read, Write};

use super::render::{render_views, OcclusionConfig, RenderOutput, ViewSpec, CHANNELS, DEFAULT_GRID};
use super::{evaluate_success, expert_action, reset, scripted_expert, Goal, LayoutParams, WorldState, ACTION_DIM, MAX_EPISODE_STEPS, SUCCESS_TOL};
use crate::error::{Error, Result};
use crate::nn::{RngStream, Tensor};

pub const DATASET_MAGIC: &[u8; 4] = b"TOYW";
pub const DATASET_VERSION: u32 = 1;

const STREAM_EPISODES: u64 = 7;
/// Render key for step `t` of an episode is `(episode seed, RENDER_STREAM + t)`.
pub const RENDER_STREAM: u64 = 1000;

/// Per-action-dimension mean and std of expert chunks.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Stats over flattened chunks whose entries cycle through `dim` dimensions.
    pub fn fit<'a>(chunks: impl Iterator<Item = &'a [f64]>, dim: usize) -> Result<Self> {
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let mut n = 0usize;
        for c in chunks {
            for (k, &v) in c.iter().enumerate() {
                sum[k % dim] += v;
                sq[k % dim] += v * v;
            }
            n += c.len() / dim;
        }
        if n == 0 {
            return Err(Error::NoData("no chunks to normalize".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / n as f64 - m * m).max(0.0);
                if var > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, chunk: &mut [f64]) {
        let d = self.dim();
        for (k, v) in chunk.iter_mut().enumerate() {
            *v = (*v - self.mean[k % d]) / self.std[k % d];
        }
    }

    pub fn denormalize(&self, chunk: &mut [f64]) {
        let d = self.dim();
        for (k, v) in chunk.iter_mut().enumerate() {
            *v = *v * self.std[k % d] + self.mean[k % d];
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub context: Vec<f64>,
    pub state: Vec<f64>,
    /// Raw expert chunk, `H·D` row-major.
    pub chunk: Vec<f64>,
    pub views: Option<RenderOutput>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub goal: Goal,
    pub success: bool,
    pub steps: Vec<StepRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub n_episodes: usize,
    pub horizon: usize,
    pub seed: u64,
    pub occlusion: OcclusionConfig,
    pub with_views: bool,
    pub grid: usize,
    pub layout: LayoutParams,
}

impl DatasetConfig {
    pub fn new(n_episodes: usize, horizon: usize, seed: u64, occlusion: OcclusionConfig) -> Self {
        Self {
            n_episodes,
            horizon,
            seed,
            occlusion,
            with_views: false,
            grid: DEFAULT_GRID,
            layout: LayoutParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub horizon: usize,
    pub action_dim: usize,
    pub grid: usize,
    pub norm: NormStats,
    pub episodes: Vec<EpisodeRecord>,
}

impl Dataset {
    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.episodes.iter().flat_map(|e| e.steps.iter())
    }

    pub fn len(&self) -> usize {
        self.episodes.iter().map(|e| e.steps.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn has_views(&self) -> bool {
        self.steps().next().is_some_and(|s| s.views.is_some())
    }
}

/// Seed of the `i`-th episode of a dataset seeded with `seed`.
pub fn episode_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = RngStream::new(seed, STREAM_EPISODES);
    (0..n).map(|_| rng.next_u64()).collect()
}

fn rollout(seed: u64, cfg: &DatasetConfig) -> Result<EpisodeRecord> {
    let mut state: WorldState = reset(seed, &cfg.layout)?;
    let specs = ViewSpec::defaults(cfg.grid);
    let mut steps = Vec::new();
    for t in 0..MAX_EPISODE_STEPS {
        if evaluate_success(&state, SUCCESS_TOL)? {
            break;
        }
        let chunk: Vec<f64> = scripted_expert(&state, cfg.horizon).into_iter().flatten().collect();
        let views = if cfg.with_views {
            let key = RngStream::new(seed, RENDER_STREAM + t as u64);
            Some(render_views(&state, &specs, &cfg.occlusion, &key)?)
        } else {
            None
        };
        steps.push(StepRecord {
            context: state.context_vector().to_vec(),
            state: state.state_vector().to_vec(),
            chunk,
            views,
        });
        state.step(expert_action(&state));
    }
    Ok(EpisodeRecord {
        seed,
        goal: state.goal,
        success: evaluate_success(&state, SUCCESS_TOL)?,
        steps,
    })
}

pub fn generate_dataset_with(cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.n_episodes == 0 || cfg.horizon == 0 {
        return Err(Error::Config("dataset needs at least one episode and H ≥ 1".into()));
    }
    cfg.occlusion.validate()?;
    let episodes = episode_seeds(cfg.seed, cfg.n_episodes)
        .into_iter()
        .map(|s| rollout(s, cfg))
        .collect::<Result<Vec<_>>>()?;
    let norm = NormStats::fit(episodes.iter().flat_map(|e| e.steps.iter().map(|s| s.chunk.as_slice())), ACTION_DIM)?;
    Ok(Dataset {
        horizon: cfg.horizon,
        action_dim: ACTION_DIM,
        grid: cfg.grid,
        norm,
        episodes,
    })
}

/// State-observation dataset of `n_episodes` expert rollouts, re-chunked into
/// overlapping `horizon`-step windows.
pub fn generate_dataset(n_episodes: usize, horizon: usize, seed: u64, occlusion: OcclusionConfig) -> Result<Dataset> {
    generate_dataset_with(&DatasetConfig::new(n_episodes, horizon, seed, occlusion))
}

pub(crate) struct Writer<'a>(pub(crate) &'a mut Vec<u8>);

impl Writer<'_> {
    pub(crate) fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    pub(crate) fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub(crate) fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub(crate) fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    pub(crate) fn vec(&mut self, vs: &[f64]) {
        self.u32(vs.len() as u32);
        self.f64s(vs);
    }
    pub(crate) fn idx(&mut self, vs: &[usize]) {
        self.u32(vs.len() as u32);
        for &v in vs {
            self.u32(v as u32);
        }
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!("truncated input at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
    pub(crate) fn vec(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()? as usize;
        self.f64s(n)
    }
    fn idx(&mut self) -> Result<Vec<usize>> {
        let n = self.u32()? as usize;
        (0..n).map(|_| Ok(self.u32()? as usize)).collect()
    }
    pub(crate) fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn encode_episode(e: &EpisodeRecord, grid: usize) -> Vec<u8> {
    let mut buf = Vec::new();
    let mut w = Writer(&mut buf);
    w.u64(e.seed);
    w.f64s(&[e.goal.x, e.goal.y]);
    w.u32(e.goal.target);
    w.u8(e.success as u8);
    w.u32(e.steps.len() as u32);
    for s in &e.steps {
        w.vec(&s.context);
        w.vec(&s.state);
        w.vec(&s.chunk);
        match &s.views {
            Some(v) => {
                debug_assert_eq!(v.grid, grid);
                w.u8(1);
                w.f64s(v.mono.data());
                w.f64s(v.left.data());
                w.f64s(v.right.data());
                w.f64s(&v.depth_truth);
                w.idx(&v.corrupted_left);
                w.idx(&v.corrupted_right);
            }
            None => w.u8(0),
        }
    }
    buf
}

fn decode_episode(buf: &[u8], grid: usize) -> Result<EpisodeRecord> {
    let mut r = Reader::new(buf);
    let seed = r.u64()?;
    let (gx, gy) = (r.f64()?, r.f64()?);
    let target = r.u32()?;
    let success = r.u8()? != 0;
    let n = r.u32()? as usize;
    let m = grid * grid;
    let mut steps = Vec::with_capacity(n);
    for _ in 0..n {
        let context = r.vec()?;
        let state = r.vec()?;
        let chunk = r.vec()?;
        let views = match r.u8()? {
            0 => None,
            1 => Some(RenderOutput {
                grid,
                mono: Tensor::matrix(m, CHANNELS, r.f64s(m * CHANNELS)?)?,
                left: Tensor::matrix(m, CHANNELS, r.f64s(m * CHANNELS)?)?,
                right: Tensor::matrix(m, CHANNELS, r.f64s(m * CHANNELS)?)?,
                depth_truth: r.f64s(m)?,
                corrupted_left: r.idx()?,
                corrupted_right: r.idx()?,
            }),
            f => return Err(Error::Format(format!("bad view flag {f}"))),
        };
        steps.push(StepRecord { context, state, chunk, views });
    }
    if !r.done() {
        return Err(Error::Format("trailing bytes in episode record".into()));
    }
    Ok(EpisodeRecord {
        seed,
        goal: Goal { x: gx, y: gy, target },
        success,
        steps,
    })
}

/// `TOYW | version | H | D | grid | mean[D] | std[D] | n | (len u64, record)*`.
pub fn write_dataset(ds: &Dataset, out: &mut impl Write) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    let mut w = Writer(&mut buf);
    w.u32(DATASET_VERSION);
    w.u32(ds.horizon as u32);
    w.u32(ds.action_dim as u32);
    w.u32(ds.grid as u32);
    w.f64s(&ds.norm.mean);
    w.f64s(&ds.norm.std);
    w.u32(ds.episodes.len() as u32);
    for e in &ds.episodes {
        let rec = encode_episode(e, ds.grid);
        let mut w = Writer(&mut buf);
        w.u64(rec.len() as u64);
        buf.extend_from_slice(&rec);
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_dataset(input: &mut impl Read) -> Result<Dataset> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let mut r = Reader::new(&buf);
    if r.take(4)? != DATASET_MAGIC {
        return Err(Error::Format("not a TOYW dataset".into()));
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::Version { expected: DATASET_VERSION, found: version });
    }
    let horizon = r.u32()? as usize;
    let action_dim = r.u32()? as usize;
    let grid = r.u32()? as usize;
    let norm = NormStats {
        mean: r.f64s(action_dim)?,
        std: r.f64s(action_dim)?,
    };
    let n = r.u32()? as usize;
    let mut episodes = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u64()? as usize;
        episodes.push(decode_episode(r.take(len)?, grid)?);
    }
    if !r.done() {
        return Err(Error::Format("trailing bytes after last record".into()));
    }
    Ok(Dataset { horizon, action_dim, grid, norm, episodes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::render::OcclusionSide;

    #[test]
    fn chunks_have_fixed_shape() {
        let ds = generate_dataset(1, 8, 3, OcclusionConfig::none()).unwrap();
        assert!(!ds.is_empty());
        assert!(ds.steps().all(|s| s.chunk.len() == 24));
    }

    #[test]
    fn round_trip_with_views() {
        let mut cfg = DatasetConfig::new(2, 4, 5, OcclusionConfig { side: OcclusionSide::Random, coverage: 0.4 });
        cfg.with_views = true;
        let ds = generate_dataset_with(&cfg).unwrap();
        let mut bytes = Vec::new();
        write_dataset(&ds, &mut bytes).unwrap();
        let back = read_dataset(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, ds);
        let mut again = Vec::new();
        write_dataset(&back, &mut again).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn bad_header_rejected() {
        let ds = generate_dataset(1, 2, 0, OcclusionConfig::none()).unwrap();
        let mut bytes = Vec::new();
        write_dataset(&ds, &mut bytes).unwrap();
        bytes[4] = 9;
        assert!(matches!(read_dataset(&mut bytes.as_slice()), Err(Error::Version { found: 9, .. })));
        bytes[0] = b'X';
        assert!(matches!(read_dataset(&mut bytes.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn norm_round_trip() {
        let n = NormStats { mean: vec![1.0, -2.0], std: vec![0.5, 3.0] };
        let mut c = vec![1.5, 4.0, 0.0, -2.0];
        let orig = c.clone();
        n.normalize(&mut c);
        n.denormalize(&mut c);
        for (a, b) in c.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
