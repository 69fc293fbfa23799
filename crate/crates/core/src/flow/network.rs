use super::PredictionKind;
use crate::error::{Error, Result};
use crate::nn::{time_embedding_batch, Graph, LayerNorm, Linear, Mlp, ParamStore, RngStream, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub horizon: usize,
    pub action_dim: usize,
    /// Width of the conditioning vector (context φ and state q concatenated).
    pub cond_dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub time_dim: usize,
    pub kind: PredictionKind,
}

impl PolicyConfig {
    pub fn chunk_len(&self) -> usize {
        self.horizon * self.action_dim
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm: LayerNorm,
    film: Linear,
    fc1: Linear,
    fc2: Linear,
}

/// Residual MLP denoiser over flattened action chunks.
///
/// Context and state are projected and added to the embedded noisy chunk.
/// The same projection plus the time embedding drives FiLM scale/shift in
/// every block.
#[derive(Debug, Clone)]
pub struct PolicyNetwork {
    pub config: PolicyConfig,
    in_action: Linear,
    in_cond: Linear,
    time_mlp: Mlp,
    blocks: Vec<ResBlock>,
    out_norm: LayerNorm,
    out: Linear,
}

impl PolicyNetwork {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, config: PolicyConfig, rng: &mut RngStream) -> Result<Self> {
        if config.horizon == 0 || config.action_dim == 0 || config.hidden == 0 || config.cond_dim == 0 {
            return Err(Error::Config("policy needs positive horizon, action dim, cond dim and width".into()));
        }
        let (w, hd) = (config.hidden, config.chunk_len());
        let in_action = Linear::new(store, &format!("{name}.in_action"), hd, w, true, rng)?;
        let in_cond = Linear::new(store, &format!("{name}.in_cond"), config.cond_dim, w, false, rng)?;
        let time_mlp = Mlp::new(store, &format!("{name}.time"), &[config.time_dim, w, w], rng)?;
        let blocks = (0..config.blocks)
            .map(|i| {
                let p = format!("{name}.block{i}");
                Ok(ResBlock {
                    norm: LayerNorm::new(store, &format!("{p}.norm"), w)?,
                    film: Linear::new(store, &format!("{p}.film"), w, 2 * w, true, rng)?,
                    fc1: Linear::new(store, &format!("{p}.fc1"), w, w, true, rng)?,
                    fc2: Linear::new(store, &format!("{p}.fc2"), w, w, true, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        let out_norm = LayerNorm::new(store, &format!("{name}.out_norm"), w)?;
        let out = Linear::new(store, &format!("{name}.out"), w, hd, true, rng)?;
        Ok(Self {
            config,
            in_action,
            in_cond,
            time_mlp,
            blocks,
            out_norm,
            out,
        })
    }

    pub fn kind(&self) -> PredictionKind {
        self.config.kind
    }

    /// `noisy`: `B×(H·D)`, `cond`: `B×cond_dim`, one flow time per row.
    /// Returns the raw head output, `B×(H·D)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, noisy: Var, taus: &[T], cond: Var) -> Result<Var> {
        let b = g.rows(noisy);
        if g.cols(noisy) != self.config.chunk_len() {
            return Err(Error::shape("policy input", g.shape(noisy), &[b, self.config.chunk_len()]));
        }
        if taus.len() != b || g.rows(cond) != b {
            return Err(Error::shape("policy batch", &[b, taus.len()], g.shape(cond)));
        }
        let w = self.config.hidden;
        let temb = g.constant(time_embedding_batch(taus, self.config.time_dim)?);
        let temb = self.time_mlp.forward(g, store, temb)?;
        let xa = self.in_action.forward(g, store, noisy)?;
        let xc = self.in_cond.forward(g, store, cond)?;
        let temb = g.add(temb, xc)?;
        let temb = g.silu(temb)?;
        let mut x = g.add(xa, xc)?;
        for blk in &self.blocks {
            let mod_ = blk.film.forward(g, store, temb)?;
            let scale = g.slice_cols(mod_, 0, w)?;
            let shift = g.slice_cols(mod_, w, w)?;
            let h = blk.norm.forward(g, store, x)?;
            let scale1 = g.add_scalar(scale, T::one());
            let h = g.mul(h, scale1)?;
            let h = g.add(h, shift)?;
            let h = blk.fc1.forward(g, store, h)?;
            let h = g.silu(h)?;
            let h = blk.fc2.forward(g, store, h)?;
            x = g.add(x, h)?;
        }
        let h = self.out_norm.forward(g, store, x)?;
        self.out.forward(g, store, h)
    }
}
