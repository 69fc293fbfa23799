use super::{FusionStrategy, GateMap, TokenMatrix, TokenRole};
use crate::error::{Error, Result};
use crate::nn::{Graph, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamId, ParamStore, RngStream, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct G3TConfig {
    /// Channels of monocular tokens.
    pub mono_dim: usize,
    /// Channels of side-view tokens.
    pub view_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub gate_hidden: usize,
    pub mono_tokens: usize,
    pub view_tokens: usize,
    pub positional: bool,
    pub align_layers: usize,
    pub refine_layers: usize,
    pub strategy: FusionStrategy,
}

impl G3TConfig {
    pub fn new(mono_dim: usize, view_dim: usize, mono_tokens: usize, view_tokens: usize) -> Self {
        Self {
            mono_dim,
            view_dim,
            model_dim: 64,
            heads: 4,
            gate_hidden: 128,
            mono_tokens,
            view_tokens,
            positional: true,
            align_layers: 1,
            refine_layers: 1,
            strategy: FusionStrategy::G3t,
        }
    }

    pub fn joint_tokens(&self) -> usize {
        self.mono_tokens + 2 * self.view_tokens
    }

    /// Tokens per sample in the strategy's output.
    pub fn output_tokens(&self) -> usize {
        let (n, m) = (self.mono_tokens, self.view_tokens);
        match self.strategy {
            FusionStrategy::G3t => n + m,
            FusionStrategy::Concat | FusionStrategy::SelfAttn => n + 2 * m,
            FusionStrategy::CrossAttn => n,
            FusionStrategy::InverseCrossAttn => 2 * m,
        }
    }

    /// Width of the per-lattice-cell features from `spatial_features`.
    pub fn spatial_dim(&self) -> usize {
        self.model_dim
            * match self.strategy {
                FusionStrategy::CrossAttn => 1,
                FusionStrategy::G3t | FusionStrategy::InverseCrossAttn => 2,
                FusionStrategy::Concat | FusionStrategy::SelfAttn => 3,
            }
    }
}

/// Pre-norm residual attention: `x + MHSA(LN(x))`, or with separately
/// normalized keys for cross-attention.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub norm_q: LayerNorm,
    pub norm_kv: Option<LayerNorm>,
    pub attn: MultiHeadAttention,
}

impl AttentionBlock {
    pub fn new_self<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize, rng: &mut RngStream) -> Result<Self> {
        Ok(Self {
            norm_q: LayerNorm::new(store, &format!("{name}.norm"), dim)?,
            norm_kv: None,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, dim, dim, heads, rng)?,
        })
    }

    pub fn new_cross<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize, rng: &mut RngStream) -> Result<Self> {
        Ok(Self {
            norm_q: LayerNorm::new(store, &format!("{name}.norm_q"), dim)?,
            norm_kv: Some(LayerNorm::new(store, &format!("{name}.norm_kv"), dim)?),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, dim, dim, heads, rng)?,
        })
    }

    pub fn forward_self<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, batch: usize) -> Result<Var> {
        let h = self.norm_q.forward(g, store, x)?;
        let a = self.attn.forward(g, store, h, h, batch)?;
        g.add(x, a)
    }

    pub fn forward_cross<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, q: Var, kv: Var, batch: usize) -> Result<Var> {
        let hq = self.norm_q.forward(g, store, q)?;
        let hkv = match &self.norm_kv {
            Some(n) => n.forward(g, store, kv)?,
            None => self.norm_q.forward(g, store, kv)?,
        };
        let a = self.attn.forward(g, store, hq, hkv, batch)?;
        g.add(q, a)
    }
}

/// Row-stacked token sets for `batch` samples: mono is `(B·N)×C_v`, each
/// side view `(B·M)×C_z`.
#[derive(Debug, Clone, Copy)]
pub struct TokenBatch {
    pub mono: Var,
    pub left: Var,
    pub right: Var,
    pub batch: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct FusionOutput {
    /// `(B·T)×C` with `T = config.output_tokens()`.
    pub tokens: Var,
    /// `(B·M)×1` left-view weights; g3t only.
    pub gate: Option<Var>,
}

/// Per sample, concatenates the listed `(var, rows per sample)` parts.
fn stack_samples<T: Scalar>(g: &mut Graph<T>, parts: &[(Var, usize)], batch: usize) -> Result<Var> {
    if batch == 1 {
        let vs: Vec<Var> = parts.iter().map(|p| p.0).collect();
        return if vs.len() == 1 { Ok(vs[0]) } else { g.concat_rows(&vs) };
    }
    let mut pieces = Vec::with_capacity(batch * parts.len());
    for b in 0..batch {
        for &(v, n) in parts {
            pieces.push(g.slice_rows(v, b * n, n)?);
        }
    }
    g.concat_rows(&pieces)
}

/// Inverse of `stack_samples`: splits each sample's rows into consecutive parts.
fn split_samples<T: Scalar>(g: &mut Graph<T>, x: Var, sizes: &[usize], batch: usize) -> Result<Vec<Var>> {
    let per: usize = sizes.iter().sum();
    let mut out = Vec::with_capacity(sizes.len());
    let mut off = 0;
    for &n in sizes {
        let v = if batch == 1 {
            g.slice_rows(x, off, n)?
        } else {
            let pieces = (0..batch)
                .map(|b| g.slice_rows(x, b * per + off, n))
                .collect::<Result<Vec<_>>>()?;
            g.concat_rows(&pieces)?
        };
        out.push(v);
        off += n;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct G3TParams {
    pub config: G3TConfig,
    pub w_v: Linear,
    /// Shared by both side views.
    pub w_z: Linear,
    pub pos: Option<ParamId>,
    pub align: Vec<AttentionBlock>,
    pub gate: Mlp,
    pub refine: Vec<AttentionBlock>,
    pub cross: Option<AttentionBlock>,
}

impl G3TParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, config: G3TConfig, rng: &mut RngStream) -> Result<Self> {
        let c = config.model_dim;
        if c == 0 || config.mono_tokens == 0 || config.view_tokens == 0 || config.mono_dim == 0 || config.view_dim == 0 {
            return Err(Error::Config("fusion stack needs positive widths and token counts".into()));
        }
        let w_v = Linear::new(store, &format!("{name}.w_v"), config.mono_dim, c, false, rng)?;
        let w_z = Linear::new(store, &format!("{name}.w_z"), config.view_dim, c, false, rng)?;
        let pos = if config.positional {
            Some(store.add_normal(format!("{name}.pos"), &[config.joint_tokens(), c], 0.02, rng)?)
        } else {
            None
        };
        let align = (0..config.align_layers)
            .map(|i| AttentionBlock::new_self(store, &format!("{name}.align{i}"), c, config.heads, rng))
            .collect::<Result<_>>()?;
        let gate = Mlp::new(store, &format!("{name}.gate"), &[2 * c, config.gate_hidden, 1], rng)?;
        let refine = (0..config.refine_layers)
            .map(|i| AttentionBlock::new_self(store, &format!("{name}.refine{i}"), c, config.heads, rng))
            .collect::<Result<_>>()?;
        let cross = match config.strategy {
            FusionStrategy::CrossAttn | FusionStrategy::InverseCrossAttn => {
                Some(AttentionBlock::new_cross(store, &format!("{name}.cross"), c, config.heads, rng)?)
            }
            _ => None,
        };
        Ok(Self {
            config,
            w_v,
            w_z,
            pos,
            align,
            gate,
            refine,
            cross,
        })
    }

    fn check(&self, g: &Graph<impl Scalar>, t: &TokenBatch) -> Result<()> {
        let c = &self.config;
        let ok = |v: Var, rows: usize, cols: usize| g.rows(v) == t.batch * rows && g.cols(v) == cols;
        if t.batch == 0
            || !ok(t.mono, c.mono_tokens, c.mono_dim)
            || !ok(t.left, c.view_tokens, c.view_dim)
            || !ok(t.right, c.view_tokens, c.view_dim)
        {
            return Err(Error::Config(format!(
                "fusion inputs {:?}/{:?}/{:?} do not match N={} × {}, M={} × {} for batch {}",
                g.shape(t.mono),
                g.shape(t.left),
                g.shape(t.right),
                c.mono_tokens,
                c.mono_dim,
                c.view_tokens,
                c.view_dim,
                t.batch
            )));
        }
        Ok(())
    }

    /// `[W_v·mono ; W_z·left ; W_z·right]` per sample, plus slot embeddings.
    pub fn project_and_concat<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, t: &TokenBatch) -> Result<Var> {
        self.check(g, t)?;
        let (n, m) = (self.config.mono_tokens, self.config.view_tokens);
        let pm = self.w_v.forward(g, store, t.mono)?;
        let pl = self.w_z.forward(g, store, t.left)?;
        let pr = self.w_z.forward(g, store, t.right)?;
        let joint = stack_samples(g, &[(pm, n), (pl, m), (pr, m)], t.batch)?;
        match self.pos {
            Some(p) => {
                let p = g.param(store, p);
                g.add_tiled(joint, p)
            }
            None => Ok(joint),
        }
    }

    /// Residual self-attention over all tokens, split into `(mono′, left′, right′)`.
    pub fn cross_view_align<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, joint: Var, batch: usize) -> Result<(Var, Var, Var)> {
        let mut x = joint;
        for blk in &self.align {
            x = blk.forward_self(g, store, x, batch)?;
        }
        let (n, m) = (self.config.mono_tokens, self.config.view_tokens);
        let parts = split_samples(g, x, &[n, m, m], batch)?;
        Ok((parts[0], parts[1], parts[2]))
    }

    /// `σ(MLP([left′ ; right′]))`, one value per token.
    pub fn compute_gate<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, left: Var, right: Var) -> Result<Var> {
        let both = g.concat_cols(&[left, right])?;
        let logits = self.gate.forward(g, store, both)?;
        g.sigmoid(logits)
    }

    /// `right + G ⊙ (left − right)`.
    pub fn gated_fuse<T: Scalar>(&self, g: &mut Graph<T>, left: Var, right: Var, gate: Var) -> Result<Var> {
        let diff = g.sub(left, right)?;
        let w = g.mul_col(diff, gate)?;
        g.add(right, w)
    }

    /// Residual self-attention over `[mono′ ; fused]` per sample.
    pub fn consistency_refine<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, mono: Var, fused: Var, batch: usize) -> Result<Var> {
        let (n, m) = (self.config.mono_tokens, self.config.view_tokens);
        let mut x = stack_samples(g, &[(mono, n), (fused, m)], batch)?;
        for blk in &self.refine {
            x = blk.forward_self(g, store, x, batch)?;
        }
        Ok(x)
    }

    /// Runs the configured strategy.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, t: &TokenBatch) -> Result<FusionOutput> {
        let b = t.batch;
        let (n, m) = (self.config.mono_tokens, self.config.view_tokens);
        let joint = self.project_and_concat(g, store, t)?;
        let (tokens, gate) = match self.config.strategy {
            FusionStrategy::G3t => {
                let (mono, left, right) = self.cross_view_align(g, store, joint, b)?;
                let gate = self.compute_gate(g, store, left, right)?;
                let fused = self.gated_fuse(g, left, right, gate)?;
                (self.consistency_refine(g, store, mono, fused, b)?, Some(gate))
            }
            FusionStrategy::Concat => (joint, None),
            FusionStrategy::SelfAttn => {
                let mut x = joint;
                for blk in &self.align {
                    x = blk.forward_self(g, store, x, b)?;
                }
                (x, None)
            }
            FusionStrategy::CrossAttn | FusionStrategy::InverseCrossAttn => {
                let parts = split_samples(g, joint, &[n, 2 * m], b)?;
                let cross = self.cross.as_ref().expect("cross block exists for cross strategies");
                let (q, kv) = if self.config.strategy == FusionStrategy::CrossAttn {
                    (parts[0], parts[1])
                } else {
                    (parts[1], parts[0])
                };
                (cross.forward_cross(g, store, q, kv, b)?, None)
            }
        };
        Ok(FusionOutput { tokens, gate })
    }

    /// Per lattice cell, the output rows that describe it, concatenated along
    /// channels: `(B·M)×spatial_dim`. Requires `N = M`.
    pub fn spatial_features<T: Scalar>(&self, g: &mut Graph<T>, out: &FusionOutput, batch: usize) -> Result<Var> {
        let (n, m) = (self.config.mono_tokens, self.config.view_tokens);
        if n != m {
            return Err(Error::Config("spatial features need equal mono and view lattices".into()));
        }
        let sizes: Vec<usize> = vec![m; self.config.output_tokens() / m];
        let parts = split_samples(g, out.tokens, &sizes, batch)?;
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            g.concat_cols(&parts)
        }
    }

    /// Evaluates the stack on one sample outside of training.
    pub fn fuse_tokens<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        mono: &TokenMatrix<T>,
        left: &TokenMatrix<T>,
        right: &TokenMatrix<T>,
    ) -> Result<(TokenMatrix<T>, Option<GateMap<T>>)> {
        mono.expect(TokenRole::Monocular)?;
        left.expect(TokenRole::LeftView)?;
        right.expect(TokenRole::RightView)?;
        let mut g = Graph::new();
        let t = TokenBatch {
            mono: g.constant(mono.tokens.clone()),
            left: g.constant(left.tokens.clone()),
            right: g.constant(right.tokens.clone()),
            batch: 1,
        };
        let out = self.forward(&mut g, store, &t)?;
        let role = if self.config.strategy == FusionStrategy::G3t {
            TokenRole::Geometric
        } else {
            TokenRole::Fused
        };
        let tokens = TokenMatrix::new(g.value(out.tokens).clone(), role)?;
        let gate = match out.gate {
            Some(v) => Some(GateMap::new(g.value(v).data().to_vec())?),
            None => None,
        };
        Ok((tokens, gate))
    }
}

/// Residual cross-attention from semantic tokens onto geometric tokens,
/// without normalization: `sem + W_O·softmax(QKᵀ/√d_k)·V`.
#[derive(Debug, Clone)]
pub struct SemanticFusion {
    pub attn: MultiHeadAttention,
}

impl SemanticFusion {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        sem_dim: usize,
        geo_dim: usize,
        attn_dim: usize,
        heads: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, name, sem_dim, geo_dim, attn_dim, heads, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, sem: Var, geo: Var, batch: usize) -> Result<Var> {
        if g.cols(sem) != self.attn.wq.fan_in || g.cols(geo) != self.attn.wk.fan_in {
            return Err(Error::Config(format!(
                "semantic fusion expects {}/{} channels, got {:?}/{:?}",
                self.attn.wq.fan_in,
                self.attn.wk.fan_in,
                g.shape(sem),
                g.shape(geo)
            )));
        }
        let a = self.attn.forward(g, store, sem, geo, batch)?;
        g.add(sem, a)
    }

    /// Plain-tensor evaluation for one sample.
    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, sem: &TokenMatrix<T>, geo: &TokenMatrix<T>) -> Result<TokenMatrix<T>> {
        let mut g = Graph::new();
        let s = g.constant(sem.tokens.clone());
        let q = g.constant(geo.tokens.clone());
        let y = self.forward(&mut g, store, s, q, 1)?;
        TokenMatrix::new(g.value(y).clone(), TokenRole::Semantic)
    }
}
