use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::rng::RngStream;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `y = x W (+ b)`
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let w = store.add_xavier(format!("{name}.w"), fan_in, fan_out, rng)?;
        let b = if bias {
            Some(store.add_zeros(format!("{name}.b"), &[1, fan_out])?)
        } else {
            None
        };
        Ok(Self { w, b, fan_in, fan_out })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer normalization with learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add_ones(format!("{name}.gamma"), &[1, dim])?,
            beta: store.add_zeros(format!("{name}.beta"), &[1, dim])?,
            eps: 1e-6,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, T::lit(self.eps))?;
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let y = g.mul_row(n, gamma)?;
        g.add_row(y, beta)
    }
}

/// Stack of linear layers with SiLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dims: &[usize], rng: &mut RngStream) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(format!("mlp `{name}` needs at least two dims")));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.silu(h)?;
            }
            h = l.forward(g, store, h)?;
        }
        Ok(h)
    }
}

/// Multi-head scaled dot-product attention with bias-free projections.
///
/// Inputs are stacks of `batch` independent token sets: queries are
/// `(batch·q_len)×q_dim`, keys/values `(batch·kv_len)×kv_dim`. Tokens only
/// attend within their own sample.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub attn_dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        q_dim: usize,
        kv_dim: usize,
        attn_dim: usize,
        heads: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if heads == 0 || attn_dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention `{name}`: width {attn_dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            wq: Linear::new(store, &format!("{name}.wq"), q_dim, attn_dim, false, rng)?,
            wk: Linear::new(store, &format!("{name}.wk"), kv_dim, attn_dim, false, rng)?,
            wv: Linear::new(store, &format!("{name}.wv"), kv_dim, attn_dim, false, rng)?,
            wo: Linear::new(store, &format!("{name}.wo"), attn_dim, q_dim, false, rng)?,
            heads,
            attn_dim,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        q_tokens: Var,
        kv_tokens: Var,
        batch: usize,
    ) -> Result<Var> {
        let (qr, kr) = (g.rows(q_tokens), g.rows(kv_tokens));
        if batch == 0 || qr % batch != 0 || kr % batch != 0 {
            return Err(Error::shape("attention batch", &[qr, kr], &[batch]));
        }
        let (q_len, kv_len) = (qr / batch, kr / batch);
        let q = self.wq.forward(g, store, q_tokens)?;
        let k = self.wk.forward(g, store, kv_tokens)?;
        let v = self.wv.forward(g, store, kv_tokens)?;
        let dk = self.attn_dim / self.heads;
        let inv_sqrt = T::one() / T::from_usize(dk).unwrap().sqrt();
        let mut samples = Vec::with_capacity(batch);
        for b in 0..batch {
            let qb = g.slice_rows(q, b * q_len, q_len)?;
            let kb = g.slice_rows(k, b * kv_len, kv_len)?;
            let vb = g.slice_rows(v, b * kv_len, kv_len)?;
            let mut heads = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let (qh, kh, vh) = if self.heads == 1 {
                    (qb, kb, vb)
                } else {
                    (
                        g.slice_cols(qb, h * dk, dk)?,
                        g.slice_cols(kb, h * dk, dk)?,
                        g.slice_cols(vb, h * dk, dk)?,
                    )
                };
                let scores = g.matmul_nt(qh, kh)?;
                let scores = g.scale(scores, inv_sqrt);
                let attn = g.softmax(scores)?;
                heads.push(g.matmul(attn, vh)?);
            }
            let merged = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
            samples.push(merged);
        }
        let all = if samples.len() == 1 { samples[0] } else { g.concat_rows(&samples)? };
        self.wo.forward(g, store, all)
    }
}

/// Sinusoidal embedding of a flow time in `[0, 1]`: `[sin(ω_k τ)…, cos(ω_k τ)…]`
/// with `ω_k = 100 · 10000^(−k/half)`.
pub fn time_embedding<T: Scalar>(tau: T, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!("time embedding dim {dim} must be even and positive")));
    }
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    let t = tau.to_f64_lossy();
    for k in 0..half {
        let omega = 100.0 * 10000f64.powf(-(k as f64) / half as f64);
        out[k] = T::lit((omega * t).sin());
        out[half + k] = T::lit((omega * t).cos());
    }
    Tensor::matrix(1, dim, out)
}

/// Row-stacked time embeddings for a batch of flow times.
pub fn time_embedding_batch<T: Scalar>(taus: &[T], dim: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(taus.len() * dim);
    for &t in taus {
        data.extend_from_slice(time_embedding(t, dim)?.data());
    }
    Tensor::matrix(taus.len(), dim, data)
}

/// Plain-tensor `linear` for callers outside a graph.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    if x.cols() != w.rows() {
        return Err(Error::shape("linear", x.shape(), w.shape()));
    }
    let mut y = x.matmul(w)?;
    if let Some(b) = b {
        if b.len() != y.cols() {
            return Err(Error::shape("linear bias", y.shape(), b.shape()));
        }
        for r in 0..y.rows() {
            for (v, &bb) in y.row_mut(r).iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_embedding_at_zero() {
        let e = time_embedding(0.0f64, 16).unwrap();
        assert!(e.data()[..8].iter().all(|&s| s == 0.0));
        assert!(e.data()[8..].iter().all(|&c| c == 1.0));
    }

    #[test]
    fn time_embedding_deterministic_and_continuous() {
        let a = time_embedding(0.3f64, 32).unwrap();
        let b = time_embedding(0.3f64, 32).unwrap();
        assert_eq!(a, b);
        let c = time_embedding(0.3f64 + 1e-9, 32).unwrap();
        assert!(a.max_abs_diff(&c).unwrap() < 1e-6);
    }

    #[test]
    fn time_embedding_rejects_odd_dim() {
        assert!(time_embedding(0.1f64, 7).is_err());
    }

    #[test]
    fn heads_must_divide_width() {
        let mut s = ParamStore::<f64>::new();
        let mut rng = RngStream::new(0, 0);
        let e = MultiHeadAttention::new(&mut s, "a", 6, 6, 6, 4, &mut rng).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }
}
