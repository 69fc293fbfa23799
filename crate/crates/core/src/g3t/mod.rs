//! Gated multi-view token fusion: alignment attention over monocular and
//! side-view tokens, a per-token convex gate between the two views, a
//! refinement attention, and the semantic cross-attention read-out.

mod stack;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;

pub use stack::{AttentionBlock, FusionOutput, G3TConfig, G3TParams, SemanticFusion, TokenBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenRole {
    Monocular,
    LeftView,
    RightView,
    Semantic,
    Geometric,
    Fused,
}

/// A `T×C` token set tagged with its role.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix<T> {
    pub tokens: Tensor<T>,
    pub role: TokenRole,
}

impl<T: Scalar> TokenMatrix<T> {
    pub fn new(tokens: Tensor<T>, role: TokenRole) -> Result<Self> {
        if !tokens.all_finite() {
            return Err(Error::Invariant(format!("{role:?} tokens contain non-finite entries")));
        }
        Ok(Self { tokens: tokens.as_matrix(), role })
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn channels(&self) -> usize {
        self.tokens.cols()
    }

    fn expect(&self, role: TokenRole) -> Result<()> {
        if self.role != role {
            return Err(Error::Config(format!("expected {role:?} tokens, got {:?}", self.role)));
        }
        Ok(())
    }
}

/// Per-token left-view weights, each strictly inside `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateMap<T> {
    gates: Vec<T>,
}

impl<T: Scalar> GateMap<T> {
    pub fn new(gates: Vec<T>) -> Result<Self> {
        if let Some(g) = gates.iter().find(|g| !(**g > T::zero() && **g < T::one())) {
            return Err(Error::Invariant(format!("gate value {g} outside (0,1)")));
        }
        Ok(Self { gates })
    }

    pub fn values(&self) -> &[T] {
        &self.gates
    }

    pub fn len(&self) -> usize {
        self.gates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gates.is_empty()
    }

    pub fn mean(&self) -> T {
        self.gates.iter().copied().sum::<T>() / T::from_usize(self.gates.len().max(1)).unwrap()
    }
}

/// `G ⊙ left + (1 − G) ⊙ right`, the gate broadcast over channels.
pub fn gated_fuse<T: Scalar>(left: &Tensor<T>, right: &Tensor<T>, gate: &GateMap<T>) -> Result<Tensor<T>> {
    if left.shape() != right.shape() || gate.len() != left.rows() {
        return Err(Error::shape("gated_fuse", left.shape(), right.shape()));
    }
    GateMap::new(gate.values().to_vec())?;
    let mut out = left.as_matrix();
    for (r, &g) in gate.values().iter().enumerate() {
        for (o, &rv) in out.row_mut(r).iter_mut().zip(right.row(r)) {
            *o = g * *o + (T::one() - g) * rv;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionStrategy {
    #[default]
    G3t,
    Concat,
    CrossAttn,
    InverseCrossAttn,
    SelfAttn,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 5] = [Self::G3t, Self::Concat, Self::CrossAttn, Self::InverseCrossAttn, Self::SelfAttn];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::G3t => "g3t",
            Self::Concat => "concat",
            Self::CrossAttn => "cross_attn",
            Self::InverseCrossAttn => "inverse_cross_attn",
            Self::SelfAttn => "self_attn",
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion strategy `{s}`")))
    }
}
