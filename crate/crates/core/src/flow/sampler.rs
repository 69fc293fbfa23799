use super::network::PolicyNetwork;
use super::{convert_rows, PredictionKind};
use crate::error::{Error, Result};
use crate::nn::{Graph, ParamStore, RngStream, Tensor};
use crate::scalar::Scalar;

/// Anything that maps a row-stacked noisy chunk at flow time `τ` to a head output.
pub trait Denoiser<T: Scalar> {
    fn kind(&self) -> PredictionKind;
    /// `noisy`: `B×(H·D)`; returns the raw head output of the same shape.
    fn predict(&mut self, noisy: &Tensor<T>, tau: T) -> Result<Tensor<T>>;
}

/// Euler integration from `initial` (= `A⁰`) over `steps` uniform steps.
///
/// At `τ = k/N` the head output is converted to a clean estimate `Â`, the
/// velocity is `(Â − A^τ)/(1−τ)`, and `A^{τ+1/N} = A^τ + v̂/N`.
pub fn sample_from_noise<T: Scalar, D: Denoiser<T> + ?Sized>(den: &mut D, initial: Tensor<T>, steps: usize) -> Result<Tensor<T>> {
    if steps < 1 {
        return Err(Error::Domain("sampler needs at least one step".into()));
    }
    let n = T::from_usize(steps).unwrap();
    let dt = T::one() / n;
    let mut x = initial;
    for k in 0..steps {
        let tau = T::from_usize(k).unwrap() / n;
        let out = den.predict(&x, tau)?;
        let clean = convert_rows(den.kind(), &out, &x, tau)?;
        let inv = T::one() / (T::one() - tau);
        for (xi, &ci) in x.data_mut().iter_mut().zip(clean.data()) {
            let v = (ci - *xi) * inv;
            *xi += dt * v;
        }
    }
    Ok(x)
}

/// Draws `A⁰ ~ N(0, I)` of shape `batch×chunk_len` and integrates.
pub fn sample_actions<T: Scalar, D: Denoiser<T> + ?Sized>(
    den: &mut D,
    batch: usize,
    chunk_len: usize,
    steps: usize,
    rng: &mut RngStream,
) -> Result<Tensor<T>> {
    if steps < 1 {
        return Err(Error::Domain("sampler needs at least one step".into()));
    }
    let a0 = rng.normal_tensor(&[batch, chunk_len]);
    sample_from_noise(den, a0, steps)
}

/// A policy network bound to fixed conditioning rows.
pub struct PolicyDenoiser<'a, T> {
    pub net: &'a PolicyNetwork,
    pub store: &'a ParamStore<T>,
    pub cond: Tensor<T>,
    pub evaluations: usize,
}

impl<'a, T: Scalar> PolicyDenoiser<'a, T> {
    pub fn new(net: &'a PolicyNetwork, store: &'a ParamStore<T>, cond: Tensor<T>) -> Self {
        Self {
            net,
            store,
            cond,
            evaluations: 0,
        }
    }
}

impl<T: Scalar> Denoiser<T> for PolicyDenoiser<'_, T> {
    fn kind(&self) -> PredictionKind {
        self.net.kind()
    }

    fn predict(&mut self, noisy: &Tensor<T>, tau: T) -> Result<Tensor<T>> {
        self.evaluations += 1;
        let mut g = Graph::new();
        let x = g.constant(noisy.clone());
        let c = g.constant(self.cond.clone());
        let taus = vec![tau; noisy.rows()];
        let y = self.net.forward(&mut g, self.store, x, &taus, c)?;
        Ok(g.value(y).clone())
    }
}
