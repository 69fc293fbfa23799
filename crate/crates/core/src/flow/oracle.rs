//! Closed-form denoisers used to verify the sampler.

use super::sampler::Denoiser;
use super::{check_tau, PredictionKind};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;

/// `E[A | A^τ = x]` for `A` drawn from weighted atoms and `ε ~ N(0, 1)`:
/// a softmax over `log wᵢ − (x − τ aᵢ)²/(2(1−τ)²)` weighting the atom values.
pub fn mixture_posterior_oracle(x_tau: f64, tau: f64, atoms: &[(f64, f64)]) -> Result<f64> {
    if atoms.is_empty() {
        return Err(Error::Domain("mixture oracle needs at least one atom".into()));
    }
    check_tau(tau, "mixture_posterior_oracle")?;
    let total: f64 = atoms.iter().map(|a| a.1).sum();
    if (total - 1.0).abs() > 1e-9 || atoms.iter().any(|a| a.1 <= 0.0) {
        return Err(Error::Domain(format!("atom weights must be positive and sum to 1, got {total}")));
    }
    let s2 = 2.0 * (1.0 - tau) * (1.0 - tau);
    let logits: Vec<f64> = atoms
        .iter()
        .map(|&(a, w)| w.ln() - (x_tau - tau * a).powi(2) / s2)
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    let mut acc = 0.0;
    for (&l, &(a, _)) in logits.iter().zip(atoms) {
        let p = (l - m).exp();
        z += p;
        acc += p * a;
    }
    Ok(acc / z)
}

/// Action-kind denoiser applying the mixture oracle to every entry independently.
#[derive(Debug, Clone)]
pub struct MixtureOracle {
    pub atoms: Vec<(f64, f64)>,
}

impl<T: Scalar> Denoiser<T> for MixtureOracle {
    fn kind(&self) -> PredictionKind {
        PredictionKind::Action
    }

    fn predict(&mut self, noisy: &Tensor<T>, tau: T) -> Result<Tensor<T>> {
        let t = tau.to_f64_lossy();
        let data = noisy
            .data()
            .iter()
            .map(|&x| mixture_posterior_oracle(x.to_f64_lossy(), t, &self.atoms).map(T::lit))
            .collect::<Result<Vec<_>>>()?;
        Tensor::new(noisy.shape().to_vec(), data)
    }
}

/// Knows the true clean rows; answers in whichever parameterization `kind` asks for.
#[derive(Debug, Clone)]
pub struct CleanOracle<T> {
    pub clean: Tensor<T>,
    pub kind: PredictionKind,
    pub evaluations: usize,
}

impl<T: Scalar> CleanOracle<T> {
    pub fn new(clean: Tensor<T>, kind: PredictionKind) -> Self {
        Self {
            clean,
            kind,
            evaluations: 0,
        }
    }
}

impl<T: Scalar> Denoiser<T> for CleanOracle<T> {
    fn kind(&self) -> PredictionKind {
        self.kind
    }

    fn predict(&mut self, noisy: &Tensor<T>, tau: T) -> Result<Tensor<T>> {
        self.evaluations += 1;
        let one_m = T::one() - tau;
        match self.kind {
            PredictionKind::Action => Ok(self.clean.clone()),
            PredictionKind::Velocity => self.clean.zip_map(noisy, "oracle", |a, x| (a - x) / one_m),
            // ε = (A^τ − τA)/(1−τ)
            PredictionKind::Epsilon => self.clean.zip_map(noisy, "oracle", |a, x| (x - tau * a) / one_m),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tau_zero_gives_mixture_mean() {
        let atoms = [(-1.0, 0.3), (2.0, 0.7)];
        for x in [-5.0, 0.0, 3.3] {
            let m = mixture_posterior_oracle(x, 0.0, &atoms).unwrap();
            assert!((m - (0.3 * -1.0 + 0.7 * 2.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_atom() {
        for (x, t) in [(0.0, 0.0), (1.5, 0.4), (-3.0, 0.99)] {
            assert_eq!(mixture_posterior_oracle(x, t, &[(0.7, 1.0)]).unwrap(), 0.7);
        }
    }

    #[test]
    fn symmetric_atoms_at_origin() {
        let v = mixture_posterior_oracle(0.0, 0.6, &[(-1.0, 0.5), (1.0, 0.5)]).unwrap();
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn empty_atoms_rejected() {
        assert!(matches!(mixture_posterior_oracle(0.0, 0.5, &[]), Err(Error::Domain(_))));
    }

    #[test]
    fn matches_numerical_integration() {
        // Independent check: posterior mean by quadrature over a discrete prior is
        // the same finite sum, so compare against Bayes rule written out directly.
        let atoms = [(-1.0, 0.25), (0.5, 0.25), (2.0, 0.5)];
        let (x, tau): (f64, f64) = (0.8, 0.35);
        let s = 1.0 - tau;
        let lik = |a: f64| (-(x - tau * a).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
        let num: f64 = atoms.iter().map(|&(a, w)| w * lik(a) * a).sum();
        let den: f64 = atoms.iter().map(|&(a, w)| w * lik(a)).sum();
        let v = mixture_posterior_oracle(x, tau, &atoms).unwrap();
        assert!((v - num / den).abs() < 1e-12);
    }
}
