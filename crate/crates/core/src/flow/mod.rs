//! Flow-matching action heads.
//!
//! Noisy chunks follow the straight path `A^τ = τ·A + (1−τ)·ε`, so the
//! velocity is `(A − A^τ)/(1−τ) = A − ε`. A head may predict the clean chunk
//! (`Action`), the velocity, or the noise; every kind is converted to a
//! clean-chunk estimate before the Euler update.

pub mod loss;
pub mod network;
pub mod oracle;
pub mod sampler;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;

pub use loss::{action_loss_velocity_form, flow_loss, sample_draws, training_loss, FlowDraws, TauSchedule, TrainBatch};
pub use network::{PolicyConfig, PolicyNetwork};
pub use oracle::{mixture_posterior_oracle, CleanOracle, MixtureOracle};
pub use sampler::{sample_actions, sample_from_noise, Denoiser, PolicyDenoiser};

/// Upper guard on flow time: `τ ∈ [0, 1 − TAU_GUARD]`.
pub const TAU_GUARD: f64 = 1e-3;

fn tau_max() -> f64 {
    1.0 - TAU_GUARD
}

fn check_tau(tau: f64, what: &str) -> Result<()> {
    if !(0.0..=tau_max() + 1e-12).contains(&tau) {
        return Err(Error::Domain(format!(
            "{what}: tau {tau} outside [0, {}]",
            tau_max()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PredictionKind {
    Action,
    Velocity,
    Epsilon,
}

impl PredictionKind {
    pub const ALL: [PredictionKind; 3] = [Self::Action, Self::Velocity, Self::Epsilon];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Action => "action",
            Self::Velocity => "velocity",
            Self::Epsilon => "epsilon",
        }
    }

    pub fn code(self) -> u32 {
        match self {
            Self::Action => 0,
            Self::Velocity => 1,
            Self::Epsilon => 2,
        }
    }

    pub fn from_code(c: u32) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.code() == c)
            .ok_or_else(|| Error::Format(format!("unknown prediction kind code {c}")))
    }
}

impl fmt::Display for PredictionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PredictionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "action" | "a" => Ok(Self::Action),
            "velocity" | "v" => Ok(Self::Velocity),
            "epsilon" | "eps" => Ok(Self::Epsilon),
            _ => Err(Error::Config(format!("unknown head kind `{s}`"))),
        }
    }
}

/// `H×D` chunk of normalized actions.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk<T> {
    values: Tensor<T>,
}

impl<T: Scalar> ActionChunk<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if values.shape().len() != 2 || values.rows() == 0 || values.cols() == 0 {
            return Err(Error::Domain(format!("action chunk needs shape H×D, got {:?}", values.shape())));
        }
        if !values.all_finite() {
            return Err(Error::Numeric("action chunk has non-finite entries".into()));
        }
        Ok(Self { values })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?)
    }

    pub fn horizon(&self) -> usize {
        self.values.rows()
    }

    pub fn action_dim(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn into_values(self) -> Tensor<T> {
        self.values
    }
}

/// Noisy chunk on the straight path, with the noise that built it.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample<T> {
    pub noisy: Tensor<T>,
    pub tau: T,
    pub noise: Tensor<T>,
}

/// `A^τ = τ·A + (1−τ)·ε`
pub fn interpolate<T: Scalar>(clean: &ActionChunk<T>, noise: &Tensor<T>, tau: T) -> Result<FlowSample<T>> {
    check_tau(tau.to_f64_lossy(), "interpolate")?;
    let one_m = T::one() - tau;
    let noisy = clean.values.zip_map(noise, "interpolate", |a, e| tau * a + one_m * e)?;
    Ok(FlowSample {
        noisy,
        tau,
        noise: noise.clone(),
    })
}

/// `v̂ = (Â − A^τ)/(1−τ)`
pub fn derive_velocity<T: Scalar>(pred_clean: &Tensor<T>, sample: &FlowSample<T>) -> Result<Tensor<T>> {
    check_tau(sample.tau.to_f64_lossy(), "derive_velocity")?;
    let inv = T::one() / (T::one() - sample.tau);
    pred_clean.zip_map(&sample.noisy, "derive_velocity", |p, x| (p - x) * inv)
}

/// `w(τ) = 1/(1−τ)²`
pub fn loss_weight<T: Scalar>(tau: T) -> Result<T> {
    check_tau(tau.to_f64_lossy(), "loss_weight")?;
    let d = T::one() - tau;
    Ok(T::one() / (d * d))
}

/// Maps a head's raw output to a clean-chunk estimate.
pub fn convert_prediction<T: Scalar>(kind: PredictionKind, output: &Tensor<T>, sample: &FlowSample<T>) -> Result<Tensor<T>> {
    convert_rows(kind, output, &sample.noisy, sample.tau)
}

/// Row-batched [`convert_prediction`] sharing one flow time.
pub fn convert_rows<T: Scalar>(kind: PredictionKind, output: &Tensor<T>, noisy: &Tensor<T>, tau: T) -> Result<Tensor<T>> {
    check_tau(tau.to_f64_lossy(), "convert_prediction")?;
    let one_m = T::one() - tau;
    match kind {
        PredictionKind::Action => {
            if output.shape() != noisy.shape() {
                return Err(Error::shape("convert_prediction", output.shape(), noisy.shape()));
            }
            Ok(output.clone())
        }
        PredictionKind::Velocity => noisy.zip_map(output, "convert_prediction", |x, v| x + one_m * v),
        PredictionKind::Epsilon => {
            let delta = T::lit(TAU_GUARD);
            if tau >= delta {
                noisy.zip_map(output, "convert_prediction", |x, e| (x - one_m * e) / tau)
            } else {
                // implied velocity (A^τ − ε̂)/τ with τ held at the guard
                noisy.zip_map(output, "convert_prediction", |x, e| x + one_m * (x - e) / delta)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[rows, cols], v).unwrap()
    }

    #[test]
    fn interpolate_endpoints() {
        let clean = ActionChunk::new(m(1, 2, &[2.0, -1.0])).unwrap();
        let noise = m(1, 2, &[0.3, 0.7]);
        assert_eq!(interpolate(&clean, &noise, 0.0).unwrap().noisy, noise);
        let s = interpolate(&clean, &noise, 0.5).unwrap();
        assert_eq!(s.tau, 0.5);
        assert_eq!(s.noise, noise);
    }

    #[test]
    fn interpolate_direct_substitution() {
        let clean = ActionChunk::new(m(1, 1, &[2.0])).unwrap();
        let s = interpolate(&clean, &m(1, 1, &[0.0]), 0.5).unwrap();
        assert_eq!(s.noisy.data(), &[1.0]);
    }

    #[test]
    fn interpolate_fixed_point() {
        let v = m(2, 2, &[0.1, -0.4, 1.5, 2.0]);
        let clean = ActionChunk::new(v.clone()).unwrap();
        for tau in [0.0, 0.25, 0.5, 0.9, 0.999] {
            let s = interpolate(&clean, &v, tau).unwrap();
            assert!(s.noisy.max_abs_diff(&v).unwrap() < 1e-15);
        }
    }

    #[test]
    fn interpolate_rejects_tau_outside_guard() {
        let clean = ActionChunk::new(m(1, 1, &[1.0])).unwrap();
        let noise = m(1, 1, &[0.0]);
        assert!(matches!(interpolate(&clean, &noise, 1.0), Err(Error::Domain(_))));
        assert!(matches!(interpolate(&clean, &noise, -0.1), Err(Error::Domain(_))));
        assert!(interpolate(&clean, &noise, 1.0 - TAU_GUARD).is_ok());
    }

    #[test]
    fn velocity_examples() {
        let s = FlowSample {
            noisy: m(1, 1, &[0.0]),
            tau: 0.5,
            noise: m(1, 1, &[0.0]),
        };
        assert_eq!(derive_velocity(&m(1, 1, &[1.0]), &s).unwrap().data(), &[2.0]);
        assert_eq!(derive_velocity(&s.noisy.clone(), &s).unwrap().data(), &[0.0]);
    }

    #[test]
    fn velocity_constant_along_path() {
        let a = m(2, 3, &[0.5, -1.0, 2.0, 0.0, 0.3, -0.7]);
        let e = m(2, 3, &[1.0, 0.2, -0.4, 0.8, -1.3, 0.1]);
        let clean = ActionChunk::new(a.clone()).unwrap();
        let target = a.sub(&e).unwrap();
        for tau in [0.0, 0.1, 0.5, 0.75, 0.99, 0.999] {
            let s = interpolate(&clean, &e, tau).unwrap();
            let v = derive_velocity(&a, &s).unwrap();
            assert!(v.max_abs_diff(&target).unwrap() < 1e-9, "tau={tau}");
        }
    }

    #[test]
    fn velocity_guard() {
        let s = FlowSample {
            noisy: m(1, 1, &[0.0]),
            tau: 1.0,
            noise: m(1, 1, &[0.0]),
        };
        assert!(matches!(derive_velocity(&m(1, 1, &[1.0]), &s), Err(Error::Domain(_))));
    }

    #[test]
    fn loss_weight_values() {
        assert_eq!(loss_weight(0.0f64).unwrap(), 1.0);
        assert_eq!(loss_weight(0.5f64).unwrap(), 4.0);
        assert!((loss_weight(0.9f64).unwrap() - 100.0).abs() < 1e-9);
        assert!(matches!(loss_weight(0.9995f64), Err(Error::Domain(_))));
        assert!((loss_weight(1.0 - TAU_GUARD).unwrap() - 1e6).abs() < 1e-3);
    }

    #[test]
    fn convert_velocity_and_action() {
        let a = m(1, 2, &[1.0, -2.0]);
        let e = m(1, 2, &[0.5, 0.25]);
        let s = interpolate(&ActionChunk::new(a.clone()).unwrap(), &e, 0.3).unwrap();
        let v = a.sub(&e).unwrap();
        let rec = convert_prediction(PredictionKind::Velocity, &v, &s).unwrap();
        assert!(rec.max_abs_diff(&a).unwrap() < 1e-15);
        assert_eq!(convert_prediction(PredictionKind::Action, &a, &s).unwrap(), a);
    }

    #[test]
    fn convert_epsilon_inverts_interpolation() {
        let a = m(2, 2, &[1.0, -2.0, 0.3, 0.9]);
        let e = m(2, 2, &[0.5, 0.25, -1.2, 0.4]);
        let s = interpolate(&ActionChunk::new(a.clone()).unwrap(), &e, 0.5).unwrap();
        let rec = convert_prediction(PredictionKind::Epsilon, &e, &s).unwrap();
        assert!(rec.max_abs_diff(&a).unwrap() < 1e-12);
    }

    #[test]
    fn convert_epsilon_guard_is_finite_at_zero() {
        let e = m(1, 2, &[0.5, 0.25]);
        let s = FlowSample {
            noisy: e.clone(),
            tau: 0.0,
            noise: e.clone(),
        };
        let rec = convert_prediction(PredictionKind::Epsilon, &e, &s).unwrap();
        assert!(rec.all_finite());
        // perfect noise prediction at τ=0 carries no signal: estimate stays at A^0
        assert!(rec.max_abs_diff(&e).unwrap() < 1e-12);
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("action".parse::<PredictionKind>().unwrap(), PredictionKind::Action);
        assert!("score".parse::<PredictionKind>().is_err());
        for k in PredictionKind::ALL {
            assert_eq!(PredictionKind::from_code(k.code()).unwrap(), k);
        }
    }
}
