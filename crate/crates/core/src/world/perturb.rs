use std::fmt;
use std::str::FromStr;

use super::render::RenderOutput;
use crate::error::{Error, Result};
use crate::nn::{RngStream, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbationKind {
    Camera,
    Noise,
    Layout,
    Light,
    /// Gripper-start jitter; consumed at reset like `Layout`.
    Robot,
}

impl PerturbationKind {
    pub const HEADLINE: [PerturbationKind; 4] = [Self::Camera, Self::Noise, Self::Layout, Self::Light];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Camera => "camera",
            Self::Noise => "noise",
            Self::Layout => "layout",
            Self::Light => "light",
            Self::Robot => "robot",
        }
    }
}

impl fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PerturbationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "camera" => Ok(Self::Camera),
            "noise" => Ok(Self::Noise),
            "layout" => Ok(Self::Layout),
            "light" => Ok(Self::Light),
            "robot" => Ok(Self::Robot),
            _ => Err(Error::Config(format!("unknown perturbation kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    pub magnitude: f64,
}

impl PerturbationSpec {
    pub fn new(kind: PerturbationKind, magnitude: f64) -> Result<Self> {
        if !(magnitude >= 0.0) || !magnitude.is_finite() {
            return Err(Error::Config(format!("perturbation magnitude must be finite and ≥ 0, got {magnitude}")));
        }
        Ok(Self { kind, magnitude })
    }

    /// `kind:magnitude`, e.g. `camera:1`.
    pub fn parse(s: &str) -> Result<Self> {
        let (k, m) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("perturbation `{s}` must be kind:magnitude")))?;
        let m: f64 = m
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("perturbation magnitude `{m}` is not a number")))?;
        Self::new(k.trim().parse()?, m)
    }
}

impl fmt::Display for PerturbationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.magnitude)
    }
}

fn shift_cols(view: &Tensor<f64>, grid: usize, shift: usize) -> Tensor<f64> {
    let mut out = view.clone();
    for t in 0..grid * grid {
        let (i, j) = (t / grid, t % grid);
        let src = i * grid + j.saturating_sub(shift);
        out.row_mut(t).copy_from_slice(view.row(src));
    }
    out
}

/// Applies a perturbation to rendered views. Layout and robot kinds act at
/// reset and leave the render untouched.
pub fn apply_perturbation(render: &RenderOutput, spec: &PerturbationSpec, rng: &mut RngStream) -> Result<RenderOutput> {
    let spec = PerturbationSpec::new(spec.kind, spec.magnitude)?;
    let mut out = render.clone();
    if spec.magnitude == 0.0 {
        return Ok(out);
    }
    let views = |o: &mut RenderOutput, f: &mut dyn FnMut(&mut Tensor<f64>)| {
        f(&mut o.mono);
        f(&mut o.left);
        f(&mut o.right);
    };
    match spec.kind {
        PerturbationKind::Camera => {
            let shift = spec.magnitude.ceil() as usize;
            let g = render.grid;
            views(&mut out, &mut |v| *v = shift_cols(v, g, shift));
        }
        PerturbationKind::Noise => views(&mut out, &mut |v| {
            for x in v.data_mut() {
                *x += spec.magnitude * rng.normal();
            }
        }),
        PerturbationKind::Light => views(&mut out, &mut |v| {
            for x in v.data_mut() {
                *x *= 1.0 + spec.magnitude;
            }
        }),
        PerturbationKind::Layout | PerturbationKind::Robot => {}
    }
    Ok(out)
}

/// State-observation analog: positions are the `(x, y)` pairs listed in
/// `positions` (indices of the x entries in `obs`), in centered coordinates.
pub fn perturb_state_obs(obs: &mut [f64], positions: &[usize], spec: &PerturbationSpec, grid: usize, rng: &mut RngStream) -> Result<()> {
    let spec = PerturbationSpec::new(spec.kind, spec.magnitude)?;
    if spec.magnitude == 0.0 {
        return Ok(());
    }
    for &p in positions {
        match spec.kind {
            PerturbationKind::Camera => obs[p] += 2.0 * spec.magnitude.ceil() / grid as f64,
            PerturbationKind::Noise => {
                obs[p] += spec.magnitude * rng.normal();
                obs[p + 1] += spec.magnitude * rng.normal();
            }
            PerturbationKind::Light => {
                obs[p] *= 1.0 + spec.magnitude;
                obs[p + 1] *= 1.0 + spec.magnitude;
            }
            PerturbationKind::Layout | PerturbationKind::Robot => {}
        }
    }
    Ok(())
}
