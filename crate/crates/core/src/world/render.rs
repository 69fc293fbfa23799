use std::fmt;
use std::str::FromStr;

use super::WorldState;
use crate::error::{Error, Result};
use crate::nn::{RngStream, Tensor};

pub const CHANNELS: usize = 3;
pub const DEFAULT_GRID: usize = 8;

const FORK_SCALE: u64 = 1;
const FORK_MASK: u64 = 2;
const FORK_NOISE: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewId {
    Main,
    Left,
    Right,
}

/// One camera: token lattice plus the affine it applies to the scene.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSpec {
    pub view: ViewId,
    pub grid: usize,
    /// Sampling offset along x, in token widths.
    pub x_offset: f64,
    pub depth_gain: f64,
    pub depth_bias: f64,
}

impl ViewSpec {
    pub fn defaults(grid: usize) -> [ViewSpec; 3] {
        [
            ViewSpec { view: ViewId::Main, grid, x_offset: 0.0, depth_gain: 1.0, depth_bias: 0.0 },
            ViewSpec { view: ViewId::Left, grid, x_offset: -0.15, depth_gain: 0.9, depth_bias: 0.05 },
            ViewSpec { view: ViewId::Right, grid, x_offset: 0.15, depth_gain: 1.1, depth_bias: -0.05 },
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OcclusionSide {
    #[default]
    None,
    Left,
    Right,
    /// Left or right, drawn per render.
    Random,
}

impl fmt::Display for OcclusionSide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Left => "left",
            Self::Right => "right",
            Self::Random => "random",
        })
    }
}

impl FromStr for OcclusionSide {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "left" => Ok(Self::Left),
            "right" => Ok(Self::Right),
            "random" => Ok(Self::Random),
            _ => Err(Error::Config(format!("unknown occlusion side `{s}`"))),
        }
    }
}

/// A rectangular block of side-view tokens covering `coverage` of the lattice.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OcclusionConfig {
    pub side: OcclusionSide,
    pub coverage: f64,
}

impl OcclusionConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn full(side: OcclusionSide) -> Self {
        Self { side, coverage: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.coverage) {
            return Err(Error::Config(format!("occlusion coverage must lie in [0,1], got {}", self.coverage)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub grid: usize,
    /// `N×3`: occupancy, scale-ambiguous depth, class code.
    pub mono: Tensor<f64>,
    /// `M×3` per side view: occupancy, view-affine depth, class code.
    pub left: Tensor<f64>,
    pub right: Tensor<f64>,
    /// Uncorrupted main-view depth, one per token.
    pub depth_truth: Vec<f64>,
    pub corrupted_left: Vec<usize>,
    pub corrupted_right: Vec<usize>,
}

impl RenderOutput {
    pub fn tokens(&self) -> usize {
        self.grid * self.grid
    }
}

fn token_center(t: usize, grid: usize) -> (f64, f64) {
    let (i, j) = (t / grid, t % grid);
    ((j as f64 + 0.5) / grid as f64, (i as f64 + 0.5) / grid as f64)
}

/// Occupancy, depth and class at one sampling point.
fn sample_point(state: &WorldState, px: f64, py: f64, grid: usize) -> (f64, f64, f64) {
    let n = state.objects.len() as f64;
    let mut best = (0.0, None);
    for o in &state.objects {
        let d = ((o.x - px).powi(2) + (o.y - py).powi(2)).sqrt();
        let cover = ((o.radius - d) * grid as f64 + 0.5).clamp(0.0, 1.0);
        if cover > best.0 {
            best = (cover, Some(o));
        }
    }
    match best {
        (occ, Some(o)) => (
            occ,
            state.table_depth - occ * 2.0 * o.radius,
            occ * (o.id as f64 + 1.0) / (n + 1.0),
        ),
        _ => (0.0, state.table_depth, 0.0),
    }
}

fn render_view(state: &WorldState, spec: &ViewSpec) -> (Tensor<f64>, Vec<f64>) {
    let m = spec.grid * spec.grid;
    let mut out = Tensor::zeros(&[m, CHANNELS]);
    let mut depth = Vec::with_capacity(m);
    for t in 0..m {
        let (cx, cy) = token_center(t, spec.grid);
        let px = cx + spec.x_offset / spec.grid as f64;
        let (occ, d, class) = sample_point(state, px, cy, spec.grid);
        depth.push(d);
        out.row_mut(t)
            .copy_from_slice(&[occ, spec.depth_gain * d + spec.depth_bias, class]);
    }
    (out, depth)
}

fn block(rng: &mut RngStream, grid: usize, coverage: f64) -> Vec<usize> {
    if coverage <= 0.0 {
        return Vec::new();
    }
    let side = ((grid as f64 * coverage.sqrt()).round() as usize).clamp(1, grid);
    let i0 = rng.below(grid - side + 1);
    let j0 = rng.below(grid - side + 1);
    let mut idx: Vec<usize> = (i0..i0 + side)
        .flat_map(|i| (j0..j0 + side).map(move |j| i * grid + j))
        .collect();
    idx.sort_unstable();
    idx
}

/// Corrupted token indices `(left, right)` for a render keyed by
/// `(seed, stream)`.
pub fn occlusion_mask(seed: u64, stream: u64, cfg: &OcclusionConfig, grid: usize) -> (Vec<usize>, Vec<usize>) {
    let mut rng = RngStream::new(seed, stream).fork(FORK_MASK);
    let side = match cfg.side {
        OcclusionSide::Random => {
            if rng.uniform() < 0.5 {
                OcclusionSide::Left
            } else {
                OcclusionSide::Right
            }
        }
        s => s,
    };
    match side {
        OcclusionSide::Left => (block(&mut rng, grid, cfg.coverage), Vec::new()),
        OcclusionSide::Right => (Vec::new(), block(&mut rng, grid, cfg.coverage)),
        _ => (Vec::new(), Vec::new()),
    }
}

/// Renders the main view and both side views. Draws come from forks of
/// `rng`, so the result depends only on its `(seed, stream)` key.
pub fn render_views(state: &WorldState, specs: &[ViewSpec; 3], occlusion: &OcclusionConfig, rng: &RngStream) -> Result<RenderOutput> {
    occlusion.validate()?;
    let grid = specs[0].grid;
    if specs.iter().any(|s| s.grid != grid || s.grid == 0)
        || specs.iter().map(|s| s.view).collect::<Vec<_>>() != [ViewId::Main, ViewId::Left, ViewId::Right]
    {
        return Err(Error::Config("view specs must be main, left, right on one lattice".into()));
    }
    let (mut mono, depth_truth) = render_view(state, &specs[0]);
    let scale = rng.fork(FORK_SCALE).uniform_in(0.6, 1.4);
    for r in 0..mono.rows() {
        mono.row_mut(r)[1] *= scale;
    }
    let (mut left, _) = render_view(state, &specs[1]);
    let (mut right, _) = render_view(state, &specs[2]);

    let (corrupted_left, corrupted_right) = occlusion_mask(rng.seed(), rng.stream(), occlusion, grid);
    let mut noise = rng.fork(FORK_NOISE);
    for (view, idx) in [(&mut left, &corrupted_left), (&mut right, &corrupted_right)] {
        for &t in idx {
            for v in view.row_mut(t) {
                *v = 0.5 + 0.5 * noise.normal();
            }
        }
    }
    Ok(RenderOutput {
        grid,
        mono,
        left,
        right,
        depth_truth,
        corrupted_left,
        corrupted_right,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{reset, LayoutParams};

    fn scene() -> WorldState {
        reset(11, &LayoutParams::default()).unwrap()
    }

    #[test]
    fn empty_scene_has_no_occupancy() {
        let mut s = scene();
        s.objects.clear();
        let r = render_views(&s, &ViewSpec::defaults(8), &OcclusionConfig::none(), &RngStream::new(1, 0)).unwrap();
        for v in [&r.mono, &r.left, &r.right] {
            assert!((0..64).all(|t| v.get(t, 0) == 0.0));
        }
    }

    #[test]
    fn full_left_occlusion() {
        let cfg = OcclusionConfig::full(OcclusionSide::Left);
        let rng = RngStream::new(4, 9);
        let clean = render_views(&scene(), &ViewSpec::defaults(8), &OcclusionConfig::none(), &rng).unwrap();
        let r = render_views(&scene(), &ViewSpec::defaults(8), &cfg, &rng).unwrap();
        assert_eq!(r.corrupted_left, (0..64).collect::<Vec<_>>());
        assert!(r.corrupted_right.is_empty());
        assert_eq!(r.right, clean.right);
        assert_eq!(r.mono, clean.mono);
        assert!((0..64).all(|t| r.left.row(t) != clean.left.row(t)));
    }

    #[test]
    fn renders_are_reproducible() {
        let cfg = OcclusionConfig { side: OcclusionSide::Random, coverage: 0.3 };
        let a = render_views(&scene(), &ViewSpec::defaults(8), &cfg, &RngStream::new(2, 5)).unwrap();
        let b = render_views(&scene(), &ViewSpec::defaults(8), &cfg, &RngStream::new(2, 5)).unwrap();
        assert_eq!(a, b);
        let (l, r) = occlusion_mask(2, 5, &cfg, 8);
        assert_eq!((l, r), (a.corrupted_left, a.corrupted_right));
    }

    #[test]
    fn side_depth_is_affine_of_truth_off_objects() {
        let mut s = scene();
        s.objects.clear();
        let r = render_views(&s, &ViewSpec::defaults(8), &OcclusionConfig::none(), &RngStream::new(0, 0)).unwrap();
        for t in 0..64 {
            assert!((r.left.get(t, 1) - (0.9 * r.depth_truth[t] + 0.05)).abs() < 1e-12);
            assert!((r.right.get(t, 1) - (1.1 * r.depth_truth[t] - 0.05)).abs() < 1e-12);
        }
    }

    #[test]
    fn coverage_out_of_range_rejected() {
        let cfg = OcclusionConfig { side: OcclusionSide::Left, coverage: 1.5 };
        assert!(render_views(&scene(), &ViewSpec::defaults(8), &cfg, &RngStream::new(0, 0)).is_err());
    }
}
