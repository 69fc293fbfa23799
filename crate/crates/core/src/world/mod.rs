//! Deterministic 2D pick-and-place world on the unit square.

pub mod dataset;
pub mod perturb;
pub mod render;

use crate::error::{Error, Result};
use crate::nn::RngStream;

pub use dataset::{episode_seeds, generate_dataset, generate_dataset_with, read_dataset, write_dataset, Dataset, DatasetConfig, EpisodeRecord, NormStats, StepRecord};
pub use perturb::{apply_perturbation, perturb_state_obs, PerturbationKind, PerturbationSpec};
pub use render::{occlusion_mask, render_views, OcclusionConfig, OcclusionSide, RenderOutput, ViewId, ViewSpec, CHANNELS, DEFAULT_GRID};

/// Per-step displacement bound on each axis.
pub const MAX_STEP: f64 = 0.05;
pub const GRASP_RADIUS: f64 = 0.04;
pub const SUCCESS_TOL: f64 = 0.04;
pub const MAX_EPISODE_STEPS: usize = 120;
pub const ACTION_DIM: usize = 3;
/// Width of the state-mode context vector `[target xy, goal xy]`.
pub const CONTEXT_DIM: usize = 4;
/// Width of the proprioceptive state `[gripper xy, closed, holding]`.
pub const STATE_DIM: usize = 4;

const STREAM_LAYOUT: u64 = 1;
const AT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectState {
    pub id: u32,
    pub x: f64,
    pub y: f64,
    pub radius: f64,
    pub held: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Goal {
    pub x: f64,
    pub y: f64,
    pub target: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub gripper: [f64; 2],
    pub gripper_closed: bool,
    pub objects: Vec<ObjectState>,
    pub goal: Goal,
    pub step_count: u32,
    /// Depth of the table plane seen from the overhead camera.
    pub table_depth: f64,
}

/// `(dx, dy, grip)`; grip > 0 closes, grip < 0 opens, exactly 0 keeps the gripper as is.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyAction {
    pub dx: f64,
    pub dy: f64,
    pub grip: f64,
}

impl ToyAction {
    pub const ZERO: ToyAction = ToyAction { dx: 0.0, dy: 0.0, grip: 0.0 };

    pub fn new(dx: f64, dy: f64, grip: f64) -> Self {
        Self { dx, dy, grip }
    }

    pub fn from_slice(a: &[f64]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn clipped(self) -> Self {
        let c = |v: f64, m: f64| if v.is_finite() { v.clamp(-m, m) } else { 0.0 };
        Self {
            dx: c(self.dx, MAX_STEP),
            dy: c(self.dy, MAX_STEP),
            grip: c(self.grip, 1.0),
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.dx, self.dy, self.grip]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayoutParams {
    pub n_objects: usize,
    /// Half-width of the uniform jitter around canonical positions.
    pub spread: f64,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Half-width of the jitter on the gripper start.
    pub gripper_spread: f64,
    pub min_gap: f64,
}

impl Default for LayoutParams {
    fn default() -> Self {
        Self {
            n_objects: 3,
            spread: 0.15,
            radius_min: 0.04,
            radius_max: 0.07,
            gripper_spread: 0.05,
            min_gap: 0.02,
        }
    }
}

impl LayoutParams {
    fn canonical_object(&self, k: usize) -> (f64, f64) {
        let angle = std::f64::consts::FRAC_PI_2 + 2.0 * std::f64::consts::PI * k as f64 / self.n_objects as f64;
        (0.5 + 0.28 * angle.cos(), 0.5 - 0.28 * angle.sin())
    }

    pub const CANONICAL_GOAL: (f64, f64) = (0.5, 0.5);
    pub const CANONICAL_GRIPPER: (f64, f64) = (0.5, 0.92);
}

fn dist(ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
}

/// Samples a scene from `seed`. Rejects layouts with overlapping objects or a
/// goal on top of a distractor, up to 1000 attempts.
pub fn reset(seed: u64, layout: &LayoutParams) -> Result<WorldState> {
    if layout.n_objects == 0 || layout.radius_min <= 0.0 || layout.radius_max < layout.radius_min {
        return Err(Error::Config("layout needs objects and 0 < radius_min ≤ radius_max".into()));
    }
    let mut rng = RngStream::new(seed, STREAM_LAYOUT);
    let table_depth = rng.uniform_in(0.8, 1.2);
    for _ in 0..1000 {
        let mut objects = Vec::with_capacity(layout.n_objects);
        for k in 0..layout.n_objects {
            let (cx, cy) = layout.canonical_object(k);
            let r = rng.uniform_in(layout.radius_min, layout.radius_max);
            let x = (cx + rng.uniform_in(-1.0, 1.0) * layout.spread).clamp(r, 1.0 - r);
            let y = (cy + rng.uniform_in(-1.0, 1.0) * layout.spread).clamp(r, 1.0 - r);
            objects.push(ObjectState {
                id: k as u32,
                x,
                y,
                radius: r,
                held: false,
            });
        }
        let target = rng.below(layout.n_objects) as u32;
        let (gx0, gy0) = LayoutParams::CANONICAL_GOAL;
        let gx = (gx0 + rng.uniform_in(-1.0, 1.0) * layout.spread).clamp(0.05, 0.95);
        let gy = (gy0 + rng.uniform_in(-1.0, 1.0) * layout.spread).clamp(0.05, 0.95);
        let (sx, sy) = LayoutParams::CANONICAL_GRIPPER;
        let gripper = [
            (sx + rng.uniform_in(-1.0, 1.0) * layout.gripper_spread).clamp(0.0, 1.0),
            (sy + rng.uniform_in(-1.0, 1.0) * layout.gripper_spread).clamp(0.0, 1.0),
        ];

        let overlap = objects.iter().enumerate().any(|(i, a)| {
            objects[i + 1..]
                .iter()
                .any(|b| dist(a.x, a.y, b.x, b.y) < a.radius + b.radius + layout.min_gap)
        });
        let goal_blocked = objects
            .iter()
            .filter(|o| o.id != target)
            .any(|o| dist(o.x, o.y, gx, gy) < o.radius + layout.radius_max + layout.min_gap);
        let t = &objects[target as usize];
        let trivial = dist(t.x, t.y, gx, gy) < 0.15;
        if !(overlap || goal_blocked || trivial) {
            return Ok(WorldState {
                gripper,
                gripper_closed: false,
                objects,
                goal: Goal { x: gx, y: gy, target },
                step_count: 0,
                table_depth,
            });
        }
    }
    Err(Error::Layout(format!("no valid layout for seed {seed} after 1000 attempts")))
}

impl WorldState {
    pub fn target(&self) -> &ObjectState {
        &self.objects[self.goal.target as usize]
    }

    pub fn held_index(&self) -> Option<usize> {
        self.objects.iter().position(|o| o.held)
    }

    /// Advances one step. Grip is applied before the move, so closing within
    /// grasp radius and moving in the same step carries the object.
    pub fn step(&mut self, action: ToyAction) {
        let a = action.clipped();
        if a.grip > 0.0 {
            self.gripper_closed = true;
            if self.held_index().is_none() {
                let [gx, gy] = self.gripper;
                let nearest = self
                    .objects
                    .iter()
                    .enumerate()
                    .map(|(i, o)| (i, dist(o.x, o.y, gx, gy)))
                    .filter(|&(_, d)| d <= GRASP_RADIUS)
                    .min_by(|a, b| a.1.total_cmp(&b.1));
                if let Some((i, _)) = nearest {
                    self.objects[i].held = true;
                }
            }
        } else if a.grip < 0.0 {
            self.gripper_closed = false;
            for o in &mut self.objects {
                o.held = false;
            }
        }
        self.gripper[0] = (self.gripper[0] + a.dx).clamp(0.0, 1.0);
        self.gripper[1] = (self.gripper[1] + a.dy).clamp(0.0, 1.0);
        if let Some(i) = self.held_index() {
            self.objects[i].x = self.gripper[0];
            self.objects[i].y = self.gripper[1];
        }
        self.step_count += 1;
    }

    /// `[target x, target y, goal x, goal y]`, centered to `[-1, 1]`.
    pub fn context_vector(&self) -> [f64; CONTEXT_DIM] {
        let t = self.target();
        [c(t.x), c(t.y), c(self.goal.x), c(self.goal.y)]
    }

    /// `[gripper x, gripper y, closed, holding]`.
    pub fn state_vector(&self) -> [f64; STATE_DIM] {
        [
            c(self.gripper[0]),
            c(self.gripper[1]),
            if self.gripper_closed { 1.0 } else { -1.0 },
            if self.held_index().is_some() { 1.0 } else { -1.0 },
        ]
    }
}

fn c(v: f64) -> f64 {
    2.0 * v - 1.0
}

pub fn step(state: &WorldState, action: ToyAction) -> WorldState {
    let mut s = state.clone();
    s.step(action);
    s
}

fn toward(from: [f64; 2], to: (f64, f64)) -> (f64, f64) {
    (
        (to.0 - from[0]).clamp(-MAX_STEP, MAX_STEP),
        (to.1 - from[1]).clamp(-MAX_STEP, MAX_STEP),
    )
}

/// Proportional pick-and-place controller: reach, grasp, carry, release.
pub fn expert_action(state: &WorldState) -> ToyAction {
    let t = state.target();
    let goal = (state.goal.x, state.goal.y);
    if t.held {
        let (dx, dy) = toward(state.gripper, goal);
        if dx.abs() < AT_EPS && dy.abs() < AT_EPS {
            return ToyAction::new(0.0, 0.0, -1.0);
        }
        return ToyAction::new(dx, dy, 1.0);
    }
    if dist(t.x, t.y, goal.0, goal.1) <= 0.5 * SUCCESS_TOL {
        return ToyAction::new(0.0, 0.0, -1.0);
    }
    if dist(t.x, t.y, state.gripper[0], state.gripper[1]) <= 0.5 * GRASP_RADIUS {
        let (dx, dy) = toward(state.gripper, goal);
        return ToyAction::new(dx, dy, 1.0);
    }
    let (dx, dy) = toward(state.gripper, (t.x, t.y));
    ToyAction::new(dx, dy, -1.0)
}

/// The expert's next `horizon` actions from `state`, as an `H×3` row-major block.
pub fn scripted_expert(state: &WorldState, horizon: usize) -> Vec<[f64; 3]> {
    let mut s = state.clone();
    (0..horizon)
        .map(|_| {
            let a = expert_action(&s);
            s.step(a);
            a.to_array()
        })
        .collect()
}

/// Target within `tol` of the goal and not held.
pub fn evaluate_success(state: &WorldState, tol: f64) -> Result<bool> {
    if !(tol > 0.0) {
        return Err(Error::Domain(format!("success tolerance must be positive, got {tol}")));
    }
    let t = state.target();
    Ok(!t.held && dist(t.x, t.y, state.goal.x, state.goal.y) <= tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reset_is_deterministic() {
        let l = LayoutParams::default();
        assert_eq!(reset(9, &l).unwrap(), reset(9, &l).unwrap());
        assert_ne!(reset(9, &l).unwrap(), reset(10, &l).unwrap());
    }

    #[test]
    fn zero_spread_gives_canonical_positions() {
        let l = LayoutParams {
            spread: 0.0,
            gripper_spread: 0.0,
            ..Default::default()
        };
        let s = reset(3, &l).unwrap();
        for (k, o) in s.objects.iter().enumerate() {
            let (x, y) = l.canonical_object(k);
            assert_eq!((o.x, o.y), (x, y));
        }
        assert_eq!((s.goal.x, s.goal.y), LayoutParams::CANONICAL_GOAL);
        assert_eq!(s.gripper, [0.5, 0.92]);
    }

    #[test]
    fn impossible_layout_errors() {
        let l = LayoutParams {
            n_objects: 12,
            radius_min: 0.2,
            radius_max: 0.2,
            ..Default::default()
        };
        assert!(matches!(reset(0, &l), Err(Error::Layout(_))));
    }

    #[test]
    fn zero_action_only_counts() {
        let s = reset(1, &LayoutParams::default()).unwrap();
        let n = step(&s, ToyAction::ZERO);
        assert_eq!(n.step_count, 1);
        let mut back = n.clone();
        back.step_count = 0;
        assert_eq!(back, s);
    }

    #[test]
    fn move_arithmetic() {
        let mut s = reset(1, &LayoutParams::default()).unwrap();
        s.gripper = [0.5, 0.5];
        s.step(ToyAction::new(0.05, 0.0, 0.0));
        assert_eq!(s.gripper, [0.55, 0.5]);
        s.step(ToyAction::new(0.5, -0.5, 0.0));
        assert!((s.gripper[0] - 0.6).abs() < 1e-12 && (s.gripper[1] - 0.45).abs() < 1e-12);
    }

    #[test]
    fn grasp_then_carry() {
        let mut s = reset(2, &LayoutParams::default()).unwrap();
        let t = s.target().clone();
        s.gripper = [t.x + 0.01, t.y];
        s.step(ToyAction::new(0.03, -0.02, 1.0));
        assert!(s.target().held);
        assert_eq!((s.target().x, s.target().y), (s.gripper[0], s.gripper[1]));
        s.step(ToyAction::new(-0.04, 0.05, 1.0));
        assert_eq!((s.target().x, s.target().y), (s.gripper[0], s.gripper[1]));
        s.step(ToyAction::new(0.0, 0.0, -1.0));
        assert!(!s.target().held && !s.gripper_closed);
    }

    #[test]
    fn expert_idles_when_done() {
        let mut s = reset(4, &LayoutParams::default()).unwrap();
        let ti = s.goal.target as usize;
        s.objects[ti].x = s.goal.x;
        s.objects[ti].y = s.goal.y;
        s.gripper = [s.goal.x, s.goal.y];
        for a in scripted_expert(&s, 8) {
            assert!(a[0].abs() < 1e-12 && a[1].abs() < 1e-12);
        }
    }

    #[test]
    fn expert_chunk_shape() {
        let s = reset(5, &LayoutParams::default()).unwrap();
        for h in [1, 8, 30] {
            assert_eq!(scripted_expert(&s, h).len(), h);
        }
    }

    #[test]
    fn success_rules() {
        let mut s = reset(6, &LayoutParams::default()).unwrap();
        let ti = s.goal.target as usize;
        s.objects[ti].x = s.goal.x;
        s.objects[ti].y = s.goal.y;
        assert!(evaluate_success(&s, SUCCESS_TOL).unwrap());
        s.objects[ti].x = s.goal.x + SUCCESS_TOL + 1e-6;
        assert!(!evaluate_success(&s, SUCCESS_TOL).unwrap());
        s.objects[ti].x = s.goal.x;
        s.objects[ti].held = true;
        assert!(!evaluate_success(&s, SUCCESS_TOL).unwrap());
        assert!(evaluate_success(&s, 0.0).is_err());
    }
}
