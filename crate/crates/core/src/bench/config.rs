//! Run configuration and its flat `[section]` / `key = value` text format.
//!
//! Keys are addressed as `section.key`. Every key has a default, so an empty
//! file is a complete configuration. A key written with an empty value is
//! reported as missing; all missing keys are listed in one error.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::flow::{PredictionKind, TauSchedule};
use crate::g3t::FusionStrategy;
use crate::world::{OcclusionConfig, OcclusionSide, PerturbationSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExperimentKind {
    #[default]
    Train,
    Eval,
    Ablate,
    FusionAblate,
    DepthProbe,
    ExportGates,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        Self::Train,
        Self::Eval,
        Self::Ablate,
        Self::FusionAblate,
        Self::DepthProbe,
        Self::ExportGates,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Eval => "eval",
            Self::Ablate => "ablate",
            Self::FusionAblate => "fusion_ablate",
            Self::DepthProbe => "depth_probe",
            Self::ExportGates => "export_gates",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment `{s}`")))
    }
}

/// Everything a run needs. Defaults follow the desk-scale budget.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub experiment: ExperimentKind,
    pub seeds: Vec<u64>,
    pub out_dir: String,

    pub head: PredictionKind,
    pub chunk_h: usize,
    pub denoise_steps: usize,
    pub train_steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub time_dim: usize,
    pub warmup: usize,
    pub weight_decay: f64,
    pub tau_schedule: TauSchedule,

    pub episodes: usize,

    pub rollouts: usize,
    pub perturbations: Vec<PerturbationSpec>,

    pub grid_kinds: Vec<PredictionKind>,
    pub grid_steps: Vec<usize>,
    pub grid_chunks: Vec<usize>,

    pub strategy: FusionStrategy,
    pub strategies: Vec<FusionStrategy>,
    pub model_dim: usize,
    pub heads: usize,
    pub gate_hidden: usize,
    pub positional: bool,
    pub lattice: usize,
    pub fusion_steps: usize,
    pub fusion_batch: usize,
    pub fusion_lr: f64,
    pub fusion_episodes: usize,
    pub policy_weight: f64,
    pub aux_weight: f64,
    pub occlusion: OcclusionConfig,

    pub probe_train_scenes: usize,
    pub probe_test_scenes: usize,
    pub gate_scenes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentKind::Train,
            seeds: vec![0, 1, 2],
            out_dir: "runs".into(),
            head: PredictionKind::Action,
            chunk_h: 8,
            denoise_steps: 4,
            train_steps: 5000,
            lr: 1e-3,
            batch: 64,
            hidden: 64,
            blocks: 4,
            time_dim: 32,
            warmup: 250,
            weight_decay: 1e-8,
            tau_schedule: TauSchedule::default(),
            episodes: 500,
            rollouts: 200,
            perturbations: Vec::new(),
            grid_kinds: vec![PredictionKind::Action, PredictionKind::Velocity],
            grid_steps: vec![2, 4, 10],
            grid_chunks: vec![8, 10, 30],
            strategy: FusionStrategy::G3t,
            strategies: FusionStrategy::ALL.to_vec(),
            model_dim: 32,
            heads: 4,
            gate_hidden: 64,
            positional: true,
            lattice: 8,
            fusion_steps: 1000,
            fusion_batch: 8,
            fusion_lr: 1e-3,
            fusion_episodes: 30,
            policy_weight: 1.0,
            aux_weight: 1.0,
            occlusion: OcclusionConfig {
                side: OcclusionSide::Random,
                coverage: 0.5,
            },
            probe_train_scenes: 200,
            probe_test_scenes: 100,
            gate_scenes: 20,
        }
    }
}

/// All recognised keys, in echo order.
pub const CONFIG_KEYS: [&str; 39] = [
    "run.experiment",
    "run.seeds",
    "run.out_dir",
    "policy.head",
    "policy.chunk_h",
    "policy.denoise_steps",
    "policy.train_steps",
    "policy.lr",
    "policy.batch",
    "policy.hidden",
    "policy.blocks",
    "policy.time_dim",
    "policy.warmup",
    "policy.weight_decay",
    "policy.tau_schedule",
    "data.episodes",
    "eval.rollouts",
    "eval.perturbations",
    "grid.kinds",
    "grid.steps",
    "grid.chunks",
    "fusion.strategy",
    "fusion.strategies",
    "fusion.model_dim",
    "fusion.heads",
    "fusion.gate_hidden",
    "fusion.positional",
    "fusion.lattice",
    "fusion.train_steps",
    "fusion.batch",
    "fusion.lr",
    "fusion.episodes",
    "fusion.policy_weight",
    "fusion.aux_weight",
    "fusion.occlusion_side",
    "fusion.occlusion_coverage",
    "probe.train_scenes",
    "probe.test_scenes",
    "gates.scenes",
];

fn mismatch(key: &str, expected: &str, value: &str) -> Error {
    Error::Validation(format!("key `{key}`: expected {expected}, got `{value}`"))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| mismatch(key, "unsigned integer", v))
}

fn parse_positive(key: &str, v: &str) -> Result<usize> {
    match parse_usize(key, v)? {
        0 => Err(Error::Validation(format!("key `{key}`: must be at least 1, got 0"))),
        n => Ok(n),
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(mismatch(key, "finite number", v)),
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(mismatch(key, "true or false", v)),
    }
}

fn parse_list<X>(key: &str, v: &str, expected: &str, f: impl Fn(&str) -> Option<X>) -> Result<Vec<X>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| f(s).ok_or_else(|| mismatch(key, expected, s)))
        .collect()
}

fn parse_enum<X: FromStr>(key: &str, v: &str, expected: &str) -> Result<X> {
    v.parse().map_err(|_| mismatch(key, expected, v))
}

fn join<X: fmt::Display>(xs: &[X]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

const KINDS: &str = "one of action, velocity, epsilon";
const STRATEGIES: &str = "one of g3t, concat, cross_attn, inverse_cross_attn, self_attn";

impl RunConfig {
    /// Sets one `section.key` from its text value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "run.experiment" => {
                self.experiment = parse_enum(key, v, "one of train, eval, ablate, fusion_ablate, depth_probe, export_gates")?
            }
            "run.seeds" => self.seeds = parse_list(key, v, "comma-separated unsigned integers", |s| s.parse().ok())?,
            "run.out_dir" => self.out_dir = v.to_string(),
            "policy.head" => self.head = parse_enum(key, v, KINDS)?,
            "policy.chunk_h" => self.chunk_h = parse_positive(key, v)?,
            "policy.denoise_steps" => self.denoise_steps = parse_positive(key, v)?,
            "policy.train_steps" => self.train_steps = parse_usize(key, v)?,
            "policy.lr" => self.lr = parse_f64(key, v)?,
            "policy.batch" => self.batch = parse_positive(key, v)?,
            "policy.hidden" => self.hidden = parse_positive(key, v)?,
            "policy.blocks" => self.blocks = parse_usize(key, v)?,
            "policy.time_dim" => self.time_dim = parse_positive(key, v)?,
            "policy.warmup" => self.warmup = parse_usize(key, v)?,
            "policy.weight_decay" => self.weight_decay = parse_f64(key, v)?,
            "policy.tau_schedule" => {
                self.tau_schedule = parse_enum(key, v, "uniform, logit_normal or logit_normal:<mean>:<std>")?
            }
            "data.episodes" => self.episodes = parse_positive(key, v)?,
            "eval.rollouts" => self.rollouts = parse_positive(key, v)?,
            "eval.perturbations" if v == "none" => self.perturbations.clear(),
            "eval.perturbations" => {
                self.perturbations = parse_list(key, v, "none or comma-separated kind:magnitude", |s| PerturbationSpec::parse(s).ok())?
            }
            "grid.kinds" => self.grid_kinds = parse_list(key, v, KINDS, |s| s.parse().ok())?,
            "grid.steps" => {
                self.grid_steps = parse_list(key, v, "comma-separated positive integers", |s| s.parse().ok().filter(|&n| n > 0))?
            }
            "grid.chunks" => {
                self.grid_chunks = parse_list(key, v, "comma-separated positive integers", |s| s.parse().ok().filter(|&n| n > 0))?
            }
            "fusion.strategy" => self.strategy = parse_enum(key, v, STRATEGIES)?,
            "fusion.strategies" => self.strategies = parse_list(key, v, STRATEGIES, |s| s.parse().ok())?,
            "fusion.model_dim" => self.model_dim = parse_positive(key, v)?,
            "fusion.heads" => self.heads = parse_positive(key, v)?,
            "fusion.gate_hidden" => self.gate_hidden = parse_positive(key, v)?,
            "fusion.positional" => self.positional = parse_bool(key, v)?,
            "fusion.lattice" => self.lattice = parse_positive(key, v)?,
            "fusion.train_steps" => self.fusion_steps = parse_usize(key, v)?,
            "fusion.batch" => self.fusion_batch = parse_positive(key, v)?,
            "fusion.lr" => self.fusion_lr = parse_f64(key, v)?,
            "fusion.episodes" => self.fusion_episodes = parse_positive(key, v)?,
            "fusion.policy_weight" => self.policy_weight = parse_f64(key, v)?,
            "fusion.aux_weight" => self.aux_weight = parse_f64(key, v)?,
            "fusion.occlusion_side" => {
                self.occlusion.side = parse_enum(key, v, "one of none, left, right, random")?
            }
            "fusion.occlusion_coverage" => self.occlusion.coverage = parse_f64(key, v)?,
            "probe.train_scenes" => self.probe_train_scenes = parse_positive(key, v)?,
            "probe.test_scenes" => self.probe_test_scenes = parse_positive(key, v)?,
            "gates.scenes" => self.gate_scenes = parse_positive(key, v)?,
            _ => return Err(Error::Validation(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Cross-field checks that single-key parsing cannot see.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.seeds.is_empty() {
            problems.push("run.seeds must list at least one seed".to_string());
        }
        if self.model_dim % self.heads != 0 {
            problems.push(format!(
                "fusion.model_dim {} is not divisible by fusion.heads {}",
                self.model_dim, self.heads
            ));
        }
        if !(0.0..=1.0).contains(&self.occlusion.coverage) {
            problems.push(format!("fusion.occlusion_coverage {} outside [0,1]", self.occlusion.coverage));
        }
        if self.lr <= 0.0 || self.fusion_lr <= 0.0 {
            problems.push("learning rates must be positive".to_string());
        }
        if self.policy_weight < 0.0 || self.aux_weight < 0.0 || self.policy_weight + self.aux_weight == 0.0 {
            problems.push("fusion loss weights must be non-negative with a positive sum".to_string());
        }
        if self.time_dim % 2 != 0 {
            problems.push(format!("policy.time_dim {} must be even", self.time_dim));
        }
        for (name, empty) in [
            ("grid.kinds", self.grid_kinds.is_empty()),
            ("grid.steps", self.grid_steps.is_empty()),
            ("grid.chunks", self.grid_chunks.is_empty()),
            ("fusion.strategies", self.strategies.is_empty()),
        ] {
            if empty {
                problems.push(format!("{name} must not be empty"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems.join("; ")))
        }
    }

    /// Parses the text format on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section = String::new();
        let mut missing = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Validation(format!("line {}: unterminated section header", ln + 1)))?;
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Validation(format!("line {}: expected key = value, got `{line}`", ln + 1)))?;
            let key = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{section}.{}", k.trim())
            };
            if !CONFIG_KEYS.contains(&key.as_str()) {
                return Err(Error::Validation(format!("line {}: unknown key `{key}`", ln + 1)));
            }
            if v.trim().is_empty() {
                missing.push(key);
                continue;
            }
            cfg.set(&key, v)?;
        }
        if !missing.is_empty() {
            return Err(Error::Validation(format!("missing values for keys: {}", missing.join(", "))));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("run.experiment", self.experiment.to_string()),
            ("run.seeds", join(&self.seeds)),
            ("run.out_dir", self.out_dir.clone()),
            ("policy.head", self.head.to_string()),
            ("policy.chunk_h", self.chunk_h.to_string()),
            ("policy.denoise_steps", self.denoise_steps.to_string()),
            ("policy.train_steps", self.train_steps.to_string()),
            ("policy.lr", self.lr.to_string()),
            ("policy.batch", self.batch.to_string()),
            ("policy.hidden", self.hidden.to_string()),
            ("policy.blocks", self.blocks.to_string()),
            ("policy.time_dim", self.time_dim.to_string()),
            ("policy.warmup", self.warmup.to_string()),
            ("policy.weight_decay", self.weight_decay.to_string()),
            ("policy.tau_schedule", self.tau_schedule.to_string()),
            ("data.episodes", self.episodes.to_string()),
            ("eval.rollouts", self.rollouts.to_string()),
            (
                "eval.perturbations",
                if self.perturbations.is_empty() {
                    "none".to_string()
                } else {
                    join(&self.perturbations)
                },
            ),
            ("grid.kinds", join(&self.grid_kinds)),
            ("grid.steps", join(&self.grid_steps)),
            ("grid.chunks", join(&self.grid_chunks)),
            ("fusion.strategy", self.strategy.to_string()),
            ("fusion.strategies", join(&self.strategies)),
            ("fusion.model_dim", self.model_dim.to_string()),
            ("fusion.heads", self.heads.to_string()),
            ("fusion.gate_hidden", self.gate_hidden.to_string()),
            ("fusion.positional", self.positional.to_string()),
            ("fusion.lattice", self.lattice.to_string()),
            ("fusion.train_steps", self.fusion_steps.to_string()),
            ("fusion.batch", self.fusion_batch.to_string()),
            ("fusion.lr", self.fusion_lr.to_string()),
            ("fusion.episodes", self.fusion_episodes.to_string()),
            ("fusion.policy_weight", self.policy_weight.to_string()),
            ("fusion.aux_weight", self.aux_weight.to_string()),
            ("fusion.occlusion_side", self.occlusion.side.to_string()),
            ("fusion.occlusion_coverage", self.occlusion.coverage.to_string()),
            ("probe.train_scenes", self.probe_train_scenes.to_string()),
            ("probe.test_scenes", self.probe_test_scenes.to_string()),
            ("gates.scenes", self.gate_scenes.to_string()),
        ]
    }

    /// Canonical text form; parsing it yields an identical config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, value) in self.entries() {
            let (s, k) = key.split_once('.').expect("keys are sectioned");
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{s}]\n"));
                section = s;
            }
            out.push_str(&format!("{k} = {value}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_is_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        let d = RunConfig::default();
        assert_eq!((d.chunk_h, d.denoise_steps, d.head, d.strategy), (8, 4, PredictionKind::Action, FusionStrategy::G3t));
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.set("eval.perturbations", "noise:0.1, camera:1").unwrap();
        c.set("policy.tau_schedule", "uniform").unwrap();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn chunk_range_rule() {
        assert_eq!(RunConfig::parse("[policy]\nchunk_h = 30").unwrap().chunk_h, 30);
        assert!(matches!(RunConfig::parse("[policy]\nchunk_h = 0"), Err(Error::Validation(_))));
    }

    #[test]
    fn type_mismatch_names_key_type_and_value() {
        let e = RunConfig::parse("[policy]\nlr = fast").unwrap_err().to_string();
        assert!(e.contains("policy.lr") && e.contains("finite number") && e.contains("fast"), "{e}");
    }

    #[test]
    fn missing_values_listed_together() {
        let e = RunConfig::parse("[policy]\nchunk_h =\n[eval]\nrollouts=\n").unwrap_err().to_string();
        assert!(e.contains("policy.chunk_h") && e.contains("eval.rollouts"), "{e}");
    }

    #[test]
    fn unknown_keys_and_enums_rejected() {
        assert!(RunConfig::parse("[policy]\ncolour = red").is_err());
        assert!(RunConfig::parse("[fusion]\nstrategy = qformer").is_err());
        assert!(RunConfig::parse("[run]\nseeds = ").is_err());
        assert!(RunConfig::parse("[fusion]\nmodel_dim = 30\nheads = 4").is_err());
    }
}
