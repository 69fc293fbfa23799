//! Training, evaluation and the benchmark experiments.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod experiments;
pub mod fusion;
pub mod metrics;
pub mod probe;
pub mod report;
pub mod selftest;
pub mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ExperimentKind, RunConfig};
pub use eval::{run_rollouts, ChunkPolicy, EvalOutcome, EvalSettings, ExpertPolicy, FlowPolicy, RandomPolicy};
pub use metrics::{read_metrics, write_metrics, MetricsRow, METRICS_COLUMNS};
pub use train::{train_state_policy, train_state_policy_with, PolicySettings, TrainedPolicy};
pub use fusion::{gate_side_means, render_scenes, train_vision_policy, FusionSettings, VisionModel, VisionPolicy};
pub use probe::{depth_metrics, DepthMetrics, LinearProbe};
pub use experiments::{ablation_grid, depth_probe, export_gate_maps, fusion_ablation, AblationResult, Degradation, GateRecord};
pub use report::{emit_report, Report};
pub use selftest::{run_selftest, CheckResult};
