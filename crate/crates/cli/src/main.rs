//! `amlb` command-line entry point.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use amlb_core::bench::experiments::{
    eval_settings, evaluate_state_policy, final_loss, fusion_settings, gate_row, gate_scenes, policy_settings, state_dataset,
    train_fusion_stack, view_dataset, vision_rate, write_degradations, write_gate_maps, write_probe_details,
};
use amlb_core::bench::*;
use amlb_core::world::{write_dataset, LayoutParams};
use amlb_core::Error;
use clap::{Parser, Subcommand};
use log::info;
use sha2::{Digest, Sha256};

const ENV_OUT: &str = "AMLB_OUT";

#[derive(Parser, Debug)]
#[command(name = "amlb", version, about = "Flow-matching chunk policies and gated stereo fusion on a toy manipulation world")]
struct Cli {
    /// Config file in `[section]` / `key = value` form.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Output root; defaults to $AMLB_OUT, then `run.out_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    /// Override one config key, e.g. `--set policy.chunk_h=30`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate expert demonstration datasets.
    GenData {
        /// Also render stereo views (uses the fusion settings).
        #[arg(long)]
        views: bool,
    },
    /// Train a policy per seed and save checkpoints.
    Train {
        /// Train the vision policy with the fusion stack instead of the state policy.
        #[arg(long)]
        views: bool,
        /// Save an extra state-policy checkpoint every N steps (0 disables).
        #[arg(long, default_value_t = 0, value_name = "N")]
        checkpoint_every: usize,
    },
    /// Evaluate checkpoints, or freshly trained state policies when none are given.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: Vec<PathBuf>,
    },
    /// Head kind x denoising steps x chunk size grid.
    Ablate,
    /// Compare fusion strategies under one training budget.
    FusionAblate,
    /// Linear depth probes on monocular and fused features.
    DepthProbe {
        /// Probe this vision checkpoint instead of training a stack per seed.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Export per-token gate values on held-out scenes.
    ExportGates {
        /// Use this vision checkpoint instead of training a stack per seed.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Summary tables and plots from every metrics.csv under a directory.
    Report {
        #[arg(long, value_name = "DIR")]
        metrics: PathBuf,
    },
    /// Run the fast invariant checks.
    Selftest,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen_data",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Ablate => "ablate",
            Command::FusionAblate => "fusion_ablate",
            Command::DepthProbe { .. } => "depth_probe",
            Command::ExportGates { .. } => "export_gates",
            Command::Report { .. } => "report",
            Command::Selftest => "selftest",
        }
    }

    fn experiment(&self) -> Option<ExperimentKind> {
        self.name().parse().ok()
    }
}

/// Failures split by exit status.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Validation(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(format!("io error: {e}"))
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Config file, then `--set` overrides, then the dedicated flags.
fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", p.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(exp) = cli.command.experiment() {
        cfg.experiment = exp;
    }
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.display().to_string();
    } else if let Ok(o) = std::env::var(ENV_OUT) {
        cfg.out_dir = o;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_dir(cfg: &RunConfig, command: &Command) -> PathBuf {
    let seeds: Vec<String> = cfg.seeds.iter().map(u64::to_string).collect();
    Path::new(&cfg.out_dir).join(format!("{}-s{}", command.name(), seeds.join("_")))
}

/// Config echo and manifest. The timestamp lives only in the manifest. The
/// output root is left out of the echo so that relocated runs compare equal.
fn write_stamps(dir: &Path, cfg: &RunConfig, command: &Command) -> CliResult<()> {
    let echo: String = cfg.to_text().lines().filter(|l| !l.starts_with("out_dir =")).map(|l| format!("{l}\n")).collect();
    fs::write(dir.join("config.txt"), &echo)?;
    let hash = hex::encode(Sha256::digest(echo.as_bytes()));
    let seeds: Vec<String> = cfg.seeds.iter().map(u64::to_string).collect();
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let manifest = format!(
        "command = {}\nseeds = {}\nconfig_sha256 = {hash}\namlb_version = {}\ncheckpoint_version = {CHECKPOINT_VERSION}\ncreated_unix = {now}\n",
        command.name(),
        seeds.join(","),
        env!("CARGO_PKG_VERSION"),
    );
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

fn write_rows(dir: &Path, name: &str, rows: &[MetricsRow]) -> CliResult<()> {
    write_metrics(rows, fs::File::create(dir.join(name))?)?;
    Ok(())
}

fn write_losses(path: &Path, losses: &[f64]) -> CliResult<()> {
    let mut text = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        text.push_str(&format!("{i},{l}\n"));
    }
    fs::write(path, text)?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Ok(Checkpoint::load(path)?)
}

fn vision_model(path: &Path) -> CliResult<VisionModel> {
    Ok(VisionModel::from_checkpoint(&load_checkpoint(path)?)?)
}

fn gen_data(cfg: &RunConfig, dir: &Path, views: bool) -> CliResult<Vec<MetricsRow>> {
    for &seed in &cfg.seeds {
        let ds = if views { view_dataset(cfg, seed)? } else { state_dataset(cfg, cfg.chunk_h, seed)? };
        let name = format!("{}-s{seed}.bin", if views { "views" } else { "states" });
        let mut f = fs::File::create(dir.join(&name))?;
        write_dataset(&ds, &mut f)?;
        info!("wrote {name}: {} steps", ds.len());
    }
    Ok(Vec::new())
}

fn train(cfg: &RunConfig, dir: &Path, views: bool, every: usize) -> CliResult<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let (ckpt, losses, strategy) = if views {
            let ds = view_dataset(cfg, seed)?;
            let s = fusion_settings(cfg, cfg.strategy, seed, cfg.policy_weight);
            let m = train_vision_policy(&ds, &s, LayoutParams::default().n_objects)?;
            m.to_checkpoint().save(&dir.join(format!("vision-s{seed}.amlb")))?;
            (m.to_checkpoint(), m.losses, cfg.strategy.to_string())
        } else {
            let ds = state_dataset(cfg, cfg.chunk_h, seed)?;
            let s = policy_settings(cfg, cfg.head, cfg.chunk_h, seed);
            let p = train_state_policy_with(&ds, &s, every, &mut |c| c.save(&dir.join(format!("policy-s{seed}-step{}.amlb", c.step))))?;
            p.to_checkpoint().save(&dir.join(format!("policy-s{seed}.amlb")))?;
            (p.to_checkpoint(), p.losses, String::new())
        };
        write_losses(&dir.join(format!("losses-s{seed}.csv")), &losses)?;
        let loss = final_loss(&losses);
        info!("trained seed {seed} for {} steps, final loss {loss:?}", ckpt.step);
        rows.push(MetricsRow {
            run_id: format!("train-s{seed}-{}-h{}{}", cfg.head, cfg.chunk_h, if views { format!("-{strategy}") } else { String::new() }),
            seed,
            experiment: ExperimentKind::Train.to_string(),
            head_kind: cfg.head.to_string(),
            fusion_strategy: strategy,
            chunk_h: Some(cfg.chunk_h),
            final_loss: loss,
            ..Default::default()
        });
    }
    Ok(rows)
}

fn eval(cfg: &RunConfig, checkpoints: &[PathBuf]) -> CliResult<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    if checkpoints.is_empty() {
        for &seed in &cfg.seeds {
            let p = amlb_core::bench::experiments::train_for_seed(cfg, seed)?;
            rows.extend(evaluate_state_policy(cfg, ExperimentKind::Eval, &p, seed)?);
        }
        return Ok(rows);
    }
    for path in checkpoints {
        let c = load_checkpoint(path)?;
        let seed: u64 = c.meta_parse("seed")?;
        match c.meta("model")? {
            "vision" => {
                let m = VisionModel::from_checkpoint(&c)?;
                let rate = vision_rate(cfg, &m, seed)?;
                let s = &m.settings;
                rows.push(MetricsRow {
                    run_id: format!("eval-s{seed}-{}-{}-n{}-h{}", s.policy.kind, s.strategy, cfg.denoise_steps, s.policy.horizon),
                    seed,
                    experiment: ExperimentKind::Eval.to_string(),
                    head_kind: s.policy.kind.to_string(),
                    fusion_strategy: s.strategy.to_string(),
                    denoise_steps: Some(cfg.denoise_steps),
                    chunk_h: Some(s.policy.horizon),
                    success_rate: Some(rate),
                    ..Default::default()
                });
                info!("eval {}: {rate:.3} over {} rollouts", path.display(), eval_settings(cfg, seed).rollouts);
            }
            _ => rows.extend(evaluate_state_policy(cfg, ExperimentKind::Eval, &TrainedPolicy::from_checkpoint(&c)?, seed)?),
        }
    }
    Ok(rows)
}

fn ablate(cfg: &RunConfig, dir: &Path) -> CliResult<Vec<MetricsRow>> {
    let res = ablation_grid(cfg)?;
    write_degradations(&res.degradations, fs::File::create(dir.join("degradation.csv"))?)?;
    for d in &res.degradations {
        info!("seed {} {} n{}: delta {:+.3}", d.seed, d.head_kind, d.denoise_steps, d.delta());
    }
    Ok(res.rows)
}

fn probe(cfg: &RunConfig, dir: &Path, checkpoint: Option<&Path>) -> CliResult<Vec<MetricsRow>> {
    let res = depth_probe(cfg, &mut |_| match checkpoint {
        Some(p) => Ok(Some(VisionModel::from_checkpoint(&Checkpoint::load(p)?)?)),
        None => Ok(None),
    })?;
    write_probe_details(&res.details, fs::File::create(dir.join("probe_details.csv"))?)?;
    Ok(res.rows)
}

fn export_gates(cfg: &RunConfig, dir: &Path, checkpoint: Option<&Path>) -> CliResult<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let model = match checkpoint {
            Some(p) => vision_model(p)?,
            None => {
                let m = train_fusion_stack(cfg, seed)?;
                m.to_checkpoint().save(&dir.join(format!("stack-s{seed}.amlb")))?;
                m
            }
        };
        let scenes = gate_scenes(cfg, seed, &cfg.occlusion)?;
        let records = export_gate_maps(&model, &scenes)?;
        write_gate_maps(&records, fs::File::create(dir.join(format!("gates-s{seed}.csv")))?)?;
        rows.push(gate_row(&model, seed, &scenes)?);
    }
    Ok(rows)
}

fn metrics_files(root: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(root)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            metrics_files(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "metrics.csv") {
            out.push(p);
        }
    }
    Ok(())
}

fn report(dir: &Path, metrics: &Path) -> CliResult<Vec<MetricsRow>> {
    let mut files = Vec::new();
    metrics_files(metrics, &mut files).map_err(|e| Failure::Usage(format!("cannot scan {}: {e}", metrics.display())))?;
    let mut rows = Vec::new();
    for f in files.iter().filter(|f| !f.starts_with(dir)) {
        rows.extend(read_metrics(fs::File::open(f)?)?);
    }
    let rep = emit_report(&rows)?;
    for (name, text) in rep.tables.iter().chain(&rep.plots) {
        fs::write(dir.join(name), text)?;
    }
    info!("report from {} files, {} rows", files.len(), rows.len());
    Ok(rows)
}

fn selftest() -> CliResult<()> {
    let checks = run_selftest();
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    match checks.iter().filter(|c| !c.passed).count() {
        0 => Ok(()),
        n => Err(Failure::Runtime(format!("{n} selftest checks failed"))),
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    if let Command::Selftest = cli.command {
        return selftest();
    }
    let cfg = resolve_config(cli)?;
    let dir = run_dir(&cfg, &cli.command);
    fs::create_dir_all(&dir)?;
    write_stamps(&dir, &cfg, &cli.command)?;
    let rows = match &cli.command {
        Command::GenData { views } => gen_data(&cfg, &dir, *views)?,
        Command::Train { views, checkpoint_every } => train(&cfg, &dir, *views, *checkpoint_every)?,
        Command::Eval { checkpoint } => eval(&cfg, checkpoint)?,
        Command::Ablate => ablate(&cfg, &dir)?,
        Command::FusionAblate => fusion_ablation(&cfg)?,
        Command::DepthProbe { checkpoint } => probe(&cfg, &dir, checkpoint.as_deref())?,
        Command::ExportGates { checkpoint } => export_gates(&cfg, &dir, checkpoint.as_deref())?,
        Command::Report { metrics } => report(&dir, metrics)?,
        Command::Selftest => unreachable!("handled above"),
    };
    write_rows(&dir, "metrics.csv", &rows)?;
    println!("{}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info })
        .parse_default_env()
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
