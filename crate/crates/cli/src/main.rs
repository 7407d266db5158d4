use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use crossview::association::{build_training_sets, AssociationConfig, StudentTier};
use crossview::config::{ConfigError, PipelineConfig};
use crossview::io;
use crossview::labels::assign_tiers;
use crossview::pipeline::{
    self, Artifacts, PipelineError, SetsManifest, Stage, Variant,
};
use crossview::trainer::{ConsistencyForm, LossSchedule, ToyModelParams, TrainConfig};

const ARTIFACTS_ENV: &str = "CROSSVIEW_ARTIFACTS";

#[derive(Parser)]
#[command(name = "crossview", version, about = "Cross-camera pseudo-label pipeline on a synthetic multi-camera scene")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene: calibration, detections and ground truth.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stamp confident/uncertain tiers on a detections directory.
    SplitLabels {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        t_cls: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the cross-camera pair set and confident label set for one camera.
    Associate(AssociateArgs),
    /// Two-phase training from a training-sets manifest.
    Train(TrainArgs),
    /// Evaluate an artifacts directory against ground truth.
    Eval {
        /// Artifacts root holding labels, sets and trained params.
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the summary and CSV tables for an evaluated artifacts directory.
    Report {
        #[arg(long)]
        artifacts: Option<PathBuf>,
    },
    /// Run every stage.
    Run(RunArgs),
}

#[derive(Args)]
struct AssociateArgs {
    #[arg(long)]
    calib: PathBuf,
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    student_cam: String,
    #[arg(long, default_value_t = 0.8)]
    t_cls: f64,
    #[arg(long, default_value_t = 6.0)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.6)]
    tau: f64,
    #[arg(long, default_value_t = 4)]
    horizon: usize,
    #[arg(long, default_value_t = 0)]
    window: u64,
    /// Student tier routing: uncertain, confident or both.
    #[arg(long, default_value = "uncertain", value_parser = parse_tier)]
    student_tier: StudentTier,
    /// Frame range `start..end`; defaults to every frame.
    #[arg(long, value_parser = parse_range)]
    frames: Option<std::ops::Range<u64>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    sets: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs_p1: usize,
    #[arg(long, default_value_t = 30)]
    epochs_p2: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    hidden: usize,
    /// Number of classes including background.
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long)]
    no_phase1: bool,
    #[arg(long)]
    symmetric: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    t_cls: Option<f64>,
    /// Skip the consistency phase.
    #[arg(long)]
    no_phase1: bool,
    /// Route confident student labels into the cross-camera pairs.
    #[arg(long)]
    train_backbone_with_confident: bool,
    /// Rerun every stage even if its outputs are current.
    #[arg(long)]
    force: bool,
}

fn parse_tier(s: &str) -> Result<StudentTier, String> {
    match s {
        "uncertain" => Ok(StudentTier::Uncertain),
        "confident" => Ok(StudentTier::Confident),
        "both" => Ok(StudentTier::Both),
        _ => Err(format!("unknown tier {s}")),
    }
}

fn parse_range(s: &str) -> Result<std::ops::Range<u64>, String> {
    let (a, b) = s.split_once("..").ok_or("expected start..end")?;
    let a: u64 = a.parse().map_err(|e| format!("{e}"))?;
    let b: u64 = b.parse().map_err(|e| format!("{e}"))?;
    if b < a {
        return Err("range end before start".into());
    }
    Ok(a..b)
}

fn artifacts_root(explicit: Option<PathBuf>) -> PathBuf {
    explicit
        .or_else(|| std::env::var_os(ARTIFACTS_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("artifacts"))
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig, PipelineError> {
    match path {
        None => Ok(PipelineConfig::default()),
        Some(p) => {
            let text = io::read_string(p).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            Ok(PipelineConfig::from_json(&text)?)
        }
    }
}

fn stage_err<E: std::fmt::Display>(stage: Stage) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        message: e.to_string(),
    }
}

fn associate(args: AssociateArgs) -> Result<(), PipelineError> {
    let st = Stage::Associate;
    let cameras = io::read_calib(&args.calib).map_err(stage_err(st))?;
    let mut labels = io::read_detections(&args.detections, None).map_err(stage_err(st))?;
    for frames in labels.values_mut() {
        for dets in frames.iter_mut() {
            assign_tiers(dets, args.t_cls).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
    }
    let n = labels.values().map(Vec::len).max().unwrap_or(0) as u64;
    let frames = args.frames.unwrap_or(0..n);
    let config = AssociationConfig {
        epsilon: args.epsilon,
        tau: args.tau,
        horizon: args.horizon,
        window: args.window,
        student_tier: args.student_tier,
        ..AssociationConfig::default()
    };
    let sets = build_training_sets(&args.student_cam, &labels, &cameras, &config, frames.clone()).map_err(stage_err(st))?;
    let m = pipeline::write_training_sets(&args.out, &sets, args.tau, frames, None).map_err(stage_err(st))?;
    println!(
        "{}: {} pairs, {} confident labels, pruning factor {:.2}",
        m.student_cam, m.n_pairs, m.n_cs_labels, m.pruning_factor
    );
    for w in &m.warnings {
        println!("warning: {w}");
    }
    Ok(())
}

fn train(args: TrainArgs) -> Result<(), PipelineError> {
    let sets_dir = args.sets.parent().unwrap_or(Path::new(".")).to_path_buf();
    let manifest: SetsManifest = io::read_json(&args.sets).map_err(stage_err(Stage::Train))?;
    let first: Vec<crossview::labels::PseudoLabel> =
        io::read_jsonl(&sets_dir.join(&manifest.cs_labels)).map_err(stage_err(Stage::Train))?;
    let d_in = first.first().map(|l| l.embedding.len()).ok_or_else(|| PipelineError::Stage {
        stage: Stage::Train,
        message: "no confident labels in training sets".into(),
    })?;
    let config = TrainConfig {
        lr: args.lr,
        batch_size: args.batch,
        schedule: LossSchedule {
            epochs_phase1: args.epochs_p1,
            epochs_phase2: args.epochs_p2,
        },
        consistency: if args.symmetric {
            ConsistencyForm::Symmetric
        } else {
            ConsistencyForm::Literal
        },
        skip_phase1: args.no_phase1,
    };
    config.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let init = ToyModelParams::random(d_in, args.hidden, args.classes, 1.0, args.seed);
    let out = pipeline::train_variant(&sets_dir, &args.out, Variant::Full, &config, &init, args.seed)?;
    if let (Some(a), Some(b)) = (out.initial_consistency, out.final_consistency()) {
        println!("consistency loss {a:.6} -> {b:.6}");
    }
    for w in &out.warnings {
        println!("warning: {w}");
    }
    Ok(())
}

fn run(args: RunArgs) -> Result<(), PipelineError> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(t) = args.tau {
        config.association.tau = t;
        config.tau_selection.enabled = false;
    }
    if let Some(e) = args.epsilon {
        config.association.epsilon = e;
    }
    if let Some(t) = args.t_cls {
        config.t_cls = t;
    }
    if args.no_phase1 {
        config.train.skip_phase1 = true;
    }
    if args.train_backbone_with_confident {
        config.association.student_tier = StudentTier::Confident;
    }
    let art = Artifacts::new(artifacts_root(args.out));
    let report = pipeline::run(&config, &art, args.force)?;
    let s = &report.summary;
    println!(
        "tau {} | pruning factor {:.2} | association f1 {:.4} | AP@0.8 {:.4}",
        s.tau, s.pruning_factor, s.association.f1, s.ap_at_08
    );
    println!("artifacts in {}", art.root.display());
    Ok(())
}

fn dispatch(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Simulate { config, seed, out } => {
            let config = load_config(config.as_deref())?;
            let meta = pipeline::simulate_to(&out, &config.scene, seed.unwrap_or(config.seed))?;
            println!("{} frames, cameras {}", meta.n_frames, meta.cameras.join(", "));
            Ok(())
        }
        Command::SplitLabels { detections, t_cls, out } => {
            crossview::labels::check_threshold(t_cls).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            let streams = pipeline::split_labels_dir(&detections, &out, t_cls)?;
            println!("tiered {} cameras", streams.len());
            Ok(())
        }
        Command::Associate(args) => associate(args),
        Command::Train(args) => train(args),
        Command::Eval { pred, gt, out } => {
            let art = Artifacts::new(artifacts_root(pred));
            let config = load_config(Some(&art.config()))?;
            let gt = gt.unwrap_or_else(|| art.gt());
            let report = pipeline::eval_stage(&config, &art, &gt)?;
            if let Some(out) = out {
                io::write_json(&out, &report).map_err(stage_err(Stage::Eval))?;
            }
            println!("association f1 {:.4}", report.summary.association.f1);
            Ok(())
        }
        Command::Report { artifacts } => {
            let art = Artifacts::new(artifacts_root(artifacts));
            print!("{}", pipeline::report_stage(&art)?);
            Ok(())
        }
        Command::Run(args) => run(args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
