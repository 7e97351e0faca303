//! `credit-lab`: worlds, identity sweeps, compatibility, causal checks,
//! training and heatmaps from the command line.
//!
//! Exit codes: 0 success, 1 a check failed, 2 usage, parse or input error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use credit_lab::policy::TeacherMode;
use credit_lab::report::HeatField;
use credit_lab::trainer::{Divergence, EngineKind, TrainConfig};
use credit_lab::Dims;

use commands::Status;
use config::{parse_channel, parse_dims, ChannelConfig, CompatSource, ExperimentConfig};

#[derive(Parser)]
#[command(name = "credit-lab", version, about = "Exact tabular laboratory for self-distillation credit assignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or validate world files.
    World {
        #[command(subcommand)]
        action: WorldAction,
    },
    /// Run identity check families exhaustively; exit 1 if any check fails.
    Verify(VerifyArgs),
    /// Render a reward field as an SVG heatmap.
    Heatmap(HeatmapArgs),
    /// Train a policy with GRPO or a distillation engine.
    Train(TrainArgs),
    /// Solve compatibility instances.
    Compat(CompatArgs),
    /// Run the interventional checks; exit 1 if any check fails.
    Causal(CausalArgs),
}

#[derive(Subcommand)]
enum WorldAction {
    /// Write a built-in or random world file (stdout without --out).
    Gen {
        #[arg(long, value_name = "NAME")]
        builtin: Option<String>,
        /// A random world; needs --seed.
        #[arg(long, conflicts_with = "builtin")]
        rand: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Shape of a random world as X,V,T,Z.
        #[arg(long, value_parser = parse_dims, requires = "rand")]
        dims: Option<Dims>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check every world invariant; exit 1 naming each violation.
    Validate { path: PathBuf },
}

/// Flags shared by the experiment commands; each overrides its config key.
#[derive(Args)]
struct Common {
    /// Experiment file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in world name or world file path.
    #[arg(long)]
    world: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if self.world.is_some() {
            cfg.world = self.world.clone();
        }
        cfg.seed = self.seed.or(cfg.seed);
        if self.out.is_some() {
            cfg.output_dir = self.out.clone();
        }
    }
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    /// Check family (repeatable); all families by default.
    #[arg(long)]
    family: Vec<String>,
    #[arg(long)]
    tolerance: Option<f64>,
    /// λ for the credit-sequence family (repeatable).
    #[arg(long)]
    lambda: Vec<f64>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    teacher_mode: Option<TeacherMode>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    engine: Option<EngineKind>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    contrast_count: Option<usize>,
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    ema_rate: Option<f64>,
    #[arg(long)]
    divergence: Option<Divergence>,
    #[arg(long)]
    jsd_alpha: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    teacher_mode: Option<TeacherMode>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Continue from a checkpoint; steps resume after its version.
    #[arg(long)]
    resume: Option<PathBuf>,
}

impl TrainArgs {
    fn apply(&self, t: &mut TrainConfig) {
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag { t.$field = v; })*
            };
        }
        set!(
            engine => engine,
            lambda => lambda,
            contrast_count => contrast_count,
            topk => topk,
            lr => learning_rate,
            batch_size => batch_size,
            group_size => group_size,
            steps => steps,
            ema_rate => ema_rate,
            divergence => divergence,
            jsd_alpha => jsd_alpha,
            temperature => temperature,
            teacher_mode => teacher_mode,
            checkpoint_every => checkpoint_every
        );
    }
}

#[derive(Args)]
struct CompatArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    source: Option<CompatSource>,
    /// Instances CSV for `--source file`.
    #[arg(long)]
    instances: Option<PathBuf>,
    /// Checkpoint with teacher tables for `--source learned`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    count: Option<u64>,
    #[arg(long)]
    letters: Option<usize>,
    #[arg(long)]
    feedback: Option<usize>,
    #[arg(long)]
    require_fidelity: bool,
}

#[derive(Args)]
struct CausalArgs {
    #[command(flatten)]
    common: Common,
    /// Success feedback for the one-sided witness.
    #[arg(long)]
    witness_feedback: Option<usize>,
    /// OSF channel `a:b` (binary) or `q1,…:q0,…` (repeatable).
    #[arg(long, value_parser = parse_channel)]
    channel: Vec<ChannelConfig>,
}

#[derive(Args)]
struct HeatmapArgs {
    /// A field file written by `--field-out`.
    #[arg(long, conflicts_with = "world")]
    field_file: Option<PathBuf>,
    #[arg(long)]
    world: Option<String>,
    /// Student and reference; the world's policy when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    input: usize,
    /// Realized tokens, comma-separated.
    #[arg(long, value_delimiter = ',')]
    tokens: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    feedback: usize,
    #[arg(long, default_value = "credit")]
    engine: EngineKind,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    /// Contrastive inputs, comma-separated; the full prior when omitted.
    #[arg(long, value_delimiter = ',')]
    contrast: Vec<usize>,
    #[arg(long, default_value = "exact-posterior")]
    teacher_mode: TeacherMode,
    /// Quantity to draw (repeatable): dv, s, g or credit.
    #[arg(long)]
    field: Vec<HeatField>,
    /// Draw ΔV over S.
    #[arg(long, conflicts_with = "field")]
    side_by_side: bool,
    /// Also save the computed field.
    #[arg(long)]
    field_out: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::World { action } => match action {
            WorldAction::Gen { builtin, rand, seed, dims, out } => {
                commands::world_gen(builtin.as_deref(), *rand, *seed, *dims, out.as_deref())
            }
            WorldAction::Validate { path } => commands::world_validate(path),
        },
        Command::Verify(args) => commands::verify(args),
        Command::Heatmap(args) => commands::heatmap(args),
        Command::Train(args) => commands::train(args),
        Command::Compat(args) => commands::compat(args),
        Command::Causal(args) => commands::causal(args),
    };
    match result {
        Ok(Status::Pass) => ExitCode::SUCCESS,
        Ok(Status::Fail) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
