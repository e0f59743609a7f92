use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mfaf_core::checkpoint;
use mfaf_core::commands::{self, Direction, CHECKPOINT_DIR, DEFAULT_PAD_PX};
use mfaf_core::config::RunConfig;
use mfaf_core::data::PadMode;
use mfaf_core::gradcheck::GradcheckConfig;
use mfaf_core::mfaf::Pooling;

#[derive(Parser)]
#[command(
    name = "mfaf",
    version,
    about = "Cross-view retrieval with multi-frequency attention fusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset.
    Generate(Common),
    /// Train a model, or resume one with --checkpoint.
    Train(Common),
    /// Evaluate a checkpoint in one retrieval direction.
    Evaluate(EvalArgs),
    /// Evaluate with queries shifted by padded strips of growing width.
    ShiftRobustness(ShiftArgs),
    /// Compare every analytic gradient against finite differences.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate the branch and pooling ablation cells.
    Ablate(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint directory to resume from or evaluate.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Switch off a fusion branch; may be repeated.
    #[arg(long = "disable-branch", value_enum)]
    disable_branch: Vec<BranchArg>,
    #[arg(long, value_enum)]
    pooling: Option<PoolingArg>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value = "d2s")]
    direction: DirectionArg,
}

#[derive(Args)]
struct ShiftArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value = "d2s")]
    direction: DirectionArg,
    #[arg(long = "pad-mode", value_enum, default_value = "black")]
    pad_mode: PadModeArg,
    /// Comma-separated strip widths in pixels.
    #[arg(long = "pad-px", value_delimiter = ',')]
    pad_px: Vec<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "gradcheck")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    D2s,
    S2d,
}

#[derive(Clone, Copy, ValueEnum)]
enum PadModeArg {
    Black,
    Flip,
}

#[derive(Clone, Copy, ValueEnum)]
enum BranchArg {
    Hf,
    Lf,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolingArg {
    Zpool,
    Aap,
    Ap,
    Mp,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Self {
        match d {
            DirectionArg::D2s => Direction::D2s,
            DirectionArg::S2d => Direction::S2d,
        }
    }
}

impl From<PadModeArg> for PadMode {
    fn from(m: PadModeArg) -> Self {
        match m {
            PadModeArg::Black => PadMode::Black,
            PadModeArg::Flip => PadMode::Flip,
        }
    }
}

impl From<PoolingArg> for Pooling {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::Zpool => Pooling::Zpool,
            PoolingArg::Aap => Pooling::Aap,
            PoolingArg::Ap => Pooling::Ap,
            PoolingArg::Mp => Pooling::Mp,
        }
    }
}

/// Result of a command that ran to completion.
enum Outcome {
    Ok,
    VerificationFailed(String),
}

impl Common {
    /// The configuration file if given, else the one stored in `stored`
    /// (a checkpoint), else the defaults; then the command-line overrides.
    fn resolve(&self, stored: Option<&Path>) -> Result<RunConfig> {
        let mut cfg = match (&self.config, stored) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(dir)) if dir.join("manifest.json").exists() => checkpoint::read_manifest(dir)?.config,
            _ => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        for b in &self.disable_branch {
            match b {
                BranchArg::Hf => cfg.mfaf.hf_branch = false,
                BranchArg::Lf => cfg.mfaf.lf_branch = false,
            }
        }
        if let Some(p) = self.pooling {
            cfg.mfaf.pooling = p.into();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &RunConfig) -> PathBuf {
        self.out.clone().unwrap_or_else(|| cfg.out_dir.clone())
    }

    fn checkpoint_dir(&self, cfg: &RunConfig) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT_DIR))
    }

    /// Configuration and trained model for the evaluation commands.
    fn load_model(&self) -> Result<(RunConfig, mfaf_core::train::Trainer)> {
        let probe = self.resolve(self.checkpoint.as_deref())?;
        let dir = self.checkpoint_dir(&probe);
        let cfg = if self.checkpoint.is_none() && self.config.is_none() {
            self.resolve(Some(&dir))?
        } else {
            probe
        };
        let trainer =
            checkpoint::load(&dir, Some(&cfg)).with_context(|| format!("loading checkpoint {}", dir.display()))?;
        Ok((cfg, trainer))
    }
}

fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Generate(c) => {
            let cfg = c.resolve(None)?;
            let dir = c.out.clone().unwrap_or_else(|| cfg.dataset_dir.clone());
            let s = commands::generate(&cfg, &dir)?;
            println!(
                "wrote {} images to {} (manifest {})",
                s.images,
                dir.display(),
                s.manifest_sha256
            );
        }
        Command::Train(c) => {
            let cfg = c.resolve(c.checkpoint.as_deref())?;
            let out = c.out_dir(&cfg);
            let ds = commands::load_dataset(&cfg)?;
            let s = commands::train(&cfg, &ds, &out, c.checkpoint.as_deref())?;
            match s.epochs.last() {
                Some(e) => println!(
                    "trained to epoch {} (loss {:.4}); checkpoint in {}",
                    e.epoch + 1,
                    e.loss,
                    out.join(CHECKPOINT_DIR).display()
                ),
                None => println!("nothing to train; checkpoint in {}", out.join(CHECKPOINT_DIR).display()),
            }
        }
        Command::Evaluate(a) => {
            let (cfg, trainer) = a.common.load_model()?;
            let out = a.common.out_dir(&cfg);
            let ds = commands::load_dataset(&cfg)?;
            let s = commands::evaluate(&cfg, &trainer.model, &ds, a.direction.into(), &out)?;
            println!("{}", s.report.csv_header());
            println!("{}", s.report.csv_row());
            for w in &s.report.warnings {
                log::warn!("{w}");
            }
        }
        Command::ShiftRobustness(a) => {
            let (cfg, trainer) = a.common.load_model()?;
            let out = a.common.out_dir(&cfg);
            let ds = commands::load_dataset(&cfg)?;
            let px = if a.pad_px.is_empty() {
                DEFAULT_PAD_PX.to_vec()
            } else {
                a.pad_px.clone()
            };
            let rows = commands::shift_robustness(
                &cfg,
                &trainer.model,
                &ds,
                a.direction.into(),
                a.pad_mode.into(),
                &px,
                &out,
            )?;
            println!("{}", commands::ShiftRow::CSV_HEADER);
            for r in &rows {
                println!("{}", r.csv_row());
            }
        }
        Command::Gradcheck(a) => {
            let cfg = GradcheckConfig {
                seed: a.seed,
                ..Default::default()
            };
            let report = commands::gradcheck(&cfg, &a.out)?;
            print!("{}", report.csv());
            if !report.passed() {
                return Ok(Outcome::VerificationFailed(format!(
                    "gradient check failed for: {}",
                    report.failing().join(", ")
                )));
            }
        }
        Command::Ablate(c) => {
            let cfg = c.resolve(None)?;
            let out = c.out_dir(&cfg);
            let ds = commands::load_dataset(&cfg)?;
            let rows = commands::ablation(&cfg, &ds, &out)?;
            println!("{}", commands::AblationRow::CSV_HEADER);
            for r in &rows {
                println!("{}", r.csv_row());
            }
        }
    }
    Ok(Outcome::Ok)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<mfaf_core::Error>() {
        Some(e) if !e.is_usage() => 1,
        _ => 2,
    }
}

/// The error chain joined with ": ", dropping causes already quoted by
/// the message before them.
fn describe(err: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !parts.last().is_some_and(|p| p.ends_with(&msg)) {
            parts.push(msg);
        }
    }
    parts.join(": ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::VerificationFailed(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
