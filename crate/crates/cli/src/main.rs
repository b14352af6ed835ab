//! `fairpda` command-line front end.
//!
//! Subcommands run the pipeline stages `synth → prep → split → train → eval
//! → report`. Settings come from an optional TOML config; flags override the
//! file, which overrides built-in defaults.

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use fairpda::config::RunConfig;
use fairpda::objectives::{AlignMode, LossMode};
use fairpda::trainer::ProtocolMode;

#[derive(Parser, Debug)]
#[command(name = "fairpda", version, about = "Fairness-aware partial-label domain adaptation for voice classification")]
struct Cli {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    common: CommonFlags,

    /// Log progress (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct CommonFlags {
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Feature cache directory (the FAIRPDA_CACHE_ROOT variable also sets it).
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    synth_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic benchmark (WAVs and manifests).
    Synth,
    /// Preprocess every manifest recording into the feature cache.
    Prep,
    /// Write the patient-level split plan.
    Split {
        /// Output file (default: <output_dir>/split_plan.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every fold; writes the run directory.
    Train(TrainFlags),
    /// Re-evaluate the checkpoints of a run directory.
    Eval {
        /// Run directory written by `train` (default: the configured output_dir).
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Evaluate a single checkpoint instead of every fold.
        #[arg(long, requires = "fold")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        fold: Option<usize>,
        /// Report file (default: <run_dir>/eval_metrics.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Comparison table, paired tests and loss-curve plots over runs.
    Report {
        /// Run directories; the first is the reference for paired tests
        /// unless --reference names another.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        reference: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AlignArg {
    None,
    Dann,
    Cdan,
    PartialCdan,
    Coral,
}

#[derive(Args, Debug, Default)]
struct TrainFlags {
    #[arg(long)]
    run_name: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_folds: Option<usize>,
    #[arg(long, value_enum)]
    align_mode: Option<AlignArg>,
    /// Plain cross-entropy instead of patient-normalised cross-entropy.
    #[arg(long)]
    plain_ce: bool,
    /// Domain generalisation (no target data during training).
    #[arg(long)]
    dg: bool,
    #[arg(long)]
    no_warmup: bool,
    #[arg(long)]
    no_mixstyle: bool,
    #[arg(long)]
    no_fairness: bool,
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => {
            let mut c = RunConfig::default();
            c.resolve_paths(&std::env::current_dir().context("working directory")?);
            c
        }
    };
    cfg.apply_env();
    let f = &cli.common;
    if let Some(s) = f.seed {
        cfg.seed = s;
    }
    if let Some(p) = &f.output_dir {
        cfg.output_dir = p.clone();
    }
    if let Some(p) = &f.cache_dir {
        cfg.prep.cache_dir = p.clone();
    }
    if let Some(p) = &f.synth_dir {
        cfg.data.synth_dir = p.clone();
    }
    if let Command::Train(t) = &cli.command {
        apply_train_flags(&mut cfg, t);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_train_flags(cfg: &mut RunConfig, t: &TrainFlags) {
    if let Some(v) = &t.run_name {
        cfg.run_name = v.clone();
    }
    if let Some(v) = t.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = t.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = t.max_folds {
        cfg.eval.max_folds = Some(v);
    }
    if let Some(a) = t.align_mode {
        cfg.train.align_mode = match a {
            AlignArg::None => AlignMode::None,
            AlignArg::Dann => AlignMode::Dann,
            AlignArg::Cdan => AlignMode::Cdan,
            AlignArg::PartialCdan => AlignMode::PartialCdan,
            AlignArg::Coral => AlignMode::Coral,
        };
    }
    if t.plain_ce {
        cfg.train.loss_mode = LossMode::Ce;
    }
    if t.dg {
        cfg.train.mode = ProtocolMode::Dg;
    }
    cfg.train.ablations.no_warmup |= t.no_warmup;
    cfg.train.ablations.no_mixstyle |= t.no_mixstyle;
    cfg.train.ablations.no_fairness |= t.no_fairness;
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = load_config(cli).context("stage config")?;
    match &cli.command {
        Command::Synth => commands::synth(&cfg).context("stage synth"),
        Command::Prep => commands::prep(&cfg).context("stage prep"),
        Command::Split { out } => commands::split(&cfg, out.as_deref()).context("stage split"),
        Command::Train(_) => commands::train(&cfg).context("stage train"),
        Command::Eval {
            run_dir,
            checkpoint,
            fold,
            out,
        } => {
            let run_dir = run_dir.clone().unwrap_or_else(|| cfg.output_dir.clone());
            commands::eval(&run_dir, checkpoint.as_deref(), *fold, out.as_deref()).context("stage eval")
        }
        Command::Report { runs, reference, out } => {
            commands::report(&cfg, runs, reference.as_deref(), out).context("stage report")
        }
    }
}

/// 1 validation, 2 I/O, 3 numerical abort.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<fairpda::Error>() {
            return e.exit_code() as u8;
        }
        if let Some(e) = cause.downcast_ref::<commands::StageFailure>() {
            return e.code;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
