//! `cdd`: train a teacher, distill a compactor student, convert it to a
//! slim network and evaluate any of the three.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cdd_core::checkpoint::Checkpoint;
use cdd_core::config::RunConfig;
use cdd_core::data::Dataset;
use cdd_core::pipeline::{self, RunDir, RunManifest};
use cdd_core::training::TrainMode;
use cdd_core::Error;
use clap::{Args, Parser, Subcommand};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_COMPAT: u8 = 4;

#[derive(Parser)]
#[command(
    name = "cdd",
    version,
    about = "Capacity dynamic distillation pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher from scratch.
    TrainTeacher(Common),
    /// Distill a compactor student from a trained teacher.
    Distill {
        #[command(flatten)]
        common: Common,
        /// Teacher checkpoint.
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long, value_parser = parse_mode, default_value = "cdd_rggr")]
        mode: TrainMode,
    },
    /// Prune and merge a trained student into a slim network.
    Convert {
        #[command(flatten)]
        common: Common,
        /// Student checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Pruning threshold on compactor row norms.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Report mAP, R1, parameters and FLOPs of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Teacher, distillation, conversion and evaluation in one go.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_mode, default_value = "cdd_rggr")]
        mode: TrainMode,
        #[arg(long)]
        lambda: Option<f64>,
    },
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML). Built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs/out")]
    out: PathBuf,
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_config(path: Option<&Path>, fallback: Option<RunConfig>) -> cdd_core::Result<RunConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            RunConfig::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
        None => Ok(fallback.unwrap_or_default()),
    }
}

fn resolve(
    common: &Common,
    fallback: Option<RunConfig>,
    lambda: Option<f64>,
) -> cdd_core::Result<RunConfig> {
    let mut run = load_config(common.config.as_deref(), fallback)?;
    if let Some(seed) = common.seed {
        run.seed = seed;
    }
    if let Some(l) = lambda {
        run.convert.lambda = l;
    }
    run.validate()?;
    Ok(run)
}

fn manifest(command: &str, common: &Common, run: &RunConfig) -> RunManifest {
    let m = RunManifest::new(command, run);
    match &common.config {
        Some(p) => m.input("config", p),
        None => m,
    }
}

fn execute(cli: Cli) -> cdd_core::Result<()> {
    match cli.command {
        Command::TrainTeacher(common) => {
            let run = resolve(&common, None, None)?;
            let data = Dataset::generate(&run.data)?;
            let mut dir = RunDir::create(&common.out, manifest("train-teacher", &common, &run))?;
            let out = pipeline::train_teacher(&run, &data, &mut dir)?;
            dir.finish()?;
            print!("{}", out.eval);
        }
        Command::Distill {
            common,
            teacher,
            mode,
        } => {
            let run = resolve(&common, None, None)?;
            let (_, t) = pipeline::load_model(&teacher)?;
            let data = Dataset::generate(&run.data)?;
            let mut dir = RunDir::create(
                &common.out,
                manifest("distill", &common, &run).input("teacher", &teacher),
            )?;
            let out = pipeline::distill(&run, &data, &t, mode, &mut dir)?;
            dir.finish()?;
            print!("{}", out.eval);
        }
        Command::Convert {
            common,
            checkpoint,
            lambda,
        } => {
            let (ckpt, student) = pipeline::load_model(&checkpoint)?;
            let run = resolve(&common, Some(ckpt.run_config()?), lambda)?;
            let mut dir = RunDir::create(
                &common.out,
                manifest("convert", &common, &run).input("checkpoint", &checkpoint),
            )?;
            let conv = pipeline::convert(&run, &student, run.convert.lambda, &mut dir)?;
            dir.finish()?;
            print!("{}", conv.report);
        }
        Command::Eval { common, checkpoint } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let model = ckpt.model()?;
            let run = resolve(&common, Some(ckpt.run_config()?), None)?;
            let mut dir = RunDir::create(
                &common.out,
                manifest("eval", &common, &run).input("checkpoint", &checkpoint),
            )?;
            let report = pipeline::eval(&run, &model, &mut dir)?;
            dir.finish()?;
            print!("{report}");
        }
        Command::Run {
            common,
            mode,
            lambda,
        } => {
            let run = resolve(&common, None, lambda)?;
            let data = Dataset::generate(&run.data)?;
            let stage = |name: &str| Common {
                config: common.config.clone(),
                seed: common.seed,
                out: common.out.join(name),
            };
            let c = stage("teacher");
            let mut dir = RunDir::create(&c.out, manifest("train-teacher", &c, &run))?;
            let teacher = pipeline::train_teacher(&run, &data, &mut dir)?;
            dir.finish()?;
            let c = stage("student");
            let mut dir = RunDir::create(&c.out, manifest("distill", &c, &run))?;
            let student = pipeline::distill(&run, &data, &teacher.model, mode, &mut dir)?;
            dir.finish()?;
            let c = stage("slim");
            let mut dir = RunDir::create(&c.out, manifest("convert", &c, &run))?;
            if mode.uses_compactors() {
                let conv = pipeline::convert(&run, &student.model, run.convert.lambda, &mut dir)?;
                let eval = pipeline::eval(&run, &conv.slim, &mut dir)?;
                dir.finish()?;
                print!("{}{eval}", conv.report);
            } else {
                dir.finish()?;
                print!("{}", student.eval);
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => EXIT_CONFIG,
        Error::NonFinite(_) => EXIT_NUMERIC,
        Error::Compat(_)
        | Error::Shape { .. }
        | Error::Conversion { .. }
        | Error::Checkpoint { .. } => EXIT_COMPAT,
        Error::GalleryCold | Error::Io(_) => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
