//! Command-line driver: `train`, `trace`, `ablate` and `init-config`.
//!
//! Artifacts go to `--out`, or to `$RAVE_OUT_DIR/<command>` when the flag is
//! absent, or to `runs/<command>` otherwise.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use commands::{
    ablation_row, cmd_ablate, cmd_trace, cmd_train, form_name, location_name, stage_name,
    trace_profiles, train_and_eval, AblationRow, Grid, TrainOutcome,
};
pub use config::{EvalParams, Overrides, RunConfig, TraceParams};

use crate::attention::{GateForm, GateLocation, GateStage};
use crate::error::{RaveError, Result};
use crate::model::{AttentionVariant, Checkpoint, TaskKind};

pub const OUT_DIR_ENV: &str = "RAVE_OUT_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "rave",
    version,
    about = "Train and inspect toy models with visual-key attention gating"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint.bin, loss.csv and run.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: VariantArgs,
    },
    /// Decode prompts with attention capture and export mass curves.
    Trace {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run config or sidecar; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        prompts: Option<usize>,
        #[arg(long)]
        prompt_seed: Option<u64>,
        #[arg(long)]
        num_sys: Option<usize>,
        #[arg(long)]
        answer_len: Option<usize>,
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
    },
    /// Train and evaluate every cell of a variant grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, value_delimiter = ',')]
        locations: Vec<LocationArg>,
        #[arg(long, value_enum, value_delimiter = ',')]
        forms: Vec<FormArg>,
        #[arg(long, value_delimiter = ',')]
        head_ratios: Vec<f64>,
        #[arg(long, value_enum, value_delimiter = ',')]
        stages: Vec<StageArg>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the default run config as JSON.
    InitConfig {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct VariantArgs {
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long, value_enum)]
    location: Option<LocationArg>,
    #[arg(long, value_enum)]
    form: Option<FormArg>,
    #[arg(long)]
    head_ratio: Option<f64>,
    #[arg(long, value_enum)]
    stage: Option<StageArg>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    gate_init_std: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Parameter initialization seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Training batch seed.
    #[arg(long)]
    data_seed: Option<u64>,
}

impl From<VariantArgs> for Overrides {
    fn from(a: VariantArgs) -> Self {
        Overrides {
            variant: a.variant.map(Into::into),
            location: a.location.map(Into::into),
            form: a.form.map(Into::into),
            head_ratio: a.head_ratio,
            stage: a.stage.map(Into::into),
            gamma: a.gamma,
            gate_init_std: a.gate_init_std,
            steps: a.steps,
            lr: a.lr,
            seed: a.seed,
            data_seed: a.data_seed,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VariantArg {
    Standard,
    Rave,
}

impl From<VariantArg> for AttentionVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Standard => AttentionVariant::Standard,
            VariantArg::Rave => AttentionVariant::Rave,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LocationArg {
    Pre,
    Post,
}

impl From<LocationArg> for GateLocation {
    fn from(v: LocationArg) -> Self {
        match v {
            LocationArg::Pre => GateLocation::PreSoftmax,
            LocationArg::Post => GateLocation::PostSoftmax,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormArg {
    Add,
    Mul,
}

impl From<FormArg> for GateForm {
    fn from(v: FormArg) -> Self {
        match v {
            FormArg::Add => GateForm::Additive,
            FormArg::Mul => GateForm::Multiplicative,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StageArg {
    PrefillDecode,
    DecodeOnly,
}

impl From<StageArg> for GateStage {
    fn from(v: StageArg) -> Self {
        match v {
            StageArg::PrefillDecode => GateStage::PrefillAndDecode,
            StageArg::DecodeOnly => GateStage::DecodeOnly,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TaskArg {
    Retrieval,
    ImageIndependent,
}

impl From<TaskArg> for TaskKind {
    fn from(v: TaskArg) -> Self {
        match v {
            TaskArg::Retrieval => TaskKind::Retrieval,
            TaskArg::ImageIndependent => TaskKind::ImageIndependent,
        }
    }
}

fn out_dir(flag: Option<PathBuf>, command: &str) -> PathBuf {
    flag.unwrap_or_else(|| {
        let root =
            std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(command)
    })
}

fn or_all<T: Copy, U>(picked: Vec<T>, all: Vec<U>) -> Vec<U>
where
    U: From<T>,
{
    if picked.is_empty() {
        all
    } else {
        picked.into_iter().map(U::from).collect()
    }
}

fn load_trace_config(path: Option<&Path>, checkpoint: &Checkpoint) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig {
            model: checkpoint.spec.clone(),
            ..RunConfig::default()
        }),
    }
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            out,
            overrides,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            Overrides::from(overrides).apply(&mut cfg);
            let out = out_dir(out, "train");
            let outcome = cmd_train(&cfg, &out, |step, loss| {
                if step % 500 == 0 {
                    eprintln!("step {step}: loss {loss:.6}");
                }
            })?;
            println!(
                "trained {} steps: eval loss {:.6}, accuracy {:.4}, mean alpha_img {:.4} -> {}",
                outcome.losses.len(),
                outcome.eval.loss,
                outcome.eval.accuracy,
                outcome.eval.mean_alpha_img,
                out.display()
            );
        }
        Command::Trace {
            checkpoint,
            config,
            out,
            prompts,
            prompt_seed,
            num_sys,
            answer_len,
            task,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let mut cfg = load_trace_config(config.as_deref(), &ckpt)?;
            if let Some(v) = prompts {
                cfg.trace.num_prompts = v;
            }
            if let Some(v) = prompt_seed {
                cfg.trace.seed = v;
            }
            if let Some(v) = num_sys {
                cfg.task.num_sys = v;
            }
            if let Some(v) = answer_len {
                cfg.task.answer_len = v;
            }
            if let Some(v) = task {
                cfg.task.kind = v.into();
            }
            let out = out_dir(out, "trace");
            let profile = cmd_trace(&cfg, ckpt, &out)?;
            println!(
                "traced {} answer steps -> {}",
                profile.steps.len(),
                out.display()
            );
        }
        Command::Ablate {
            config,
            out,
            locations,
            forms,
            head_ratios,
            stages,
            steps,
            seed,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            Overrides {
                steps,
                seed,
                ..Overrides::default()
            }
            .apply(&mut cfg);
            let full = Grid::full();
            let grid = Grid {
                locations: or_all(locations, full.locations),
                forms: or_all(forms, full.forms),
                head_ratios: if head_ratios.is_empty() {
                    full.head_ratios
                } else {
                    head_ratios
                },
                stages: or_all(stages, full.stages),
            };
            let out = out_dir(out, "ablate");
            let rows = cmd_ablate(&cfg, &grid, &out, |i, n, row| {
                eprintln!("[{i}/{n}] {} {}", row.name, row.status)
            })?;
            let failed = rows.iter().filter(|r| !r.is_ok()).count();
            println!(
                "{} variants, {} failed -> {}",
                rows.len(),
                failed,
                out.display()
            );
            if failed > 0 {
                return Err(RaveError::Config(format!(
                    "{failed} of {} ablation variants failed",
                    rows.len()
                )));
            }
        }
        Command::InitConfig { out } => {
            let mut text =
                serde_json::to_string_pretty(&RunConfig::default()).expect("config serializes");
            text.push('\n');
            match out {
                Some(p) => std::fs::write(&p, text).map_err(|e| RaveError::io(&p, e))?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

/// Process entry point: parses `std::env::args`, reports errors on stderr.
pub fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
