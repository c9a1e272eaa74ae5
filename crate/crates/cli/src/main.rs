use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use coeff_core::data::{synthetic_dataset, write_dataset};
use coeff_core::heads::HeadKind;
use coeff_core::parallel::Execution;
use coeff_core::pipeline::{self, RunConfig};
use coeff_core::train::{EncoderMode, GradCheckOptions, PoolingMode};

/// Tolerance a gradient check must beat.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "coeff",
    version,
    about = "Coulombic efficiency regression for electrolyte formulations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate and de-duplicate a dataset, writing the cleaned copy.
    Ingest {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes history.csv and checkpoint.bin.
    Train(RunArgs),
    /// Score a checkpoint on a dataset and write parity data.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Parity CSV path (id,actual_lce,predicted_lce).
        #[arg(long)]
        out: Option<PathBuf>,
        /// CEMB file overriding the one recorded in the checkpoint.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        sequential: bool,
    },
    /// Train heads over a depth by width grid.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        depths: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        widths: Vec<usize>,
        #[arg(long, value_enum)]
        head: HeadArg,
    },
    /// LCE box-plot statistics grouped by component count.
    Boxplot {
        #[arg(long)]
        data: PathBuf,
        /// Output CSV; printed to standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients of a fresh model.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Perturb one analytic gradient; the check must then fail.
        #[arg(long)]
        corrupt: bool,
    },
    /// Write a synthetic dataset for smoke runs.
    Synth {
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Config file plus overrides; flags win over the file.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long, value_enum)]
    pooling: Option<PoolingArg>,
    #[arg(long, value_enum)]
    encoder_mode: Option<EncoderModeArg>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Run on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolingArg {
    Cido,
    SepJoin,
}

#[derive(Clone, Copy, ValueEnum)]
enum EncoderModeArg {
    Frozen,
    Finetune,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    Mlp,
    Kan,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        let t = &mut cfg.train;
        if let Some(e) = self.epochs {
            t.epochs = e;
        }
        if let Some(s) = self.seed {
            t.seed = s;
        }
        if let Some(lr) = self.learning_rate {
            t.learning_rate = lr;
        }
        if let Some(p) = self.pooling {
            t.pooling_mode = match p {
                PoolingArg::Cido => PoolingMode::Cido,
                PoolingArg::SepJoin => PoolingMode::SepJoin,
            };
        }
        if let Some(m) = self.encoder_mode {
            t.encoder_mode = match m {
                EncoderModeArg::Frozen => EncoderMode::Frozen,
                EncoderModeArg::Finetune => EncoderMode::Finetune,
            };
        }
        if self.sequential {
            t.execution = Execution::Sequential;
        }
        if let Some(p) = &self.embeddings {
            cfg.embeddings = Some(p.clone());
        }
        if let Some(p) = &self.output_dir {
            cfg.output_dir = p.clone();
        }
        Ok(cfg)
    }
}

/// Raised when a gradient check exceeds its tolerance.
#[derive(Debug)]
struct GradcheckFailed(f64);

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "gradient check failed: max relative error {:e} >= {GRADCHECK_TOLERANCE:e}",
            self.0
        )
    }
}

impl std::error::Error for GradcheckFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    use coeff_core::Error as E;
    if err.downcast_ref::<GradcheckFailed>().is_some() {
        return 5;
    }
    match err.downcast_ref::<E>() {
        Some(E::MissingEmbedding(_) | E::Dimension(_)) => 3,
        Some(E::NonFinite(_)) => 4,
        Some(_) => 2,
        None => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Ingest { data, out } => {
            let r = pipeline::run_ingest(&data, &out)?;
            for rm in &r.removals {
                writeln!(
                    stdout,
                    "removed {} (duplicate of {})",
                    rm.id, rm.duplicate_of
                )?;
            }
            writeln!(
                stdout,
                "read {} formulations, kept {}, removed {}",
                r.input,
                r.kept,
                r.removals.len()
            )?;
        }
        Command::Train(args) => {
            let cfg = args.load()?;
            let s = pipeline::run_train(&cfg)?;
            writeln!(stdout, "history: {}", s.history.display())?;
            writeln!(stdout, "checkpoint: {}", s.checkpoint.display())?;
            let test = s
                .test_rmse
                .map_or_else(|| "n/a".to_string(), |r| format!("{r:.6}"));
            writeln!(
                stdout,
                "best epoch {} of {}: val loss {:.6}, test rmse {test}",
                s.best_epoch, s.epochs, s.best_val_loss
            )?;
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            embeddings,
            sequential,
        } => {
            let exec = if sequential {
                Execution::Sequential
            } else {
                Execution::Parallel
            };
            let s = pipeline::run_eval(
                &checkpoint,
                &data,
                out.as_deref(),
                embeddings.as_deref(),
                exec,
            )?;
            writeln!(stdout, "rmse {:.6} over {} formulations", s.rmse, s.rows)?;
        }
        Command::Sweep {
            run,
            depths,
            widths,
            head,
        } => {
            let cfg = run.load()?;
            let kind = match head {
                HeadArg::Mlp => HeadKind::Mlp,
                HeadArg::Kan => HeadKind::Kan,
            };
            let rows = pipeline::run_sweep(&cfg, kind, &depths, &widths)?;
            coeff_core::train::write_sweep_csv(&rows, &mut stdout)?;
        }
        Command::Boxplot { data, out } => {
            let stats = pipeline::run_boxplot(&data, out.as_deref())?;
            if out.is_none() {
                coeff_core::data::write_boxplot_csv(&stats, &mut stdout)?;
            }
        }
        Command::Gradcheck { config, corrupt } => {
            let cfg = config.as_deref().map(RunConfig::load).transpose()?;
            let opts = GradCheckOptions {
                corrupt,
                ..Default::default()
            };
            let r = pipeline::run_gradcheck(cfg.as_ref(), &opts)?;
            writeln!(stdout, "precision: f64")?;
            writeln!(stdout, "checked {} gradient entries", r.checked)?;
            if let Some((name, i)) = &r.worst {
                writeln!(stdout, "worst entry: {name}[{i}]")?;
            }
            writeln!(stdout, "max relative error {:e}", r.max_rel_error)?;
            if !r.passes(GRADCHECK_TOLERANCE) {
                return Err(GradcheckFailed(r.max_rel_error).into());
            }
            writeln!(stdout, "PASS")?;
        }
        Command::Synth { n, seed, out } => {
            let d = synthetic_dataset(n, seed);
            write_dataset(&d, &out).with_context(|| format!("writing {}", out.display()))?;
            writeln!(
                stdout,
                "wrote {n} synthetic formulations to {}",
                out.display()
            )?;
        }
    }
    Ok(())
}

/// The error chain joined by `: `, skipping causes already spelled out
/// by the message above them.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
