//! Command-line front end. Every subcommand writes machine-readable
//! `key,value` or CSV lines to stdout and returns an exit code:
//! 0 success, 1 usage, 2 data, 3 training, 4 I/O.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{parse_config, Config};
use crate::data::csv_io::{atomic_write, load_dir, write_dataset, write_predictions};
use crate::data::synthetic::generate_synthetic;
use crate::data::Split;
use crate::error::KgcmError;
use crate::eval::{ablation_csv, count_inversions, evaluate, render_table, run_ablation, summarize};
use crate::gradcheck;
use crate::pipeline::{fit_stages, StageSelection};
use crate::serialize::{load_model, save_model, structure_csv};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_TRAINING: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "kgcm", version, about = "Knowledge-guided cross-modal traffic demand forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic benchmark (demand.csv, local_text.csv, global_text.csv).
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and print `stage,epoch,loss` per epoch.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        stage: StageArg,
        /// Model file to continue from (required for `--stage 2`).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a model and write the metric report.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        mape_floor: f64,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Write per-point forecasts.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Train and score the six cumulative variants over several seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// First seed; seeds are `seed..seed + seeds`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Export the frozen relation matrix of a model as a `d x d` CSV.
    Structure {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare tape gradients against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Failure of one invocation: exit code plus message.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<KgcmError> for CliError {
    fn from(e: KgcmError) -> Self {
        let code = match &e {
            KgcmError::Config(_) => EXIT_USAGE,
            KgcmError::Io { .. } => EXIT_IO,
            KgcmError::Training(_) | KgcmError::NonFinite { .. } | KgcmError::Contract { .. } => EXIT_TRAINING,
            KgcmError::Shape { .. }
            | KgcmError::Format(_)
            | KgcmError::Data(_)
            | KgcmError::MissingEmbedding(_)
            | KgcmError::Metric(_) => EXIT_DATA,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult = std::result::Result<(), CliError>;

fn out_err(e: std::io::Error) -> CliError {
    CliError {
        code: EXIT_IO,
        message: format!("writing to stdout: {e}"),
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<Config, KgcmError> {
    let mut cfg = match path {
        Some(p) => parse_config(p)?,
        None => Config::default(),
    };
    cfg.resolve_seeds(seed)?;
    Ok(cfg)
}

/// Parses `args` (including the program name) and runs the command.
/// Standard output goes to `out`, diagnostics to stderr.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn execute(command: Command, out: &mut dyn Write) -> CliResult {
    match command {
        Command::Generate { config, out: dir, seed } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let ds = generate_synthetic(&cfg.generator)?;
            write_dataset(&ds, &dir)?;
            writeln!(out, "regions,{}\nrows,{}", ds.regions.len(), ds.num_rows()).map_err(out_err)?;
        }
        Command::Train {
            config,
            data,
            out: path,
            stage,
            init,
            seed,
        } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let stages = match stage {
                StageArg::One => StageSelection::One,
                StageArg::Two => StageSelection::Two,
                StageArg::Both => StageSelection::Both,
            };
            if matches!(stages, StageSelection::Two) && init.is_none() {
                return Err(CliError {
                    code: EXIT_USAGE,
                    message: "--stage 2 needs --init with a model trained by stage 1".into(),
                });
            }
            let init = init.as_deref().map(load_model).transpose()?;
            let ds = load_dir(&data)?;
            writeln!(out, "stage,epoch,loss").map_err(out_err)?;
            let mut io_error = None;
            let model = fit_stages(&ds, &cfg.train, stages, init, &mut |s, e, l| {
                if let Err(err) = writeln!(out, "{},{e},{l:.17e}", s as u8) {
                    io_error.get_or_insert(err);
                }
            })?;
            if let Some(e) = io_error {
                return Err(out_err(e));
            }
            save_model(&model, &path)?;
        }
        Command::Evaluate {
            model,
            data,
            out: path,
            mape_floor,
            split,
        } => {
            if mape_floor.is_nan() || mape_floor <= 0.0 {
                return Err(CliError {
                    code: EXIT_USAGE,
                    message: format!("--mape-floor must be positive, got {mape_floor}"),
                });
            }
            let model = load_model(&model)?;
            let ds = load_dir(&data)?;
            let report = evaluate(&model, &ds, split.into(), mape_floor)?;
            atomic_write(&path, report.metrics_csv().as_bytes())?;
            let m = &report.overall;
            writeln!(
                out,
                "mape_percent,{}\nmae,{}\nrmse,{}\nn_points,{}\nn_floored,{}",
                m.mape_percent, m.mae, m.rmse, m.n_points, m.n_floored
            )
            .map_err(out_err)?;
        }
        Command::Predict {
            model,
            data,
            out: path,
            split,
        } => {
            let model = load_model(&model)?;
            let ds = load_dir(&data)?;
            let report = evaluate(&model, &ds, split.into(), 1.0)?;
            write_predictions(&report.points, &path)?;
            writeln!(out, "rows,{}", report.points.len()).map_err(out_err)?;
        }
        Command::Ablate {
            config,
            data,
            seeds,
            out: path,
            jobs,
            seed,
        } => {
            if seeds == 0 || jobs == 0 {
                return Err(CliError {
                    code: EXIT_USAGE,
                    message: "--seeds and --jobs must be at least 1".into(),
                });
            }
            let cfg = load_config(config.as_deref(), seed)?;
            let ds = load_dir(&data)?;
            let base = cfg.train.seed;
            let seed_list: Vec<u64> = (base..base + seeds).collect();
            let runs = run_ablation(&ds, &cfg.train, &seed_list, jobs, cfg.mape_floor)?;
            atomic_write(&path, ablation_csv(&runs).as_bytes())?;
            let summary = summarize(&runs);
            write!(out, "{}", render_table(&summary)).map_err(out_err)?;
            writeln!(out, "inversions,{}", count_inversions(&summary)).map_err(out_err)?;
        }
        Command::Structure { model, out: path } => {
            let model = load_model(&model)?;
            let s = model.structure.as_ref().ok_or_else(|| CliError {
                code: EXIT_DATA,
                message: "model has no frozen relation matrix (stage 1 did not run)".into(),
            })?;
            atomic_write(&path, structure_csv(s.matrix()).as_bytes())?;
            writeln!(out, "dim,{}\nprovenance,{}", s.dim(), s.provenance()).map_err(out_err)?;
        }
        Command::Gradcheck { tolerance, seed } => {
            let rows = gradcheck::suite(seed)?;
            writeln!(out, "op,max_rel_error,status").map_err(out_err)?;
            let mut failed = Vec::new();
            for r in &rows {
                let ok = r.passes(tolerance);
                writeln!(out, "{},{:.6e},{}", r.op, r.max_rel_error, if ok { "pass" } else { "fail" })
                    .map_err(out_err)?;
                if !ok {
                    failed.push(r.op.clone());
                }
            }
            if !failed.is_empty() {
                return Err(CliError {
                    code: EXIT_TRAINING,
                    message: format!("gradient check above {tolerance:e} for: {}", failed.join(", ")),
                });
            }
        }
    }
    Ok(())
}
