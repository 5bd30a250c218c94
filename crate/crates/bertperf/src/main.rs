//! Command-line interface over the performance model: iteration breakdowns,
//! hyperparameter sweeps, what-if transform pricing, optimizer verification,
//! and raw graph dumps.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bertperf::config::{parse_config, HardwareSpec, ModelConfig, ParallelismConfig};
use bertperf::lambref;
use bertperf::opgraph::{build_iteration, dump_graph};
use bertperf::parallel::dump_schedule;
use bertperf::report::{self, EmitFormat, EmitRow, SweepAxis};
use bertperf::whatif;

#[derive(Parser)]
#[command(
    name = "bertperf",
    version,
    about = "Analytical performance model for BERT-style transformer training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cost one training iteration and print its runtime breakdown.
    Analyze {
        /// Path to a JSON config document.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's numeric mode (fp32 | mixed).
        #[arg(long)]
        precision: Option<String>,
        /// Output format (json | csv).
        #[arg(long, default_value = "json")]
        format: String,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the costed schedule as JSON lines.
        #[arg(long)]
        schedule_out: Option<PathBuf>,
    },
    /// Recompute the breakdown across one configuration axis.
    Sweep {
        /// Path to a JSON config document.
        #[arg(long)]
        config: PathBuf,
        /// batch_size | seq_len | hidden_dim | num_layers | model_degree |
        /// data_degree | precision
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long)]
        values: String,
        /// Output format (json | csv).
        #[arg(long, default_value = "csv")]
        format: String,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Price a software optimization against the plain iteration.
    Whatif {
        /// Path to a JSON config document.
        #[arg(long)]
        config: PathBuf,
        /// fuse-linear | fuse-elementwise | microbatch:<k>
        #[arg(long)]
        transform: String,
        /// Write the delta report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the staged LAMB update against the single-pass reference.
    LambVerify {
        /// Largest random parameter-bucket size.
        #[arg(long, default_value_t = 4096)]
        elements: usize,
        /// Randomized trials to run.
        #[arg(long, default_value_t = 1000)]
        trials: u64,
        /// RNG seed; runs are deterministic per seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Largest acceptable elementwise deviation.
        #[arg(long, default_value_t = 1e-12)]
        tolerance: f64,
    },
    /// Print every op of one iteration as JSON lines.
    DumpGraph {
        /// Path to a JSON config document.
        #[arg(long)]
        config: PathBuf,
        /// Write the dump here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Exit status contract: 0 success, 1 verification failure, 2 config or
/// I/O error (clap uses 2 for usage errors as well).
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(err: impl std::fmt::Display) -> Self {
        Failure {
            code: 2,
            message: err.to_string(),
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}

fn load_config(path: &Path) -> Result<(ModelConfig, HardwareSpec, ParallelismConfig), Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    parse_config(&text).map_err(Failure::config)
}

fn write_out(target: Option<&Path>, content: &str) -> Result<(), Failure> {
    match target {
        Some(path) => fs::write(path, content)
            .map_err(|e| Failure::config(format!("{}: {e}", path.display()))),
        None => match io::stdout().lock().write_all(content.as_bytes()) {
            // A downstream reader hanging up (e.g. `| head`) is not an error.
            Err(e) if e.kind() != io::ErrorKind::BrokenPipe => {
                Err(Failure::config(format!("stdout: {e}")))
            }
            _ => Ok(()),
        },
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Analyze {
            config,
            precision,
            format,
            out,
            schedule_out,
        } => {
            let (mut model, hw, par) = load_config(&config)?;
            if let Some(raw) = precision {
                model.precision = raw.parse().map_err(Failure::config)?;
            }
            let format: EmitFormat = format.parse().map_err(Failure::config)?;
            let analysis = report::run_analysis(&model, &par, &hw).map_err(Failure::config)?;
            if let Some(path) = &schedule_out {
                write_out(Some(path), &dump_schedule(&analysis.schedule))?;
            }
            let row = EmitRow {
                labels: Default::default(),
                breakdown: analysis.breakdown,
            };
            write_out(out.as_deref(), &report::emit(&[row], format))
        }
        Command::Sweep {
            config,
            axis,
            values,
            format,
            out,
        } => {
            let (model, hw, par) = load_config(&config)?;
            let axis: SweepAxis = axis.parse().map_err(Failure::config)?;
            let format: EmitFormat = format.parse().map_err(Failure::config)?;
            let values: Vec<&str> = values
                .split(',')
                .map(str::trim)
                .filter(|v| !v.is_empty())
                .collect();
            if values.is_empty() {
                return Err(Failure::config("no sweep values given"));
            }
            let rows = report::sweep(axis, &values, &model, &par, &hw);
            let mut emitted = Vec::new();
            for row in rows {
                match row.outcome {
                    Ok(breakdown) => emitted.push(EmitRow {
                        labels: [(axis.name().to_string(), row.value)].into(),
                        breakdown,
                    }),
                    Err(err) => eprintln!("{} = {}: {err}", axis.name(), row.value),
                }
            }
            if emitted.is_empty() {
                return Err(Failure::config("every sweep value failed"));
            }
            write_out(out.as_deref(), &report::emit(&emitted, format))
        }
        Command::Whatif {
            config,
            transform,
            out,
        } => {
            let (model, hw, _) = load_config(&config)?;
            let baseline;
            let variant;
            if transform == "fuse-linear" {
                baseline = build_iteration(&model);
                variant = whatif::fuse_linear_gemms(&baseline).map_err(Failure::config)?;
            } else if transform == "fuse-elementwise" {
                let fused = build_iteration(&model);
                baseline = whatif::expand_elementwise_groups(&fused);
                variant = fused;
            } else if let Some(raw) = transform.strip_prefix("microbatch:") {
                let k: u64 = raw
                    .parse()
                    .map_err(|_| Failure::config(format!("`{raw}` is not a micro-batch count")))?;
                baseline = build_iteration(&model);
                variant = whatif::apply_microbatching(&model, k).map_err(Failure::config)?;
            } else {
                return Err(Failure::config(format!(
                    "`{transform}` is not one of fuse-linear, fuse-elementwise, microbatch:<k>"
                )));
            }
            let delta = whatif::compare(&baseline, &variant, &hw).map_err(Failure::config)?;
            let mut text = serde_json::to_string_pretty(&delta).expect("report serializes");
            text.push('\n');
            write_out(out.as_deref(), &text)
        }
        Command::LambVerify {
            elements,
            trials,
            seed,
            tolerance,
        } => {
            let report = lambref::run_verification(elements, trials, seed, tolerance)
                .map_err(Failure::config)?;
            write_out(
                None,
                &format!(
                    "lamb verification: {} trials, max |error| {:e} (tolerance {:e}): {}\n",
                    report.trials,
                    report.max_abs_error,
                    report.tolerance,
                    if report.passed() { "PASS" } else { "FAIL" }
                ),
            )?;
            match report.first_failure {
                None => Ok(()),
                Some(case) => Err(Failure {
                    code: 1,
                    message: format!(
                        "first failing case: trial {} ({} elements), |error| {:e}",
                        case.trial, case.elements, case.abs_error
                    ),
                }),
            }
        }
        Command::DumpGraph { config, out } => {
            let (model, _, _) = load_config(&config)?;
            write_out(out.as_deref(), &dump_graph(&build_iteration(&model)))
        }
    }
}
