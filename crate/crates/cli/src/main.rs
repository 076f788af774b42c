use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use redfuse_cli::commands::{self, EvalInput};
use redfuse_cli::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "redfuse",
    version,
    about = "Synthetic multimodal benchmarks: data generation, fusion + sampler training, selection, evaluation, and gradient audits"
)]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppresses progress lines.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate groups, encoder streams, instruction records, and a manifest.
    GenData,
    /// Train the sampler by distillation and the toy LM in two stages.
    Train,
    /// Apply a trained scorer to every group and report selection accuracy.
    Select {
        /// Sampler checkpoint; defaults to <out>/sampler.json.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score predictions against references and write a metric report.
    Evaluate {
        /// Plain-text predictions, one per line (with --references).
        #[arg(long, requires = "references", conflicts_with = "pairs")]
        predictions: Option<PathBuf>,
        /// Plain-text references, one per line.
        #[arg(long, requires = "predictions")]
        references: Option<PathBuf>,
        /// JSONL of {"candidate", "reference", "closed"?} rows.
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Report destination; defaults to <out>/metric_report.json.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Add-epsilon smoothing of zero-match BLEU precisions.
        #[arg(long)]
        smooth: bool,
    },
    /// Audit every analytic gradient against central differences.
    Gradcheck {
        /// Random parameter points per module.
        #[arg(long, default_value_t = redfuse::gradcheck::DEFAULT_SEEDS)]
        seeds: usize,
        /// Relative-error tolerance.
        #[arg(long, default_value_t = redfuse::gradcheck::DEFAULT_TOLERANCE)]
        tol: f64,
        /// Test hook: corrupt the named row's analytic gradient.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Print the combined artifacts of a run directory as JSON.
    Report {
        /// Run directory; defaults to the config output directory.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> redfuse::Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.paths.out_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: &Cli) -> redfuse::Result<i32> {
    match &cli.command {
        Command::GenData => {
            let config = load_config(cli)?;
            commands::cmd_gen_data(&config, cli.quiet)?;
            Ok(0)
        }
        Command::Train => {
            let config = load_config(cli)?;
            commands::cmd_train(&config, cli.quiet)?;
            Ok(0)
        }
        Command::Select { checkpoint } => {
            let config = load_config(cli)?;
            commands::cmd_select(&config, checkpoint.as_deref(), cli.quiet)?;
            Ok(0)
        }
        Command::Evaluate { predictions, references, pairs, report, smooth } => {
            let config = load_config(cli)?;
            let input = match (predictions, references, pairs) {
                (Some(p), Some(r), None) => EvalInput::Lines { predictions: p, references: r },
                (None, None, Some(path)) => EvalInput::Pairs(path),
                _ => {
                    return Err(redfuse::Error::Config(
                        "evaluate needs either --predictions with --references, or --pairs".into(),
                    ))
                }
            };
            let default_report = config.paths.out_dir.join("metric_report.json");
            let report_path = report.as_deref().unwrap_or(&default_report);
            if let Some(parent) = report_path.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)
                        .map_err(|e| redfuse::Error::Io(format!("creating {}: {e}", parent.display())))?;
                }
            }
            commands::cmd_evaluate(input, report_path, *smooth, cli.quiet)?;
            Ok(0)
        }
        Command::Gradcheck { seeds, tol, corrupt } => {
            let rows = commands::cmd_gradcheck(*seeds, *tol, corrupt.as_deref(), cli.quiet)?;
            let failed: Vec<&str> = rows
                .iter()
                .filter(|r| !r.pass)
                .map(|r| r.parameter_name.as_str())
                .collect();
            if failed.is_empty() {
                Ok(0)
            } else {
                eprintln!("gradcheck failed for: {}", failed.join(", "));
                Ok(commands::EXIT_ACCEPTANCE_FAILURE)
            }
        }
        Command::Report { dir } => {
            let config = load_config(cli)?;
            let dir = dir.clone().unwrap_or(config.paths.out_dir);
            commands::cmd_report(&dir)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(commands::exit_code(&err) as u8)
        }
    }
}
