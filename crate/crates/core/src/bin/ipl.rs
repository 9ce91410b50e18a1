use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ipl_core::experiment::{self, ExperimentConfig, ExperimentError, GammaSource, PropositionConfig, Stage};
use ipl_core::theory;

/// Popularity-debiased recommendation experiments.
#[derive(Parser)]
#[command(name = "ipl", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` experiment config.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Config override `key=value`; may repeat, applied after the file.
    #[arg(short = 's', long = "set", global = true)]
    overrides: Vec<String>,
    /// Shorthand for `--set dataset.path=...`.
    #[arg(short, long, global = true)]
    dataset: Option<PathBuf>,
    /// Shorthand for `--set output.dir=...`.
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,
    /// Evaluate users concurrently; metric sums may differ in the last bits.
    #[arg(long, global = true)]
    parallel: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Parse the dataset and write normalized interactions and popularity tables.
    Ingest,
    /// Write the per-item stratified split.
    Split,
    /// Full run: split, train, recommend, evaluate.
    Train,
    /// Evaluate a checkpoint on the split the config reproduces.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// lambda_f sweep with a lambda_f = 0 baseline row.
    Sweep,
    /// Pareto fit of user degrees and the condition-1 bound.
    CheckProposition {
        /// `degree count` histogram instead of the dataset's training degrees.
        #[arg(long)]
        histogram: Option<PathBuf>,
        #[arg(long, default_value_t = 0.99)]
        c: f64,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long, default_value_t = 1e-10)]
        threshold: f64,
        #[arg(long)]
        x_min: Option<f64>,
        /// Comma-separated c values for an additional grid CSV.
        #[arg(long, value_delimiter = ',')]
        grid_c: Vec<f64>,
        /// Comma-separated k values for the grid.
        #[arg(long, value_delimiter = ',')]
        grid_k: Vec<usize>,
    },
    /// Resolve the exposure exponent from config or a power-law fit.
    EstimateGamma {
        /// `item<TAB>exposure` file for the fit.
        #[arg(long, conflicts_with = "checkpoint")]
        exposure: Option<PathBuf>,
        /// Trained model whose summed sigmoid scores serve as exposure.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn config(common: &Common) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(d) = &common.dataset {
        cfg.dataset_path = Some(d.clone());
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    if common.parallel {
        cfg.parallel = true;
    }
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) {
    match serde_json::to_string_pretty(value) {
        Ok(s) => println!("{s}"),
        Err(e) => eprintln!("cannot serialize output: {e}"),
    }
}

fn output_err(e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::new(Stage::Output, e)
}

fn run(cli: Cli) -> Result<ExitCode, ExperimentError> {
    let cfg = config(&cli.common)?;
    match cli.command {
        Command::Ingest => {
            let dir = cfg.resolved_output_dir();
            let log = experiment::ingest(&cfg, &dir)?;
            println!(
                "{} users, {} items, {} interactions -> {}",
                log.n_users(),
                log.n_items(),
                log.n_interactions(),
                dir.display()
            );
        }
        Command::Split => {
            cfg.ratios.validate().map_err(|e| ExperimentError::new(Stage::Config, e))?;
            let split = experiment::load_split(&cfg)?;
            let dir = cfg.resolved_output_dir();
            split.write_to(&dir).map_err(output_err)?;
            std::fs::write(dir.join("manifest.txt"), cfg.to_kv_string()).map_err(output_err)?;
            print_json(&split.manifest());
        }
        Command::Train => {
            let summary = experiment::run_experiment(&cfg)?;
            print_json(&summary.metrics);
            eprintln!("outputs in {}", summary.dir.display());
        }
        Command::Evaluate { checkpoint } => {
            let metrics = experiment::evaluate_checkpoint(&cfg, &checkpoint)?;
            print_json(&metrics);
        }
        Command::Sweep => {
            let summary = experiment::sweep_lambda(&cfg)?;
            experiment::write_sweep_csv(&summary.rows, std::io::stdout().lock()).map_err(output_err)?;
            eprintln!("outputs in {}", summary.dir.display());
        }
        Command::CheckProposition {
            histogram,
            c,
            k,
            threshold,
            x_min,
            grid_c,
            grid_k,
        } => {
            let degrees = match &histogram {
                Some(p) => experiment::read_degree_histogram(p)?,
                None => experiment::train_degrees(&cfg)?,
            };
            let pc = PropositionConfig {
                c,
                k,
                threshold,
                x_min,
            };
            let report = experiment::check_proposition(&degrees, &pc)?;
            print_json(&report);
            if let (false, false, Some(beta)) = (grid_c.is_empty(), grid_k.is_empty(), report.beta) {
                let rows = theory::bound_grid(&degrees, &grid_c, &grid_k, beta)
                    .map_err(|e| ExperimentError::new(Stage::Theory, e))?;
                let dir = cfg.resolved_output_dir();
                std::fs::create_dir_all(&dir).map_err(output_err)?;
                let f = std::fs::File::create(dir.join("bound_grid.csv")).map_err(output_err)?;
                theory::write_grid_csv(&rows, std::io::BufWriter::new(f)).map_err(output_err)?;
            }
            println!("{}", report.verdict);
        }
        Command::EstimateGamma { exposure, checkpoint } => {
            let source = match (&exposure, &checkpoint) {
                (Some(p), _) => GammaSource::ExposureFile(p),
                (None, Some(p)) => GammaSource::Checkpoint(p),
                (None, None) => GammaSource::Config,
            };
            print_json(&experiment::estimate_gamma(&cfg, source)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
