use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hilearn::datagen::GenRequest;
use hilearn::harness::{emit_report, run_experiment, ExperimentConfig, ReportFormat};
use hilearn::theory::TheoryInstance;

#[derive(Parser)]
#[command(name = "hilearn", version, about = "Hierarchy-invariant learning experiments")]
struct Cli {
    /// Replace the seed list of the config with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Maximum number of worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write report.json, report.csv and report.md.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the cross-validation guarantees on a discrete instance.
    VerifyTheory {
        #[arg(long)]
        instance: PathBuf,
        /// Write the verdict here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate synthetic domains as CSV files plus a manifest.
    Gen {
        #[arg(long)]
        spec: PathBuf,
    },
}

fn run(cli: Cli) -> hilearn::Result<()> {
    match cli.command {
        Command::Run { config, out } => {
            let mut config = ExperimentConfig::from_file(&config)?;
            if let Some(seed) = cli.seed {
                config.seeds = vec![seed];
            }
            let report = run_experiment(&config, cli.jobs)?;
            fs::create_dir_all(&out)?;
            for (format, name) in [
                (ReportFormat::Json, "report.json"),
                (ReportFormat::Csv, "report.csv"),
                (ReportFormat::Markdown, "report.md"),
            ] {
                emit_report(&report, format, &out.join(name))?;
            }
            print!("{}", hilearn::harness::render_markdown(&report));
        }
        Command::VerifyTheory { instance, out } => {
            let instance: TheoryInstance = serde_json::from_str(&fs::read_to_string(&instance)?)?;
            let verdict = serde_json::to_string_pretty(&instance.verify()?)?;
            match out {
                Some(path) => fs::write(path, verdict)?,
                None => println!("{verdict}"),
            }
        }
        Command::Gen { spec } => {
            let mut request: GenRequest = serde_json::from_str(&fs::read_to_string(&spec)?)?;
            if let Some(seed) = cli.seed {
                request.seed = seed;
            }
            if request.out_dir.is_relative() {
                let base = spec.parent().unwrap_or(Path::new("."));
                request.out_dir = base.join(&request.out_dir);
            }
            let manifest = request.run()?;
            log::info!("wrote {} domains to {}", manifest.domains.len(), request.out_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
