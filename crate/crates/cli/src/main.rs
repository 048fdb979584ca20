//! `foster`: run incremental experiments, ablation suites, and regenerate
//! report files from a results directory.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use foster_core::evaluation::{emit_plots, load_run};
use foster_core::experiment::{run_ablation_suite, run_experiment, suite, ExperimentConfig};

#[derive(Parser)]
#[command(name = "foster", version, about = "Class-incremental learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every session of one configuration.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides `output_dir` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a named ablation suite over one or more seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// methods, la_vs_wa, fe, bkd_vs_kd, beta, exemplars or all.
        #[arg(long)]
        suite: String,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rebuild `curve.csv` and the confusion heatmaps from `results.json`.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut cfg = ExperimentConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if out.is_some() {
                cfg.output_dir = out;
            }
            let report = run_experiment(&cfg)?;
            for s in &report.sessions {
                println!("session {} acc {:.4}", s.t, s.acc);
            }
            println!("average incremental accuracy {:.4}", report.avg_inc_acc);
            match &cfg.output_dir {
                Some(d) => log::info!("wrote {}", d.display()),
                None => println!("{}", serde_json::to_string_pretty(&report)?),
            }
        }
        Command::Ablate {
            config,
            suite: name,
            seeds,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let variants = suite(&name)?;
            let table = run_ablation_suite(&cfg, &variants, &seeds)?;
            let csv = table.to_csv();
            match out {
                Some(dir) => {
                    fs::create_dir_all(&dir)?;
                    let path = dir.join(format!("ablation_{name}.csv"));
                    fs::write(&path, &csv)?;
                    log::info!("wrote {}", path.display());
                }
                None => print!("{csv}"),
            }
        }
        Command::Report { dir } => {
            let run = load_run(&dir).with_context(|| format!("reading {}", dir.display()))?;
            for p in emit_plots(&run, &dir)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
