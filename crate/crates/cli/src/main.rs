use clap::{Parser, Subcommand, ValueEnum};
use fusion_cli::commands::{self, Baseline, Overrides};
use fusion_cli::config::RunConfig;
use fusion_cli::suites::{run_suite, Suite, SuiteOptions};
use fusion_cli::{CliError, CliResult};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "fusion", version, about = "Bayesian Fusion of sub-posterior samples")]
struct Cli {
    /// Worker threads (0 = all cores); never changes results.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the fusion sampler and write samples.csv, trace.jsonl, summary.json.
    Fuse {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print recommended T, n, mesh size and CESS floors as JSON.
    Guidance {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a benchmark grid.
    Benchmark {
        #[arg(value_enum)]
        suite: SuiteArg,
        /// Particles per fusion run.
        #[arg(long, default_value_t = 2000)]
        particles: usize,
        /// Comma-separated C grid replacing the suite default.
        #[arg(long = "c-grid", value_delimiter = ',')]
        c_grid: Option<Vec<usize>>,
        /// Comma-separated m grid replacing the suite default.
        #[arg(long = "m-grid", value_delimiter = ',')]
        m_grid: Option<Vec<f64>>,
    },
    /// Write synthetic data and per-core sample banks.
    Synth {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a comparison method.
    Baseline {
        #[arg(value_enum)]
        method: MethodArg,
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    ShScaling,
    SshScaling,
    MeshRegularity,
    McfCost,
    LogisticCompare,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Cmc,
    Mcf,
}

fn load(path: &PathBuf, ov: &Overrides) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    ov.apply(&mut cfg);
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    let ov = Overrides { seed: cli.seed, workers: cli.workers, out: cli.out.clone() };
    match cli.command {
        Command::Fuse { config } => {
            let cfg = load(&config, &ov)?;
            let (run, files) = commands::fuse(&cfg, cli.workers)?;
            log::info!("final ESS {:.1}, {} resamples", run.final_ess(), run.resample_count());
            for f in files {
                println!("{}", f.display());
            }
        }
        Command::Guidance { config } => {
            let cfg = load(&config, &ov)?;
            let g = commands::guidance(&cfg)?;
            println!("{}", serde_json::to_string(&g).map_err(|e| CliError::Runtime(e.to_string()))?);
        }
        Command::Benchmark { suite, particles, c_grid, m_grid } => {
            let suite = match suite {
                SuiteArg::ShScaling => Suite::ShScaling,
                SuiteArg::SshScaling => Suite::SshScaling,
                SuiteArg::MeshRegularity => Suite::MeshRegularity,
                SuiteArg::McfCost => Suite::McfCost,
                SuiteArg::LogisticCompare => Suite::LogisticCompare,
            };
            let opts = SuiteOptions {
                particles,
                seed: cli.seed.unwrap_or(1),
                workers: cli.workers,
                c_grid,
                m_grid,
                ..SuiteOptions::default()
            };
            let out = cli.out.unwrap_or_else(|| PathBuf::from(suite.name()));
            let report = run_suite(suite, &opts, Some(&out))?;
            for c in &report.cells {
                if let Some(e) = &c.error {
                    log::error!("{}/{} failed: {e}", c.cell, c.method);
                }
            }
            println!("{}", out.join("suite.csv").display());
            if report.completed_fraction() < 0.9 {
                return Err(CliError::Runtime(format!(
                    "only {:.0}% of cells completed",
                    100.0 * report.completed_fraction()
                )));
            }
        }
        Command::Synth { config } => {
            let cfg = load(&config, &ov)?;
            for f in commands::synth(&cfg)? {
                println!("{}", f.display());
            }
        }
        Command::Baseline { method, config } => {
            let cfg = load(&config, &ov)?;
            let which = match method {
                MethodArg::Cmc => Baseline::Cmc,
                MethodArg::Mcf => Baseline::Mcf,
            };
            let (summary, files) = commands::baseline(&cfg, which)?;
            if let Some(d) = &summary.diagnostic {
                log::warn!("{d}");
            }
            for f in files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FUSION_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fusion: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
