//! Command-line front end: `hcma run|converge|verify|dump --config FILE`.
//!
//! Exit codes: 0 all enabled checks pass, 1 some check failed,
//! 2 configuration error, 3 solver failure (a `failure.json` is written).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use hcma::config::ExperimentConfig;
use hcma::harness::{self, HarnessError, RunArtifacts};

/// Fallback output directory when neither `--out`, the environment nor the config name one.
const DEFAULT_OUT: &str = "hcma-out";

#[derive(Parser)]
#[command(name = "hcma", version, about = "Geodesics of Kähler potentials: solve, foliate, analyze, verify")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Full pipeline: solve, trace leaves, analyze, run the enabled checks.
    Run(Common),
    /// Convergence table over a list of doubling base resolutions.
    Converge {
        #[command(flatten)]
        common: Common,
        /// Comma-separated base resolutions (default: the configured residual levels).
        #[arg(long, value_delimiter = ',')]
        level_list: Option<Vec<usize>>,
    },
    /// Run the enabled checks only.
    Verify(Common),
    /// Write the endpoints, the solved strip and its leaves.
    Dump(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, env = "HCMA_OUT_DIR")]
    out: Option<PathBuf>,
    /// Worker threads (default: one per core).
    #[arg(long)]
    workers: Option<usize>,
    /// Comma-separated check names overriding the config's list; an empty value disables all checks.
    #[arg(long, value_delimiter = ',')]
    check: Option<Vec<String>>,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf), HarnessError> {
        let mut config = ExperimentConfig::load(&self.config)?;
        if let Some(list) = &self.check {
            config.checks = Some(list.iter().filter(|c| !c.is_empty()).cloned().collect());
        }
        config.validate()?;
        let out = self
            .out
            .clone()
            .or_else(|| config.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        Ok((config, out))
    }
}

fn report(artifacts: &RunArtifacts, out: &std::path::Path) -> Result<i32, HarnessError> {
    artifacts.write(out)?;
    for v in &artifacts.verdicts {
        println!("{}", v.line());
    }
    println!("wrote {} files to {}", artifacts.files.len() + 1, out.display());
    Ok(artifacts.exit_code())
}

fn execute(verb: &Verb) -> i32 {
    let common = match verb {
        Verb::Run(c) | Verb::Verify(c) | Verb::Dump(c) => c,
        Verb::Converge { common, .. } => common,
    };
    let (config, out) = match common.load() {
        Ok(loaded) => loaded,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    if let Some(n) = common.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot size the worker pool: {e}");
            return 2;
        }
    }
    let started = std::time::Instant::now();
    let result = match verb {
        Verb::Run(_) => harness::run(&config).and_then(|a| report(&a, &out)),
        Verb::Verify(_) => harness::verify(&config).and_then(|a| report(&a, &out)),
        Verb::Dump(_) => harness::dump(&config).and_then(|a| report(&a, &out)),
        Verb::Converge { level_list, .. } => {
            let levels = level_list.clone().unwrap_or_else(|| config.analysis.levels.clone());
            harness::convergence_study(&config, &levels).and_then(|table| {
                let artifacts = harness::convergence_artifacts(&config, &table);
                artifacts.write(&out)?;
                print!("{}", table.to_csv());
                match &table.failure {
                    Some(msg) => {
                        eprintln!("error: {msg}");
                        Ok(3)
                    }
                    None => Ok(0),
                }
            })
        }
    };
    info!("finished in {:.1} s", started.elapsed().as_secs_f64());
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.exit_code() == 3 {
                if let Err(w) = harness::write_failure(&out, &config, &e) {
                    eprintln!("error: {w}");
                }
            }
            e.exit_code()
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    ExitCode::from(execute(&cli.verb) as u8)
}
