use std::path::PathBuf;
use std::process::ExitCode;

use boltzgrad::experiments::{self, ExperimentConfig, ExperimentError, Scenario};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "boltzgrad", version, about = "Hard-sphere and Boltzmann scenario runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its CSV tables, summary.json and manifest.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's `output_dir` or runs/<scenario>-<seed>.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; results do not depend on this.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Parse and check a config without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the available scenarios.
    ListScenarios,
}

const EXIT_ASSERTION: u8 = 4;

fn fail(e: ExperimentError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::ListScenarios => {
            for s in Scenario::ALL {
                println!("{:<16} {}", s.name(), s.describe());
            }
            ExitCode::SUCCESS
        }
        Command::Validate { config } => {
            let checked = ExperimentConfig::from_file(&config).and_then(|c| experiments::validate(&c));
            match checked {
                Ok(v) => {
                    for w in &v.warnings {
                        eprintln!("warning: {w}");
                    }
                    let params = serde_json::to_string_pretty(&v.params).expect("params serialize");
                    println!("{} config ok\n{params}", v.config.scenario.name());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Run { config, out, seed, threads } => {
            if let Some(k) = threads {
                if k == 0 {
                    return fail(ExperimentError::Config("--threads must be positive".into()));
                }
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k).build_global() {
                    return fail(ExperimentError::Config(format!("thread pool: {e}")));
                }
            }
            let mut config = match ExperimentConfig::from_file(&config) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            if let Some(s) = seed {
                config.seed = s;
            }
            match experiments::run(&config, out.as_deref()) {
                Ok(outcome) => {
                    for a in &outcome.summary.assertions {
                        let mark = if a.passed { "PASS" } else { "FAIL" };
                        println!("{mark} {}: {:.6e} (threshold {:.6e})", a.name, a.value, a.threshold);
                    }
                    println!("wrote {}", outcome.output_dir.display());
                    if outcome.summary.passed {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(EXIT_ASSERTION)
                    }
                }
                Err(e) => fail(e),
            }
        }
    }
}
