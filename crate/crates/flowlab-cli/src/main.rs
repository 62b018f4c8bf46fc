use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flowlab::pathsim::{sample_path, RngStream};
use flowlab::scenario::{self, RunOptions, ScenarioError};

#[derive(Parser)]
#[command(
    name = "flowlab",
    about = "Finite-state laboratory for positivity-preserving semigroup flows",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run all checks of a scenario file and write a JSON report.
    Run {
        scenario: PathBuf,
        /// Seed override (highest priority; then the file, then FLOWLAB_SEED).
        #[arg(long)]
        seed: Option<u64>,
        /// Paths per Monte Carlo estimate.
        #[arg(long)]
        paths: Option<u64>,
        /// Simulation horizon for stopping-time checks.
        #[arg(long)]
        horizon: Option<f64>,
        /// Absolute tolerance for exact identities.
        #[arg(long)]
        tol_exact: Option<f64>,
        /// z-score tolerance for Monte Carlo agreement.
        #[arg(long)]
        tol_z: Option<f64>,
        /// Where to write the JSON report.
        #[arg(long, default_value = "flowlab-report.json")]
        report: PathBuf,
        /// Directory for CSV diagnostic tables (created if missing).
        #[arg(long)]
        csv_dir: Option<PathBuf>,
        /// Run independent checks on this many threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Print what a named check certifies.
    Explain { check: String },
    /// Sample killed-chain paths and dump them as CSV
    /// (columns: stream_index, time, state).
    Paths {
        scenario: PathBuf,
        /// Start state label (default: first state).
        #[arg(long)]
        x: Option<String>,
        /// Which h recipe from the scenario to simulate under.
        #[arg(long, default_value_t = 0)]
        h_index: usize,
        /// Number of paths.
        #[arg(long, default_value_t = 10)]
        n: u64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        horizon: Option<f64>,
        /// Output CSV path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run {
            scenario,
            seed,
            paths,
            horizon,
            tol_exact,
            tol_z,
            report,
            csv_dir,
            jobs,
        } => {
            let opts = RunOptions {
                seed,
                n_paths: paths,
                horizon,
                tol_exact,
                tol_z,
                jobs,
            };
            let (run_report, tables) = match scenario::run_scenario_file(&scenario, &opts) {
                Ok(result) => result,
                Err(e @ ScenarioError::Io(_)) => {
                    eprintln!("error: {e}");
                    return Ok(ExitCode::from(2));
                }
                Err(e) => {
                    eprintln!("invalid scenario: {e}");
                    return Ok(ExitCode::from(2));
                }
            };
            for check in &run_report.checks {
                println!("{:<24} {}", check.id, check.verdict);
            }
            println!("overall: {}", run_report.overall);
            std::fs::write(&report, run_report.to_json())?;
            println!("report written to {}", report.display());
            if let Some(dir) = csv_dir {
                std::fs::create_dir_all(&dir)?;
                for table in &tables {
                    std::fs::write(dir.join(&table.name), &table.content)?;
                }
                println!("{} csv table(s) written to {}", tables.len(), dir.display());
            }
            Ok(if run_report.all_passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Command::Explain { check } => match scenario::explain(&check) {
            Ok(text) => {
                println!("{text}");
                Ok(ExitCode::SUCCESS)
            }
            Err(e) => {
                eprintln!("error: {e}");
                Ok(ExitCode::from(2))
            }
        },
        Command::Paths {
            scenario,
            x,
            h_index,
            n,
            seed,
            horizon,
            out,
        } => {
            let text = std::fs::read_to_string(&scenario)?;
            let parsed: flowlab::scenario::Scenario = serde_json_from(&text)?;
            let (engine, hts) = build_model(&parsed)?;
            let ht = hts
                .get(h_index)
                .ok_or_else(|| anyhow::anyhow!("h index {h_index} out of range"))?;
            let x0 = match &x {
                Some(label) => engine
                    .bundle()
                    .space()
                    .index_of(label)
                    .ok_or_else(|| anyhow::anyhow!("unknown state {label:?}"))?,
                None => 0,
            };
            let seed = seed.or(parsed.mc.seed).unwrap_or(0);
            let horizon = horizon.unwrap_or(parsed.mc.horizon.0);
            let mut csv = String::from("stream_index,time,state\n");
            for stream in 0..n {
                let path = sample_path(ht, x0, horizon, &mut RngStream { seed, stream }.rng());
                let labels = engine.bundle().space().labels();
                csv.push_str(&format!("{stream},0,{}\n", labels[path.start()]));
                for (k, &t) in path.jump_times().iter().enumerate() {
                    csv.push_str(&format!("{stream},{t},{}\n", labels[path.states()[k + 1]]));
                }
                if let Some(z) = path.lifetime() {
                    csv.push_str(&format!("{stream},{z},Δ\n"));
                }
            }
            match out {
                Some(path) => std::fs::write(path, csv)?,
                None => print!("{csv}"),
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn serde_json_from(text: &str) -> anyhow::Result<flowlab::scenario::Scenario> {
    scenario::parse_scenario(text).map_err(|e| anyhow::anyhow!("invalid scenario: {e}"))
}

fn build_model(
    parsed: &flowlab::scenario::Scenario,
) -> anyhow::Result<(
    flowlab::SemigroupEngine,
    Vec<flowlab::htransform::HTransform>,
)> {
    scenario::build_engine_and_hts(parsed).map_err(|e| anyhow::anyhow!("invalid scenario: {e}"))
}
