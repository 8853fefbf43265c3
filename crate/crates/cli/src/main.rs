use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use cpest::estimator::Method;
use cpest::pipeline::{mode_label, run_estimate, Problem, ResultRecord};
use cpest::report::emit_report;
use cpest::scenario::{load_scenario, Scenario};
use cpest::Execution;

/// Thread count override for the sampling pool.
const THREADS_ENV: &str = "CPEST_THREADS";

#[derive(Parser)]
#[command(name = "cpest", version, about = "Collision probability estimation with adaptive mixture importance sampling")]
struct Cli {
    /// Evaluate everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load and check a scenario, then print its resolved settings.
    Validate {
        scenario: PathBuf,
        /// Print the fully resolved scenario as JSON.
        #[arg(long)]
        json: bool,
    },
    /// List the most likely collision modes.
    Closepoints {
        scenario: PathBuf,
        /// Number of modes (defaults to mixture components minus one).
        #[arg(long)]
        top: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Build the mixture and print its components.
    Components { scenario: PathBuf },
    /// Estimate the collision probability and write a result record.
    Estimate {
        scenario: PathBuf,
        #[arg(long, default_value = "ais")]
        method: Method,
        #[arg(long)]
        seed: Option<u64>,
        /// Total samples for naive and is.
        #[arg(long)]
        m: Option<usize>,
        /// Batch size for ais.
        #[arg(long)]
        k: Option<usize>,
        /// Batch count for ais.
        #[arg(long)]
        l: Option<usize>,
        /// Directory for the result JSON and report files.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Write trace CSV, SVG plot and table for one or more result records.
    Report {
        #[arg(required = true)]
        results: Vec<PathBuf>,
        #[arg(long, short, default_value = "report")]
        out: PathBuf,
    },
}

/// A failure with the exit code it maps to.
enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match run(cli.command, exec) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("invalid input: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

#[cfg(feature = "parallel")]
fn configure_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .with_context(|| format!("{THREADS_ENV}={value:?} is not a thread count"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn configure_threads() -> anyhow::Result<()> {
    if std::env::var_os(THREADS_ENV).is_some() {
        log::warn!("{THREADS_ENV} ignored: built without the parallel feature");
    }
    Ok(())
}

fn load(path: &Path) -> Result<Scenario, Failure> {
    load_scenario(path)
        .with_context(|| format!("scenario {}", path.display()))
        .map_err(Failure::Validation)
}

fn problem(scenario: Scenario) -> Result<Problem, Failure> {
    Problem::new(scenario).map_err(|e| Failure::Runtime(e.into()))
}

fn run(command: Command, exec: Execution) -> Result<(), Failure> {
    match command {
        Command::Validate { scenario, json } => {
            let s = load(&scenario)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&s.resolved).context("serialize scenario")?);
            } else {
                let est = &s.resolved.estimator;
                println!("scenario   {}", s.resolved.name);
                println!("hash       {}", s.hash);
                println!("horizon    T={} dt={}", s.horizon(), s.dt());
                println!("state/ctrl {}/{}", s.dynamics.state_dim(), s.dynamics.control_dim());
                println!("robot      {} parts", s.robot.parts.len());
                println!("obstacles  {}", s.environment.obstacles.len());
                println!("mixture    D={}", s.resolved.mixture.components);
                println!(
                    "estimator  {} m={} k={} l={} C={} seed={}",
                    est.method, est.m, est.k, est.l, est.c, est.seed
                );
            }
        }
        Command::Closepoints { scenario, top, json } => {
            let p = problem(load(&scenario)?)?;
            let top = top.unwrap_or(p.scenario.resolved.mixture.components.saturating_sub(1));
            let modes = p.close_points(top, exec);
            if json {
                println!("{}", serde_json::to_string_pretty(&modes).context("serialize modes")?);
            } else {
                println!("{:>4}  {:<32} {:>10} {:>10}  warning", "rank", "mode", "maha", "newton");
                for (i, m) in modes.iter().enumerate() {
                    println!(
                        "{:>4}  {:<32} {:>10.4} {:>10.4}  {}",
                        i + 1,
                        mode_label(&p, m),
                        m.maha,
                        m.maha_newton,
                        if m.refine_warning { "yes" } else { "" }
                    );
                }
            }
        }
        Command::Components { scenario } => {
            let p = problem(load(&scenario)?)?;
            let setup = p.setup(exec);
            let mix = &setup.mixture;
            println!("{:>3}  {:<32} {:>8} {:>10} {:>10} {:>10}", "d", "mode", "maha", "objective", "halfspace", "alpha");
            for (d, c) in mix.components.iter().enumerate() {
                println!(
                    "{:>3}  {:<32} {:>8.4} {:>10.4} {:>10.3e} {:>10.4}",
                    d + 1,
                    mode_label(&p, &c.mode),
                    c.mode.maha,
                    c.objective_value,
                    c.halfspace_weight,
                    mix.weights[d]
                );
            }
            println!("{:>3}  {:<32} {:>8} {:>10} {:>10} {:>10.4}", mix.len(), "nominal", "", "", "", mix.weights[mix.len() - 1]);
        }
        Command::Estimate {
            scenario,
            method,
            seed,
            m,
            k,
            l,
            out,
        } => {
            let mut s = load(&scenario)?;
            let est = &mut s.resolved.estimator;
            est.method = method;
            est.seed = seed.unwrap_or(est.seed);
            est.m = m.unwrap_or(est.m);
            est.k = k.unwrap_or(est.k);
            est.l = l.unwrap_or(est.l);
            // Re-resolve so the hash covers the overrides.
            let s = Scenario::from_file(s.resolved).map_err(|e| Failure::Validation(e.into()))?;
            let p = problem(s)?;
            let record = run_estimate(&p, method, exec).map_err(|e| Failure::Runtime(e.into()))?;
            let e = &record.estimate;
            println!(
                "{} p_hat={:.6e} sigma_hat={:.3e} samples={} domain_exits={} time={:.2}s (setup {:.2}s)",
                method,
                e.p_hat,
                e.sigma_hat,
                e.samples_used,
                e.domain_exits,
                record.timings.sampling,
                record.timings.closepoint + record.timings.isopt
            );
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).with_context(|| format!("create {}", dir.display()))?;
                let path = dir.join(format!("result_{method}.json"));
                std::fs::write(&path, record.to_json()).with_context(|| format!("write {}", path.display()))?;
                let files = emit_report(std::slice::from_ref(&record), &dir).context("write report")?;
                println!("wrote {} and {}", path.display(), files.table_txt.display());
            }
        }
        Command::Report { results, out } => {
            let mut records = Vec::with_capacity(results.len());
            for path in &results {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("read {}", path.display()))
                    .map_err(Failure::Validation)?;
                let record = ResultRecord::from_json(&text)
                    .with_context(|| format!("parse {}", path.display()))
                    .map_err(Failure::Validation)?;
                records.push(record);
            }
            let files = emit_report(&records, &out).context("write report")?;
            print!("{}", std::fs::read_to_string(&files.table_txt).context("read table")?);
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}
