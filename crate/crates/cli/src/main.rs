use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use lexinet::closed_loop::{parse_strategy, run_closed_loop, RunOptions};
use lexinet::metrics::{emit_metrics, fmt_sig};
use lexinet::once::{oracle_compare, solve_once};
use lexinet::scenario::load_scenario;

#[derive(Parser)]
#[command(name = "lexinet", version, about = "Distributed lexicographic MPC for urban traffic networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario in closed loop and write CSV metrics.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// fixed, weighted or lexi.
        #[arg(long)]
        strategy: String,
        /// Weight on Φ1 for the weighted strategy; defaults to the scenario's.
        #[arg(long)]
        theta: Option<f64>,
        /// Prediction horizon override.
        #[arg(long)]
        k: Option<usize>,
        /// Noise seed override.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Control steps whose solver traces are written to convergence_<t>.csv.
        #[arg(long, value_delimiter = ',')]
        trace_steps: Vec<usize>,
    },
    /// Load and validate a scenario.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Solve the first control step and dump the agent problems.
    SolveOnce {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        dump_problems: PathBuf,
    },
    /// Solve dumped problems centrally and compare with the distributed result.
    Oracle {
        #[arg(long)]
        problems: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run {
            scenario,
            strategy,
            theta,
            k,
            seed,
            out,
            trace_steps,
        } => {
            let mut sc = load_scenario(&scenario)?;
            if let Some(k) = k {
                anyhow::ensure!(k >= 1, "--k must be at least 1");
                sc.horizon = k;
            }
            if let Some(seed) = seed {
                sc.seed = seed;
            }
            let strategy = parse_strategy(&strategy, theta.unwrap_or(sc.params.theta))?;
            let opts = RunOptions {
                record_convergence: trace_steps.into_iter().collect(),
                ..Default::default()
            };
            let log = run_closed_loop(&sc, strategy, &opts)?;
            let fallbacks = log.steps.iter().filter(|s| s.fallback.is_some()).count();
            let files = emit_metrics(&sc.net, &log, &out)?;
            let last = log.steps.last().expect("nonempty run");
            println!(
                "{} steps under {}: served {}, final queue {}, {} fallback step(s)",
                log.steps.len(),
                log.strategy,
                fmt_sig(last.cumulative_served),
                fmt_sig(last.queue_total),
                fallbacks
            );
            for f in files {
                println!("wrote {}", f.display());
            }
        }
        Command::Validate { scenario } => {
            let sc = load_scenario(&scenario)?;
            println!(
                "{}: valid, {} junctions, {} links, {} agents, {} steps",
                scenario.display(),
                sc.net.junctions().len(),
                sc.net.links().len(),
                sc.partition.num_agents(),
                sc.steps
            );
        }
        Command::SolveOnce { scenario, dump_problems } => {
            let sc = load_scenario(&scenario)?;
            let s = solve_once(&sc, &dump_problems).context("solve-once failed")?;
            println!(
                "pc: cost {} in {} iterations; tsc: cost {} in {} iterations",
                fmt_sig(s.pc.cost),
                s.pc.iterations,
                fmt_sig(s.tsc.cost),
                s.tsc.iterations
            );
            println!("dumps written to {}", dump_problems.display());
        }
        Command::Oracle { problems } => {
            println!("{:<16}{:>20}{:>20}{:>14}", "quantity", "centralized", "distributed", "rel_gap");
            for c in oracle_compare(&problems)? {
                println!(
                    "{:<16}{:>20}{:>20}{:>14}",
                    c.quantity,
                    fmt_sig(c.centralized),
                    c.distributed.map_or("-".into(), fmt_sig),
                    c.relative_gap().map_or("-".into(), |g| format!("{g:.3e}"))
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
