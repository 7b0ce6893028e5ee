//! Single control step with problem dumps, and the oracle comparison on them.

use std::fs;
use std::path::Path;

use lexinet_admm::{dist_sol, ConvergenceReport, MailboxBus};
use lexinet_core::problem::{build_pc_problem, build_tsc_problem, lift_tsc_problem, BuildOptions, LocalProblem};
use lexinet_core::{AgentQp, TrafficState};
use lexinet_oracle::{read_dumps, solve_lexicographic_centralized, GlobalProblem, IpmOptions};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::closed_loop::solver_configs;
use crate::scenario::Scenario;

/// Distributed result of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub residual: f64,
}

impl StageSummary {
    fn new(problems: &[LocalProblem], x: &[DVector<f64>], report: &ConvergenceReport) -> Self {
        Self {
            cost: problems.iter().zip(x).map(|(p, x)| p.cost(x)).sum(),
            iterations: report.iterations,
            converged: report.converged,
            residual: report.residual,
        }
    }
}

/// Contents of `summary.json` next to the dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnceSummary {
    pub pc: StageSummary,
    pub tsc: StageSummary,
    /// Σ c_iᵀx̂ at the distributed signal-stage solution.
    pub tsc_perimeter_value: f64,
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}

fn dump_all(dir: &Path, problems: &[LocalProblem]) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(|e| anyhow::anyhow!("{}: {e}", dir.display()))?;
    for p in problems {
        write_json(&dir.join(format!("agent_{:03}.json", p.agent())), &p.dump())?;
    }
    Ok(())
}

fn qps(problems: &[LocalProblem]) -> Vec<AgentQp> {
    problems.iter().map(|p| p.qp.clone()).collect()
}

/// Solves the first control step lexicographically from the empty network and
/// writes `pc/`, `tsc/` (before lifting) and `summary.json` into `dir`.
pub fn solve_once(sc: &Scenario, dir: &Path) -> anyhow::Result<OnceSummary> {
    let (lp, qp) = solver_configs(sc);
    let state = TrafficState::zeros(&sc.net);
    let forecast = sc.forecast(0);
    let opts = BuildOptions::default();
    let pc = build_pc_problem(&sc.net, &sc.partition, &state, &forecast, opts)?;
    let tsc = build_tsc_problem(&sc.net, &sc.partition, &state, &forecast, sc.params.alpha, sc.params.beta, opts)?;

    let first = dist_sol(&qps(&pc), &lp, &MailboxBus::new(), None)?;
    let lifted = lift_tsc_problem(&tsc, &first.x, 10.0 * lp.tol)?;
    let second = dist_sol(&qps(&lifted), &qp, &MailboxBus::new(), None)?;

    let summary = OnceSummary {
        pc: StageSummary::new(&pc, &first.x, &first.report),
        tsc: StageSummary::new(&lifted, &second.x, &second.report),
        tsc_perimeter_value: pc.iter().zip(&second.x).map(|(p, x)| p.perimeter.dot(&x.rows(0, p.perimeter.len()))).sum(),
    };
    dump_all(&dir.join("pc"), &pc)?;
    dump_all(&dir.join("tsc"), &tsc)?;
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// One line of the oracle comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub quantity: &'static str,
    pub centralized: f64,
    pub distributed: Option<f64>,
}

impl Comparison {
    pub fn relative_gap(&self) -> Option<f64> {
        self.distributed
            .map(|d| (d - self.centralized).abs() / (1.0 + self.centralized.abs()))
    }
}

/// Solves the dumped problems centrally. A directory holding `pc/` and `tsc/`
/// is solved lexicographically; any other directory is solved as one stage.
pub fn oracle_compare(dir: &Path) -> anyhow::Result<Vec<Comparison>> {
    let opts = IpmOptions::default();
    let (pc_dir, tsc_dir) = (dir.join("pc"), dir.join("tsc"));
    let summary: Option<OnceSummary> = fs::read_to_string(dir.join("summary.json"))
        .ok()
        .map(|t| serde_json::from_str(&t))
        .transpose()?;
    if pc_dir.is_dir() && tsc_dir.is_dir() {
        let pc = GlobalProblem::from_dumps(&read_dumps(&pc_dir)?)?;
        let tsc = GlobalProblem::from_dumps(&read_dumps(&tsc_dir)?)?;
        let lex = solve_lexicographic_centralized(&pc, &tsc, &opts)?;
        let perimeter = pc.lin.dot(&lex.tsc.x) + pc.constant;
        Ok(vec![
            Comparison {
                quantity: "phi_pc",
                centralized: lex.pc_cost,
                distributed: summary.as_ref().map(|s| s.pc.cost),
            },
            Comparison {
                quantity: "phi_tsc",
                centralized: lex.tsc.cost,
                distributed: summary.as_ref().map(|s| s.tsc.cost),
            },
            Comparison {
                quantity: "phi_pc_at_tsc",
                centralized: perimeter,
                distributed: summary.as_ref().map(|s| s.tsc_perimeter_value),
            },
        ])
    } else {
        let p = GlobalProblem::from_dumps(&read_dumps(dir)?)?;
        let sol = lexinet_oracle::solve_centralized(&p, &opts)?;
        Ok(vec![Comparison {
            quantity: "cost",
            centralized: sol.cost,
            distributed: None,
        }])
    }
}
