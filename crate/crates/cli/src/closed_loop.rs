//! Receding-horizon closed loop: measure, optimize, apply the first step.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use lexinet_admm::{dist_sol, AgentIterate, ConvergenceReport, MailboxBus, SolverConfig};
use lexinet_core::dynamics::{performance, step_plant, Indexes};
use lexinet_core::problem::{
    build_pc_problem, build_tsc_problem, build_weighted_problem, extract_step_controls, lift_tsc_problem,
    solution_residual, BuildOptions, LocalProblem,
};
use lexinet_core::{AgentQp, ControlInput, ExogenousStep, TrafficState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::scenario::Scenario;

/// Slack kept on the smoothness and green-budget rows so that solutions
/// accurate to the stopping tolerance still satisfy the exact constraints.
pub const DEFAULT_BACKOFF: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    /// Fixed splits, admission limited only by space.
    FixedTime,
    /// θΦ1 + αΦ2 + Φ3 in a single distributed QP.
    Weighted { theta: f64 },
    /// Perimeter LP, then the lifted signal QP.
    Lexicographic,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::FixedTime => "fixed",
            Strategy::Weighted { .. } => "weighted",
            Strategy::Lexicographic => "lexi",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Weighted { theta } => write!(f, "weighted(theta={theta})"),
            s => f.write_str(s.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StrategyError {
    #[error("strategy '{0}' (max-pressure with MFD perimeter control) is unsupported — see docs")]
    Unsupported(String),
    #[error("unknown strategy '{0}', expected fixed, weighted or lexi")]
    Unknown(String),
}

/// Parses a strategy name; `theta` applies to `weighted`.
pub fn parse_strategy(name: &str, theta: f64) -> Result<Strategy, StrategyError> {
    match name {
        "fixed" => Ok(Strategy::FixedTime),
        "weighted" => Ok(Strategy::Weighted { theta }),
        "lexi" | "lexicographic" => Ok(Strategy::Lexicographic),
        "max-pressure" | "maxpressure" | "mfd" | "strategy2" => Err(StrategyError::Unsupported(name.to_string())),
        other => Err(StrategyError::Unknown(other.to_string())),
    }
}

impl FromStr for Strategy {
    type Err = StrategyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_strategy(s, crate::scenario::Params::default().theta)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub backoff: f64,
    /// Steps whose solver traces are kept.
    pub record_convergence: BTreeSet<usize>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            backoff: DEFAULT_BACKOFF,
            record_convergence: BTreeSet::new(),
        }
    }
}

/// One control step of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    /// Measured state at the start of the step.
    pub state: TrafficState,
    pub requested: ControlInput,
    /// Controls after the plant's clamps.
    pub applied: ControlInput,
    pub realized: ExogenousStep,
    /// Realized Φ1, Φ2, Φ3 of this step.
    pub indexes: Indexes,
    /// Vehicles that left through destination links during this step.
    pub served: f64,
    pub cumulative_served: f64,
    /// Σ q after the step.
    pub queue_total: f64,
    pub iters_pc: usize,
    pub iters_tsc: usize,
    /// Largest primal stopping residual of the stages solved.
    pub residual: f64,
    /// Why the previous controls were reused, if they were.
    pub fallback: Option<String>,
    pub convergence: Vec<(String, ConvergenceReport)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub strategy: String,
    pub cycle: f64,
    pub steps: Vec<StepRecord>,
    /// State after the last step.
    pub final_state: TrafficState,
}

impl RunLog {
    /// States at t = 0..=steps.
    pub fn states(&self) -> Vec<&TrafficState> {
        self.steps.iter().map(|s| &s.state).chain([&self.final_state]).collect()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum RunError {
    #[error("scenario covers no control step")]
    EmptyRun,
}

/// The solver configurations a scenario implies for the LP and QP stages.
pub fn solver_configs(sc: &Scenario) -> (SolverConfig, SolverConfig) {
    let p = &sc.params;
    let lp = SolverConfig {
        rho: p.rho_lp,
        g_scale: SolverConfig::lp().g_scale,
        tol: p.tol / p.rho_lp,
        s_max: p.s_max,
        warm_start: true,
    };
    let qp = SolverConfig {
        rho: p.rho_qp,
        g_scale: SolverConfig::qp().g_scale,
        tol: p.tol / p.rho_qp,
        s_max: p.s_max,
        warm_start: true,
    };
    (lp, qp)
}

/// Fixed-time controls: planned splits, outflow up to green capacity or exit
/// capacity, admission of the whole queue up to the free space.
pub fn fixed_time_control(sc: &Scenario, state: &TrafficState, exo: &ExogenousStep) -> ControlInput {
    let net = &sc.net;
    let mut c = ControlInput {
        g: sc.fixed_time_plan.clone(),
        ..Default::default()
    };
    for (&z, link) in net.links() {
        let f = if net.is_boundary(&link.dest) {
            link.dest_outflow_cap.unwrap_or(0.0)
        } else {
            link.saturation_flow * net.phases_of(z).iter().map(|p| c.g(p)).sum::<f64>()
        };
        c.f_d.insert(z, f);
    }
    for z in net.source_links() {
        let space = net.links()[&z].capacity - state.n(z) - exo.e(z);
        c.f_u.insert(z, (state.q(z) + exo.d(z)).min(space).max(0.0));
    }
    c
}

/// Outcome of one optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub control: ControlInput,
    /// Controls planned for the following steps of the horizon.
    pub plan: Vec<ControlInput>,
    pub iters_pc: usize,
    pub iters_tsc: usize,
    pub residual: f64,
    pub reports: Vec<(String, ConvergenceReport)>,
}

/// Solver state carried between control steps.
#[derive(Debug, Clone, Default)]
pub struct Controller {
    warm_pc: Option<Vec<AgentIterate>>,
    warm_tsc: Option<Vec<AgentIterate>>,
}

fn qps(problems: &[LocalProblem]) -> Vec<AgentQp> {
    problems.iter().map(|p| p.qp.clone()).collect()
}

/// Controls for every step of the horizon, first step first.
fn horizon_controls(
    sc: &Scenario,
    problems: &[LocalProblem],
    xs: &[nalgebra::DVector<f64>],
) -> Result<(ControlInput, Vec<ControlInput>), String> {
    let mut steps = (0..sc.horizon)
        .map(|k| extract_step_controls(&sc.net, &sc.partition, problems, xs, k).map(|(c, _)| c))
        .collect::<Result<VecDeque<_>, _>>()
        .map_err(|e| e.to_string())?;
    let first = steps.pop_front().expect("horizon is at least one step");
    Ok((first, steps.into()))
}

/// Factor on the stopping tolerance within which an iterate that ran out of
/// iterations still counts as a solution.
pub const ACCEPT_FACTOR: f64 = 10.0;

/// Whether a stage result can be applied. An iterate stopped at `s_max` is
/// accepted when it satisfies the original constraints to within
/// `ACCEPT_FACTOR · tol`: nearly coincident bound pairs can hold the stopping
/// residual above `tol` for tens of thousands of iterations at a feasible,
/// near-optimal point.
fn usable(problems: &[LocalProblem], sol: &lexinet_admm::Solution, tol: f64) -> bool {
    sol.report.converged
        || solution_residual(problems, &sol.x)
            .into_iter()
            .all(|r| r <= ACCEPT_FACTOR * tol)
}

/// Previous iterates reused as they are. The k = 0 rows differ from later
/// steps, so a one-step shift would misalign the duals. Iterates that no
/// longer fit are ignored by the solver.
fn reuse_iterates(prev: &[AgentIterate], problems: &[AgentQp]) -> Vec<Option<AgentIterate>> {
    (0..problems.len()).map(|i| prev.get(i).cloned()).collect()
}

impl Controller {
    fn warm(
        cfg: &SolverConfig,
        prev: &Option<Vec<AgentIterate>>,
        problems: &[AgentQp],
    ) -> Option<Vec<Option<AgentIterate>>> {
        prev.as_ref()
            .filter(|_| cfg.warm_start)
            .map(|p| reuse_iterates(p, problems))
    }

    /// Runs the strategy's optimization for the measured `state` at step `t`.
    pub fn decide(
        &mut self,
        sc: &Scenario,
        strategy: Strategy,
        t: usize,
        state: &TrafficState,
        backoff: f64,
    ) -> Result<Decision, String> {
        let (lp, qp) = solver_configs(sc);
        let forecast = sc.forecast(t);
        let opts = BuildOptions { backoff };
        let (net, part) = (&sc.net, &sc.partition);
        match strategy {
            Strategy::FixedTime => Ok(Decision {
                control: fixed_time_control(sc, state, &sc.exogenous(t)),
                plan: Vec::new(),
                iters_pc: 0,
                iters_tsc: 0,
                residual: 0.0,
                reports: Vec::new(),
            }),
            Strategy::Weighted { theta } => {
                let problems = build_weighted_problem(net, part, state, &forecast, theta, sc.params.alpha, opts)
                    .map_err(|e| e.to_string())?;
                let q = qps(&problems);
                let warm = Self::warm(&qp, &self.warm_tsc, &q);
                let sol = dist_sol(&q, &qp, &MailboxBus::new(), warm.as_deref()).map_err(|e| e.to_string())?;
                let report = sol.report.clone();
                if !usable(&problems, &sol, qp.tol) {
                    self.warm_tsc = None;
                    return Err(format!("weighted stage hit s_max (residual {:.3e})", report.residual));
                }
                let (control, plan) = horizon_controls(sc, &problems, &sol.x)?;
                self.warm_tsc = report.converged.then_some(sol.iterates);
                Ok(Decision {
                    control,
                    plan,
                    iters_pc: 0,
                    iters_tsc: report.iterations,
                    residual: report.residual,
                    reports: vec![("weighted".into(), report)],
                })
            }
            Strategy::Lexicographic => {
                let pc = build_pc_problem(net, part, state, &forecast, opts).map_err(|e| e.to_string())?;
                let q = qps(&pc);
                let warm = Self::warm(&lp, &self.warm_pc, &q);
                let first = dist_sol(&q, &lp, &MailboxBus::new(), warm.as_deref()).map_err(|e| e.to_string())?;
                if !usable(&pc, &first, lp.tol) {
                    self.warm_pc = None;
                    return Err(format!("perimeter stage hit s_max (residual {:.3e})", first.report.residual));
                }
                let tsc = build_tsc_problem(net, part, state, &forecast, sc.params.alpha, sc.params.beta, opts)
                    .map_err(|e| e.to_string())?;
                let lifted = lift_tsc_problem(&tsc, &first.x, ACCEPT_FACTOR * lp.tol).map_err(|e| e.to_string())?;
                let q2 = qps(&lifted);
                let warm = Self::warm(&qp, &self.warm_tsc, &q2);
                let second = dist_sol(&q2, &qp, &MailboxBus::new(), warm.as_deref()).map_err(|e| e.to_string())?;
                self.warm_pc = first.report.converged.then_some(first.iterates);
                if !usable(&lifted, &second, qp.tol) {
                    self.warm_tsc = None;
                    return Err(format!("signal stage hit s_max (residual {:.3e})", second.report.residual));
                }
                let (control, plan) = horizon_controls(sc, &lifted, &second.x)?;
                self.warm_tsc = second.report.converged.then_some(second.iterates);
                Ok(Decision {
                    control,
                    plan,
                    iters_pc: first.report.iterations,
                    iters_tsc: second.report.iterations,
                    residual: first.report.residual.max(second.report.residual),
                    reports: vec![("pc".into(), first.report), ("tsc".into(), second.report)],
                })
            }
        }
    }
}

/// Simulates the scenario under `strategy` for its full duration.
pub fn run_closed_loop(sc: &Scenario, strategy: Strategy, opts: &RunOptions) -> Result<RunLog, RunError> {
    if sc.steps == 0 {
        return Err(RunError::EmptyRun);
    }
    let net = &sc.net;
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let mut controller = Controller::default();
    let mut state = TrafficState::zeros(net);
    let mut previous: Option<ControlInput> = None;
    // Unused tail of the last computed plan, consumed one step per failure.
    let mut pending: VecDeque<ControlInput> = VecDeque::new();
    let mut cumulative = 0.0;
    let mut steps = Vec::with_capacity(sc.steps);

    for t in 0..sc.steps {
        let exo = sc.exogenous(t);
        let (requested, iters_pc, iters_tsc, residual, fallback, reports) =
            match controller.decide(sc, strategy, t, &state, opts.backoff) {
                Ok(d) => {
                    pending = d.plan.into();
                    (d.control, d.iters_pc, d.iters_tsc, d.residual, None, d.reports)
                }
                Err(why) => {
                    let (control, source) = match (pending.pop_front(), &previous) {
                        (Some(c), _) => (c, "the previous plan"),
                        (None, Some(c)) => (c.clone(), "previous controls"),
                        (None, None) => (fixed_time_control(sc, &state, &exo), "fixed-time controls"),
                    };
                    log::warn!("step {t}: {why}; applying {source}");
                    (control, 0, 0, f64::NAN, Some(format!("{why}; applied {source}")), Vec::new())
                }
            };
        let plant = step_plant(net, &state, &exo, &requested, sc.noise, &mut rng);
        let indexes = performance(net, &state, std::slice::from_ref(&plant.next), std::slice::from_ref(&plant.applied));
        let served: f64 = net.destination_links().map(|z| plant.applied.f_d(z)).sum();
        cumulative += served;
        steps.push(StepRecord {
            t,
            state: state.clone(),
            requested: requested.clone(),
            applied: plant.applied,
            realized: plant.realized,
            indexes,
            served,
            cumulative_served: cumulative,
            queue_total: plant.next.total_queued(),
            iters_pc,
            iters_tsc,
            residual,
            fallback,
            convergence: if opts.record_convergence.contains(&t) { reports } else { Vec::new() },
        });
        previous = Some(requested);
        state = plant.next;
    }

    Ok(RunLog {
        strategy: strategy.to_string(),
        cycle: net.cycle(),
        steps,
        final_state: state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_names() {
        assert_eq!(parse_strategy("lexi", 1.0), Ok(Strategy::Lexicographic));
        assert_eq!(parse_strategy("weighted", 50.0), Ok(Strategy::Weighted { theta: 50.0 }));
        let err = parse_strategy("max-pressure", 1.0).unwrap_err();
        assert!(err.to_string().contains("unsupported — see docs"));
        assert!(matches!(parse_strategy("greedy", 1.0), Err(StrategyError::Unknown(_))));
    }
}
