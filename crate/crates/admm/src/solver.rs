//! Per-agent proximal ADMM and its synchronous orchestration.
//!
//! Agent `i` solves
//!
//! ```text
//! min ½xᵀWx + wᵀx  s.t.  Ux = u,  Vx − y − v = 0,  y ≤ 0,  U_ij x = y_ij
//! ```
//!
//! where `y_ij` is the agent's copy of the consensus value on the coupling
//! with neighbour `j`. Coupling blocks arrive in global-sum form
//! (`A_ij x_i + A_ji x_j = 0`); the higher-indexed agent of each pair negates
//! its block so that both endpoints describe the same shared quantity, and
//! the consensus set becomes `y_ij = y_ji`, reached by averaging.
//!
//! One iteration:
//!
//! 1. x-update from the stationarity conditions of the proximal subproblem,
//!    `W̃x = w̃ − Uᵀμ`, `Ux = u`, with
//!    `W̃ = G + W + ρ(VᵀV + Σ U_ijᵀU_ij)` and
//!    `w̃ = −w + G x(s) + Vᵀ(ρ(y + v) + λ) + Σ U_ijᵀ(ρ y_ij + λ_ij)`;
//! 2. send `U_ij x − λ_ij/ρ` to every neighbour;
//! 3. `y = min(0, Vx − v − λ/ρ)`, `λ ← λ − ρ(Vx − y − v)`,
//!    `y_ij = ½(own + received)`, `λ_ij ← λ_ij − ρ(U_ij x − y_ij)`;
//! 4. local stop flag, then min-consensus over the communication graph.

use std::collections::{BTreeMap, BTreeSet};

use lexinet_core::qp::{check_consistency, inf_norm, ShapeError};
use lexinet_core::{AgentId, AgentQp};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::consensus::{min_consensus_over, min_consensus_terminate};
use crate::transport::{by_sender, Payload, RoundMessage, Transport, TransportError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// Penalty parameter ρ.
    pub rho: f64,
    /// Proximal weight: G = g_scale · I.
    pub g_scale: f64,
    pub tol: f64,
    pub s_max: usize,
    pub warm_start: bool,
}

impl SolverConfig {
    /// Defaults for linear programs.
    pub fn lp() -> Self {
        Self {
            rho: 1.0,
            g_scale: 1.0,
            tol: 1e-5,
            s_max: 5000,
            warm_start: true,
        }
    }

    /// Defaults for quadratic programs.
    pub fn qp() -> Self {
        Self {
            rho: 0.1,
            g_scale: 0.1,
            tol: 1e-5 / 0.1,
            s_max: 5000,
            warm_start: true,
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |what: &str| Err(SolverError::InvalidConfig(what.to_string()));
        if !(self.rho > 0.0) {
            return bad("rho must be positive");
        }
        if !(self.g_scale > 0.0) {
            return bad("g_scale must be positive");
        }
        if !(self.tol > 0.0) {
            return bad("tol must be positive");
        }
        if self.s_max == 0 {
            return bad("s_max must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SolverError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("agent {agent}: {what} factorization failed")]
    SingularKkt { agent: AgentId, what: &'static str },
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("warm start has {got} iterates for {expected} agents")]
    WarmStart { got: usize, expected: usize },
}

/// Primal, slack and dual iterates of one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentIterate {
    pub x: DVector<f64>,
    /// Inequality slack, always ≤ 0.
    pub y: DVector<f64>,
    pub lambda: DVector<f64>,
    pub y_c: BTreeMap<AgentId, DVector<f64>>,
    pub lambda_c: BTreeMap<AgentId, DVector<f64>>,
}

impl AgentIterate {
    /// Starting point around `x0` with slacks consistent with it and zero duals.
    pub fn starting_at(qp: &AgentQp, oriented: &BTreeMap<AgentId, DMatrix<f64>>, x0: DVector<f64>) -> Self {
        let y = (&qp.ineq * &x0 - &qp.ineq_rhs).map(|r| r.min(0.0));
        let y_c = oriented.iter().map(|(&j, u)| (j, u * &x0)).collect();
        let lambda_c = oriented.iter().map(|(&j, u)| (j, DVector::zeros(u.nrows()))).collect();
        Self {
            lambda: DVector::zeros(qp.ineq.nrows()),
            x: x0,
            y,
            y_c,
            lambda_c,
        }
    }

    fn fits(&self, qp: &AgentQp) -> bool {
        self.x.len() == qp.dim()
            && self.y.len() == qp.ineq.nrows()
            && self.lambda.len() == qp.ineq.nrows()
            && self.y_c.len() == qp.couplings.len()
            && qp.couplings.iter().all(|(j, a)| {
                self.y_c.get(j).map(|v| v.len()) == Some(a.nrows())
                    && self.lambda_c.get(j).map(|v| v.len()) == Some(a.nrows())
            })
    }
}

/// Coupling blocks in copies-equal orientation.
pub fn orient_couplings(qp: &AgentQp) -> BTreeMap<AgentId, DMatrix<f64>> {
    qp.couplings
        .iter()
        .map(|(&j, a)| (j, if qp.agent < j { a.clone() } else { -a }))
        .collect()
}

/// Factorizations reused by every x-update of one agent.
#[derive(Debug, Clone)]
pub struct AgentFactorization {
    w_tilde: Cholesky<f64, Dyn>,
    /// W̃⁻¹Uᵀ.
    z: DMatrix<f64>,
    schur: Option<Cholesky<f64, Dyn>>,
}

impl AgentFactorization {
    pub fn new(
        qp: &AgentQp,
        oriented: &BTreeMap<AgentId, DMatrix<f64>>,
        config: &SolverConfig,
    ) -> Result<Self, SolverError> {
        let n = qp.dim();
        let mut w = &qp.quad + DMatrix::identity(n, n) * config.g_scale;
        w += qp.ineq.tr_mul(&qp.ineq) * config.rho;
        for u in oriented.values() {
            w += u.tr_mul(u) * config.rho;
        }
        // Symmetrize against round-off from the products above.
        let w = (&w + w.transpose()) * 0.5;
        let chol = Cholesky::new(w).ok_or(SolverError::SingularKkt {
            agent: qp.agent,
            what: "W̃",
        })?;
        let z = chol.solve(&qp.eq.transpose());
        let schur = if qp.eq.nrows() == 0 {
            None
        } else {
            let s = &qp.eq * &z;
            let s = (&s + s.transpose()) * 0.5;
            Some(Cholesky::new(s).ok_or(SolverError::SingularKkt {
                agent: qp.agent,
                what: "Schur complement",
            })?)
        };
        Ok(Self { w_tilde: chol, z, schur })
    }
}

/// x(s+1) from the proximal subproblem.
pub fn proximal_x_update(
    qp: &AgentQp,
    oriented: &BTreeMap<AgentId, DMatrix<f64>>,
    fact: &AgentFactorization,
    it: &AgentIterate,
    config: &SolverConfig,
) -> DVector<f64> {
    let rho = config.rho;
    let mut rhs = -&qp.lin + &it.x * config.g_scale;
    if qp.ineq.nrows() > 0 {
        let t = (&it.y + &qp.ineq_rhs) * rho + &it.lambda;
        rhs += qp.ineq.tr_mul(&t);
    }
    for (j, u) in oriented {
        let t = &it.y_c[j] * rho + &it.lambda_c[j];
        rhs += u.tr_mul(&t);
    }
    let x0 = fact.w_tilde.solve(&rhs);
    match &fact.schur {
        None => x0,
        Some(s) => {
            let mu = s.solve(&(&qp.eq * &x0 - &qp.eq_rhs));
            x0 - &fact.z * mu
        }
    }
}

/// U_ij x − λ_ij/ρ for every neighbour, with `it.x` already advanced.
pub fn coupling_payloads(
    oriented: &BTreeMap<AgentId, DMatrix<f64>>,
    it: &AgentIterate,
    config: &SolverConfig,
) -> BTreeMap<AgentId, DVector<f64>> {
    oriented
        .iter()
        .map(|(&j, u)| (j, u * &it.x - &it.lambda_c[&j] / config.rho))
        .collect()
}

/// Slack and dual updates given this agent's and its neighbours' payloads.
pub fn slack_dual_update(
    qp: &AgentQp,
    oriented: &BTreeMap<AgentId, DMatrix<f64>>,
    it: &mut AgentIterate,
    own: &BTreeMap<AgentId, DVector<f64>>,
    inbox: &BTreeMap<AgentId, DVector<f64>>,
    config: &SolverConfig,
) -> Result<(), SolverError> {
    let rho = config.rho;
    let vx = &qp.ineq * &it.x;
    let y = (&vx - &qp.ineq_rhs - &it.lambda / rho).map(|r| r.min(0.0));
    it.lambda -= (&vx - &y - &qp.ineq_rhs) * rho;
    it.y = y;
    for (&j, u) in oriented {
        let theirs = inbox.get(&j).ok_or(TransportError::MissingMessage {
            to: qp.agent,
            from: j,
            round: 0,
        })?;
        let yc = (&own[&j] + theirs) * 0.5;
        let r = u * &it.x - &yc;
        *it.lambda_c.get_mut(&j).expect("dual per neighbour") -= r * rho;
        it.y_c.insert(j, yc);
    }
    Ok(())
}

/// Residuals of the stopping rule for one agent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LocalResidual {
    /// ‖Vx − y − v‖∞.
    pub ineq: f64,
    /// max_j ‖U_ij x − y_ij‖∞.
    pub coupling: f64,
    /// ‖x(s+1) − x(s)‖∞.
    pub step: f64,
}

impl LocalResidual {
    pub fn primal(&self) -> f64 {
        self.ineq.max(self.coupling)
    }

    /// The primal conditions together with a step of at most `tol`. The step
    /// clause guards against stopping on the first iterations, where the
    /// slack and consensus copies trivially match a barely moved x.
    pub fn satisfied(&self, tol: f64) -> bool {
        self.ineq <= tol && self.coupling <= tol && self.step <= tol
    }
}

pub fn local_residual(
    qp: &AgentQp,
    oriented: &BTreeMap<AgentId, DMatrix<f64>>,
    it: &AgentIterate,
    x_prev: &DVector<f64>,
) -> LocalResidual {
    let ineq = inf_norm(&(&qp.ineq * &it.x - &it.y - &qp.ineq_rhs));
    let coupling = oriented
        .iter()
        .map(|(j, u)| inf_norm(&(u * &it.x - &it.y_c[j])))
        .fold(0.0f64, f64::max);
    LocalResidual {
        ineq,
        coupling,
        step: inf_norm(&(&it.x - x_prev)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    /// Largest primal stopping residual over agents.
    pub residual: f64,
    /// Largest step ‖x(s+1) − x(s)‖∞ over agents.
    pub step: f64,
    /// Σ_i ½x_iᵀW_ix_i + w_iᵀx_i.
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub converged: bool,
    pub iterations: usize,
    /// Primal residual of the returned iterate.
    pub residual: f64,
    pub cost: f64,
    pub trace: Vec<TraceRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub x: Vec<DVector<f64>>,
    pub iterates: Vec<AgentIterate>,
    pub report: ConvergenceReport,
}

struct Agent<'a> {
    qp: &'a AgentQp,
    oriented: BTreeMap<AgentId, DMatrix<f64>>,
    fact: AgentFactorization,
    it: AgentIterate,
    x_prev: DVector<f64>,
    own: BTreeMap<AgentId, DVector<f64>>,
    residual: LocalResidual,
}

impl Agent<'_> {
    fn x_phase<T: Transport + ?Sized>(&mut self, cfg: &SolverConfig, transport: &T, round: u64) -> Result<(), SolverError> {
        let x = proximal_x_update(self.qp, &self.oriented, &self.fact, &self.it, cfg);
        self.x_prev = std::mem::replace(&mut self.it.x, x);
        self.own = coupling_payloads(&self.oriented, &self.it, cfg);
        for (&j, p) in &self.own {
            transport.post(RoundMessage {
                from: self.qp.agent,
                to: j,
                round,
                payload: Payload::Coupling(p.iter().copied().collect()),
            })?;
        }
        Ok(())
    }

    fn dual_phase<T: Transport + ?Sized>(&mut self, cfg: &SolverConfig, transport: &T, round: u64) -> Result<(), SolverError> {
        let me = self.qp.agent;
        let msgs = transport.collect(me, round)?;
        let inbox = by_sender(me, round, msgs, self.oriented.keys().copied())?
            .into_iter()
            .map(|(j, p)| match p {
                Payload::Coupling(v) if v.len() == self.oriented[&j].nrows() => Ok((j, DVector::from_vec(v))),
                _ => Err(TransportError::Failure(format!(
                    "agent {me}: malformed payload from {j} in round {round}"
                ))),
            })
            .collect::<Result<BTreeMap<_, _>, _>>()?;
        slack_dual_update(self.qp, &self.oriented, &mut self.it, &self.own, &inbox, cfg)?;
        self.residual = local_residual(self.qp, &self.oriented, &self.it, &self.x_prev);
        Ok(())
    }
}

/// Shifts a previous step's iterates forward by one prediction step where
/// the vector lengths are multiples of `horizon`; other vectors are reused
/// unchanged. Returns `None` for agents whose dimensions changed.
pub fn shift_warm_start(prev: &[AgentIterate], problems: &[AgentQp], horizon: usize) -> Vec<Option<AgentIterate>> {
    fn shift(v: &DVector<f64>, horizon: usize) -> DVector<f64> {
        let n = v.len();
        if horizon < 2 || n == 0 || !n.is_multiple_of(horizon) {
            return v.clone();
        }
        let b = n / horizon;
        let mut out = v.clone();
        out.rows_mut(0, n - b).copy_from(&v.rows(b, n - b));
        out
    }
    problems
        .iter()
        .enumerate()
        .map(|(i, qp)| {
            let p = prev.get(i)?;
            if !p.fits(qp) {
                return None;
            }
            Some(AgentIterate {
                x: shift(&p.x, horizon),
                y: shift(&p.y, horizon).map(|r| r.min(0.0)),
                lambda: shift(&p.lambda, horizon),
                y_c: p.y_c.iter().map(|(&j, v)| (j, shift(v, horizon))).collect(),
                lambda_c: p.lambda_c.iter().map(|(&j, v)| (j, shift(v, horizon))).collect(),
            })
        })
        .collect()
}

/// Runs the distributed algorithm to termination or `s_max` iterations.
///
/// `warm` supplies optional starting iterates per agent; agents without one
/// start from zero. When `s_max` is reached the iterate with the smallest
/// primal residual is returned with `converged = false`.
pub fn dist_sol<T: Transport + ?Sized>(
    problems: &[AgentQp],
    config: &SolverConfig,
    transport: &T,
    warm: Option<&[Option<AgentIterate>]>,
) -> Result<Solution, SolverError> {
    config.validate()?;
    check_consistency(problems)?;
    if let Some(w) = warm {
        if w.len() != problems.len() {
            return Err(SolverError::WarmStart {
                got: w.len(),
                expected: problems.len(),
            });
        }
    }

    let mut agents: Vec<Agent> = problems
        .par_iter()
        .enumerate()
        .map(|(i, qp)| {
            let oriented = orient_couplings(qp);
            let fact = AgentFactorization::new(qp, &oriented, config)?;
            let it = match warm.and_then(|w| w[i].clone()) {
                Some(it) if it.fits(qp) => it,
                _ => AgentIterate::starting_at(qp, &oriented, DVector::zeros(qp.dim())),
            };
            Ok(Agent {
                qp,
                x_prev: it.x.clone(),
                oriented,
                fact,
                it,
                own: BTreeMap::new(),
                residual: LocalResidual::default(),
            })
        })
        .collect::<Result<_, SolverError>>()?;

    let adjacency: BTreeMap<AgentId, BTreeSet<AgentId>> = problems
        .iter()
        .map(|p| (p.agent, p.couplings.keys().copied().collect()))
        .collect();
    let rounds = problems.len();
    let mut round: u64 = 0;
    let mut trace = Vec::new();
    let mut best: Option<(f64, Vec<AgentIterate>)> = None;
    let mut converged = false;
    let mut iterations = 0;

    for s in 1..=config.s_max {
        iterations = s;
        agents
            .par_iter_mut()
            .try_for_each(|a| a.x_phase(config, transport, round))?;
        agents
            .par_iter_mut()
            .try_for_each(|a| a.dual_phase(config, transport, round))?;
        round += 1;

        let residual = agents.iter().map(|a| a.residual.primal()).fold(0.0f64, f64::max);
        let step = agents.iter().map(|a| a.residual.step).fold(0.0f64, f64::max);
        let cost: f64 = agents.iter().map(|a| a.qp.objective(&a.it.x)).sum();
        trace.push(TraceRow {
            iteration: s,
            residual,
            step,
            cost,
        });

        let flags: BTreeMap<AgentId, bool> = agents
            .iter()
            .map(|a| (a.qp.agent, a.residual.satisfied(config.tol)))
            .collect();
        let agreed = min_consensus_over(transport, &adjacency, &flags, rounds, round)?;
        round += rounds as u64;
        if min_consensus_terminate(&agreed) {
            converged = true;
            break;
        }
        if best.as_ref().is_none_or(|(r, _)| residual < *r) {
            best = Some((residual, agents.iter().map(|a| a.it.clone()).collect()));
        }
    }

    let iterates: Vec<AgentIterate> = if converged {
        agents.into_iter().map(|a| a.it).collect()
    } else {
        let (r, its) = best.expect("at least one iteration ran");
        log::warn!("ADMM stopped at s_max = {} with residual {r:.3e}", config.s_max);
        its
    };
    let x: Vec<DVector<f64>> = iterates.iter().map(|it| it.x.clone()).collect();
    let cost = problems.iter().zip(&x).map(|(p, x)| p.objective(x)).sum();
    let residual = if converged {
        trace.last().map(|t| t.residual).unwrap_or(0.0)
    } else {
        best_residual(problems, &iterates)
    };
    Ok(Solution {
        x,
        iterates,
        report: ConvergenceReport {
            converged,
            iterations,
            residual,
            cost,
            trace,
        },
    })
}

fn best_residual(problems: &[AgentQp], iterates: &[AgentIterate]) -> f64 {
    problems
        .iter()
        .zip(iterates)
        .map(|(qp, it)| {
            let oriented = orient_couplings(qp);
            local_residual(qp, &oriented, it, &it.x).primal()
        })
        .fold(0.0f64, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(w: f64, lin: f64) -> AgentQp {
        let mut qp = AgentQp::empty(1, 1);
        qp.quad[(0, 0)] = w;
        qp.lin[0] = lin;
        qp
    }

    fn cfg(rho: f64, g: f64) -> SolverConfig {
        SolverConfig {
            rho,
            g_scale: g,
            tol: 1e-8,
            s_max: 10,
            warm_start: false,
        }
    }

    fn x_update(qp: &AgentQp, x: f64, c: SolverConfig) -> f64 {
        let oriented = orient_couplings(qp);
        let fact = AgentFactorization::new(qp, &oriented, &c).unwrap();
        let mut it = AgentIterate::starting_at(qp, &oriented, DVector::from_element(1, x));
        it.y.fill(0.0);
        proximal_x_update(qp, &oriented, &fact, &it, &c)[0]
    }

    #[test]
    fn equality_pins_the_variable() {
        let mut qp = scalar(0.0, 0.0);
        qp.eq = DMatrix::from_element(1, 1, 1.0);
        qp.eq_rhs = DVector::from_element(1, 3.0);
        assert!((x_update(&qp, 17.0, cfg(1.0, 1.0)) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn unconstrained_proximal_step() {
        // ½·2x² + 4x + ½·2(x − 1)²  →  x = −1/2
        let qp = scalar(2.0, 4.0);
        assert!((x_update(&qp, 1.0, cfg(1.0, 2.0)) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn inequality_memory_term() {
        let mut qp = scalar(0.0, 0.0);
        qp.ineq = DMatrix::from_element(1, 1, 1.0);
        qp.ineq_rhs = DVector::zeros(1);
        assert!((x_update(&qp, 2.0, cfg(1.0, 1.0)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn slack_is_clamped_elementwise() {
        let mut qp = AgentQp::empty(1, 1);
        qp.ineq = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        qp.ineq_rhs = DVector::from_vec(vec![0.0, 5.0]);
        let oriented = orient_couplings(&qp);
        let mut it = AgentIterate::starting_at(&qp, &oriented, DVector::from_element(1, 2.0));
        // Vx − v − λ/ρ = (2, −3)
        slack_dual_update(&qp, &oriented, &mut it, &BTreeMap::new(), &BTreeMap::new(), &cfg(1.0, 1.0)).unwrap();
        assert_eq!(it.y.as_slice(), &[0.0, -3.0]);
        // λ(s+1) = λ(s) − ρ(Vx − y − v)
        assert_eq!(it.lambda.as_slice(), &[-2.0, 0.0]);
    }

    #[test]
    fn consensus_average_and_dual() {
        let mut qp = AgentQp::empty(1, 1);
        qp.couplings.insert(2, DMatrix::from_element(1, 1, 1.0));
        let oriented = orient_couplings(&qp);
        let mut it = AgentIterate::starting_at(&qp, &oriented, DVector::from_element(1, 4.0));
        let own = coupling_payloads(&oriented, &it, &cfg(1.0, 1.0));
        assert_eq!(own[&2][0], 4.0);
        let inbox = [(2, DVector::from_element(1, 2.0))].into_iter().collect();
        slack_dual_update(&qp, &oriented, &mut it, &own, &inbox, &cfg(1.0, 1.0)).unwrap();
        assert_eq!(it.y_c[&2][0], 3.0);
        assert_eq!(it.lambda_c[&2][0], -1.0);
    }

    #[test]
    fn missing_neighbor_payload() {
        let mut qp = AgentQp::empty(1, 1);
        qp.couplings.insert(2, DMatrix::from_element(1, 1, 1.0));
        let oriented = orient_couplings(&qp);
        let mut it = AgentIterate::starting_at(&qp, &oriented, DVector::zeros(1));
        let own = coupling_payloads(&oriented, &it, &cfg(1.0, 1.0));
        let err = slack_dual_update(&qp, &oriented, &mut it, &own, &BTreeMap::new(), &cfg(1.0, 1.0));
        assert!(matches!(
            err,
            Err(SolverError::Transport(TransportError::MissingMessage { from: 2, .. }))
        ));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut c = SolverConfig::lp();
        c.g_scale = 0.0;
        assert!(matches!(c.validate(), Err(SolverError::InvalidConfig(_))));
    }

    #[test]
    fn warm_start_shifts_by_one_block() {
        let qp = AgentQp::empty(1, 4);
        let oriented = orient_couplings(&qp);
        let it = AgentIterate::starting_at(&qp, &oriented, DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]));
        let out = shift_warm_start(&[it], &[qp], 2);
        assert_eq!(out[0].as_ref().unwrap().x.as_slice(), &[3.0, 4.0, 3.0, 4.0]);
    }
}
