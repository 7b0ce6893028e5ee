//! Per-agent assembly of the MPC programs.
//!
//! Every agent owns a stacked variable vector laid out k-major:
//!
//! ```text
//! x_i = col_k { n(t+k+1), q(t+k+1), f_d(t+k), f_u(t+k), g(t+k) }
//! ```
//!
//! with ids sorted inside each block. Links crossing between two agents
//! appear in both layouts and are tied together by coupling rows.
//!
//! Row ownership, so that every constraint instance is written exactly once:
//!
//! * conservation, availability, storage, admission, queue and smoothness
//!   rows belong to the owner of the link's source junction, which is the
//!   only agent holding all upstream flows;
//! * green-capacity and exit-capacity rows belong to the owner of the
//!   link's destination junction, which holds the phase splits;
//! * signal budget and split sign rows belong to the junction's owner.
//!
//! The signal-control cost terms of a link are likewise charged to the owner
//! of its source junction.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::dynamics::{ControlInput, ExogenousForecast, Family, Subject, TrafficState};
use crate::network::{AgentId, LinkId, Network, Partition, PhaseKey};
use crate::qp::{inf_norm, AgentQp, AgentQpDump};

/// Minimum eigenvalue of U Uᵀ accepted as full row rank.
pub const RANK_TOL: f64 = 1e-10;
/// Extracted controls below this are reported as negative.
pub const NEGATIVE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VarKey {
    /// n_z(t+k+1).
    Occupancy { link: LinkId, k: usize },
    /// q_z(t+k+1).
    Queue { link: LinkId, k: usize },
    /// f_z^d(t+k).
    Outflow { link: LinkId, k: usize },
    /// f_z^u(t+k).
    Admission { link: LinkId, k: usize },
    /// g_p(t+k).
    Split { phase: PhaseKey, k: usize },
}

impl fmt::Display for VarKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VarKey::Occupancy { link, k } => write!(f, "n[{link}](t+{})", k + 1),
            VarKey::Queue { link, k } => write!(f, "q[{link}](t+{})", k + 1),
            VarKey::Outflow { link, k } => write!(f, "fd[{link}](t+{k})"),
            VarKey::Admission { link, k } => write!(f, "fu[{link}](t+{k})"),
            VarKey::Split { phase, k } => write!(f, "g[{phase}](t+{k})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariableLayout {
    pub agent: AgentId,
    pub horizon: usize,
    pub n_links: Vec<LinkId>,
    pub q_links: Vec<LinkId>,
    pub fd_links: Vec<LinkId>,
    pub fu_links: Vec<LinkId>,
    pub phases: Vec<PhaseKey>,
}

impl VariableLayout {
    /// Variables per prediction step.
    pub fn block(&self) -> usize {
        self.n_links.len() + self.q_links.len() + self.fd_links.len() + self.fu_links.len() + self.phases.len()
    }

    pub fn len(&self) -> usize {
        self.horizon * self.block()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn position(&self, key: &VarKey) -> Option<usize> {
        let (k, offset, idx) = match key {
            VarKey::Occupancy { link, k } => (*k, 0, self.n_links.binary_search(link).ok()?),
            VarKey::Queue { link, k } => (*k, self.n_links.len(), self.q_links.binary_search(link).ok()?),
            VarKey::Outflow { link, k } => (
                *k,
                self.n_links.len() + self.q_links.len(),
                self.fd_links.binary_search(link).ok()?,
            ),
            VarKey::Admission { link, k } => (
                *k,
                self.n_links.len() + self.q_links.len() + self.fd_links.len(),
                self.fu_links.binary_search(link).ok()?,
            ),
            VarKey::Split { phase, k } => (
                *k,
                self.block() - self.phases.len(),
                self.phases.binary_search(phase).ok()?,
            ),
        };
        (k < self.horizon).then(|| k * self.block() + offset + idx)
    }

    /// Inverse of [`position`](Self::position).
    pub fn key(&self, pos: usize) -> VarKey {
        let b = self.block();
        let (k, mut r) = (pos / b, pos % b);
        if r < self.n_links.len() {
            return VarKey::Occupancy {
                link: self.n_links[r],
                k,
            };
        }
        r -= self.n_links.len();
        if r < self.q_links.len() {
            return VarKey::Queue {
                link: self.q_links[r],
                k,
            };
        }
        r -= self.q_links.len();
        if r < self.fd_links.len() {
            return VarKey::Outflow {
                link: self.fd_links[r],
                k,
            };
        }
        r -= self.fd_links.len();
        if r < self.fu_links.len() {
            return VarKey::Admission {
                link: self.fu_links[r],
                k,
            };
        }
        r -= self.fu_links.len();
        VarKey::Split {
            phase: self.phases[r].clone(),
            k,
        }
    }

    pub fn keys(&self) -> Vec<VarKey> {
        (0..self.len()).map(|p| self.key(p)).collect()
    }

    /// Builds a vector by evaluating `value` at every key.
    pub fn pack(&self, value: impl Fn(&VarKey) -> f64) -> DVector<f64> {
        DVector::from_iterator(self.len(), (0..self.len()).map(|p| value(&self.key(p))))
    }

    fn at(&self, key: VarKey) -> usize {
        self.position(&key)
            .unwrap_or_else(|| panic!("agent {}: {key} is not in the layout", self.agent))
    }
}

/// Variable layouts of every agent for a horizon of `k` steps.
pub fn layout_variables(net: &Network, partition: &Partition, horizon: usize) -> Vec<VariableLayout> {
    partition
        .agents()
        .iter()
        .map(|scope| {
            let touches: Vec<LinkId> = net
                .links()
                .values()
                .filter(|l| scope.junctions.contains(&l.source) || scope.junctions.contains(&l.dest))
                .map(|l| l.id)
                .collect();
            let sources: Vec<LinkId> = net
                .links()
                .values()
                .filter(|l| scope.boundary.contains(&l.source))
                .map(|l| l.id)
                .collect();
            let phases: Vec<PhaseKey> = net
                .phase_keys()
                .into_iter()
                .filter(|p| scope.internal.contains(&p.junction))
                .collect();
            VariableLayout {
                agent: scope.id,
                horizon,
                n_links: touches.clone(),
                q_links: sources.clone(),
                fd_links: touches,
                fu_links: sources,
                phases,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RowTag {
    pub family: Family,
    pub subject: Subject,
    pub k: usize,
}

impl fmt::Display for RowTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}[{}](k={})", self.family, self.subject, self.k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SharedQuantity {
    Occupancy,
    Outflow,
    Virtual,
}

/// Identifies one coupling row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CouplingTag {
    pub quantity: SharedQuantity,
    /// Shared link; 0 for the virtual-variable row.
    pub link: LinkId,
    pub k: usize,
}

/// Cost of a stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Φ1: total predicted boundary queue.
    Perimeter,
    /// Φ3 + α Φ2 + β Σ q².
    Signal { alpha: f64, beta: f64 },
    /// θ Φ1 + α Φ2 + Φ3.
    Weighted { theta: f64, alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildOptions {
    /// Tightening of the smoothness and signal-budget right-hand sides, in
    /// vehicles and seconds respectively. Both rows can be tightened without
    /// affecting feasibility of a nondegenerate instance, which keeps
    /// solver-tolerance violations strictly inside the true constraints.
    pub backoff: f64,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self { backoff: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalProblem {
    pub qp: AgentQp,
    pub layout: VariableLayout,
    /// c_i, with c_iᵀx = this agent's share of Φ1.
    pub perimeter: DVector<f64>,
    /// Cost term independent of x (measured n(t) in Φ2).
    pub constant: f64,
    pub eq_tags: Vec<RowTag>,
    pub ineq_tags: Vec<RowTag>,
    /// Factor each row was divided by during scaling.
    pub eq_scale: Vec<f64>,
    pub ineq_scale: Vec<f64>,
    pub coupling_tags: BTreeMap<AgentId, Vec<CouplingTag>>,
    /// Neighbours with a virtual variable appended after the layout, in order.
    pub virtual_neighbors: Vec<AgentId>,
}

impl LocalProblem {
    pub fn agent(&self) -> AgentId {
        self.qp.agent
    }

    /// Cost including the constant term.
    pub fn cost(&self, x: &DVector<f64>) -> f64 {
        self.qp.objective(x) + self.constant
    }

    pub fn perimeter_cost(&self, x: &DVector<f64>) -> f64 {
        self.perimeter.dot(x)
    }

    /// Label of every column, virtual variables included.
    pub fn labels(&self) -> Vec<String> {
        let mut out: Vec<String> = self.layout.keys().iter().map(ToString::to_string).collect();
        out.extend(self.virtual_neighbors.iter().map(|j| format!("v[{}->{j}]", self.agent())));
        out
    }

    pub fn dump(&self) -> AgentQpDump {
        let mut d = AgentQpDump::from_qp(&self.qp);
        d.labels = self.labels();
        d.eq_labels = self.eq_tags.iter().map(ToString::to_string).collect();
        d.ineq_labels = self.ineq_tags.iter().map(ToString::to_string).collect();
        d.perimeter = self.perimeter.iter().copied().collect();
        d.constant = self.constant;
        d
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ProblemError {
    #[error("prediction horizon must be at least 1")]
    EmptyHorizon,
    #[error("step {k} lies outside the horizon of {horizon} steps")]
    StepOutOfHorizon { k: usize, horizon: usize },
    #[error("forecast covers {got} steps, expected {expected}")]
    ForecastLength { got: usize, expected: usize },
    #[error("agent {agent}: row {tag} has no variables but requires 0 <= {rhs}")]
    InfeasibleDetected { agent: AgentId, tag: RowTag, rhs: f64 },
    #[error("agent {agent}: equality block is rank deficient (min eigenvalue of UUᵀ {min_eig:.3e})")]
    RankDeficient { agent: AgentId, min_eig: f64 },
    #[error("perimeter solution of agent {agent} is not converged: residual {residual:.3e} > {tol:.3e}")]
    NotConverged { agent: AgentId, residual: f64, tol: f64 },
    #[error("expected {expected} perimeter solutions, got {got}")]
    SolutionCount { expected: usize, got: usize },
    #[error("agent {agent}: solution has length {got}, layout has {expected}")]
    SolutionLength { agent: AgentId, got: usize, expected: usize },
}

struct SparseRow {
    coeffs: Vec<(usize, f64)>,
    rhs: f64,
    tag: RowTag,
}

struct RowSet {
    agent: AgentId,
    dim: usize,
    rows: Vec<SparseRow>,
}

impl RowSet {
    fn new(agent: AgentId, dim: usize) -> Self {
        Self {
            agent,
            dim,
            rows: Vec::new(),
        }
    }

    fn push(&mut self, coeffs: Vec<(usize, f64)>, rhs: f64, tag: RowTag) -> Result<(), ProblemError> {
        if coeffs.iter().all(|&(_, c)| c == 0.0) {
            // A row without variables is either vacuous or impossible.
            if rhs < 0.0 {
                return Err(ProblemError::InfeasibleDetected {
                    agent: self.agent,
                    tag,
                    rhs,
                });
            }
            return Ok(());
        }
        self.rows.push(SparseRow { coeffs, rhs, tag });
        Ok(())
    }

    /// Dense matrix, right side, tags and scale factors with every row
    /// divided by its largest coefficient magnitude.
    fn finish(self) -> (DMatrix<f64>, DVector<f64>, Vec<RowTag>, Vec<f64>) {
        let m = self.rows.len();
        let mut a = DMatrix::zeros(m, self.dim);
        let mut b = DVector::zeros(m);
        let mut tags = Vec::with_capacity(m);
        let mut scales = Vec::with_capacity(m);
        for (r, row) in self.rows.into_iter().enumerate() {
            for &(c, v) in &row.coeffs {
                a[(r, c)] += v;
            }
            let s = a.row(r).iter().fold(0.0f64, |m: f64, v: &f64| m.max(v.abs()));
            a.row_mut(r).unscale_mut(s);
            b[r] = row.rhs / s;
            tags.push(row.tag);
            scales.push(s);
        }
        (a, b, tags, scales)
    }
}

fn min_gram_eigenvalue(u: &DMatrix<f64>) -> f64 {
    if u.nrows() == 0 {
        return f64::INFINITY;
    }
    let gram = u * u.transpose();
    SymmetricEigen::new(gram).eigenvalues.iter().fold(f64::INFINITY, |m, &v| m.min(v))
}

/// Assembles every agent's program for one control step.
pub fn build_problems(
    net: &Network,
    partition: &Partition,
    state: &TrafficState,
    forecast: &ExogenousForecast,
    objective: Objective,
    options: BuildOptions,
) -> Result<Vec<LocalProblem>, ProblemError> {
    let horizon = forecast.horizon();
    if horizon == 0 {
        return Err(ProblemError::EmptyHorizon);
    }
    let layouts = layout_variables(net, partition, horizon);
    layouts
        .into_iter()
        .map(|layout| build_agent(net, partition, state, forecast, objective, options, layout))
        .collect()
}

/// The perimeter-control LP: minimize Φ1.
pub fn build_pc_problem(
    net: &Network,
    partition: &Partition,
    state: &TrafficState,
    forecast: &ExogenousForecast,
    options: BuildOptions,
) -> Result<Vec<LocalProblem>, ProblemError> {
    build_problems(net, partition, state, forecast, Objective::Perimeter, options)
}

/// The single-stage weighted QP θΦ1 + αΦ2 + Φ3.
pub fn build_weighted_problem(
    net: &Network,
    partition: &Partition,
    state: &TrafficState,
    forecast: &ExogenousForecast,
    theta: f64,
    alpha: f64,
    options: BuildOptions,
) -> Result<Vec<LocalProblem>, ProblemError> {
    build_problems(net, partition, state, forecast, Objective::Weighted { theta, alpha }, options)
}

fn build_agent(
    net: &Network,
    partition: &Partition,
    state: &TrafficState,
    forecast: &ExogenousForecast,
    objective: Objective,
    options: BuildOptions,
    layout: VariableLayout,
) -> Result<LocalProblem, ProblemError> {
    let agent = layout.agent;
    let scope = partition.agent(agent);
    let dim = layout.len();
    let horizon = layout.horizon;
    let owner = |j: &str| partition.owner(j);
    let mut eq = RowSet::new(agent, dim);
    let mut ineq = RowSet::new(agent, dim);
    let l = &layout;

    for (k, exo) in forecast.steps.iter().enumerate() {
        let n_prev = |z: LinkId, coeff: f64, row: &mut Vec<(usize, f64)>| {
            if k > 0 {
                row.push((l.at(VarKey::Occupancy { link: z, k: k - 1 }), coeff));
            }
        };
        let measured = |z: LinkId| if k == 0 { state.n(z) } else { 0.0 };
        let fd = |z: LinkId| l.at(VarKey::Outflow { link: z, k });

        for (&z, link) in net.links() {
            let tag = |family| RowTag {
                family,
                subject: Subject::Link(z),
                k,
            };
            let source = net.is_source(z);
            if owner(&link.source) == agent {
                let e = exo.e(z);
                // Conservation.
                let mut row = vec![(l.at(VarKey::Occupancy { link: z, k }), 1.0)];
                n_prev(z, -1.0, &mut row);
                for &(w, _) in net.upstream(z) {
                    row.push((fd(w), -exo.ratio(net, w, z)));
                }
                row.push((fd(z), 1.0));
                if source {
                    row.push((l.at(VarKey::Admission { link: z, k }), -1.0));
                }
                eq.push(row, e + measured(z), tag(Family::Conservation))?;

                if source {
                    let q = l.at(VarKey::Queue { link: z, k });
                    let fu = l.at(VarKey::Admission { link: z, k });
                    let mut row = vec![(q, 1.0), (fu, 1.0)];
                    if k > 0 {
                        row.push((l.at(VarKey::Queue { link: z, k: k - 1 }), -1.0));
                    }
                    let q0 = if k == 0 { state.q(z) } else { 0.0 };
                    eq.push(row, exo.d(z) + q0, tag(Family::QueueBalance))?;
                }

                // 0 <= f_d <= n + f_u + e.
                ineq.push(vec![(fd(z), -1.0)], 0.0, tag(Family::OutflowNonNegative))?;
                let mut row = vec![(fd(z), 1.0)];
                n_prev(z, -1.0, &mut row);
                if source {
                    row.push((l.at(VarKey::Admission { link: z, k }), -1.0));
                }
                ineq.push(row, e + measured(z), tag(Family::OutflowAvailability))?;

                // Receiving space.
                let space = link.capacity - e - measured(z);
                if source {
                    let fu = l.at(VarKey::Admission { link: z, k });
                    let mut row = vec![(fu, 1.0)];
                    n_prev(z, 1.0, &mut row);
                    if k == 0 {
                        // Both bounds on f_u(t) are constants here and often
                        // coincide, which makes the pair degenerate for ADMM.
                        // Only the tighter one is kept.
                        let queued = state.q(z) + exo.d(z);
                        if space <= queued {
                            ineq.push(row, space, tag(Family::AdmissionStorage))?;
                        } else {
                            ineq.push(row, queued, tag(Family::QueueNonNegative))?;
                        }
                    } else {
                        ineq.push(row, space, tag(Family::AdmissionStorage))?;
                        ineq.push(
                            vec![(l.at(VarKey::Queue { link: z, k }), -1.0)],
                            0.0,
                            tag(Family::QueueNonNegative),
                        )?;
                    }
                    ineq.push(vec![(fu, -1.0)], 0.0, tag(Family::AdmissionNonNegative))?;
                } else {
                    let mut row: Vec<(usize, f64)> = net
                        .upstream(z)
                        .iter()
                        .map(|&(w, _)| (fd(w), exo.ratio(net, w, z)))
                        .collect();
                    n_prev(z, 1.0, &mut row);
                    ineq.push(row, space, tag(Family::Storage))?;
                }

                // n − f_d <= γ n̄.
                let mut row = vec![(fd(z), -1.0)];
                n_prev(z, 1.0, &mut row);
                ineq.push(
                    row,
                    link.gamma * link.capacity - measured(z) - options.backoff,
                    tag(Family::Smoothness),
                )?;
            }
            if owner(&link.dest) == agent {
                if net.is_boundary(&link.dest) {
                    let cap = link.dest_outflow_cap.unwrap_or(f64::INFINITY);
                    ineq.push(vec![(fd(z), 1.0)], cap, tag(Family::ExitCapacity))?;
                } else {
                    let mut row = vec![(fd(z), 1.0)];
                    for p in net.phases_of(z) {
                        row.push((l.at(VarKey::Split { phase: p, k }), -link.saturation_flow));
                    }
                    ineq.push(row, 0.0, tag(Family::GreenCapacity))?;
                }
            }
        }

        for j in &scope.internal {
            let junction = net.junction(j).expect("partition junctions exist");
            let mut budget = Vec::new();
            for i in 0..junction.phases.len() {
                let p = PhaseKey::new(j.clone(), i);
                let g = l.at(VarKey::Split { phase: p.clone(), k });
                budget.push((g, 1.0));
                ineq.push(
                    vec![(g, -1.0)],
                    0.0,
                    RowTag {
                        family: Family::SplitNonNegative,
                        subject: Subject::Phase(p),
                        k,
                    },
                )?;
            }
            ineq.push(
                budget,
                net.green_budget(j) - options.backoff,
                RowTag {
                    family: Family::SignalBudget,
                    subject: Subject::Junction(j.clone()),
                    k,
                },
            )?;
        }
    }

    let (u, u_rhs, eq_tags, eq_scale) = eq.finish();
    let (v, v_rhs, ineq_tags, ineq_scale) = ineq.finish();
    let min_eig = min_gram_eigenvalue(&u);
    if min_eig <= RANK_TOL {
        return Err(ProblemError::RankDeficient { agent, min_eig });
    }

    // Costs.
    let mut perimeter = DVector::zeros(dim);
    let mut quad = DMatrix::zeros(dim, dim);
    let mut lin = DVector::zeros(dim);
    let mut constant = 0.0;
    let (alpha, beta, theta, signal) = match objective {
        Objective::Perimeter => (0.0, 0.0, 1.0, false),
        Objective::Signal { alpha, beta } => (alpha, beta, 0.0, true),
        Objective::Weighted { theta, alpha } => (alpha, 0.0, theta, true),
    };
    for k in 0..horizon {
        for &z in &l.q_links {
            let q = l.at(VarKey::Queue { link: z, k });
            perimeter[q] = 1.0;
            lin[q] += theta;
            if signal {
                quad[(q, q)] += 2.0 * beta;
            }
        }
        if !signal {
            continue;
        }
        for (&z, link) in net.links() {
            if owner(&link.source) != agent {
                continue;
            }
            let n = l.at(VarKey::Occupancy { link: z, k });
            quad[(n, n)] += 2.0 / link.capacity;
            if k == 0 {
                constant += alpha * state.n(z);
            } else {
                lin[l.at(VarKey::Occupancy { link: z, k: k - 1 })] += alpha;
            }
            lin[l.at(VarKey::Outflow { link: z, k })] -= alpha;
        }
    }

    // Couplings.
    let mut couplings = BTreeMap::new();
    let mut coupling_tags = BTreeMap::new();
    for &j in &scope.neighbors {
        let shared = partition.shared_links(agent, j);
        let sign = if agent < j { 1.0 } else { -1.0 };
        let mut a = DMatrix::zeros(2 * shared.len() * horizon, dim);
        let mut tags = Vec::with_capacity(a.nrows());
        let mut r = 0;
        for k in 0..horizon {
            for &z in &shared {
                a[(r, l.at(VarKey::Occupancy { link: z, k }))] = sign;
                tags.push(CouplingTag {
                    quantity: SharedQuantity::Occupancy,
                    link: z,
                    k,
                });
                a[(r + 1, l.at(VarKey::Outflow { link: z, k }))] = sign;
                tags.push(CouplingTag {
                    quantity: SharedQuantity::Outflow,
                    link: z,
                    k,
                });
                r += 2;
            }
        }
        couplings.insert(j, a);
        coupling_tags.insert(j, tags);
    }

    Ok(LocalProblem {
        qp: AgentQp {
            agent,
            quad,
            lin,
            eq: u,
            eq_rhs: u_rhs,
            ineq: v,
            ineq_rhs: v_rhs,
            couplings,
        },
        layout,
        perimeter,
        constant,
        eq_tags,
        ineq_tags,
        eq_scale,
        ineq_scale,
        coupling_tags,
        virtual_neighbors: Vec::new(),
    })
}

/// The signal-control QP before lifting: same constraints as the perimeter
/// stage, cost Φ3 + αΦ2 + βΣq².
pub fn build_tsc_problem(
    net: &Network,
    partition: &Partition,
    state: &TrafficState,
    forecast: &ExogenousForecast,
    alpha: f64,
    beta: f64,
    options: BuildOptions,
) -> Result<Vec<LocalProblem>, ProblemError> {
    build_problems(net, partition, state, forecast, Objective::Signal { alpha, beta }, options)
}

/// Residual of a candidate solution against local and coupling constraints.
pub fn solution_residual(problems: &[LocalProblem], xs: &[DVector<f64>]) -> Vec<f64> {
    let qps: Vec<AgentQp> = problems.iter().map(|p| p.qp.clone()).collect();
    problems
        .iter()
        .zip(xs)
        .map(|(p, x)| {
            let mut r = p.qp.eq_residual(x).max(p.qp.ineq_violation(x));
            for (&j, a) in &p.qp.couplings {
                let back = &qps[j - 1].couplings[&p.agent()];
                r = r.max(inf_norm(&(a * x + back * &xs[j - 1])));
            }
            r
        })
        .collect()
}

/// Adds the lexicographic equality to signal-control problems.
///
/// Each agent gains one virtual variable per neighbour, one equality
/// `c_iᵀx + Σ_j v_ij = c_iᵀx_i^PC`, and one coupling row per neighbour
/// enforcing `v_ij + v_ji = 0`. Summed over agents the virtual variables
/// cancel, leaving `Σ_i c_iᵀx_i = Σ_i c_iᵀx_i^PC`.
///
/// `pc_solutions[i]` must satisfy the perimeter problem's constraints (in the
/// scaled rows of `problems`) to within `tol`.
pub fn lift_tsc_problem(
    problems: &[LocalProblem],
    pc_solutions: &[DVector<f64>],
    tol: f64,
) -> Result<Vec<LocalProblem>, ProblemError> {
    if problems.len() != pc_solutions.len() {
        return Err(ProblemError::SolutionCount {
            expected: problems.len(),
            got: pc_solutions.len(),
        });
    }
    for (p, x) in problems.iter().zip(pc_solutions) {
        if x.len() != p.qp.dim() {
            return Err(ProblemError::SolutionLength {
                agent: p.agent(),
                got: x.len(),
                expected: p.qp.dim(),
            });
        }
    }
    let residuals = solution_residual(problems, pc_solutions);
    for (p, &r) in problems.iter().zip(&residuals) {
        if !(r <= tol) {
            return Err(ProblemError::NotConverged {
                agent: p.agent(),
                residual: r,
                tol,
            });
        }
    }

    Ok(problems
        .iter()
        .zip(pc_solutions)
        .map(|(p, x_pc)| {
            let n = p.qp.dim();
            let neighbors: Vec<AgentId> = p.qp.couplings.keys().copied().collect();
            let m = neighbors.len();
            let dim = n + m;
            let agent = p.agent();

            let mut quad = DMatrix::zeros(dim, dim);
            quad.view_mut((0, 0), (n, n)).copy_from(&p.qp.quad);
            let mut lin = DVector::zeros(dim);
            lin.rows_mut(0, n).copy_from(&p.qp.lin);

            let rows = p.qp.eq.nrows();
            let mut eq = DMatrix::zeros(rows + 1, dim);
            eq.view_mut((0, 0), (rows, n)).copy_from(&p.qp.eq);
            for c in 0..n {
                eq[(rows, c)] = p.perimeter[c];
            }
            for v in 0..m {
                eq[(rows, n + v)] = 1.0;
            }
            let mut eq_rhs = DVector::zeros(rows + 1);
            eq_rhs.rows_mut(0, rows).copy_from(&p.qp.eq_rhs);
            eq_rhs[rows] = p.perimeter.dot(x_pc);

            let mut ineq = DMatrix::zeros(p.qp.ineq.nrows(), dim);
            ineq.view_mut((0, 0), (p.qp.ineq.nrows(), n)).copy_from(&p.qp.ineq);

            let mut couplings = BTreeMap::new();
            let mut coupling_tags = p.coupling_tags.clone();
            for (v, &j) in neighbors.iter().enumerate() {
                let a = &p.qp.couplings[&j];
                let mut lifted = DMatrix::zeros(a.nrows() + 1, dim);
                lifted.view_mut((0, 0), (a.nrows(), n)).copy_from(a);
                lifted[(a.nrows(), n + v)] = 1.0;
                couplings.insert(j, lifted);
                coupling_tags.get_mut(&j).expect("tags mirror couplings").push(CouplingTag {
                    quantity: SharedQuantity::Virtual,
                    link: 0,
                    k: 0,
                });
            }

            let mut perimeter = DVector::zeros(dim);
            perimeter.rows_mut(0, n).copy_from(&p.perimeter);
            let mut eq_tags = p.eq_tags.clone();
            eq_tags.push(RowTag {
                family: Family::Lexicographic,
                subject: Subject::Agent(agent),
                k: 0,
            });
            let mut eq_scale = p.eq_scale.clone();
            eq_scale.push(1.0);

            LocalProblem {
                qp: AgentQp {
                    agent,
                    quad,
                    lin,
                    eq,
                    eq_rhs,
                    ineq,
                    ineq_rhs: p.qp.ineq_rhs.clone(),
                    couplings,
                },
                layout: p.layout.clone(),
                perimeter,
                constant: p.constant,
                eq_tags,
                ineq_tags: p.ineq_tags.clone(),
                eq_scale,
                ineq_scale: p.ineq_scale.clone(),
                coupling_tags,
                virtual_neighbors: neighbors,
            }
        })
        .collect())
}

/// A control value that came out of the solver below zero.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeControl {
    pub agent: AgentId,
    pub variable: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExtractDiagnostics {
    /// g_z = f_z^d / S_z for links entering internal junctions.
    pub link_green: BTreeMap<LinkId, f64>,
    /// Largest disagreement between two agents' copies of a first-step
    /// outflow.
    pub max_copy_discrepancy: f64,
    /// Values below −1e-6 that were clamped to zero.
    pub negatives: Vec<NegativeControl>,
}

/// First-step controls from per-agent solutions.
pub fn extract_first_step_controls(
    net: &Network,
    partition: &Partition,
    problems: &[LocalProblem],
    solutions: &[DVector<f64>],
) -> Result<(ControlInput, ExtractDiagnostics), ProblemError> {
    extract_step_controls(net, partition, problems, solutions, 0)
}

/// Controls planned for prediction step `k` from per-agent solutions.
///
/// f_d of a shared link is read from the owner of its destination junction,
/// f_u from the owner of the source junction, g from the junction's owner.
/// Small negative values are clamped to zero; values below −1e-6 are also
/// reported.
pub fn extract_step_controls(
    net: &Network,
    partition: &Partition,
    problems: &[LocalProblem],
    solutions: &[DVector<f64>],
    k: usize,
) -> Result<(ControlInput, ExtractDiagnostics), ProblemError> {
    if let Some(p) = problems.first() {
        if k >= p.layout.horizon {
            return Err(ProblemError::StepOutOfHorizon { k, horizon: p.layout.horizon });
        }
    }
    if problems.len() != solutions.len() {
        return Err(ProblemError::SolutionCount {
            expected: problems.len(),
            got: solutions.len(),
        });
    }
    for (p, x) in problems.iter().zip(solutions) {
        if x.len() != p.qp.dim() {
            return Err(ProblemError::SolutionLength {
                agent: p.agent(),
                got: x.len(),
                expected: p.qp.dim(),
            });
        }
    }
    let mut diag = ExtractDiagnostics::default();
    let mut read = |agent: AgentId, key: VarKey| -> f64 {
        let p = &problems[agent - 1];
        let v = solutions[agent - 1][p.layout.at(key.clone())];
        if v < -NEGATIVE_TOL {
            log::debug!("agent {agent}: {key} = {v:.3e} clamped to zero");
            diag.negatives.push(NegativeControl {
                agent,
                variable: key.to_string(),
                value: v,
            });
        }
        v.max(0.0)
    };

    let mut control = ControlInput::default();
    for (&z, link) in net.links() {
        let dest_owner = partition.owner(&link.dest);
        let f = read(dest_owner, VarKey::Outflow { link: z, k });
        control.f_d.insert(z, f);
        if net.is_source(z) {
            let fu = read(partition.owner(&link.source), VarKey::Admission { link: z, k });
            control.f_u.insert(z, fu);
        }
    }
    for p in net.phase_keys() {
        let g = read(partition.owner(&p.junction), VarKey::Split { phase: p.clone(), k });
        control.g.insert(p, g);
    }
    for (&z, link) in net.links() {
        let (a, b) = (partition.owner(&link.source), partition.owner(&link.dest));
        if a != b {
            let key = VarKey::Outflow { link: z, k };
            let va = solutions[a - 1][problems[a - 1].layout.at(key.clone())];
            let vb = solutions[b - 1][problems[b - 1].layout.at(key)];
            let gap = (va - vb).abs();
            if gap > 0.0 {
                log::debug!("link {z}: copies differ by {gap:.3e}, using destination owner's value");
            }
            diag.max_copy_discrepancy = diag.max_copy_discrepancy.max(gap);
        }
        if !net.is_boundary(&link.dest) {
            diag.link_green.insert(z, control.f_d(z) / link.saturation_flow);
        }
    }
    Ok((control, diag))
}

/// Packs the trajectory induced by `controls` into each agent's layout.
/// Virtual variables, if any, are left out.
pub fn pack_trajectory(
    layout: &VariableLayout,
    traj: &[TrafficState],
    controls: &[ControlInput],
) -> DVector<f64> {
    layout.pack(|key| match key {
        VarKey::Occupancy { link, k } => traj[*k].n(*link),
        VarKey::Queue { link, k } => traj[*k].q(*link),
        VarKey::Outflow { link, k } => controls[*k].f_d(*link),
        VarKey::Admission { link, k } => controls[*k].f_u(*link),
        VarKey::Split { phase, k } => controls[*k].g(phase),
    })
}
