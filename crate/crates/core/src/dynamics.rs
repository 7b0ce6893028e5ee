//! Store-and-forward prediction, the macroscopic plant and constraint checks.
//!
//! All quantities are vehicle counts per control interval except splits,
//! which are seconds of green. Missing map entries read as zero.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use thiserror::Error;

use crate::network::{JunctionId, LinkId, Network, PhaseKey};

/// Constraint checks accept violations up to this amount.
pub const FEASIBILITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrafficState {
    /// Vehicles in each link.
    pub n: BTreeMap<LinkId, f64>,
    /// Vehicles queued at the boundary, per source link.
    pub q: BTreeMap<LinkId, f64>,
}

impl TrafficState {
    /// Empty network: every link and every source queue at zero.
    pub fn zeros(net: &Network) -> Self {
        Self {
            n: net.links().keys().map(|&z| (z, 0.0)).collect(),
            q: net.source_links().map(|z| (z, 0.0)).collect(),
        }
    }

    pub fn n(&self, z: LinkId) -> f64 {
        self.n.get(&z).copied().unwrap_or(0.0)
    }

    pub fn q(&self, z: LinkId) -> f64 {
        self.q.get(&z).copied().unwrap_or(0.0)
    }

    pub fn total_in_links(&self) -> f64 {
        self.n.values().sum()
    }

    pub fn total_queued(&self) -> f64 {
        self.q.values().sum()
    }
}

/// Exogenous data for one control interval.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExogenousStep {
    /// Demand d_z at source links.
    pub d: BTreeMap<LinkId, f64>,
    pub e_in: BTreeMap<LinkId, f64>,
    pub e_out: BTreeMap<LinkId, f64>,
    /// Turning-ratio overrides r_wz keyed by (w, z); absent pairs use the
    /// network's nominal ratios.
    pub ratios: BTreeMap<(LinkId, LinkId), f64>,
}

impl ExogenousStep {
    pub fn d(&self, z: LinkId) -> f64 {
        self.d.get(&z).copied().unwrap_or(0.0)
    }

    pub fn e_in(&self, z: LinkId) -> f64 {
        self.e_in.get(&z).copied().unwrap_or(0.0)
    }

    pub fn e_out(&self, z: LinkId) -> f64 {
        self.e_out.get(&z).copied().unwrap_or(0.0)
    }

    /// Net exogenous flow e_z = e_in − e_out.
    pub fn e(&self, z: LinkId) -> f64 {
        self.e_in(z) - self.e_out(z)
    }

    /// r_wz for this interval.
    pub fn ratio(&self, net: &Network, w: LinkId, z: LinkId) -> f64 {
        if let Some(&r) = self.ratios.get(&(w, z)) {
            return r;
        }
        net.link(w)
            .and_then(|l| l.turn_ratios.get(&z).copied())
            .unwrap_or(0.0)
    }
}

/// Exogenous data over a prediction horizon; `steps[k]` covers [t+k, t+k+1).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExogenousForecast {
    pub steps: Vec<ExogenousStep>,
}

impl ExogenousForecast {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// A horizon of `k` intervals with no exogenous traffic at all.
    pub fn empty(k: usize) -> Self {
        Self {
            steps: vec![ExogenousStep::default(); k],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ControlInput {
    /// Downstream flow f_z^d per link.
    pub f_d: BTreeMap<LinkId, f64>,
    /// Admitted boundary inflow f_z^u per source link.
    pub f_u: BTreeMap<LinkId, f64>,
    /// Green seconds per phase.
    pub g: BTreeMap<PhaseKey, f64>,
}

impl ControlInput {
    pub fn f_d(&self, z: LinkId) -> f64 {
        self.f_d.get(&z).copied().unwrap_or(0.0)
    }

    pub fn f_u(&self, z: LinkId) -> f64 {
        self.f_u.get(&z).copied().unwrap_or(0.0)
    }

    pub fn g(&self, p: &PhaseKey) -> f64 {
        self.g.get(p).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum DynamicsError {
    #[error("forecast covers {forecast} intervals but {controls} control inputs were given")]
    DimensionMismatch { forecast: usize, controls: usize },
}

fn inflow(net: &Network, exo: &ExogenousStep, control: &ControlInput, z: LinkId) -> f64 {
    net.upstream(z)
        .iter()
        .map(|&(w, _)| exo.ratio(net, w, z) * control.f_d(w))
        .sum()
}

/// One interval of the conservation and queue equations, without clamping.
fn advance(net: &Network, state: &TrafficState, exo: &ExogenousStep, control: &ControlInput) -> TrafficState {
    let n = net
        .links()
        .keys()
        .map(|&z| {
            let next = state.n(z) + exo.e(z) + inflow(net, exo, control, z) - control.f_d(z) + control.f_u(z);
            (z, next)
        })
        .collect();
    let q = net
        .source_links()
        .map(|z| (z, state.q(z) + exo.d(z) - control.f_u(z)))
        .collect();
    TrafficState { n, q }
}

/// Predicted states n(t+k+1|t), q(t+k+1|t) for k = 0..K−1.
pub fn predict_trajectory(
    net: &Network,
    state: &TrafficState,
    forecast: &ExogenousForecast,
    controls: &[ControlInput],
) -> Result<Vec<TrafficState>, DynamicsError> {
    if controls.len() != forecast.horizon() {
        return Err(DynamicsError::DimensionMismatch {
            forecast: forecast.horizon(),
            controls: controls.len(),
        });
    }
    let mut out = Vec::with_capacity(controls.len());
    let mut current = state.clone();
    for (exo, control) in forecast.steps.iter().zip(controls) {
        current = advance(net, &current, exo, control);
        out.push(current.clone());
    }
    Ok(out)
}

/// What the plant actually did during one interval.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantStep {
    pub next: TrafficState,
    /// Controls after clamping.
    pub applied: ControlInput,
    /// Exogenous data after noise and clamping; `ratios` is carried over.
    pub realized: ExogenousStep,
    /// True if any requested flow or exogenous quantity was reduced.
    pub clamped: bool,
}

/// Advances the macroscopic plant by one interval.
///
/// Demand is perturbed multiplicatively by `1 + ε`, `ε ~ U[−noise, noise]`,
/// drawn once per source link in link order. Requested controls are then
/// clamped to what the plant can physically do:
///
/// 1. trip ends `e_out` are limited to the vehicles present, and trip starts
///    `e_in` to the remaining storage;
/// 2. admissions `f_u` are limited to queued plus arriving demand and to the
///    link's free space `n̄ − n − e`;
/// 3. downstream flows `f_d` are limited by green time (or exit capacity)
///    and by the available mass `n + f_u + e`;
/// 4. for every link whose upstream flows `Σ r_wz f_w` exceed its free space
///    `n̄ − n − e`, the ratio space/inflow is computed, and each upstream
///    link's flow is scaled by the smallest ratio among its downstream links.
///
/// Queues absorb unserved demand.
pub fn step_plant<R: Rng + ?Sized>(
    net: &Network,
    state: &TrafficState,
    exo: &ExogenousStep,
    control: &ControlInput,
    noise: f64,
    rng: &mut R,
) -> PlantStep {
    let mut clamped = false;
    let mut realized = ExogenousStep {
        ratios: exo.ratios.clone(),
        ..Default::default()
    };
    for z in net.source_links() {
        let eps = if noise > 0.0 { rng.gen_range(-noise..=noise) } else { 0.0 };
        realized.d.insert(z, (exo.d(z) * (1.0 + eps)).max(0.0));
    }

    for (&z, link) in net.links() {
        let n = state.n(z);
        let e_out = exo.e_out(z).min(n + exo.e_in(z)).max(0.0);
        let e_in = exo.e_in(z).min((link.capacity - n + e_out).max(0.0)).max(0.0);
        clamped |= e_out < exo.e_out(z) || e_in < exo.e_in(z);
        if e_in != 0.0 || exo.e_in.contains_key(&z) {
            realized.e_in.insert(z, e_in);
        }
        if e_out != 0.0 || exo.e_out.contains_key(&z) {
            realized.e_out.insert(z, e_out);
        }
    }

    let mut applied = ControlInput {
        g: control.g.clone(),
        ..Default::default()
    };
    for z in net.source_links() {
        let link = net.l(z);
        let space = (link.capacity - state.n(z) - realized.e(z)).max(0.0);
        let want = control.f_u(z).max(0.0);
        let f = want.min(state.q(z) + realized.d(z)).min(space);
        clamped |= f < want;
        applied.f_u.insert(z, f);
    }
    for (&z, link) in net.links() {
        let want = control.f_d(z).max(0.0);
        let service = if net.is_boundary(&link.dest) {
            link.dest_outflow_cap.unwrap_or(f64::INFINITY)
        } else {
            let green: f64 = net.phases_of(z).iter().map(|p| control.g(p).max(0.0)).sum();
            link.saturation_flow * green
        };
        let avail = (state.n(z) + applied.f_u(z) + realized.e(z)).max(0.0);
        let f = want.min(service).min(avail);
        clamped |= f < want;
        applied.f_d.insert(z, f);
    }

    // Receiving-space scaling.
    let mut factor: BTreeMap<LinkId, f64> = BTreeMap::new();
    for (&z, link) in net.links() {
        let incoming = inflow(net, &realized, &applied, z);
        let space = (link.capacity - state.n(z) - realized.e(z)).max(0.0);
        if incoming > space {
            factor.insert(z, space / incoming);
        }
    }
    if !factor.is_empty() {
        clamped = true;
        for (&w, link) in net.links() {
            let s = link
                .turn_ratios
                .keys()
                .filter_map(|z| factor.get(z))
                .fold(1.0f64, |m, &f| m.min(f));
            if s < 1.0 {
                *applied.f_d.get_mut(&w).expect("every link has an entry") *= s;
            }
        }
    }

    let next = advance(net, state, &realized, &applied);
    PlantStep {
        next,
        applied,
        realized,
        clamped,
    }
}

/// Constraint family of a row or violation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Family {
    /// Vehicle conservation equality.
    Conservation,
    /// Boundary queue equality.
    QueueBalance,
    /// Σ_p g_p ≤ T − L.
    SignalBudget,
    /// g_p ≥ 0.
    SplitNonNegative,
    /// f_d ≥ 0.
    OutflowNonNegative,
    /// f_d ≤ n + f_u + e.
    OutflowAvailability,
    /// Σ r_wz f_w ≤ n̄ − n − e for links leaving internal junctions.
    Storage,
    /// f_u ≤ n̄ − n − e for source links.
    AdmissionStorage,
    /// f_u ≥ 0.
    AdmissionNonNegative,
    /// f_d ≤ S Σ_{p∈P_z} g_p.
    GreenCapacity,
    /// q ≥ 0.
    QueueNonNegative,
    /// f_d ≤ f̄ at the network exit.
    ExitCapacity,
    /// n − f_d ≤ γ n̄.
    Smoothness,
    /// Lexicographic lift row.
    Lexicographic,
}

/// The network element a row or violation refers to.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Subject {
    Link(LinkId),
    Junction(JunctionId),
    Phase(PhaseKey),
    Agent(usize),
}

impl fmt::Display for Subject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Subject::Link(z) => write!(f, "link {z}"),
            Subject::Junction(j) => write!(f, "junction {j}"),
            Subject::Phase(p) => write!(f, "phase {p}"),
            Subject::Agent(i) => write!(f, "agent {i}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub family: Family,
    pub subject: Subject,
    pub k: usize,
    /// Amount by which the constraint is exceeded (> tolerance).
    pub slack: f64,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} at {} (k={}): exceeded by {:.3e}", self.family, self.subject, self.k, self.slack)
    }
}

/// Checks every inequality family over the horizon for the trajectory
/// induced by `controls`.
pub fn check_feasibility(
    net: &Network,
    state: &TrafficState,
    forecast: &ExogenousForecast,
    controls: &[ControlInput],
) -> Result<Vec<Violation>, DynamicsError> {
    let traj = predict_trajectory(net, state, forecast, controls)?;
    let mut out = Vec::new();
    let mut push = |family, subject: Subject, k, excess: f64| {
        if excess > FEASIBILITY_TOL {
            out.push(Violation {
                family,
                subject,
                k,
                slack: excess,
            });
        }
    };
    for (k, (exo, c)) in forecast.steps.iter().zip(controls).enumerate() {
        let now = if k == 0 { state } else { &traj[k - 1] };
        let next = &traj[k];
        for (id, j) in net.junctions() {
            if j.is_boundary() {
                continue;
            }
            let mut total = 0.0;
            for i in 0..j.phases.len() {
                let p = PhaseKey::new(id.clone(), i);
                let g = c.g(&p);
                total += g;
                push(Family::SplitNonNegative, Subject::Phase(p), k, -g);
            }
            push(
                Family::SignalBudget,
                Subject::Junction(id.clone()),
                k,
                total - net.green_budget(id),
            );
        }
        for (&z, link) in net.links() {
            let s = Subject::Link(z);
            let n = now.n(z);
            let fd = c.f_d(z);
            let e = exo.e(z);
            push(Family::OutflowNonNegative, s.clone(), k, -fd);
            push(Family::OutflowAvailability, s.clone(), k, fd - (n + c.f_u(z) + e));
            if net.is_source(z) {
                let fu = c.f_u(z);
                push(Family::AdmissionStorage, s.clone(), k, fu - (link.capacity - n - e));
                push(Family::AdmissionNonNegative, s.clone(), k, -fu);
                push(Family::QueueNonNegative, s.clone(), k, -next.q(z));
            } else {
                let incoming = inflow(net, exo, c, z);
                push(Family::Storage, s.clone(), k, incoming - (link.capacity - n - e));
            }
            if net.is_destination(z) {
                let cap = link.dest_outflow_cap.unwrap_or(f64::INFINITY);
                push(Family::ExitCapacity, s.clone(), k, fd - cap);
            } else {
                let green: f64 = net.phases_of(z).iter().map(|p| c.g(p)).sum();
                push(Family::GreenCapacity, s.clone(), k, fd - link.saturation_flow * green);
            }
            push(Family::Smoothness, s, k, n - fd - link.gamma * link.capacity);
        }
    }
    Ok(out)
}

/// The three performance indexes over a horizon.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Indexes {
    /// Σ_k Σ_sources q(t+k+1).
    pub phi1: f64,
    /// Σ_k Σ_z (n(t+k) − f_d(t+k)).
    pub phi2: f64,
    /// Σ_k Σ_z n(t+k+1)² / n̄.
    pub phi3: f64,
}

impl Indexes {
    /// Φ3 + α Φ2 + β Σ q², with the queue term supplied separately.
    pub fn signal_cost(&self, alpha: f64, beta: f64, queue_sq: f64) -> f64 {
        self.phi3 + alpha * self.phi2 + beta * queue_sq
    }
}

/// Evaluates the indexes for `traj` produced from `state` under `controls`.
pub fn performance(
    net: &Network,
    state: &TrafficState,
    traj: &[TrafficState],
    controls: &[ControlInput],
) -> Indexes {
    let mut idx = Indexes::default();
    for (k, (next, c)) in traj.iter().zip(controls).enumerate() {
        let now = if k == 0 { state } else { &traj[k - 1] };
        idx.phi1 += net.source_links().map(|z| next.q(z)).sum::<f64>();
        for (&z, link) in net.links() {
            idx.phi2 += now.n(z) - c.f_d(z);
            idx.phi3 += next.n(z).powi(2) / link.capacity;
        }
    }
    idx
}

/// Σ_k Σ_sources q(t+k+1)², the queue-balancing term of the signal cost.
pub fn queue_square_sum(net: &Network, traj: &[TrafficState]) -> f64 {
    traj.iter()
        .map(|s| net.source_links().map(|z| s.q(z).powi(2)).sum::<f64>())
        .sum()
}
