//! Directed-graph representation of an urban traffic network.
//!
//! Junctions are nodes, road links are edges. A road link is a group of lanes
//! governed by the same signal phase, so one physical road may carry several
//! links. Allowed movements between links are given by each link's
//! `turn_ratios`: a key `w` in `turn_ratios` of `z` means vehicles leaving `z`
//! may enter `w`, and the value is the fraction that does so.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type LinkId = u32;
pub type JunctionId = String;
/// Agents are numbered densely from 1.
pub type AgentId = usize;

/// Tolerance on turning ratios summing to one.
pub const RATIO_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JunctionKind {
    Boundary,
    Internal,
}

/// A signal phase: the set of incoming links that receive right of way together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub id: String,
    pub permitted_links: BTreeSet<LinkId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Junction {
    pub id: JunctionId,
    pub kind: JunctionKind,
    /// Lost time per cycle in seconds. Zero for boundary junctions.
    pub lost_time: f64,
    /// Ordered phase sequence. Empty for boundary junctions.
    pub phases: Vec<Phase>,
}

impl Junction {
    pub fn boundary(id: impl Into<JunctionId>) -> Self {
        Self {
            id: id.into(),
            kind: JunctionKind::Boundary,
            lost_time: 0.0,
            phases: Vec::new(),
        }
    }

    pub fn internal(id: impl Into<JunctionId>, lost_time: f64, phases: Vec<Phase>) -> Self {
        Self {
            id: id.into(),
            kind: JunctionKind::Internal,
            lost_time,
            phases,
        }
    }

    pub fn is_boundary(&self) -> bool {
        self.kind == JunctionKind::Boundary
    }
}

/// Identifies a phase by its junction and position in the junction's sequence.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PhaseKey {
    pub junction: JunctionId,
    pub index: usize,
}

impl PhaseKey {
    pub fn new(junction: impl Into<JunctionId>, index: usize) -> Self {
        Self {
            junction: junction.into(),
            index,
        }
    }
}

impl fmt::Display for PhaseKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.p{}", self.junction, self.index + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadLink {
    pub id: LinkId,
    pub source: JunctionId,
    pub dest: JunctionId,
    /// Storage capacity in vehicles.
    pub capacity: f64,
    /// Saturation flow in veh/second, lanes already aggregated.
    pub saturation_flow: f64,
    /// Fraction of capacity that may stay trapped in the link per interval.
    pub gamma: f64,
    /// Downstream link -> turning ratio.
    pub turn_ratios: BTreeMap<LinkId, f64>,
    /// Exit capacity in veh/interval, present iff `dest` is a boundary junction.
    pub dest_outflow_cap: Option<f64>,
}

#[derive(Debug, Error, PartialEq)]
pub enum NetworkError {
    #[error("duplicate junction id {0}")]
    DuplicateJunction(JunctionId),
    #[error("duplicate link id {0}")]
    DuplicateLink(LinkId),
    #[error("cycle length must be positive, got {0}")]
    BadCycle(f64),
}

/// Immutable network graph with a precomputed upstream index.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    cycle: f64,
    junctions: BTreeMap<JunctionId, Junction>,
    links: BTreeMap<LinkId, RoadLink>,
    /// z -> [(w, r_wz)] for every w with z among its turn targets.
    upstream: BTreeMap<LinkId, Vec<(LinkId, f64)>>,
}

impl Network {
    pub fn new(
        cycle: f64,
        junctions: impl IntoIterator<Item = Junction>,
        links: impl IntoIterator<Item = RoadLink>,
    ) -> Result<Self, NetworkError> {
        if !(cycle > 0.0) {
            return Err(NetworkError::BadCycle(cycle));
        }
        let mut jmap = BTreeMap::new();
        for j in junctions {
            if jmap.contains_key(&j.id) {
                return Err(NetworkError::DuplicateJunction(j.id));
            }
            jmap.insert(j.id.clone(), j);
        }
        let mut lmap = BTreeMap::new();
        for l in links {
            if lmap.contains_key(&l.id) {
                return Err(NetworkError::DuplicateLink(l.id));
            }
            lmap.insert(l.id, l);
        }
        let mut upstream: BTreeMap<LinkId, Vec<(LinkId, f64)>> =
            lmap.keys().map(|&id| (id, Vec::new())).collect();
        for link in lmap.values() {
            for (&to, &ratio) in &link.turn_ratios {
                upstream.entry(to).or_default().push((link.id, ratio));
            }
        }
        Ok(Self {
            cycle,
            junctions: jmap,
            links: lmap,
            upstream,
        })
    }

    /// Cycle length T in seconds; also the control interval.
    pub fn cycle(&self) -> f64 {
        self.cycle
    }

    pub fn junctions(&self) -> &BTreeMap<JunctionId, Junction> {
        &self.junctions
    }

    pub fn links(&self) -> &BTreeMap<LinkId, RoadLink> {
        &self.links
    }

    pub fn junction(&self, id: &str) -> Option<&Junction> {
        self.junctions.get(id)
    }

    pub fn link(&self, id: LinkId) -> Option<&RoadLink> {
        self.links.get(&id)
    }

    /// Panicking accessor for ids already known to exist.
    pub(crate) fn l(&self, id: LinkId) -> &RoadLink {
        &self.links[&id]
    }

    pub fn is_boundary(&self, junction: &str) -> bool {
        self.junctions
            .get(junction)
            .map(Junction::is_boundary)
            .unwrap_or(false)
    }

    /// Source links start at a boundary junction and receive boundary inflow.
    pub fn is_source(&self, link: LinkId) -> bool {
        self.links
            .get(&link)
            .map(|l| self.is_boundary(&l.source))
            .unwrap_or(false)
    }

    /// Destination links end at a boundary junction.
    pub fn is_destination(&self, link: LinkId) -> bool {
        self.links
            .get(&link)
            .map(|l| self.is_boundary(&l.dest))
            .unwrap_or(false)
    }

    /// Upstream neighbours of `link` paired with the ratio r_wz.
    pub fn upstream(&self, link: LinkId) -> &[(LinkId, f64)] {
        self.upstream.get(&link).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn incoming<'a>(&'a self, junction: &'a str) -> impl Iterator<Item = &'a RoadLink> + 'a {
        self.links.values().filter(move |l| l.dest == junction)
    }

    pub fn outgoing<'a>(&'a self, junction: &'a str) -> impl Iterator<Item = &'a RoadLink> + 'a {
        self.links.values().filter(move |l| l.source == junction)
    }

    pub fn source_links(&self) -> impl Iterator<Item = LinkId> + '_ {
        self.links.keys().copied().filter(|&z| self.is_source(z))
    }

    pub fn destination_links(&self) -> impl Iterator<Item = LinkId> + '_ {
        self.links.keys().copied().filter(|&z| self.is_destination(z))
    }

    /// The phases giving right of way to `link` at its destination junction.
    pub fn phases_of(&self, link: LinkId) -> Vec<PhaseKey> {
        let Some(l) = self.links.get(&link) else {
            return Vec::new();
        };
        let Some(j) = self.junctions.get(&l.dest) else {
            return Vec::new();
        };
        j.phases
            .iter()
            .enumerate()
            .filter(|(_, p)| p.permitted_links.contains(&link))
            .map(|(i, _)| PhaseKey::new(j.id.clone(), i))
            .collect()
    }

    /// Every phase of every internal junction in key order.
    pub fn phase_keys(&self) -> Vec<PhaseKey> {
        self.junctions
            .values()
            .filter(|j| !j.is_boundary())
            .flat_map(|j| (0..j.phases.len()).map(move |i| PhaseKey::new(j.id.clone(), i)))
            .collect()
    }

    /// Usable green time T - L of an internal junction.
    pub fn green_budget(&self, junction: &str) -> f64 {
        self.junctions
            .get(junction)
            .map(|j| self.cycle - j.lost_time)
            .unwrap_or(0.0)
    }
}

/// One structural problem found by [`validate_network`].
#[derive(Debug, Clone, PartialEq)]
pub enum NetworkViolation {
    UnknownJunction { link: LinkId, junction: JunctionId },
    UnknownTurnTarget { link: LinkId, target: LinkId },
    TurnNotAdjacent { link: LinkId, target: LinkId },
    NegativeTurnRatio { link: LinkId, target: LinkId, ratio: f64 },
    TurnRatioSum { link: LinkId, sum: f64 },
    TurnsIntoBoundary { link: LinkId },
    MissingOutflowCap { link: LinkId },
    UnexpectedOutflowCap { link: LinkId },
    NonPositive { link: LinkId, field: &'static str, value: f64 },
    GammaOutOfRange { link: LinkId, gamma: f64 },
    NoPhases { junction: JunctionId },
    LostTimeOutOfRange { junction: JunctionId, lost_time: f64 },
    BoundaryHasPhases { junction: JunctionId },
    EmptyPhase { junction: JunctionId, phase: String },
    OrphanPhaseLink { junction: JunctionId, phase: String, link: LinkId },
    UncoveredLink { junction: JunctionId, link: LinkId },
    NotReachableFromSource { link: LinkId },
    CannotReachDestination { link: LinkId },
}

impl fmt::Display for NetworkViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use NetworkViolation::*;
        match self {
            UnknownJunction { link, junction } => {
                write!(f, "link {link}: unknown junction {junction}")
            }
            UnknownTurnTarget { link, target } => {
                write!(f, "link {link}: turn target {target} does not exist")
            }
            TurnNotAdjacent { link, target } => {
                write!(f, "link {link}: turn target {target} does not leave its destination junction")
            }
            NegativeTurnRatio { link, target, ratio } => {
                write!(f, "link {link}: negative turning ratio {ratio} towards {target}")
            }
            TurnRatioSum { link, sum } => {
                write!(f, "link {link}: turning ratios sum to {sum}, expected 1")
            }
            TurnsIntoBoundary { link } => {
                write!(f, "link {link}: ends at a boundary junction but has turning ratios")
            }
            MissingOutflowCap { link } => write!(f, "link {link}: destination link without exit capacity"),
            UnexpectedOutflowCap { link } => {
                write!(f, "link {link}: exit capacity given for a link ending at an internal junction")
            }
            NonPositive { link, field, value } => write!(f, "link {link}: {field} must be positive, got {value}"),
            GammaOutOfRange { link, gamma } => write!(f, "link {link}: gamma {gamma} not in (0, 1]"),
            NoPhases { junction } => write!(f, "junction {junction}: internal junction without phases"),
            LostTimeOutOfRange { junction, lost_time } => {
                write!(f, "junction {junction}: lost time {lost_time} not in [0, cycle)")
            }
            BoundaryHasPhases { junction } => write!(f, "junction {junction}: boundary junction with phases"),
            EmptyPhase { junction, phase } => write!(f, "junction {junction}: phase {phase} permits no link"),
            OrphanPhaseLink { junction, phase, link } => write!(
                f,
                "junction {junction}: phase {phase} lists link {link} which does not enter the junction"
            ),
            UncoveredLink { junction, link } => {
                write!(f, "junction {junction}: incoming link {link} belongs to no phase")
            }
            NotReachableFromSource { link } => write!(f, "link {link}: not reachable from any source link"),
            CannotReachDestination { link } => write!(f, "link {link}: cannot reach any destination link"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<NetworkViolation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Collects every structural violation; an empty report means the network is valid.
pub fn validate_network(net: &Network) -> ValidationReport {
    let mut out = Vec::new();

    for link in net.links.values() {
        let mut endpoints_ok = true;
        for j in [&link.source, &link.dest] {
            if !net.junctions.contains_key(j) {
                out.push(NetworkViolation::UnknownJunction {
                    link: link.id,
                    junction: j.clone(),
                });
                endpoints_ok = false;
            }
        }
        for (field, value) in [("capacity", link.capacity), ("saturation_flow", link.saturation_flow)] {
            if !(value > 0.0) {
                out.push(NetworkViolation::NonPositive {
                    link: link.id,
                    field,
                    value,
                });
            }
        }
        if !(link.gamma > 0.0 && link.gamma <= 1.0) {
            out.push(NetworkViolation::GammaOutOfRange {
                link: link.id,
                gamma: link.gamma,
            });
        }
        if !endpoints_ok {
            continue;
        }
        let dest_boundary = net.is_boundary(&link.dest);
        match (dest_boundary, link.dest_outflow_cap) {
            (true, None) => out.push(NetworkViolation::MissingOutflowCap { link: link.id }),
            (true, Some(cap)) if cap < 0.0 => out.push(NetworkViolation::NonPositive {
                link: link.id,
                field: "dest_outflow_cap",
                value: cap,
            }),
            (false, Some(_)) => out.push(NetworkViolation::UnexpectedOutflowCap { link: link.id }),
            _ => {}
        }
        if dest_boundary {
            if !link.turn_ratios.is_empty() {
                out.push(NetworkViolation::TurnsIntoBoundary { link: link.id });
            }
            continue;
        }
        let mut sum = 0.0;
        for (&target, &ratio) in &link.turn_ratios {
            match net.links.get(&target) {
                None => out.push(NetworkViolation::UnknownTurnTarget {
                    link: link.id,
                    target,
                }),
                Some(t) if t.source != link.dest => out.push(NetworkViolation::TurnNotAdjacent {
                    link: link.id,
                    target,
                }),
                _ => {}
            }
            if ratio < 0.0 {
                out.push(NetworkViolation::NegativeTurnRatio {
                    link: link.id,
                    target,
                    ratio,
                });
            }
            sum += ratio;
        }
        if (sum - 1.0).abs() > RATIO_SUM_TOL {
            out.push(NetworkViolation::TurnRatioSum { link: link.id, sum });
        }
    }

    for j in net.junctions.values() {
        if j.is_boundary() {
            if !j.phases.is_empty() {
                out.push(NetworkViolation::BoundaryHasPhases {
                    junction: j.id.clone(),
                });
            }
            continue;
        }
        if j.phases.is_empty() {
            out.push(NetworkViolation::NoPhases {
                junction: j.id.clone(),
            });
        }
        if !(j.lost_time >= 0.0 && j.lost_time < net.cycle) {
            out.push(NetworkViolation::LostTimeOutOfRange {
                junction: j.id.clone(),
                lost_time: j.lost_time,
            });
        }
        for p in &j.phases {
            if p.permitted_links.is_empty() {
                out.push(NetworkViolation::EmptyPhase {
                    junction: j.id.clone(),
                    phase: p.id.clone(),
                });
            }
            for &z in &p.permitted_links {
                if net.links.get(&z).map(|l| l.dest != j.id).unwrap_or(true) {
                    out.push(NetworkViolation::OrphanPhaseLink {
                        junction: j.id.clone(),
                        phase: p.id.clone(),
                        link: z,
                    });
                }
            }
        }
        for l in net.incoming(&j.id) {
            if !j.phases.iter().any(|p| p.permitted_links.contains(&l.id)) {
                out.push(NetworkViolation::UncoveredLink {
                    junction: j.id.clone(),
                    link: l.id,
                });
            }
        }
    }

    // Reachability: forward from all source links, backward from all destination links.
    let forward = bfs(
        net.links.keys().copied().filter(|&z| net.is_source(z)),
        |z| net.links[&z].turn_ratios.keys().copied().filter(|w| net.links.contains_key(w)).collect(),
    );
    let backward = bfs(
        net.links.keys().copied().filter(|&z| net.is_destination(z)),
        |z| net.upstream(z).iter().map(|&(w, _)| w).collect(),
    );
    for &z in net.links.keys() {
        if !forward.contains(&z) {
            out.push(NetworkViolation::NotReachableFromSource { link: z });
        }
        if !backward.contains(&z) {
            out.push(NetworkViolation::CannotReachDestination { link: z });
        }
    }

    ValidationReport { violations: out }
}

fn bfs(
    start: impl Iterator<Item = LinkId>,
    next: impl Fn(LinkId) -> Vec<LinkId>,
) -> BTreeSet<LinkId> {
    let mut seen: BTreeSet<LinkId> = BTreeSet::new();
    let mut queue: VecDeque<LinkId> = VecDeque::new();
    for z in start {
        if seen.insert(z) {
            queue.push_back(z);
        }
    }
    while let Some(z) = queue.pop_front() {
        for w in next(z) {
            if seen.insert(w) {
                queue.push_back(w);
            }
        }
    }
    seen
}

/// The junctions and links one agent is responsible for.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentScope {
    pub id: AgentId,
    pub junctions: BTreeSet<JunctionId>,
    pub boundary: BTreeSet<JunctionId>,
    pub internal: BTreeSet<JunctionId>,
    /// Links with both endpoints inside the subnetwork.
    pub internal_links: BTreeSet<LinkId>,
    /// Links leaving this subnetwork, keyed by the receiving agent.
    pub outgoing_cross: BTreeMap<AgentId, BTreeSet<LinkId>>,
    pub neighbors: BTreeSet<AgentId>,
}

#[derive(Debug, Error, PartialEq)]
pub enum PartitionError {
    #[error("junction {0} is not assigned to any agent")]
    MissingJunction(JunctionId),
    #[error("assignment names junction {0} which is not in the network")]
    UnknownJunction(JunctionId),
    #[error("agent indices must be exactly 1..=N, got {0:?}")]
    NonDenseAgents(Vec<AgentId>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    assignment: BTreeMap<JunctionId, AgentId>,
    agents: Vec<AgentScope>,
}

impl Partition {
    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn agents(&self) -> &[AgentScope] {
        &self.agents
    }

    /// Scope of agent `id` (1-based).
    pub fn agent(&self, id: AgentId) -> &AgentScope {
        &self.agents[id - 1]
    }

    pub fn assignment(&self) -> &BTreeMap<JunctionId, AgentId> {
        &self.assignment
    }

    pub fn owner(&self, junction: &str) -> AgentId {
        self.assignment[junction]
    }

    /// R_ij: links from a junction of `i` to a junction of `j`.
    pub fn cross_links(&self, i: AgentId, j: AgentId) -> BTreeSet<LinkId> {
        self.agent(i).outgoing_cross.get(&j).cloned().unwrap_or_default()
    }

    /// R_ij ∪ R_ji in link order.
    pub fn shared_links(&self, i: AgentId, j: AgentId) -> Vec<LinkId> {
        let mut s = self.cross_links(i, j);
        s.extend(self.cross_links(j, i));
        s.into_iter().collect()
    }

    /// Adjacency of the communication graph.
    pub fn neighbor_map(&self) -> BTreeMap<AgentId, BTreeSet<AgentId>> {
        self.agents.iter().map(|a| (a.id, a.neighbors.clone())).collect()
    }
}

/// Derives every agent's junction and link sets from a junction -> agent map.
pub fn build_partition(
    net: &Network,
    assignment: &BTreeMap<JunctionId, AgentId>,
) -> Result<Partition, PartitionError> {
    for j in assignment.keys() {
        if !net.junctions.contains_key(j) {
            return Err(PartitionError::UnknownJunction(j.clone()));
        }
    }
    for j in net.junctions.keys() {
        if !assignment.contains_key(j) {
            return Err(PartitionError::MissingJunction(j.clone()));
        }
    }
    let used: BTreeSet<AgentId> = assignment.values().copied().collect();
    let n = used.len();
    if used.iter().copied().ne(1..=n) {
        return Err(PartitionError::NonDenseAgents(used.into_iter().collect()));
    }

    let mut agents: Vec<AgentScope> = (1..=n)
        .map(|id| AgentScope {
            id,
            junctions: BTreeSet::new(),
            boundary: BTreeSet::new(),
            internal: BTreeSet::new(),
            internal_links: BTreeSet::new(),
            outgoing_cross: BTreeMap::new(),
            neighbors: BTreeSet::new(),
        })
        .collect();
    for (j, &a) in assignment {
        let scope = &mut agents[a - 1];
        scope.junctions.insert(j.clone());
        if net.is_boundary(j) {
            scope.boundary.insert(j.clone());
        } else {
            scope.internal.insert(j.clone());
        }
    }
    for link in net.links.values() {
        let (Some(&i), Some(&j)) = (assignment.get(&link.source), assignment.get(&link.dest)) else {
            continue;
        };
        if i == j {
            agents[i - 1].internal_links.insert(link.id);
        } else {
            agents[i - 1].outgoing_cross.entry(j).or_default().insert(link.id);
            agents[i - 1].neighbors.insert(j);
            agents[j - 1].neighbors.insert(i);
        }
    }
    Ok(Partition {
        assignment: assignment.clone(),
        agents,
    })
}

/// Every junction assigned to agent 1.
pub fn single_agent(net: &Network) -> Partition {
    let assignment = net.junctions.keys().map(|j| (j.clone(), 1)).collect();
    build_partition(net, &assignment).expect("single-agent assignment is total")
}
