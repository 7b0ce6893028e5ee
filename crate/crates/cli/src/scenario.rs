//! Scenario files: network, partition, demand profiles and parameters.

use std::collections::BTreeMap;
use std::path::Path;

use lexinet_core::network::{build_partition, validate_network, JunctionId, Partition};
use lexinet_core::{ExogenousForecast, ExogenousStep, Junction, LinkId, Network, Phase, PhaseKey, RoadLink};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub network: NetworkSection,
    pub partition: BTreeMap<JunctionId, usize>,
    #[serde(rename = "horizon_K")]
    pub horizon_k: usize,
    pub demands: Vec<FlowProfile>,
    #[serde(default)]
    pub exogenous: ExogenousSection,
    #[serde(default)]
    pub turning: Vec<TurnSpec>,
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub params: Params,
    /// Green seconds per phase, in phase order, keyed by junction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_time_plan: Option<BTreeMap<JunctionId, Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub junctions: Vec<JunctionSpec>,
    pub links: Vec<LinkSpec>,
    pub cycle_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JunctionKindSpec {
    Boundary,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JunctionSpec {
    pub id: JunctionId,
    pub kind: JunctionKindSpec,
    /// Lost time L in seconds.
    #[serde(default)]
    pub lost_time: f64,
    #[serde(default)]
    pub phases: Vec<PhaseSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSpec {
    pub id: String,
    pub links: Vec<LinkId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub id: LinkId,
    pub from: JunctionId,
    pub to: JunctionId,
    /// Storage capacity n̄ in vehicles.
    pub capacity: f64,
    /// Saturation flow S in vehicles per second.
    pub saturation_flow: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    /// Exit capacity f̄ per interval, for links ending at a boundary.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_capacity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowProfile {
    pub link: LinkId,
    pub pieces: Vec<Piece>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Piece {
    pub from_min: f64,
    pub to_min: f64,
    pub veh_per_hour: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExogenousSection {
    #[serde(default)]
    pub e_in: Vec<FlowProfile>,
    #[serde(default)]
    pub e_out: Vec<FlowProfile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnSpec {
    pub from: LinkId,
    pub to: LinkId,
    pub ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Params {
    pub alpha: f64,
    pub beta: f64,
    pub theta: f64,
    pub gamma_default: f64,
    pub rho_lp: f64,
    pub rho_qp: f64,
    /// Base stopping tolerance; each stage stops at tol/ρ.
    pub tol: f64,
    pub s_max: usize,
}

impl Default for Params {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            beta: 0.01,
            theta: 5000.0,
            gamma_default: 0.5,
            rho_lp: 1.0,
            rho_qp: 0.1,
            tol: 1e-5,
            s_max: 5000,
        }
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid scenario:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),
}

/// Piecewise-constant rate over wall-clock minutes.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pieces: Vec<Piece>,
}

impl Profile {
    /// Rate in veh/h at `minute`; the last piece is held beyond its end.
    pub fn rate_at(&self, minute: f64) -> f64 {
        self.pieces
            .iter()
            .find(|p| minute >= p.from_min && minute < p.to_min)
            .or(self.pieces.last())
            .map_or(0.0, |p| p.veh_per_hour)
    }

    pub fn end_min(&self) -> f64 {
        self.pieces.last().map_or(0.0, |p| p.to_min)
    }
}

/// A validated scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub net: Network,
    pub partition: Partition,
    pub horizon: usize,
    pub demands: BTreeMap<LinkId, Profile>,
    pub e_in: BTreeMap<LinkId, Profile>,
    pub e_out: BTreeMap<LinkId, Profile>,
    pub noise: f64,
    pub seed: u64,
    pub params: Params,
    pub fixed_time_plan: BTreeMap<PhaseKey, f64>,
    /// Number of control steps covered by the demand profiles.
    pub steps: usize,
}

impl Scenario {
    pub fn cycle(&self) -> f64 {
        self.net.cycle()
    }

    /// Nominal exogenous data for control step `t`.
    pub fn exogenous(&self, t: usize) -> ExogenousStep {
        let minute = t as f64 * self.cycle() / 60.0;
        let per_step = self.cycle() / 3600.0;
        let sample = |m: &BTreeMap<LinkId, Profile>| m.iter().map(|(&z, p)| (z, p.rate_at(minute) * per_step)).collect();
        ExogenousStep {
            d: sample(&self.demands),
            e_in: sample(&self.e_in),
            e_out: sample(&self.e_out),
            ratios: BTreeMap::new(),
        }
    }

    /// Nominal forecast for steps t..t+K.
    pub fn forecast(&self, t: usize) -> ExogenousForecast {
        ExogenousForecast {
            steps: (t..t + self.horizon).map(|s| self.exogenous(s)).collect(),
        }
    }
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_scenario(&text)
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let file: ScenarioFile = serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    file.validate()
}

fn check_profile(kind: &str, p: &FlowProfile, errors: &mut Vec<String>) {
    if p.pieces.is_empty() {
        errors.push(format!("{kind} profile of link {}: no pieces", p.link));
        return;
    }
    let mut at = 0.0;
    for piece in &p.pieces {
        if piece.from_min != at {
            errors.push(format!(
                "{kind} profile of link {}: gap or overlap at minute {at} (next piece starts at {})",
                p.link, piece.from_min
            ));
        }
        if !(piece.to_min > piece.from_min) {
            errors.push(format!(
                "{kind} profile of link {}: empty piece [{}, {})",
                p.link, piece.from_min, piece.to_min
            ));
        }
        if !(piece.veh_per_hour >= 0.0) || !piece.veh_per_hour.is_finite() {
            errors.push(format!("{kind} profile of link {}: negative rate {}", p.link, piece.veh_per_hour));
        }
        at = piece.to_min;
    }
}

impl ScenarioFile {
    /// A scenario around an existing network, with default parameters.
    pub fn from_network(
        net: &Network,
        partition: BTreeMap<JunctionId, usize>,
        horizon_k: usize,
        demands: Vec<FlowProfile>,
    ) -> Self {
        let params = Params::default();
        let junctions = net
            .junctions()
            .values()
            .map(|j| JunctionSpec {
                id: j.id.clone(),
                kind: if j.is_boundary() {
                    JunctionKindSpec::Boundary
                } else {
                    JunctionKindSpec::Internal
                },
                lost_time: j.lost_time,
                phases: j
                    .phases
                    .iter()
                    .map(|p| PhaseSpec {
                        id: p.id.clone(),
                        links: p.permitted_links.iter().copied().collect(),
                    })
                    .collect(),
            })
            .collect();
        let links = net
            .links()
            .values()
            .map(|l| LinkSpec {
                id: l.id,
                from: l.source.clone(),
                to: l.dest.clone(),
                capacity: l.capacity,
                saturation_flow: l.saturation_flow,
                gamma: (l.gamma != params.gamma_default).then_some(l.gamma),
                exit_capacity: l.dest_outflow_cap,
            })
            .collect();
        let turning = net
            .links()
            .values()
            .flat_map(|l| {
                l.turn_ratios.iter().map(|(&to, &ratio)| TurnSpec {
                    from: l.id,
                    to,
                    ratio,
                })
            })
            .collect();
        Self {
            network: NetworkSection {
                junctions,
                links,
                cycle_s: net.cycle(),
            },
            partition,
            horizon_k,
            demands,
            exogenous: ExogenousSection::default(),
            turning,
            noise: 0.0,
            seed: 0,
            params,
            fixed_time_plan: None,
        }
    }

    pub fn validate(&self) -> Result<Scenario, ScenarioError> {
        let mut errors = Vec::new();
        let p = &self.params;
        for (name, v) in [
            ("alpha", p.alpha),
            ("beta", p.beta),
            ("theta", p.theta),
            ("gamma_default", p.gamma_default),
            ("rho_lp", p.rho_lp),
            ("rho_qp", p.rho_qp),
            ("tol", p.tol),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                errors.push(format!("params.{name} must be positive, got {v}"));
            }
        }
        if p.s_max == 0 {
            errors.push("params.s_max must be at least 1".into());
        }
        if self.horizon_k == 0 {
            errors.push("horizon_K must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.noise) {
            errors.push(format!("noise must lie in [0, 1), got {}", self.noise));
        }

        let mut ratios: BTreeMap<LinkId, BTreeMap<LinkId, f64>> = BTreeMap::new();
        for t in &self.turning {
            if ratios.entry(t.from).or_default().insert(t.to, t.ratio).is_some() {
                errors.push(format!("turning ratio {} -> {} given twice", t.from, t.to));
            }
        }
        let junctions: Vec<Junction> = self
            .network
            .junctions
            .iter()
            .map(|j| match j.kind {
                JunctionKindSpec::Boundary => {
                    if !j.phases.is_empty() {
                        errors.push(format!("junction {}: boundary junction with phases", j.id));
                    }
                    Junction::boundary(j.id.clone())
                }
                JunctionKindSpec::Internal => Junction::internal(
                    j.id.clone(),
                    j.lost_time,
                    j.phases
                        .iter()
                        .map(|p| Phase {
                            id: p.id.clone(),
                            permitted_links: p.links.iter().copied().collect(),
                        })
                        .collect(),
                ),
            })
            .collect();
        let links: Vec<RoadLink> = self
            .network
            .links
            .iter()
            .map(|l| RoadLink {
                id: l.id,
                source: l.from.clone(),
                dest: l.to.clone(),
                capacity: l.capacity,
                saturation_flow: l.saturation_flow,
                gamma: l.gamma.unwrap_or(p.gamma_default),
                turn_ratios: ratios.remove(&l.id).unwrap_or_default(),
                dest_outflow_cap: l.exit_capacity,
            })
            .collect();
        for from in ratios.keys() {
            errors.push(format!("turning ratios given for unknown link {from}"));
        }

        let net = match Network::new(self.network.cycle_s, junctions, links) {
            Ok(net) => net,
            Err(e) => {
                errors.push(e.to_string());
                return Err(ScenarioError::Validation(errors));
            }
        };
        errors.extend(validate_network(&net).violations.iter().map(ToString::to_string));
        let partition = match build_partition(&net, &self.partition) {
            Ok(p) => Some(p),
            Err(e) => {
                errors.push(e.to_string());
                None
            }
        };

        let mut profiles = |kind: &str, list: &[FlowProfile], sources_only: bool| {
            let mut out = BTreeMap::new();
            for prof in list {
                if net.link(prof.link).is_none() {
                    errors.push(format!("{kind} profile for unknown link {}", prof.link));
                    continue;
                }
                if sources_only && !net.is_source(prof.link) {
                    errors.push(format!("{kind} profile for link {} which is not a source link", prof.link));
                }
                check_profile(kind, prof, &mut errors);
                if out
                    .insert(
                        prof.link,
                        Profile {
                            pieces: prof.pieces.clone(),
                        },
                    )
                    .is_some()
                {
                    errors.push(format!("{kind} profile for link {} given twice", prof.link));
                }
            }
            out
        };
        let demands = profiles("demand", &self.demands, true);
        let e_in = profiles("e_in", &self.exogenous.e_in, false);
        let e_out = profiles("e_out", &self.exogenous.e_out, false);

        let end = demands.values().map(Profile::end_min).fold(0.0f64, f64::max);
        if demands.is_empty() {
            errors.push("demands: at least one source profile is required".into());
        }
        for (z, prof) in demands.iter().chain(&e_in).chain(&e_out) {
            if prof.end_min() < end {
                errors.push(format!(
                    "profile of link {z} ends at minute {} before the run ends at {end}",
                    prof.end_min()
                ));
            }
        }
        let steps = (end * 60.0 / net.cycle()).round() as usize;

        let mut plan = BTreeMap::new();
        for (id, j) in net.junctions() {
            if j.is_boundary() {
                continue;
            }
            let budget = net.green_budget(id);
            let given = self.fixed_time_plan.as_ref().and_then(|p| p.get(id));
            let splits = match given {
                Some(g) => {
                    if g.len() != j.phases.len() {
                        errors.push(format!(
                            "fixed_time_plan.{id}: {} splits for {} phases",
                            g.len(),
                            j.phases.len()
                        ));
                    }
                    if g.iter().any(|&v| !(v >= 0.0)) {
                        errors.push(format!("fixed_time_plan.{id}: negative split"));
                    }
                    if g.iter().sum::<f64>() > budget + 1e-9 {
                        errors.push(format!("fixed_time_plan.{id}: splits exceed the green budget {budget}"));
                    }
                    g.clone()
                }
                None => vec![budget / j.phases.len().max(1) as f64; j.phases.len()],
            };
            for (i, g) in splits.into_iter().enumerate() {
                plan.insert(PhaseKey::new(id.clone(), i), g);
            }
        }
        if let Some(p) = &self.fixed_time_plan {
            for id in p.keys() {
                if net.junction(id).is_none_or(|j| j.is_boundary()) {
                    errors.push(format!("fixed_time_plan.{id}: not an internal junction"));
                }
            }
        }

        match partition {
            Some(partition) if errors.is_empty() => Ok(Scenario {
                net,
                partition,
                horizon: self.horizon_k,
                demands,
                e_in,
                e_out,
                noise: self.noise,
                seed: self.seed,
                params: self.params,
                fixed_time_plan: plan,
                steps,
            }),
            _ => Err(ScenarioError::Validation(errors)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const CHAIN: &str = r#"{
        "network": {
            "cycle_s": 60,
            "junctions": [
                {"id": "B1", "kind": "boundary"},
                {"id": "J1", "kind": "internal", "lost_time": 4, "phases": [{"id": "p1", "links": [1]}]},
                {"id": "B2", "kind": "boundary"}
            ],
            "links": [
                {"id": 1, "from": "B1", "to": "J1", "capacity": 40, "saturation_flow": 0.5},
                {"id": 2, "from": "J1", "to": "B2", "capacity": 40, "saturation_flow": 0.5, "exit_capacity": 30}
            ]
        },
        "partition": {"B1": 1, "J1": 1, "B2": 1},
        "horizon_K": 2,
        "demands": [{"link": 1, "pieces": [{"from_min": 0, "to_min": 10, "veh_per_hour": 1200},
                                           {"from_min": 10, "to_min": 20, "veh_per_hour": 600}]}],
        "turning": [{"from": 1, "to": 2, "ratio": 1.0}]
    }"#;

    #[test]
    fn chain_loads_with_defaults() {
        let s = parse_scenario(CHAIN).unwrap();
        assert_eq!(s.steps, 20);
        assert_eq!(s.params, Params::default());
        assert_eq!(s.fixed_time_plan[&PhaseKey::new("J1", 0)], 56.0);
        assert_eq!(s.exogenous(0).d(1), 20.0);
        assert_eq!(s.exogenous(10).d(1), 10.0);
        // Held beyond the last piece.
        assert_eq!(s.forecast(19).steps[1].d(1), 10.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = CHAIN.replacen("\"horizon_K\": 2,", "\"horizon_K\": 2, \"horizon\": 3,", 1);
        match parse_scenario(&text) {
            Err(ScenarioError::Parse { message, line, .. }) => {
                assert!(message.contains("horizon"), "{message}");
                assert!(line > 1);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn gaps_in_demand_are_reported() {
        let text = CHAIN.replacen("\"from_min\": 10, \"to_min\": 20", "\"from_min\": 12, \"to_min\": 20", 1);
        match parse_scenario(&text) {
            Err(ScenarioError::Validation(v)) => assert!(v.iter().any(|m| m.contains("gap")), "{v:?}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn plan_over_budget_is_reported() {
        let text = CHAIN.replacen("\"turning\"", "\"fixed_time_plan\": {\"J1\": [57]}, \"turning\"", 1);
        match parse_scenario(&text) {
            Err(ScenarioError::Validation(v)) => assert!(v.iter().any(|m| m.contains("budget")), "{v:?}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn exported_network_round_trips() {
        use lexinet_core::samples::{appendix_c, appendix_c_assignment};
        let net = appendix_c();
        let sources: Vec<FlowProfile> = net
            .source_links()
            .map(|link| FlowProfile {
                link,
                pieces: vec![Piece {
                    from_min: 0.0,
                    to_min: 10.0,
                    veh_per_hour: 300.0,
                }],
            })
            .collect();
        let file = ScenarioFile::from_network(&net, appendix_c_assignment(), 2, sources);
        let sc = parse_scenario(&serde_json::to_string(&file).unwrap()).unwrap();
        assert_eq!(sc.net, net);
        assert_eq!(sc.partition.num_agents(), 3);
        assert_eq!(sc.steps, 10);
    }
}
