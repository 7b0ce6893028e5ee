//! Small reference networks used by tests, examples and benchmarks.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::dynamics::{ExogenousForecast, ExogenousStep, TrafficState};
use crate::network::{AgentId, Junction, JunctionId, LinkId, Network, Phase, RoadLink};

pub fn phase(id: &str, links: &[LinkId]) -> Phase {
    Phase {
        id: id.to_string(),
        permitted_links: links.iter().copied().collect::<BTreeSet<_>>(),
    }
}

pub fn link(id: LinkId, source: &str, dest: &str, turns: &[(LinkId, f64)]) -> RoadLink {
    let exit = source.starts_with('J') && dest.starts_with('B');
    RoadLink {
        id,
        source: source.into(),
        dest: dest.into(),
        capacity: 40.0,
        saturation_flow: 0.5,
        gamma: 0.5,
        turn_ratios: turns.iter().copied().collect(),
        dest_outflow_cap: exit.then_some(30.0),
    }
}

/// B1 -> J1 -> B2 with a single phase.
pub fn chain() -> Network {
    Network::new(
        60.0,
        vec![
            Junction::boundary("B1"),
            Junction::internal("J1", 4.0, vec![phase("p1", &[1])]),
            Junction::boundary("B2"),
        ],
        vec![link(1, "B1", "J1", &[(2, 1.0)]), link(2, "J1", "B2", &[])],
    )
    .unwrap()
}

/// Two source links merging into one exit link at J1.
pub fn merge() -> Network {
    Network::new(
        60.0,
        vec![
            Junction::boundary("B1"),
            Junction::boundary("B2"),
            Junction::internal("J1", 4.0, vec![phase("p1", &[1]), phase("p2", &[2])]),
            Junction::boundary("B3"),
        ],
        vec![
            link(1, "B1", "J1", &[(3, 1.0)]),
            link(2, "B2", "J1", &[(3, 1.0)]),
            link(3, "J1", "B3", &[]),
        ],
    )
    .unwrap()
}

fn spread(targets: &[LinkId]) -> Vec<(LinkId, f64)> {
    let w: &[f64] = match targets.len() {
        0 => &[],
        1 => &[1.0],
        2 => &[0.375, 0.625],
        3 => &[0.25, 0.5, 0.25],
        4 => &[0.25, 0.25, 0.25, 0.25],
        n => panic!("no ratio pattern for {n} targets"),
    };
    targets.iter().copied().zip(w.iter().copied()).collect()
}

/// The 4-junction, 31-link worked example network.
pub fn appendix_c() -> Network {
    let table: &[(LinkId, &str, &str, &[LinkId])] = &[
        (1, "B2", "J2", &[5, 9, 13]),
        (2, "J2", "B2", &[]),
        (3, "J1", "B1", &[]),
        (4, "B1", "J1", &[7, 10, 11]),
        (5, "J2", "J1", &[3, 10, 11]),
        (6, "J2", "J1", &[10, 11]),
        (7, "J1", "J2", &[2, 9, 13]),
        (8, "B3", "J2", &[2, 5, 6, 14]),
        (9, "J2", "B3", &[]),
        (10, "J1", "J3", &[16, 26]),
        (11, "J1", "J3", &[21, 22]),
        (12, "J3", "J1", &[3, 7]),
        (13, "J2", "J4", &[19, 29]),
        (14, "J2", "J4", &[25]),
        (15, "J4", "J2", &[2, 6, 9]),
        (16, "J3", "B4", &[]),
        (17, "B4", "J3", &[12]),
        (18, "B4", "J3", &[21, 22, 26]),
        (19, "J4", "J3", &[12, 16]),
        (20, "J4", "J3", &[26]),
        (21, "J3", "J4", &[15]),
        (22, "J3", "J4", &[25, 29]),
        (23, "B5", "J4", &[15, 19, 20]),
        (24, "B5", "J4", &[29]),
        (25, "J4", "B5", &[]),
        (26, "J3", "B6", &[]),
        (27, "B6", "J3", &[16]),
        (28, "B6", "J3", &[12, 21, 22]),
        (29, "J4", "B7", &[]),
        (30, "B7", "J4", &[19, 20]),
        (31, "B7", "J4", &[15, 25]),
    ];
    let links = table
        .iter()
        .map(|&(id, s, d, turns)| link(id, s, d, &spread(turns)));
    let mut junctions: Vec<Junction> = (1..=7).map(|i| Junction::boundary(format!("B{i}"))).collect();
    junctions.push(Junction::internal(
        "J1",
        4.0,
        vec![phase("p1", &[4, 5]), phase("p2", &[12]), phase("p3", &[6])],
    ));
    junctions.push(Junction::internal(
        "J2",
        4.0,
        vec![phase("p1", &[1]), phase("p2", &[7]), phase("p3", &[15]), phase("p4", &[8])],
    ));
    junctions.push(Junction::internal(
        "J3",
        4.0,
        vec![
            phase("p1", &[10, 28]),
            phase("p2", &[11, 27]),
            phase("p3", &[18, 19]),
            phase("p4", &[17, 20]),
        ],
    ));
    junctions.push(Junction::internal(
        "J4",
        4.0,
        vec![
            phase("p1", &[13, 31]),
            phase("p2", &[14, 30]),
            phase("p3", &[22, 23]),
            phase("p4", &[21, 24]),
        ],
    ));
    Network::new(60.0, junctions, links).unwrap()
}

pub fn appendix_c_assignment() -> BTreeMap<JunctionId, AgentId> {
    [
        ("J1", 1),
        ("J3", 1),
        ("B1", 1),
        ("B4", 1),
        ("B6", 1),
        ("J2", 2),
        ("B2", 2),
        ("B3", 2),
        ("J4", 3),
        ("B5", 3),
        ("B7", 3),
    ]
    .into_iter()
    .map(|(j, a)| (j.to_string(), a))
    .collect()
}

/// A randomly generated control-step instance.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub net: Network,
    pub assignment: BTreeMap<JunctionId, AgentId>,
    pub state: TrafficState,
    pub forecast: ExogenousForecast,
}

/// Internal junctions `J1..Jm` on a two-way path with occasional two-way
/// chords, each with its own entry and exit boundary junction `Bi`. Agents
/// own contiguous runs of the path, so their communication graph is
/// connected. Initial occupancy stays below 0.35·n̄ and there is no
/// exogenous outflow, which keeps the all-zero control feasible.
pub fn random_instance<R: Rng + ?Sized>(rng: &mut R, junctions: usize, horizon: usize) -> RandomInstance {
    assert!(junctions >= 1, "need at least one internal junction");
    let jid = |i: usize| format!("J{i}");
    let bid = |i: usize| format!("B{i}");

    let mut edges: Vec<(String, String)> = Vec::new();
    for i in 1..=junctions {
        edges.push((bid(i), jid(i)));
        edges.push((jid(i), bid(i)));
        if i < junctions {
            edges.push((jid(i), jid(i + 1)));
            edges.push((jid(i + 1), jid(i)));
        }
        for k in i + 2..=junctions {
            if rng.gen_bool(0.2) {
                edges.push((jid(i), jid(k)));
                edges.push((jid(k), jid(i)));
            }
        }
    }

    let ids: Vec<LinkId> = (1..=edges.len() as LinkId).collect();
    let mut links: Vec<RoadLink> = ids
        .iter()
        .zip(&edges)
        .map(|(&id, (s, d))| {
            let mut l = link(id, s, d, &[]);
            l.capacity = rng.gen_range(30.0..60.0);
            l.saturation_flow = rng.gen_range(0.4..0.6);
            if let Some(cap) = l.dest_outflow_cap.as_mut() {
                *cap = rng.gen_range(20.0..40.0);
            }
            l
        })
        .collect();

    for w in 0..links.len() {
        let (from, at) = (links[w].source.clone(), links[w].dest.clone());
        if at.starts_with('B') {
            continue;
        }
        let mut targets: Vec<LinkId> = links
            .iter()
            .filter(|l| l.source == at && l.dest != from)
            .map(|l| l.id)
            .collect();
        if targets.is_empty() {
            // A lone junction can only send traffic back where it came from.
            targets = links.iter().filter(|l| l.source == at).map(|l| l.id).collect();
        }
        let weights: Vec<f64> = targets.iter().map(|_| rng.gen_range(0.1..1.0)).collect();
        let total: f64 = weights.iter().sum();
        let mut ratios: Vec<(LinkId, f64)> = targets.iter().copied().zip(weights.iter().map(|w| w / total)).collect();
        // Put the rounding remainder on the last target so ratios sum to one.
        let head: f64 = ratios[..ratios.len() - 1].iter().map(|r| r.1).sum();
        ratios.last_mut().expect("every junction has an exit").1 = 1.0 - head;
        links[w].turn_ratios = ratios.into_iter().collect();
    }

    let mut all_junctions = Vec::new();
    for i in 1..=junctions {
        let incoming: Vec<LinkId> = links.iter().filter(|l| l.dest == jid(i)).map(|l| l.id).collect();
        let count = rng.gen_range(1..=incoming.len().min(3));
        let mut groups: Vec<Vec<LinkId>> = vec![Vec::new(); count];
        for (n, &z) in incoming.iter().enumerate() {
            let g = if n < count { n } else { rng.gen_range(0..count) };
            groups[g].push(z);
        }
        let phases = groups
            .iter()
            .enumerate()
            .map(|(p, g)| phase(&format!("p{}", p + 1), g))
            .collect();
        all_junctions.push(Junction::internal(jid(i), 4.0, phases));
        all_junctions.push(Junction::boundary(bid(i)));
    }
    let net = Network::new(60.0, all_junctions, links).expect("generated ids are unique");

    let agents = rng.gen_range(1..=junctions.min(3));
    let assignment = (1..=junctions)
        .flat_map(|i| {
            let a = (i - 1) * agents / junctions + 1;
            [(jid(i), a), (bid(i), a)]
        })
        .collect();

    let mut state = TrafficState::zeros(&net);
    for (z, n) in state.n.iter_mut() {
        *n = rng.gen_range(0.0..0.35) * net.links()[z].capacity;
    }
    for q in state.q.values_mut() {
        *q = rng.gen_range(0.0..10.0);
    }
    let steps = (0..horizon)
        .map(|_| ExogenousStep {
            d: net.source_links().map(|z| (z, rng.gen_range(5.0..30.0))).collect(),
            e_in: net.links().keys().map(|&z| (z, rng.gen_range(0.0..1.0))).collect(),
            e_out: BTreeMap::new(),
            ratios: BTreeMap::new(),
        })
        .collect();

    RandomInstance {
        net,
        assignment,
        state,
        forecast: ExogenousForecast { steps },
    }
}
