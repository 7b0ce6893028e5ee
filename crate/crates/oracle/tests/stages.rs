//! Stacking, dump reloading and the two-stage lexicographic solve on
//! networks built by the problem builder.

use std::collections::BTreeMap;

use lexinet_core::network::{build_partition, single_agent};
use lexinet_core::problem::{build_pc_problem, build_tsc_problem, BuildOptions, LocalProblem};
use lexinet_core::samples::{appendix_c, appendix_c_assignment, chain};
use lexinet_core::{AgentQp, ExogenousForecast, ExogenousStep, TrafficState};
use lexinet_oracle::{
    read_dumps, solve_centralized, solve_lexicographic_centralized, GlobalProblem, IpmOptions, OracleError,
};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn demand(link: u32, per_step: &[f64]) -> ExogenousForecast {
    ExogenousForecast {
        steps: per_step
            .iter()
            .map(|&d| ExogenousStep {
                d: BTreeMap::from([(link, d)]),
                ..Default::default()
            })
            .collect(),
    }
}

fn qps(problems: &[LocalProblem]) -> Vec<AgentQp> {
    problems.iter().map(|p| p.qp.clone()).collect()
}

fn chain_pc_cost(per_step: &[f64]) -> f64 {
    let net = chain();
    let part = single_agent(&net);
    let state = TrafficState::zeros(&net);
    let pc = build_pc_problem(&net, &part, &state, &demand(1, per_step), BuildOptions::default()).unwrap();
    let g = GlobalProblem::from_agents(&qps(&pc)).unwrap();
    solve_centralized(&g, &IpmOptions::default()).unwrap().cost
}

#[test]
fn chain_single_step_queue() {
    // Admission is bounded by the free space n̄ = 40, so 10 of 50 vehicles wait.
    assert!((chain_pc_cost(&[50.0]) - 10.0).abs() < 1e-6);
}

#[test]
fn chain_two_step_queue() {
    // Φ1 = q(1) + q(2) = 150 − 2f_u(0) − f_u(1), with f_u(0) ≤ 40 and
    // f_u(1) ≤ 40 − f_u(0) + f_d(0), f_d(0) ≤ S·(T − L) = 28. Binding at
    // f_u(0) = 40, f_d(0) = 28, f_u(1) = 28 gives 42.
    let cost = chain_pc_cost(&[50.0, 50.0]);
    assert!(cost > 0.0);
    assert!((cost - 42.0).abs() < 1e-6, "got {cost}");
}

#[test]
fn zero_demand_fixed_point() {
    let net = chain();
    let part = single_agent(&net);
    let state = TrafficState::zeros(&net);
    let forecast = ExogenousForecast::empty(2);
    let pc = build_pc_problem(&net, &part, &state, &forecast, BuildOptions::default()).unwrap();
    let g = GlobalProblem::from_agents(&qps(&pc)).unwrap();
    let sol = solve_centralized(&g, &IpmOptions::default()).unwrap();
    assert!(sol.cost.abs() < 1e-6);
    let zero = DVector::zeros(g.dim());
    assert!(pc[0].qp.eq_residual(&zero) < 1e-12);
    assert!(pc[0].qp.ineq_violation(&zero) <= 0.0);
}

fn appendix_instance(seed: u64) -> (Vec<LocalProblem>, Vec<LocalProblem>) {
    let net = appendix_c();
    let part = build_partition(&net, &appendix_c_assignment()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = TrafficState::zeros(&net);
    for (z, n) in state.n.iter_mut() {
        *n = rng.gen_range(0.0..0.4) * net.links()[z].capacity;
    }
    let forecast = ExogenousForecast {
        steps: (0..2)
            .map(|_| ExogenousStep {
                d: net.source_links().map(|z| (z, rng.gen_range(10.0..40.0))).collect(),
                ..Default::default()
            })
            .collect(),
    };
    let opts = BuildOptions::default();
    (
        build_pc_problem(&net, &part, &state, &forecast, opts).unwrap(),
        build_tsc_problem(&net, &part, &state, &forecast, 0.25, 0.01, opts).unwrap(),
    )
}

#[test]
fn column_map_reproduces_local_residuals() {
    let (pc, _) = appendix_instance(3);
    let local = qps(&pc);
    let g = GlobalProblem::from_agents(&local).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = DVector::from_fn(g.dim(), |_, _| rng.gen_range(-3.0..3.0));
    let parts = g.split(&x);
    assert_eq!(g.join(&parts), x);

    let global_eq = &g.eq * &x - &g.eq_rhs;
    let global_ineq = &g.ineq * &x - &g.ineq_rhs;
    let (mut re, mut ri) = (0, 0);
    for (qp, xi) in local.iter().zip(&parts) {
        let e = &qp.eq * xi - &qp.eq_rhs;
        assert_eq!(global_eq.rows(re, e.len()), e.rows(0, e.len()));
        re += e.len();
        let v = &qp.ineq * xi - &qp.ineq_rhs;
        assert_eq!(global_ineq.rows(ri, v.len()), v.rows(0, v.len()));
        ri += v.len();
    }
    assert_eq!(re, g.local_eq_rows);
    assert_eq!(
        global_eq.rows(re, g.eq.nrows() - re).amax(),
        lexinet_core::qp::coupling_residual(&local, &parts)
    );
}

#[test]
fn lexicographic_stage_holds_first_stage_value() {
    let (pc, tsc) = appendix_instance(9);
    let gp = GlobalProblem::from_agents(&qps(&pc)).unwrap();
    let gt = GlobalProblem::from_agents(&qps(&tsc)).unwrap();
    let lexi = solve_lexicographic_centralized(&gp, &gt, &IpmOptions::default()).unwrap();
    assert!(lexi.lexicographic_residual <= 1e-8, "{}", lexi.lexicographic_residual);
    let unconstrained = solve_centralized(&gt, &IpmOptions::default()).unwrap();
    assert!(lexi.tsc.cost >= unconstrained.cost - 1e-6);
}

#[test]
fn quadratic_first_stage_is_rejected() {
    let (_, tsc) = appendix_instance(1);
    let gt = GlobalProblem::from_agents(&qps(&tsc)).unwrap();
    assert_eq!(
        solve_lexicographic_centralized(&gt, &gt, &IpmOptions::default()),
        Err(OracleError::NonLinearFirstStage)
    );
}

#[test]
fn dumps_round_trip_through_files() {
    let (pc, _) = appendix_instance(4);
    let dir = tempfile::tempdir().unwrap();
    for p in pc.iter().rev() {
        let path = dir.path().join(format!("agent_{}.json", p.agent()));
        std::fs::write(path, serde_json::to_string(&p.dump()).unwrap()).unwrap();
    }
    let dumps = read_dumps(dir.path()).unwrap();
    let reloaded = GlobalProblem::from_dumps(&dumps).unwrap();
    assert_eq!(reloaded, GlobalProblem::from_agents(&qps(&pc)).unwrap());
}

#[test]
fn empty_dump_dir_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(read_dumps(dir.path()), Err(OracleError::EmptyDumpDir(_))));
}
