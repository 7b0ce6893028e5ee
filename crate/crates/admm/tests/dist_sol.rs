//! End-to-end runs of the distributed solver.

use lexinet_admm::solver::{coupling_payloads, orient_couplings, slack_dual_update, AgentIterate};
use lexinet_admm::{dist_sol, MailboxBus, SolverConfig};
use lexinet_core::network::build_partition;
use lexinet_core::problem::{build_pc_problem, build_tsc_problem, BuildOptions, LocalProblem};
use lexinet_core::qp::coupling_residual;
use lexinet_core::samples::{appendix_c, appendix_c_assignment};
use lexinet_core::{AgentQp, ExogenousForecast, ExogenousStep, TrafficState};
use lexinet_oracle::{solve_centralized, GlobalProblem, IpmOptions};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn averaging_pair() -> Vec<AgentQp> {
    let mut a = AgentQp::empty(1, 1);
    a.quad[(0, 0)] = 1.0;
    a.lin[0] = -1.0;
    a.couplings.insert(2, DMatrix::from_element(1, 1, 1.0));
    let mut b = AgentQp::empty(2, 1);
    b.quad[(0, 0)] = 1.0;
    b.lin[0] = -3.0;
    b.couplings.insert(1, DMatrix::from_element(1, 1, -1.0));
    vec![a, b]
}

#[test]
fn shared_variable_converges_to_average() {
    let cfg = SolverConfig {
        tol: 1e-9,
        ..SolverConfig::lp()
    };
    let sol = dist_sol(&averaging_pair(), &cfg, &MailboxBus::new(), None).unwrap();
    assert!(sol.report.converged);
    assert!((sol.x[0][0] - 2.0).abs() < 1e-7);
    assert!((sol.x[1][0] - 2.0).abs() < 1e-7);
    let oracle = solve_centralized(&GlobalProblem::from_agents(&averaging_pair()).unwrap(), &IpmOptions::default()).unwrap();
    assert!((oracle.x[0] - 2.0).abs() < 1e-8);
}

#[test]
fn box_lp_vertex_matches_oracle() {
    // min −x1 + 2x2 s.t. 0 ≤ x ≤ (3, 5)
    let mut qp = AgentQp::empty(1, 2);
    qp.lin = DVector::from_vec(vec![-1.0, 2.0]);
    qp.ineq = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0]);
    qp.ineq_rhs = DVector::from_vec(vec![3.0, 5.0, 0.0, 0.0]);
    let problems = vec![qp];
    let cfg = SolverConfig {
        tol: 1e-6,
        ..SolverConfig::lp()
    };
    let sol = dist_sol(&problems, &cfg, &MailboxBus::new(), None).unwrap();
    let oracle = solve_centralized(&GlobalProblem::from_agents(&problems).unwrap(), &IpmOptions::default()).unwrap();
    assert!(sol.report.converged);
    assert!((sol.report.cost - oracle.cost).abs() <= 1e-5, "{} vs {}", sol.report.cost, oracle.cost);
}

#[test]
fn iteration_cap_reports_not_converged() {
    let cfg = SolverConfig {
        s_max: 1,
        ..SolverConfig::lp()
    };
    let sol = dist_sol(&averaging_pair(), &cfg, &MailboxBus::new(), None).unwrap();
    assert!(!sol.report.converged);
    assert_eq!(sol.report.iterations, 1);
    assert_eq!(sol.report.trace.len(), 1);
    assert!(sol.report.residual.is_finite());
}

#[test]
fn slack_and_coupling_identities() {
    let problems = averaging_pair();
    let cfg = SolverConfig::lp();
    let o1 = orient_couplings(&problems[0]);
    let o2 = orient_couplings(&problems[1]);
    let mut a = AgentIterate::starting_at(&problems[0], &o1, DVector::from_element(1, 0.7));
    let mut b = AgentIterate::starting_at(&problems[1], &o2, DVector::from_element(1, 2.9));
    a.lambda_c.insert(2, DVector::from_element(1, 0.3));
    b.lambda_c.insert(1, DVector::from_element(1, -0.2));
    let pa = coupling_payloads(&o1, &a, &cfg);
    let pb = coupling_payloads(&o2, &b, &cfg);
    let before = a.lambda_c[&2].clone();
    slack_dual_update(&problems[0], &o1, &mut a, &pa, &[(2, pb[&1].clone())].into(), &cfg).unwrap();
    slack_dual_update(&problems[1], &o2, &mut b, &pb, &[(1, pa[&2].clone())].into(), &cfg).unwrap();
    assert_eq!(a.y_c[&2], b.y_c[&1]);
    let residual = &o1[&2] * &a.x - &a.y_c[&2];
    assert!((&a.lambda_c[&2] - (before - residual * cfg.rho)).amax() <= 1e-12);
}

fn appendix_problems(seed: u64, horizon: usize) -> (Vec<LocalProblem>, Vec<LocalProblem>) {
    let net = appendix_c();
    let part = build_partition(&net, &appendix_c_assignment()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = TrafficState::zeros(&net);
    for (z, n) in state.n.iter_mut() {
        *n = rng.gen_range(0.0..0.4) * net.links()[z].capacity;
    }
    let forecast = ExogenousForecast {
        steps: (0..horizon)
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

fn qps(problems: &[LocalProblem]) -> Vec<AgentQp> {
    problems.iter().map(|p| p.qp.clone()).collect()
}

#[test]
fn appendix_network_matches_oracle() {
    let (pc, tsc) = appendix_problems(2, 2);
    for (problems, cfg) in [(qps(&pc), SolverConfig::lp()), (qps(&tsc), SolverConfig::qp())] {
        let sol = dist_sol(&problems, &cfg, &MailboxBus::new(), None).unwrap();
        let oracle = solve_centralized(&GlobalProblem::from_agents(&problems).unwrap(), &IpmOptions::default()).unwrap();
        eprintln!(
            "iterations {} converged {} cost {} oracle {}",
            sol.report.iterations, sol.report.converged, sol.report.cost, oracle.cost
        );
        assert!(sol.report.converged);
        assert!((sol.report.cost - oracle.cost).abs() <= 1e-4 * (1.0 + oracle.cost.abs()));
        assert!(coupling_residual(&problems, &sol.x) <= 2.0 * cfg.tol);
    }
}

#[test]
fn deterministic_across_thread_counts() {
    let (pc, _) = appendix_problems(5, 2);
    let problems = qps(&pc);
    let cfg = SolverConfig {
        s_max: 300,
        ..SolverConfig::lp()
    };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| dist_sol(&problems, &cfg, &MailboxBus::new(), None).unwrap())
    };
    let one = run(1);
    let four = run(4);
    assert_eq!(one, four);
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn slack_stays_nonpositive(vals in proptest::collection::vec(-10.0f64..10.0, 6), x in -5.0f64..5.0, rho in 0.05f64..2.0) {
            let mut qp = AgentQp::empty(1, 1);
            qp.ineq = DMatrix::from_column_slice(3, 1, &vals[0..3]);
            qp.ineq_rhs = DVector::from_column_slice(&vals[3..6]);
            let cfg = SolverConfig { rho, ..SolverConfig::lp() };
            let oriented = orient_couplings(&qp);
            let mut it = AgentIterate::starting_at(&qp, &oriented, DVector::from_element(1, x));
            it.lambda = DVector::from_column_slice(&vals[0..3]);
            let before = it.lambda.clone();
            slack_dual_update(&qp, &oriented, &mut it, &Default::default(), &Default::default(), &cfg).unwrap();
            prop_assert!(it.y.iter().all(|&v| v <= 0.0));
            let r = &qp.ineq * &it.x - &it.y - &qp.ineq_rhs;
            prop_assert!((&it.lambda - (before - r * rho)).amax() <= 1e-12);
        }
    }
}
