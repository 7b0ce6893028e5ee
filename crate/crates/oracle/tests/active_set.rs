//! Interior-point results against exhaustive active-set enumeration.

use lexinet_core::AgentQp;
use lexinet_oracle::{solve_centralized, GlobalProblem, IpmOptions};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Minimum of a strictly convex QP found by solving the equality-constrained
/// problem for every subset of active inequalities and keeping the best
/// primal-feasible point.
fn enumerate(h: &DMatrix<f64>, c: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>, g: &DMatrix<f64>, hv: &DVector<f64>) -> f64 {
    let n = h.nrows();
    let m = g.nrows();
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << m) {
        let active: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let rows = a.nrows() + active.len();
        if rows > n {
            continue;
        }
        let mut k = DMatrix::zeros(n + rows, n + rows);
        k.view_mut((0, 0), (n, n)).copy_from(h);
        let mut rhs = DVector::zeros(n + rows);
        rhs.rows_mut(0, n).copy_from(&(-c));
        for r in 0..a.nrows() {
            for j in 0..n {
                k[(n + r, j)] = a[(r, j)];
                k[(j, n + r)] = a[(r, j)];
            }
            rhs[n + r] = b[r];
        }
        for (t, &i) in active.iter().enumerate() {
            let r = a.nrows() + t;
            for j in 0..n {
                k[(n + r, j)] = g[(i, j)];
                k[(j, n + r)] = g[(i, j)];
            }
            rhs[n + r] = hv[i];
        }
        let Some(sol) = k.lu().solve(&rhs) else { continue };
        let x = sol.rows(0, n).into_owned();
        if (g * &x - hv).iter().all(|&v| v <= 1e-9) && (a * &x - b).amax() <= 1e-9 {
            best = best.min(0.5 * x.dot(&(h * &x)) + c.dot(&x));
        }
    }
    best
}

#[test]
fn matches_enumeration_on_random_qps() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..60 {
        let n = rng.gen_range(1..=30);
        let me = rng.gen_range(0..=n.min(3));
        let mi = rng.gen_range(1..=8);
        let l = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let h = &l * l.transpose() + DMatrix::identity(n, n) * 0.1;
        let c = DVector::from_fn(n, |_, _| rng.gen_range(-5.0..5.0));
        let x0 = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
        let a = DMatrix::from_fn(me, n, |_, _| rng.gen_range(-1.0..1.0));
        let b = &a * &x0;
        let g = DMatrix::from_fn(mi, n, |_, _| rng.gen_range(-1.0..1.0));
        let hv = &g * &x0 + DVector::from_fn(mi, |_, _| rng.gen_range(0.0..1.0));

        let mut qp = AgentQp::empty(1, n);
        qp.quad = h.clone();
        qp.lin = c.clone();
        qp.eq = a.clone();
        qp.eq_rhs = b.clone();
        qp.ineq = g.clone();
        qp.ineq_rhs = hv.clone();
        let p = GlobalProblem::from_agents(&[qp]).unwrap();
        let got = solve_centralized(&p, &IpmOptions::default()).unwrap();
        let want = enumerate(&h, &c, &a, &b, &g, &hv);
        assert!(
            (got.cost - want).abs() <= 1e-6 * (1.0 + want.abs()),
            "case {case}: ipm {} vs enumeration {want}",
            got.cost
        );
        assert!(got.kkt.inequality <= 1e-8 && got.kkt.equality <= 1e-8);
    }
}
