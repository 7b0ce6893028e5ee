//! Dense Mehrotra predictor-corrector interior-point method for
//!
//! ```text
//! min ½xᵀHx + cᵀx  s.t.  Ax = b,  Gx + s = h,  s ≥ 0
//! ```
//!
//! with equality multipliers `y` and inequality multipliers `z ≥ 0`.

use std::ops::Add;

use nalgebra::{DMatrix, DVector};

use crate::global::GlobalProblem;
use crate::OracleError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IpmOptions {
    /// Relative tolerance on every KKT block and on the duality gap.
    pub tol: f64,
    /// Looser tolerance accepted when progress stalls.
    pub acceptable: f64,
    pub max_iter: usize,
}

impl Default for IpmOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            acceptable: 1e-6,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentralSolution {
    pub x: DVector<f64>,
    /// Objective including the constant term.
    pub cost: f64,
    pub eq_dual: DVector<f64>,
    pub ineq_dual: DVector<f64>,
    pub iterations: usize,
    pub kkt: KktResidual,
}

/// Infinity-norm KKT residuals at a returned point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResidual {
    pub stationarity: f64,
    pub equality: f64,
    /// Largest violation of Gx ≤ h.
    pub inequality: f64,
    /// Largest |z_i (h − Gx)_i|.
    pub complementarity: f64,
}

const REG: f64 = 1e-8;
const DIVERGED: f64 = 1e6;
const STEP_FRACTION: f64 = 0.995;
/// Merit growth over the best seen that counts as divergence.
const STALL: f64 = 1e4;

fn inf(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, &d)| d < 0.0)
        .map(|(&v, &d)| -v / d)
        .fold(1.0f64, f64::min)
}

/// KKT residuals of `(x, y, z)`.
pub fn kkt_residual(p: &GlobalProblem, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>) -> KktResidual {
    let slack = &p.ineq_rhs - &p.ineq * x;
    KktResidual {
        stationarity: inf(&(&p.quad * x + &p.lin + p.eq.tr_mul(y) + p.ineq.tr_mul(z))),
        equality: inf(&(&p.eq * x - &p.eq_rhs)),
        inequality: slack.iter().fold(0.0f64, |m, &s| m.max(-s)),
        complementarity: slack.iter().zip(z.iter()).fold(0.0f64, |m, (s, z)| m.max((s * z).abs())),
    }
}

struct Newton {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    exact: DMatrix<f64>,
}

impl Newton {
    fn solve(&self, rhs: &DVector<f64>) -> Option<DVector<f64>> {
        let mut sol = self.lu.solve(rhs)?;
        for _ in 0..2 {
            let r = rhs - &self.exact * &sol;
            sol += self.lu.solve(&r)?;
        }
        Some(sol)
    }
}

/// Solves the convex program to the relative tolerance in `opts`.
pub fn solve_centralized(p: &GlobalProblem, opts: &IpmOptions) -> Result<CentralSolution, OracleError> {
    let n = p.dim();
    let me = p.eq.nrows();
    let mi = p.ineq.nrows();
    let (h_mat, c, a, b, g, h) = (&p.quad, &p.lin, &p.eq, &p.eq_rhs, &p.ineq, &p.ineq_rhs);
    let scale_d = 1.0 + inf(c) + h_mat.amax();
    let scale_p = 1.0 + inf(b);
    let scale_g = 1.0 + inf(h);

    let kkt = |d: &DVector<f64>, reg: f64| {
        let mut k = DMatrix::zeros(n + me, n + me);
        let mut top = h_mat.clone();
        if mi > 0 {
            let dg = DMatrix::from_fn(mi, n, |r, col| d[r] * g[(r, col)]);
            top += g.tr_mul(&dg);
        }
        for i in 0..n {
            top[(i, i)] += reg;
        }
        k.view_mut((0, 0), (n, n)).copy_from(&top);
        k.view_mut((n, 0), (me, n)).copy_from(a);
        k.view_mut((0, n), (n, me)).copy_from(&a.transpose());
        for i in 0..me {
            k[(n + i, n + i)] = -reg;
        }
        k
    };

    // Starting point: minimize the objective plus ½‖Gx − h‖² subject to Ax = b.
    let mut x = {
        let ones = DVector::from_element(mi, 1.0);
        let k = kkt(&ones, 1e-8);
        let mut rhs = DVector::zeros(n + me);
        rhs.rows_mut(0, n).copy_from(&(-c + g.tr_mul(h)));
        rhs.rows_mut(n, me).copy_from(b);
        match k.lu().solve(&rhs) {
            Some(s) => s.rows(0, n).into_owned(),
            None => DVector::zeros(n),
        }
    };
    let mut s = (h - g * &x).map(|v| v.max(1.0));
    let mut z = DVector::from_element(mi, 1.0);
    let mut y = DVector::zeros(me);
    let mut reference: Option<(f64, f64)> = None;
    let mut best: Option<(f64, usize, DVector<f64>, DVector<f64>, DVector<f64>)> = None;

    for iter in 0..opts.max_iter {
        let rd = h_mat * &x + c + a.tr_mul(&y) + g.tr_mul(&z);
        let rp = a * &x - b;
        let rg = g * &x + &s - h;
        let gap = s.dot(&z);
        let mu = if mi > 0 { gap / mi as f64 } else { 0.0 };
        let pobj = 0.5 * x.dot(&(h_mat * &x)) + c.dot(&x);
        let infeas = (inf(&rd) / scale_d).max(inf(&rp) / scale_p).max(inf(&rg) / scale_g);
        let (mu0, infeas0) = *reference.get_or_insert((mu, infeas.max(f64::MIN_POSITIVE)));

        let merit = infeas.max(gap / (1.0 + pobj.abs()));
        if best.as_ref().is_none_or(|b| merit < b.0) {
            best = Some((merit, iter, x.clone(), y.clone(), z.clone()));
        }
        let best_merit = best.as_ref().map_or(f64::INFINITY, |b| b.0);
        if merit <= opts.tol || merit > STALL * best_merit {
            break;
        }
        if inf(&x) > DIVERGED * scale_p.max(scale_g) {
            // Certificate of unboundedness: a recession direction of the
            // feasible set along which the objective decreases.
            let d = &x / x.norm();
            let cert = 1e-6;
            if c.dot(&d) < -cert
                && inf(&(h_mat * &d)) <= cert
                && inf(&(a * &d)) <= cert
                && (g * &d).iter().all(|&v| v <= cert)
            {
                return Err(OracleError::Unbounded);
            }
        }
        let dual_norm = inf(&y).max(inf(&z));
        if dual_norm > DIVERGED * scale_d {
            // Farkas certificate: Aᵀy + Gᵀz = 0, z ≥ 0, bᵀy + hᵀz < 0.
            let norm = y.norm_squared().add(z.norm_squared()).sqrt();
            let (yd, zd) = (&y / norm, &z / norm);
            let cert = 1e-6;
            if b.dot(&yd) + h.dot(&zd) < -cert && inf(&(a.tr_mul(&yd) + g.tr_mul(&zd))) <= cert {
                return Err(OracleError::Infeasible);
            }
        }

        let d = z.component_div(&s);
        let exact = kkt(&d, 0.0);
        let lu = kkt(&d, REG).lu();
        let newton = Newton { lu, exact };

        // r_sz is the complementarity target residual s∘z − σμ + corrections.
        let direction = |r_sz: &DVector<f64>| -> Option<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>)> {
            let t = (-r_sz + z.component_mul(&rg)).component_div(&s);
            let mut rhs = DVector::zeros(n + me);
            rhs.rows_mut(0, n).copy_from(&(-&rd - g.tr_mul(&t)));
            rhs.rows_mut(n, me).copy_from(&(-&rp));
            let sol = newton.solve(&rhs)?;
            let dx = sol.rows(0, n).into_owned();
            let dy = sol.rows(n, me).into_owned();
            let gdx = g * &dx;
            let dz = &t + d.component_mul(&gdx);
            let ds = -&rg - gdx;
            Some((dx, dy, ds, dz))
        };

        let sz = s.component_mul(&z);
        let (_, _, ds_a, dz_a) = direction(&sz).ok_or(OracleError::SingularKkt)?;
        let sigma = if mi > 0 {
            let a_aff = max_step(&s, &ds_a).min(max_step(&z, &dz_a));
            let mu_aff = (&s + &ds_a * a_aff).dot(&(&z + &dz_a * a_aff)) / mi as f64;
            (mu_aff / mu).powi(3).clamp(0.0, 1.0)
        } else {
            0.0
        };
        // Keep complementarity from vanishing ahead of the infeasibilities,
        // which would leave the Newton system hopelessly ill-conditioned.
        let target = (sigma * mu).max(0.1 * mu0 * infeas / infeas0);
        let r_sz = sz + ds_a.component_mul(&dz_a) - DVector::from_element(mi, target);
        let (dx, dy, ds, dz) = direction(&r_sz).ok_or(OracleError::SingularKkt)?;
        let alpha = if mi > 0 {
            (STEP_FRACTION * max_step(&s, &ds).min(max_step(&z, &dz))).min(1.0)
        } else {
            1.0
        };
        x += &dx * alpha;
        y += &dy * alpha;
        s += &ds * alpha;
        z += &dz * alpha;
    }

    // Without a strictly feasible point (implicit equalities such as
    // 0 ≤ f ≤ 0) the multipliers drift off once the residuals are tiny, so the
    // best iterate seen is accepted when it is close enough.
    match best {
        Some((merit, iter, x, y, z)) if merit <= opts.tol.max(opts.acceptable) => {
            if merit > opts.tol {
                log::debug!("interior point stopped at merit {merit:.3e} after {iter} iterations");
            }
            Ok(CentralSolution {
                cost: p.objective(&x),
                kkt: kkt_residual(p, &x, &y, &z),
                x,
                eq_dual: y,
                ineq_dual: z,
                iterations: iter,
            })
        }
        Some((merit, ..)) => Err(OracleError::MaxIterations {
            iterations: opts.max_iter,
            residual: merit,
        }),
        None => Err(OracleError::MaxIterations {
            iterations: opts.max_iter,
            residual: f64::INFINITY,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use lexinet_core::AgentQp;

    fn single(f: impl FnOnce(&mut AgentQp)) -> GlobalProblem {
        let mut qp = AgentQp::empty(1, 1);
        f(&mut qp);
        GlobalProblem::from_agents(&[qp]).unwrap()
    }

    #[test]
    fn vertex_optimum() {
        let p = single(|q| {
            q.lin[0] = 1.0;
            q.ineq = DMatrix::from_element(1, 1, -1.0);
            q.ineq_rhs = DVector::from_element(1, -2.0);
        });
        let s = solve_centralized(&p, &IpmOptions::default()).unwrap();
        assert!((s.x[0] - 2.0).abs() < 1e-8);
        assert!((s.cost - 2.0).abs() < 1e-8);
    }

    #[test]
    fn equality_pinned_quadratic() {
        let p = single(|q| {
            q.quad[(0, 0)] = 1.0;
            q.eq = DMatrix::from_element(1, 1, 1.0);
            q.eq_rhs = DVector::from_element(1, 3.0);
        });
        let s = solve_centralized(&p, &IpmOptions::default()).unwrap();
        assert!((s.x[0] - 3.0).abs() < 1e-10);
        assert!((s.cost - 4.5).abs() < 1e-9);
    }

    #[test]
    fn infeasible_is_reported() {
        // x ≥ 2 and x ≤ 1
        let p = single(|q| {
            q.lin[0] = 1.0;
            q.ineq = DMatrix::from_column_slice(2, 1, &[-1.0, 1.0]);
            q.ineq_rhs = DVector::from_vec(vec![-2.0, 1.0]);
        });
        assert_eq!(solve_centralized(&p, &IpmOptions::default()), Err(OracleError::Infeasible));
    }

    #[test]
    fn unbounded_is_reported() {
        // min −x s.t. x ≥ 0
        let p = single(|q| {
            q.lin[0] = -1.0;
            q.ineq = DMatrix::from_element(1, 1, -1.0);
            q.ineq_rhs = DVector::zeros(1);
        });
        assert_eq!(solve_centralized(&p, &IpmOptions::default()), Err(OracleError::Unbounded));
    }

    #[test]
    fn iteration_cap_is_reported() {
        let p = single(|q| {
            q.lin[0] = 1.0;
            q.ineq = DMatrix::from_element(1, 1, -1.0);
            q.ineq_rhs = DVector::from_element(1, -2.0);
        });
        let opts = IpmOptions {
            max_iter: 1,
            ..IpmOptions::default()
        };
        assert!(matches!(
            solve_centralized(&p, &opts),
            Err(OracleError::MaxIterations { iterations: 1, .. })
        ));
    }
}
