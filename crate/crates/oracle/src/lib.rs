//! Centralized reference solver for the stacked agent problems.
//!
//! Shares no code with the distributed solver: problems are stacked into one
//! dense convex program and solved by a primal-dual interior-point method.

pub mod global;
pub mod ipm;

use lexinet_core::qp::{DumpError, ShapeError};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub use global::{read_dumps, GlobalProblem};
pub use ipm::{kkt_residual, solve_centralized, CentralSolution, IpmOptions, KktResidual};

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("problem is infeasible")]
    Infeasible,
    #[error("problem is unbounded")]
    Unbounded,
    #[error("no convergence after {iterations} iterations (primal residual {residual:.3e})")]
    MaxIterations { iterations: usize, residual: f64 },
    #[error("Newton system is singular")]
    SingularKkt,
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Dump(#[from] DumpError),
    #[error("first-stage objective must be linear")]
    NonLinearFirstStage,
    #[error("stages have {pc} and {tsc} columns")]
    StageMismatch { pc: usize, tsc: usize },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}: {message}")]
    Json { path: String, message: String },
    #[error("no problem dumps in {0}")]
    EmptyDumpDir(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LexicographicSolution {
    /// Φ_opt of the first stage.
    pub pc_cost: f64,
    pub pc: CentralSolution,
    /// Second stage with the first-stage value held fixed.
    pub tsc: CentralSolution,
    /// |cᵀx_tsc − Φ_opt|.
    pub lexicographic_residual: f64,
}

/// Solves the perimeter stage, then the signal stage with the single extra
/// equality `cᵀx = Φ_opt`, where `c` is the perimeter stage's linear cost.
pub fn solve_lexicographic_centralized(
    pc: &GlobalProblem,
    tsc: &GlobalProblem,
    opts: &IpmOptions,
) -> Result<LexicographicSolution, OracleError> {
    if pc.dim() != tsc.dim() {
        return Err(OracleError::StageMismatch {
            pc: pc.dim(),
            tsc: tsc.dim(),
        });
    }
    if pc.quad.iter().any(|&v| v != 0.0) {
        return Err(OracleError::NonLinearFirstStage);
    }
    let first = solve_centralized(pc, opts)?;
    let c = &pc.lin;
    // The value at the returned point, rather than the cost, keeps the second
    // stage feasible to the first stage's own tolerance.
    let target = c.dot(&first.x);

    let mut second = tsc.clone();
    let rows = tsc.eq.nrows();
    let mut eq = DMatrix::zeros(rows + 1, tsc.dim());
    eq.view_mut((0, 0), (rows, tsc.dim())).copy_from(&tsc.eq);
    eq.row_mut(rows).copy_from(&c.transpose());
    let mut eq_rhs = DVector::zeros(rows + 1);
    eq_rhs.rows_mut(0, rows).copy_from(&tsc.eq_rhs);
    eq_rhs[rows] = target;
    second.eq = eq;
    second.eq_rhs = eq_rhs;

    let tsc_sol = solve_centralized(&second, opts)?;
    Ok(LexicographicSolution {
        pc_cost: first.cost,
        lexicographic_residual: (c.dot(&tsc_sol.x) - first.cost + pc.constant).abs(),
        pc: first,
        tsc: tsc_sol,
    })
}
