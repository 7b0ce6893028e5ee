//! Solver-facing block format for one agent's convex program.
//!
//! Each agent `i` holds
//!
//! ```text
//! min  ½ xᵀ W x + wᵀ x
//! s.t. U x = u,   V x ≤ v,
//!      A_ij x_i + A_ji x_j = 0   for every neighbour j
//! ```
//!
//! The coupling block is stored in global-sum form: for a variable shared by
//! agents `i < j`, agent `i`'s row carries `+1` and agent `j`'s row carries
//! `-1`, so the pair of rows states that both copies are equal.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::AgentId;

#[derive(Debug, Clone, PartialEq)]
pub struct AgentQp {
    pub agent: AgentId,
    /// Symmetric positive semidefinite quadratic cost W.
    pub quad: DMatrix<f64>,
    pub lin: DVector<f64>,
    pub eq: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub ineq: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
    /// Neighbour -> A_ij. All blocks for one pair have the same row count.
    pub couplings: BTreeMap<AgentId, DMatrix<f64>>,
}

#[derive(Debug, Error, PartialEq)]
pub enum ShapeError {
    #[error("agent {agent}: {what} has shape {got:?}, expected {expected:?}")]
    Block {
        agent: AgentId,
        what: String,
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("agents {0} and {1}: coupling blocks disagree on row count ({2} vs {3})")]
    CouplingRows(AgentId, AgentId, usize, usize),
    #[error("agent {0} lists neighbour {1} which does not list it back")]
    Asymmetric(AgentId, AgentId),
    #[error("agent ids must be 1..=N in order, found {0} at position {1}")]
    AgentOrder(AgentId, usize),
}

impl AgentQp {
    /// An unconstrained zero-cost program of dimension `dim`.
    pub fn empty(agent: AgentId, dim: usize) -> Self {
        Self {
            agent,
            quad: DMatrix::zeros(dim, dim),
            lin: DVector::zeros(dim),
            eq: DMatrix::zeros(0, dim),
            eq_rhs: DVector::zeros(0),
            ineq: DMatrix::zeros(0, dim),
            ineq_rhs: DVector::zeros(0),
            couplings: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lin.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.quad * x)) + self.lin.dot(x)
    }

    /// ‖Ux − u‖∞.
    pub fn eq_residual(&self, x: &DVector<f64>) -> f64 {
        inf_norm(&(&self.eq * x - &self.eq_rhs))
    }

    /// max(0, max_r (Vx − v)_r).
    pub fn ineq_violation(&self, x: &DVector<f64>) -> f64 {
        (&self.ineq * x - &self.ineq_rhs).iter().fold(0.0f64, |m, &r| m.max(r))
    }

    pub fn check_shapes(&self) -> Result<(), ShapeError> {
        let n = self.dim();
        let check = |what: &str, got: (usize, usize), expected: (usize, usize)| {
            if got == expected {
                Ok(())
            } else {
                Err(ShapeError::Block {
                    agent: self.agent,
                    what: what.to_string(),
                    got,
                    expected,
                })
            }
        };
        check("W", self.quad.shape(), (n, n))?;
        check("U", self.eq.shape(), (self.eq_rhs.len(), n))?;
        check("V", self.ineq.shape(), (self.ineq_rhs.len(), n))?;
        for (j, a) in &self.couplings {
            check(&format!("A_{}{}", self.agent, j), (a.ncols(), 0), (n, 0))?;
        }
        Ok(())
    }
}

/// Validates a whole set of agent programs: per-agent shapes, dense ids, and
/// matching coupling pairs.
pub fn check_consistency(problems: &[AgentQp]) -> Result<(), ShapeError> {
    for (pos, p) in problems.iter().enumerate() {
        if p.agent != pos + 1 {
            return Err(ShapeError::AgentOrder(p.agent, pos));
        }
        p.check_shapes()?;
    }
    for p in problems {
        for (&j, a) in &p.couplings {
            let other = problems
                .get(j.wrapping_sub(1))
                .and_then(|q| q.couplings.get(&p.agent))
                .ok_or(ShapeError::Asymmetric(p.agent, j))?;
            if other.nrows() != a.nrows() {
                return Err(ShapeError::CouplingRows(p.agent, j, a.nrows(), other.nrows()));
            }
        }
    }
    Ok(())
}

/// Largest |A_ij x_i + A_ji x_j| entry over all neighbour pairs.
pub fn coupling_residual(problems: &[AgentQp], xs: &[DVector<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for p in problems {
        for (&j, a) in &p.couplings {
            if j < p.agent {
                continue;
            }
            let back = &problems[j - 1].couplings[&p.agent];
            let r = a * &xs[p.agent - 1] + back * &xs[j - 1];
            worst = worst.max(inf_norm(&r));
        }
    }
    worst
}

pub fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Row-major dense serialization of an [`AgentQp`] with optional labels,
/// used for problem dumps that the centralized oracle can reload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentQpDump {
    pub agent: AgentId,
    #[serde(default)]
    pub labels: Vec<String>,
    pub quad: Vec<Vec<f64>>,
    pub lin: Vec<f64>,
    pub eq: Vec<Vec<f64>>,
    pub eq_rhs: Vec<f64>,
    #[serde(default)]
    pub eq_labels: Vec<String>,
    pub ineq: Vec<Vec<f64>>,
    pub ineq_rhs: Vec<f64>,
    #[serde(default)]
    pub ineq_labels: Vec<String>,
    pub couplings: BTreeMap<AgentId, Vec<Vec<f64>>>,
    /// c_i, present for perimeter-stage problems.
    #[serde(default)]
    pub perimeter: Vec<f64>,
    #[serde(default)]
    pub constant: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum DumpError {
    #[error("agent {agent}: ragged matrix {what}")]
    Ragged { agent: AgentId, what: String },
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_from_rows(
    agent: AgentId,
    what: &str,
    rows: &[Vec<f64>],
    ncols: usize,
) -> Result<DMatrix<f64>, DumpError> {
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(DumpError::Ragged {
            agent,
            what: what.to_string(),
        });
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c]))
}

impl AgentQpDump {
    pub fn from_qp(qp: &AgentQp) -> Self {
        Self {
            agent: qp.agent,
            labels: Vec::new(),
            quad: rows_of(&qp.quad),
            lin: qp.lin.iter().copied().collect(),
            eq: rows_of(&qp.eq),
            eq_rhs: qp.eq_rhs.iter().copied().collect(),
            eq_labels: Vec::new(),
            ineq: rows_of(&qp.ineq),
            ineq_rhs: qp.ineq_rhs.iter().copied().collect(),
            ineq_labels: Vec::new(),
            couplings: qp.couplings.iter().map(|(&j, a)| (j, rows_of(a))).collect(),
            perimeter: Vec::new(),
            constant: 0.0,
        }
    }

    pub fn to_qp(&self) -> Result<AgentQp, DumpError> {
        let n = self.lin.len();
        let qp = AgentQp {
            agent: self.agent,
            quad: matrix_from_rows(self.agent, "quad", &self.quad, n)?,
            lin: DVector::from_vec(self.lin.clone()),
            eq: matrix_from_rows(self.agent, "eq", &self.eq, n)?,
            eq_rhs: DVector::from_vec(self.eq_rhs.clone()),
            ineq: matrix_from_rows(self.agent, "ineq", &self.ineq, n)?,
            ineq_rhs: DVector::from_vec(self.ineq_rhs.clone()),
            couplings: self
                .couplings
                .iter()
                .map(|(&j, rows)| Ok((j, matrix_from_rows(self.agent, &format!("A_{j}"), rows, n)?)))
                .collect::<Result<_, DumpError>>()?,
        };
        qp.check_shapes()?;
        Ok(qp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair() -> Vec<AgentQp> {
        let mut a = AgentQp::empty(1, 2);
        let mut b = AgentQp::empty(2, 1);
        a.couplings.insert(2, DMatrix::from_row_slice(1, 2, &[0.0, 1.0]));
        b.couplings.insert(1, DMatrix::from_row_slice(1, 1, &[-1.0]));
        vec![a, b]
    }

    #[test]
    fn consistent_pair_passes() {
        assert_eq!(check_consistency(&pair()), Ok(()));
        let xs = vec![DVector::from_vec(vec![5.0, 2.0]), DVector::from_vec(vec![2.0])];
        assert_eq!(coupling_residual(&pair(), &xs), 0.0);
    }

    #[test]
    fn asymmetric_coupling_is_rejected() {
        let mut ps = pair();
        ps[1].couplings.clear();
        assert_eq!(check_consistency(&ps), Err(ShapeError::Asymmetric(1, 2)));
    }

    #[test]
    fn dump_round_trips() {
        let mut qp = pair().remove(0);
        qp.quad[(0, 0)] = 2.0;
        qp.ineq = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        qp.ineq_rhs = DVector::from_vec(vec![3.0]);
        let dump = AgentQpDump::from_qp(&qp);
        let back = dump.to_qp().unwrap();
        assert_eq!(back, qp);
    }

    #[test]
    fn ragged_dump_is_rejected() {
        let mut dump = AgentQpDump::from_qp(&AgentQp::empty(1, 2));
        dump.eq = vec![vec![1.0]];
        dump.eq_rhs = vec![0.0];
        assert!(matches!(dump.to_qp(), Err(DumpError::Ragged { .. })));
    }
}
