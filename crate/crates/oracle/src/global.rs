//! The undecomposed problem: all agents' variables side by side, with the
//! coupling constraints appended to the equality block.

use std::fs;
use std::path::Path;

use lexinet_core::qp::{check_consistency, AgentQpDump};
use lexinet_core::AgentQp;
use nalgebra::{DMatrix, DVector};

use crate::OracleError;

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalProblem {
    pub quad: DMatrix<f64>,
    pub lin: DVector<f64>,
    pub eq: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub ineq: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
    /// Cost term independent of x.
    pub constant: f64,
    /// First global column of each agent, in agent order.
    pub offsets: Vec<usize>,
    pub dims: Vec<usize>,
    /// Number of equality rows that come from the local blocks; coupling
    /// rows follow.
    pub local_eq_rows: usize,
}

impl GlobalProblem {
    /// Stacks agents `1..=N` block-diagonally and appends one equality
    /// `A_ij x_i + A_ji x_j = 0` per coupling row of every pair `i < j`.
    pub fn from_agents(problems: &[AgentQp]) -> Result<Self, OracleError> {
        check_consistency(problems)?;
        let dims: Vec<usize> = problems.iter().map(AgentQp::dim).collect();
        let offsets: Vec<usize> = dims
            .iter()
            .scan(0, |acc, &d| {
                let o = *acc;
                *acc += d;
                Some(o)
            })
            .collect();
        let n: usize = dims.iter().sum();
        let local_eq: usize = problems.iter().map(|p| p.eq.nrows()).sum();
        let coupling_rows: usize = problems
            .iter()
            .flat_map(|p| p.couplings.iter().filter(move |(&j, _)| p.agent < j))
            .map(|(_, a)| a.nrows())
            .sum();
        let m_ineq: usize = problems.iter().map(|p| p.ineq.nrows()).sum();

        let mut quad = DMatrix::zeros(n, n);
        let mut lin = DVector::zeros(n);
        let mut eq = DMatrix::zeros(local_eq + coupling_rows, n);
        let mut eq_rhs = DVector::zeros(local_eq + coupling_rows);
        let mut ineq = DMatrix::zeros(m_ineq, n);
        let mut ineq_rhs = DVector::zeros(m_ineq);

        let (mut re, mut ri) = (0, 0);
        for (p, (&o, &d)) in problems.iter().zip(offsets.iter().zip(&dims)) {
            quad.view_mut((o, o), (d, d)).copy_from(&p.quad);
            lin.rows_mut(o, d).copy_from(&p.lin);
            let e = p.eq.nrows();
            eq.view_mut((re, o), (e, d)).copy_from(&p.eq);
            eq_rhs.rows_mut(re, e).copy_from(&p.eq_rhs);
            re += e;
            let m = p.ineq.nrows();
            ineq.view_mut((ri, o), (m, d)).copy_from(&p.ineq);
            ineq_rhs.rows_mut(ri, m).copy_from(&p.ineq_rhs);
            ri += m;
        }
        for p in problems {
            let i = p.agent;
            for (&j, a) in p.couplings.iter().filter(|(&j, _)| i < j) {
                let back = &problems[j - 1].couplings[&i];
                let r = a.nrows();
                eq.view_mut((re, offsets[i - 1]), (r, dims[i - 1])).copy_from(a);
                eq.view_mut((re, offsets[j - 1]), (r, dims[j - 1])).copy_from(back);
                re += r;
            }
        }

        Ok(Self {
            quad,
            lin,
            eq,
            eq_rhs,
            ineq,
            ineq_rhs,
            constant: 0.0,
            offsets,
            dims,
            local_eq_rows: local_eq,
        })
    }

    /// Rebuilds the stacked problem from problem dumps, in any order.
    pub fn from_dumps(dumps: &[AgentQpDump]) -> Result<Self, OracleError> {
        let mut sorted: Vec<&AgentQpDump> = dumps.iter().collect();
        sorted.sort_by_key(|d| d.agent);
        let qps = sorted.iter().map(|d| d.to_qp()).collect::<Result<Vec<_>, _>>()?;
        let mut g = Self::from_agents(&qps)?;
        g.constant = sorted.iter().map(|d| d.constant).sum();
        Ok(g)
    }

    pub fn dim(&self) -> usize {
        self.lin.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.quad * x)) + self.lin.dot(x) + self.constant
    }

    /// Per-agent slices of a global vector.
    pub fn split(&self, x: &DVector<f64>) -> Vec<DVector<f64>> {
        self.offsets
            .iter()
            .zip(&self.dims)
            .map(|(&o, &d)| x.rows(o, d).into_owned())
            .collect()
    }

    /// Concatenates per-agent vectors in agent order.
    pub fn join(&self, xs: &[DVector<f64>]) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        for ((&o, &d), x) in self.offsets.iter().zip(&self.dims).zip(xs) {
            out.rows_mut(o, d).copy_from(x);
        }
        out
    }
}

/// Reads every `*.json` problem dump in `dir`.
pub fn read_dumps(dir: &Path) -> Result<Vec<AgentQpDump>, OracleError> {
    let io = |e: std::io::Error| OracleError::Io {
        path: dir.display().to_string(),
        message: e.to_string(),
    };
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(io)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(io)?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    paths.sort();
    if paths.is_empty() {
        return Err(OracleError::EmptyDumpDir(dir.display().to_string()));
    }
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| OracleError::Io {
                path: p.display().to_string(),
                message: e.to_string(),
            })?;
            serde_json::from_str(&text).map_err(|e| OracleError::Json {
                path: p.display().to_string(),
                message: e.to_string(),
            })
        })
        .collect()
}
