//! Plot-ready CSV output of a closed-loop run.

use std::fs;
use std::path::{Path, PathBuf};

use lexinet_core::{Network, TrafficState};
use thiserror::Error;

use crate::closed_loop::RunLog;

/// Occupancy subsampling interval in seconds.
pub const SUBSAMPLE_S: f64 = 10.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("run log is empty")]
    EmptyLog,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

/// Formats `x` with 9 significant digits, `%g` style.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// One 10-second occupancy sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccupancySample {
    /// Seconds since the start of the run.
    pub time_s: f64,
    /// Links with n/n̄ > 0.6.
    pub above_06: usize,
    /// Links with n/n̄ > 0.8.
    pub above_08: usize,
}

fn occupancy_counts(net: &Network, n: impl Fn(u32) -> f64) -> (usize, usize) {
    net.links().values().fold((0, 0), |(a, b), l| {
        let r = n(l.id) / l.capacity;
        (a + usize::from(r > 0.6), b + usize::from(r > 0.8))
    })
}

/// Occupancy counts every 10 s, interpolating linearly between control steps.
pub fn occupancy_samples(net: &Network, log: &RunLog) -> Vec<OccupancySample> {
    let per_step = ((log.cycle / SUBSAMPLE_S).floor() as usize).max(1);
    let states = log.states();
    let mut out = Vec::with_capacity(states.len() * per_step);
    for (t, pair) in states.windows(2).enumerate() {
        let (a, b): (&TrafficState, &TrafficState) = (pair[0], pair[1]);
        for s in 0..per_step {
            let w = s as f64 / per_step as f64;
            let (above_06, above_08) = occupancy_counts(net, |z| (1.0 - w) * a.n(z) + w * b.n(z));
            out.push(OccupancySample {
                time_s: t as f64 * log.cycle + s as f64 * log.cycle / per_step as f64,
                above_06,
                above_08,
            });
        }
    }
    let last = states.last().expect("log has a final state");
    let (above_06, above_08) = occupancy_counts(net, |z| last.n(z));
    out.push(OccupancySample {
        time_s: log.steps.len() as f64 * log.cycle,
        above_06,
        above_08,
    });
    out
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), MetricsError> {
    let csv_err = |source| MetricsError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `steps.csv`, `occupancy.csv` and one `convergence_<t>.csv` per
/// step whose traces were recorded. Returns the files written.
pub fn emit_metrics(net: &Network, log: &RunLog, outdir: &Path) -> Result<Vec<PathBuf>, MetricsError> {
    if log.steps.is_empty() {
        return Err(MetricsError::EmptyLog);
    }
    fs::create_dir_all(outdir).map_err(|source| MetricsError::Io {
        path: outdir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::new();

    let path = outdir.join("steps.csv");
    write_csv(
        &path,
        &["t", "phi1", "phi2", "phi3", "served", "queue_total", "iters_pc", "iters_tsc", "residual"],
        log.steps.iter().map(|s| {
            vec![
                s.t.to_string(),
                fmt_sig(s.indexes.phi1),
                fmt_sig(s.indexes.phi2),
                fmt_sig(s.indexes.phi3),
                fmt_sig(s.cumulative_served),
                fmt_sig(s.queue_total),
                s.iters_pc.to_string(),
                s.iters_tsc.to_string(),
                fmt_sig(s.residual),
            ]
        }),
    )?;
    written.push(path);

    let path = outdir.join("occupancy.csv");
    write_csv(
        &path,
        &["t10", "count_gt_0.6", "count_gt_0.8"],
        occupancy_samples(net, log)
            .into_iter()
            .map(|o| vec![fmt_sig(o.time_s), o.above_06.to_string(), o.above_08.to_string()]),
    )?;
    written.push(path);

    for s in log.steps.iter().filter(|s| !s.convergence.is_empty()) {
        let path = outdir.join(format!("convergence_{}.csv", s.t));
        write_csv(
            &path,
            &["stage", "iteration", "residual", "step", "cost"],
            s.convergence.iter().flat_map(|(stage, report)| {
                report.trace.iter().map(move |r| {
                    vec![
                        stage.clone(),
                        r.iteration.to_string(),
                        fmt_sig(r.residual),
                        fmt_sig(r.step),
                        fmt_sig(r.cost),
                    ]
                })
            }),
        )?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::fmt_sig;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(fmt_sig(0.0), "0");
        assert_eq!(fmt_sig(-0.0), "0");
        assert_eq!(fmt_sig(1.0), "1");
        assert_eq!(fmt_sig(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_sig(123456.789012), "123456.789");
        assert_eq!(fmt_sig(-2.5), "-2.5");
        assert_eq!(fmt_sig(1.0e-7), "1e-7");
        assert_eq!(fmt_sig(6.02214076e23), "6.02214076e23");
        assert_eq!(fmt_sig(999999999.7), "1e9");
        assert_eq!(fmt_sig(f64::NAN), "NaN");
    }
}
