//! Relative error metrics and their aggregation across runs and test
//! functions: per-function rel. L1/L2/L∞, median with 90/10 percentile
//! bands, and CSV emission for the summary tables.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub run_id: usize,
    pub test_fn_id: usize,
    pub rel_l1: f64,
    pub rel_l2: f64,
    pub rel_linf: f64,
}

/// Weighted discrete relative errors. L1 and L2 use the grid quadrature
/// weights; L∞ is the plain maximum over nodes.
pub fn rel_errors(f_hat: &[f64], f_true: &[f64], weights: &[f64]) -> Result<(f64, f64, f64)> {
    if f_hat.is_empty() || f_hat.len() != f_true.len() || f_hat.len() != weights.len() {
        return Err(Error::EmptyInput);
    }
    let (mut num1, mut den1) = (0.0f64, 0.0f64);
    let (mut num2, mut den2) = (0.0f64, 0.0f64);
    let (mut numi, mut deni) = (0.0f64, 0.0f64);
    for i in 0..f_hat.len() {
        let diff = (f_hat[i] - f_true[i]).abs();
        let tr = f_true[i].abs();
        let w = weights[i];
        num1 += w * diff;
        den1 += w * tr;
        num2 += w * diff * diff;
        den2 += w * tr * tr;
        numi = numi.max(diff);
        deni = deni.max(tr);
    }
    if den1 <= 0.0 || den2 <= 0.0 || deni <= 0.0 {
        return Err(Error::ZeroReference);
    }
    Ok((num1 / den1, (num2 / den2).sqrt(), numi / deni))
}

/// Percentile by linear interpolation on sorted values: rank p(n−1)/100
/// split into integer and fractional parts.
pub fn percentile(sorted: &[f64], p: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::EmptyInput);
    }
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Average each run's rows first, then take percentiles over runs.
    PerRun,
    /// Percentiles over all (run, test function) rows.
    PerSample,
}

impl Protocol {
    pub fn label(&self) -> &'static str {
        match self {
            Protocol::PerRun => "per_run",
            Protocol::PerSample => "per_sample",
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct MetricSummary {
    pub median: f64,
    pub p10: f64,
    pub p90: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AggregateReport {
    pub protocol: Protocol,
    pub rel_l1: MetricSummary,
    pub rel_l2: MetricSummary,
    pub rel_linf: MetricSummary,
}

fn summarize(mut values: Vec<f64>) -> Result<MetricSummary> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    values.sort_by(|a, b| a.total_cmp(b));
    Ok(MetricSummary {
        median: percentile(&values, 50.0)?,
        p10: percentile(&values, 10.0)?,
        p90: percentile(&values, 90.0)?,
    })
}

pub fn aggregate(records: &[ErrorRecord], protocol: Protocol) -> Result<AggregateReport> {
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    let rows: Vec<[f64; 3]> = match protocol {
        Protocol::PerSample => records
            .iter()
            .map(|r| [r.rel_l1, r.rel_l2, r.rel_linf])
            .collect(),
        Protocol::PerRun => {
            let mut run_ids: Vec<usize> = records.iter().map(|r| r.run_id).collect();
            run_ids.sort_unstable();
            run_ids.dedup();
            run_ids
                .into_iter()
                .map(|run| {
                    let members: Vec<&ErrorRecord> =
                        records.iter().filter(|r| r.run_id == run).collect();
                    let n = members.len() as f64;
                    [
                        members.iter().map(|r| r.rel_l1).sum::<f64>() / n,
                        members.iter().map(|r| r.rel_l2).sum::<f64>() / n,
                        members.iter().map(|r| r.rel_linf).sum::<f64>() / n,
                    ]
                })
                .collect()
        }
    };
    Ok(AggregateReport {
        protocol,
        rel_l1: summarize(rows.iter().map(|r| r[0]).collect())?,
        rel_l2: summarize(rows.iter().map(|r| r[1]).collect())?,
        rel_linf: summarize(rows.iter().map(|r| r[2]).collect())?,
    })
}

/// CSV rows mirroring the summary tables; one row per (protocol, metric).
pub fn report_csv(example_id: &str, reports: &[AggregateReport]) -> String {
    let mut out = String::from("example_id,protocol,metric,median,p10,p90\n");
    for rep in reports {
        for (metric, s) in [
            ("rel_l1", rep.rel_l1),
            ("rel_l2", rep.rel_l2),
            ("rel_linf", rep.rel_linf),
        ] {
            out.push_str(&format!(
                "{},{},{},{:.6e},{:.6e},{:.6e}\n",
                example_id,
                rep.protocol.label(),
                metric,
                s.median,
                s.p10,
                s.p90
            ));
        }
    }
    out
}

// ───────────────────────────── tests ─────────────────────────────
