// SPDX-License-Identifier: Apache-2.0

//! Parameter sweeps: run the same scenario with one knob varied and
//! collect the per-run reports into one comparison CSV.

use std::path::Path;

use super::runner::{run, RunReport};
use super::{Scenario, SimError};

/// Derive a scenario variant. Knobs:
/// - "workers": total worker count, split evenly over the clusters;
/// - "split": "CxW" cluster layout, keeping total workers;
/// - "scheduler": placement algorithm name.
pub fn apply_param(base: &Scenario, param: &str, value: &str) -> Result<Scenario, SimError> {
    let mut s = base.clone();
    match param {
        "workers" => {
            let total: u32 = value
                .parse()
                .map_err(|_| SimError::Invalid(format!("bad worker count {value:?}")))?;
            if total == 0 || total % s.topology.clusters != 0 {
                return Err(SimError::Invalid(format!(
                    "{total} workers do not divide over {} clusters",
                    s.topology.clusters
                )));
            }
            s.topology.workers_per_cluster = total / s.topology.clusters;
        }
        "split" => {
            let (c, w) = value
                .split_once('x')
                .ok_or_else(|| SimError::Invalid(format!("bad split {value:?}, want CxW")))?;
            let clusters: u32 = c
                .parse()
                .map_err(|_| SimError::Invalid(format!("bad split {value:?}")))?;
            let per: u32 = w
                .parse()
                .map_err(|_| SimError::Invalid(format!("bad split {value:?}")))?;
            if clusters == 0 || per == 0 {
                return Err(SimError::Invalid(format!("bad split {value:?}")));
            }
            s.topology.clusters = clusters;
            s.topology.workers_per_cluster = per;
        }
        "scheduler" => {
            crate::scheduler::Algorithm::parse(value)
                .map_err(|e| SimError::Invalid(e.to_string()))?;
            s.scheduler = value.to_owned();
        }
        other => {
            return Err(SimError::Invalid(format!(
                "unknown sweep parameter {other:?} (workers | split | scheduler)"
            )))
        }
    }
    s.name = format!("{}-{param}-{value}", base.name);
    s.validate()?;
    Ok(s)
}

/// Run one variant per value; each gets its own output subdirectory,
/// and `sweep.csv` in `out_dir` lines them up.
pub fn sweep(
    base: &Scenario,
    param: &str,
    values: &[String],
    out_dir: &Path,
) -> Result<Vec<(String, RunReport)>, SimError> {
    std::fs::create_dir_all(out_dir)?;
    let mut out = Vec::new();
    let mut w = csv::Writer::from_path(out_dir.join("sweep.csv"))?;
    w.write_record([
        "param",
        "value",
        "scheduler",
        "workers",
        "placements_ok",
        "placements_failed",
        "median_root_calc_us",
        "median_cluster_calc_us",
        "median_total_calc_us",
        "latency_satisfied_ratio",
    ])?;
    for value in values {
        let s = apply_param(base, param, value)?;
        let report = run(&s, &out_dir.join(value.replace('/', "_")))?;
        w.write_record([
            param.to_owned(),
            value.clone(),
            s.scheduler.clone(),
            s.total_workers().to_string(),
            report.placements_ok.to_string(),
            report.placements_failed.to_string(),
            format!("{:.3}", report.median_root_calc_us),
            format!("{:.3}", report.median_cluster_calc_us),
            format!("{:.3}", report.median_total_calc_us),
            format!("{:.4}", report.satisfied_ratio()),
        ])?;
        out.push((value.clone(), report));
    }
    w.flush()?;
    Ok(out)
}
