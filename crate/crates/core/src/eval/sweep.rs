use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, Result};
use crate::pipeline::{load_dataset, run_from_stage1, stage1_pretrain, RunConfig, RunReport, SweepConfig};

use super::export::fmt_sig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub alpha: f64,
    pub beta: f64,
    pub k: usize,
    pub m: usize,
}

impl SweepPoint {
    fn same(&self, other: &Self) -> bool {
        self.alpha.to_bits() == other.alpha.to_bits()
            && self.beta.to_bits() == other.beta.to_bits()
            && self.k == other.k
            && self.m == other.m
    }

    fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        c.quantizer.alpha = self.alpha;
        c.quantizer.beta = self.beta;
        c.quantizer.k = self.k;
        c.quantizer.m = self.m;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointStatus {
    /// Index into [`SweepOutcome::reports`]; duplicate points share one report.
    Ran { report: usize },
    Skipped { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub point: SweepPoint,
    pub status: PointStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    /// One entry per grid point, in grid order.
    pub entries: Vec<SweepEntry>,
    pub reports: Vec<RunReport>,
}

/// Cartesian product of the grid, alpha varying slowest.
pub fn sweep_points(grid: &SweepConfig) -> Vec<SweepPoint> {
    let mut out = Vec::new();
    for &alpha in &grid.alpha {
        for &beta in &grid.beta {
            for &k in &grid.k {
                for &m in &grid.m {
                    out.push(SweepPoint { alpha, beta, k, m });
                }
            }
        }
    }
    out
}

/// Runs `base` at every distinct valid grid point on one shared stage-1 model.
pub fn sweep(base: &RunConfig, grid: &SweepConfig) -> Result<SweepOutcome> {
    let points = sweep_points(grid);
    let mut unique: Vec<SweepPoint> = Vec::new();
    let mut statuses = Vec::with_capacity(points.len());
    for p in &points {
        let status = match p.apply(base).validate() {
            Err(ConfigError::Invalid(reason)) => PointStatus::Skipped { reason },
            Err(e) => return Err(e.into()),
            Ok(()) => {
                let report = match unique.iter().position(|u| u.same(p)) {
                    Some(i) => i,
                    None => {
                        unique.push(*p);
                        unique.len() - 1
                    }
                };
                PointStatus::Ran { report }
            }
        };
        statuses.push(status);
    }

    let reports = if unique.is_empty() {
        Vec::new()
    } else {
        let data = load_dataset(base)?;
        let stage1 = stage1_pretrain(base, &data)?;
        unique
            .par_iter()
            .map(|p| {
                log::info!("sweep point alpha={} beta={} K={} M={}", p.alpha, p.beta, p.k, p.m);
                run_from_stage1(&p.apply(base), &data, &stage1).map(|a| a.report)
            })
            .collect::<Result<Vec<_>>>()?
    };
    let entries = points
        .into_iter()
        .zip(statuses)
        .map(|(point, status)| SweepEntry { point, status })
        .collect();
    Ok(SweepOutcome { entries, reports })
}

pub const SWEEP_HEADER: &str =
    "alpha,beta,k,m,status,test_auc,test_logloss,compression_ratio,weighted_code_entropy,reason";

impl SweepOutcome {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{SWEEP_HEADER}\n");
        for e in &self.entries {
            let p = &e.point;
            let head = format!("{},{},{},{}", fmt_sig(p.alpha), fmt_sig(p.beta), p.k, p.m);
            let tail = match &e.status {
                PointStatus::Ran { report } => {
                    let r = &self.reports[*report];
                    format!(
                        "ran,{},{},{},{},",
                        fmt_sig(r.stage2.test.auc),
                        fmt_sig(r.stage2.test.logloss),
                        fmt_sig(r.memory.compression_ratio),
                        r.quantizer.as_ref().map_or(String::new(), |q| fmt_sig(q.weighted_code_entropy))
                    )
                }
                PointStatus::Skipped { reason } => format!("skipped,,,,,{}", reason.replace(',', ";")),
            };
            out.push_str(&format!("{head},{tail}\n"));
        }
        out
    }
}
