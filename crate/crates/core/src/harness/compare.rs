// SPDX-License-Identifier: Apache-2.0

//! Side-by-side metrics for one workload under several setups.

use serde::Serialize;

use crate::error::{Result, SimError};
use crate::harness::config::ScenarioConfig;
use crate::harness::engine::{run, ExitStatus};
use crate::harness::metrics::MetricsReport;
use crate::types::Mode;

#[derive(Clone, Debug, Serialize)]
pub struct CompareRow {
    pub name: String,
    pub mode: Mode,
    pub status: ExitStatus,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
}

impl CompareReport {
    /// One line per metric, one column per run.
    pub fn table(&self) -> String {
        let mut out = format!("{:<22}", "metric");
        for r in &self.rows {
            out += &format!("{:>12}", r.mode.to_string());
        }
        out.push('\n');
        let fields: Vec<_> = self.rows.iter().map(|r| r.metrics.fields()).collect();
        if let Some(first) = fields.first() {
            for name in first.keys() {
                out += &format!("{name:<22}");
                for f in &fields {
                    out += &format!("{:>12}", f[name]);
                }
                out.push('\n');
            }
        }
        out += &format!("{:<22}", "status");
        for r in &self.rows {
            out += &format!("{:>12}", format!("{:?}", r.status).to_lowercase());
        }
        out.push('\n');
        out
    }
}

/// Run every config; they must share one workload.
pub fn compare(cfgs: &[ScenarioConfig]) -> Result<CompareReport> {
    if let Some(first) = cfgs.first() {
        if let Some(other) = cfgs.iter().find(|c| c.workload != first.workload) {
            return Err(SimError::config(
                "workload",
                format!("`{}` and `{}` run different workloads", first.name, other.name),
            ));
        }
    }
    let rows = cfgs
        .iter()
        .map(|c| {
            let r = run(c)?;
            Ok(CompareRow {
                name: c.name.clone(),
                mode: c.mode,
                status: r.status,
                metrics: r.metrics,
            })
        })
        .collect::<Result<_>>()?;
    Ok(CompareReport { rows })
}

/// The same scenario under each mode.
pub fn compare_modes(cfg: &ScenarioConfig, modes: &[Mode]) -> Result<CompareReport> {
    let cfgs: Vec<_> = modes.iter().map(|m| cfg.with_mode(*m)).collect();
    compare(&cfgs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::scenarios::{counter, keyboard};

    #[test]
    fn mismatched_workloads_rejected() {
        let e = compare(&[keyboard(Mode::Br, 2), counter(Mode::Dmi, 2)]).unwrap_err();
        assert!(e.to_string().contains("workload"), "{e}");
    }

    #[test]
    fn table_has_a_column_per_mode() {
        let r = compare_modes(&keyboard(Mode::Dmi, 2), &[Mode::Bn, Mode::Br, Mode::Dmi]).unwrap();
        let t = r.table();
        assert!(t.lines().next().unwrap().contains("dmi"));
        assert!(t.contains("world_switches"));
        assert_eq!(r.rows.len(), 3);
    }
}
