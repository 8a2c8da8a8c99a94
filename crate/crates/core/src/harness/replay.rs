// SPDX-License-Identifier: Apache-2.0

//! Re-run a config and byte-compare its trace with a recorded one.

use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::harness::config::ScenarioConfig;
use crate::harness::engine::run;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ReplayReport {
    pub identical: bool,
    /// Step of the first differing line.
    pub diverged_at: Option<u64>,
    pub recorded_len: usize,
    pub replayed_len: usize,
    pub recorded_line: Option<String>,
    pub replayed_line: Option<String>,
}

pub fn diff_lines(recorded: &[String], replayed: &[String]) -> ReplayReport {
    let at = recorded
        .iter()
        .zip(replayed)
        .position(|(a, b)| a != b)
        .or_else(|| (recorded.len() != replayed.len()).then(|| recorded.len().min(replayed.len())));
    ReplayReport {
        identical: at.is_none(),
        diverged_at: at.map(|i| i as u64),
        recorded_len: recorded.len(),
        replayed_len: replayed.len(),
        recorded_line: at.and_then(|i| recorded.get(i).cloned()),
        replayed_line: at.and_then(|i| replayed.get(i).cloned()),
    }
}

pub fn replay(cfg: &ScenarioConfig, recorded: &[String]) -> Result<ReplayReport> {
    let lines = run(cfg)?.trace.lines();
    Ok(diff_lines(recorded, &lines))
}

pub fn replay_file(cfg: &ScenarioConfig, trace: &Path) -> Result<ReplayReport> {
    let text = std::fs::read_to_string(trace)?;
    let recorded: Vec<String> = text.lines().filter(|l| !l.is_empty()).map(str::to_owned).collect();
    replay(cfg, &recorded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::scenarios::keyboard;
    use crate::types::Mode;

    #[test]
    fn same_config_replays_identically() {
        let cfg = keyboard(Mode::Dmi, 5);
        let lines = run(&cfg).unwrap().trace.lines();
        assert!(replay(&cfg, &lines).unwrap().identical);
    }

    #[test]
    fn divergence_is_located() {
        let a: Vec<String> = ["x", "y", "z"].map(String::from).to_vec();
        let mut b = a.clone();
        b[1] = "q".into();
        assert_eq!(diff_lines(&a, &b).diverged_at, Some(1));
        assert_eq!(diff_lines(&a, &a[..2]).diverged_at, Some(2));
        assert!(diff_lines(&a, &a).identical);
    }

    #[test]
    fn different_seed_diverges() {
        let cfg = keyboard(Mode::Dmi, 5);
        let lines = run(&cfg).unwrap().trace.lines();
        let mut other = cfg.clone();
        other.seed += 1;
        assert!(!replay(&other, &lines).unwrap().identical);
    }
}
