// SPDX-License-Identifier: Apache-2.0

//! The shipped scenario files load and run clean in every mode.

use std::path::Path;

use realm_devsim::harness::config::ScenarioConfig;
use realm_devsim::harness::engine::{run, ExitStatus};
use realm_devsim::types::Mode;

#[test]
fn shipped_scenarios_run_clean() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_none_or(|e| e != "json") {
            continue;
        }
        let cfg = ScenarioConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        for mode in [Mode::Bn, Mode::Br, Mode::Dmi] {
            let r = run(&cfg.with_mode(mode)).unwrap();
            assert_eq!(
                r.status,
                ExitStatus::Clean,
                "{} in {mode}: {:?}",
                path.display(),
                r.divergences
            );
        }
        seen += 1;
    }
    assert_eq!(seen, 8);
}
