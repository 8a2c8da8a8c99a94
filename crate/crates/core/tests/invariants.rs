// SPDX-License-Identifier: Apache-2.0

//! Property tests over whole runs and over raw call sequences.

mod common;

use proptest::prelude::*;

use common::{rig, VM};
use realm_devsim::gic::{Gic, InterruptConfig, Trigger};
use realm_devsim::harness::engine::{asserted_ids, fired_ids, run, ExitStatus};
use realm_devsim::harness::scenarios;
use realm_devsim::harness::trace::{Trace, TraceEvent};
use realm_devsim::hypervisor::HypStrategy;
use realm_devsim::rmm::{check_injection, PendingQueue, PendingRecord, Verdict};
use realm_devsim::types::{Granule, GranuleRange, InterruptId, Mode};

fn any_mode() -> impl Strategy<Value = Mode> {
    prop_oneof![Just(Mode::Bn), Just(Mode::Br), Just(Mode::Dmi)]
}

fn queue(records: &[(u32, u8)]) -> PendingQueue {
    PendingQueue::from_records(records.iter().enumerate().map(|(seq, (id, p))| PendingRecord {
        irq: InterruptId(*id),
        priority: *p,
        seq: seq as u64,
    }))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Benign runs keep every engine invariant and match ground truth.
    #[test]
    fn benign_runs_are_clean(mode in any_mode(), seed in any::<u64>(), keys in 1usize..40, backlog in 0usize..4) {
        let mut cfg = scenarios::typing("typing", mode, keys, backlog.min(keys), 3);
        cfg.seed = seed;
        let r = run(&cfg).unwrap();
        prop_assert_eq!(r.status, ExitStatus::Clean);
        prop_assert!(r.divergences.is_empty(), "{:?}", r.divergences);
        prop_assert_eq!(r.observables[&VM].keys_received.len(), keys);
    }

    /// Under isolation every fired id had a device assertion behind it and
    /// guest observables never move, whatever the host does.
    #[test]
    fn isolation_holds_for_every_strategy(seed in any::<u64>(), pick in 0usize..8) {
        let mut cfg = scenarios::attack_suite(Mode::Dmi).swap_remove(pick);
        cfg.seed = seed;
        let r = run(&cfg).unwrap();
        let benign = run(&cfg.with_strategy(HypStrategy::Benign)).unwrap();
        prop_assert_eq!(&r.observables, &benign.observables);
        let asserted = asserted_ids(&r.trace);
        prop_assert!(fired_ids(&r.trace, VM).iter().all(|id| asserted.contains(id)));
    }

    /// The most urgent k distinct ids pass in any order; k+1 ids never fit
    /// a batch of size k.
    #[test]
    fn benign_batches_always_pass(records in prop::collection::vec((0u32..6, 1u8..4), 0..12), n in 1usize..5, rot in 0usize..4) {
        let q = queue(&records);
        let mut top = q.top_distinct(n);
        if !top.is_empty() {
            let r = rot % top.len();
            top.rotate_left(r);
        }
        prop_assert_eq!(check_injection(&top, &q, n), Verdict::Accept);
        let mut over = q.top_distinct(n + 1);
        over.truncate(n + 1);
        if over.len() == n + 1 {
            prop_assert!(check_injection(&over, &q, n) != Verdict::Accept);
        }
    }

    /// Edge asserts before delivery coalesce into one delivery.
    #[test]
    fn edge_asserts_coalesce(asserts in 1usize..10) {
        let id = InterruptId(40);
        let mut gic = Gic::new(GranuleRange::new(16, 16), 4);
        let mut cfg = InterruptConfig::new(id, Trigger::Edge, 0x40);
        cfg.enabled = true;
        gic.register(cfg).unwrap();
        let mut trace = Trace::default();
        for _ in 0..asserts {
            gic.assert_line(id, None, &mut trace).unwrap();
        }
        let mut delivered = 0;
        while let Some(next) = gic.next_deliverable() {
            gic.deliver(next, &mut trace).unwrap();
            gic.acknowledge(next, &mut trace).unwrap();
            delivered += 1;
        }
        prop_assert_eq!(delivered, 1);
    }

    /// Random attach, detach, map and unmap sequences keep the two tables,
    /// the device mirrors and realm exclusivity consistent.
    #[test]
    fn memory_invariants_under_call_sequences(ops in prop::collection::vec(0u8..6, 1..80)) {
        let mut r = rig();
        let mut attached = [false, false];
        let mut extra: Vec<(u64, Granule)> = Vec::new();
        let mut next = 0u64;
        for op in ops {
            match op {
                0 | 1 => {
                    let i = op as usize;
                    if attached[i] { r.detach(i).unwrap() } else { r.attach(i).unwrap() }
                    attached[i] = !attached[i];
                }
                2 | 3 => {
                    let (gpa, pa) = (0x200 + next, Granule(3000 + next));
                    next += 1;
                    r.rmm.rmi_granule_delegate(&mut r.p, pa).unwrap().unwrap();
                    r.rmm.rmi_data_create(&mut r.p, VM, gpa, pa).unwrap().unwrap();
                    extra.push((gpa, pa));
                }
                4 => {
                    if let Some((gpa, pa)) = extra.pop() {
                        r.rmm.rmi_data_destroy(&mut r.p, VM, gpa).unwrap().unwrap();
                        r.rmm.rmi_granule_undelegate(&mut r.p, pa).unwrap().unwrap();
                    }
                }
                _ => {
                    // Mapping a granule twice is refused and flagged.
                    if let Some((_, pa)) = extra.last().copied() {
                        prop_assert!(r.rmm.rmi_data_create(&mut r.p, VM, 0x1000, pa).unwrap().is_err());
                    }
                }
            }
            r.invariants("step").map_err(TestCaseError::fail)?;
            prop_assert_eq!(r.p.mem.split_view_detections(), 0);
        }
    }
}

/// The engine fails the run if the logged-minus-injected residual goes
/// negative, so finishing is the assertion; the replay itself is refused.
#[test]
fn replay_is_refused_and_residual_holds() {
    let cfg = scenarios::counter(Mode::Dmi, 6).with_strategy(HypStrategy::ReplayConsumed);
    let r = run(&cfg).unwrap();
    assert_eq!(r.status, ExitStatus::ViolationsDetected);
    let rejected = r
        .trace
        .count(|e| matches!(e, TraceEvent::Inject { accepted: false, .. }));
    assert_eq!(rejected, 1);
}
