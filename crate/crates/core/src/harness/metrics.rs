// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::trace::{Iface, TraceEvent, TraceRecord};
use crate::mem::World;

/// Cost units per event class. Only ratios between runs are meaningful.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostTable {
    pub world_switch: u64,
    pub call: u64,
    pub mmio: u64,
    pub gic: u64,
    pub other: u64,
}

impl Default for CostTable {
    fn default() -> Self {
        CostTable {
            world_switch: 100,
            call: 50,
            mmio: 5,
            gic: 5,
            other: 1,
        }
    }
}

impl CostTable {
    pub fn cost(&self, ev: &TraceEvent) -> u64 {
        match ev {
            TraceEvent::WorldSwitch { .. } => self.world_switch,
            TraceEvent::Call { .. } => self.call,
            TraceEvent::Mmio { .. } => self.mmio,
            TraceEvent::Assert { .. }
            | TraceEvent::Deassert { .. }
            | TraceEvent::Deliver { .. }
            | TraceEvent::Ack { .. }
            | TraceEvent::VgicProgram { .. }
            | TraceEvent::VgicFire { .. } => self.gic,
            _ => self.other,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldSwitches {
    pub root: u64,
    pub realm: u64,
    pub normal: u64,
}

impl WorldSwitches {
    pub fn total(&self) -> u64 {
        self.root + self.realm + self.normal
    }
}

/// Per-run event counts. `smc` counts every call that traps to the monitor,
/// which includes RMIs; traps of Group0 interrupts are not calls.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub irq_injected: u64,
    pub rmi: u64,
    pub rsi: u64,
    pub smc: u64,
    pub world_switches: WorldSwitches,
    pub violations: u64,
    pub cost_total: u64,
    pub monitor_traps: u64,
    pub deliveries: u64,
    pub accepted_injections: u64,
    pub rejected_injections: u64,
    pub eois: u64,
    pub dma_transfers: u64,
    pub gpf: u64,
    pub faults: u64,
    pub spurious: u64,
}

impl MetricsReport {
    pub fn from_records(records: &[TraceRecord], costs: &CostTable) -> Self {
        let mut m = MetricsReport::default();
        for r in records {
            let ev = &r.event;
            m.cost_total += costs.cost(ev);
            match ev {
                TraceEvent::VgicFire { .. } => m.irq_injected += 1,
                TraceEvent::Call { call, .. } => match call.iface() {
                    Iface::Rmi => {
                        m.rmi += 1;
                        m.smc += 1;
                    }
                    Iface::Rsi => m.rsi += 1,
                    Iface::Smc => m.smc += 1,
                },
                TraceEvent::WorldSwitch { from, .. } => match from {
                    World::Root => m.world_switches.root += 1,
                    World::Realm => m.world_switches.realm += 1,
                    World::Normal | World::Secure => m.world_switches.normal += 1,
                },
                TraceEvent::Violation { .. } => m.violations += 1,
                TraceEvent::Trap { .. } => m.monitor_traps += 1,
                TraceEvent::Deliver { .. } => m.deliveries += 1,
                TraceEvent::Inject {
                    accepted: true, ids, ..
                } if !ids.is_empty() => m.accepted_injections += 1,
                TraceEvent::Inject { accepted: false, .. } => m.rejected_injections += 1,
                TraceEvent::Eoi { .. } => m.eois += 1,
                TraceEvent::Dma { ok: true, .. } => m.dma_transfers += 1,
                TraceEvent::Gpf { .. } => m.gpf += 1,
                TraceEvent::Fault { .. } => m.faults += 1,
                TraceEvent::Spurious { .. } => m.spurious += 1,
                _ => {}
            }
        }
        m
    }

    /// Named numeric view, for delta reports.
    pub fn fields(&self) -> BTreeMap<&'static str, u64> {
        BTreeMap::from([
            ("irq_injected", self.irq_injected),
            ("rmi", self.rmi),
            ("rsi", self.rsi),
            ("smc", self.smc),
            ("world_switches.root", self.world_switches.root),
            ("world_switches.realm", self.world_switches.realm),
            ("world_switches.normal", self.world_switches.normal),
            ("world_switches.total", self.world_switches.total()),
            ("violations", self.violations),
            ("cost_total", self.cost_total),
            ("monitor_traps", self.monitor_traps),
            ("deliveries", self.deliveries),
            ("accepted_injections", self.accepted_injections),
            ("rejected_injections", self.rejected_injections),
            ("eois", self.eois),
            ("dma_transfers", self.dma_transfers),
            ("gpf", self.gpf),
            ("faults", self.faults),
            ("spurious", self.spurious),
        ])
    }
}
