// SPDX-License-Identifier: Apache-2.0

//! Shared hardware and firmware state plus world-switch bookkeeping. The
//! RMM, hypervisor and guest act on a `Platform` they do not own.

use crate::devices::{DeviceBank, PlatformDeviceTree};
use crate::error::Result;
use crate::gic::{Gic, Group, InterruptConfig, Trigger, SGI_NOTIFY, SGI_NOTIFY_PRIORITY};
use crate::harness::trace::{Call, Trace, TraceEvent, ViolationKind};
use crate::mem::{GptSelect, MemoryIsolation, World};
use crate::monitor::Monitor;
use crate::types::{GranuleRange, InterruptId, Mode, VmId};

/// Physical layout the platform boots with.
#[derive(Clone, Debug)]
pub struct Layout {
    pub granules: u64,
    pub firmware: GranuleRange,
    pub gic: GranuleRange,
    pub list_registers: usize,
    pub log_capacity: usize,
}

#[derive(Clone, Debug)]
pub struct Platform {
    pub mode: Mode,
    pub mem: MemoryIsolation,
    pub gic: Gic,
    pub tree: PlatformDeviceTree,
    pub devices: DeviceBank,
    pub monitor: Monitor,
    pub trace: Trace,
    cpu: World,
}

impl Platform {
    /// Boot: firmware is Root; in the isolating mode the GIC config space is
    /// Root too. Every device line is registered Group1 and disabled.
    pub fn boot(mode: Mode, layout: &Layout, tree: PlatformDeviceTree) -> Result<Self> {
        let mut trace = Trace::default();
        let mut mem = MemoryIsolation::new(layout.granules);
        mem.gpt_set_range(GptSelect::Both, layout.firmware, World::Root, &mut trace)?;
        if mode.isolates() {
            mem.gpt_set_range(GptSelect::Both, layout.gic, World::Root, &mut trace)?;
        }
        let mut gic = Gic::new(layout.gic, layout.list_registers);
        let mut sgi = InterruptConfig::new(SGI_NOTIFY, Trigger::Edge, SGI_NOTIFY_PRIORITY);
        sgi.enabled = true;
        gic.register(sgi)?;
        for d in tree.devices() {
            for l in &d.interrupts {
                gic.register(InterruptConfig::new(l.id, l.trigger, 0xff))?;
            }
        }
        let devices = DeviceBank::new(&tree);
        Ok(Platform {
            mode,
            mem,
            gic,
            tree,
            devices,
            monitor: Monitor::new(layout.log_capacity),
            trace,
            cpu: World::Normal,
        })
    }

    pub fn cpu_world(&self) -> World {
        self.cpu
    }

    /// Move the CPU to `to`. Normal and Realm never switch directly; the
    /// path goes through Root.
    pub fn switch_to(&mut self, to: World) {
        let from = self.cpu;
        if from == to {
            return;
        }
        if from != World::Root && to != World::Root {
            self.hop(from, World::Root);
            self.hop(World::Root, to);
        } else {
            self.hop(from, to);
        }
        self.cpu = to;
    }

    fn hop(&mut self, from: World, to: World) {
        self.trace.emit(TraceEvent::WorldSwitch { from, to });
    }

    pub fn record_call(&mut self, call: Call, ok: bool) {
        self.trace.emit(TraceEvent::Call { call, ok });
    }

    pub fn violation(&mut self, check: ViolationKind, vm: Option<VmId>, detail: impl Into<String>) {
        self.trace.emit(TraceEvent::Violation {
            check,
            vm,
            detail: detail.into(),
        });
    }

    pub fn warn(&mut self, message: impl Into<String>) {
        self.trace.emit(TraceEvent::Warning {
            message: message.into(),
        });
    }

    /// Baseline interrupt setup done by the host directly in the GIC.
    pub fn host_enable(&mut self, id: InterruptId, priority: u8) -> Result<()> {
        self.gic.set_group(id, Group::Group1)?;
        self.gic.set_priority(id, priority)?;
        self.gic.set_enabled(id, true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::metrics::{CostTable, MetricsReport};

    fn platform(mode: Mode) -> Platform {
        let layout = Layout {
            granules: 128,
            firmware: GranuleRange::new(0, 16),
            gic: GranuleRange::new(16, 16),
            list_registers: 4,
            log_capacity: 8,
        };
        Platform::boot(mode, &layout, PlatformDeviceTree::new(vec![]).unwrap()).unwrap()
    }

    #[test]
    fn normal_to_realm_goes_through_root() {
        let mut p = platform(Mode::Dmi);
        let before = p.trace.len();
        p.switch_to(World::Realm);
        p.switch_to(World::Normal);
        let m = MetricsReport::from_records(&p.trace.records()[before..], &CostTable::default());
        assert_eq!(m.world_switches.total(), 4);
        assert_eq!(m.world_switches.root, 2);
    }

    #[test]
    fn gic_space_root_only_when_isolating() {
        use crate::mem::GptKind;
        let p = platform(Mode::Dmi);
        assert_eq!(p.mem.gpt(GptKind::Core).get(20).unwrap(), World::Root);
        let b = platform(Mode::Br);
        assert_eq!(b.mem.gpt(GptKind::Core).get(20).unwrap(), World::Normal);
    }
}
