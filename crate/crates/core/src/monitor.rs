// SPDX-License-Identifier: Apache-2.0

//! Root-world firmware: protected interrupt registry, the authenticated
//! per-VM interrupt log, checked GIC configuration and physical acks.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Result, SimError};
use crate::gic::{Group, Trigger, SGI_NOTIFY};
use crate::harness::trace::{Call, LogView, TraceEvent, ViolationKind};
use crate::mem::{GptSelect, World};
use crate::platform::Platform;
use crate::types::{InterruptId, VmId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Caller {
    Hypervisor,
    Rmm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtectedIrq {
    pub owner: VmId,
    pub priority: u8,
    pub trigger: Trigger,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    pub seq: u64,
    pub irq: InterruptId,
    pub priority: u8,
    pub arrival: u64,
}

/// Two views of one log: the realm-shared ring the RMM drains and the
/// notification queue the hypervisor reads. Both receive every record.
#[derive(Clone, Debug, Default)]
pub struct InterruptLog {
    realm: VecDeque<LogRecord>,
    notify: VecDeque<LogRecord>,
    appended: u64,
}

impl InterruptLog {
    pub fn realm_view(&self) -> impl Iterator<Item = &LogRecord> {
        self.realm.iter()
    }

    pub fn notify_view(&self) -> impl Iterator<Item = &LogRecord> {
        self.notify.iter()
    }

    pub fn appended(&self) -> u64 {
        self.appended
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum MonitorError {
    #[error("{0} is already protected for another VM")]
    AlreadyProtected(InterruptId),
    #[error("caller may not issue this call")]
    WrongCaller,
    #[error("{0:#x} is outside the GIC config space")]
    NotGicAddress(u64),
    #[error("{0} is protected")]
    Protected(InterruptId),
    #[error("{0} has no virtual EOI to complete")]
    NotAwaitingAck(InterruptId),
    #[error("unknown interrupt {0}")]
    Unknown(InterruptId),
}

#[derive(Clone, Debug)]
pub struct Monitor {
    protected: BTreeMap<InterruptId, ProtectedIrq>,
    logs: BTreeMap<VmId, InterruptLog>,
    /// Level ids trapped and not yet physically acked.
    awaiting_eoi: BTreeSet<InterruptId>,
    capacity: usize,
    next_seq: u64,
    /// When false, Level ids are acked at trap time (the storm setting).
    pub level_ack_protocol: bool,
}

impl Monitor {
    pub fn new(capacity: usize) -> Self {
        Monitor {
            protected: BTreeMap::new(),
            logs: BTreeMap::new(),
            awaiting_eoi: BTreeSet::new(),
            capacity,
            next_seq: 0,
            level_ack_protocol: true,
        }
    }

    pub fn protected(&self, id: InterruptId) -> Option<&ProtectedIrq> {
        self.protected.get(&id)
    }

    pub fn protected_ids(&self) -> impl Iterator<Item = (&InterruptId, &ProtectedIrq)> {
        self.protected.iter()
    }

    pub fn log(&self, vm: VmId) -> Option<&InterruptLog> {
        self.logs.get(&vm)
    }

    pub fn awaiting_eoi(&self, id: InterruptId) -> bool {
        self.awaiting_eoi.contains(&id)
    }

    /// RMM side: take every realm-view record.
    pub fn drain_realm(&mut self, vm: VmId) -> Vec<LogRecord> {
        self.logs
            .get_mut(&vm)
            .map(|l| l.realm.drain(..).collect())
            .unwrap_or_default()
    }

    /// Hypervisor side: take every notification record.
    pub fn drain_notify(&mut self, vm: VmId) -> Vec<LogRecord> {
        self.logs
            .get_mut(&vm)
            .map(|l| l.notify.drain(..).collect())
            .unwrap_or_default()
    }

    /// VMs with unread notifications.
    pub fn notified_vms(&self) -> Vec<VmId> {
        self.logs
            .iter()
            .filter(|(_, l)| !l.notify.is_empty())
            .map(|(vm, _)| *vm)
            .collect()
    }
}

impl Platform {
    fn smc_enter(&mut self) -> World {
        let prev = self.cpu_world();
        self.switch_to(World::Root);
        prev
    }

    fn smc_leave(&mut self, prev: World, call: Call, ok: bool) {
        self.record_call(call, ok);
        self.switch_to(prev);
    }

    /// Register interrupts as protected for `vm`: Group0, VM priority,
    /// enabled. Only the RMM may call this.
    pub fn smc_prot_int(
        &mut self,
        caller: Caller,
        vm: VmId,
        irqs: &[(InterruptId, u8, Trigger)],
    ) -> Result<Result<(), MonitorError>> {
        let prev = self.smc_enter();
        let res = self.prot_int(caller, vm, irqs);
        let ok = matches!(res, Ok(Ok(())));
        self.smc_leave(prev, Call::SmcProtInt, ok);
        res
    }

    fn prot_int(
        &mut self,
        caller: Caller,
        vm: VmId,
        irqs: &[(InterruptId, u8, Trigger)],
    ) -> Result<Result<(), MonitorError>> {
        if caller != Caller::Rmm {
            return Ok(Err(MonitorError::WrongCaller));
        }
        for (id, _, _) in irqs {
            self.gic.config(*id)?;
            if let Some(p) = self.monitor.protected.get(id) {
                if p.owner != vm {
                    return Ok(Err(MonitorError::AlreadyProtected(*id)));
                }
            }
        }
        for &(id, priority, trigger) in irqs {
            self.monitor.protected.insert(
                id,
                ProtectedIrq {
                    owner: vm,
                    priority,
                    trigger,
                },
            );
            self.gic.set_group(id, Group::Group0)?;
            self.gic.set_priority(id, priority)?;
            self.gic.set_enabled(id, true)?;
        }
        self.monitor.logs.entry(vm).or_default();
        Ok(Ok(()))
    }

    /// Detach path: hand the ids back to the host, disabled.
    pub fn smc_unprot_int(
        &mut self,
        caller: Caller,
        vm: VmId,
        ids: &[InterruptId],
    ) -> Result<Result<(), MonitorError>> {
        let prev = self.smc_enter();
        let mut res = Ok(Ok(()));
        if caller != Caller::Rmm {
            res = Ok(Err(MonitorError::WrongCaller));
        } else {
            for id in ids {
                if self.monitor.protected.get(id).is_some_and(|p| p.owner == vm) {
                    self.monitor.protected.remove(id);
                    self.monitor.awaiting_eoi.remove(id);
                    if let Err(e) = self
                        .gic
                        .set_enabled(*id, false)
                        .and_then(|_| self.gic.set_group(*id, Group::Group1))
                    {
                        res = Err(e);
                        break;
                    }
                    self.gic.clear(*id);
                }
            }
        }
        let ok = matches!(res, Ok(Ok(())));
        self.smc_leave(prev, Call::SmcUnprotInt, ok);
        res
    }

    /// GPT update on the RMM's behalf (delegation, DMA attach/detach).
    pub fn smc_gpt_set(
        &mut self,
        caller: Caller,
        tables: GptSelect,
        granules: &BTreeSet<u64>,
        world: World,
    ) -> Result<Result<(), MonitorError>> {
        let prev = self.smc_enter();
        let res = if caller != Caller::Rmm {
            Ok(Err(MonitorError::WrongCaller))
        } else {
            self.mem
                .gpt_set_granules(tables, granules, world, &mut self.trace)
                .map(Ok)
        };
        let ok = matches!(res, Ok(Ok(())));
        self.smc_leave(prev, Call::SmcGptSet, ok);
        res
    }

    /// Group0 delivery lands here: log to both views, ack Edge at once,
    /// notify the hypervisor, resume.
    pub fn monitor_trap(&mut self, id: InterruptId) -> Result<()> {
        let Some(p) = self.monitor.protected.get(&id).copied() else {
            return Err(SimError::UnprotectedTrap(id));
        };
        let prev = self.cpu_world();
        self.switch_to(World::Root);
        self.trace.emit(TraceEvent::Trap { irq: id, vm: p.owner });
        let tick = self.trace.tick();
        let capacity = self.monitor.capacity;
        let log = self.monitor.logs.entry(p.owner).or_default();
        if log.realm.len() >= capacity || log.notify.len() >= capacity {
            self.trace.emit(TraceEvent::LogOverflow { vm: p.owner, irq: id });
        } else {
            let seq = self.monitor.next_seq;
            self.monitor.next_seq += 1;
            let rec = LogRecord {
                seq,
                irq: id,
                priority: p.priority,
                arrival: tick,
            };
            log.realm.push_back(rec);
            log.notify.push_back(rec);
            log.appended += 1;
            for view in [LogView::Realm, LogView::Notify] {
                self.trace.emit(TraceEvent::LogAppend {
                    vm: p.owner,
                    irq: id,
                    seq,
                    view,
                });
            }
        }
        match p.trigger {
            Trigger::Edge => {
                self.gic.acknowledge(id, &mut self.trace)?;
            }
            Trigger::Level if !self.monitor.level_ack_protocol => {
                self.gic.acknowledge(id, &mut self.trace)?;
            }
            Trigger::Level => {
                self.monitor.awaiting_eoi.insert(id);
            }
        }
        self.gic.assert_line(SGI_NOTIFY, None, &mut self.trace)?;
        self.switch_to(prev);
        Ok(())
    }

    /// Checked GIC config access on the hypervisor's behalf (the GPF
    /// trap-and-emulate path).
    pub fn smc_gic_config(
        &mut self,
        caller: Caller,
        addr: u64,
        write: Option<u64>,
    ) -> Result<Result<u64, MonitorError>> {
        let prev = self.smc_enter();
        let res = match self.gic.decode_config_addr(addr) {
            _ if caller != Caller::Hypervisor => Ok(Err(MonitorError::WrongCaller)),
            None => {
                self.violation(
                    ViolationKind::GicConfig,
                    None,
                    format!("config access to non-GIC address {addr:#x}"),
                );
                Ok(Err(MonitorError::NotGicAddress(addr)))
            }
            Some((id, field)) => {
                if let Some(p) = self.monitor.protected.get(&id).copied() {
                    self.violation(
                        ViolationKind::GicConfig,
                        Some(p.owner),
                        format!("{field:?} access to protected {id}"),
                    );
                    Ok(Err(MonitorError::Protected(id)))
                } else if self.gic.config(id).is_err() {
                    Ok(Err(MonitorError::Unknown(id)))
                } else {
                    self.gic.config_rw(addr, write).map(Ok)
                }
            }
        };
        let ok = matches!(res, Ok(Ok(_)));
        self.smc_leave(prev, Call::SmcGicConfig, ok);
        res
    }

    /// Physical acknowledgment. Unprotected ids are acked for anyone;
    /// protected Level ids only on the RMM's word after a virtual EOI.
    pub fn smc_ack_phys(&mut self, caller: Caller, id: InterruptId) -> Result<Result<(), MonitorError>> {
        let prev = self.smc_enter();
        let res = self.ack_phys(caller, id);
        let ok = matches!(res, Ok(Ok(())));
        self.smc_leave(prev, Call::SmcAckPhys, ok);
        res
    }

    fn ack_phys(&mut self, caller: Caller, id: InterruptId) -> Result<Result<(), MonitorError>> {
        let Some(p) = self.monitor.protected.get(&id).copied() else {
            self.gic.acknowledge(id, &mut self.trace)?;
            return Ok(Ok(()));
        };
        match caller {
            Caller::Hypervisor => {
                self.violation(
                    ViolationKind::AckPhys,
                    Some(p.owner),
                    format!("host acknowledged protected {id}"),
                );
                Ok(Err(MonitorError::Protected(id)))
            }
            Caller::Rmm if p.trigger == Trigger::Level && self.monitor.awaiting_eoi.remove(&id) => {
                self.gic.acknowledge(id, &mut self.trace)?;
                Ok(Ok(()))
            }
            Caller::Rmm if p.trigger == Trigger::Level && !self.monitor.level_ack_protocol => {
                // Already acked at trap time.
                self.gic.acknowledge(id, &mut self.trace)?;
                Ok(Ok(()))
            }
            Caller::Rmm => Ok(Err(MonitorError::NotAwaitingAck(id))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::devices::{DeviceClass, DeviceDescriptor, DeviceKind, IrqLine, PlatformDeviceTree};
    use crate::gic::ConfigField;
    use crate::harness::trace::Target;
    use crate::platform::Layout;
    use crate::types::{DeviceId, GranuleRange, Mode};

    const KBD: InterruptId = InterruptId(44);
    const EDGE: InterruptId = InterruptId(50);
    const FREE: InterruptId = InterruptId(30);

    fn platform() -> Platform {
        let dev = |id: u32, g: u64, irq: InterruptId, trigger| DeviceDescriptor {
            id: DeviceId(id),
            name: format!("d{id}"),
            kind: DeviceKind::Sensor,
            class: DeviceClass::MmioOnly,
            mmio: vec![GranuleRange::new(g, 1)],
            dma: false,
            interrupts: vec![IrqLine { id: irq, trigger }],
        };
        let tree = PlatformDeviceTree::new(vec![
            dev(1, 32, KBD, Trigger::Level),
            dev(2, 33, EDGE, Trigger::Edge),
            dev(3, 34, FREE, Trigger::Edge),
        ])
        .unwrap();
        let layout = Layout {
            granules: 128,
            firmware: GranuleRange::new(0, 16),
            gic: GranuleRange::new(16, 16),
            list_registers: 3,
            log_capacity: 4,
        };
        Platform::boot(Mode::Dmi, &layout, tree).unwrap()
    }

    fn protect(p: &mut Platform) {
        p.smc_prot_int(
            Caller::Rmm,
            VmId(1),
            &[(KBD, 0xa0, Trigger::Level), (EDGE, 0x30, Trigger::Edge)],
        )
        .unwrap()
        .unwrap();
    }

    fn trap(p: &mut Platform, id: InterruptId) {
        if p.gic.is_pending(SGI_NOTIFY) {
            p.gic.deliver(SGI_NOTIFY, &mut p.trace).unwrap();
            p.gic.acknowledge(SGI_NOTIFY, &mut p.trace).unwrap();
        }
        p.gic.assert_line(id, None, &mut p.trace).unwrap();
        assert_eq!(p.gic.next_deliverable(), Some(id));
        assert_eq!(p.gic.deliver(id, &mut p.trace).unwrap(), Target::Monitor);
        p.monitor_trap(id).unwrap();
    }

    #[test]
    fn prot_int_conflicts_across_vms() {
        let mut p = platform();
        protect(&mut p);
        assert_eq!(
            p.smc_prot_int(Caller::Rmm, VmId(2), &[(KBD, 1, Trigger::Level)])
                .unwrap(),
            Err(MonitorError::AlreadyProtected(KBD))
        );
        assert_eq!(p.smc_prot_int(Caller::Rmm, VmId(2), &[]).unwrap(), Ok(()));
        assert_eq!(
            p.smc_prot_int(Caller::Hypervisor, VmId(2), &[(FREE, 1, Trigger::Edge)])
                .unwrap(),
            Err(MonitorError::WrongCaller)
        );
    }

    #[test]
    fn edge_trap_logs_acks_and_notifies() {
        let mut p = platform();
        protect(&mut p);
        trap(&mut p, EDGE);
        let log = p.monitor.log(VmId(1)).unwrap();
        assert_eq!(log.realm_view().count(), 1);
        assert!(!p.gic.is_active(EDGE));
        assert!(p.gic.is_pending(SGI_NOTIFY));
    }

    #[test]
    fn level_trap_waits_for_eoi() {
        let mut p = platform();
        protect(&mut p);
        trap(&mut p, KBD);
        assert!(p.gic.is_active(KBD));
        assert!(p.monitor.awaiting_eoi(KBD));
        assert_eq!(
            p.smc_ack_phys(Caller::Hypervisor, KBD).unwrap(),
            Err(MonitorError::Protected(KBD))
        );
        assert!(p.gic.is_active(KBD));
        assert_eq!(p.smc_ack_phys(Caller::Rmm, KBD).unwrap(), Ok(()));
        assert!(!p.gic.is_active(KBD));
        assert_eq!(
            p.smc_ack_phys(Caller::Rmm, KBD).unwrap(),
            Err(MonitorError::NotAwaitingAck(KBD))
        );
    }

    #[test]
    fn log_views_agree_and_order_by_arrival() {
        let mut p = platform();
        protect(&mut p);
        trap(&mut p, EDGE);
        trap(&mut p, KBD);
        let log = p.monitor.log(VmId(1)).unwrap();
        let realm: Vec<_> = log.realm_view().map(|r| (r.seq, r.irq)).collect();
        let notify: Vec<_> = log.notify_view().map(|r| (r.seq, r.irq)).collect();
        assert_eq!(realm, notify);
        assert_eq!(realm, vec![(0, EDGE), (1, KBD)]);
    }

    #[test]
    fn log_overflow_drops_new_record() {
        let mut p = platform();
        protect(&mut p);
        for _ in 0..6 {
            trap(&mut p, EDGE);
        }
        assert_eq!(p.monitor.log(VmId(1)).unwrap().realm_view().count(), 4);
        assert_eq!(p.trace.count(|e| matches!(e, TraceEvent::LogOverflow { .. })), 2);
    }

    #[test]
    fn unprotected_trap_is_model_error() {
        let mut p = platform();
        assert!(matches!(p.monitor_trap(FREE), Err(SimError::UnprotectedTrap(_))));
    }

    #[test]
    fn gic_config_checks() {
        let mut p = platform();
        protect(&mut p);
        let en = p.gic.config_addr(FREE, ConfigField::Enable);
        assert_eq!(p.smc_gic_config(Caller::Hypervisor, en, Some(1)).unwrap(), Ok(1));
        assert!(p.gic.config(FREE).unwrap().enabled);
        let route = p.gic.config_addr(KBD, ConfigField::Route);
        assert_eq!(
            p.smc_gic_config(Caller::Hypervisor, route, Some(3)).unwrap(),
            Err(MonitorError::Protected(KBD))
        );
        assert_eq!(
            p.smc_gic_config(Caller::Hypervisor, 0x1000, Some(0)).unwrap(),
            Err(MonitorError::NotGicAddress(0x1000))
        );
        assert_eq!(p.trace.count(|e| matches!(e, TraceEvent::Violation { .. })), 2);
    }

    #[test]
    fn greedy_level_ack_refires() {
        let mut p = platform();
        protect(&mut p);
        p.monitor.level_ack_protocol = false;
        trap(&mut p, KBD);
        // line still high: re-pended immediately
        assert!(p.gic.is_pending(KBD));
    }
}
