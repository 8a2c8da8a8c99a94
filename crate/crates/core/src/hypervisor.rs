// SPDX-License-Identifier: Apache-2.0

//! Untrusted host hypervisor. Sets VMs up per mode, routes Group1
//! interrupts, picks the batch for each VM entry, and optionally deviates
//! from the protocol according to a strategy.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::gic::{ConfigField, Trigger, SGI_NOTIFY};
use crate::harness::trace::{ExitReason, TraceEvent};
use crate::mem::{AccessRequest, MapKind, Perms, S2Entry, World};
use crate::monitor::Caller;
use crate::platform::Platform;
use crate::rmm::{AttachFlags, AttachRequest, EnterOutcome, PendingQueue, PendingRecord, Rmm};
use crate::types::{AccessKind, DeviceId, Granule, GranuleRange, InterruptId, Mode, StreamId, VmId};

/// Host behaviour. Everything but `Benign` deviates once; after the first
/// refused deviation the host behaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HypStrategy {
    Benign,
    /// Inject an id with no device assertion behind it.
    InjectFake(InterruptId),
    /// Inject the least urgent pending id while more urgent ones wait.
    ReorderBeyondWindow,
    /// Skip the most urgent pending id and inject the next ones.
    DropAndMiscount,
    /// Re-inject an id whose record was already consumed.
    ReplayConsumed,
    /// Acknowledge a Level id before the guest finished with it.
    PrematureLevelAck,
    /// Disable a device interrupt in the GIC.
    GicTamper(InterruptId),
    /// Hold a batch for this many ticks, then inject it unchanged.
    StallScheduling(u64),
    /// Map a device gpa to the wrong physical granule during attach.
    WrongPaMapping,
}

impl HypStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            HypStrategy::Benign => "benign",
            HypStrategy::InjectFake(_) => "inject_fake",
            HypStrategy::ReorderBeyondWindow => "reorder_beyond_window",
            HypStrategy::DropAndMiscount => "drop_and_miscount",
            HypStrategy::ReplayConsumed => "replay_consumed",
            HypStrategy::PrematureLevelAck => "premature_level_ack",
            HypStrategy::GicTamper(_) => "gic_tamper",
            HypStrategy::StallScheduling(_) => "stall_scheduling",
            HypStrategy::WrongPaMapping => "wrong_pa_mapping",
        }
    }
}

impl std::str::FromStr for HypStrategy {
    type Err = String;

    /// `name` or `name:arg`, e.g. `inject_fake:50` or `stall_scheduling:30`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let num = |what: &str| -> Result<u64, String> {
            arg.ok_or_else(|| format!("`{name}` needs `:{what}`"))?
                .parse()
                .map_err(|e| format!("`{name}`: bad {what}: {e}"))
        };
        let irq = |n: u64| u32::try_from(n).map(InterruptId).map_err(|e| e.to_string());
        let st = match name {
            "benign" => HypStrategy::Benign,
            "inject_fake" => HypStrategy::InjectFake(irq(num("irq")?)?),
            "reorder_beyond_window" => HypStrategy::ReorderBeyondWindow,
            "drop_and_miscount" => HypStrategy::DropAndMiscount,
            "replay_consumed" => HypStrategy::ReplayConsumed,
            "premature_level_ack" => HypStrategy::PrematureLevelAck,
            "gic_tamper" => HypStrategy::GicTamper(irq(num("irq")?)?),
            "stall_scheduling" => HypStrategy::StallScheduling(num("ticks")?),
            "wrong_pa_mapping" => HypStrategy::WrongPaMapping,
            other => return Err(format!("unknown strategy `{other}`")),
        };
        let takes_arg = matches!(
            st,
            HypStrategy::InjectFake(_) | HypStrategy::GicTamper(_) | HypStrategy::StallScheduling(_)
        );
        if arg.is_some() && !takes_arg {
            return Err(format!("`{name}` takes no argument"));
        }
        Ok(st)
    }
}

/// A device the host hands to a VM (baselines) or that the guest will ask
/// for (isolating mode).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostDevice {
    pub device: DeviceId,
    /// Guest-physical placement of each MMIO range.
    pub gpas: Vec<GranuleRange>,
    pub interrupts: Vec<(InterruptId, u8)>,
    #[serde(default = "isolated")]
    pub flags: AttachFlags,
}

fn isolated() -> AttachFlags {
    AttachFlags {
        dma_protection: false,
        interrupt_isolation: true,
    }
}

impl HostDevice {
    pub fn request(&self, vm: VmId) -> AttachRequest {
        AttachRequest {
            vm,
            device: self.device,
            gpas: self.gpas.clone(),
            interrupts: self.interrupts.clone(),
            flags: self.flags,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VmSetup {
    pub vm: VmId,
    /// Guest-physical RAM.
    pub ram: GranuleRange,
    /// Guest-physical DMA buffer window. Shared memory in the baselines,
    /// protected RAM in the isolating mode.
    pub dma_window: Option<GranuleRange>,
    pub devices: Vec<HostDevice>,
}

#[derive(Clone, Debug, Default)]
struct HostVm {
    /// Records read from the notify view, not yet injected.
    pending: PendingQueue,
    /// Ids the host injects without checks, with their priority.
    direct_prio: BTreeMap<InterruptId, u8>,
    /// Such ids waiting for injection.
    direct: BTreeSet<InterruptId>,
    /// Direct Level ids in the guest, physical ack deferred to EOI.
    hw_level: BTreeSet<InterruptId>,
    consumed: Vec<InterruptId>,
    run_at: Option<u64>,
    stale: Option<Vec<InterruptId>>,
    devices: Vec<HostDevice>,
}

#[derive(Clone, Debug)]
pub struct Hypervisor {
    strategy: HypStrategy,
    armed: bool,
    vms: BTreeMap<VmId, HostVm>,
    ram_next: u64,
    ram_end: u64,
    wake: Vec<(VmId, u64)>,
    seen_accepted: bool,
    deviations: u64,
}

impl Hypervisor {
    /// `ram` is the physical pool the host allocates VM memory from.
    pub fn new(strategy: HypStrategy, ram: GranuleRange) -> Self {
        Hypervisor {
            strategy,
            armed: strategy != HypStrategy::Benign,
            vms: BTreeMap::new(),
            ram_next: ram.start,
            ram_end: ram.end(),
            wake: Vec::new(),
            seen_accepted: false,
            deviations: 0,
        }
    }

    pub fn strategy(&self) -> HypStrategy {
        self.strategy
    }

    /// Number of deviations attempted.
    pub fn deviations(&self) -> u64 {
        self.deviations
    }

    fn alloc(&mut self) -> Result<Granule> {
        if self.ram_next >= self.ram_end {
            return Err(SimError::config("platform.ram", "host ran out of physical memory"));
        }
        let g = Granule(self.ram_next);
        self.ram_next += 1;
        Ok(g)
    }

    fn vm_mut(&mut self, vm: VmId) -> Result<&mut HostVm> {
        self.vms.get_mut(&vm).ok_or(SimError::UnknownVm(vm))
    }

    /// VM runs the engine should schedule, as (vm, tick).
    pub fn take_wakeups(&mut self) -> Vec<(VmId, u64)> {
        std::mem::take(&mut self.wake)
    }

    /// Ask for a run at `at` unless one is already due.
    pub fn request_run(&mut self, vm: VmId, at: u64) {
        if let Some(h) = self.vms.get_mut(&vm) {
            if h.run_at.is_none() {
                h.run_at = Some(at);
                self.wake.push((vm, at));
            }
        }
    }

    /// Benign delay: push the next run of `vm` back to `at`.
    pub fn stall_vm(&mut self, vm: VmId, at: u64) {
        if let Some(h) = self.vms.get_mut(&vm) {
            if h.run_at.is_none_or(|t| t < at) {
                h.run_at = Some(at);
                self.wake.push((vm, at));
            }
        }
    }

    /// True when a VmRun event at `now` is the one currently due.
    pub fn run_due(&self, vm: VmId, now: u64) -> bool {
        self.vms.get(&vm).is_some_and(|h| h.run_at == Some(now))
    }

    pub fn has_pending(&self, vm: VmId) -> bool {
        self.vms
            .get(&vm)
            .is_some_and(|h| !h.pending.is_empty() || !h.direct.is_empty())
    }

    // Setup.

    pub fn boot_vm(&mut self, p: &mut Platform, rmm: &mut Rmm, setup: &VmSetup) -> Result<()> {
        let vm = setup.vm;
        self.vms.insert(
            vm,
            HostVm {
                devices: setup.devices.clone(),
                ..HostVm::default()
            },
        );
        if p.mode.is_realm() {
            expect(rmm.rmi_realm_create(p, vm)?, "realm create")?;
        }
        let protected_dma = p.mode.isolates();
        for gpa in setup.ram.iter() {
            let pa = self.alloc()?;
            self.map_ram(p, rmm, vm, gpa, pa)?;
        }
        if let Some(win) = setup.dma_window {
            for gpa in win.iter() {
                let pa = self.alloc()?;
                if protected_dma {
                    self.map_ram(p, rmm, vm, gpa, pa)?;
                } else {
                    self.map_shared(p, rmm, vm, gpa, pa, MapKind::Shared)?;
                    for d in &setup.devices {
                        if p.tree.get(d.device)?.dma {
                            p.mem.stream_table_mut(StreamId::from(d.device)).map(
                                gpa,
                                S2Entry {
                                    pa,
                                    perms: Perms::RW,
                                    kind: MapKind::Shared,
                                },
                            );
                        }
                    }
                }
            }
        }
        if !p.mode.isolates() {
            for d in &setup.devices {
                self.give_device(p, rmm, vm, d)?;
            }
        }
        Ok(())
    }

    fn map_ram(&mut self, p: &mut Platform, rmm: &mut Rmm, vm: VmId, gpa: u64, pa: Granule) -> Result<()> {
        if p.mode.is_realm() {
            expect(rmm.rmi_granule_delegate(p, pa)?, "delegate")?;
            expect(rmm.rmi_data_create(p, vm, gpa, pa)?, "data create")
        } else {
            p.mem.vm_table_mut(vm).map(
                gpa,
                S2Entry {
                    pa,
                    perms: Perms::RW,
                    kind: MapKind::Ram,
                },
            );
            Ok(())
        }
    }

    fn map_shared(
        &mut self,
        p: &mut Platform,
        rmm: &mut Rmm,
        vm: VmId,
        gpa: u64,
        pa: Granule,
        kind: MapKind,
    ) -> Result<()> {
        if p.mode.is_realm() {
            expect(rmm.rmi_map_unprotected(p, vm, gpa, pa, kind)?, "map unprotected")
        } else {
            p.mem.vm_table_mut(vm).map(
                gpa,
                S2Entry {
                    pa,
                    perms: Perms::RW,
                    kind,
                },
            );
            Ok(())
        }
    }

    /// Baseline device assignment: map MMIO, enable lines Group1.
    fn give_device(&mut self, p: &mut Platform, rmm: &mut Rmm, vm: VmId, d: &HostDevice) -> Result<()> {
        let desc = p.tree.get(d.device)?.clone();
        for (gpa, pa) in d.request(vm).expected_mappings(&desc.mmio) {
            self.map_shared(p, rmm, vm, gpa, Granule(pa), MapKind::Mmio)?;
        }
        self.enable_direct(p, vm, &d.interrupts)
    }

    fn enable_direct(&mut self, p: &mut Platform, vm: VmId, irqs: &[(InterruptId, u8)]) -> Result<()> {
        for &(id, prio) in irqs {
            self.host_gic_write(p, id, ConfigField::Priority, u64::from(prio))?;
            self.host_gic_write(p, id, ConfigField::Group, 1)?;
            self.host_gic_write(p, id, ConfigField::Enable, 1)?;
            self.vm_mut(vm)?.direct_prio.insert(id, prio);
        }
        Ok(())
    }

    /// Plain store to GIC config space; a granule protection fault goes to
    /// the fault handler. Returns whether the write landed.
    fn host_gic_write(&mut self, p: &mut Platform, id: InterruptId, field: ConfigField, value: u64) -> Result<bool> {
        let addr = p.gic.config_addr(id, field);
        let req = AccessRequest::core(World::Normal, None, addr, AccessKind::Write);
        match p.gic.config_space_access(&req, Some(value), &p.mem, &mut p.trace)? {
            Ok(_) => Ok(true),
            Err(_) => Ok(self.gpf_handler(p, addr, Some(value))?.is_some()),
        }
    }

    /// Granule protection fault on config space: ask the monitor to do it.
    pub fn gpf_handler(&mut self, p: &mut Platform, addr: u64, write: Option<u64>) -> Result<Option<u64>> {
        Ok(p.smc_gic_config(Caller::Hypervisor, addr, write)?.ok())
    }

    fn ack_direct(&mut self, p: &mut Platform, id: InterruptId) -> Result<()> {
        if p.mode.isolates() {
            p.smc_ack_phys(Caller::Hypervisor, id)?.ok();
        } else {
            p.gic.acknowledge(id, &mut p.trace)?;
        }
        Ok(())
    }

    fn owner_of_direct(&self, id: InterruptId) -> Option<VmId> {
        self.vms
            .iter()
            .find(|(_, h)| h.direct_prio.contains_key(&id))
            .map(|(vm, _)| *vm)
    }

    // Interrupts.

    /// A Group1 interrupt delivered to the host.
    pub fn on_interrupt(&mut self, p: &mut Platform, id: InterruptId) -> Result<()> {
        let now = p.trace.tick();
        if id == SGI_NOTIFY {
            self.ack_direct(p, id)?;
            for vm in p.monitor.notified_vms() {
                let records = p.monitor.drain_notify(vm);
                if self.armed && self.strategy == HypStrategy::PrematureLevelAck {
                    let level = records
                        .iter()
                        .map(|r| r.irq)
                        .find(|i| p.monitor.protected(*i).is_some_and(|pi| pi.trigger == Trigger::Level));
                    if let Some(i) = level {
                        self.deviate();
                        if p.smc_ack_phys(Caller::Hypervisor, i)?.is_err() {
                            self.armed = false;
                        }
                    }
                }
                if let Some(h) = self.vms.get_mut(&vm) {
                    for r in &records {
                        h.pending.push(PendingRecord::from(r));
                    }
                }
                self.maybe_tamper(p)?;
                self.request_run(vm, now + 1);
            }
            return Ok(());
        }
        let Some(vm) = self.owner_of_direct(id) else {
            p.warn(format!("{id} delivered to the host with no owner"));
            return self.ack_direct(p, id);
        };
        let level = p.gic.config(id)?.trigger == Trigger::Level;
        let premature = self.armed && self.strategy == HypStrategy::PrematureLevelAck;
        if !level || premature {
            if level {
                self.deviate();
            }
            self.ack_direct(p, id)?;
        } else {
            self.vm_mut(vm)?.hw_level.insert(id);
        }
        self.vm_mut(vm)?.direct.insert(id);
        self.maybe_tamper(p)?;
        self.request_run(vm, now + 1);
        Ok(())
    }

    fn maybe_tamper(&mut self, p: &mut Platform) -> Result<()> {
        if let (true, HypStrategy::GicTamper(target)) = (self.armed, self.strategy) {
            self.deviate();
            self.armed = false;
            self.host_gic_write(p, target, ConfigField::Enable, 0)?;
        }
        Ok(())
    }

    fn deviate(&mut self) {
        self.deviations += 1;
    }

    // VM entry and exit.

    fn benign_batch(h: &HostVm, n: usize) -> Vec<InterruptId> {
        let mut ids = h.pending.top_distinct(n);
        let mut direct: Vec<(u8, InterruptId)> = h
            .direct
            .iter()
            .filter(|id| !ids.contains(id))
            .map(|id| (h.direct_prio.get(id).copied().unwrap_or(0xff), *id))
            .collect();
        direct.sort();
        ids.extend(direct.into_iter().map(|(_, id)| id).take(n.saturating_sub(ids.len())));
        ids
    }

    /// Strategy-chosen batch, or `None` to behave.
    fn deviant_batch(&mut self, p: &Platform, vm: VmId) -> Option<Vec<InterruptId>> {
        if !self.armed {
            return None;
        }
        let n = p.gic.list_registers();
        let h = self.vms.get(&vm)?;
        let distinct = h.pending.top_distinct(h.pending.len());
        match self.strategy {
            HypStrategy::InjectFake(id) if self.seen_accepted => Some(vec![id]),
            HypStrategy::ReorderBeyondWindow if distinct.len() > n => distinct.last().map(|id| vec![*id]),
            HypStrategy::DropAndMiscount if distinct.len() > n => Some(distinct[1..=n].to_vec()),
            HypStrategy::ReplayConsumed => h
                .consumed
                .iter()
                .rev()
                .find(|id| !h.pending.contains(**id) && !h.direct.contains(id))
                .map(|id| vec![*id]),
            _ => None,
        }
    }

    /// Enter `vm`. Returns the interrupts fired into the guest, or `None`
    /// if the entry was refused.
    pub fn run_vm(&mut self, p: &mut Platform, rmm: &mut Rmm, vm: VmId) -> Result<Option<Vec<InterruptId>>> {
        let now = p.trace.tick();
        let n = p.gic.list_registers();
        {
            let h = self.vm_mut(vm)?;
            h.run_at = None;
        }
        if p.mode.isolates() {
            let records = p.monitor.drain_notify(vm);
            let h = self.vm_mut(vm)?;
            for r in &records {
                h.pending.push(PendingRecord::from(r));
            }
        }
        let stale = self.vm_mut(vm)?.stale.take();
        let deviant = match stale {
            Some(b) => Some(b),
            None => self.deviant_batch(p, vm),
        };
        let deviated = deviant.is_some();
        let batch = match deviant {
            Some(b) => {
                self.deviate();
                b
            }
            None => {
                let b = Self::benign_batch(self.vm_mut(vm)?, n);
                if let (true, HypStrategy::StallScheduling(delay)) = (self.armed, self.strategy) {
                    if !b.is_empty() {
                        self.armed = false;
                        let h = self.vm_mut(vm)?;
                        h.stale = Some(b);
                        h.run_at = Some(now + delay);
                        self.wake.push((vm, now + delay));
                        return Ok(None);
                    }
                }
                b
            }
        };
        let outcome = if p.mode.is_realm() {
            rmm.rmi_rec_enter(p, vm, &batch)?
        } else {
            p.trace.emit(TraceEvent::Inject {
                vm,
                ids: batch.clone(),
                accepted: true,
            });
            p.gic
                .vgic_program(vm, &batch, &mut p.trace)
                .map_err(|e| SimError::Invariant(format!("host batch refused by vGIC: {e}")))?;
            p.trace.emit(TraceEvent::VmEnter { vm });
            EnterOutcome::Entered
        };
        if let EnterOutcome::Rejected(_) = outcome {
            self.armed = false;
            self.request_run(vm, now + 1);
            return Ok(None);
        }
        if deviated && !matches!(self.strategy, HypStrategy::StallScheduling(_)) {
            // Accepted deviation: a baseline took it.
            self.armed = false;
        }
        let h = self.vm_mut(vm)?;
        for id in &batch {
            if h.pending.consume(*id).is_some() || h.direct.remove(id) {
                h.consumed.push(*id);
            }
        }
        if !batch.is_empty() {
            self.seen_accepted = true;
        }
        Ok(Some(p.gic.vgic_fire(vm, &mut p.trace)))
    }

    /// Guest left the VM. `eoied` lists the ids it completed this run.
    pub fn vm_exit(
        &mut self,
        p: &mut Platform,
        rmm: &mut Rmm,
        vm: VmId,
        reason: ExitReason,
        eoied: &[InterruptId],
    ) -> Result<()> {
        let now = p.trace.tick();
        if p.mode.is_realm() {
            rmm.rec_exit(p, vm, reason);
        } else {
            p.trace.emit(TraceEvent::VmExit { vm, reason });
        }
        for id in eoied {
            if self.vm_mut(vm)?.hw_level.remove(id) {
                self.ack_direct(p, *id)?;
            }
        }
        if reason == ExitReason::AttachRequested {
            for req in rmm.pending_attaches(vm) {
                self.finish_attach(p, rmm, &req)?;
            }
        }
        let wants_deviation = self.armed
            && self.seen_accepted
            && matches!(self.strategy, HypStrategy::InjectFake(_) | HypStrategy::ReplayConsumed);
        if reason != ExitReason::Idle || self.has_pending(vm) || wants_deviation {
            self.request_run(vm, now + 1);
        }
        Ok(())
    }

    /// Delegate and map the device's MMIO, then ask the RMM to finalize.
    fn finish_attach(&mut self, p: &mut Platform, rmm: &mut Rmm, req: &AttachRequest) -> Result<()> {
        let desc = p.tree.get(req.device)?.clone();
        let mut delegated = Vec::new();
        let wrong = self.armed && self.strategy == HypStrategy::WrongPaMapping;
        for (i, (gpa, pa)) in req.expected_mappings(&desc.mmio).into_iter().enumerate() {
            let pa = if wrong && i == 0 {
                self.deviate();
                self.armed = false;
                self.alloc()?
            } else {
                Granule(pa)
            };
            if rmm.rmi_granule_delegate(p, pa)?.is_ok() {
                delegated.push(pa);
            }
            rmm.rmi_data_create(p, req.vm, gpa, pa)?.ok();
        }
        match rmm.rmi_dev_finalize(p, req.vm, req.device)? {
            Ok(()) => {
                if !req.flags.interrupt_isolation {
                    self.enable_direct(p, req.vm, &req.interrupts)?;
                }
            }
            Err(e) => {
                p.warn(format!("attach of {} failed: {e}", req.device));
                for pa in delegated {
                    rmm.rmi_granule_undelegate(p, pa)?.ok();
                }
            }
        }
        Ok(())
    }

    /// Host-side view of a VM's devices.
    pub fn devices(&self, vm: VmId) -> &[HostDevice] {
        self.vms.get(&vm).map_or(&[], |h| h.devices.as_slice())
    }

    /// Whether this mode sends attaches through the RMM.
    pub fn uses_attach(mode: Mode) -> bool {
        mode.isolates()
    }
}

fn expect<E: std::fmt::Display>(r: std::result::Result<(), E>, what: &str) -> Result<()> {
    r.map_err(|e| SimError::Invariant(format!("host {what} failed: {e}")))
}
