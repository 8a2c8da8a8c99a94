// SPDX-License-Identifier: Apache-2.0

//! Realm manager: RSI/RMI surface, device attach orchestration, stage-2
//! exclusivity, measurement extension and the virtual-interrupt checks.

use std::collections::{BTreeMap, BTreeSet};
use std::hash::Hasher;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::devices::{measure_descriptor, PlatformDeviceTree};
use crate::error::{Result, SimError};
use crate::gic::Trigger;
use crate::harness::trace::{AttachPhase, Call, ExitReason, TraceEvent, ViolationKind};
use crate::mem::{GptKind, GptSelect, MapKind, Perms, S2Entry, World};
use crate::monitor::{Caller, LogRecord, MonitorError};
use crate::platform::Platform;
use crate::types::{DeviceId, Granule, GranuleRange, InterruptId, Mode, VmId};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttachFlags {
    pub dma_protection: bool,
    pub interrupt_isolation: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttachRequest {
    pub vm: VmId,
    pub device: DeviceId,
    /// Guest-physical granule ranges, in the order of the device's MMIO ranges.
    pub gpas: Vec<GranuleRange>,
    /// (id, VM-assigned priority).
    #[serde(default)]
    pub interrupts: Vec<(InterruptId, u8)>,
    #[serde(default)]
    pub flags: AttachFlags,
}

impl AttachRequest {
    /// Expected (gpa granule, pa granule) pairs given the device's ranges.
    pub fn expected_mappings(&self, mmio: &[GranuleRange]) -> Vec<(u64, u64)> {
        self.gpas
            .iter()
            .zip(mmio)
            .flat_map(|(g, m)| g.iter().zip(m.iter()))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttachState {
    Idle,
    AwaitingFinalize,
    Attached,
    Detached,
    ForceReclaimed,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Attachment {
    pub req: AttachRequest,
    pub state: AttachState,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum RmmError {
    #[error("unknown realm {0}")]
    UnknownRealm(VmId),
    #[error("device {0} is not in the platform device tree")]
    UnknownDevice(DeviceId),
    #[error("interrupts do not match the device tree")]
    InterruptMismatch,
    #[error("guest-physical ranges do not match the device's MMIO layout")]
    BadGpaRanges,
    #[error("{0} is already attached or being attached")]
    AlreadyAttached(DeviceId),
    #[error("no attach in progress for {0}")]
    NotAwaitingFinalize(DeviceId),
    #[error("{0} is not attached")]
    NotAttached(DeviceId),
    #[error("hypervisor mapping does not match the device tree")]
    PaMismatch,
    #[error("granule {0:#x} is not delegated")]
    NotDelegated(u64),
    #[error("granule {0:#x} cannot be delegated from its current state")]
    NotDelegable(u64),
    #[error("granule {0:#x} is still mapped")]
    InUse(u64),
    #[error("granule {0:#x} already belongs to a realm")]
    Exclusivity(u64),
    #[error("device memory may only be added during an attach")]
    NoAttachInProgress,
    #[error("{0} has no virtual EOI awaiting acknowledgment")]
    NotAwaitingAck(InterruptId),
    #[error("gpa granule {0:#x} is already mapped")]
    GpaInUse(u64),
    #[error("gpa granule {0:#x} is not mapped")]
    GpaUnmapped(u64),
    #[error("monitor refused: {0}")]
    Monitor(MonitorError),
}

/// One pending log record as the check engine sees it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingRecord {
    pub irq: InterruptId,
    pub priority: u8,
    pub seq: u64,
}

impl From<&LogRecord> for PendingRecord {
    fn from(r: &LogRecord) -> Self {
        PendingRecord {
            irq: r.irq,
            priority: r.priority,
            seq: r.seq,
        }
    }
}

/// Log records not yet injected, kept sorted by (priority, arrival).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PendingQueue {
    records: Vec<PendingRecord>,
}

impl PendingQueue {
    pub fn from_records(records: impl IntoIterator<Item = PendingRecord>) -> Self {
        let mut q = PendingQueue::default();
        for r in records {
            q.push(r);
        }
        q
    }

    pub fn push(&mut self, r: PendingRecord) {
        let key = (r.priority, r.seq);
        let at = self.records.partition_point(|x| (x.priority, x.seq) <= key);
        self.records.insert(at, r);
    }

    pub fn records(&self) -> &[PendingRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, id: InterruptId) -> bool {
        self.records.iter().any(|r| r.irq == id)
    }

    /// Most urgent priority among the id's records.
    pub fn best_priority(&self, id: InterruptId) -> Option<u8> {
        self.records.iter().find(|r| r.irq == id).map(|r| r.priority)
    }

    /// The first `k` distinct ids in queue order.
    pub fn top_distinct(&self, k: usize) -> Vec<InterruptId> {
        let mut out: Vec<InterruptId> = Vec::with_capacity(k);
        for r in &self.records {
            if out.len() == k {
                break;
            }
            if !out.contains(&r.irq) {
                out.push(r.irq);
            }
        }
        out
    }

    /// Remove the earliest record of `id`.
    pub fn consume(&mut self, id: InterruptId) -> Option<PendingRecord> {
        let at = self.records.iter().position(|r| r.irq == id)?;
        Some(self.records.remove(at))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject(ViolationKind),
}

/// Checks #2-#4 on one batch. A batch is accepted iff it is exactly the
/// `|req|` most urgent distinct pending ids; order inside the batch is free.
pub fn check_injection(req: &[InterruptId], queue: &PendingQueue, n: usize) -> Verdict {
    let distinct: BTreeSet<InterruptId> = req.iter().copied().collect();
    if req.len() > n || distinct.len() != req.len() {
        return Verdict::Reject(ViolationKind::Malformed);
    }
    if req.is_empty() {
        return Verdict::Accept;
    }
    if !req.iter().all(|id| queue.contains(*id)) {
        return Verdict::Reject(ViolationKind::C2);
    }
    let top: BTreeSet<InterruptId> = queue.top_distinct(req.len()).into_iter().collect();
    if top == distinct {
        return Verdict::Accept;
    }
    let worst = req
        .iter()
        .filter_map(|id| queue.best_priority(*id))
        .max()
        .unwrap_or(u8::MAX);
    let skipped_more_urgent = queue
        .records
        .iter()
        .any(|r| !distinct.contains(&r.irq) && r.priority < worst);
    Verdict::Reject(if skipped_more_urgent {
        ViolationKind::C4
    } else {
        ViolationKind::C3
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnterOutcome {
    /// VM is running; the fired ids are in `fired`.
    Entered,
    Rejected(ViolationKind),
}

#[derive(Clone, Debug, Default)]
pub struct Realm {
    pub measurement: u64,
    queue: PendingQueue,
    attachments: BTreeMap<DeviceId, Attachment>,
    /// Protected Level ids fired into the VM and not yet acknowledged.
    fired_level: BTreeSet<InterruptId>,
    logged: u64,
    injected: u64,
}

impl Realm {
    pub fn queue(&self) -> &PendingQueue {
        &self.queue
    }

    pub fn attachment(&self, dev: DeviceId) -> Option<&Attachment> {
        self.attachments.get(&dev)
    }

    pub fn attachments(&self) -> impl Iterator<Item = (&DeviceId, &Attachment)> {
        self.attachments.iter()
    }

    fn awaiting(&self) -> impl Iterator<Item = &Attachment> {
        self.attachments
            .values()
            .filter(|a| a.state == AttachState::AwaitingFinalize)
    }

    fn has_dma(&self) -> bool {
        self.attachments
            .values()
            .any(|a| a.state == AttachState::Attached && a.req.flags.dma_protection)
    }

    /// Ids the check engine does not see: attached without isolation.
    fn passthrough(&self) -> BTreeSet<InterruptId> {
        self.attachments
            .values()
            .filter(|a| a.state == AttachState::Attached && !a.req.flags.interrupt_isolation)
            .flat_map(|a| a.req.interrupts.iter().map(|(id, _)| *id))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Rmm {
    tree: PlatformDeviceTree,
    realms: BTreeMap<VmId, Realm>,
}

impl Rmm {
    /// Boot: the RMM keeps its own copy of the platform device tree.
    pub fn new(tree: PlatformDeviceTree) -> Self {
        Rmm {
            tree,
            realms: BTreeMap::new(),
        }
    }

    pub fn realm(&self, vm: VmId) -> Option<&Realm> {
        self.realms.get(&vm)
    }

    fn realm_mut(&mut self, vm: VmId) -> Result<&mut Realm, RmmError> {
        self.realms.get_mut(&vm).ok_or(RmmError::UnknownRealm(vm))
    }

    pub fn attach_state(&self, vm: VmId, dev: DeviceId) -> AttachState {
        self.realms
            .get(&vm)
            .and_then(|r| r.attachments.get(&dev))
            .map_or(AttachState::Idle, |a| a.state)
    }

    /// Attach requests waiting for the host to delegate device memory.
    pub fn pending_attaches(&self, vm: VmId) -> Vec<AttachRequest> {
        self.realms
            .get(&vm)
            .map(|r| r.awaiting().map(|a| a.req.clone()).collect())
            .unwrap_or_default()
    }

    /// Residual of the advisory count check: logged minus injected.
    pub fn check_count(&self, vm: VmId) -> i64 {
        self.realms.get(&vm).map_or(0, |r| r.logged as i64 - r.injected as i64)
    }

    fn rmi_enter(p: &mut Platform) -> World {
        let prev = p.cpu_world();
        p.switch_to(World::Realm);
        prev
    }

    fn rmi_leave(p: &mut Platform, prev: World, call: Call, ok: bool) {
        p.record_call(call, ok);
        p.switch_to(prev);
    }

    fn rmi<T>(
        &mut self,
        p: &mut Platform,
        call: Call,
        f: impl FnOnce(&mut Self, &mut Platform) -> Result<Result<T, RmmError>>,
    ) -> Result<Result<T, RmmError>> {
        let prev = Self::rmi_enter(p);
        let res = f(self, p);
        let ok = matches!(res, Ok(Ok(_)));
        Self::rmi_leave(p, prev, call, ok);
        res
    }

    pub fn rmi_realm_create(&mut self, p: &mut Platform, vm: VmId) -> Result<Result<(), RmmError>> {
        self.rmi(p, Call::RmiRealmCreate, |rmm, _| {
            rmm.realms.entry(vm).or_default();
            Ok(Ok(()))
        })
    }

    pub fn rmi_granule_delegate(&mut self, p: &mut Platform, pa: Granule) -> Result<Result<(), RmmError>> {
        self.rmi(p, Call::RmiGranuleDelegate, |_, p| {
            if p.mem.gpt(GptKind::Core).get(pa.0)? != World::Normal {
                return Ok(Err(RmmError::NotDelegable(pa.0)));
            }
            let set = BTreeSet::from([pa.0]);
            Ok(p.smc_gpt_set(Caller::Rmm, GptSelect::Both, &set, World::Realm)?
                .map_err(RmmError::Monitor))
        })
    }

    pub fn rmi_granule_undelegate(&mut self, p: &mut Platform, pa: Granule) -> Result<Result<(), RmmError>> {
        self.rmi(p, Call::RmiGranuleUndelegate, |_, p| {
            if p.mem.gpt(GptKind::Core).get(pa.0)? != World::Realm {
                return Ok(Err(RmmError::NotDelegated(pa.0)));
            }
            if p.mem.owner_of(pa).is_some() {
                return Ok(Err(RmmError::InUse(pa.0)));
            }
            p.mem.scrub(pa.0);
            let set = BTreeSet::from([pa.0]);
            Ok(p.smc_gpt_set(Caller::Rmm, GptSelect::Both, &set, World::Normal)?
                .map_err(RmmError::Monitor))
        })
    }

    /// Map a delegated granule into a realm. Device MMIO granules are only
    /// accepted while an attach is in progress.
    pub fn rmi_data_create(
        &mut self,
        p: &mut Platform,
        vm: VmId,
        gpa: u64,
        pa: Granule,
    ) -> Result<Result<(), RmmError>> {
        self.rmi(p, Call::RmiDataCreate, |rmm, p| rmm.data_create(p, vm, gpa, pa))
    }

    fn data_create(&mut self, p: &mut Platform, vm: VmId, gpa: u64, pa: Granule) -> Result<Result<(), RmmError>> {
        let is_mmio = self.tree.device_at(pa.base()).is_some();
        let realm = match self.realm_mut(vm) {
            Ok(r) => r,
            Err(e) => return Ok(Err(e)),
        };
        if is_mmio && realm.awaiting().next().is_none() {
            return Ok(Err(RmmError::NoAttachInProgress));
        }
        let dma = realm.has_dma();
        if p.mem.gpt(GptKind::Core).get(pa.0)? != World::Realm {
            return Ok(Err(RmmError::NotDelegated(pa.0)));
        }
        if let Some(owner) = p.mem.owner_of(pa) {
            p.violation(
                ViolationKind::Exclusivity,
                Some(vm),
                format!("granule {:#x} already mapped by {owner}", pa.0),
            );
            return Ok(Err(RmmError::Exclusivity(pa.0)));
        }
        if p.mem.vm_table(vm).is_some_and(|t| t.get(gpa).is_some()) {
            return Ok(Err(RmmError::GpaInUse(gpa)));
        }
        let kind = if is_mmio { MapKind::Mmio } else { MapKind::Ram };
        p.mem.vm_table_mut(vm).map(
            gpa,
            S2Entry {
                pa,
                perms: Perms::RW,
                kind,
            },
        );
        if dma {
            let set = BTreeSet::from([pa.0]);
            if let Err(e) = p.smc_gpt_set(Caller::Rmm, GptSelect::DeviceOnly, &set, World::Normal)? {
                return Ok(Err(RmmError::Monitor(e)));
            }
            p.mem.smmu_sync(vm, &mut p.trace);
        }
        Ok(Ok(()))
    }

    pub fn rmi_data_destroy(&mut self, p: &mut Platform, vm: VmId, gpa: u64) -> Result<Result<(), RmmError>> {
        self.rmi(p, Call::RmiDataDestroy, |rmm, p| rmm.data_destroy(p, vm, gpa))
    }

    fn data_destroy(&mut self, p: &mut Platform, vm: VmId, gpa: u64) -> Result<Result<(), RmmError>> {
        if let Err(e) = self.realm_mut(vm) {
            return Ok(Err(e));
        }
        let Some(entry) = p.mem.vm_table_mut(vm).unmap(gpa) else {
            return Ok(Err(RmmError::GpaUnmapped(gpa)));
        };
        if p.mem.has_dma_attachment(vm) {
            // Back to the plain realm view once no VM can reach it.
            let set = BTreeSet::from([entry.pa.0]);
            if let Err(e) = p.smc_gpt_set(Caller::Rmm, GptSelect::DeviceOnly, &set, World::Realm)? {
                return Ok(Err(RmmError::Monitor(e)));
            }
            p.mem.smmu_sync(vm, &mut p.trace);
        }
        Ok(Ok(()))
    }

    /// Map unprotected (normal world) memory or MMIO into a realm. Used by
    /// the realm baseline, which has no attach protocol.
    pub fn rmi_map_unprotected(
        &mut self,
        p: &mut Platform,
        vm: VmId,
        gpa: u64,
        pa: Granule,
        kind: MapKind,
    ) -> Result<Result<(), RmmError>> {
        self.rmi(p, Call::RmiMapUnprotected, |rmm, p| {
            if let Err(e) = rmm.realm_mut(vm) {
                return Ok(Err(e));
            }
            if p.mem.gpt(GptKind::Core).get(pa.0)? != World::Normal {
                return Ok(Err(RmmError::NotDelegable(pa.0)));
            }
            p.mem.vm_table_mut(vm).map(
                gpa,
                S2Entry {
                    pa,
                    perms: Perms::RW,
                    kind,
                },
            );
            Ok(Ok(()))
        })
    }

    /// Guest asks for a device. Validated against the RMM's device tree and
    /// parked until the host finalizes.
    pub fn rsi_attach_dev(&mut self, p: &mut Platform, req: &AttachRequest) -> Result<Result<(), RmmError>> {
        let res = self.attach_dev(req);
        p.record_call(Call::RsiAttachDev, res.is_ok());
        if res.is_ok() {
            p.trace.emit(TraceEvent::Attach {
                vm: req.vm,
                device: req.device,
                phase: AttachPhase::AwaitingFinalize,
            });
        }
        Ok(res)
    }

    fn attach_dev(&mut self, req: &AttachRequest) -> Result<(), RmmError> {
        let dev = self
            .tree
            .get(req.device)
            .map_err(|_| RmmError::UnknownDevice(req.device))?;
        if !self.realms.contains_key(&req.vm) {
            return Err(RmmError::UnknownRealm(req.vm));
        }
        if req.interrupts.iter().any(|(id, _)| !dev.owns_irq(*id)) {
            return Err(RmmError::InterruptMismatch);
        }
        let listed: BTreeSet<_> = req.interrupts.iter().map(|(id, _)| *id).collect();
        if listed.len() != req.interrupts.len() {
            return Err(RmmError::InterruptMismatch);
        }
        if req.flags.interrupt_isolation && listed.len() != dev.interrupts.len() {
            return Err(RmmError::InterruptMismatch);
        }
        if req.flags.dma_protection && !dev.dma {
            return Err(RmmError::UnknownDevice(req.device));
        }
        let shapes_match =
            req.gpas.len() == dev.mmio.len() && req.gpas.iter().zip(&dev.mmio).all(|(g, m)| g.count == m.count);
        let overlap = req
            .gpas
            .iter()
            .enumerate()
            .any(|(i, a)| req.gpas[i + 1..].iter().any(|b| a.overlaps(b)));
        if !shapes_match || overlap {
            return Err(RmmError::BadGpaRanges);
        }
        let busy = self.realms.values().any(|r| {
            r.attachments
                .get(&req.device)
                .is_some_and(|a| matches!(a.state, AttachState::AwaitingFinalize | AttachState::Attached))
        });
        if busy {
            return Err(RmmError::AlreadyAttached(req.device));
        }
        let realm = self.realm_mut(req.vm)?;
        realm.attachments.insert(
            req.device,
            Attachment {
                req: req.clone(),
                state: AttachState::AwaitingFinalize,
            },
        );
        Ok(())
    }

    /// Host reports device memory delegated and mapped. Verify every
    /// mapping against the device tree, then protect, reset, open the
    /// device view and measure.
    pub fn rmi_dev_finalize(&mut self, p: &mut Platform, vm: VmId, dev: DeviceId) -> Result<Result<(), RmmError>> {
        self.rmi(p, Call::RmiDevFinalize, |rmm, p| rmm.dev_finalize(p, vm, dev))
    }

    fn dev_finalize(&mut self, p: &mut Platform, vm: VmId, dev_id: DeviceId) -> Result<Result<(), RmmError>> {
        let desc = self.tree.get(dev_id)?.clone();
        let req = match self.realms.get(&vm).and_then(|r| r.attachments.get(&dev_id)) {
            Some(a) if a.state == AttachState::AwaitingFinalize => a.req.clone(),
            _ => return Ok(Err(RmmError::NotAwaitingFinalize(dev_id))),
        };
        let expected = req.expected_mappings(&desc.mmio);
        let table = p.mem.vm_table(vm);
        let mismatch = expected
            .iter()
            .find(|(gpa, pa)| table.and_then(|t| t.get(*gpa)).map(|e| e.pa) != Some(Granule(*pa)));
        if let Some((gpa, _)) = mismatch.copied() {
            p.violation(
                ViolationKind::PaMapping,
                Some(vm),
                format!("gpa granule {gpa:#x} of {dev_id} not mapped to its device-tree address"),
            );
            // Abort: unmap whatever the host mapped for this device.
            for (gpa, _) in &expected {
                if p.mem.vm_table(vm).is_some_and(|t| t.get(*gpa).is_some()) {
                    self.data_destroy(p, vm, *gpa)?.ok();
                }
            }
            self.realm_mut(vm)
                .map_err(SimError::from_rmm)?
                .attachments
                .remove(&dev_id);
            p.trace.emit(TraceEvent::Attach {
                vm,
                device: dev_id,
                phase: AttachPhase::Aborted,
            });
            return Ok(Err(RmmError::PaMismatch));
        }
        if req.flags.interrupt_isolation {
            let irqs: Vec<(InterruptId, u8, Trigger)> = req
                .interrupts
                .iter()
                .map(|(id, prio)| (*id, *prio, desc.trigger_of(*id).unwrap_or(Trigger::Edge)))
                .collect();
            if let Err(e) = p.smc_prot_int(Caller::Rmm, vm, &irqs)? {
                return Ok(Err(RmmError::Monitor(e)));
            }
        }
        p.devices.soft_reset(dev_id, &mut p.trace)?;
        for l in &desc.interrupts {
            p.gic.clear(l.id);
            if req.flags.interrupt_isolation {
                // clear() dropped the pending state; keep the config enabled.
                p.gic.set_enabled(l.id, true)?;
            }
        }
        if req.flags.dma_protection {
            p.mem.destroy_stream_table(desc.stream());
            p.mem.mirror_stream(vm, desc.stream());
            let owned = p.mem.owned_by(vm);
            if let Err(e) = p.smc_gpt_set(Caller::Rmm, GptSelect::DeviceOnly, &owned, World::Normal)? {
                return Ok(Err(RmmError::Monitor(e)));
            }
            p.mem.smmu_sync(vm, &mut p.trace);
        }
        let dev_digest = measure_descriptor(&desc, p.devices.state(dev_id)?);
        let realm = self.realm_mut(vm).map_err(SimError::from_rmm)?;
        realm.measurement = extend_measurement(realm.measurement, dev_digest);
        let digest = realm.measurement;
        if let Some(a) = realm.attachments.get_mut(&dev_id) {
            a.state = AttachState::Attached;
        }
        p.trace.emit(TraceEvent::Measure { vm, digest });
        p.trace.emit(TraceEvent::Attach {
            vm,
            device: dev_id,
            phase: AttachPhase::Attached,
        });
        Ok(Ok(()))
    }

    /// Guest gives a device back: reset, unprotect, drop the device view,
    /// unmap its MMIO so the host can reclaim it.
    pub fn rsi_detach_dev(&mut self, p: &mut Platform, vm: VmId, dev: DeviceId) -> Result<Result<(), RmmError>> {
        let res = self.detach(p, vm, dev, AttachState::Detached);
        let ok = matches!(res, Ok(Ok(())));
        p.record_call(Call::RsiDetachDev, ok);
        res
    }

    fn detach(
        &mut self,
        p: &mut Platform,
        vm: VmId,
        dev_id: DeviceId,
        end: AttachState,
    ) -> Result<Result<(), RmmError>> {
        let desc = self.tree.get(dev_id)?.clone();
        let req = match self.realms.get(&vm).and_then(|r| r.attachments.get(&dev_id)) {
            Some(a) if a.state == AttachState::Attached => a.req.clone(),
            _ => return Ok(Err(RmmError::NotAttached(dev_id))),
        };
        p.devices.soft_reset(dev_id, &mut p.trace)?;
        if req.flags.interrupt_isolation {
            let ids: Vec<_> = req.interrupts.iter().map(|(id, _)| *id).collect();
            if let Err(e) = p.smc_unprot_int(Caller::Rmm, vm, &ids)? {
                return Ok(Err(RmmError::Monitor(e)));
            }
        }
        for l in &desc.interrupts {
            p.gic.clear(l.id);
        }
        let realm = self.realm_mut(vm).map_err(SimError::from_rmm)?;
        for (id, _) in &req.interrupts {
            realm.fired_level.remove(id);
        }
        if let Some(a) = realm.attachments.get_mut(&dev_id) {
            a.state = end;
        }
        let still_dma = realm.has_dma();
        if req.flags.dma_protection {
            p.mem.destroy_stream_table(desc.stream());
            if !still_dma {
                let owned: BTreeSet<u64> = p
                    .mem
                    .owned_by(vm)
                    .into_iter()
                    .filter(|g| p.mem.gpt(GptKind::Core).get(*g).ok() == Some(World::Realm))
                    .collect();
                if let Err(e) = p.smc_gpt_set(Caller::Rmm, GptSelect::DeviceOnly, &owned, World::Realm)? {
                    return Ok(Err(RmmError::Monitor(e)));
                }
            }
        }
        let mut unmapped = BTreeSet::new();
        for (gpa, _) in req.expected_mappings(&desc.mmio) {
            if let Some(e) = p.mem.vm_table_mut(vm).unmap(gpa) {
                unmapped.insert(e.pa.0);
            }
        }
        if still_dma {
            // The device's MMIO left the VM, so it leaves the device view too.
            if !unmapped.is_empty() {
                if let Err(e) = p.smc_gpt_set(Caller::Rmm, GptSelect::DeviceOnly, &unmapped, World::Realm)? {
                    return Ok(Err(RmmError::Monitor(e)));
                }
            }
            p.mem.smmu_sync(vm, &mut p.trace);
        }
        p.trace.emit(TraceEvent::Attach {
            vm,
            device: dev_id,
            phase: if end == AttachState::Detached {
                AttachPhase::Detached
            } else {
                AttachPhase::ForceReclaimed
            },
        });
        Ok(Ok(()))
    }

    /// VM teardown: every attached device is reset and reclaimed.
    pub fn rmi_realm_destroy(&mut self, p: &mut Platform, vm: VmId) -> Result<Result<(), RmmError>> {
        self.rmi(p, Call::RmiRealmDestroy, |rmm, p| {
            let devs: Vec<DeviceId> = match rmm.realms.get(&vm) {
                Some(r) => r
                    .attachments
                    .iter()
                    .filter(|(_, a)| a.state == AttachState::Attached)
                    .map(|(d, _)| *d)
                    .collect(),
                None => return Ok(Err(RmmError::UnknownRealm(vm))),
            };
            for d in devs {
                if let Err(e) = rmm.detach(p, vm, d, AttachState::ForceReclaimed)? {
                    return Ok(Err(e));
                }
            }
            let gpas: Vec<u64> = p
                .mem
                .vm_table(vm)
                .map(|t| t.entries().map(|(g, _)| g).collect())
                .unwrap_or_default();
            for g in gpas {
                p.mem.vm_table_mut(vm).unmap(g);
            }
            p.mem.remove_vm_table(vm);
            rmm.realms.remove(&vm);
            Ok(Ok(()))
        })
    }

    /// Enter a realm with a batch of virtual interrupts. In the isolating
    /// mode the batch must pass the checks; on rejection the VM is not run
    /// and the CPU returns to the host. On acceptance the CPU stays in the
    /// realm until `rec_exit`.
    pub fn rmi_rec_enter(&mut self, p: &mut Platform, vm: VmId, ids: &[InterruptId]) -> Result<EnterOutcome> {
        let prev = Self::rmi_enter(p);
        let outcome = self.rec_enter(p, vm, ids)?;
        p.record_call(Call::RmiRecEnter, outcome == EnterOutcome::Entered);
        if outcome != EnterOutcome::Entered {
            p.switch_to(prev);
        }
        Ok(outcome)
    }

    fn rec_enter(&mut self, p: &mut Platform, vm: VmId, ids: &[InterruptId]) -> Result<EnterOutcome> {
        let n = p.gic.list_registers();
        let isolates = p.mode.isolates();
        let records = if isolates {
            p.monitor.drain_realm(vm)
        } else {
            Vec::new()
        };
        let realm = self.realms.get_mut(&vm).ok_or(SimError::UnknownVm(vm))?;
        for r in &records {
            realm.queue.push(r.into());
            realm.logged += 1;
        }
        let verdict = if isolates {
            let pass = realm.passthrough();
            let distinct: BTreeSet<_> = ids.iter().collect();
            if ids.len() > n || distinct.len() != ids.len() {
                Verdict::Reject(ViolationKind::Malformed)
            } else {
                let checked: Vec<InterruptId> = ids.iter().copied().filter(|id| !pass.contains(id)).collect();
                check_injection(&checked, &realm.queue, n)
            }
        } else {
            let distinct: BTreeSet<_> = ids.iter().collect();
            if ids.len() > n || distinct.len() != ids.len() {
                Verdict::Reject(ViolationKind::Malformed)
            } else {
                Verdict::Accept
            }
        };
        if let Verdict::Reject(check) = verdict {
            p.trace.emit(TraceEvent::Inject {
                vm,
                ids: ids.to_vec(),
                accepted: false,
            });
            p.violation(check, Some(vm), format!("injection of {ids:?} refused"));
            return Ok(EnterOutcome::Rejected(check));
        }
        if isolates {
            let pass = realm.passthrough();
            for id in ids.iter().filter(|id| !pass.contains(id)) {
                realm.queue.consume(*id);
                realm.injected += 1;
                if p.monitor.protected(*id).is_some_and(|pi| pi.trigger == Trigger::Level) {
                    realm.fired_level.insert(*id);
                }
            }
        }
        p.trace.emit(TraceEvent::Inject {
            vm,
            ids: ids.to_vec(),
            accepted: true,
        });
        p.gic
            .vgic_program(vm, ids, &mut p.trace)
            .map_err(|e| SimError::Invariant(format!("checked batch refused by vGIC: {e}")))?;
        p.trace.emit(TraceEvent::VmEnter { vm });
        Ok(EnterOutcome::Entered)
    }

    /// VM exit back to the host.
    pub fn rec_exit(&mut self, p: &mut Platform, vm: VmId, reason: ExitReason) {
        p.trace.emit(TraceEvent::VmExit { vm, reason });
        p.switch_to(World::Normal);
    }

    /// Guest finished a protected Level interrupt; forward the physical
    /// acknowledgment to the monitor.
    pub fn rsi_ack_int(&mut self, p: &mut Platform, vm: VmId, id: InterruptId) -> Result<Result<(), RmmError>> {
        let realm = self.realms.get_mut(&vm).ok_or(SimError::UnknownVm(vm))?;
        let owned = p
            .monitor
            .protected(id)
            .is_some_and(|pi| pi.owner == vm && pi.trigger == Trigger::Level);
        let res = if owned && realm.fired_level.remove(&id) {
            p.smc_ack_phys(Caller::Rmm, id)?.map_err(RmmError::Monitor)
        } else {
            Err(RmmError::NotAwaitingAck(id))
        };
        p.record_call(Call::RsiAckInt, res.is_ok());
        Ok(res)
    }

    /// True when every realm-visible interrupt record has been injected.
    pub fn drained(&self, vm: VmId) -> bool {
        self.realms.get(&vm).is_none_or(|r| r.queue.is_empty())
    }

    pub fn mode_uses_checks(mode: Mode) -> bool {
        mode.isolates()
    }
}

/// new = FNV-1a-64(old ‖ device digest), both little-endian.
pub fn extend_measurement(old: u64, device: u64) -> u64 {
    let mut h = FnvHasher::default();
    h.write(&old.to_le_bytes());
    h.write(&device.to_le_bytes());
    h.finish()
}

impl SimError {
    fn from_rmm(e: RmmError) -> SimError {
        SimError::Invariant(e.to_string())
    }
}
