// SPDX-License-Identifier: Apache-2.0

//! Physical memory isolation: the core and device granule protection tables,
//! granule protection checks on the MMU and SMMU paths, and stage-2
//! translation for realm VMs and device streams.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Result, SimError};
use crate::harness::trace::{FlushScope, Trace, TraceEvent};
use crate::types::{AccessKind, Granule, GranuleRange, StreamId, VmId, GRANULE_SHIFT, GRANULE_SIZE};

/// Physical address space / security state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum World {
    Normal,
    Secure,
    Realm,
    Root,
}

impl World {
    pub const ALL: [World; 4] = [World::Normal, World::Secure, World::Realm, World::Root];

    /// The access matrix: Root reaches every PAS, Realm and Secure reach their
    /// own PAS plus Normal, Normal reaches only Normal.
    pub fn may_access(self, target: World) -> bool {
        match self {
            World::Root => true,
            World::Realm => matches!(target, World::Realm | World::Normal),
            World::Secure => matches!(target, World::Secure | World::Normal),
            World::Normal => target == World::Normal,
        }
    }
}

impl fmt::Display for World {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            World::Normal => "normal",
            World::Secure => "secure",
            World::Realm => "realm",
            World::Root => "root",
        })
    }
}

/// Which of the two tables: cores are filtered by the core table, the SMMU by
/// the device table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GptKind {
    #[serde(rename = "gpt_c")]
    Core,
    #[serde(rename = "gpt_d")]
    Device,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GptSelect {
    Both,
    DeviceOnly,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GranuleProtectionTable {
    kind: GptKind,
    entries: Vec<World>,
}

impl GranuleProtectionTable {
    pub fn new(kind: GptKind, granules: u64) -> Self {
        GranuleProtectionTable {
            kind,
            entries: vec![World::Normal; granules as usize],
        }
    }

    pub fn kind(&self) -> GptKind {
        self.kind
    }

    pub fn granules(&self) -> u64 {
        self.entries.len() as u64
    }

    pub fn get(&self, granule: u64) -> Result<World> {
        self.entries
            .get(granule as usize)
            .copied()
            .ok_or(SimError::GranuleOutOfRange(granule))
    }

    fn check_range(&self, range: GranuleRange) -> Result<()> {
        if range.end() > self.granules() || range.end() < range.start {
            return Err(SimError::GranuleOutOfRange(range.end().saturating_sub(1)));
        }
        Ok(())
    }

    fn fill(&mut self, range: GranuleRange, world: World) -> Result<()> {
        self.check_range(range)?;
        self.entries[range.start as usize..range.end() as usize].fill(world);
        Ok(())
    }

    /// Granules whose entries differ between `self` and `other`.
    pub fn diff(&self, other: &GranuleProtectionTable) -> Vec<u64> {
        self.entries
            .iter()
            .zip(&other.entries)
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(g, _)| g as u64)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AccessSource {
    Core {
        world: World,
        vm: Option<VmId>,
    },
    /// `world` is the security state the SMMU assigns to the stream; legacy
    /// devices are always Normal.
    Device {
        stream: StreamId,
        world: World,
    },
}

impl AccessSource {
    pub fn world(&self) -> World {
        match *self {
            AccessSource::Core { world, .. } | AccessSource::Device { world, .. } => world,
        }
    }

    pub fn legacy_device(stream: StreamId) -> Self {
        AccessSource::Device {
            stream,
            world: World::Normal,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessPath {
    Mmu,
    Smmu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AccessRequest {
    pub source: AccessSource,
    /// Physical address (stage-2 translation already applied).
    pub addr: u64,
    pub kind: AccessKind,
}

impl AccessRequest {
    pub fn core(world: World, vm: Option<VmId>, addr: u64, kind: AccessKind) -> Self {
        AccessRequest {
            source: AccessSource::Core { world, vm },
            addr,
            kind,
        }
    }

    pub fn device(stream: StreamId, addr: u64, kind: AccessKind) -> Self {
        AccessRequest {
            source: AccessSource::legacy_device(stream),
            addr,
            kind,
        }
    }

    /// Devices always go through the SMMU, cores through the MMU.
    pub fn path(&self) -> AccessPath {
        match self.source {
            AccessSource::Core { .. } => AccessPath::Mmu,
            AccessSource::Device { .. } => AccessPath::Smmu,
        }
    }

    pub fn gpt_kind(&self) -> GptKind {
        match self.path() {
            AccessPath::Mmu => GptKind::Core,
            AccessPath::Smmu => GptKind::Device,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "owner", content = "id", rename_all = "snake_case")]
pub enum S2Owner {
    Vm(VmId),
    Stream(StreamId),
}

impl fmt::Display for S2Owner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            S2Owner::Vm(v) => v.fmt(f),
            S2Owner::Stream(s) => s.fmt(f),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum AccessFault {
    #[error("granule protection fault: {origin:?} -> {target} at {addr:#x}")]
    GranuleProtection {
        addr: u64,
        origin: AccessSource,
        target: World,
    },
    #[error("translation fault: {owner} has no {kind:?} mapping for {gpa:#x}")]
    Translation { owner: S2Owner, gpa: u64, kind: AccessKind },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GpcVerdict {
    Allowed,
    Fault(AccessFault),
}

impl GpcVerdict {
    pub fn is_allowed(&self) -> bool {
        matches!(self, GpcVerdict::Allowed)
    }

    pub fn into_result(self) -> Result<(), AccessFault> {
        match self {
            GpcVerdict::Allowed => Ok(()),
            GpcVerdict::Fault(f) => Err(f),
        }
    }
}

/// Granule protection check of one access against one table.
pub fn gpc_check(req: &AccessRequest, gpt: &GranuleProtectionTable) -> Result<GpcVerdict> {
    let target = gpt.get(req.addr >> GRANULE_SHIFT)?;
    if req.source.world().may_access(target) {
        Ok(GpcVerdict::Allowed)
    } else {
        Ok(GpcVerdict::Fault(AccessFault::GranuleProtection {
            addr: req.addr,
            origin: req.source,
            target,
        }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Perms {
    pub read: bool,
    pub write: bool,
}

impl Perms {
    pub const RW: Perms = Perms {
        read: true,
        write: true,
    };
    pub const RO: Perms = Perms {
        read: true,
        write: false,
    };

    pub fn allows(&self, kind: AccessKind) -> bool {
        match kind {
            AccessKind::Read => self.read,
            AccessKind::Write => self.write,
        }
    }
}

/// What a stage-2 mapping points at. Only `Ram` is DMA-visible.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Ram,
    Mmio,
    /// Unprotected (normal world) memory shared with the host.
    Shared,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct S2Entry {
    pub pa: Granule,
    pub perms: Perms,
    pub kind: MapKind,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stage2Table {
    owner: S2Owner,
    entries: BTreeMap<u64, S2Entry>,
}

impl Stage2Table {
    pub fn new(owner: S2Owner) -> Self {
        Stage2Table {
            owner,
            entries: BTreeMap::new(),
        }
    }

    pub fn owner(&self) -> S2Owner {
        self.owner
    }

    pub fn get(&self, gpa_granule: u64) -> Option<&S2Entry> {
        self.entries.get(&gpa_granule)
    }

    pub fn map(&mut self, gpa_granule: u64, entry: S2Entry) -> Option<S2Entry> {
        self.entries.insert(gpa_granule, entry)
    }

    pub fn unmap(&mut self, gpa_granule: u64) -> Option<S2Entry> {
        self.entries.remove(&gpa_granule)
    }

    pub fn entries(&self) -> impl Iterator<Item = (u64, &S2Entry)> {
        self.entries.iter().map(|(g, e)| (*g, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Physical granules this table reaches.
    pub fn physical_granules(&self) -> BTreeSet<u64> {
        self.entries.values().map(|e| e.pa.0).collect()
    }

    /// Reverse lookup: the gpa granule mapping physical granule `pa`.
    pub fn gpa_of(&self, pa: Granule) -> Option<u64> {
        self.entries.iter().find(|(_, e)| e.pa == pa).map(|(g, _)| *g)
    }
}

/// Stage-2 translation of one guest-physical address.
pub fn s2_translate(table: &Stage2Table, gpa: u64, kind: AccessKind) -> Result<u64, AccessFault> {
    match table.get(gpa >> GRANULE_SHIFT) {
        Some(e) if e.perms.allows(kind) => Ok(e.pa.base() | (gpa & (GRANULE_SIZE - 1))),
        _ => Err(AccessFault::Translation {
            owner: table.owner,
            gpa,
            kind,
        }),
    }
}

/// The memory half of the platform: both GPTs, physical contents, and every
/// stage-2 table (VM tables on the MMU side, stream tables on the SMMU side).
#[derive(Clone, Debug)]
pub struct MemoryIsolation {
    gpt_c: GranuleProtectionTable,
    gpt_d: GranuleProtectionTable,
    contents: BTreeMap<u64, Box<[u8]>>,
    vm_tables: BTreeMap<VmId, Stage2Table>,
    stream_tables: BTreeMap<StreamId, Stage2Table>,
    /// Streams kept in sync with a VM table (DMA-protected attachments).
    mirrored: BTreeMap<VmId, BTreeSet<StreamId>>,
}

impl MemoryIsolation {
    /// Boot state: two entry-wise identical tables, everything Normal.
    pub fn new(granules: u64) -> Self {
        MemoryIsolation {
            gpt_c: GranuleProtectionTable::new(GptKind::Core, granules),
            gpt_d: GranuleProtectionTable::new(GptKind::Device, granules),
            contents: BTreeMap::new(),
            vm_tables: BTreeMap::new(),
            stream_tables: BTreeMap::new(),
            mirrored: BTreeMap::new(),
        }
    }

    pub fn granules(&self) -> u64 {
        self.gpt_c.granules()
    }

    pub fn gpt(&self, kind: GptKind) -> &GranuleProtectionTable {
        match kind {
            GptKind::Core => &self.gpt_c,
            GptKind::Device => &self.gpt_d,
        }
    }

    pub fn check(&self, req: &AccessRequest) -> Result<GpcVerdict> {
        gpc_check(req, self.gpt(req.gpt_kind()))
    }

    /// Monitor-only. One trace record per call, plus the GPC cache
    /// invalidations the update implies.
    pub fn gpt_set_range(
        &mut self,
        tables: GptSelect,
        range: GranuleRange,
        world: World,
        trace: &mut Trace,
    ) -> Result<()> {
        self.gpt_c.check_range(range)?;
        if tables == GptSelect::Both {
            self.gpt_c.fill(range, world)?;
        }
        self.gpt_d.fill(range, world)?;
        trace.emit(TraceEvent::GptUpdate {
            tables,
            start: range.start,
            count: range.count,
            world,
        });
        if tables == GptSelect::Both {
            trace.emit(TraceEvent::Flush {
                scope: FlushScope::CoreGpc,
            });
        }
        trace.emit(TraceEvent::Flush {
            scope: FlushScope::SmmuGpc,
        });
        Ok(())
    }

    /// Monitor-only: set a scattered granule set, one record per contiguous run.
    pub fn gpt_set_granules(
        &mut self,
        tables: GptSelect,
        granules: &BTreeSet<u64>,
        world: World,
        trace: &mut Trace,
    ) -> Result<()> {
        for range in coalesce(granules) {
            self.gpt_set_range(tables, range, world, trace)?;
        }
        Ok(())
    }

    pub fn vm_table(&self, vm: VmId) -> Option<&Stage2Table> {
        self.vm_tables.get(&vm)
    }

    pub fn vm_table_mut(&mut self, vm: VmId) -> &mut Stage2Table {
        self.vm_tables
            .entry(vm)
            .or_insert_with(|| Stage2Table::new(S2Owner::Vm(vm)))
    }

    pub fn remove_vm_table(&mut self, vm: VmId) -> Option<Stage2Table> {
        self.vm_tables.remove(&vm)
    }

    pub fn vm_tables(&self) -> impl Iterator<Item = (&VmId, &Stage2Table)> {
        self.vm_tables.iter()
    }

    pub fn stream_table(&self, stream: StreamId) -> Option<&Stage2Table> {
        self.stream_tables.get(&stream)
    }

    /// Host-managed stream table (baseline modes, where the hypervisor owns
    /// the SMMU).
    pub fn stream_table_mut(&mut self, stream: StreamId) -> &mut Stage2Table {
        self.stream_tables
            .entry(stream)
            .or_insert_with(|| Stage2Table::new(S2Owner::Stream(stream)))
    }

    pub fn destroy_stream_table(&mut self, stream: StreamId) -> Option<Stage2Table> {
        for set in self.mirrored.values_mut() {
            set.remove(&stream);
        }
        self.mirrored.retain(|_, s| !s.is_empty());
        self.stream_tables.remove(&stream)
    }

    pub fn mirror_stream(&mut self, vm: VmId, stream: StreamId) {
        self.mirrored.entry(vm).or_default().insert(stream);
    }

    pub fn mirrored_streams(&self, vm: VmId) -> impl Iterator<Item = StreamId> + '_ {
        self.mirrored.get(&vm).into_iter().flatten().copied()
    }

    pub fn has_dma_attachment(&self, vm: VmId) -> bool {
        self.mirrored.get(&vm).is_some_and(|s| !s.is_empty())
    }

    /// Device-mirror image of a VM table: its DMA-visible (RAM) entries.
    pub fn mirror_image(&self, vm: VmId) -> BTreeMap<u64, S2Entry> {
        self.vm_tables
            .get(&vm)
            .map(|t| {
                t.entries()
                    .filter(|(_, e)| e.kind == MapKind::Ram)
                    .map(|(g, e)| (g, *e))
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Copy the VM's DMA-visible stage-2 entries into every mirrored stream.
    pub fn smmu_sync(&mut self, vm: VmId, trace: &mut Trace) {
        let streams: Vec<StreamId> = self.mirrored_streams(vm).collect();
        if streams.is_empty() {
            return;
        }
        let image = self.mirror_image(vm);
        for stream in &streams {
            let table = self.stream_table_mut(*stream);
            table.entries = image.clone();
        }
        trace.emit(TraceEvent::SmmuSync {
            vm,
            streams: streams.len() as u32,
            entries: image.len() as u32,
        });
    }

    /// All physical granules currently owned by a VM's stage-2 table.
    pub fn owned_by(&self, vm: VmId) -> BTreeSet<u64> {
        self.vm_tables
            .get(&vm)
            .map(Stage2Table::physical_granules)
            .unwrap_or_default()
    }

    /// Owner of a physical granule among VM tables, if any.
    pub fn owner_of(&self, pa: Granule) -> Option<VmId> {
        self.vm_tables
            .iter()
            .find(|(_, t)| t.entries.values().any(|e| e.pa == pa))
            .map(|(vm, _)| *vm)
    }

    // Backing memory. Granules are materialized lazily and read as zeros.

    pub fn read_bytes(&self, pa: u64, len: usize) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(len);
        let mut addr = pa;
        while out.len() < len {
            let g = addr >> GRANULE_SHIFT;
            if g >= self.granules() {
                return Err(SimError::GranuleOutOfRange(g));
            }
            let off = (addr & (GRANULE_SIZE - 1)) as usize;
            let take = (GRANULE_SIZE as usize - off).min(len - out.len());
            match self.contents.get(&g) {
                Some(buf) => out.extend_from_slice(&buf[off..off + take]),
                None => out.resize(out.len() + take, 0),
            }
            addr += take as u64;
        }
        Ok(out)
    }

    pub fn write_bytes(&mut self, pa: u64, data: &[u8]) -> Result<()> {
        let mut addr = pa;
        let mut rest = data;
        while !rest.is_empty() {
            let g = addr >> GRANULE_SHIFT;
            if g >= self.granules() {
                return Err(SimError::GranuleOutOfRange(g));
            }
            let off = (addr & (GRANULE_SIZE - 1)) as usize;
            let take = (GRANULE_SIZE as usize - off).min(rest.len());
            let buf = self
                .contents
                .entry(g)
                .or_insert_with(|| vec![0u8; GRANULE_SIZE as usize].into_boxed_slice());
            buf[off..off + take].copy_from_slice(&rest[..take]);
            rest = &rest[take..];
            addr += take as u64;
        }
        Ok(())
    }

    pub fn scrub(&mut self, granule: u64) {
        self.contents.remove(&granule);
    }

    // Invariant checks, used after every mutation batch by the harness.

    /// GPTc and GPTd may only differ on granules owned by a VM with a
    /// DMA-protected attachment, and there only as Realm (core) vs Normal
    /// (device).
    pub fn check_divergence(&self) -> Result<(), String> {
        let mut allowed = BTreeSet::new();
        for vm in self.mirrored.keys() {
            allowed.extend(self.owned_by(*vm));
        }
        for g in self.gpt_c.diff(&self.gpt_d) {
            let (c, d) = (self.gpt_c.entries[g as usize], self.gpt_d.entries[g as usize]);
            if !allowed.contains(&g) {
                return Err(format!("granule {g:#x} diverges ({c} vs {d}) without a DMA attachment"));
            }
            if c != World::Realm || d != World::Normal {
                return Err(format!("granule {g:#x} diverges as {c}/{d}, expected realm/normal"));
            }
        }
        Ok(())
    }

    /// No Realm granule is reachable from two VM tables.
    pub fn check_exclusivity(&self) -> Result<(), String> {
        let mut seen: BTreeMap<u64, VmId> = BTreeMap::new();
        for (vm, table) in &self.vm_tables {
            for pa in table.physical_granules() {
                if self.gpt_c.entries.get(pa as usize) != Some(&World::Realm) {
                    continue;
                }
                if let Some(prev) = seen.insert(pa, *vm) {
                    if prev != *vm {
                        return Err(format!("realm granule {pa:#x} mapped by {prev} and {vm}"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Every mirrored stream equals its VM's DMA-visible entries.
    pub fn check_mirror(&self) -> Result<(), String> {
        for (vm, streams) in &self.mirrored {
            let image = self.mirror_image(*vm);
            for s in streams {
                let table = self
                    .stream_tables
                    .get(s)
                    .ok_or_else(|| format!("{s} mirrors {vm} but has no table"))?;
                if table.entries != image {
                    return Err(format!("{s} diverges from {vm}'s stage-2 table"));
                }
            }
        }
        Ok(())
    }

    /// Count of (vm, stream, gpa) triples where the VM and one of its mirrored
    /// streams translate the same gpa to different physical granules.
    pub fn split_view_detections(&self) -> usize {
        let mut n = 0;
        for (vm, streams) in &self.mirrored {
            let Some(vt) = self.vm_tables.get(vm) else { continue };
            for s in streams {
                let Some(st) = self.stream_tables.get(s) else { continue };
                for (g, e) in st.entries() {
                    if let Some(ve) = vt.get(g) {
                        if ve.pa != e.pa {
                            n += 1;
                        }
                    }
                }
            }
        }
        n
    }
}

/// Contiguous runs of a granule set.
pub fn coalesce(granules: &BTreeSet<u64>) -> Vec<GranuleRange> {
    let mut out: Vec<GranuleRange> = Vec::new();
    for &g in granules {
        match out.last_mut() {
            Some(r) if r.end() == g => r.count += 1,
            _ => out.push(GranuleRange::new(g, 1)),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace() -> Trace {
        Trace::default()
    }

    #[test]
    fn normal_core_cannot_read_realm() {
        let mut mem = MemoryIsolation::new(64);
        mem.gpt_set_range(GptSelect::Both, GranuleRange::new(8, 1), World::Realm, &mut trace())
            .unwrap();
        let req = AccessRequest::core(World::Normal, None, 0x8010, AccessKind::Read);
        assert!(matches!(
            mem.check(&req).unwrap(),
            GpcVerdict::Fault(AccessFault::GranuleProtection {
                target: World::Realm,
                ..
            })
        ));
    }

    #[test]
    fn root_reads_everything() {
        let mut mem = MemoryIsolation::new(16);
        let mut t = trace();
        for (i, w) in World::ALL.iter().enumerate() {
            mem.gpt_set_range(GptSelect::Both, GranuleRange::new(i as u64, 1), *w, &mut t)
                .unwrap();
            let req = AccessRequest::core(World::Root, None, (i as u64) << 12, AccessKind::Read);
            assert!(mem.check(&req).unwrap().is_allowed());
        }
    }

    #[test]
    fn device_sees_gptd() {
        let mut mem = MemoryIsolation::new(16);
        let mut t = trace();
        mem.gpt_set_range(GptSelect::Both, GranuleRange::new(4, 2), World::Realm, &mut t)
            .unwrap();
        mem.gpt_set_range(GptSelect::DeviceOnly, GranuleRange::new(4, 2), World::Normal, &mut t)
            .unwrap();
        let dev = AccessRequest::device(StreamId(3), 0x4000, AccessKind::Read);
        assert!(mem.check(&dev).unwrap().is_allowed());
        let core = AccessRequest::core(World::Normal, None, 0x4000, AccessKind::Read);
        assert!(!mem.check(&core).unwrap().is_allowed());
        assert_eq!(mem.gpt(GptKind::Core).get(4).unwrap(), World::Realm);
    }

    #[test]
    fn unmapped_granule_is_model_error() {
        let mem = MemoryIsolation::new(4);
        let req = AccessRequest::core(World::Root, None, 0x10_0000, AccessKind::Read);
        assert!(matches!(mem.check(&req), Err(SimError::GranuleOutOfRange(_))));
    }

    #[test]
    fn set_range_outside_memory_rejected() {
        let mut mem = MemoryIsolation::new(4);
        let err = mem.gpt_set_range(GptSelect::Both, GranuleRange::new(3, 2), World::Realm, &mut trace());
        assert!(err.is_err());
        assert_eq!(mem.gpt(GptKind::Core).get(3).unwrap(), World::Normal);
    }

    #[test]
    fn one_event_per_range_update() {
        let mut mem = MemoryIsolation::new(64);
        let mut t = trace();
        mem.gpt_set_range(GptSelect::DeviceOnly, GranuleRange::new(0, 32), World::Normal, &mut t)
            .unwrap();
        let updates = t
            .records()
            .iter()
            .filter(|r| matches!(r.event, TraceEvent::GptUpdate { .. }))
            .count();
        assert_eq!(updates, 1);
        // device-only updates never flush the core GPC
        assert!(!t.records().iter().any(|r| matches!(
            r.event,
            TraceEvent::Flush {
                scope: FlushScope::CoreGpc
            }
        )));
    }

    #[test]
    fn identity_translation() {
        let mut t = Stage2Table::new(S2Owner::Vm(VmId(0)));
        t.map(
            7,
            S2Entry {
                pa: Granule(7),
                perms: Perms::RO,
                kind: MapKind::Ram,
            },
        );
        assert_eq!(s2_translate(&t, 0x7abc, AccessKind::Read), Ok(0x7abc));
        assert!(s2_translate(&t, 0x7abc, AccessKind::Write).is_err());
        assert!(s2_translate(&t, 0x8000, AccessKind::Read).is_err());
    }

    #[test]
    fn no_streams_without_dma() {
        let mut mem = MemoryIsolation::new(16);
        mem.vm_table_mut(VmId(1)).map(
            0,
            S2Entry {
                pa: Granule(3),
                perms: Perms::RW,
                kind: MapKind::Ram,
            },
        );
        mem.smmu_sync(VmId(1), &mut trace());
        assert!(mem.stream_tables.is_empty());
        assert!(!mem.has_dma_attachment(VmId(1)));
    }

    #[test]
    fn backing_memory_crosses_granules() {
        let mut mem = MemoryIsolation::new(4);
        let data: Vec<u8> = (0..6000u32).map(|i| i as u8).collect();
        mem.write_bytes(0x0ff0, &data).unwrap();
        assert_eq!(mem.read_bytes(0x0ff0, data.len()).unwrap(), data);
        mem.scrub(1);
        assert!(mem.read_bytes(0x1000, 16).unwrap().iter().all(|b| *b == 0));
    }

    #[test]
    fn coalesce_runs() {
        let set: BTreeSet<u64> = [1, 2, 3, 7, 9, 10].into_iter().collect();
        assert_eq!(
            coalesce(&set),
            vec![
                GranuleRange::new(1, 3),
                GranuleRange::new(7, 1),
                GranuleRange::new(9, 2)
            ]
        );
    }
}
