// SPDX-License-Identifier: Apache-2.0

//! Platform device tree and behavioral device models.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::hash::Hasher;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::gic::Trigger;
use crate::harness::trace::{Trace, TraceEvent};
use crate::mem::World;
use crate::mem::{gpc_check, s2_translate, AccessFault, AccessRequest, GpcVerdict, GptKind, MemoryIsolation, S2Owner};
use crate::types::{AccessKind, DeviceId, GranuleRange, InterruptId, StreamId, GRANULE_SIZE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceClass {
    MmioOnly,
    MmioOnlyPasFilter,
    LegacyDma,
}

/// Register behavior of a device model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceKind {
    Keyboard,
    Mouse,
    DmaEngine,
    Led,
    Button,
    Gps,
    Sensor,
    Wcnss,
    Mali,
}

/// Register offsets.
pub mod regs {
    /// FIFO devices: bit 0 set while bytes are queued.
    pub const FIFO_STATUS: u64 = 0x00;
    /// FIFO devices: read pops one byte.
    pub const FIFO_DATA: u64 = 0x08;

    pub const DMA_CMD: u64 = 0x00;
    pub const DMA_ADDR: u64 = 0x08;
    pub const DMA_LEN: u64 = 0x10;
    /// Digest of the last device-read transfer.
    pub const DMA_DIGEST: u64 = 0x18;
    pub const DMA_STATUS: u64 = 0x20;
    /// Selects the fill pattern of device-write transfers.
    pub const DMA_PATTERN: u64 = 0x28;

    pub const DMA_CMD_READ: u64 = 1;
    pub const DMA_CMD_WRITE: u64 = 2;

    /// Mali job status, clear-on-read.
    pub const MALI_STATUS: u64 = 0x00;
    pub const WCNSS_STATE: u64 = 0x00;
    pub const VALUE: u64 = 0x00;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IrqLine {
    pub id: InterruptId,
    pub trigger: Trigger,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceDescriptor {
    pub id: DeviceId,
    pub name: String,
    pub kind: DeviceKind,
    pub class: DeviceClass,
    pub mmio: Vec<GranuleRange>,
    #[serde(default)]
    pub dma: bool,
    #[serde(default)]
    pub interrupts: Vec<IrqLine>,
}

impl DeviceDescriptor {
    pub fn stream(&self) -> StreamId {
        StreamId::from(self.id)
    }

    pub fn mmio_bytes(&self) -> u64 {
        self.mmio.iter().map(GranuleRange::len_bytes).sum()
    }

    pub fn mmio_granules(&self) -> impl Iterator<Item = u64> + '_ {
        self.mmio.iter().flat_map(GranuleRange::iter)
    }

    /// Physical address of a register offset, walking the ranges in order.
    pub fn mmio_pa(&self, offset: u64) -> Option<u64> {
        let mut rest = offset;
        for r in &self.mmio {
            if rest < r.len_bytes() {
                return Some(r.base_addr() + rest);
            }
            rest -= r.len_bytes();
        }
        None
    }

    pub fn mmio_offset(&self, pa: u64) -> Option<u64> {
        let mut skipped = 0;
        for r in &self.mmio {
            if r.contains_addr(pa) {
                return Some(skipped + pa - r.base_addr());
            }
            skipped += r.len_bytes();
        }
        None
    }

    pub fn owns_irq(&self, id: InterruptId) -> bool {
        self.interrupts.iter().any(|l| l.id == id)
    }

    pub fn trigger_of(&self, id: InterruptId) -> Option<Trigger> {
        self.interrupts.iter().find(|l| l.id == id).map(|l| l.trigger)
    }
}

/// Immutable after boot; the RMM holds its own copy.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlatformDeviceTree {
    devices: BTreeMap<DeviceId, DeviceDescriptor>,
    measurement: u64,
}

impl PlatformDeviceTree {
    pub fn new(devices: Vec<DeviceDescriptor>) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut irqs = BTreeSet::new();
        let mut ranges: Vec<(GranuleRange, DeviceId)> = Vec::new();
        for d in devices {
            if d.mmio.is_empty() || d.mmio.iter().any(|r| r.count == 0) {
                return Err(SimError::config(
                    format!("devices.{}.mmio", d.id),
                    "needs at least one non-empty range",
                ));
            }
            for r in &d.mmio {
                if let Some((_, other)) = ranges.iter().find(|(o, _)| o.overlaps(r)) {
                    return Err(SimError::config(
                        format!("devices.{}.mmio", d.id),
                        format!("range {r} overlaps {other}"),
                    ));
                }
                ranges.push((*r, d.id));
            }
            for l in &d.interrupts {
                if !irqs.insert(l.id) {
                    return Err(SimError::config(
                        format!("devices.{}.interrupts", d.id),
                        format!("{} already belongs to another device", l.id),
                    ));
                }
            }
            if d.dma && d.class != DeviceClass::LegacyDma {
                return Err(SimError::config(
                    format!("devices.{}.dma", d.id),
                    "only legacy_dma devices may be DMA capable",
                ));
            }
            let id = d.id;
            if map.insert(id, d).is_some() {
                return Err(SimError::config("devices", format!("{id} declared twice")));
            }
        }
        let mut tree = PlatformDeviceTree {
            devices: map,
            measurement: 0,
        };
        tree.measurement = tree.measure();
        Ok(tree)
    }

    pub fn get(&self, id: DeviceId) -> Result<&DeviceDescriptor> {
        self.devices.get(&id).ok_or(SimError::UnknownDevice(id))
    }

    pub fn devices(&self) -> impl Iterator<Item = &DeviceDescriptor> {
        self.devices.values()
    }

    pub fn measurement(&self) -> u64 {
        self.measurement
    }

    /// One-to-one MMIO resolution.
    pub fn device_at(&self, pa: u64) -> Option<(&DeviceDescriptor, u64)> {
        self.devices
            .values()
            .find_map(|d| d.mmio_offset(pa).map(|off| (d, off)))
    }

    pub fn owner_of_irq(&self, id: InterruptId) -> Option<&DeviceDescriptor> {
        self.devices.values().find(|d| d.owns_irq(id))
    }

    fn measure(&self) -> u64 {
        let mut h = FnvHasher::default();
        for d in self.devices.values() {
            h.write_u64(measure_descriptor(d, &DeviceState::default()).to_le());
        }
        h.finish()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Filter {
    Full,
    ReadOnly,
    Zero,
}

/// Per-world register view of a PAS-filter device.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PasFilterView {
    views: BTreeMap<World, Filter>,
}

impl PasFilterView {
    /// Only the realm (and root) see the real device.
    pub fn realm_only() -> Self {
        PasFilterView {
            views: BTreeMap::from([
                (World::Normal, Filter::Zero),
                (World::Secure, Filter::Zero),
                (World::Realm, Filter::Full),
            ]),
        }
    }

    pub fn with(mut self, world: World, filter: Filter) -> Self {
        self.views.insert(world, filter);
        self
    }

    pub fn filter(&self, world: World) -> Filter {
        if world == World::Root {
            return Filter::Full;
        }
        self.views.get(&world).copied().unwrap_or(Filter::Zero)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DeviceState {
    /// Only nonzero registers are stored.
    registers: BTreeMap<u64, u64>,
    fifo: VecDeque<u8>,
    lines: BTreeSet<InterruptId>,
    reset_count: u64,
}

impl DeviceState {
    pub fn register(&self, offset: u64) -> u64 {
        self.registers.get(&offset).copied().unwrap_or(0)
    }

    pub fn set_register(&mut self, offset: u64, value: u64) {
        if value == 0 {
            self.registers.remove(&offset);
        } else {
            self.registers.insert(offset, value);
        }
    }

    pub fn registers(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.registers.iter().map(|(o, v)| (*o, *v))
    }

    pub fn fifo_len(&self) -> usize {
        self.fifo.len()
    }

    pub fn line_high(&self, id: InterruptId) -> bool {
        self.lines.contains(&id)
    }

    pub fn reset_count(&self) -> u64 {
        self.reset_count
    }

    pub fn is_scrubbed(&self) -> bool {
        self.registers.is_empty() && self.fifo.is_empty() && self.lines.is_empty()
    }
}

/// Work an MMIO write hands back to the engine.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DmaCommand {
    pub device: DeviceId,
    pub kind: AccessKind,
    pub gpa: u64,
    pub len: u64,
    pub pattern: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MmioOutcome {
    pub value: u64,
    /// Line to drop after this access (FIFO drained).
    pub deassert: Option<InterruptId>,
    pub dma: Option<DmaCommand>,
}

#[derive(Clone, Debug, Default)]
pub struct DeviceBank {
    states: BTreeMap<DeviceId, DeviceState>,
    filters: BTreeMap<DeviceId, PasFilterView>,
}

impl DeviceBank {
    pub fn new(tree: &PlatformDeviceTree) -> Self {
        let mut bank = DeviceBank::default();
        for d in tree.devices() {
            bank.states.insert(d.id, DeviceState::default());
            if d.class == DeviceClass::MmioOnlyPasFilter {
                bank.filters.insert(d.id, PasFilterView::realm_only());
            }
        }
        bank
    }

    pub fn state(&self, id: DeviceId) -> Result<&DeviceState> {
        self.states.get(&id).ok_or(SimError::UnknownDevice(id))
    }

    pub fn state_mut(&mut self, id: DeviceId) -> Result<&mut DeviceState> {
        self.states.get_mut(&id).ok_or(SimError::UnknownDevice(id))
    }

    pub fn set_filter(&mut self, id: DeviceId, view: PasFilterView) {
        self.filters.insert(id, view);
    }

    /// Register access. PAS-filter devices apply the per-world view here
    /// instead of a granule protection check.
    pub fn mmio_access(
        &mut self,
        dev: &DeviceDescriptor,
        offset: u64,
        kind: AccessKind,
        world: World,
        value: u64,
        trace: &mut Trace,
    ) -> Result<MmioOutcome> {
        if offset >= dev.mmio_bytes() {
            return Err(SimError::MmioOffset { device: dev.id, offset });
        }
        let filter = match dev.class {
            DeviceClass::MmioOnlyPasFilter => self.filters.get(&dev.id).map_or(Filter::Full, |v| v.filter(world)),
            _ => Filter::Full,
        };
        let state = self.states.get_mut(&dev.id).ok_or(SimError::UnknownDevice(dev.id))?;
        let mut out = MmioOutcome::default();
        match (kind, filter) {
            (AccessKind::Read, Filter::Zero) => {}
            (AccessKind::Write, Filter::Zero | Filter::ReadOnly) => {}
            (AccessKind::Read, _) => out = read_register(dev, state, offset),
            (AccessKind::Write, Filter::Full) => out = write_register(dev, state, offset, value),
        }
        trace.emit(TraceEvent::Mmio {
            device: dev.id,
            offset,
            access: kind,
            world,
            value: if kind == AccessKind::Read { out.value } else { value },
        });
        Ok(out)
    }

    /// Queue an input byte; true when the device raises its line.
    pub fn push_fifo(&mut self, dev: &DeviceDescriptor, byte: u8) -> Result<Option<InterruptId>> {
        let state = self.state_mut(dev.id)?;
        state.fifo.push_back(byte);
        state.set_register(regs::FIFO_STATUS, 1);
        let line = dev.interrupts.first().map(|l| l.id);
        if let Some(id) = line {
            state.lines.insert(id);
        }
        Ok(line)
    }

    /// Device-side register update (job done, firmware ready, button press).
    pub fn device_set(&mut self, id: DeviceId, offset: u64, value: u64) -> Result<()> {
        self.state_mut(id)?.set_register(offset, value);
        Ok(())
    }

    pub fn raise(&mut self, dev: &DeviceDescriptor, irq: InterruptId) -> Result<()> {
        if !dev.owns_irq(irq) {
            return Err(SimError::config(
                format!("devices.{}", dev.id),
                format!("cannot assert {irq}, which it does not own"),
            ));
        }
        if dev.trigger_of(irq) == Some(Trigger::Level) {
            self.state_mut(dev.id)?.lines.insert(irq);
        }
        Ok(())
    }

    pub fn soft_reset(&mut self, id: DeviceId, trace: &mut Trace) -> Result<()> {
        let state = self.state_mut(id)?;
        let count = state.reset_count + 1;
        *state = DeviceState {
            reset_count: count,
            ..DeviceState::default()
        };
        trace.emit(TraceEvent::Reset { device: id });
        Ok(())
    }
}

fn read_register(dev: &DeviceDescriptor, state: &mut DeviceState, offset: u64) -> MmioOutcome {
    let mut out = MmioOutcome::default();
    match (dev.kind, offset) {
        (DeviceKind::Keyboard | DeviceKind::Mouse, regs::FIFO_DATA) => {
            out.value = state.fifo.pop_front().map_or(0, u64::from);
            if state.fifo.is_empty() {
                state.set_register(regs::FIFO_STATUS, 0);
                if let Some(l) = dev.interrupts.first() {
                    if state.lines.remove(&l.id) {
                        out.deassert = Some(l.id);
                    }
                }
            }
        }
        (DeviceKind::Mali, regs::MALI_STATUS) => {
            out.value = state.register(offset);
            state.set_register(offset, 0);
        }
        _ => out.value = state.register(offset),
    }
    out
}

fn write_register(dev: &DeviceDescriptor, state: &mut DeviceState, offset: u64, value: u64) -> MmioOutcome {
    let mut out = MmioOutcome {
        value,
        ..MmioOutcome::default()
    };
    match (dev.kind, offset) {
        (DeviceKind::DmaEngine, regs::DMA_CMD) => {
            let kind = match value {
                regs::DMA_CMD_READ => Some(AccessKind::Read),
                regs::DMA_CMD_WRITE => Some(AccessKind::Write),
                _ => None,
            };
            if let Some(kind) = kind {
                state.set_register(regs::DMA_STATUS, 0);
                out.dma = Some(DmaCommand {
                    device: dev.id,
                    kind,
                    gpa: state.register(regs::DMA_ADDR),
                    len: state.register(regs::DMA_LEN),
                    pattern: state.register(regs::DMA_PATTERN),
                });
            }
        }
        (DeviceKind::Keyboard | DeviceKind::Mouse, regs::FIFO_DATA | regs::FIFO_STATUS) => {}
        _ => state.set_register(offset, value),
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DmaOp<'a> {
    /// Device reads `len` bytes of memory.
    Read { len: u64 },
    /// Device writes into memory.
    Write(&'a [u8]),
}

impl DmaOp<'_> {
    fn kind(&self) -> AccessKind {
        match self {
            DmaOp::Read { .. } => AccessKind::Read,
            DmaOp::Write(_) => AccessKind::Write,
        }
    }

    fn len(&self) -> u64 {
        match self {
            DmaOp::Read { len } => *len,
            DmaOp::Write(d) => d.len() as u64,
        }
    }
}

/// Device-originated transfer: stream stage-2 translation, then the device
/// GPT, for every granule touched. Nothing moves unless all granules pass.
pub fn dma_issue(
    mem: &mut MemoryIsolation,
    dev: &DeviceDescriptor,
    gpa: u64,
    op: DmaOp<'_>,
    trace: &mut Trace,
) -> Result<Result<Vec<u8>, AccessFault>> {
    if !dev.dma {
        return Err(SimError::NotDmaCapable { device: dev.id });
    }
    let kind = op.kind();
    let len = op.len();
    let stream = dev.stream();
    let res = translate_span(mem, stream, gpa, len, kind);
    let pa_chunks = match res? {
        Ok(chunks) => chunks,
        Err(fault) => {
            trace.emit(TraceEvent::Fault { fault });
            trace.emit(TraceEvent::Dma {
                device: dev.id,
                access: kind,
                gpa,
                bytes: len,
                ok: false,
            });
            return Ok(Err(fault));
        }
    };
    let mut data = Vec::new();
    let mut written = 0usize;
    for (pa, n) in pa_chunks {
        match op {
            DmaOp::Read { .. } => data.extend(mem.read_bytes(pa, n as usize)?),
            DmaOp::Write(src) => {
                mem.write_bytes(pa, &src[written..written + n as usize])?;
                written += n as usize;
            }
        }
    }
    trace.emit(TraceEvent::Dma {
        device: dev.id,
        access: kind,
        gpa,
        bytes: len,
        ok: true,
    });
    Ok(Ok(data))
}

fn translate_span(
    mem: &MemoryIsolation,
    stream: StreamId,
    gpa: u64,
    len: u64,
    kind: AccessKind,
) -> Result<Result<Vec<(u64, u64)>, AccessFault>> {
    let Some(table) = mem.stream_table(stream) else {
        return Ok(Err(AccessFault::Translation {
            owner: S2Owner::Stream(stream),
            gpa,
            kind,
        }));
    };
    let mut chunks = Vec::new();
    let mut addr = gpa;
    let end = gpa + len;
    while addr < end {
        let take = (GRANULE_SIZE - (addr & (GRANULE_SIZE - 1))).min(end - addr);
        let pa = match s2_translate(table, addr, kind) {
            Ok(pa) => pa,
            Err(f) => return Ok(Err(f)),
        };
        let req = AccessRequest::device(stream, pa, kind);
        if let GpcVerdict::Fault(f) = gpc_check(&req, mem.gpt(GptKind::Device))? {
            return Ok(Err(f));
        }
        chunks.push((pa, take));
        addr += take;
    }
    Ok(Ok(chunks))
}

/// Canonical serialization: id, sorted ranges, sorted nonzero registers, all
/// little-endian, folded with FNV-1a-64.
pub fn measure_descriptor(dev: &DeviceDescriptor, state: &DeviceState) -> u64 {
    let mut h = FnvHasher::default();
    h.write(&dev.id.0.to_le_bytes());
    let mut ranges = dev.mmio.clone();
    ranges.sort();
    for r in ranges {
        h.write(&r.start.to_le_bytes());
        h.write(&r.count.to_le_bytes());
    }
    for (off, val) in state.registers() {
        h.write(&off.to_le_bytes());
        h.write(&val.to_le_bytes());
    }
    h.finish()
}

/// FNV-1a-64 of a byte buffer (DMA digests).
pub fn digest(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Deterministic fill pattern for device-write transfers.
pub fn dma_pattern(pattern: u64, len: u64) -> Vec<u8> {
    let mut x = pattern ^ 0x9e37_79b9_7f4a_7c15;
    (0..len)
        .map(|_| {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            x as u8
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mem::{GptSelect, MapKind, Perms, S2Entry};
    use crate::types::{Granule, VmId};

    fn kb() -> DeviceDescriptor {
        DeviceDescriptor {
            id: DeviceId(1),
            name: "kbd".into(),
            kind: DeviceKind::Keyboard,
            class: DeviceClass::MmioOnly,
            mmio: vec![GranuleRange::new(32, 1)],
            dma: false,
            interrupts: vec![IrqLine {
                id: InterruptId(44),
                trigger: Trigger::Level,
            }],
        }
    }

    fn engine() -> DeviceDescriptor {
        DeviceDescriptor {
            id: DeviceId(3),
            name: "dma".into(),
            kind: DeviceKind::DmaEngine,
            class: DeviceClass::LegacyDma,
            mmio: vec![GranuleRange::new(34, 1)],
            dma: true,
            interrupts: vec![IrqLine {
                id: InterruptId(46),
                trigger: Trigger::Edge,
            }],
        }
    }

    fn gps() -> DeviceDescriptor {
        DeviceDescriptor {
            id: DeviceId(6),
            name: "gps".into(),
            kind: DeviceKind::Gps,
            class: DeviceClass::MmioOnlyPasFilter,
            mmio: vec![GranuleRange::new(37, 1)],
            dma: false,
            interrupts: vec![],
        }
    }

    #[test]
    fn tree_rejects_overlap_and_shared_irq() {
        let mut b = engine();
        b.mmio = vec![GranuleRange::new(32, 2)];
        assert!(PlatformDeviceTree::new(vec![kb(), b]).is_err());
        let mut c = engine();
        c.interrupts[0].id = InterruptId(44);
        assert!(PlatformDeviceTree::new(vec![kb(), c]).is_err());
        assert!(PlatformDeviceTree::new(vec![kb(), engine()]).is_ok());
    }

    #[test]
    fn mmio_resolution_is_one_to_one() {
        let tree = PlatformDeviceTree::new(vec![kb(), engine(), gps()]).unwrap();
        for g in 30..40u64 {
            let hits = tree.devices().filter(|d| d.mmio_offset(g << 12).is_some()).count();
            assert!(hits <= 1);
        }
        assert_eq!(tree.device_at(0x22008).map(|(d, o)| (d.id, o)), Some((DeviceId(3), 8)));
    }

    #[test]
    fn keyboard_fifo_pop_deasserts() {
        let tree = PlatformDeviceTree::new(vec![kb()]).unwrap();
        let mut bank = DeviceBank::new(&tree);
        let d = tree.get(DeviceId(1)).unwrap();
        let mut t = Trace::default();
        bank.push_fifo(d, b'a').unwrap();
        let out = bank
            .mmio_access(d, regs::FIFO_DATA, AccessKind::Read, World::Realm, 0, &mut t)
            .unwrap();
        assert_eq!(out.value, u64::from(b'a'));
        assert_eq!(out.deassert, Some(InterruptId(44)));
    }

    #[test]
    fn pas_filter_views() {
        let tree = PlatformDeviceTree::new(vec![gps()]).unwrap();
        let mut bank = DeviceBank::new(&tree);
        let d = tree.get(DeviceId(6)).unwrap();
        let mut t = Trace::default();
        bank.device_set(d.id, regs::VALUE, 0x1234).unwrap();
        let n = bank
            .mmio_access(d, 0, AccessKind::Read, World::Normal, 0, &mut t)
            .unwrap();
        assert_eq!(n.value, 0);
        let r = bank
            .mmio_access(d, 0, AccessKind::Read, World::Realm, 0, &mut t)
            .unwrap();
        assert_eq!(r.value, 0x1234);
        bank.mmio_access(d, 0, AccessKind::Write, World::Normal, 7, &mut t)
            .unwrap();
        assert_eq!(bank.state(d.id).unwrap().register(0), 0x1234);
        bank.set_filter(d.id, PasFilterView::realm_only().with(World::Normal, Filter::ReadOnly));
        let n = bank
            .mmio_access(d, 0, AccessKind::Read, World::Normal, 0, &mut t)
            .unwrap();
        assert_eq!(n.value, 0x1234);
        let root = bank
            .mmio_access(d, 0, AccessKind::Write, World::Root, 9, &mut t)
            .unwrap();
        assert_eq!(root.value, 9);
    }

    #[test]
    fn out_of_range_offset_is_model_error() {
        let tree = PlatformDeviceTree::new(vec![kb()]).unwrap();
        let mut bank = DeviceBank::new(&tree);
        let d = tree.get(DeviceId(1)).unwrap();
        assert!(bank
            .mmio_access(d, 0x1000, AccessKind::Read, World::Realm, 0, &mut Trace::default())
            .is_err());
    }

    #[test]
    fn reset_scrubs_and_is_idempotent() {
        let tree = PlatformDeviceTree::new(vec![kb()]).unwrap();
        let mut bank = DeviceBank::new(&tree);
        let d = tree.get(DeviceId(1)).unwrap();
        let mut t = Trace::default();
        bank.push_fifo(d, 1).unwrap();
        bank.device_set(d.id, 0x40, 5).unwrap();
        bank.soft_reset(d.id, &mut t).unwrap();
        let once = measure_descriptor(d, bank.state(d.id).unwrap());
        bank.soft_reset(d.id, &mut t).unwrap();
        let s = bank.state(d.id).unwrap();
        assert!(s.is_scrubbed());
        assert_eq!(s.reset_count(), 2);
        assert_eq!(measure_descriptor(d, s), once);
    }

    #[test]
    fn mali_status_clear_on_read() {
        let mali = DeviceDescriptor {
            id: DeviceId(9),
            name: "mali".into(),
            kind: DeviceKind::Mali,
            class: DeviceClass::MmioOnly,
            mmio: vec![GranuleRange::new(40, 1)],
            dma: false,
            interrupts: vec![],
        };
        let tree = PlatformDeviceTree::new(vec![mali]).unwrap();
        let mut bank = DeviceBank::new(&tree);
        let d = tree.get(DeviceId(9)).unwrap();
        let mut t = Trace::default();
        bank.device_set(d.id, regs::MALI_STATUS, 1).unwrap();
        let read = |bank: &mut DeviceBank, t: &mut Trace| {
            bank.mmio_access(d, regs::MALI_STATUS, AccessKind::Read, World::Realm, 0, t)
                .unwrap()
                .value
        };
        assert_eq!(read(&mut bank, &mut t), 1);
        assert_eq!(read(&mut bank, &mut t), 0);
    }

    #[test]
    fn measure_empty_registers_covers_id_and_ranges() {
        let d = kb();
        let mut h = FnvHasher::default();
        h.write(&1u32.to_le_bytes());
        h.write(&32u64.to_le_bytes());
        h.write(&1u64.to_le_bytes());
        assert_eq!(measure_descriptor(&d, &DeviceState::default()), h.finish());
    }

    #[test]
    fn single_register_perturbation_changes_digest() {
        let d = kb();
        let base = measure_descriptor(&d, &DeviceState::default());
        let mut seen = BTreeSet::from([base]);
        for off in (0..64).step_by(8) {
            for v in [1u64, 2, 0xff, u64::MAX] {
                let mut s = DeviceState::default();
                s.set_register(off, v);
                assert!(seen.insert(measure_descriptor(&d, &s)), "collision at {off}/{v}");
            }
        }
    }

    #[test]
    fn dma_paths() {
        let tree = PlatformDeviceTree::new(vec![engine()]).unwrap();
        let d = tree.get(DeviceId(3)).unwrap();
        let mut mem = MemoryIsolation::new(128);
        let mut t = Trace::default();
        // no stream table yet
        assert!(matches!(
            dma_issue(&mut mem, d, 0x40000, DmaOp::Read { len: 8 }, &mut t).unwrap(),
            Err(AccessFault::Translation { .. })
        ));
        mem.stream_table_mut(d.stream()).map(
            0x40,
            S2Entry {
                pa: Granule(0x50),
                perms: Perms::RW,
                kind: MapKind::Ram,
            },
        );
        dma_issue(&mut mem, d, 0x40010, DmaOp::Write(b"hello"), &mut t)
            .unwrap()
            .unwrap();
        assert_eq!(mem.read_bytes(0x50010, 5).unwrap(), b"hello");
        mem.gpt_set_range(GptSelect::Both, GranuleRange::new(0x50, 1), World::Root, &mut t)
            .unwrap();
        assert!(matches!(
            dma_issue(&mut mem, d, 0x40010, DmaOp::Read { len: 5 }, &mut t).unwrap(),
            Err(AccessFault::GranuleProtection { .. })
        ));
        let _ = VmId(0);
    }

    #[test]
    fn pattern_is_deterministic() {
        assert_eq!(dma_pattern(3, 64), dma_pattern(3, 64));
        assert_ne!(dma_pattern(3, 64), dma_pattern(4, 64));
    }
}
