// SPDX-License-Identifier: Apache-2.0

//! Physical interrupt controller and per-VM virtual list registers.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Result, SimError};
use crate::harness::trace::{Target, Trace, TraceEvent};
use crate::mem::{AccessFault, AccessRequest, GpcVerdict, MemoryIsolation};
use crate::types::{AccessKind, DeviceId, GranuleRange, InterruptId, VmId};

/// SGI used by the monitor to notify the hypervisor of logged interrupts.
pub const SGI_NOTIFY: InterruptId = InterruptId(7);
pub const SGI_NOTIFY_PRIORITY: u8 = 0x80;

/// Bytes of config space per interrupt id.
pub const CONFIG_STRIDE: u64 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    Group0,
    Group1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trigger {
    Level,
    Edge,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterruptConfig {
    pub id: InterruptId,
    pub group: Group,
    pub enabled: bool,
    /// Lower value is more urgent.
    pub priority: u8,
    pub trigger: Trigger,
    pub route: u32,
}

impl InterruptConfig {
    pub fn new(id: InterruptId, trigger: Trigger, priority: u8) -> Self {
        InterruptConfig {
            id,
            group: Group::Group1,
            enabled: false,
            priority,
            trigger,
            route: 0,
        }
    }
}

/// Word-sized fields of one interrupt's config block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfigField {
    Enable,
    Priority,
    Group,
    Route,
}

impl ConfigField {
    const ALL: [ConfigField; 4] = [
        ConfigField::Enable,
        ConfigField::Priority,
        ConfigField::Group,
        ConfigField::Route,
    ];

    fn index(self) -> u64 {
        self as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum VgicError {
    #[error("{got} ids exceed {n} list registers")]
    TooMany { got: usize, n: usize },
    #[error("{0} appears twice in one batch")]
    Duplicate(InterruptId),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vgic {
    slots: Vec<Option<InterruptId>>,
}

impl Vgic {
    pub fn new(n: usize) -> Self {
        Vgic { slots: vec![None; n] }
    }

    pub fn n(&self) -> usize {
        self.slots.len()
    }

    pub fn loaded(&self) -> impl Iterator<Item = InterruptId> + '_ {
        self.slots.iter().flatten().copied()
    }
}

#[derive(Clone, Debug)]
pub struct Gic {
    configs: BTreeMap<InterruptId, InterruptConfig>,
    pending: BTreeSet<InterruptId>,
    active: BTreeSet<InterruptId>,
    line: BTreeSet<InterruptId>,
    /// Edge pulses that arrived while disabled.
    held: BTreeSet<InterruptId>,
    config_space: GranuleRange,
    vgics: BTreeMap<VmId, Vgic>,
    n: usize,
}

impl Gic {
    pub fn new(config_space: GranuleRange, n: usize) -> Self {
        Gic {
            configs: BTreeMap::new(),
            pending: BTreeSet::new(),
            active: BTreeSet::new(),
            line: BTreeSet::new(),
            held: BTreeSet::new(),
            config_space,
            vgics: BTreeMap::new(),
            n,
        }
    }

    pub fn list_registers(&self) -> usize {
        self.n
    }

    pub fn config_space(&self) -> GranuleRange {
        self.config_space
    }

    pub fn register(&mut self, cfg: InterruptConfig) -> Result<()> {
        let max = self.config_space.len_bytes() / CONFIG_STRIDE;
        if u64::from(cfg.id.0) >= max {
            return Err(SimError::config(
                "interrupts",
                format!("{} does not fit the GIC config space", cfg.id),
            ));
        }
        if self.configs.insert(cfg.id, cfg).is_some() {
            return Err(SimError::config("interrupts", format!("{} declared twice", cfg.id)));
        }
        Ok(())
    }

    pub fn config(&self, id: InterruptId) -> Result<&InterruptConfig> {
        self.configs.get(&id).ok_or(SimError::UnknownInterrupt(id))
    }

    fn config_mut(&mut self, id: InterruptId) -> Result<&mut InterruptConfig> {
        self.configs.get_mut(&id).ok_or(SimError::UnknownInterrupt(id))
    }

    pub fn is_pending(&self, id: InterruptId) -> bool {
        self.pending.contains(&id)
    }

    pub fn is_active(&self, id: InterruptId) -> bool {
        self.active.contains(&id)
    }

    pub fn line_level(&self, id: InterruptId) -> bool {
        self.line.contains(&id)
    }

    pub fn assert_line(&mut self, id: InterruptId, device: Option<DeviceId>, trace: &mut Trace) -> Result<()> {
        let cfg = *self.config(id)?;
        trace.emit(TraceEvent::Assert { irq: id, device });
        match cfg.trigger {
            Trigger::Level => {
                self.line.insert(id);
            }
            Trigger::Edge if !cfg.enabled => {
                self.held.insert(id);
            }
            Trigger::Edge => {}
        }
        if cfg.enabled {
            self.pending.insert(id);
        }
        Ok(())
    }

    /// Drops the line. A latched pending instance stays until delivered.
    pub fn deassert_line(&mut self, id: InterruptId, trace: &mut Trace) -> Result<()> {
        self.config(id)?;
        if self.line.remove(&id) {
            trace.emit(TraceEvent::Deassert { irq: id });
        }
        Ok(())
    }

    /// Highest-priority deliverable interrupt.
    pub fn next_deliverable(&self) -> Option<InterruptId> {
        self.pending
            .iter()
            .filter(|id| !self.active.contains(id))
            .filter_map(|id| self.configs.get(id))
            .filter(|c| c.enabled)
            .min_by_key(|c| (c.priority, c.id))
            .map(|c| c.id)
    }

    pub fn deliver(&mut self, id: InterruptId, trace: &mut Trace) -> Result<Target> {
        let cfg = *self.config(id)?;
        self.pending.remove(&id);
        self.active.insert(id);
        let target = match cfg.group {
            Group::Group0 => Target::Monitor,
            Group::Group1 => Target::Hypervisor,
        };
        trace.emit(TraceEvent::Deliver { irq: id, target });
        Ok(target)
    }

    /// End of handling for the oldest instance. A Level interrupt whose line
    /// is still high pends again at once.
    pub fn acknowledge(&mut self, id: InterruptId, trace: &mut Trace) -> Result<bool> {
        let cfg = *self.config(id)?;
        if !self.active.remove(&id) && !self.pending.remove(&id) {
            trace.emit(TraceEvent::AckIgnored { irq: id });
            return Ok(false);
        }
        let refire = cfg.trigger == Trigger::Level && cfg.enabled && self.line.contains(&id);
        if refire {
            self.pending.insert(id);
        }
        trace.emit(TraceEvent::Ack { irq: id, refire });
        Ok(refire)
    }

    pub fn set_group(&mut self, id: InterruptId, group: Group) -> Result<()> {
        self.config_mut(id)?.group = group;
        Ok(())
    }

    pub fn set_priority(&mut self, id: InterruptId, priority: u8) -> Result<()> {
        self.config_mut(id)?.priority = priority;
        Ok(())
    }

    pub fn set_route(&mut self, id: InterruptId, route: u32) -> Result<()> {
        self.config_mut(id)?.route = route;
        Ok(())
    }

    pub fn set_enabled(&mut self, id: InterruptId, enabled: bool) -> Result<()> {
        let cfg = self.config_mut(id)?;
        cfg.enabled = enabled;
        let level = cfg.trigger == Trigger::Level;
        if enabled && ((level && self.line.contains(&id)) || self.held.remove(&id)) {
            self.pending.insert(id);
        }
        Ok(())
    }

    /// Drop all pending/active state for an id (device reset).
    pub fn clear(&mut self, id: InterruptId) {
        self.pending.remove(&id);
        self.active.remove(&id);
        self.line.remove(&id);
        self.held.remove(&id);
    }

    // Config space.

    pub fn config_addr(&self, id: InterruptId, field: ConfigField) -> u64 {
        self.config_space.base_addr() + u64::from(id.0) * CONFIG_STRIDE + field.index() * 4
    }

    pub fn decode_config_addr(&self, addr: u64) -> Option<(InterruptId, ConfigField)> {
        if !self.config_space.contains_addr(addr) {
            return None;
        }
        let off = addr - self.config_space.base_addr();
        let word = off % CONFIG_STRIDE;
        if !word.is_multiple_of(4) {
            return None;
        }
        let field = *ConfigField::ALL.get((word / 4) as usize)?;
        Some((InterruptId((off / CONFIG_STRIDE) as u32), field))
    }

    /// Register-level read/write without any protection check.
    pub fn config_rw(&mut self, addr: u64, write: Option<u64>) -> Result<u64> {
        let (id, field) = self
            .decode_config_addr(addr)
            .ok_or_else(|| SimError::config("gic", format!("{addr:#x} is not a GIC config register")))?;
        let cfg = *self.config(id)?;
        if let Some(v) = write {
            match field {
                ConfigField::Enable => self.set_enabled(id, v != 0)?,
                ConfigField::Priority => self.set_priority(id, v as u8)?,
                ConfigField::Group => self.set_group(id, if v == 0 { Group::Group0 } else { Group::Group1 })?,
                ConfigField::Route => self.set_route(id, v as u32)?,
            }
            return Ok(v);
        }
        Ok(match field {
            ConfigField::Enable => u64::from(cfg.enabled),
            ConfigField::Priority => u64::from(cfg.priority),
            ConfigField::Group => u64::from(cfg.group == Group::Group1),
            ConfigField::Route => u64::from(cfg.route),
        })
    }

    /// Core access to config space: granule protection check on the core
    /// table first, then the register operation.
    pub fn config_space_access(
        &mut self,
        req: &AccessRequest,
        value: Option<u64>,
        mem: &MemoryIsolation,
        trace: &mut Trace,
    ) -> Result<Result<u64, AccessFault>> {
        if let GpcVerdict::Fault(f) = mem.check(req)? {
            trace.emit(TraceEvent::Gpf {
                addr: req.addr,
                world: req.source.world(),
            });
            return Ok(Err(f));
        }
        let write = match req.kind {
            AccessKind::Write => Some(value.unwrap_or(0)),
            AccessKind::Read => None,
        };
        self.config_rw(req.addr, write).map(Ok)
    }

    // Virtual list registers.

    pub fn vgic(&self, vm: VmId) -> Option<&Vgic> {
        self.vgics.get(&vm)
    }

    pub fn vgic_program(&mut self, vm: VmId, ids: &[InterruptId], trace: &mut Trace) -> Result<(), VgicError> {
        let n = self.n;
        let err = if ids.len() > n {
            Some(VgicError::TooMany { got: ids.len(), n })
        } else {
            let mut seen = BTreeSet::new();
            ids.iter()
                .find(|id| !seen.insert(**id))
                .map(|d| VgicError::Duplicate(*d))
        };
        if let Some(e) = err {
            trace.emit(TraceEvent::VgicReject { vm, ids: ids.to_vec() });
            return Err(e);
        }
        let vgic = self.vgics.entry(vm).or_insert_with(|| Vgic::new(n));
        vgic.slots = ids
            .iter()
            .copied()
            .map(Some)
            .chain(std::iter::repeat(None))
            .take(n)
            .collect();
        trace.emit(TraceEvent::VgicProgram { vm, ids: ids.to_vec() });
        Ok(())
    }

    /// VM entry: every loaded slot fires once and empties.
    pub fn vgic_fire(&mut self, vm: VmId, trace: &mut Trace) -> Vec<InterruptId> {
        let Some(vgic) = self.vgics.get_mut(&vm) else {
            return Vec::new();
        };
        let fired: Vec<InterruptId> = vgic.slots.iter_mut().filter_map(Option::take).collect();
        for irq in &fired {
            trace.emit(TraceEvent::VgicFire { vm, irq: *irq });
        }
        fired
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mem::{GptSelect, World};

    fn gic() -> Gic {
        let mut g = Gic::new(GranuleRange::new(16, 16), 3);
        let mut kb = InterruptConfig::new(InterruptId(44), Trigger::Level, 0xa0);
        kb.enabled = true;
        g.register(kb).unwrap();
        let mut e = InterruptConfig::new(InterruptId(30), Trigger::Edge, 0x40);
        e.enabled = true;
        g.register(e).unwrap();
        g
    }

    #[test]
    fn edge_coalesces() {
        let mut g = gic();
        let mut t = Trace::default();
        g.assert_line(InterruptId(30), None, &mut t).unwrap();
        g.assert_line(InterruptId(30), None, &mut t).unwrap();
        let mut deliveries = 0;
        while let Some(id) = g.next_deliverable() {
            g.deliver(id, &mut t).unwrap();
            g.acknowledge(id, &mut t).unwrap();
            deliveries += 1;
        }
        assert_eq!(deliveries, 1);
    }

    #[test]
    fn level_refires_while_line_high() {
        let mut g = gic();
        let mut t = Trace::default();
        let id = InterruptId(44);
        g.assert_line(id, None, &mut t).unwrap();
        g.deliver(id, &mut t).unwrap();
        assert!(g.acknowledge(id, &mut t).unwrap());
        assert_eq!(g.next_deliverable(), Some(id));
        g.deliver(id, &mut t).unwrap();
        g.deassert_line(id, &mut t).unwrap();
        assert!(!g.acknowledge(id, &mut t).unwrap());
        assert_eq!(g.next_deliverable(), None);
    }

    #[test]
    fn edge_ack_does_not_refire() {
        let mut g = gic();
        let mut t = Trace::default();
        g.assert_line(InterruptId(30), None, &mut t).unwrap();
        g.deliver(InterruptId(30), &mut t).unwrap();
        assert!(!g.acknowledge(InterruptId(30), &mut t).unwrap());
        assert_eq!(g.next_deliverable(), None);
    }

    #[test]
    fn ack_of_idle_id_is_warning() {
        let mut g = gic();
        let mut t = Trace::default();
        g.acknowledge(InterruptId(44), &mut t).unwrap();
        assert!(matches!(t.records()[0].event, TraceEvent::AckIgnored { .. }));
    }

    #[test]
    fn disabled_id_pends_on_enable() {
        let mut g = gic();
        let mut t = Trace::default();
        let id = InterruptId(30);
        g.set_enabled(id, false).unwrap();
        g.assert_line(id, None, &mut t).unwrap();
        assert_eq!(g.next_deliverable(), None);
        g.set_enabled(id, true).unwrap();
        assert_eq!(g.next_deliverable(), Some(id));
    }

    #[test]
    fn unknown_id_is_model_error() {
        let mut g = gic();
        assert!(g.assert_line(InterruptId(99), None, &mut Trace::default()).is_err());
    }

    #[test]
    fn priority_orders_delivery() {
        let mut g = gic();
        let mut t = Trace::default();
        g.assert_line(InterruptId(44), None, &mut t).unwrap();
        g.assert_line(InterruptId(30), None, &mut t).unwrap();
        assert_eq!(g.next_deliverable(), Some(InterruptId(30)));
    }

    #[test]
    fn group_routes_target() {
        let mut g = gic();
        let mut t = Trace::default();
        g.set_group(InterruptId(44), Group::Group0).unwrap();
        g.assert_line(InterruptId(44), None, &mut t).unwrap();
        assert_eq!(g.deliver(InterruptId(44), &mut t).unwrap(), Target::Monitor);
    }

    #[test]
    fn vgic_fires_once_and_empties() {
        let mut g = gic();
        let mut t = Trace::default();
        let vm = VmId(1);
        g.vgic_program(vm, &[InterruptId(44)], &mut t).unwrap();
        assert_eq!(g.vgic_fire(vm, &mut t), vec![InterruptId(44)]);
        assert!(g.vgic_fire(vm, &mut t).is_empty());
        g.vgic_program(vm, &[], &mut t).unwrap();
        assert!(g.vgic_fire(vm, &mut t).is_empty());
    }

    #[test]
    fn vgic_rejects_duplicates_and_overflow() {
        let mut g = gic();
        let mut t = Trace::default();
        let vm = VmId(1);
        assert_eq!(
            g.vgic_program(vm, &[InterruptId(1), InterruptId(1)], &mut t),
            Err(VgicError::Duplicate(InterruptId(1)))
        );
        let four: Vec<_> = (1..=4).map(InterruptId).collect();
        assert!(matches!(
            g.vgic_program(vm, &four, &mut t),
            Err(VgicError::TooMany { .. })
        ));
        assert!(g.vgic(vm).is_none_or(|v| v.loaded().count() == 0));
    }

    #[test]
    fn config_addr_round_trip() {
        let g = gic();
        for f in ConfigField::ALL {
            let a = g.config_addr(InterruptId(44), f);
            assert_eq!(g.decode_config_addr(a), Some((InterruptId(44), f)));
        }
        assert_eq!(g.decode_config_addr(0x1000), None);
    }

    #[test]
    fn config_space_gated_by_core_gpt() {
        let mut g = gic();
        let mut mem = MemoryIsolation::new(64);
        let mut t = Trace::default();
        let addr = g.config_addr(InterruptId(30), ConfigField::Enable);
        let hyp = AccessRequest::core(World::Normal, None, addr, AccessKind::Write);
        // baseline: applied
        assert_eq!(g.config_space_access(&hyp, Some(0), &mem, &mut t).unwrap(), Ok(0));
        assert!(!g.config(InterruptId(30)).unwrap().enabled);
        mem.gpt_set_range(GptSelect::Both, g.config_space(), World::Root, &mut t)
            .unwrap();
        assert!(g.config_space_access(&hyp, Some(1), &mem, &mut t).unwrap().is_err());
        assert!(!g.config(InterruptId(30)).unwrap().enabled);
        let mon = AccessRequest::core(World::Root, None, addr, AccessKind::Write);
        assert!(g.config_space_access(&mon, Some(1), &mem, &mut t).unwrap().is_ok());
        assert!(g.config(InterruptId(30)).unwrap().enabled);
    }
}
