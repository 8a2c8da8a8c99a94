// SPDX-License-Identifier: Apache-2.0

//! Scenario configuration: platform, VMs, host strategy and workload.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::devices::{DeviceClass, DeviceDescriptor, DeviceKind, IrqLine, PlatformDeviceTree};
use crate::error::{Result, SimError};
use crate::gic::Trigger;
use crate::guest::Handler;
use crate::harness::metrics::CostTable;
use crate::hypervisor::{HostDevice, HypStrategy};
use crate::platform::Layout;
use crate::types::{AccessKind, DeviceId, GranuleRange, InterruptId, Mode, VmId};

pub const DEFAULT_STEP_LIMIT: u64 = 10_000_000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlatformConfig {
    pub granules: u64,
    pub firmware: GranuleRange,
    pub gic: GranuleRange,
    /// Physical pool the host allocates VM memory from.
    pub ram: GranuleRange,
    pub list_registers: usize,
    pub log_capacity: usize,
    pub devices: Vec<DeviceDescriptor>,
}

fn device(
    id: u32,
    name: &str,
    kind: DeviceKind,
    class: DeviceClass,
    mmio: GranuleRange,
    dma: bool,
    irqs: &[(u32, Trigger)],
) -> DeviceDescriptor {
    DeviceDescriptor {
        id: DeviceId(id),
        name: name.into(),
        kind,
        class,
        mmio: vec![mmio],
        dma,
        interrupts: irqs
            .iter()
            .map(|(i, t)| IrqLine {
                id: InterruptId(*i),
                trigger: *t,
            })
            .collect(),
    }
}

/// Burst sensors: devices 10..=18, granules 42..=50, ids 61..=69.
pub const BURST_SENSORS: std::ops::RangeInclusive<u32> = 10..=18;

impl Default for PlatformConfig {
    fn default() -> Self {
        use DeviceClass::*;
        use DeviceKind::*;
        use Trigger::*;
        let g = |start| GranuleRange::new(start, 1);
        let mut devices = vec![
            device(1, "keyboard", Keyboard, MmioOnly, g(32), false, &[(44, Level)]),
            device(2, "mouse", Mouse, MmioOnly, g(33), false, &[(45, Level)]),
            device(3, "dma-engine", DmaEngine, LegacyDma, g(34), true, &[(46, Edge)]),
            device(4, "led", Led, MmioOnly, g(35), false, &[]),
            device(5, "button", Button, MmioOnly, g(36), false, &[]),
            device(6, "gps", Gps, MmioOnlyPasFilter, g(37), false, &[]),
            device(7, "sensor", Sensor, MmioOnly, g(38), false, &[(50, Edge)]),
            device(8, "wcnss", Wcnss, MmioOnly, g(39), false, &[(51, Edge)]),
            device(
                9,
                "mali",
                Mali,
                MmioOnly,
                GranuleRange::new(40, 2),
                false,
                &[(52, Edge)],
            ),
        ];
        for id in BURST_SENSORS {
            devices.push(device(
                id,
                &format!("burst{}", id - 9),
                Sensor,
                MmioOnly,
                g(u64::from(id) + 32),
                false,
                &[(id + 51, Edge)],
            ));
        }
        devices.push(device(
            19,
            "rogue-dma",
            DmaEngine,
            LegacyDma,
            g(51),
            true,
            &[(47, Edge)],
        ));
        PlatformConfig {
            granules: 4096,
            firmware: GranuleRange::new(0, 16),
            gic: GranuleRange::new(16, 16),
            ram: GranuleRange::new(64, 4032),
            list_registers: 4,
            log_capacity: 1024,
            devices,
        }
    }
}

impl PlatformConfig {
    pub fn layout(&self) -> Layout {
        Layout {
            granules: self.granules,
            firmware: self.firmware,
            gic: self.gic,
            list_registers: self.list_registers,
            log_capacity: self.log_capacity,
        }
    }

    pub fn tree(&self) -> Result<PlatformDeviceTree> {
        PlatformDeviceTree::new(self.devices.clone())
    }
}

/// Guest driver bound to a virtual interrupt.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverConfig {
    pub irq: InterruptId,
    pub handler: Handler,
    /// Device whose registers the driver reads, if any.
    #[serde(default)]
    pub device: Option<DeviceId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VmConfig {
    pub id: VmId,
    pub ram: GranuleRange,
    #[serde(default)]
    pub dma_window: Option<GranuleRange>,
    #[serde(default)]
    pub devices: Vec<HostDevice>,
    #[serde(default)]
    pub drivers: Vec<DriverConfig>,
}

impl VmConfig {
    pub fn device(&self, id: DeviceId) -> Option<&HostDevice> {
        self.devices.iter().find(|d| d.device == id)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "do", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    Key {
        device: DeviceId,
        byte: u8,
    },
    /// Device asserts an interrupt line (its first one by default).
    Raise {
        device: DeviceId,
        #[serde(default)]
        irq: Option<InterruptId>,
    },
    /// Device-side register update.
    Set {
        device: DeviceId,
        offset: u64,
        value: u64,
    },
}

impl Action {
    pub fn device(&self) -> DeviceId {
        match self {
            Action::Key { device, .. } | Action::Raise { device, .. } | Action::Set { device, .. } => *device,
        }
    }
}

/// Unknown keys are caught by `Action`, since serde cannot deny them
/// through a flattened field.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEvent {
    /// Ticks after the workload starts.
    pub at: u64,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DmaDirection {
    /// Device reads the guest buffer.
    Read,
    /// Device writes the guest buffer.
    Write,
}

impl From<DmaDirection> for AccessKind {
    fn from(d: DmaDirection) -> Self {
        match d {
            DmaDirection::Read => AccessKind::Read,
            DmaDirection::Write => AccessKind::Write,
        }
    }
}

/// One line of a DMA trace file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DmaTraceOp {
    pub op: DmaDirection,
    pub bytes: u64,
    pub tag: String,
}

impl DmaTraceOp {
    pub fn parse_jsonl(text: &str) -> Result<Vec<DmaTraceOp>> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map_err(|e| SimError::config(format!("dma trace line {}", i + 1), e.to_string()))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Workload {
    /// Keystrokes into a FIFO device. The next key arrives after the guest
    /// EOIs the previous one; `backlog` keys are queued up front.
    Typing {
        device: DeviceId,
        keys: usize,
        #[serde(default)]
        backlog: usize,
        #[serde(default)]
        jitter: u64,
    },
    Script {
        events: Vec<ScriptEvent>,
    },
    /// Guest-driven DMA transfers through a DMA engine.
    Dma {
        vm: VmId,
        device: DeviceId,
        #[serde(default)]
        ops: Vec<DmaTraceOp>,
        /// JSONL trace file, resolved relative to the config file.
        #[serde(default)]
        trace: Option<String>,
    },
}

fn default_name() -> String {
    "scenario".into()
}

fn default_true() -> bool {
    true
}

fn default_step_limit() -> u64 {
    DEFAULT_STEP_LIMIT
}

fn default_dma_latency() -> u64 {
    2
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "benign")]
    pub strategy: HypStrategy,
    #[serde(default)]
    pub platform: PlatformConfig,
    pub vms: Vec<VmConfig>,
    #[serde(default)]
    pub workload: Vec<Workload>,
    #[serde(default)]
    pub costs: CostTable,
    #[serde(default = "default_step_limit")]
    pub step_limit: u64,
    /// Level interrupts stay active until the guest's acknowledgment.
    #[serde(default = "default_true")]
    pub level_ack_protocol: bool,
    #[serde(default = "default_true")]
    pub check_invariants: bool,
    #[serde(default = "default_dma_latency")]
    pub dma_latency: u64,
    /// Benign host delays: no run of `vm` before `until`, requested at `at`.
    #[serde(default)]
    pub stalls: Vec<StallConfig>,
}

fn benign() -> HypStrategy {
    HypStrategy::Benign
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StallConfig {
    pub vm: VmId,
    pub at: u64,
    pub until: u64,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = serde_json::from_str(text).map_err(|e| SimError::config("json", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load and resolve DMA trace paths relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for (i, w) in cfg.workload.iter_mut().enumerate() {
            if let Workload::Dma { ops, trace, .. } = w {
                if let Some(t) = trace.take() {
                    let text = std::fs::read_to_string(base.join(&t))
                        .map_err(|e| SimError::config(format!("workload[{i}].trace"), format!("{t}: {e}")))?;
                    ops.extend(DmaTraceOp::parse_jsonl(&text)?);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_mode(&self, mode: Mode) -> Self {
        ScenarioConfig { mode, ..self.clone() }
    }

    pub fn with_strategy(&self, strategy: HypStrategy) -> Self {
        ScenarioConfig {
            strategy,
            ..self.clone()
        }
    }

    pub fn vm(&self, id: VmId) -> Option<&VmConfig> {
        self.vms.iter().find(|v| v.id == id)
    }

    /// Field-level validation beyond what deserialization checks.
    pub fn validate(&self) -> Result<()> {
        let pf = &self.platform;
        if pf.list_registers == 0 {
            return Err(SimError::config("platform.list_registers", "must be at least 1"));
        }
        if pf.log_capacity == 0 {
            return Err(SimError::config("platform.log_capacity", "must be at least 1"));
        }
        for (field, r) in [
            ("platform.firmware", pf.firmware),
            ("platform.gic", pf.gic),
            ("platform.ram", pf.ram),
        ] {
            if r.end() > pf.granules || r.count == 0 {
                return Err(SimError::config(
                    field,
                    format!("{r} is empty or outside {} granules", pf.granules),
                ));
            }
        }
        if pf.firmware.overlaps(&pf.gic) || pf.ram.overlaps(&pf.gic) || pf.ram.overlaps(&pf.firmware) {
            return Err(SimError::config("platform", "firmware, gic and ram ranges overlap"));
        }
        let tree = pf
            .tree()
            .map_err(|e| SimError::config("platform.devices", e.to_string()))?;
        for d in tree.devices() {
            for r in &d.mmio {
                if r.end() > pf.granules || r.overlaps(&pf.ram) || r.overlaps(&pf.gic) || r.overlaps(&pf.firmware) {
                    return Err(SimError::config(
                        format!("platform.devices.{}", d.id),
                        format!("MMIO {r} collides with the layout"),
                    ));
                }
            }
        }
        if let HypStrategy::StallScheduling(0) = self.strategy {
            return Err(SimError::config("strategy", "stall must last at least one tick"));
        }
        if self.dma_latency == 0 {
            return Err(SimError::config("dma_latency", "must be at least 1"));
        }
        if self.vms.is_empty() {
            return Err(SimError::config("vms", "at least one VM is required"));
        }
        let mut ids = BTreeSet::new();
        let mut taken = BTreeSet::new();
        for (i, vm) in self.vms.iter().enumerate() {
            let at = |f: &str| format!("vms[{i}].{f}");
            if !ids.insert(vm.id) {
                return Err(SimError::config(at("id"), format!("duplicate {}", vm.id)));
            }
            if vm.ram.count == 0 {
                return Err(SimError::config(at("ram"), "must not be empty"));
            }
            let mut used: Vec<GranuleRange> = vec![vm.ram];
            if let Some(w) = vm.dma_window {
                if w.count == 0 || w.overlaps(&vm.ram) {
                    return Err(SimError::config(at("dma_window"), "empty or overlapping RAM"));
                }
                used.push(w);
            }
            for (j, hd) in vm.devices.iter().enumerate() {
                let at = |f: &str| format!("vms[{i}].devices[{j}].{f}");
                let desc = tree
                    .get(hd.device)
                    .map_err(|_| SimError::config(at("device"), format!("unknown device {}", hd.device)))?;
                if !taken.insert(hd.device) {
                    return Err(SimError::config(
                        at("device"),
                        format!("{} is given to more than one VM", hd.device),
                    ));
                }
                let shape_ok =
                    hd.gpas.len() == desc.mmio.len() && hd.gpas.iter().zip(&desc.mmio).all(|(g, m)| g.count == m.count);
                if !shape_ok {
                    return Err(SimError::config(
                        at("gpas"),
                        format!("must match the MMIO ranges of {}", hd.device),
                    ));
                }
                for g in &hd.gpas {
                    if used.iter().any(|u| u.overlaps(g)) {
                        return Err(SimError::config(at("gpas"), format!("{g} overlaps other guest memory")));
                    }
                    used.push(*g);
                }
                for (id, _) in &hd.interrupts {
                    if !desc.owns_irq(*id) {
                        return Err(SimError::config(
                            at("interrupts"),
                            format!("{} does not own {id}", hd.device),
                        ));
                    }
                }
                if hd.flags.dma_protection && !desc.dma {
                    return Err(SimError::config(
                        at("flags.dma_protection"),
                        format!("{} is not DMA-capable", hd.device),
                    ));
                }
            }
            for (j, d) in vm.drivers.iter().enumerate() {
                if let Some(dev) = d.device {
                    if vm.device(dev).is_none() {
                        return Err(SimError::config(
                            format!("vms[{i}].drivers[{j}].device"),
                            format!("{dev} is not given to this VM"),
                        ));
                    }
                }
            }
        }
        for (i, w) in self.workload.iter().enumerate() {
            let at = |f: &str| format!("workload[{i}].{f}");
            match w {
                Workload::Typing { device, .. } => {
                    let d = tree
                        .get(*device)
                        .map_err(|_| SimError::config(at("device"), format!("unknown device {device}")))?;
                    if !matches!(d.kind, DeviceKind::Keyboard | DeviceKind::Mouse) || d.interrupts.is_empty() {
                        return Err(SimError::config(at("device"), format!("{device} has no input FIFO")));
                    }
                }
                Workload::Script { events } => {
                    for (j, e) in events.iter().enumerate() {
                        let dev = e.action.device();
                        let d = tree.get(dev).map_err(|_| {
                            SimError::config(
                                format!("workload[{i}].events[{j}].device"),
                                format!("unknown device {dev}"),
                            )
                        })?;
                        if let Action::Raise { irq: Some(irq), .. } = e.action {
                            if !d.owns_irq(irq) {
                                return Err(SimError::config(
                                    format!("workload[{i}].events[{j}].irq"),
                                    format!("{dev} does not own {irq}"),
                                ));
                            }
                        }
                        if matches!(e.action, Action::Raise { irq: None, .. }) && d.interrupts.is_empty() {
                            return Err(SimError::config(
                                format!("workload[{i}].events[{j}].device"),
                                format!("{dev} has no interrupt"),
                            ));
                        }
                    }
                }
                Workload::Dma { vm, device, ops, trace } => {
                    let v = self
                        .vm(*vm)
                        .ok_or_else(|| SimError::config(at("vm"), format!("unknown {vm}")))?;
                    let d = tree
                        .get(*device)
                        .map_err(|_| SimError::config(at("device"), format!("unknown device {device}")))?;
                    if d.kind != DeviceKind::DmaEngine || v.device(*device).is_none() {
                        return Err(SimError::config(
                            at("device"),
                            format!("{device} is not a DMA engine given to {vm}"),
                        ));
                    }
                    let window = v
                        .dma_window
                        .ok_or_else(|| SimError::config(at("vm"), format!("{vm} has no dma_window")))?;
                    if trace.is_none() {
                        let need = buffer_layout(ops).1;
                        if need > window.count {
                            return Err(SimError::config(
                                at("ops"),
                                format!("buffers need {need} granules, window has {}", window.count),
                            ));
                        }
                    }
                    if ops.iter().any(|o| o.bytes == 0) {
                        return Err(SimError::config(at("ops"), "zero-length transfer"));
                    }
                }
            }
        }
        for (i, s) in self.stalls.iter().enumerate() {
            if self.vm(s.vm).is_none() {
                return Err(SimError::config(format!("stalls[{i}].vm"), format!("unknown {}", s.vm)));
            }
            if s.until <= s.at {
                return Err(SimError::config(format!("stalls[{i}].until"), "must be after `at`"));
            }
        }
        Ok(())
    }
}

/// Granule offset of each distinct tag's buffer inside the DMA window, and
/// the total granules used. A tag's buffer is sized by its largest use.
pub fn buffer_layout(ops: &[DmaTraceOp]) -> (Vec<(String, u64)>, u64) {
    let mut sizes: Vec<(String, u64)> = Vec::new();
    for o in ops {
        match sizes.iter_mut().find(|(t, _)| *t == o.tag) {
            Some((_, b)) => *b = (*b).max(o.bytes),
            None => sizes.push((o.tag.clone(), o.bytes)),
        }
    }
    let mut next = 0;
    let mut out = Vec::new();
    for (tag, bytes) in sizes {
        out.push((tag, next));
        next += bytes.div_ceil(crate::types::GRANULE_SIZE);
    }
    (out, next)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> String {
        r#"{"mode":"dmi","vms":[{"id":1,"ram":{"start":0,"count":4}}]}"#.into()
    }

    #[test]
    fn defaults_fill_in() {
        let c = ScenarioConfig::from_json(&minimal()).unwrap();
        assert_eq!(c.strategy, HypStrategy::Benign);
        assert_eq!(c.platform.list_registers, 4);
        assert!(c.level_ack_protocol);
        assert_eq!(c.step_limit, DEFAULT_STEP_LIMIT);
    }

    #[test]
    fn default_platform_is_valid() {
        PlatformConfig::default().tree().unwrap();
    }

    #[test]
    fn unknown_field_is_named() {
        let e = ScenarioConfig::from_json(r#"{"mode":"dmi","vms":[],"bogus":1}"#).unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
    }

    #[test]
    fn script_events_round_trip() {
        let cfg = crate::harness::scenarios::mali(Mode::Dmi);
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ScenarioConfig::from_json(&text).unwrap(), cfg);
        let bad = text.replacen(r#""do":"raise""#, r#""do":"raise","volume":3"#, 1);
        assert!(ScenarioConfig::from_json(&bad).is_err());
    }

    #[test]
    fn bad_device_is_located() {
        let text = r#"{"mode":"br","vms":[{"id":1,"ram":{"start":0,"count":4},
            "devices":[{"device":99,"gpas":[],"interrupts":[]}]}]}"#;
        let e = ScenarioConfig::from_json(text).unwrap_err();
        assert!(e.to_string().contains("vms[0].devices[0].device"), "{e}");
    }

    #[test]
    fn strategy_forms() {
        let text = r#"{"mode":"dmi","strategy":{"inject_fake":99},"vms":[{"id":1,"ram":{"start":0,"count":4}}]}"#;
        let c = ScenarioConfig::from_json(text).unwrap();
        assert_eq!(c.strategy, HypStrategy::InjectFake(InterruptId(99)));
    }

    #[test]
    fn zero_stall_rejected() {
        let text = r#"{"mode":"dmi","strategy":{"stall_scheduling":0},"vms":[{"id":1,"ram":{"start":0,"count":4}}]}"#;
        let e = ScenarioConfig::from_json(text).unwrap_err();
        assert!(e.to_string().contains("strategy"), "{e}");
    }

    #[test]
    fn buffers_are_granule_aligned() {
        let ops = DmaTraceOp::parse_jsonl(
            "{\"op\":\"read\",\"bytes\":5000,\"tag\":\"a\"}\n{\"op\":\"write\",\"bytes\":10,\"tag\":\"b\"}\n\n{\"op\":\"read\",\"bytes\":9000,\"tag\":\"a\"}",
        )
        .unwrap();
        let (layout, total) = buffer_layout(&ops);
        assert_eq!(layout, vec![("a".into(), 0), ("b".into(), 3)]);
        assert_eq!(total, 4);
    }
}
