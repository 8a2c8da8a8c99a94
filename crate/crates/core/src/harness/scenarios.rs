// SPDX-License-Identifier: Apache-2.0

//! Built-in scenarios on the default platform, and the attack suite.

use crate::gic::Trigger;
use crate::guest::Handler;
use crate::harness::config::{
    Action, DmaTraceOp, DriverConfig, PlatformConfig, ScenarioConfig, ScriptEvent, VmConfig, Workload, BURST_SENSORS,
    DEFAULT_STEP_LIMIT,
};
use crate::harness::metrics::CostTable;
use crate::hypervisor::{HostDevice, HypStrategy};
use crate::rmm::AttachFlags;
use crate::types::{DeviceId, GranuleRange, InterruptId, Mode, VmId};

pub const VM: VmId = VmId(1);
pub const KEYBOARD: DeviceId = DeviceId(1);
pub const KEYBOARD_IRQ: InterruptId = InterruptId(44);
pub const DMA_ENGINE: DeviceId = DeviceId(3);
pub const DMA_IRQ: InterruptId = InterruptId(46);
pub const SENSOR: DeviceId = DeviceId(7);
pub const SENSOR_IRQ: InterruptId = InterruptId(50);
pub const WCNSS: DeviceId = DeviceId(8);
pub const MALI: DeviceId = DeviceId(9);

/// Twelve-transfer breadth-first-search DMA trace.
pub const BFS_TRACE: &str = include_str!("../../data/bfs.jsonl");

const DEVICE_GPA_BASE: u64 = 0x100;

fn isolated() -> AttachFlags {
    AttachFlags {
        dma_protection: false,
        interrupt_isolation: true,
    }
}

/// Hand `device` to the VM at a gpa derived from its id.
fn give(pf: &PlatformConfig, device: DeviceId, prio: u8, flags: AttachFlags) -> HostDevice {
    let desc = pf
        .devices
        .iter()
        .find(|d| d.id == device)
        .expect("default platform device");
    let mut next = DEVICE_GPA_BASE + u64::from(device.0) * 4;
    let gpas = desc
        .mmio
        .iter()
        .map(|r| {
            let g = GranuleRange::new(next, r.count);
            next += r.count;
            g
        })
        .collect();
    HostDevice {
        device,
        gpas,
        interrupts: desc.interrupts.iter().map(|l| (l.id, prio)).collect(),
        flags,
    }
}

fn driver(irq: InterruptId, handler: Handler, device: DeviceId) -> DriverConfig {
    DriverConfig {
        irq,
        handler,
        device: Some(device),
    }
}

fn base(
    name: &str,
    mode: Mode,
    devices: Vec<HostDevice>,
    drivers: Vec<DriverConfig>,
    workload: Vec<Workload>,
) -> ScenarioConfig {
    ScenarioConfig {
        name: name.into(),
        mode,
        seed: 7,
        strategy: HypStrategy::Benign,
        platform: PlatformConfig::default(),
        vms: vec![VmConfig {
            id: VM,
            ram: GranuleRange::new(0, 32),
            dma_window: Some(GranuleRange::new(64, 16)),
            devices,
            drivers,
        }],
        workload,
        costs: CostTable::default(),
        step_limit: DEFAULT_STEP_LIMIT,
        level_ack_protocol: true,
        check_invariants: true,
        dma_latency: 2,
        stalls: Vec::new(),
    }
}

fn raise(at: u64, device: DeviceId) -> ScriptEvent {
    ScriptEvent {
        at,
        action: Action::Raise { device, irq: None },
    }
}

/// Paced keyboard: each key follows the guest's EOI of the previous one.
pub fn keyboard(mode: Mode, keys: usize) -> ScenarioConfig {
    typing("keyboard", mode, keys, 0, 3)
}

pub fn typing(name: &str, mode: Mode, keys: usize, backlog: usize, jitter: u64) -> ScenarioConfig {
    let pf = PlatformConfig::default();
    base(
        name,
        mode,
        vec![give(&pf, KEYBOARD, 0xa0, isolated())],
        vec![driver(KEYBOARD_IRQ, Handler::KeyboardIsr, KEYBOARD)],
        vec![Workload::Typing {
            device: KEYBOARD,
            keys,
            backlog,
            jitter,
        }],
    )
}

/// Five keys queued at once on a Level line, with or without the
/// Level acknowledgment protocol.
pub fn storm(protocol: bool) -> ScenarioConfig {
    let mut c = typing("storm", Mode::Dmi, 5, 5, 0);
    c.level_ack_protocol = protocol;
    c
}

/// Edge sensor raised `raises` times, 20 ticks apart, counted by the guest.
pub fn counter(mode: Mode, raises: u64) -> ScenarioConfig {
    let pf = PlatformConfig::default();
    base(
        "counter",
        mode,
        vec![give(&pf, SENSOR, 0x40, isolated())],
        vec![driver(SENSOR_IRQ, Handler::Counter, SENSOR)],
        vec![Workload::Script {
            events: (0..raises).map(|i| raise(10 + 20 * i, SENSOR)).collect(),
        }],
    )
}

fn burst_setup(name: &str, mode: Mode, events: Vec<ScriptEvent>) -> ScenarioConfig {
    let pf = PlatformConfig::default();
    let devices = BURST_SENSORS
        .map(|d| give(&pf, DeviceId(d), (d - 9) as u8, isolated()))
        .collect();
    let drivers = BURST_SENSORS
        .map(|d| driver(InterruptId(d + 51), Handler::Counter, DeviceId(d)))
        .collect();
    let mut c = base(name, mode, devices, drivers, vec![Workload::Script { events }]);
    c.platform.list_registers = 3;
    c
}

/// Nine sensors with priorities 1..9 fire together; three list registers.
pub fn burst(mode: Mode) -> ScenarioConfig {
    burst_setup("burst", mode, BURST_SENSORS.map(|d| raise(5, DeviceId(d))).collect())
}

/// Four low-priority sensors, then three urgent ones a few ticks later.
pub fn two_wave(mode: Mode) -> ScenarioConfig {
    let mut events: Vec<ScriptEvent> = (15..=18).map(|d| raise(5, DeviceId(d))).collect();
    events.extend((10..=12).map(|d| raise(12, DeviceId(d))));
    burst_setup("two-wave", mode, events)
}

pub fn wcnss(mode: Mode) -> ScenarioConfig {
    let pf = PlatformConfig::default();
    base(
        "wcnss",
        mode,
        vec![give(&pf, WCNSS, 0x30, isolated())],
        vec![driver(InterruptId(51), Handler::WcnssReady, WCNSS)],
        vec![Workload::Script {
            events: vec![raise(10, WCNSS)],
        }],
    )
}

/// Two GPU jobs complete; the driver checks the status register.
pub fn mali(mode: Mode) -> ScenarioConfig {
    let pf = PlatformConfig::default();
    let job = |at| {
        [
            ScriptEvent {
                at,
                action: Action::Set {
                    device: MALI,
                    offset: crate::devices::regs::MALI_STATUS,
                    value: 1,
                },
            },
            raise(at, MALI),
        ]
    };
    base(
        "mali",
        mode,
        vec![give(&pf, MALI, 0x30, isolated())],
        vec![driver(InterruptId(52), Handler::MaliJob, MALI)],
        vec![Workload::Script {
            events: job(10).into_iter().chain(job(30)).collect(),
        }],
    )
}

/// Breadth-first-search transfers through the DMA engine.
pub fn dma_bfs(mode: Mode) -> ScenarioConfig {
    let pf = PlatformConfig::default();
    let flags = AttachFlags {
        dma_protection: true,
        interrupt_isolation: true,
    };
    base(
        "dma-bfs",
        mode,
        vec![give(&pf, DMA_ENGINE, 0x50, flags)],
        vec![driver(DMA_IRQ, Handler::DmaDoneIsr, DMA_ENGINE)],
        vec![Workload::Dma {
            vm: VM,
            device: DMA_ENGINE,
            ops: DmaTraceOp::parse_jsonl(BFS_TRACE).expect("bundled trace parses"),
            trace: None,
        }],
    )
}

/// Every deviating strategy paired with a workload that exposes it.
pub fn attack_suite(mode: Mode) -> Vec<ScenarioConfig> {
    let s = |c: ScenarioConfig, st: HypStrategy| {
        let mut c = c.with_strategy(st);
        c.name = format!("{}/{}", st.name(), c.name);
        c
    };
    vec![
        s(counter(mode, 4), HypStrategy::InjectFake(SENSOR_IRQ)),
        s(burst(mode), HypStrategy::ReorderBeyondWindow),
        s(burst(mode), HypStrategy::DropAndMiscount),
        s(counter(mode, 4), HypStrategy::ReplayConsumed),
        s(keyboard(mode, 10), HypStrategy::PrematureLevelAck),
        s(counter(mode, 4), HypStrategy::GicTamper(SENSOR_IRQ)),
        s(two_wave(mode), HypStrategy::StallScheduling(30)),
        s(counter(mode, 4), HypStrategy::WrongPaMapping),
    ]
}

/// Trigger of a default-platform line.
pub fn trigger_of(irq: InterruptId) -> Option<Trigger> {
    PlatformConfig::default().devices.iter().find_map(|d| d.trigger_of(irq))
}
