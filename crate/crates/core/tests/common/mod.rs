// SPDX-License-Identifier: Apache-2.0

//! A realm with two DMA-capable devices, driven call by call.

#![allow(dead_code)]

use std::collections::BTreeSet;

use realm_devsim::harness::config::PlatformConfig;
use realm_devsim::harness::scenarios::DMA_ENGINE;
pub use realm_devsim::harness::scenarios::VM;
use realm_devsim::harness::trace::{ExitReason, FlushScope, TraceEvent};
use realm_devsim::hypervisor::{HostDevice, HypStrategy, Hypervisor, VmSetup};
use realm_devsim::mem::{GptKind, World};
use realm_devsim::platform::Platform;
use realm_devsim::rmm::{AttachFlags, Rmm};
use realm_devsim::types::{DeviceId, GranuleRange, Mode};

fn dma_device(pf: &PlatformConfig, id: DeviceId, gpa: u64) -> HostDevice {
    let desc = pf.devices.iter().find(|d| d.id == id).expect("platform device");
    HostDevice {
        device: id,
        gpas: vec![GranuleRange::new(gpa, desc.mmio[0].count)],
        interrupts: desc.interrupts.iter().map(|l| (l.id, 0x50)).collect(),
        flags: AttachFlags {
            dma_protection: true,
            interrupt_isolation: true,
        },
    }
}

pub struct Rig {
    pub p: Platform,
    pub rmm: Rmm,
    pub hyp: Hypervisor,
    pub devices: Vec<HostDevice>,
}

pub const ROGUE: DeviceId = DeviceId(19);

pub fn rig() -> Rig {
    let pf = PlatformConfig::default();
    let tree = pf.tree().expect("default tree");
    let mut p = Platform::boot(Mode::Dmi, &pf.layout(), tree.clone()).expect("boot");
    let mut rmm = Rmm::new(tree);
    let mut hyp = Hypervisor::new(HypStrategy::Benign, pf.ram);
    let devices = vec![dma_device(&pf, DMA_ENGINE, 0x100), dma_device(&pf, ROGUE, 0x110)];
    hyp.boot_vm(
        &mut p,
        &mut rmm,
        &VmSetup {
            vm: VM,
            ram: GranuleRange::new(0, 8),
            dma_window: None,
            devices: devices.clone(),
        },
    )
    .expect("vm boots");
    Rig { p, rmm, hyp, devices }
}

impl Rig {
    pub fn attach(&mut self, i: usize) -> Result<(), String> {
        let req = self.devices[i].request(VM);
        self.rmm
            .rsi_attach_dev(&mut self.p, &req)
            .map_err(|e| e.to_string())?
            .map_err(|e| e.to_string())?;
        self.hyp
            .vm_exit(&mut self.p, &mut self.rmm, VM, ExitReason::AttachRequested, &[])
            .map_err(|e| e.to_string())?;
        self.p.switch_to(World::Normal);
        Ok(())
    }

    pub fn detach(&mut self, i: usize) -> Result<(), String> {
        self.rmm
            .rsi_detach_dev(&mut self.p, VM, self.devices[i].device)
            .map_err(|e| e.to_string())?
            .map_err(|e| e.to_string())
    }

    pub fn invariants(&self, at: &str) -> Result<(), String> {
        let m = &self.p.mem;
        m.check_divergence().map_err(|e| format!("{at}: {e}"))?;
        m.check_exclusivity().map_err(|e| format!("{at}: {e}"))?;
        m.check_mirror().map_err(|e| format!("{at}: {e}"))
    }

    pub fn diverged(&self) -> BTreeSet<u64> {
        let m = &self.p.mem;
        m.gpt(GptKind::Core).diff(m.gpt(GptKind::Device)).into_iter().collect()
    }

    pub fn ram_pas(&self) -> BTreeSet<u64> {
        self.p.mem.mirror_image(VM).values().map(|e| e.pa.0).collect()
    }

    pub fn core_flushes(&self) -> usize {
        self.p.trace.count(|e| {
            matches!(
                e,
                TraceEvent::Flush {
                    scope: FlushScope::CoreGpc
                }
            )
        })
    }
}
