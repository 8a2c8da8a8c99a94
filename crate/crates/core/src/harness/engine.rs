// SPDX-License-Identifier: Apache-2.0

//! Discrete-event engine. Within a tick, interrupt delivery runs first and
//! everything else in scheduling order. All randomness comes from one
//! seeded generator, so a config always yields the same trace.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::devices::DeviceClass;
use crate::devices::{digest, dma_issue, dma_pattern, regs, DmaCommand, DmaOp};
use crate::error::{Result, SimError};
use crate::gic::Trigger;
use crate::guest::{AckOutcome, Binding, DmaStep, Guest, GuestIo, GuestObservable, Handler};
use crate::harness::config::{buffer_layout, Action, ScenarioConfig, Workload};
use crate::harness::metrics::MetricsReport;
use crate::harness::trace::{Target, Trace, TraceEvent};
use crate::hypervisor::{Hypervisor, VmSetup};
use crate::mem::{s2_translate, AccessRequest, GpcVerdict, World};
use crate::platform::Platform;
use crate::rmm::{AttachRequest, AttachState, Rmm};
use crate::types::{AccessKind, DeviceId, InterruptId, Mode, VmId, GRANULE_SIZE};

#[derive(Clone, Debug, PartialEq, Eq)]
enum Event {
    Start,
    Deliver,
    VmRun(VmId),
    Act(Action),
    TypeKey(usize),
    DmaComplete(DmaCommand),
    Stall { vm: VmId, until: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitStatus {
    Clean,
    ViolationsDetected,
    AttackSucceeded,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        match self {
            ExitStatus::Clean => 0,
            ExitStatus::ViolationsDetected => 2,
            ExitStatus::AttackSucceeded => 3,
        }
    }
}

#[derive(Clone, Debug)]
struct Typing {
    device: DeviceId,
    irq: InterruptId,
    bytes: Vec<u8>,
    next: usize,
    backlog: usize,
    jitter: u64,
    scheduled: bool,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub name: String,
    pub mode: Mode,
    pub status: ExitStatus,
    pub metrics: MetricsReport,
    pub observables: BTreeMap<VmId, GuestObservable>,
    pub expected: BTreeMap<VmId, GuestObservable>,
    /// Observable fields that differ from ground truth, as `vmN.field`.
    pub divergences: Vec<String>,
    pub measurements: BTreeMap<VmId, u64>,
    pub split_view_detections: usize,
    pub trace: Trace,
}

impl RunResult {
    pub fn violations(&self) -> u64 {
        self.metrics.violations
    }
}

pub struct Machine {
    cfg: ScenarioConfig,
    pub p: Platform,
    pub rmm: Rmm,
    pub hyp: Hypervisor,
    guests: BTreeMap<VmId, Guest>,
    /// Keyed by (tick, class, seq); deliveries run first within a tick.
    queue: BTreeMap<(u64, u8, u64), Event>,
    seq: u64,
    now: u64,
    steps: u64,
    rng: ChaCha8Rng,
    deliver_at: Option<u64>,
    started: bool,
    typing: Vec<Typing>,
    expected: BTreeMap<VmId, GuestObservable>,
    split_views: usize,
}

impl Machine {
    /// Boot the platform, create every VM and queue the first runs.
    pub fn new(cfg: ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        let tree = cfg.platform.tree()?;
        let mut p = Platform::boot(cfg.mode, &cfg.platform.layout(), tree.clone())?;
        p.monitor.level_ack_protocol = cfg.level_ack_protocol;
        let mut rmm = Rmm::new(tree);
        let mut hyp = Hypervisor::new(cfg.strategy, cfg.platform.ram);
        let mut guests = BTreeMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for vm in &cfg.vms {
            hyp.boot_vm(
                &mut p,
                &mut rmm,
                &VmSetup {
                    vm: vm.id,
                    ram: vm.ram,
                    dma_window: vm.dma_window,
                    devices: vm.devices.clone(),
                },
            )?;
            let mut g = Guest::new(vm.id);
            for d in &vm.drivers {
                let mmio_gpa = d
                    .device
                    .and_then(|dev| vm.device(dev))
                    .and_then(|hd| hd.gpas.first())
                    .map_or(0, |r| r.base_addr());
                let level = p.tree.owner_of_irq(d.irq).and_then(|desc| desc.trigger_of(d.irq)) == Some(Trigger::Level);
                g.bind(
                    d.irq,
                    Binding {
                        handler: d.handler,
                        mmio_gpa,
                        level,
                    },
                );
            }
            if Hypervisor::uses_attach(cfg.mode) {
                for hd in &vm.devices {
                    g.plan_attach(hd.request(vm.id));
                }
            }
            guests.insert(vm.id, g);
        }
        let mut typing = Vec::new();
        let mut expected: BTreeMap<VmId, GuestObservable> =
            cfg.vms.iter().map(|v| (v.id, GuestObservable::default())).collect();
        for w in &cfg.workload {
            match w {
                Workload::Typing {
                    device,
                    keys,
                    backlog,
                    jitter,
                } => {
                    let irq = p.tree.get(*device)?.interrupts[0].id;
                    let bytes: Vec<u8> = (0..*keys).map(|_| rng.gen_range(b'a'..=b'z')).collect();
                    typing.push(Typing {
                        device: *device,
                        irq,
                        bytes,
                        next: 0,
                        backlog: *backlog,
                        jitter: *jitter,
                        scheduled: false,
                    });
                }
                Workload::Dma { vm, device, ops, .. } => {
                    let v = cfg.vm(*vm).expect("validated");
                    let window = v.dma_window.expect("validated");
                    let engine_gpa = v.device(*device).expect("validated").gpas[0].base_addr();
                    let (layout, _) = buffer_layout(ops);
                    let steps: Vec<DmaStep> = ops
                        .iter()
                        .map(|o| {
                            let off = layout.iter().find(|(t, _)| *t == o.tag).map_or(0, |(_, g)| *g);
                            DmaStep {
                                kind: o.op.into(),
                                bytes: o.bytes,
                                tag: o.tag.clone(),
                                buffer_gpa: (window.start + off) * GRANULE_SIZE,
                                pattern: rng.gen(),
                            }
                        })
                        .collect();
                    let exp = expected.get_mut(vm).expect("validated");
                    exp.dma_digests
                        .extend(steps.iter().map(|s| (s.tag.clone(), s.expected_digest())));
                    guests.get_mut(vm).expect("validated").plan_dma(engine_gpa, steps);
                }
                Workload::Script { .. } => {}
            }
        }
        let mut m = Machine {
            cfg,
            p,
            rmm,
            hyp,
            guests,
            queue: BTreeMap::new(),
            seq: 0,
            now: 0,
            steps: 0,
            rng,
            deliver_at: None,
            started: false,
            typing,
            expected,
            split_views: 0,
        };
        m.ground_truth();
        let vms: Vec<VmId> = m.guests.keys().copied().collect();
        for vm in vms {
            m.hyp.request_run(vm, 0);
        }
        for s in m.cfg.stalls.clone() {
            m.schedule(
                s.at,
                Event::Stall {
                    vm: s.vm,
                    until: s.until,
                },
            );
        }
        m.post()?;
        Ok(m)
    }

    /// Expected observables from the workload, for the bound drivers.
    fn ground_truth(&mut self) {
        for vm in &self.cfg.vms {
            let exp = self.expected.get_mut(&vm.id).expect("every vm has an entry");
            let bound = |dev: DeviceId, h: Handler| {
                vm.drivers
                    .iter()
                    .any(|d| d.handler == h && d.device.unwrap_or(dev) == dev)
                    && vm.device(dev).is_some()
            };
            for t in &self.typing {
                if bound(t.device, Handler::KeyboardIsr) {
                    exp.keys_received.extend_from_slice(&t.bytes);
                }
                if bound(t.device, Handler::MouseIsr) {
                    exp.mouse_bytes.extend_from_slice(&t.bytes);
                }
            }
            for w in &self.cfg.workload {
                let Workload::Script { events } = w else { continue };
                for e in events {
                    if let Action::Raise { device, .. } = e.action {
                        if bound(device, Handler::Counter) {
                            exp.counter += 1;
                        }
                        if bound(device, Handler::WcnssReady) {
                            exp.wcnss_ready = true;
                            exp.wcnss_ready_events += 1;
                        }
                        if bound(device, Handler::MaliJob) {
                            exp.mali_jobs_done += 1;
                        }
                    }
                }
            }
        }
    }

    fn schedule(&mut self, at: u64, ev: Event) {
        let class = u8::from(ev != Event::Deliver);
        self.queue.insert((at, class, self.seq), ev);
        self.seq += 1;
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn guest(&self, vm: VmId) -> Option<&Guest> {
        self.guests.get(&vm)
    }

    /// Run until no events remain.
    pub fn run(mut self) -> Result<RunResult> {
        while self.step()? {}
        Ok(self.finish())
    }

    /// Process one event; false when the queue is empty.
    pub fn step(&mut self) -> Result<bool> {
        let Some(((at, _, _), ev)) = self.queue.pop_first() else {
            return Ok(false);
        };
        self.steps += 1;
        if self.steps > self.cfg.step_limit {
            return Err(SimError::StepLimitExceeded(self.cfg.step_limit));
        }
        self.now = at;
        self.p.trace.set_tick(at);
        self.handle(ev)?;
        self.post()?;
        Ok(true)
    }

    fn handle(&mut self, ev: Event) -> Result<()> {
        match ev {
            Event::Start => {
                for g in self.guests.values_mut() {
                    g.start();
                }
                let start = self.now;
                for w in self.cfg.workload.clone() {
                    if let Workload::Script { events } = w {
                        for e in events {
                            self.schedule(start + e.at, Event::Act(e.action));
                        }
                    }
                }
                for i in 0..self.typing.len() {
                    let backlog = self.typing[i].backlog.min(self.typing[i].bytes.len());
                    for _ in 0..backlog {
                        self.type_key(i)?;
                    }
                    if backlog == 0 {
                        self.typing[i].scheduled = true;
                        self.schedule(start, Event::TypeKey(i));
                    }
                }
                let vms: Vec<VmId> = self.guests.keys().copied().collect();
                for vm in vms {
                    if self.guests[&vm].has_work() {
                        self.hyp.request_run(vm, start + 1);
                    }
                }
            }
            Event::Deliver => {
                self.deliver_at = None;
                if let Some(id) = self.p.gic.next_deliverable() {
                    match self.p.gic.deliver(id, &mut self.p.trace)? {
                        Target::Monitor => self.p.monitor_trap(id)?,
                        Target::Hypervisor => self.hyp.on_interrupt(&mut self.p, id)?,
                    }
                }
            }
            Event::VmRun(vm) => {
                if self.hyp.run_due(vm, self.now) {
                    self.run_vm(vm)?;
                }
            }
            Event::Act(a) => self.act(&a)?,
            Event::TypeKey(i) => {
                self.typing[i].scheduled = false;
                self.type_key(i)?;
            }
            Event::DmaComplete(cmd) => self.dma_complete(&cmd)?,
            Event::Stall { vm, until } => self.hyp.stall_vm(vm, until),
        }
        Ok(())
    }

    fn type_key(&mut self, i: usize) -> Result<()> {
        let t = &mut self.typing[i];
        let Some(&byte) = t.bytes.get(t.next) else {
            return Ok(());
        };
        t.next += 1;
        let device = t.device;
        self.act(&Action::Key { device, byte })
    }

    fn act(&mut self, a: &Action) -> Result<()> {
        let desc = self.p.tree.get(a.device())?.clone();
        match *a {
            Action::Key { device, byte } => {
                self.p.trace.emit(TraceEvent::Input { device, byte });
                if let Some(irq) = self.p.devices.push_fifo(&desc, byte)? {
                    self.p.gic.assert_line(irq, Some(device), &mut self.p.trace)?;
                }
            }
            Action::Raise { device, irq } => {
                let irq = irq.unwrap_or(desc.interrupts[0].id);
                self.p.devices.raise(&desc, irq)?;
                self.p.gic.assert_line(irq, Some(device), &mut self.p.trace)?;
            }
            Action::Set { device, offset, value } => self.p.devices.device_set(device, offset, value)?,
        }
        Ok(())
    }

    fn run_vm(&mut self, vm: VmId) -> Result<()> {
        let Some(fired) = self.hyp.run_vm(&mut self.p, &mut self.rmm, vm)? else {
            return Ok(());
        };
        let world = if self.p.mode.is_realm() {
            World::Realm
        } else {
            World::Normal
        };
        let guest = self.guests.get_mut(&vm).ok_or(SimError::UnknownVm(vm))?;
        let mut io = VmIo {
            p: &mut self.p,
            rmm: &mut self.rmm,
            vm,
            world,
            dma: Vec::new(),
            eoied: Vec::new(),
        };
        let reason = guest.run(&mut io, &fired)?;
        let VmIo { dma, eoied, .. } = io;
        let has_work = guest.has_work();
        self.hyp.vm_exit(&mut self.p, &mut self.rmm, vm, reason, &eoied)?;
        if has_work {
            self.hyp.request_run(vm, self.now + 1);
        }
        for cmd in dma {
            self.schedule(self.now + self.cfg.dma_latency, Event::DmaComplete(cmd));
        }
        for irq in eoied {
            self.after_eoi(irq);
        }
        Ok(())
    }

    /// Paced typing: next key once the device FIFO is drained.
    fn after_eoi(&mut self, irq: InterruptId) {
        for i in 0..self.typing.len() {
            let t = &self.typing[i];
            if t.irq != irq || t.scheduled || t.next >= t.bytes.len() {
                continue;
            }
            let drained = self.p.devices.state(t.device).is_ok_and(|s| s.fifo_len() == 0);
            if !drained {
                continue;
            }
            let delay = 1 + if t.jitter > 0 {
                self.rng.gen_range(0..=t.jitter)
            } else {
                0
            };
            self.typing[i].scheduled = true;
            self.schedule(self.now + delay, Event::TypeKey(i));
        }
    }

    fn dma_complete(&mut self, cmd: &DmaCommand) -> Result<()> {
        let desc = self.p.tree.get(cmd.device)?.clone();
        let res = match cmd.kind {
            AccessKind::Read => dma_issue(
                &mut self.p.mem,
                &desc,
                cmd.gpa,
                DmaOp::Read { len: cmd.len },
                &mut self.p.trace,
            )?,
            AccessKind::Write => {
                let data = dma_pattern(cmd.pattern, cmd.len);
                dma_issue(&mut self.p.mem, &desc, cmd.gpa, DmaOp::Write(&data), &mut self.p.trace)?.map(|_| data)
            }
        };
        let (status, d) = match res {
            Ok(bytes) => (1, digest(&bytes)),
            Err(_) => (2, 0),
        };
        self.p.devices.device_set(cmd.device, regs::DMA_DIGEST, d)?;
        self.p.devices.device_set(cmd.device, regs::DMA_STATUS, status)?;
        if let Some(l) = desc.interrupts.first() {
            self.p.devices.raise(&desc, l.id)?;
            self.p.gic.assert_line(l.id, Some(cmd.device), &mut self.p.trace)?;
        }
        Ok(())
    }

    /// After every event: schedule host runs and the next delivery, start
    /// the workload once attaches settle, check invariants.
    fn post(&mut self) -> Result<()> {
        for (vm, at) in self.hyp.take_wakeups() {
            self.schedule(at.max(self.now), Event::VmRun(vm));
        }
        if self.deliver_at.is_none() && self.p.gic.next_deliverable().is_some() {
            self.deliver_at = Some(self.now + 1);
            self.schedule(self.now + 1, Event::Deliver);
        }
        if !self.started && self.guests.values().all(Guest::ready) {
            self.started = true;
            self.schedule(self.now + 1, Event::Start);
        }
        if self.cfg.check_invariants {
            self.check_invariants()?;
        }
        Ok(())
    }

    pub fn check_invariants(&mut self) -> Result<()> {
        let mem = &self.p.mem;
        mem.check_divergence()
            .and_then(|_| mem.check_exclusivity())
            .and_then(|_| mem.check_mirror())
            .map_err(SimError::Invariant)?;
        self.split_views += mem.split_view_detections();
        for vm in self.guests.keys() {
            if self.rmm.check_count(*vm) < 0 {
                return Err(SimError::Invariant(format!(
                    "{vm} injected more records than were logged"
                )));
            }
        }
        if self.p.cpu_world() != World::Normal {
            return Err(SimError::Invariant(format!(
                "CPU left in {} between events",
                self.p.cpu_world()
            )));
        }
        Ok(())
    }

    fn finish(self) -> RunResult {
        let metrics = MetricsReport::from_records(self.p.trace.records(), &self.cfg.costs);
        let observables: BTreeMap<VmId, GuestObservable> = self
            .guests
            .iter()
            .map(|(vm, g)| (*vm, g.observable().clone()))
            .collect();
        let mut divergences = Vec::new();
        for (vm, exp) in &self.expected {
            let got = &observables[vm];
            let mut diff = |name: &str, same: bool| {
                if !same {
                    divergences.push(format!("{vm}.{name}"));
                }
            };
            diff("counter", got.counter == exp.counter);
            diff("wcnss_ready", got.wcnss_ready == exp.wcnss_ready);
            diff("wcnss_ready_events", got.wcnss_ready_events == exp.wcnss_ready_events);
            diff("mali_jobs_done", got.mali_jobs_done == exp.mali_jobs_done);
            diff("keys_received", got.keys_received == exp.keys_received);
            diff("mouse_bytes", got.mouse_bytes == exp.mouse_bytes);
            diff("dma_digests", got.dma_digests == exp.dma_digests);
            diff("spurious_irqs", got.spurious_irqs == exp.spurious_irqs);
            diff("integrity_failures", got.integrity_failures == exp.integrity_failures);
        }
        let status = if !divergences.is_empty() {
            ExitStatus::AttackSucceeded
        } else if metrics.violations > 0 {
            ExitStatus::ViolationsDetected
        } else {
            ExitStatus::Clean
        };
        let measurements = self
            .guests
            .keys()
            .filter_map(|vm| self.rmm.realm(*vm).map(|r| (*vm, r.measurement)))
            .collect();
        RunResult {
            name: self.cfg.name.clone(),
            mode: self.cfg.mode,
            status,
            metrics,
            observables,
            expected: self.expected,
            divergences,
            measurements,
            split_view_detections: self.split_views,
            trace: self.p.trace,
        }
    }
}

/// Run a scenario to completion.
pub fn run(cfg: &ScenarioConfig) -> Result<RunResult> {
    Machine::new(cfg.clone())?.run()
}

/// The guest's window onto the platform during one VM entry.
struct VmIo<'a> {
    p: &'a mut Platform,
    rmm: &'a mut Rmm,
    vm: VmId,
    world: World,
    dma: Vec<DmaCommand>,
    eoied: Vec<InterruptId>,
}

impl VmIo<'_> {
    /// Stage-2 then granule protection. PAS-filter devices skip the latter
    /// and filter by world themselves.
    fn translate(&mut self, gpa: u64, kind: AccessKind) -> Result<Option<u64>> {
        let Some(table) = self.p.mem.vm_table(self.vm) else {
            return Ok(None);
        };
        let pa = match s2_translate(table, gpa, kind) {
            Ok(pa) => pa,
            Err(fault) => {
                self.p.trace.emit(TraceEvent::Fault { fault });
                return Ok(None);
            }
        };
        let filtered = self
            .p
            .tree
            .device_at(pa)
            .is_some_and(|(d, _)| d.class == DeviceClass::MmioOnlyPasFilter);
        if !filtered {
            let req = AccessRequest::core(self.world, Some(self.vm), pa, kind);
            if let GpcVerdict::Fault(fault) = self.p.mem.check(&req)? {
                self.p.trace.emit(TraceEvent::Gpf {
                    addr: pa,
                    world: self.world,
                });
                self.p.trace.emit(TraceEvent::Fault { fault });
                return Ok(None);
            }
        }
        Ok(Some(pa))
    }

    fn mmio(&mut self, gpa: u64, kind: AccessKind, value: u64) -> Result<Option<u64>> {
        let Some(pa) = self.translate(gpa, kind)? else {
            return Ok(None);
        };
        let Some((desc, offset)) = self.p.tree.device_at(pa).map(|(d, o)| (d.clone(), o)) else {
            return Ok(None);
        };
        let out = self
            .p
            .devices
            .mmio_access(&desc, offset, kind, self.world, value, &mut self.p.trace)?;
        if let Some(irq) = out.deassert {
            self.p.gic.deassert_line(irq, &mut self.p.trace)?;
        }
        if let Some(cmd) = out.dma {
            self.dma.push(cmd);
        }
        Ok(Some(out.value))
    }

    /// Walk a guest buffer granule by granule.
    fn spans(&mut self, gpa: u64, len: usize, kind: AccessKind) -> Result<Option<Vec<(u64, usize)>>> {
        let mut out = Vec::new();
        let mut addr = gpa;
        let end = gpa + len as u64;
        while addr < end {
            let take = (GRANULE_SIZE - (addr % GRANULE_SIZE)).min(end - addr);
            let Some(pa) = self.translate(addr, kind)? else {
                return Ok(None);
            };
            out.push((pa, take as usize));
            addr += take;
        }
        Ok(Some(out))
    }
}

impl GuestIo for VmIo<'_> {
    fn mmio_read(&mut self, gpa: u64) -> Result<Option<u64>> {
        self.mmio(gpa, AccessKind::Read, 0)
    }

    fn mmio_write(&mut self, gpa: u64, value: u64) -> Result<bool> {
        Ok(self.mmio(gpa, AccessKind::Write, value)?.is_some())
    }

    fn mem_read(&mut self, gpa: u64, len: usize) -> Result<Option<Vec<u8>>> {
        let Some(spans) = self.spans(gpa, len, AccessKind::Read)? else {
            return Ok(None);
        };
        let mut out = Vec::with_capacity(len);
        for (pa, n) in spans {
            out.extend(self.p.mem.read_bytes(pa, n)?);
        }
        Ok(Some(out))
    }

    fn mem_write(&mut self, gpa: u64, data: &[u8]) -> Result<bool> {
        let Some(spans) = self.spans(gpa, data.len(), AccessKind::Write)? else {
            return Ok(false);
        };
        let mut rest = data;
        for (pa, n) in spans {
            self.p.mem.write_bytes(pa, &rest[..n])?;
            rest = &rest[n..];
        }
        Ok(true)
    }

    fn eoi(&mut self, irq: InterruptId) -> Result<()> {
        self.p.trace.emit(TraceEvent::Eoi { vm: self.vm, irq });
        self.eoied.push(irq);
        Ok(())
    }

    fn ack_level(&mut self, irq: InterruptId) -> Result<AckOutcome> {
        let protected = self.p.monitor.protected(irq).is_some_and(|pi| pi.owner == self.vm);
        if self.p.mode.isolates() && protected {
            if let Err(e) = self.rmm.rsi_ack_int(self.p, self.vm, irq)? {
                self.p.warn(format!("acknowledgment of {irq} refused: {e}"));
            }
            Ok(AckOutcome::Done)
        } else {
            Ok(AckOutcome::Exit)
        }
    }

    fn spurious(&mut self, irq: InterruptId) {
        self.p.trace.emit(TraceEvent::Spurious { vm: self.vm, irq });
    }

    fn integrity_failure(&mut self, tag: &str) {
        self.p.trace.emit(TraceEvent::IntegrityFailure {
            vm: self.vm,
            tag: tag.into(),
        });
    }

    fn attach(&mut self, req: &AttachRequest) -> Result<bool> {
        Ok(self.rmm.rsi_attach_dev(self.p, req)?.is_ok())
    }

    fn attach_status(&mut self, dev: DeviceId) -> AttachState {
        self.rmm.attach_state(self.vm, dev)
    }

    fn detach(&mut self, dev: DeviceId) -> Result<bool> {
        Ok(self.rmm.rsi_detach_dev(self.p, self.vm, dev)?.is_ok())
    }
}

/// Ids fired into a VM, in order, from a trace.
pub fn fired_ids(trace: &Trace, vm: VmId) -> Vec<InterruptId> {
    trace
        .events()
        .filter_map(|e| match e {
            TraceEvent::VgicFire { vm: v, irq } if *v == vm => Some(*irq),
            _ => None,
        })
        .collect()
}

/// Distinct ids with an authentic device assertion in a trace.
pub fn asserted_ids(trace: &Trace) -> BTreeSet<InterruptId> {
    trace
        .events()
        .filter_map(|e| match e {
            TraceEvent::Assert { irq, device: Some(_) } => Some(*irq),
            _ => None,
        })
        .collect()
}
