// SPDX-License-Identifier: Apache-2.0

//! Guest VM model: a cooperative state machine with interrupt-driven
//! drivers, an attach task and a DMA workload driver.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::devices::{digest, dma_pattern, regs};
use crate::error::Result;
use crate::harness::trace::ExitReason;
use crate::rmm::{AttachRequest, AttachState};
use crate::types::{AccessKind, DeviceId, InterruptId, VmId};

/// Driver bound to a virtual interrupt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Handler {
    /// Increments a counter on every interrupt, no device check.
    Counter,
    /// Marks firmware ready on every interrupt.
    WcnssReady,
    /// Reads the job status register; zero means not ours.
    MaliJob,
    KeyboardIsr,
    MouseIsr,
    DmaDoneIsr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Binding {
    pub handler: Handler,
    /// Guest-physical base of the device's registers.
    pub mmio_gpa: u64,
    /// Level interrupts need an explicit acknowledgment after EOI.
    pub level: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuestObservable {
    pub counter: u64,
    pub wcnss_ready: bool,
    pub wcnss_ready_events: u64,
    pub mali_jobs_done: u64,
    pub mali_irq_none: u64,
    pub keys_received: Vec<u8>,
    pub mouse_bytes: Vec<u8>,
    pub dma_digests: Vec<(String, u64)>,
    pub spurious_irqs: u64,
    pub integrity_failures: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AckOutcome {
    /// Acknowledged without leaving the VM.
    Done,
    /// Acknowledgment needs the host: maintenance exit.
    Exit,
}

/// Everything the guest can do to the outside world.
pub trait GuestIo {
    /// `None` on a translation or protection fault.
    fn mmio_read(&mut self, gpa: u64) -> Result<Option<u64>>;
    fn mmio_write(&mut self, gpa: u64, value: u64) -> Result<bool>;
    fn mem_read(&mut self, gpa: u64, len: usize) -> Result<Option<Vec<u8>>>;
    fn mem_write(&mut self, gpa: u64, data: &[u8]) -> Result<bool>;
    fn eoi(&mut self, irq: InterruptId) -> Result<()>;
    fn ack_level(&mut self, irq: InterruptId) -> Result<AckOutcome>;
    fn spurious(&mut self, irq: InterruptId);
    fn integrity_failure(&mut self, tag: &str);
    fn attach(&mut self, req: &AttachRequest) -> Result<bool>;
    fn attach_status(&mut self, dev: DeviceId) -> AttachState;
    fn detach(&mut self, dev: DeviceId) -> Result<bool>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TaskState {
    Pending,
    Requested,
    Done,
    Failed,
}

#[derive(Clone, Debug)]
struct AttachTask {
    req: AttachRequest,
    state: TaskState,
    tries: u32,
}

/// Attach attempts before giving up on a device.
pub const ATTACH_TRIES: u32 = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DmaStep {
    /// Device-side direction: `Read` pulls the guest buffer, `Write` fills it.
    pub kind: AccessKind,
    pub bytes: u64,
    pub tag: String,
    pub buffer_gpa: u64,
    pub pattern: u64,
}

impl DmaStep {
    pub fn expected_digest(&self) -> u64 {
        digest(&dma_pattern(self.pattern, self.bytes))
    }
}

#[derive(Clone, Debug)]
struct DmaDriver {
    engine_gpa: u64,
    steps: Vec<DmaStep>,
    next: usize,
    in_flight: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Guest {
    vm: VmId,
    bindings: BTreeMap<InterruptId, Binding>,
    obs: GuestObservable,
    inbox: VecDeque<InterruptId>,
    attach: Vec<AttachTask>,
    dma: Option<DmaDriver>,
    started: bool,
}

impl Guest {
    pub fn new(vm: VmId) -> Self {
        Guest {
            vm,
            bindings: BTreeMap::new(),
            obs: GuestObservable::default(),
            inbox: VecDeque::new(),
            attach: Vec::new(),
            dma: None,
            started: false,
        }
    }

    pub fn vm(&self) -> VmId {
        self.vm
    }

    pub fn bind(&mut self, irq: InterruptId, binding: Binding) {
        self.bindings.insert(irq, binding);
    }

    pub fn binding(&self, irq: InterruptId) -> Option<&Binding> {
        self.bindings.get(&irq)
    }

    pub fn plan_attach(&mut self, req: AttachRequest) {
        self.attach.push(AttachTask {
            req,
            state: TaskState::Pending,
            tries: 0,
        });
    }

    pub fn plan_dma(&mut self, engine_gpa: u64, steps: Vec<DmaStep>) {
        self.dma = Some(DmaDriver {
            engine_gpa,
            steps,
            next: 0,
            in_flight: None,
        });
    }

    /// Workload may begin (devices attached, inputs flowing).
    pub fn start(&mut self) {
        self.started = true;
    }

    pub fn observable(&self) -> &GuestObservable {
        &self.obs
    }

    /// No attach left in flight.
    pub fn ready(&self) -> bool {
        self.attach
            .iter()
            .all(|t| matches!(t.state, TaskState::Done | TaskState::Failed))
    }

    /// The guest has something to do on its next run without a new interrupt.
    pub fn has_work(&self) -> bool {
        if !self.inbox.is_empty() {
            return true;
        }
        if self.attach.iter().any(|t| t.state == TaskState::Pending) {
            return true;
        }
        self.started
            && self
                .dma
                .as_ref()
                .is_some_and(|d| d.in_flight.is_none() && d.next < d.steps.len())
    }

    pub fn dma_done(&self) -> bool {
        self.dma
            .as_ref()
            .is_none_or(|d| d.in_flight.is_none() && d.next >= d.steps.len())
    }

    /// One VM entry: handle fired interrupts, then background tasks.
    pub fn run(&mut self, io: &mut dyn GuestIo, fired: &[InterruptId]) -> Result<ExitReason> {
        self.inbox.extend(fired.iter().copied());
        while let Some(irq) = self.inbox.pop_front() {
            let binding = self.bindings.get(&irq).copied();
            match binding {
                Some(b) => self.handle_virq(io, irq, b)?,
                None => {
                    self.obs.spurious_irqs += 1;
                    io.spurious(irq);
                }
            }
            io.eoi(irq)?;
            if binding.is_some_and(|b| b.level) && io.ack_level(irq)? == AckOutcome::Exit {
                return Ok(ExitReason::Maintenance);
            }
        }
        if let Some(exit) = self.attach_step(io)? {
            return Ok(exit);
        }
        if self.started {
            self.dma_step(io)?;
        }
        Ok(ExitReason::Idle)
    }

    fn handle_virq(&mut self, io: &mut dyn GuestIo, irq: InterruptId, b: Binding) -> Result<()> {
        match b.handler {
            Handler::Counter => self.obs.counter += 1,
            Handler::WcnssReady => {
                self.obs.wcnss_ready = true;
                self.obs.wcnss_ready_events += 1;
            }
            Handler::MaliJob => match io.mmio_read(b.mmio_gpa + regs::MALI_STATUS)? {
                Some(0) | None => self.obs.mali_irq_none += 1,
                Some(_) => self.obs.mali_jobs_done += 1,
            },
            Handler::KeyboardIsr | Handler::MouseIsr => {
                let status = io.mmio_read(b.mmio_gpa + regs::FIFO_STATUS)?;
                if status.unwrap_or(0) & 1 == 0 {
                    self.obs.spurious_irqs += 1;
                    io.spurious(irq);
                    return Ok(());
                }
                if let Some(v) = io.mmio_read(b.mmio_gpa + regs::FIFO_DATA)? {
                    if b.handler == Handler::KeyboardIsr {
                        self.obs.keys_received.push(v as u8);
                    } else {
                        self.obs.mouse_bytes.push(v as u8);
                    }
                }
            }
            Handler::DmaDoneIsr => self.dma_complete(io, irq)?,
        }
        Ok(())
    }

    fn attach_step(&mut self, io: &mut dyn GuestIo) -> Result<Option<ExitReason>> {
        for t in &mut self.attach {
            if t.state == TaskState::Requested {
                match io.attach_status(t.req.device) {
                    AttachState::Attached => t.state = TaskState::Done,
                    AttachState::AwaitingFinalize => {}
                    _ if t.tries < ATTACH_TRIES => t.state = TaskState::Pending,
                    _ => t.state = TaskState::Failed,
                }
            }
            if t.state == TaskState::Pending {
                t.tries += 1;
                if io.attach(&t.req)? {
                    t.state = TaskState::Requested;
                    return Ok(Some(ExitReason::AttachRequested));
                }
                t.state = if t.tries < ATTACH_TRIES {
                    TaskState::Pending
                } else {
                    TaskState::Failed
                };
            }
        }
        Ok(None)
    }

    fn dma_step(&mut self, io: &mut dyn GuestIo) -> Result<()> {
        let Some(d) = self.dma.as_mut() else { return Ok(()) };
        if d.in_flight.is_some() || d.next >= d.steps.len() {
            return Ok(());
        }
        let step = d.steps[d.next].clone();
        if step.kind == AccessKind::Read {
            let data = dma_pattern(step.pattern, step.bytes);
            if !io.mem_write(step.buffer_gpa, &data)? {
                self.obs.integrity_failures += 1;
                io.integrity_failure(&step.tag);
            }
        }
        let base = d.engine_gpa;
        let cmd = match step.kind {
            AccessKind::Read => regs::DMA_CMD_READ,
            AccessKind::Write => regs::DMA_CMD_WRITE,
        };
        io.mmio_write(base + regs::DMA_ADDR, step.buffer_gpa)?;
        io.mmio_write(base + regs::DMA_LEN, step.bytes)?;
        io.mmio_write(base + regs::DMA_PATTERN, step.pattern)?;
        io.mmio_write(base + regs::DMA_CMD, cmd)?;
        d.in_flight = Some(d.next);
        d.next += 1;
        Ok(())
    }

    fn dma_complete(&mut self, io: &mut dyn GuestIo, irq: InterruptId) -> Result<()> {
        let Some(d) = self.dma.as_mut() else {
            self.obs.spurious_irqs += 1;
            io.spurious(irq);
            return Ok(());
        };
        let Some(idx) = d.in_flight else {
            self.obs.spurious_irqs += 1;
            io.spurious(irq);
            return Ok(());
        };
        let base = d.engine_gpa;
        let status = io.mmio_read(base + regs::DMA_STATUS)?.unwrap_or(0);
        if status != 1 {
            // Not complete yet; the completion interrupt was not ours.
            self.obs.spurious_irqs += 1;
            io.spurious(irq);
            return Ok(());
        }
        d.in_flight = None;
        let step = d.steps[idx].clone();
        let seen = match step.kind {
            AccessKind::Read => io.mmio_read(base + regs::DMA_DIGEST)?,
            AccessKind::Write => io.mem_read(step.buffer_gpa, step.bytes as usize)?.map(|b| digest(&b)),
        };
        let seen = seen.unwrap_or(0);
        if seen != step.expected_digest() {
            self.obs.integrity_failures += 1;
            io.integrity_failure(&step.tag);
        }
        self.obs.dma_digests.push((step.tag, seen));
        // Clear status so a replayed completion is recognizably stale.
        io.mmio_write(base + regs::DMA_STATUS, 0)?;
        self.dma_step(io)
    }

    /// One MMIO read per call; `None` when the register is unreachable.
    pub fn poll_device(&mut self, io: &mut dyn GuestIo, gpa: u64, expected: u64) -> Result<Option<bool>> {
        Ok(io.mmio_read(gpa)?.map(|v| v == expected))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    /// Register file keyed by gpa; keyboard FIFO at 0x1000.
    #[derive(Default)]
    struct FakeIo {
        regs: BTreeMap<u64, u64>,
        fifo: VecDeque<u8>,
        eois: Vec<InterruptId>,
        acks: Vec<InterruptId>,
        maintenance: bool,
        attach_ok: bool,
        status: BTreeMap<DeviceId, AttachState>,
        attaches: u32,
    }

    impl GuestIo for FakeIo {
        fn mmio_read(&mut self, gpa: u64) -> Result<Option<u64>> {
            Ok(Some(match gpa {
                0x1000 => u64::from(!self.fifo.is_empty()),
                0x1008 => self.fifo.pop_front().map_or(0, u64::from),
                g => self.regs.remove(&g).unwrap_or(0),
            }))
        }
        fn mmio_write(&mut self, gpa: u64, value: u64) -> Result<bool> {
            self.regs.insert(gpa, value);
            Ok(true)
        }
        fn mem_read(&mut self, _: u64, len: usize) -> Result<Option<Vec<u8>>> {
            Ok(Some(vec![0; len]))
        }
        fn mem_write(&mut self, _: u64, _: &[u8]) -> Result<bool> {
            Ok(true)
        }
        fn eoi(&mut self, irq: InterruptId) -> Result<()> {
            self.eois.push(irq);
            Ok(())
        }
        fn ack_level(&mut self, irq: InterruptId) -> Result<AckOutcome> {
            self.acks.push(irq);
            Ok(if self.maintenance {
                AckOutcome::Exit
            } else {
                AckOutcome::Done
            })
        }
        fn spurious(&mut self, _: InterruptId) {}
        fn integrity_failure(&mut self, _: &str) {}
        fn attach(&mut self, req: &AttachRequest) -> Result<bool> {
            self.attaches += 1;
            if self.attach_ok {
                self.status.insert(req.device, AttachState::AwaitingFinalize);
            }
            Ok(self.attach_ok)
        }
        fn attach_status(&mut self, dev: DeviceId) -> AttachState {
            self.status.get(&dev).copied().unwrap_or(AttachState::Idle)
        }
        fn detach(&mut self, _: DeviceId) -> Result<bool> {
            Ok(true)
        }
    }

    fn guest() -> Guest {
        let mut g = Guest::new(VmId(1));
        g.bind(
            InterruptId(50),
            Binding {
                handler: Handler::Counter,
                mmio_gpa: 0x2000,
                level: false,
            },
        );
        g.bind(
            InterruptId(44),
            Binding {
                handler: Handler::KeyboardIsr,
                mmio_gpa: 0x1000,
                level: true,
            },
        );
        g.bind(
            InterruptId(52),
            Binding {
                handler: Handler::MaliJob,
                mmio_gpa: 0x3000,
                level: false,
            },
        );
        g
    }

    #[test]
    fn counter_counts_every_interrupt() {
        let mut g = guest();
        let mut io = FakeIo::default();
        g.run(&mut io, &[InterruptId(50)]).unwrap();
        g.run(&mut io, &[InterruptId(50)]).unwrap();
        assert_eq!(g.observable().counter, 2);
    }

    #[test]
    fn mali_ignores_zero_status() {
        let mut g = guest();
        let mut io = FakeIo::default();
        g.run(&mut io, &[InterruptId(52)]).unwrap();
        assert_eq!(g.observable().mali_jobs_done, 0);
        assert_eq!(g.observable().mali_irq_none, 1);
        io.regs.insert(0x3000, 1);
        g.run(&mut io, &[InterruptId(52)]).unwrap();
        assert_eq!(g.observable().mali_jobs_done, 1);
    }

    #[test]
    fn keyboard_reads_key_then_acks() {
        let mut g = guest();
        let mut io = FakeIo::default();
        io.fifo.push_back(b'q');
        assert_eq!(g.run(&mut io, &[InterruptId(44)]).unwrap(), ExitReason::Idle);
        assert_eq!(g.observable().keys_received, b"q");
        assert_eq!(io.eois, vec![InterruptId(44)]);
        assert_eq!(io.acks, vec![InterruptId(44)]);
        // empty FIFO: spurious
        g.run(&mut io, &[InterruptId(44)]).unwrap();
        assert_eq!(g.observable().spurious_irqs, 1);
    }

    #[test]
    fn maintenance_exit_keeps_rest_of_inbox() {
        let mut g = guest();
        let mut io = FakeIo {
            maintenance: true,
            ..FakeIo::default()
        };
        io.fifo.push_back(b'x');
        let exit = g.run(&mut io, &[InterruptId(44), InterruptId(50)]).unwrap();
        assert_eq!(exit, ExitReason::Maintenance);
        assert_eq!(g.observable().counter, 0);
        assert!(g.has_work());
        g.run(&mut io, &[]).unwrap();
        assert_eq!(g.observable().counter, 1);
    }

    #[test]
    fn unbound_interrupt_is_spurious() {
        let mut g = guest();
        let mut io = FakeIo::default();
        g.run(&mut io, &[InterruptId(99)]).unwrap();
        assert_eq!(g.observable().spurious_irqs, 1);
        assert_eq!(g.observable().counter, 0);
    }

    #[test]
    fn attach_retries_are_bounded() {
        let mut g = guest();
        g.plan_attach(AttachRequest {
            vm: VmId(1),
            device: DeviceId(7),
            gpas: vec![],
            interrupts: vec![],
            flags: Default::default(),
        });
        let mut io = FakeIo {
            attach_ok: true,
            ..FakeIo::default()
        };
        for _ in 0..10 {
            let exit = g.run(&mut io, &[]).unwrap();
            if exit == ExitReason::AttachRequested {
                // host aborts every time
                io.status.insert(DeviceId(7), AttachState::Idle);
            }
        }
        assert_eq!(io.attaches, ATTACH_TRIES);
        assert!(g.ready());
    }

    #[test]
    fn attach_completes() {
        let mut g = guest();
        g.plan_attach(AttachRequest {
            vm: VmId(1),
            device: DeviceId(7),
            gpas: vec![],
            interrupts: vec![],
            flags: Default::default(),
        });
        let mut io = FakeIo {
            attach_ok: true,
            ..FakeIo::default()
        };
        assert_eq!(g.run(&mut io, &[]).unwrap(), ExitReason::AttachRequested);
        assert!(!g.ready());
        io.status.insert(DeviceId(7), AttachState::Attached);
        assert_eq!(g.run(&mut io, &[]).unwrap(), ExitReason::Idle);
        assert!(g.ready());
    }

    #[test]
    fn poll_reads_register() {
        let mut g = guest();
        let mut io = FakeIo::default();
        io.regs.insert(0x4000, 1);
        assert_eq!(g.poll_device(&mut io, 0x4000, 1).unwrap(), Some(true));
        assert_eq!(g.poll_device(&mut io, 0x4000, 1).unwrap(), Some(false));
    }
}
