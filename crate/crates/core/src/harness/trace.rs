// SPDX-License-Identifier: Apache-2.0

//! Append-only event trace. One JSON object per line, fields in declaration
//! order, so two runs of the same config serialize byte-identically.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::mem::{AccessFault, GptSelect, World};
use crate::types::{AccessKind, DeviceId, InterruptId, VmId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Iface {
    Rmi,
    Rsi,
    Smc,
}

/// Every firmware interface call the model issues.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Call {
    RmiRealmCreate,
    RmiRealmDestroy,
    RmiGranuleDelegate,
    RmiGranuleUndelegate,
    RmiDataCreate,
    RmiDataDestroy,
    RmiMapUnprotected,
    RmiDevFinalize,
    RmiRecEnter,
    RsiAttachDev,
    RsiDetachDev,
    RsiAckInt,
    SmcProtInt,
    SmcUnprotInt,
    SmcGicConfig,
    SmcAckPhys,
    SmcGptSet,
}

impl Call {
    pub fn iface(self) -> Iface {
        use Call::*;
        match self {
            RmiRealmCreate | RmiRealmDestroy | RmiGranuleDelegate | RmiGranuleUndelegate | RmiDataCreate
            | RmiDataDestroy | RmiMapUnprotected | RmiDevFinalize | RmiRecEnter => Iface::Rmi,
            RsiAttachDev | RsiDetachDev | RsiAckInt => Iface::Rsi,
            SmcProtInt | SmcUnprotInt | SmcGicConfig | SmcAckPhys | SmcGptSet => Iface::Smc,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlushScope {
    CoreGpc,
    SmmuGpc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogView {
    Realm,
    Notify,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Monitor,
    Hypervisor,
}

/// What a violation record blames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// Injected id has no un-consumed log record.
    C2,
    /// Equal-priority records injected out of arrival order.
    C3,
    /// Lower-priority id injected while a higher-priority one waits.
    C4,
    /// Oversized batch or duplicate ids.
    Malformed,
    GicConfig,
    AckPhys,
    PaMapping,
    Exclusivity,
    Attach,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitReason {
    Idle,
    Maintenance,
    AttachRequested,
    DetachRequested,
    Done,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttachPhase {
    AwaitingFinalize,
    Attached,
    Aborted,
    Detached,
    ForceReclaimed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceEvent {
    Input {
        device: DeviceId,
        byte: u8,
    },
    Assert {
        irq: InterruptId,
        device: Option<DeviceId>,
    },
    Deassert {
        irq: InterruptId,
    },
    Deliver {
        irq: InterruptId,
        target: Target,
    },
    Ack {
        irq: InterruptId,
        refire: bool,
    },
    AckIgnored {
        irq: InterruptId,
    },
    Trap {
        irq: InterruptId,
        vm: VmId,
    },
    LogAppend {
        vm: VmId,
        irq: InterruptId,
        seq: u64,
        view: LogView,
    },
    LogOverflow {
        vm: VmId,
        irq: InterruptId,
    },
    Call {
        call: Call,
        ok: bool,
    },
    Gpf {
        addr: u64,
        world: World,
    },
    Fault {
        fault: AccessFault,
    },
    WorldSwitch {
        from: World,
        to: World,
    },
    VmEnter {
        vm: VmId,
    },
    VmExit {
        vm: VmId,
        reason: ExitReason,
    },
    VgicProgram {
        vm: VmId,
        ids: Vec<InterruptId>,
    },
    VgicReject {
        vm: VmId,
        ids: Vec<InterruptId>,
    },
    VgicFire {
        vm: VmId,
        irq: InterruptId,
    },
    Inject {
        vm: VmId,
        ids: Vec<InterruptId>,
        accepted: bool,
    },
    Violation {
        check: ViolationKind,
        vm: Option<VmId>,
        detail: String,
    },
    Reset {
        device: DeviceId,
    },
    Dma {
        device: DeviceId,
        access: AccessKind,
        gpa: u64,
        bytes: u64,
        ok: bool,
    },
    Mmio {
        device: DeviceId,
        offset: u64,
        access: AccessKind,
        world: World,
        value: u64,
    },
    GptUpdate {
        tables: GptSelect,
        start: u64,
        count: u64,
        world: World,
    },
    Flush {
        scope: FlushScope,
    },
    SmmuSync {
        vm: VmId,
        streams: u32,
        entries: u32,
    },
    Eoi {
        vm: VmId,
        irq: InterruptId,
    },
    Spurious {
        vm: VmId,
        irq: InterruptId,
    },
    IntegrityFailure {
        vm: VmId,
        tag: String,
    },
    Attach {
        vm: VmId,
        device: DeviceId,
        phase: AttachPhase,
    },
    Measure {
        vm: VmId,
        digest: u64,
    },
    Warning {
        message: String,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    pub tick: u64,
    #[serde(flatten)]
    pub event: TraceEvent,
}

#[derive(Clone, Debug, Default)]
pub struct Trace {
    records: Vec<TraceRecord>,
    tick: u64,
}

impl Trace {
    pub fn emit(&mut self, event: TraceEvent) {
        let step = self.records.len() as u64;
        self.records.push(TraceRecord {
            step,
            tick: self.tick,
            event,
        });
    }

    pub fn set_tick(&mut self, tick: u64) {
        self.tick = tick;
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn events(&self) -> impl Iterator<Item = &TraceEvent> {
        self.records.iter().map(|r| &r.event)
    }

    pub fn count(&self, pred: impl Fn(&TraceEvent) -> bool) -> usize {
        self.events().filter(|e| pred(e)).count()
    }

    pub fn lines(&self) -> Vec<String> {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("trace records always serialize"))
            .collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<TraceRecord>> {
        let mut out = Vec::new();
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn steps_strictly_increase() {
        let mut t = Trace::default();
        for i in 0..5 {
            t.set_tick(i / 2);
            t.emit(TraceEvent::Deassert { irq: InterruptId(1) });
        }
        assert!(t.records().windows(2).all(|w| w[0].step < w[1].step));
    }

    #[test]
    fn field_order_is_fixed() {
        let mut t = Trace::default();
        t.emit(TraceEvent::Trap {
            irq: InterruptId(44),
            vm: VmId(1),
        });
        assert_eq!(t.lines()[0], r#"{"step":0,"tick":0,"kind":"trap","irq":44,"vm":1}"#);
    }

    #[test]
    fn jsonl_round_trip() {
        let mut t = Trace::default();
        t.emit(TraceEvent::Call {
            call: Call::RmiRecEnter,
            ok: true,
        });
        t.emit(TraceEvent::Violation {
            check: ViolationKind::C4,
            vm: Some(VmId(0)),
            detail: "x".into(),
        });
        let mut buf = Vec::new();
        t.write_jsonl(&mut buf).unwrap();
        let back = Trace::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, t.records());
    }

    #[test]
    fn call_interfaces() {
        assert_eq!(Call::RmiDevFinalize.iface(), Iface::Rmi);
        assert_eq!(Call::RsiAckInt.iface(), Iface::Rsi);
        assert_eq!(Call::SmcAckPhys.iface(), Iface::Smc);
    }
}
