// SPDX-License-Identifier: Apache-2.0

use thiserror::Error;

use crate::types::{DeviceId, InterruptId, VmId};

/// Model errors: configuration bugs or broken simulator invariants. These are
/// never the expected outcome of an attack; attacks surface as faults,
/// rejections and violation records instead.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("granule {0:#x} is outside modeled memory")]
    GranuleOutOfRange(u64),
    #[error("unknown interrupt {0}")]
    UnknownInterrupt(InterruptId),
    #[error("unknown device {0}")]
    UnknownDevice(DeviceId),
    #[error("unknown vm {0}")]
    UnknownVm(VmId),
    #[error("offset {offset:#x} is outside the MMIO window of {device}")]
    MmioOffset { device: DeviceId, offset: u64 },
    #[error("{device} is not DMA capable")]
    NotDmaCapable { device: DeviceId },
    #[error("{0} reached the monitor trap handler without being protected")]
    UnprotectedTrap(InterruptId),
    #[error("config: {field}: {message}")]
    Config { field: String, message: String },
    #[error("step limit of {0} events exceeded (livelock or interrupt storm)")]
    StepLimitExceeded(u64),
    #[error("invariant broken: {0}")]
    Invariant(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SimError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        SimError::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;
