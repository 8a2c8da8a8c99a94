// SPDX-License-Identifier: Apache-2.0

//! Deterministic simulator of integrated-device attachment to confidential
//! realm VMs: two granule protection tables, mirrored stage-2 tables for the
//! CPU and SMMU paths, and checked virtual interrupt injection.

pub mod devices;
pub mod error;
pub mod gic;
pub mod guest;
pub mod harness;
pub mod hypervisor;
pub mod mem;
pub mod monitor;
pub mod platform;
pub mod rmm;
pub mod types;

pub use error::{Result, SimError};
