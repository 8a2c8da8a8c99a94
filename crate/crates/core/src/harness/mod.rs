// SPDX-License-Identifier: Apache-2.0

//! Scenario configuration, the event engine, traces and metrics.

pub mod compare;
pub mod config;
pub mod engine;
pub mod metrics;
pub mod replay;
pub mod scenarios;
pub mod trace;
