// SPDX-License-Identifier: Apache-2.0

//! Emulated byte-addressable persistent memory.
//!
//! The device keeps two images. Loads observe the volatile image; the
//! persistent image holds what survives a crash under the strict-epoch
//! policy. Stores are tracked per 64-byte cache line as a program-ordered
//! list of pending 8-byte granules until a fence moves the flushed (or
//! non-temporal) ones into the persistent image.

mod counters;
mod device;
mod trace;

use std::sync::Arc;

use parking_lot::RwLock;
use thiserror::Error;

pub use counters::{ClassCounters, IoClass, IoCounters};
pub use device::{PendingGranule, PmemDevice, Policy, SnapshotKind};
pub use trace::{dump_trace, granules, parse_trace, TraceEvent};

/// Cache line size in bytes.
pub const LINE_SIZE: u64 = 64;
/// Store atomicity unit in bytes.
pub const GRANULE_SIZE: u64 = 8;
/// Device capacity must be a multiple of this.
pub const PAGE_SIZE: u64 = 4096;

/// A device shared between the kernel-side file system and user-space
/// library instances. Mutations take the write lock; loads may share.
pub type SharedDevice = Arc<RwLock<PmemDevice>>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PmemError {
    #[error("access [{addr:#x}, +{len}) out of device bounds ({capacity} bytes)")]
    OutOfBounds { addr: u64, len: u64, capacity: u64 },
    #[error("capacity {0} is not a positive multiple of 4096")]
    BadCapacity(u64),
    #[error("crash choice for line {line:#x} keeps {requested} granules but only {pending} are pending")]
    BadChoice {
        line: u64,
        requested: usize,
        pending: usize,
    },
    #[error("malformed trace line {line}: {reason}")]
    BadTrace { line: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, PmemError>;

#[inline]
pub(crate) fn line_of(addr: u64) -> u64 {
    addr & !(LINE_SIZE - 1)
}
