// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};

/// Device-wide I/O counters. All values only grow between named
/// checkpoint boundaries (see [`super::PmemDevice::reset_counters`]).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoCounters {
    pub bytes_stored: u64,
    pub bytes_stored_nt: u64,
    pub flush_count: u64,
    pub fence_count: u64,
    pub bytes_persisted: u64,
    pub journal_commit_count: u64,
    pub log_entries_written: u64,
    pub relink_data_bytes_copied: u64,
}

impl IoCounters {
    /// Field-wise difference `self - earlier`.
    pub fn since(&self, earlier: &IoCounters) -> IoCounters {
        IoCounters {
            bytes_stored: self.bytes_stored - earlier.bytes_stored,
            bytes_stored_nt: self.bytes_stored_nt - earlier.bytes_stored_nt,
            flush_count: self.flush_count - earlier.flush_count,
            fence_count: self.fence_count - earlier.fence_count,
            bytes_persisted: self.bytes_persisted - earlier.bytes_persisted,
            journal_commit_count: self.journal_commit_count - earlier.journal_commit_count,
            log_entries_written: self.log_entries_written - earlier.log_entries_written,
            relink_data_bytes_copied: self.relink_data_bytes_copied
                - earlier.relink_data_bytes_copied,
        }
    }
}

/// Attribution bucket for stores, flushes and fences. The active class is
/// set by whoever holds the device write lock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IoClass {
    /// File data, staging data, zero-fill.
    Data,
    /// Journal descriptor, records and commit blocks.
    Journal,
    /// In-place metadata checkpoint writes.
    Metadata,
    /// User-space operation log.
    Log,
}

impl IoClass {
    pub const ALL: [IoClass; 4] = [IoClass::Data, IoClass::Journal, IoClass::Metadata, IoClass::Log];

    pub(crate) fn index(self) -> usize {
        match self {
            IoClass::Data => 0,
            IoClass::Journal => 1,
            IoClass::Metadata => 2,
            IoClass::Log => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounters {
    pub bytes_stored: u64,
    pub bytes_stored_nt: u64,
    pub flush_count: u64,
    pub fence_count: u64,
}

impl ClassCounters {
    pub fn since(&self, earlier: &ClassCounters) -> ClassCounters {
        ClassCounters {
            bytes_stored: self.bytes_stored - earlier.bytes_stored,
            bytes_stored_nt: self.bytes_stored_nt - earlier.bytes_stored_nt,
            flush_count: self.flush_count - earlier.flush_count,
            fence_count: self.fence_count - earlier.fence_count,
        }
    }
}
