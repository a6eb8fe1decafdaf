// SPDX-License-Identifier: Apache-2.0

//! User-space library file system.
//!
//! Reads and in-place overwrites go straight to the device through
//! cached mappings. Appends (and, in strict mode, all writes) land in
//! pre-allocated staging files and are moved into the target with
//! `relink` on `fsync` or `close`. Strict mode additionally records every
//! operation in a 64-byte checksummed log that recovery replays.

mod context;
mod instance;
pub mod log;
mod overlay;
mod recover;
mod staging;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kfs::KfsError;
use crate::pmem::PmemError;

pub use context::Context;
pub use instance::{FileStat, Usplit, Whence};
pub use log::{LogEntry, Opcode, Slot};
pub use overlay::{Overlay, StagedPiece, StagedRange};
pub use recover::RecoveryStats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    Posix,
    Sync,
    Strict,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Posix, Mode::Sync, Mode::Strict];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Posix => "posix",
            Mode::Sync => "sync",
            Mode::Strict => "strict",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "posix" => Ok(Mode::Posix),
            "sync" => Ok(Mode::Sync),
            "strict" => Ok(Mode::Strict),
            _ => Err(format!("unknown mode {s:?} (posix, sync, strict)")),
        }
    }
}

/// How `fsync` moves staged data into the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FsyncStrategy {
    /// Extent swap; block-aligned data is never copied.
    Relink,
    /// Copy staged bytes into the target through the kernel path.
    Copy,
}

/// File descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Fd(pub u32);

impl fmt::Display for Fd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "fd {}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Config {
    /// Distinguishes the hidden staging and log files of instances that
    /// share a device.
    pub instance_id: u32,
    /// Size of one cached mapping region.
    pub map_size: u64,
    pub staging_count: usize,
    pub staging_size: u64,
    pub log_size: u64,
    pub fsync_strategy: FsyncStrategy,
    /// Produce replacement staging files on a worker thread.
    pub background_replenish: bool,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            instance_id: 0,
            map_size: 2 << 20,
            staging_count: 10,
            staging_size: 4 << 20,
            log_size: 8 << 20,
            fsync_strategy: FsyncStrategy::Relink,
            background_replenish: false,
        }
    }
}

impl Config {
    /// Full-size tunables: ten 160 MiB staging files and a 128 MiB log.
    pub fn full_size() -> Self {
        Config {
            staging_size: 160 << 20,
            log_size: 128 << 20,
            ..Config::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(UsplitError::InvalidArgument(m.to_string()));
        if self.map_size == 0 || self.map_size % 4096 != 0 {
            return bad("map_size must be a positive multiple of 4096");
        }
        if self.staging_size < 8192 || self.staging_size % 4096 != 0 {
            return bad("staging_size must be a multiple of 4096 and at least 8192");
        }
        if self.staging_count == 0 {
            return bad("staging_count must be positive");
        }
        if self.log_size < 4096 || self.log_size % 4096 != 0 {
            return bad("log_size must be a multiple of 4096");
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum UsplitError {
    #[error(transparent)]
    Kfs(#[from] KfsError),
    #[error(transparent)]
    Device(#[from] PmemError),
    #[error("bad file descriptor {0}")]
    BadFd(Fd),
    #[error("{0} refers to a removed file")]
    Stale(Fd),
    #[error("name {0:?} is reserved")]
    Reserved(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("context: {0}")]
    Context(String),
}

pub type Result<T> = std::result::Result<T, UsplitError>;

/// Names starting with a dot belong to the library.
pub fn is_hidden(name: &str) -> bool {
    name.starts_with('.')
}

pub(crate) fn log_name(instance: u32) -> String {
    format!(".oplog.{instance}")
}
