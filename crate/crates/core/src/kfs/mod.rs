// SPDX-License-Identifier: Apache-2.0

//! Kernel-side file system: a journaled, extent-based store with a flat
//! namespace, a direct (DAX-style) data path and an atomic `relink`.
//!
//! Every mutating operation is planned into a line overlay first; nothing
//! reaches the device until the plan is complete, so errors such as
//! `NoSpace` leave no partial effects.

mod alloc;
mod fs;
mod fsck;
mod inode;
mod journal;
pub mod layout;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pmem::PmemError;

pub use fs::{Fault, Kfs, RelinkOp, Segment, Stat};
pub use fsck::FsckReport;
pub use layout::{Extent, Geometry, BLOCK_SIZE, MAX_EXTENT_BLOCKS, NAME_MAX};

/// Inode number. Zero is never a valid file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Ino(pub u32);

impl fmt::Display for Ino {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ino {}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KfsError {
    #[error(transparent)]
    Device(#[from] PmemError),
    #[error("unmountable: {0}")]
    BadSuperblock(String),
    #[error("bad geometry: {0}")]
    BadGeometry(String),
    #[error("no such file: {0}")]
    NotFound(String),
    #[error("file exists: {0}")]
    Exists(String),
    #[error("invalid file name {0:?}")]
    BadName(String),
    #[error("{0} does not exist")]
    NoSuchInode(Ino),
    #[error("no space left on device")]
    NoSpace,
    #[error("inode table full")]
    NoInodes,
    #[error("namespace full")]
    NamespaceFull,
    #[error("{ino}: hole at offset {off}")]
    Hole { ino: Ino, off: u64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("transaction needs {needed} journal bytes, journal holds {capacity}")]
    TxnTooLarge { needed: u64, capacity: u64 },
    #[error("corrupt metadata: {0}")]
    Corrupt(String),
}

pub type Result<T> = std::result::Result<T, KfsError>;
