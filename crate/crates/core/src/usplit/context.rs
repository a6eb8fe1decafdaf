// SPDX-License-Identifier: Apache-2.0

//! Serialized instance state, handed across an exec boundary.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::kfs::{Ino, Kfs};

use super::instance::{FileState, OpenFile, Usplit};
use super::log::{LogPlacement, OpLog};
use super::overlay::Overlay;
use super::recover::RecoveryStats;
use super::staging::StagingPool;
use super::{log_name, Config, Mode, Result, UsplitError};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FileSnapshot {
    ino: Ino,
    birth: u64,
    ksize: u64,
    attrs_valid: bool,
    overlay: Overlay,
    open: usize,
    logged_epoch: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LogSnapshot {
    tail: u64,
    epoch: u64,
    base: u64,
    header_slot: u64,
}

/// Everything needed to rebuild an instance without touching the device.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Context {
    mode: Mode,
    config: Config,
    /// Descriptor number to index into `offsets`; dups share an index.
    fds: Vec<(u32, usize)>,
    /// `(ino, offset, stale)` per open-file description.
    offsets: Vec<(Ino, u64, bool)>,
    files: Vec<FileSnapshot>,
    pool: StagingPool,
    log: Option<LogSnapshot>,
}

impl Context {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("context serializes")
    }

    pub fn from_json(s: &str) -> Result<Context> {
        serde_json::from_str(s).map_err(|e| UsplitError::Context(e.to_string()))
    }
}

impl Usplit {
    pub fn save_context(&self) -> Context {
        let fds = self.fds.read();
        let mut descs: Vec<Arc<OpenFile>> = Vec::new();
        let mut fd_list = Vec::new();
        for (&n, of) in fds.iter() {
            let i = match descs.iter().position(|d| Arc::ptr_eq(d, of)) {
                Some(i) => i,
                None => {
                    descs.push(of.clone());
                    descs.len() - 1
                }
            };
            fd_list.push((n, i));
        }
        let offsets = descs
            .iter()
            .map(|d| (d.ino, *d.offset.lock(), d.stale.load(Ordering::Acquire)))
            .collect();
        let mut files: Vec<FileSnapshot> = self
            .files
            .read()
            .iter()
            .map(|(&ino, s)| {
                let s = s.lock();
                FileSnapshot {
                    ino,
                    birth: s.birth,
                    ksize: s.ksize,
                    attrs_valid: s.attrs_valid,
                    overlay: s.overlay.clone(),
                    open: s.open,
                    logged_epoch: s.logged_epoch,
                }
            })
            .collect();
        files.sort_by_key(|f| f.ino);
        let log = self.log.as_ref().map(|l| LogSnapshot {
            tail: l.tail(),
            epoch: l.epoch.load(Ordering::Acquire),
            base: l.base.load(Ordering::Acquire),
            header_slot: l.header_slot.load(Ordering::Acquire),
        });
        Context {
            mode: self.mode,
            config: self.cfg.clone(),
            fds: fd_list,
            offsets,
            files,
            pool: self.pool.lock().clone(),
            log,
        }
    }

    /// Rebuilds an instance from a saved context. No recovery runs; the
    /// staged data and log are taken over as they are.
    pub fn load_context(kfs: Arc<Kfs>, ctx: Context) -> Result<Usplit> {
        let log = match &ctx.log {
            Some(l) => {
                let ino = kfs.lookup(&log_name(ctx.config.instance_id))?;
                let size = kfs.stat(ino)?.size;
                let place = LogPlacement::build(&kfs, ino, size)?;
                Some(OpLog::new(place, l.epoch, l.base, l.header_slot, l.tail))
            }
            None => None,
        };
        let u = Usplit::assemble(kfs, ctx.mode, ctx.config, ctx.pool, log, RecoveryStats::default());
        {
            let mut files = u.files.write();
            for f in ctx.files {
                let st = FileState {
                    birth: f.birth,
                    ksize: f.ksize,
                    attrs_valid: f.attrs_valid,
                    overlay: f.overlay,
                    open: f.open,
                    logged_epoch: f.logged_epoch,
                    ..FileState::default()
                };
                files.insert(f.ino, Arc::new(Mutex::new(st)));
            }
        }
        let descs: Vec<Arc<OpenFile>> = ctx
            .offsets
            .into_iter()
            .map(|(ino, off, stale)| {
                Arc::new(OpenFile {
                    ino,
                    offset: Mutex::new(off),
                    stale: AtomicBool::new(stale),
                })
            })
            .collect();
        let mut table = BTreeMap::new();
        for (n, i) in ctx.fds {
            let d = descs
                .get(i)
                .ok_or_else(|| UsplitError::Context(format!("descriptor {n} refers to missing entry {i}")))?;
            table.insert(n, d.clone());
        }
        *u.fds.write() = table;
        Ok(u)
    }
}
