// SPDX-License-Identifier: Apache-2.0

//! Pool of pre-allocated staging files.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::kfs::{Ino, Kfs, BLOCK_SIZE};

use super::Result;

pub(crate) fn staging_prefix(instance: u32) -> String {
    format!(".stage.{instance}.")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub(crate) struct StagingFile {
    pub ino: Ino,
    pub index: u64,
    pub capacity: u64,
    /// Next free byte; space is handed out monotonically.
    pub cursor: u64,
    /// Staged bytes still referenced by some overlay.
    pub live: u64,
    /// `(file_off, len, dev_addr)` runs.
    pub runs: Vec<(u64, u64, u64)>,
}

impl StagingFile {
    fn name(instance: u32, index: u64) -> String {
        format!("{}{index}", staging_prefix(instance))
    }

    fn load(kfs: &Kfs, ino: Ino, index: u64, capacity: u64) -> Result<Self> {
        kfs.preallocate(ino, 0, capacity)?;
        let mut runs = Vec::new();
        let mut off = 0;
        for (dev, len) in kfs.map_extents(ino, 0, capacity)? {
            runs.push((off, len, dev));
            off += len;
        }
        Ok(StagingFile {
            ino,
            index,
            capacity,
            cursor: 0,
            live: 0,
            runs,
        })
    }

    fn create(kfs: &Kfs, instance: u32, index: u64, capacity: u64) -> Result<Self> {
        let ino = kfs.create(&Self::name(instance, index))?;
        Self::load(kfs, ino, index, capacity)
    }

    /// Device-contiguous pieces of `[off, off + len)`.
    fn pieces(&self, off: u64, len: u64) -> Vec<(u64, u64, u64)> {
        let mut out = Vec::new();
        let end = off + len;
        let mut i = self.runs.partition_point(|r| r.0 + r.1 <= off);
        let mut pos = off;
        while pos < end {
            let (f, l, d) = self.runs[i];
            let stop = (f + l).min(end);
            out.push((pos, stop - pos, d + (pos - f)));
            pos = stop;
            i += 1;
        }
        out
    }
}

/// One staging allocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Chunk {
    pub staging_ino: Ino,
    pub staging_off: u64,
    pub len: u64,
    /// `(staging_off, len, dev_addr)` device-contiguous pieces.
    pub pieces: Vec<(u64, u64, u64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct StagingPool {
    instance: u32,
    size: u64,
    count: usize,
    next_index: u64,
    /// Front is the file currently handing out space.
    ready: VecDeque<StagingFile>,
    /// Exhausted files waiting for their live bytes to drain.
    draining: Vec<StagingFile>,
    /// Replacement requests handed to a background worker.
    #[serde(default)]
    pending: usize,
}

impl StagingPool {
    /// Takes over staging files left by an earlier run of this instance
    /// and tops the pool up to `count` files.
    pub fn adopt(kfs: &Kfs, instance: u32, size: u64, count: usize) -> Result<Self> {
        let prefix = staging_prefix(instance);
        let mut found: Vec<(u64, Ino)> = kfs
            .list()
            .into_iter()
            .filter_map(|(n, ino)| n.strip_prefix(&prefix).and_then(|s| s.parse().ok()).map(|i| (i, ino)))
            .collect();
        found.sort();
        let mut pool = StagingPool {
            instance,
            size,
            count,
            next_index: found.last().map(|f| f.0 + 1).unwrap_or(0),
            ready: VecDeque::new(),
            draining: Vec::new(),
            pending: 0,
        };
        for (index, ino) in found {
            pool.ready.push_back(StagingFile::load(kfs, ino, index, size)?);
        }
        while pool.ready.len() < count {
            pool.add_inline(kfs)?;
        }
        Ok(pool)
    }

    pub fn max_chunk(&self) -> u64 {
        self.size - BLOCK_SIZE
    }

    pub fn files(&self) -> impl Iterator<Item = &StagingFile> {
        self.ready.iter().chain(self.draining.iter())
    }

    /// Staged bytes still referenced.
    pub fn live_bytes(&self) -> u64 {
        self.files().map(|f| f.live).sum()
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.files().map(|f| f.capacity).sum()
    }

    fn add_inline(&mut self, kfs: &Kfs) -> Result<()> {
        let f = StagingFile::create(kfs, self.instance, self.next_index, self.size)?;
        self.next_index += 1;
        self.ready.push_back(f);
        Ok(())
    }

    /// Reserves an index for a file created outside the pool lock.
    pub fn claim_index(&mut self) -> (u32, u64, u64) {
        let i = self.next_index;
        self.next_index += 1;
        (self.instance, i, self.size)
    }

    pub fn add_created(&mut self, f: StagingFile) {
        self.pending = self.pending.saturating_sub(1);
        self.ready.push_back(f);
    }

    /// A background replacement failed; the next exhaustion retries.
    pub fn cancel_pending(&mut self) {
        self.pending = self.pending.saturating_sub(1);
    }

    pub fn create_detached(kfs: &Kfs, instance: u32, index: u64, size: u64) -> Result<StagingFile> {
        StagingFile::create(kfs, instance, index, size)
    }

    /// Allocates `len` bytes whose staging offset is congruent with
    /// `target_off` modulo the block size. Returns the chunk and whether
    /// a replacement file should be produced in the background.
    pub fn alloc(&mut self, kfs: &Kfs, target_off: u64, len: u64, background: bool) -> Result<(Chunk, bool)> {
        debug_assert!(len > 0 && len <= self.max_chunk());
        let mut want_bg = false;
        loop {
            if self.ready.is_empty() {
                self.add_inline(kfs)?;
            }
            let f = self.ready.front_mut().unwrap();
            let skew = (target_off % BLOCK_SIZE + BLOCK_SIZE - f.cursor % BLOCK_SIZE) % BLOCK_SIZE;
            let off = f.cursor + skew;
            if off + len <= f.capacity {
                f.cursor = off + len;
                f.live += len;
                let chunk = Chunk {
                    staging_ino: f.ino,
                    staging_off: off,
                    len,
                    pieces: f.pieces(off, len),
                };
                return Ok((chunk, want_bg));
            }
            let done = self.ready.pop_front().unwrap();
            if done.live == 0 {
                kfs.unlink(&StagingFile::name(self.instance, done.index))?;
            } else {
                self.draining.push(done);
            }
            if self.ready.len() + self.pending < self.count {
                if background {
                    self.pending += 1;
                    want_bg = true;
                } else {
                    self.add_inline(kfs)?;
                }
            }
        }
    }

    /// Drops `bytes` of live data from `ino`; retires it when exhausted
    /// and empty.
    pub fn release(&mut self, kfs: &Kfs, ino: Ino, bytes: u64) -> Result<()> {
        if let Some(f) = self.ready.iter_mut().find(|f| f.ino == ino) {
            f.live = f.live.saturating_sub(bytes);
            return Ok(());
        }
        if let Some(i) = self.draining.iter().position(|f| f.ino == ino) {
            let f = &mut self.draining[i];
            f.live = f.live.saturating_sub(bytes);
            if f.live == 0 {
                let f = self.draining.swap_remove(i);
                kfs.unlink(&StagingFile::name(self.instance, f.index))?;
            }
        }
        Ok(())
    }
}
