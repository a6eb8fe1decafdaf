// SPDX-License-Identifier: Apache-2.0

//! Log replay.
//!
//! The scan stops at the first torn slot or the first entry whose
//! sequence number belongs to another epoch. A trailing operation whose
//! continuation entries are missing is dropped whole. Writes are grouped
//! per `(ino, birth)`; everything before the last `FsyncDone` of a file
//! is already durable. The rest is applied last-writer-wins with relink.
//! Staging blocks that are already holes were moved by an earlier,
//! committed relink and are skipped, so replay is idempotent.

use std::time::{Duration, Instant};

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::kfs::{Ino, Kfs, KfsError, RelinkOp};
use crate::pmem::SharedDevice;

use super::instance::relink_all;
use super::log::{flags, read_header, LogEntry, LogPlacement, OpLog, Opcode, Slot, ENTRY_SIZE, FIRST_SLOT};
use super::overlay::{Overlay, StagedPiece};
use super::Result;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryStats {
    /// Valid entries read before the scan stopped.
    pub entries_scanned: u64,
    /// Write entries whose data was (re)applied.
    pub entries_replayed: u64,
    /// Entries dropped: an incomplete trailing operation or a stale binding.
    pub entries_discarded: u64,
    pub torn: bool,
    pub relinks: u64,
    pub elapsed: Duration,
}

pub(crate) fn replay(kfs: &Kfs, dev: &SharedDevice, place: LogPlacement) -> Result<(OpLog, RecoveryStats)> {
    let t0 = Instant::now();
    let (epoch, base, hslot) = read_header(dev, &place)?;
    let mut stats = RecoveryStats::default();

    let mut entries: Vec<LogEntry> = Vec::new();
    let mut dirty = false;
    {
        let d = dev.read();
        for slot in FIRST_SLOT..place.slots {
            match LogEntry::decode(d.volatile_slice(place.slot_addr(slot), ENTRY_SIZE)?) {
                Slot::Empty => continue,
                Slot::Torn => {
                    dirty = true;
                    stats.torn = true;
                    break;
                }
                Slot::Valid(e) => {
                    dirty = true;
                    if e.opcode == Opcode::Header || e.seq != base + slot {
                        break;
                    }
                    entries.push(e);
                }
            }
        }
    }
    stats.entries_scanned = entries.len() as u64;

    // An operation is a run of entries all but the last flagged CONTINUED.
    while entries.last().is_some_and(|e| e.flags & flags::CONTINUED != 0) {
        entries.pop();
        stats.entries_discarded += 1;
    }

    let mut bound: FxHashMap<u64, u64> = FxHashMap::default();
    let mut pending: FxHashMap<(u64, u64), Vec<LogEntry>> = FxHashMap::default();
    for e in &entries {
        match e.opcode {
            Opcode::Create | Opcode::Open => {
                bound.insert(e.target_ino, e.staging_off);
            }
            Opcode::Write => match bound.get(&e.target_ino) {
                Some(&b) => pending.entry((e.target_ino, b)).or_default().push(*e),
                None => stats.entries_discarded += 1,
            },
            Opcode::FsyncDone => {
                pending.remove(&(e.target_ino, e.staging_off));
            }
            // The removal may not have reached kfs before the crash; the
            // birth check below decides whether the file still exists.
            Opcode::Unlink | Opcode::RenameDst => {
                bound.remove(&e.target_ino);
            }
            Opcode::RenameSrc | Opcode::Header => {}
        }
    }

    let mut targets: Vec<_> = pending.into_iter().collect();
    targets.sort_by_key(|t| t.0);
    let mut ops: Vec<RelinkOp> = Vec::new();
    for ((ino, birth), writes) in targets {
        let target = Ino(ino as u32);
        match kfs.stat(target) {
            Ok(st) if st.birth == birth => {}
            Ok(_) | Err(KfsError::NoSuchInode(_)) => {
                stats.entries_discarded += writes.len() as u64;
                continue;
            }
            Err(e) => return Err(e.into()),
        }
        let mut ov = Overlay::default();
        for w in &writes {
            ov.insert(
                w.target_off,
                w.size,
                StagedPiece {
                    staging_ino: Ino(w.staging_ino as u32),
                    staging_off: w.staging_off,
                    dev: None,
                },
            );
        }
        stats.entries_replayed += writes.len() as u64;
        for r in ov.coalesced() {
            let segs = match kfs.map_range(r.staging_ino, r.staging_off, r.len) {
                Ok(s) => s,
                Err(KfsError::NoSuchInode(_)) => continue,
                Err(e) => return Err(e.into()),
            };
            for s in segs.into_iter().filter(|s| s.dev.is_some()) {
                ops.push(RelinkOp {
                    src: r.staging_ino,
                    src_off: s.file_off,
                    dst: target,
                    dst_off: r.target_off + (s.file_off - r.staging_off),
                    size: s.len,
                });
            }
        }
    }
    stats.relinks = ops.len() as u64;
    relink_all(kfs, &ops)?;

    let log = OpLog::new(place, epoch, base, hslot, FIRST_SLOT);
    if dirty {
        // Watermark the replayed epoch so a second recovery sees nothing.
        let _g = log.gate.write();
        log.set_tail(log.place.slots);
        log.reset(dev)?;
    }
    stats.elapsed = t0.elapsed();
    Ok((log, stats))
}
