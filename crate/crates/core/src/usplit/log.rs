// SPDX-License-Identifier: Apache-2.0

//! The 64-byte operation log.
//!
//! Entry layout, little-endian:
//!
//! ```text
//! [0,2)   opcode        [2,4)   flags        [4,8)   zero
//! [8,16)  target_ino    [16,24) target_off   [24,32) staging_ino
//! [32,40) staging_off   [40,48) size         [48,56) seq
//! [56,60) zero          [60,64) CRC32 (IEEE) of bytes [0,60)
//! ```
//!
//! Slots 0 and 1 hold header entries (`target_ino` = epoch,
//! `target_off` = base sequence). The valid header with the highest
//! epoch wins. Operation entries start at slot 2 and carry
//! `seq = base + slot`, so entries left behind by an older epoch are
//! recognisable even if zeroing them was interrupted.

use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::{RwLock, RwLockReadGuard};

use crate::kfs::{Fault, Ino, Kfs};
use crate::pmem::{IoClass, SharedDevice};

use super::{Result, UsplitError};

pub const ENTRY_SIZE: u64 = 64;
/// First slot available to operation entries.
pub const FIRST_SLOT: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum Opcode {
    Header = 1,
    /// `target_ino` created with birth `staging_off`.
    Create = 2,
    /// Binds `target_ino` to birth `staging_off` for this epoch.
    Open = 3,
    /// Data staged at (`staging_ino`, `staging_off`) for `size` bytes
    /// belongs at `target_off` of `target_ino`.
    Write = 4,
    /// Everything logged for (`target_ino`, birth `staging_off`) so far
    /// is durable in the target.
    FsyncDone = 5,
    Unlink = 6,
    /// First half of a rename: the moved file.
    RenameSrc = 7,
    /// Second half: the replaced file, if any (`target_ino` 0 otherwise).
    RenameDst = 8,
}

impl Opcode {
    fn from_u16(v: u16) -> Option<Opcode> {
        Some(match v {
            1 => Opcode::Header,
            2 => Opcode::Create,
            3 => Opcode::Open,
            4 => Opcode::Write,
            5 => Opcode::FsyncDone,
            6 => Opcode::Unlink,
            7 => Opcode::RenameSrc,
            8 => Opcode::RenameDst,
            _ => return None,
        })
    }
}

pub mod flags {
    /// The next entry belongs to the same operation.
    pub const CONTINUED: u16 = 1;
    pub const APPLIED_HINT: u16 = 2;
    pub const APPEND: u16 = 4;
    pub const OVERWRITE: u16 = 8;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LogEntry {
    pub opcode: Opcode,
    pub flags: u16,
    pub target_ino: u64,
    pub target_off: u64,
    pub staging_ino: u64,
    pub staging_off: u64,
    pub size: u64,
    pub seq: u64,
}

/// Result of decoding one slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Empty,
    Valid(LogEntry),
    /// Nonzero but failing the checksum or structurally invalid.
    Torn,
}

impl LogEntry {
    pub fn new(opcode: Opcode) -> Self {
        LogEntry {
            opcode,
            flags: 0,
            target_ino: 0,
            target_off: 0,
            staging_ino: 0,
            staging_off: 0,
            size: 0,
            seq: 0,
        }
    }

    pub fn encode(&self) -> [u8; 64] {
        let mut b = [0u8; 64];
        b[0..2].copy_from_slice(&(self.opcode as u16).to_le_bytes());
        b[2..4].copy_from_slice(&self.flags.to_le_bytes());
        let fields = [
            self.target_ino,
            self.target_off,
            self.staging_ino,
            self.staging_off,
            self.size,
            self.seq,
        ];
        for (i, f) in fields.iter().enumerate() {
            b[8 + i * 8..16 + i * 8].copy_from_slice(&f.to_le_bytes());
        }
        let crc = crc32fast::hash(&b[..60]);
        b[60..64].copy_from_slice(&crc.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8]) -> Slot {
        if b.iter().all(|&x| x == 0) {
            return Slot::Empty;
        }
        let crc = u32::from_le_bytes(b[60..64].try_into().unwrap());
        if crc != crc32fast::hash(&b[..60]) {
            return Slot::Torn;
        }
        let Some(opcode) = Opcode::from_u16(u16::from_le_bytes([b[0], b[1]])) else {
            return Slot::Torn;
        };
        let f = |i: usize| u64::from_le_bytes(b[8 + i * 8..16 + i * 8].try_into().unwrap());
        Slot::Valid(LogEntry {
            opcode,
            flags: u16::from_le_bytes([b[2], b[3]]),
            target_ino: f(0),
            target_off: f(1),
            staging_ino: f(2),
            staging_off: f(3),
            size: f(4),
            seq: f(5),
        })
    }

    pub fn header(epoch: u64, base: u64) -> Self {
        LogEntry {
            target_ino: epoch,
            target_off: base,
            ..LogEntry::new(Opcode::Header)
        }
    }
}

/// Device placement of the log file: `(file_off, len, dev_addr)` runs.
#[derive(Debug, Clone)]
pub(crate) struct LogPlacement {
    pub runs: Vec<(u64, u64, u64)>,
    pub slots: u64,
}

impl LogPlacement {
    pub fn build(kfs: &Kfs, ino: Ino, size: u64) -> Result<Self> {
        let mut runs = Vec::new();
        let mut off = 0;
        for (dev, len) in kfs.map_extents(ino, 0, size)? {
            runs.push((off, len, dev));
            off += len;
        }
        Ok(LogPlacement {
            runs,
            slots: size / ENTRY_SIZE,
        })
    }

    pub fn slot_addr(&self, slot: u64) -> u64 {
        let off = slot * ENTRY_SIZE;
        let i = self.runs.partition_point(|r| r.0 + r.1 <= off);
        let (f, _, d) = self.runs[i];
        d + (off - f)
    }
}

/// Reads the winning header: `(epoch, base)`, or `(0, 0)` when neither
/// header slot is valid. Also returns the slot holding it.
pub(crate) fn read_header(dev: &SharedDevice, place: &LogPlacement) -> Result<(u64, u64, u64)> {
    let d = dev.read();
    let mut best = (0u64, 0u64, 1u64);
    for slot in 0..FIRST_SLOT {
        let raw = d.volatile_slice(place.slot_addr(slot), ENTRY_SIZE)?;
        if let Slot::Valid(e) = LogEntry::decode(raw) {
            if e.opcode == Opcode::Header && e.target_ino >= best.0 {
                best = (e.target_ino, e.target_off, slot);
            }
        }
    }
    Ok(best)
}

/// Live log state of one instance.
pub(crate) struct OpLog {
    pub place: LogPlacement,
    /// Next free slot.
    tail: AtomicU64,
    pub epoch: AtomicU64,
    pub base: AtomicU64,
    pub header_slot: AtomicU64,
    /// Appenders hold it shared; checkpoint holds it exclusively.
    pub gate: RwLock<()>,
}

/// Reserved run of log slots. The gate stays shared until dropped.
pub(crate) struct Ticket<'a> {
    pub first: u64,
    _guard: RwLockReadGuard<'a, ()>,
}

impl OpLog {
    pub fn new(place: LogPlacement, epoch: u64, base: u64, header_slot: u64, tail: u64) -> Self {
        OpLog {
            place,
            tail: AtomicU64::new(tail),
            epoch: AtomicU64::new(epoch),
            base: AtomicU64::new(base),
            header_slot: AtomicU64::new(header_slot),
            gate: RwLock::new(()),
        }
    }

    pub fn tail(&self) -> u64 {
        self.tail.load(Ordering::Acquire)
    }

    pub fn capacity(&self) -> u64 {
        self.place.slots - FIRST_SLOT
    }

    /// Claims `n` consecutive slots by compare-and-swap on the tail.
    /// `None` means the log is full.
    pub fn try_reserve(&self, n: u64) -> Result<Option<Ticket<'_>>> {
        if n > self.capacity() {
            return Err(UsplitError::InvalidArgument(format!(
                "operation needs {n} log entries, log holds {}",
                self.capacity()
            )));
        }
        let guard = self.gate.read();
        let mut t = self.tail.load(Ordering::Acquire);
        loop {
            if t + n > self.place.slots {
                return Ok(None);
            }
            match self.tail.compare_exchange_weak(t, t + n, Ordering::AcqRel, Ordering::Acquire) {
                Ok(_) => {
                    return Ok(Some(Ticket {
                        first: t,
                        _guard: guard,
                    }))
                }
                Err(now) => t = now,
            }
        }
    }

    /// Writes `entry` into `slot` with one non-temporal store and one fence.
    pub fn write_slot(&self, dev: &SharedDevice, kfs: &Kfs, slot: u64, mut entry: LogEntry) -> Result<()> {
        entry.seq = self.base.load(Ordering::Acquire) + slot;
        let bytes = entry.encode();
        let mut d = dev.write();
        let prev = d.set_class(IoClass::Log);
        d.store_nt(self.place.slot_addr(slot), &bytes)?;
        if !kfs.fault_active(Fault::SkipLogFence) {
            d.fence();
        }
        d.note_log_entry();
        d.set_class(prev);
        Ok(())
    }

    /// Starts a new epoch: durable header first, then the old entries
    /// are zeroed. Caller holds the gate exclusively.
    pub fn reset(&self, dev: &SharedDevice) -> Result<()> {
        let epoch = self.epoch.load(Ordering::Acquire) + 1;
        let base = self.base.load(Ordering::Acquire) + self.place.slots;
        let slot = 1 - self.header_slot.load(Ordering::Acquire);
        let used = self.tail().max(FIRST_SLOT);
        let mut d = dev.write();
        let prev = d.set_class(IoClass::Log);
        d.store_nt(self.place.slot_addr(slot), &LogEntry::header(epoch, base).encode())?;
        d.fence();
        let mut dirty = false;
        for s in FIRST_SLOT..used.min(self.place.slots) {
            let a = self.place.slot_addr(s);
            if d.volatile_slice(a, ENTRY_SIZE)?.iter().any(|&b| b != 0) {
                d.zero_nt(a, ENTRY_SIZE)?;
                dirty = true;
            }
        }
        if dirty {
            d.fence();
        }
        d.set_class(prev);
        self.epoch.store(epoch, Ordering::Release);
        self.base.store(base, Ordering::Release);
        self.header_slot.store(slot, Ordering::Release);
        self.tail.store(FIRST_SLOT, Ordering::Release);
        Ok(())
    }

    /// Bumps the tail past slots written directly under the exclusive gate.
    pub fn set_tail(&self, t: u64) {
        self.tail.store(t, Ordering::Release);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entry_round_trip() {
        let e = LogEntry {
            opcode: Opcode::Write,
            flags: flags::APPEND,
            target_ino: 3,
            target_off: 4096,
            staging_ino: 7,
            staging_off: 8192,
            size: 100,
            seq: 42,
        };
        let b = e.encode();
        assert_eq!(b.len(), 64);
        assert_eq!(&b[4..8], &[0; 4]);
        assert_eq!(&b[56..60], &[0; 4]);
        assert_eq!(LogEntry::decode(&b), Slot::Valid(e));
    }

    #[test]
    fn zero_slot_is_empty_and_flip_is_torn() {
        assert_eq!(LogEntry::decode(&[0u8; 64]), Slot::Empty);
        let mut b = LogEntry::new(Opcode::Open).encode();
        b[9] ^= 0x10;
        assert_eq!(LogEntry::decode(&b), Slot::Torn);
    }

    #[test]
    fn checksum_covers_first_sixty_bytes() {
        let b = LogEntry::new(Opcode::Unlink).encode();
        let crc = crc32fast::hash(&b[..60]);
        assert_eq!(u32::from_le_bytes(b[60..64].try_into().unwrap()), crc);
    }
}
