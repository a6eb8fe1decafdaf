// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use super::counters::{ClassCounters, IoClass, IoCounters};
use super::trace::TraceEvent;
use super::{line_of, PmemError, Result, GRANULE_SIZE, LINE_SIZE, PAGE_SIZE};

/// Crash persistence model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Policy {
    /// Only flushed (or non-temporal) granules that a fence has covered
    /// survive.
    StrictEpoch,
    /// Additionally, any per-line prefix of the pending granule sequence
    /// may survive.
    Adversarial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnapshotKind {
    Volatile,
    Persistent,
}

/// One store's bytes within a single line. It stands for the 8-byte
/// granules it touches, in ascending order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Entry {
    /// Bit `i` set when byte `i` of the line is written.
    mask: u64,
    flushed: bool,
    nt: bool,
    data: [u8; 64],
}

impl Entry {
    fn committed(&self) -> bool {
        self.flushed || self.nt
    }

    fn chunk_mask(&self, c: usize) -> u8 {
        (self.mask >> (c * 8)) as u8
    }

    fn granule_count(&self) -> usize {
        (0..8).filter(|&c| self.chunk_mask(c) != 0).count()
    }

    /// `(chunk index, byte mask, chunk data)` of each granule.
    fn granules(&self) -> impl Iterator<Item = (usize, u8, [u8; 8])> + '_ {
        (0..8).filter_map(|c| {
            let m = self.chunk_mask(c);
            (m != 0).then(|| (c, m, self.data[c * 8..c * 8 + 8].try_into().unwrap()))
        })
    }

    fn apply_to(&self, dst: &mut [u8]) {
        if self.mask == u64::MAX {
            dst.copy_from_slice(&self.data);
            return;
        }
        let mut m = self.mask;
        while m != 0 {
            let i = m.trailing_zeros() as usize;
            dst[i] = self.data[i];
            m &= m - 1;
        }
    }
}

fn byte_mask(lo: u64, hi: u64) -> u64 {
    if hi - lo == 64 {
        u64::MAX
    } else {
        ((1u64 << (hi - lo)) - 1) << lo
    }
}

/// Read-only view of a pending granule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PendingGranule {
    /// Address of the 8-byte chunk.
    pub chunk_addr: u64,
    pub mask: u8,
    pub data: [u8; 8],
    pub flushed: bool,
    pub non_temporal: bool,
}

#[derive(Debug, Default, Clone)]
struct LineState {
    /// Most lines see a single store between fences.
    pending: SmallVec<[Entry; 1]>,
    queued: bool,
}

/// Persistent-memory emulator. See the module docs for the model.
#[derive(Debug, Clone)]
pub struct PmemDevice {
    capacity: u64,
    volatile: Vec<u8>,
    persistent: Vec<u8>,
    dirty: FxHashMap<u64, LineState>,
    /// Lines holding at least one flushed or non-temporal granule.
    queued: Vec<u64>,
    trace: Vec<TraceEvent>,
    tracing: bool,
    next_seq: u64,
    counters: IoCounters,
    class: IoClass,
    classes: [ClassCounters; 4],
    last_checkpoint: Option<String>,
}

impl PmemDevice {
    /// A zero-filled device.
    pub fn new(capacity: u64) -> Result<Self> {
        if capacity == 0 || capacity % PAGE_SIZE != 0 {
            return Err(PmemError::BadCapacity(capacity));
        }
        Ok(Self::from_parts(vec![0; capacity as usize]))
    }

    /// A device whose volatile and persistent images both equal `image`,
    /// as after a crash and restart.
    pub fn from_image(image: Vec<u8>) -> Result<Self> {
        let capacity = image.len() as u64;
        if capacity == 0 || capacity % PAGE_SIZE != 0 {
            return Err(PmemError::BadCapacity(capacity));
        }
        Ok(Self::from_parts(image))
    }

    fn from_parts(image: Vec<u8>) -> Self {
        PmemDevice {
            capacity: image.len() as u64,
            persistent: image.clone(),
            volatile: image,
            dirty: FxHashMap::default(),
            queued: Vec::new(),
            trace: Vec::new(),
            tracing: false,
            next_seq: 0,
            counters: IoCounters::default(),
            class: IoClass::Data,
            classes: [ClassCounters::default(); 4],
            last_checkpoint: None,
        }
    }

    /// Touches every page of both images so first-touch page faults do
    /// not land inside a timed region.
    pub fn prefault(&mut self) {
        for img in [&mut self.volatile, &mut self.persistent] {
            for page in img.chunks_mut(PAGE_SIZE as usize) {
                // Volatile write keeps the touch from being elided.
                unsafe { std::ptr::write_volatile(&mut page[0], page[0]) };
            }
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    fn check(&self, addr: u64, len: u64) -> Result<()> {
        match addr.checked_add(len) {
            Some(end) if end <= self.capacity => Ok(()),
            _ => Err(PmemError::OutOfBounds {
                addr,
                len,
                capacity: self.capacity,
            }),
        }
    }

    /// Enables or disables event recording. Counters are kept either way.
    pub fn set_tracing(&mut self, on: bool) {
        self.tracing = on;
    }

    pub fn tracing(&self) -> bool {
        self.tracing
    }

    /// Sets the attribution class for subsequent events and returns the
    /// previous one.
    pub fn set_class(&mut self, class: IoClass) -> IoClass {
        std::mem::replace(&mut self.class, class)
    }

    fn record(&mut self, make: impl FnOnce(u64) -> TraceEvent) {
        if self.tracing {
            let seq = self.next_seq;
            self.next_seq += 1;
            self.trace.push(make(seq));
        }
    }

    fn push_store(&mut self, addr: u64, data: &[u8], nt: bool) {
        self.volatile[addr as usize..addr as usize + data.len()].copy_from_slice(data);
        let end = addr + data.len() as u64;
        let mut a = addr;
        while a < end {
            let line = line_of(a);
            let line_end = (line + LINE_SIZE).min(end);
            let st = self.dirty.entry(line).or_default();
            let lo = a - line;
            let hi = line_end - line;
            let mut e = Entry {
                mask: byte_mask(lo, hi),
                flushed: false,
                nt,
                data: [0; 64],
            };
            e.data[lo as usize..hi as usize].copy_from_slice(&data[(a - addr) as usize..(line_end - addr) as usize]);
            st.pending.push(e);
            a = line_end;
            if nt && !st.queued {
                st.queued = true;
                self.queued.push(line);
            }
        }
    }

    /// Regular (cached) store.
    pub fn store(&mut self, addr: u64, data: &[u8]) -> Result<()> {
        self.check(addr, data.len() as u64)?;
        if data.is_empty() {
            return Ok(());
        }
        self.push_store(addr, data, false);
        let n = data.len() as u64;
        self.counters.bytes_stored += n;
        self.classes[self.class.index()].bytes_stored += n;
        self.record(|seq| TraceEvent::Store {
            seq,
            addr,
            data: data.to_vec(),
        });
        Ok(())
    }

    /// Non-temporal store; persists at the next fence without a flush.
    pub fn store_nt(&mut self, addr: u64, data: &[u8]) -> Result<()> {
        self.check(addr, data.len() as u64)?;
        if data.is_empty() {
            return Ok(());
        }
        self.push_store(addr, data, true);
        let n = data.len() as u64;
        self.counters.bytes_stored_nt += n;
        self.classes[self.class.index()].bytes_stored_nt += n;
        self.record(|seq| TraceEvent::StoreNt {
            seq,
            addr,
            data: data.to_vec(),
        });
        Ok(())
    }

    /// Writes `len` zero bytes with non-temporal stores.
    pub fn zero_nt(&mut self, addr: u64, len: u64) -> Result<()> {
        const CHUNK: usize = 4096;
        static ZEROS: [u8; CHUNK] = [0; CHUNK];
        self.check(addr, len)?;
        let mut done = 0u64;
        while done < len {
            let n = (len - done).min(CHUNK as u64) as usize;
            self.store_nt(addr + done, &ZEROS[..n])?;
            done += n as u64;
        }
        Ok(())
    }

    /// Flushes every 64-byte line overlapping `[addr, addr + len)`.
    pub fn flush(&mut self, addr: u64, len: u64) -> Result<()> {
        self.check(addr, len)?;
        if len == 0 {
            return Ok(());
        }
        let mut line = line_of(addr);
        while line < addr + len {
            self.flush_line(line);
            line += LINE_SIZE;
        }
        Ok(())
    }

    fn flush_line(&mut self, line: u64) {
        if let Some(st) = self.dirty.get_mut(&line) {
            for g in st.pending.iter_mut() {
                g.flushed = true;
            }
            if !st.pending.is_empty() && !st.queued {
                st.queued = true;
                self.queued.push(line);
            }
        }
        self.counters.flush_count += 1;
        self.classes[self.class.index()].flush_count += 1;
        self.record(|seq| TraceEvent::Flush { seq, line });
    }

    /// Persists every flushed or non-temporal pending granule.
    pub fn fence(&mut self) {
        let mut queued = std::mem::take(&mut self.queued);
        for &line in &queued {
            let Some(st) = self.dirty.get_mut(&line) else {
                continue;
            };
            st.queued = false;
            let mut kept: SmallVec<[Entry; 1]> = SmallVec::new();
            for e in std::mem::take(&mut st.pending) {
                if e.committed() {
                    let base = line as usize;
                    e.apply_to(&mut self.persistent[base..base + LINE_SIZE as usize]);
                    self.counters.bytes_persisted += e.mask.count_ones() as u64;
                    // Older cached copies of these bytes are superseded.
                    for k in kept.iter_mut() {
                        k.mask &= !e.mask;
                    }
                    kept.retain(|k| k.mask != 0);
                } else {
                    kept.push(e);
                }
            }
            if kept.is_empty() {
                self.dirty.remove(&line);
            } else {
                st.pending = kept;
            }
        }
        queued.clear();
        if self.queued.is_empty() {
            self.queued = queued;
        }
        self.counters.fence_count += 1;
        self.classes[self.class.index()].fence_count += 1;
        self.record(|seq| TraceEvent::Fence { seq });
    }

    /// Reads from the volatile image.
    pub fn load(&self, addr: u64, len: u64) -> Result<Vec<u8>> {
        self.check(addr, len)?;
        Ok(self.volatile[addr as usize..(addr + len) as usize].to_vec())
    }

    /// Reads from the volatile image into `buf`.
    pub fn load_into(&self, addr: u64, buf: &mut [u8]) -> Result<()> {
        self.check(addr, buf.len() as u64)?;
        buf.copy_from_slice(&self.volatile[addr as usize..addr as usize + buf.len()]);
        Ok(())
    }

    /// Borrowed view of the volatile image.
    pub fn volatile_slice(&self, addr: u64, len: u64) -> Result<&[u8]> {
        self.check(addr, len)?;
        Ok(&self.volatile[addr as usize..(addr + len) as usize])
    }

    pub fn snapshot(&self, kind: SnapshotKind) -> Vec<u8> {
        match kind {
            SnapshotKind::Volatile => self.volatile.clone(),
            SnapshotKind::Persistent => self.persistent.clone(),
        }
    }

    pub fn persistent_image(&self) -> &[u8] {
        &self.persistent
    }

    /// True when nothing is pending: both images agree.
    pub fn is_clean(&self) -> bool {
        self.dirty.is_empty()
    }

    pub fn counters(&self) -> IoCounters {
        self.counters
    }

    pub fn class_counters(&self, class: IoClass) -> ClassCounters {
        self.classes[class.index()]
    }

    /// Zeroes all counters at a named checkpoint boundary.
    pub fn reset_counters(&mut self, label: &str) {
        self.counters = IoCounters::default();
        self.classes = [ClassCounters::default(); 4];
        self.last_checkpoint = Some(label.to_string());
    }

    pub fn last_checkpoint(&self) -> Option<&str> {
        self.last_checkpoint.as_deref()
    }

    pub(crate) fn note_journal_commit(&mut self) {
        self.counters.journal_commit_count += 1;
    }

    pub(crate) fn note_log_entry(&mut self) {
        self.counters.log_entries_written += 1;
    }

    pub(crate) fn note_relink_copy(&mut self, bytes: u64) {
        self.counters.relink_data_bytes_copied += bytes;
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        std::mem::take(&mut self.trace)
    }

    pub fn reset_trace(&mut self) {
        self.trace.clear();
        self.next_seq = 0;
    }

    /// Re-executes a recorded event against this device.
    pub fn apply_event(&mut self, ev: &TraceEvent) -> Result<()> {
        match ev {
            TraceEvent::Store { addr, data, .. } => self.store(*addr, data),
            TraceEvent::StoreNt { addr, data, .. } => self.store_nt(*addr, data),
            TraceEvent::Flush { line, .. } => self.flush(*line, LINE_SIZE),
            TraceEvent::Fence { .. } => {
                self.fence();
                Ok(())
            }
        }
    }

    /// Pending granules of every dirty line, in program order, keyed by
    /// line address.
    pub fn pending_lines(&self) -> BTreeMap<u64, Vec<PendingGranule>> {
        self.dirty
            .iter()
            .map(|(&line, st)| {
                let v = st
                    .pending
                    .iter()
                    .flat_map(|e| {
                        e.granules().map(move |(c, mask, data)| PendingGranule {
                            chunk_addr: line + c as u64 * GRANULE_SIZE,
                            mask,
                            data,
                            flushed: e.flushed,
                            non_temporal: e.nt,
                        })
                    })
                    .collect();
                (line, v)
            })
            .collect()
    }

    /// The image a crash would leave right now. Under the adversarial
    /// policy `keep` gives, per line, how many leading pending granules
    /// also reach media; lines not named keep none.
    pub fn crash_image(&self, policy: Policy, keep: &BTreeMap<u64, usize>) -> Result<Vec<u8>> {
        let mut image = self.persistent.clone();
        if policy == Policy::StrictEpoch {
            return Ok(image);
        }
        for (&line, &k) in keep {
            if k == 0 {
                continue;
            }
            let pending = self.dirty.get(&line).map(|s| s.pending.as_slice()).unwrap_or(&[]);
            let total: usize = pending.iter().map(Entry::granule_count).sum();
            if k > total {
                return Err(PmemError::BadChoice {
                    line,
                    requested: k,
                    pending: total,
                });
            }
            for (c, mask, data) in pending.iter().flat_map(Entry::granules).take(k) {
                let base = (line + c as u64 * GRANULE_SIZE) as usize;
                for i in 0..8 {
                    if mask & (1 << i) != 0 {
                        image[base + i] = data[i];
                    }
                }
            }
        }
        Ok(image)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dev() -> PmemDevice {
        PmemDevice::new(8192).unwrap()
    }

    #[test]
    fn capacity_must_be_page_multiple() {
        assert!(PmemDevice::new(4095).is_err());
        assert!(PmemDevice::new(0).is_err());
        assert!(PmemDevice::from_image(vec![0; 100]).is_err());
    }

    #[test]
    fn read_your_write() {
        let mut d = dev();
        d.store(0, &[0xab; 8]).unwrap();
        assert_eq!(d.load(0, 8).unwrap(), vec![0xab; 8]);
    }

    #[test]
    fn unflushed_store_not_persistent() {
        let mut d = dev();
        d.store(0, &[0xab; 8]).unwrap();
        d.fence();
        let img = d.crash_image(Policy::StrictEpoch, &BTreeMap::new()).unwrap();
        assert_eq!(&img[..8], &[0; 8]);
    }

    #[test]
    fn flush_then_fence_persists() {
        let mut d = dev();
        d.store(0, &[0xab; 8]).unwrap();
        d.flush(0, 8).unwrap();
        d.fence();
        assert_eq!(&d.persistent_image()[..8], &[0xab; 8]);
        assert!(d.is_clean());
    }

    #[test]
    fn straddling_store_traces_two_granules() {
        let mut d = dev();
        d.set_tracing(true);
        d.store(4094, &[1, 2, 3, 4]).unwrap();
        let g = d.trace()[0].granules();
        assert_eq!(g.len(), 2);
        assert_eq!((g[0].0, g[0].1.len()), (4094, 2));
        assert_eq!((g[1].0, g[1].1.len()), (4096, 2));
    }

    #[test]
    fn nt_store_persists_at_fence() {
        let mut d = dev();
        let payload: Vec<u8> = (0..64).collect();
        d.store_nt(64, &payload).unwrap();
        assert_eq!(&d.persistent_image()[64..128], &[0; 64]);
        d.fence();
        assert_eq!(&d.persistent_image()[64..128], payload.as_slice());
    }

    #[test]
    fn later_nt_store_to_same_granule_wins() {
        let mut d = dev();
        d.store_nt(8, &[1; 8]).unwrap();
        d.store_nt(8, &[2; 8]).unwrap();
        d.fence();
        assert_eq!(&d.persistent_image()[8..16], &[2; 8]);
    }

    #[test]
    fn nt_store_supersedes_older_cached_copy() {
        let mut d = dev();
        d.store(0, &[1; 8]).unwrap();
        d.store_nt(0, &[2; 8]).unwrap();
        d.fence();
        assert_eq!(&d.persistent_image()[..8], &[2; 8]);
        // The cached store is gone; flushing later cannot roll back.
        d.flush(0, 8).unwrap();
        d.fence();
        assert_eq!(&d.persistent_image()[..8], &[2; 8]);
        assert!(d.is_clean());
    }

    #[test]
    fn newer_cached_copy_survives_older_flush() {
        let mut d = dev();
        d.store(0, &[1; 8]).unwrap();
        d.flush(0, 8).unwrap();
        d.store(0, &[3; 8]).unwrap();
        d.fence();
        assert_eq!(&d.persistent_image()[..8], &[1; 8]);
        assert_eq!(d.load(0, 8).unwrap(), vec![3; 8]);
        assert_eq!(d.pending_lines()[&0].len(), 1);
    }

    #[test]
    fn flush_counts_lines() {
        let mut d = dev();
        d.flush(60, 10).unwrap();
        assert_eq!(d.counters().flush_count, 2);
        d.flush(0, 0).unwrap();
        assert_eq!(d.counters().flush_count, 2);
    }

    #[test]
    fn out_of_bounds() {
        let mut d = dev();
        assert!(matches!(d.store(8190, &[0; 4]), Err(PmemError::OutOfBounds { .. })));
        assert!(d.store_nt(u64::MAX, &[0]).is_err());
        assert!(d.load(8192, 1).is_err());
        assert!(d.flush(8192, 1).is_err());
    }

    #[test]
    fn adversarial_prefix_per_line() {
        let mut d = dev();
        d.store(0, &[1; 8]).unwrap();
        d.store(8, &[2; 8]).unwrap();
        d.store(64, &[3; 8]).unwrap();
        let mut keep = BTreeMap::new();
        keep.insert(0, 1);
        let img = d.crash_image(Policy::Adversarial, &keep).unwrap();
        assert_eq!(&img[..16], &[1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&img[64..72], &[0; 8]);
        keep.insert(64, 2);
        assert!(d.crash_image(Policy::Adversarial, &keep).is_err());
    }

    #[test]
    fn counters_track_classes_and_persisted_bytes() {
        let mut d = dev();
        d.set_class(IoClass::Log);
        d.store_nt(0, &[1; 64]).unwrap();
        d.fence();
        d.set_class(IoClass::Data);
        d.store(100, &[1; 3]).unwrap();
        d.flush(100, 3).unwrap();
        d.fence();
        let c = d.counters();
        assert_eq!(c.bytes_stored_nt, 64);
        assert_eq!(c.bytes_stored, 3);
        assert_eq!(c.bytes_persisted, 67);
        assert_eq!(c.fence_count, 2);
        assert_eq!(d.class_counters(IoClass::Log).fence_count, 1);
        assert_eq!(d.class_counters(IoClass::Log).bytes_stored_nt, 64);
        d.reset_counters("warm");
        assert_eq!(d.counters(), IoCounters::default());
        assert_eq!(d.last_checkpoint(), Some("warm"));
    }
}
