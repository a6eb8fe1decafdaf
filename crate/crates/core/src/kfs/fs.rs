// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};

use parking_lot::Mutex;
use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};

use crate::pmem::{IoClass, PmemDevice, SharedDevice};

use super::alloc;
use super::inode::Inode;
use super::journal::{self, Txn};
use super::layout::{
    decode_counters, decode_ns_entry, encode_counters, encode_ns_entry, Geometry, InodeHeader,
    BLOCK_SIZE, INODE_SIZE, NAME_MAX, NS_ENTRY_SIZE, SB_COUNTERS_ADDR,
};
use super::{Ino, KfsError, Result};

/// Fault switches for checker sensitivity tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Fault {
    /// Journal commit line is never written; the checkpoint still is.
    SkipJournalCommit,
    /// Operation-log appends skip their fence (read by the user-space library).
    SkipLogFence,
    /// Relink leaves the destination's replaced blocks allocated.
    SkipRelinkDealloc,
}

impl Fault {
    fn bit(self) -> u32 {
        match self {
            Fault::SkipJournalCommit => 1,
            Fault::SkipLogFence => 2,
            Fault::SkipRelinkDealloc => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stat {
    pub ino: Ino,
    pub size: u64,
    pub generation: u64,
    /// Creation stamp, unique for the life of the file system.
    pub birth: u64,
    pub blocks: u64,
}

/// One piece of a file range: mapped to `dev` or a hole.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub file_off: u64,
    pub len: u64,
    pub dev: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelinkOp {
    pub src: Ino,
    pub src_off: u64,
    pub dst: Ino,
    pub dst_off: u64,
    pub size: u64,
}

#[derive(Debug, Clone, Default)]
struct State {
    names: HashMap<String, (Ino, u32)>,
    used_inos: BTreeSet<u32>,
    used_slots: BTreeSet<u32>,
    cursor: u32,
    next_txn: u64,
}

/// Handle to a mounted file system. Shared between library instances.
pub struct Kfs {
    dev: SharedDevice,
    geo: Geometry,
    state: Mutex<State>,
    hints: Vec<AtomicU64>,
    faults: AtomicU32,
    calls: AtomicU64,
}

impl std::fmt::Debug for Kfs {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Kfs").field("geometry", &self.geo).finish_non_exhaustive()
    }
}

/// How `write_bytes` treats blocks.
#[derive(Clone, Copy, PartialEq, Eq)]
enum WriteMode {
    /// Zero new blocks first, then store data; mapped blocks in place.
    Direct,
    /// New blocks get data plus zero fill in one pass; mapped in place.
    Through,
    /// New blocks as `Through`; mapped blocks via the journal.
    Journaled,
}

struct Ctx<'d> {
    txn: Txn<'d>,
    geo: Geometry,
    st: State,
    inodes: FxHashMap<Ino, Inode>,
    /// Newly allocated blocks whose full image is written before commit.
    fresh: FxHashMap<u32, Vec<u8>>,
    skip_dealloc: bool,
}

impl<'d> Ctx<'d> {
    fn take(&mut self, ino: Ino) -> Result<Inode> {
        match self.inodes.remove(&ino) {
            Some(i) => Ok(i),
            None => Inode::load(&self.txn, &self.geo, ino),
        }
    }

    fn put(&mut self, inode: Inode) {
        self.inodes.insert(inode.ino, inode);
    }

    fn next_birth(&mut self) -> Result<u64> {
        let l = self.txn.read_line(SB_COUNTERS_ADDR)?;
        let birth = decode_counters(&l)?;
        self.txn.write(SB_COUNTERS_ADDR, &encode_counters(birth + 1))?;
        Ok(birth)
    }

    fn free_extents(&mut self, removed: &[super::Extent]) -> Result<()> {
        for e in removed {
            alloc::free_run(&mut self.txn, &self.geo, e.device_block, e.length)?;
        }
        Ok(())
    }

    /// Allocates and maps every unmapped block of `[fb, fb + n)`; returns
    /// the new device runs.
    fn fill_holes(&mut self, inode: &mut Inode, fb: u32, n: u32) -> Result<Vec<(u32, u32)>> {
        let mut fresh = Vec::new();
        for (pos, dev, len) in inode.runs(fb, n) {
            if dev.is_some() {
                continue;
            }
            let mut at = pos;
            for (s, l) in alloc::alloc_blocks(&mut self.txn, &self.geo, &mut self.st.cursor, len)? {
                inode.map(at, s, l);
                fresh.push((s, l));
                at += l;
            }
        }
        Ok(fresh)
    }

    fn read_bytes(&self, inode: &Inode, off: u64, len: u64) -> Result<Vec<u8>> {
        let mut out = vec![0u8; len as usize];
        let mut pos = off;
        while pos < off + len {
            let fb = (pos / BLOCK_SIZE) as u32;
            let in_blk = pos % BLOCK_SIZE;
            let n = (BLOCK_SIZE - in_blk).min(off + len - pos);
            let dst = &mut out[(pos - off) as usize..(pos - off + n) as usize];
            match inode.lookup_block(fb) {
                Some(b) => match self.fresh.get(&b) {
                    Some(img) => dst.copy_from_slice(&img[in_blk as usize..(in_blk + n) as usize]),
                    None => self.txn.read(self.geo.block_addr(b) + in_blk, dst)?,
                },
                None => dst.fill(0),
            }
            pos += n;
        }
        Ok(out)
    }

    fn write_bytes(&mut self, inode: &mut Inode, off: u64, data: &[u8], mode: WriteMode) -> Result<()> {
        if data.is_empty() {
            return Ok(());
        }
        let end = off + data.len() as u64;
        let fb = (off / BLOCK_SIZE) as u32;
        let nb = (end.div_ceil(BLOCK_SIZE) - off / BLOCK_SIZE) as u32;
        let mut new_blocks = FxHashSet::default();
        for (s, l) in self.fill_holes(inode, fb, nb)? {
            if mode == WriteMode::Direct {
                self.txn.pre_zero(self.geo.block_addr(s), l as u64 * BLOCK_SIZE);
            }
            new_blocks.extend(s..s + l);
        }
        let mut pos = off;
        while pos < end {
            let fb = (pos / BLOCK_SIZE) as u32;
            let blk = inode
                .lookup_block(fb)
                .ok_or_else(|| KfsError::Corrupt(format!("{}: block {fb} unmapped after allocation", inode.ino)))?;
            let in_blk = pos % BLOCK_SIZE;
            let n = (BLOCK_SIZE - in_blk).min(end - pos);
            let src = &data[(pos - off) as usize..(pos - off + n) as usize];
            let addr = self.geo.block_addr(blk) + in_blk;
            if new_blocks.contains(&blk) {
                // Single-call writes store wholly covered new blocks
                // straight from `data`; others get a zero-filled image.
                if n == BLOCK_SIZE && mode != WriteMode::Journaled {
                    self.txn.pre_bytes(addr, src.to_vec());
                } else {
                    let img = self.fresh.entry(blk).or_insert_with(|| vec![0u8; BLOCK_SIZE as usize]);
                    img[in_blk as usize..(in_blk + n) as usize].copy_from_slice(src);
                }
            } else if let Some(img) = self.fresh.get_mut(&blk) {
                img[in_blk as usize..(in_blk + n) as usize].copy_from_slice(src);
            } else if mode == WriteMode::Journaled {
                self.txn.write(addr, src)?;
            } else {
                self.txn.pre_bytes(addr, src.to_vec());
            }
            pos += n;
        }
        Ok(())
    }

    /// Raises `inode.size` to `new_size`, zeroing stale bytes of the old
    /// end-of-file block up to `data_start`, where new content begins.
    fn extend_size(&mut self, inode: &mut Inode, new_size: u64, data_start: u64) -> Result<()> {
        let old = inode.size;
        if new_size <= old {
            return Ok(());
        }
        if old % BLOCK_SIZE != 0 {
            let blk_end = (old / BLOCK_SIZE + 1) * BLOCK_SIZE;
            let stop = blk_end.min(data_start).min(new_size);
            if stop > old {
                if let Some(b) = inode.lookup_block((old / BLOCK_SIZE) as u32) {
                    let zeros = vec![0u8; (stop - old) as usize];
                    let in_blk = (old % BLOCK_SIZE) as usize;
                    match self.fresh.get_mut(&b) {
                        Some(img) => img[in_blk..in_blk + zeros.len()].fill(0),
                        None => self.txn.write(self.geo.block_addr(b) + in_blk as u64, &zeros)?,
                    }
                }
            }
        }
        inode.size = new_size;
        Ok(())
    }

    fn relink_one(&mut self, op: &RelinkOp) -> Result<()> {
        if op.size == 0 {
            return Err(KfsError::InvalidArgument("relink of zero bytes".into()));
        }
        if op.src == op.dst {
            return Err(KfsError::InvalidArgument("relink within one file".into()));
        }
        let mut src = self.take(op.src)?;
        let mut dst = match self.take(op.dst) {
            Ok(d) => d,
            Err(e) => {
                self.put(src);
                return Err(e);
            }
        };
        let r = self.relink_inodes(&mut src, &mut dst, op);
        self.put(src);
        self.put(dst);
        r
    }

    fn relink_inodes(&mut self, src: &mut Inode, dst: &mut Inode, op: &RelinkOp) -> Result<()> {
        let sfb = (op.src_off / BLOCK_SIZE) as u32;
        let snb = ((op.src_off + op.size).div_ceil(BLOCK_SIZE) - op.src_off / BLOCK_SIZE) as u32;
        if let Some(h) = src.runs(sfb, snb).iter().find(|r| r.1.is_none()) {
            return Err(KfsError::Hole {
                ino: src.ino,
                off: (h.0 as u64 * BLOCK_SIZE).max(op.src_off),
            });
        }
        self.extend_size(dst, op.dst_off + op.size, op.dst_off)?;
        let congruent = op.src_off % BLOCK_SIZE == op.dst_off % BLOCK_SIZE;
        let (head, body) = if congruent {
            let head = ((BLOCK_SIZE - op.dst_off % BLOCK_SIZE) % BLOCK_SIZE).min(op.size);
            (head, (op.size - head) / BLOCK_SIZE)
        } else {
            (op.size, 0)
        };
        let tail = op.size - head - body * BLOCK_SIZE;
        self.copy_range(src, op.src_off, dst, op.dst_off, head)?;
        if body > 0 {
            let s_fb = ((op.src_off + head) / BLOCK_SIZE) as u32;
            let d_fb = ((op.dst_off + head) / BLOCK_SIZE) as u32;
            let n = body as u32;
            let replaced = dst.unmap(d_fb, n);
            if !self.skip_dealloc {
                self.free_extents(&replaced)?;
            }
            for piece in src.unmap(s_fb, n) {
                dst.map(d_fb + (piece.file_block - s_fb), piece.device_block, piece.length);
            }
        }
        let done = head + body * BLOCK_SIZE;
        self.copy_range(src, op.src_off + done, dst, op.dst_off + done, tail)?;
        // The source keeps no size past what it still maps.
        src.size = src.size.min(src.mapped_end() as u64 * BLOCK_SIZE);
        src.generation += 1;
        dst.generation += 1;
        Ok(())
    }

    fn copy_range(&mut self, src: &Inode, src_off: u64, dst: &mut Inode, dst_off: u64, len: u64) -> Result<()> {
        if len == 0 {
            return Ok(());
        }
        let bytes = self.read_bytes(src, src_off, len)?;
        self.write_bytes(dst, dst_off, &bytes, WriteMode::Journaled)?;
        self.txn.note_copied(len);
        Ok(())
    }

    fn erase_file(&mut self, ino: Ino, slot: u32) -> Result<()> {
        let mut inode = self.take(ino)?;
        let all = inode.unmap(0, u32::MAX);
        self.free_extents(&all)?;
        inode.erase(&mut self.txn, &self.geo)?;
        self.txn.write(self.geo.ns_addr(slot), &[0u8; NS_ENTRY_SIZE as usize])?;
        self.st.used_inos.remove(&ino.0);
        self.st.used_slots.remove(&slot);
        Ok(())
    }

    /// Stores every inode touched by the operation and flushes fresh
    /// block images. Returns the touched inos.
    fn finish(mut self) -> Result<(Txn<'d>, State, Vec<Ino>)> {
        let mut inos: Vec<Ino> = self.inodes.keys().copied().collect();
        inos.sort();
        for ino in &inos {
            let mut inode = self.inodes.remove(ino).unwrap();
            if self.st.used_inos.contains(&ino.0) {
                inode.store(&mut self.txn, &self.geo, &mut self.st.cursor)?;
            }
        }
        let mut fresh: Vec<(u32, Vec<u8>)> = self.fresh.drain().collect();
        fresh.sort_by_key(|f| f.0);
        for (b, img) in fresh {
            self.txn.pre_bytes(self.geo.block_addr(b), img);
        }
        Ok((self.txn, self.st, inos))
    }
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name.len() > NAME_MAX || name.contains('/') || name.contains('\0') {
        return Err(KfsError::BadName(name.to_string()));
    }
    Ok(())
}

fn lowest_free(used: &BTreeSet<u32>, lo: u32, hi: u32) -> Option<u32> {
    let mut want = lo;
    for &u in used.range(lo..) {
        if u != want {
            break;
        }
        want += 1;
    }
    (want < hi).then_some(want)
}

impl Kfs {
    /// Formats the device. Any previous content of the metadata regions
    /// is discarded.
    pub fn mkfs(dev: &SharedDevice, geo: Geometry) -> Result<()> {
        let mut d = dev.write();
        if d.capacity() != geo.capacity() {
            return Err(KfsError::BadGeometry(format!(
                "geometry covers {} bytes, device has {}",
                geo.capacity(),
                d.capacity()
            )));
        }
        let prev = d.set_class(IoClass::Metadata);
        d.zero_nt(0, geo.data_start() as u64 * BLOCK_SIZE)?;
        let mut bits = vec![0u8; (geo.data_start() as usize).div_ceil(8)];
        for b in 0..geo.data_start() as usize {
            bits[b / 8] |= 1 << (b % 8);
        }
        d.store_nt(geo.bitmap_addr(), &bits)?;
        d.store_nt(0, &geo.encode())?;
        d.store_nt(SB_COUNTERS_ADDR, &encode_counters(1))?;
        d.fence();
        d.set_class(prev);
        Ok(())
    }

    /// Mounts a formatted device, replaying a committed journal
    /// transaction if one is present.
    pub fn mount(dev: SharedDevice) -> Result<Kfs> {
        let (geo, st) = {
            let mut d = dev.write();
            let geo = Geometry::decode(d.volatile_slice(0, 64)?)?;
            if geo.capacity() != d.capacity() {
                return Err(KfsError::BadSuperblock("size does not match device".into()));
            }
            journal::replay(&mut d, &geo)?;
            decode_counters(d.volatile_slice(SB_COUNTERS_ADDR, 64)?)?;
            (geo, Self::scan(&d, &geo)?)
        };
        let hints = (0..geo.inode_slots()).map(|_| AtomicU64::new(0)).collect();
        Ok(Kfs {
            dev,
            geo,
            state: Mutex::new(st),
            hints,
            faults: AtomicU32::new(0),
            calls: AtomicU64::new(0),
        })
    }

    fn scan(d: &PmemDevice, geo: &Geometry) -> Result<State> {
        let mut st = State {
            cursor: geo.data_start(),
            next_txn: 1,
            ..State::default()
        };
        for i in 1..geo.inode_slots() {
            let h = InodeHeader::decode(d.volatile_slice(geo.inode_addr(Ino(i)), INODE_SIZE)?);
            if h.ino != 0 {
                st.used_inos.insert(i);
            }
        }
        for slot in 0..geo.namespace_slots() {
            if let Some((ino, name)) = decode_ns_entry(d.volatile_slice(geo.ns_addr(slot), 64)?) {
                st.used_slots.insert(slot);
                st.names.insert(name, (Ino(ino), slot));
            }
        }
        Ok(st)
    }

    pub fn geometry(&self) -> Geometry {
        self.geo
    }

    pub fn device(&self) -> &SharedDevice {
        &self.dev
    }

    /// Number of public operations served so far.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    fn tick(&self) {
        self.calls.fetch_add(1, Ordering::Relaxed);
    }

    /// Counter bumped whenever a file's block mapping changes. Cached
    /// mappings taken at an older value are stale.
    pub fn generation_hint(&self, ino: Ino) -> u64 {
        self.hints
            .get(ino.0 as usize)
            .map(|h| h.load(Ordering::Acquire))
            .unwrap_or(0)
    }

    pub fn inject(&self, fault: Fault) {
        self.faults.fetch_or(fault.bit(), Ordering::SeqCst);
    }

    pub fn clear_faults(&self) {
        self.faults.store(0, Ordering::SeqCst);
    }

    pub fn fault_active(&self, fault: Fault) -> bool {
        self.faults.load(Ordering::SeqCst) & fault.bit() != 0
    }

    fn mutate<T>(&self, op: impl FnOnce(&mut Ctx<'_>) -> Result<T>) -> Result<T> {
        self.tick();
        let mut st = self.state.lock();
        let mut dev = self.dev.write();
        let (out, prepared, new_st, touched) = {
            let mut ctx = Ctx {
                txn: Txn::new(&dev),
                geo: self.geo,
                st: st.clone(),
                inodes: FxHashMap::default(),
                fresh: FxHashMap::default(),
                skip_dealloc: self.fault_active(Fault::SkipRelinkDealloc),
            };
            let out = op(&mut ctx)?;
            let (txn, new_st, touched) = ctx.finish()?;
            (out, txn.prepare(&self.geo)?, new_st, touched)
        };
        let has_records = prepared.has_records();
        prepared.apply(&mut dev, &self.geo, st.next_txn, self.fault_active(Fault::SkipJournalCommit))?;
        let next_txn = st.next_txn + has_records as u64;
        *st = new_st;
        st.next_txn = next_txn;
        for ino in touched {
            if let Some(h) = self.hints.get(ino.0 as usize) {
                h.fetch_add(1, Ordering::AcqRel);
            }
        }
        Ok(out)
    }

    fn query<T>(&self, f: impl FnOnce(&Txn<'_>) -> Result<T>) -> Result<T> {
        self.tick();
        let dev = self.dev.read();
        let txn = Txn::new(&dev);
        f(&txn)
    }

    pub fn create(&self, name: &str) -> Result<Ino> {
        check_name(name)?;
        self.mutate(|c| {
            if c.st.names.contains_key(name) {
                return Err(KfsError::Exists(name.to_string()));
            }
            let ino = lowest_free(&c.st.used_inos, 1, c.geo.inode_slots()).ok_or(KfsError::NoInodes)?;
            let slot =
                lowest_free(&c.st.used_slots, 0, c.geo.namespace_slots()).ok_or(KfsError::NamespaceFull)?;
            let birth = c.next_birth()?;
            let ino = Ino(ino);
            c.put(Inode::new(ino, birth));
            c.txn.write(c.geo.ns_addr(slot), &encode_ns_entry(ino.0, name))?;
            c.st.used_inos.insert(ino.0);
            c.st.used_slots.insert(slot);
            c.st.names.insert(name.to_string(), (ino, slot));
            Ok(ino)
        })
    }

    pub fn lookup(&self, name: &str) -> Result<Ino> {
        self.tick();
        self.state
            .lock()
            .names
            .get(name)
            .map(|e| e.0)
            .ok_or_else(|| KfsError::NotFound(name.to_string()))
    }

    /// All names, sorted.
    pub fn list(&self) -> Vec<(String, Ino)> {
        self.tick();
        let st = self.state.lock();
        let mut v: Vec<_> = st.names.iter().map(|(n, e)| (n.clone(), e.0)).collect();
        v.sort();
        v
    }

    pub fn unlink(&self, name: &str) -> Result<()> {
        self.mutate(|c| {
            let (ino, slot) = *c.st.names.get(name).ok_or_else(|| KfsError::NotFound(name.to_string()))?;
            c.erase_file(ino, slot)?;
            c.st.names.remove(name);
            c.inodes.insert(ino, Inode::new(ino, 0));
            Ok(())
        })
    }

    /// Renames `old` to `new`, replacing any existing `new`.
    pub fn rename(&self, old: &str, new: &str) -> Result<()> {
        check_name(new)?;
        self.mutate(|c| {
            let (ino, slot) = *c.st.names.get(old).ok_or_else(|| KfsError::NotFound(old.to_string()))?;
            if old == new {
                return Ok(());
            }
            if let Some(&(victim, vslot)) = c.st.names.get(new) {
                c.erase_file(victim, vslot)?;
                c.inodes.insert(victim, Inode::new(victim, 0));
            }
            c.txn.write(c.geo.ns_addr(slot), &encode_ns_entry(ino.0, new))?;
            c.st.names.remove(old);
            c.st.names.insert(new.to_string(), (ino, slot));
            Ok(())
        })
    }

    /// Maps zeroed blocks over `[off, off + len)` and extends the size.
    pub fn allocate(&self, ino: Ino, off: u64, len: u64) -> Result<()> {
        self.mutate(|c| {
            let mut inode = c.take(ino)?;
            if len > 0 {
                let fb = (off / BLOCK_SIZE) as u32;
                let nb = ((off + len).div_ceil(BLOCK_SIZE) - off / BLOCK_SIZE) as u32;
                for (s, l) in c.fill_holes(&mut inode, fb, nb)? {
                    c.txn.pre_zero(c.geo.block_addr(s), l as u64 * BLOCK_SIZE);
                }
                c.extend_size(&mut inode, off + len, off)?;
            }
            c.put(inode);
            Ok(())
        })
    }

    /// Maps blocks over `[off, off + len)` without zeroing them and
    /// without changing the size. Used for staging space.
    pub fn preallocate(&self, ino: Ino, off: u64, len: u64) -> Result<()> {
        self.mutate(|c| {
            let mut inode = c.take(ino)?;
            if len > 0 {
                let fb = (off / BLOCK_SIZE) as u32;
                let nb = ((off + len).div_ceil(BLOCK_SIZE) - off / BLOCK_SIZE) as u32;
                c.fill_holes(&mut inode, fb, nb)?;
            }
            c.put(inode);
            Ok(())
        })
    }

    /// Sets the size. Shrinking frees whole blocks past the end and zeroes
    /// the rest of the last block; growing maps a zeroed final block.
    pub fn truncate(&self, ino: Ino, size: u64) -> Result<()> {
        self.mutate(|c| {
            let mut inode = c.take(ino)?;
            if size < inode.size {
                let keep = size.div_ceil(BLOCK_SIZE) as u32;
                let removed = inode.unmap(keep, u32::MAX - keep);
                c.free_extents(&removed)?;
                if size % BLOCK_SIZE != 0 {
                    if let Some(b) = inode.lookup_block((size / BLOCK_SIZE) as u32) {
                        let n = (BLOCK_SIZE - size % BLOCK_SIZE) as usize;
                        c.txn.write(c.geo.block_addr(b) + size % BLOCK_SIZE, &vec![0u8; n])?;
                    }
                }
                inode.size = size;
            } else if size > inode.size {
                let last = ((size - 1) / BLOCK_SIZE) as u32;
                for (s, l) in c.fill_holes(&mut inode, last, 1)? {
                    c.txn.pre_zero(c.geo.block_addr(s), l as u64 * BLOCK_SIZE);
                }
                c.extend_size(&mut inode, size, size)?;
            }
            inode.generation += 1;
            c.put(inode);
            Ok(())
        })
    }

    /// Kernel-path write: zero-fills new blocks, stores data with
    /// non-temporal stores and commits allocation and size together.
    pub fn write_direct(&self, ino: Ino, off: u64, data: &[u8]) -> Result<usize> {
        self.write_mode(ino, off, data, WriteMode::Direct)
    }

    /// Like [`Kfs::write_direct`] but new blocks are filled in one pass
    /// without a separate zeroing store.
    pub fn write_through(&self, ino: Ino, off: u64, data: &[u8]) -> Result<usize> {
        self.write_mode(ino, off, data, WriteMode::Through)
    }

    fn write_mode(&self, ino: Ino, off: u64, data: &[u8], mode: WriteMode) -> Result<usize> {
        self.mutate(|c| {
            let mut inode = c.take(ino)?;
            c.write_bytes(&mut inode, off, data, mode)?;
            c.extend_size(&mut inode, off + data.len() as u64, off)?;
            c.put(inode);
            Ok(data.len())
        })
    }

    /// Reads up to `len` bytes, stopping at end of file. Holes read as
    /// zeros.
    pub fn read_direct(&self, ino: Ino, off: u64, len: u64) -> Result<Vec<u8>> {
        self.query(|t| {
            let inode = Inode::load(t, &self.geo, ino)?;
            if off >= inode.size {
                return Ok(Vec::new());
            }
            let len = len.min(inode.size - off);
            let mut out = vec![0u8; len as usize];
            let fb = (off / BLOCK_SIZE) as u32;
            let nb = ((off + len).div_ceil(BLOCK_SIZE) - off / BLOCK_SIZE) as u32;
            for (pos, dev, n) in inode.runs(fb, nb) {
                let Some(dev) = dev else { continue };
                let s = (pos as u64 * BLOCK_SIZE).max(off);
                let e = ((pos + n) as u64 * BLOCK_SIZE).min(off + len);
                let addr = self.geo.block_addr(dev) + (s - pos as u64 * BLOCK_SIZE);
                t.read(addr, &mut out[(s - off) as usize..(e - off) as usize])?;
            }
            Ok(out)
        })
    }

    /// Device ranges backing `[off, off + len)`; fails on any hole.
    pub fn map_extents(&self, ino: Ino, off: u64, len: u64) -> Result<Vec<(u64, u64)>> {
        let segs = self.map_range(ino, off, len)?;
        let mut out: Vec<(u64, u64)> = Vec::new();
        for s in segs {
            let dev = s.dev.ok_or(KfsError::Hole { ino, off: s.file_off })?;
            match out.last_mut() {
                Some((a, l)) if *a + *l == dev => *l += s.len,
                _ => out.push((dev, s.len)),
            }
        }
        Ok(out)
    }

    /// Hole-tolerant mapping of `[off, off + len)`.
    pub fn map_range(&self, ino: Ino, off: u64, len: u64) -> Result<Vec<Segment>> {
        self.query(|t| {
            let inode = Inode::load(t, &self.geo, ino)?;
            if len == 0 {
                return Ok(Vec::new());
            }
            let fb = (off / BLOCK_SIZE) as u32;
            let nb = ((off + len).div_ceil(BLOCK_SIZE) - off / BLOCK_SIZE) as u32;
            Ok(inode
                .runs(fb, nb)
                .into_iter()
                .map(|(pos, dev, n)| {
                    let s = (pos as u64 * BLOCK_SIZE).max(off);
                    let e = ((pos + n) as u64 * BLOCK_SIZE).min(off + len);
                    Segment {
                        file_off: s,
                        len: e - s,
                        dev: dev.map(|d| self.geo.block_addr(d) + (s - pos as u64 * BLOCK_SIZE)),
                    }
                })
                .collect())
        })
    }

    /// Atomically moves `[src_off, src_off + size)` of `src` to `dst_off`
    /// of `dst`. Block-aligned parts move by extent swap; unaligned edges
    /// are copied.
    pub fn relink(&self, src: Ino, src_off: u64, dst: Ino, dst_off: u64, size: u64) -> Result<()> {
        self.relink_batch(&[RelinkOp {
            src,
            src_off,
            dst,
            dst_off,
            size,
        }])
    }

    /// Applies several relinks, in order, as one transaction.
    pub fn relink_batch(&self, ops: &[RelinkOp]) -> Result<()> {
        self.mutate(|c| {
            for op in ops {
                c.relink_one(op)?;
            }
            Ok(())
        })
    }

    /// Relink composed as allocate, swap, deallocate: fresh blocks are
    /// mapped at the destination, exchanged with the source's blocks, and
    /// then released from the source. Only block-aligned ranges.
    pub fn relink_by_swap(&self, src: Ino, src_off: u64, dst: Ino, dst_off: u64, size: u64) -> Result<()> {
        if src_off % BLOCK_SIZE != 0 || dst_off % BLOCK_SIZE != 0 || size % BLOCK_SIZE != 0 || size == 0 {
            return Err(KfsError::InvalidArgument("swap relink needs aligned ranges".into()));
        }
        self.mutate(|c| {
            let mut s = c.take(src)?;
            let mut d = c.take(dst)?;
            let sfb = (src_off / BLOCK_SIZE) as u32;
            let dfb = (dst_off / BLOCK_SIZE) as u32;
            let n = (size / BLOCK_SIZE) as u32;
            if s.runs(sfb, n).iter().any(|r| r.1.is_none()) {
                return Err(KfsError::Hole { ino: src, off: src_off });
            }
            // Allocate: make the destination range fully mapped.
            let old = d.unmap(dfb, n);
            c.free_extents(&old)?;
            c.fill_holes(&mut d, dfb, n)?;
            // Swap extents between the two ranges.
            let from_src = s.unmap(sfb, n);
            let from_dst = d.unmap(dfb, n);
            for p in from_src {
                d.map(dfb + (p.file_block - sfb), p.device_block, p.length);
            }
            for p in &from_dst {
                s.map(sfb + (p.file_block - dfb), p.device_block, p.length);
            }
            // Deallocate what the source received.
            let back = s.unmap(sfb, n);
            c.free_extents(&back)?;
            s.size = s.size.min(s.mapped_end() as u64 * BLOCK_SIZE);
            c.extend_size(&mut d, dst_off + size, dst_off)?;
            s.generation += 1;
            d.generation += 1;
            c.put(s);
            c.put(d);
            Ok(())
        })
    }

    /// Makes metadata of `ino` durable. Commits are synchronous, so this
    /// is a fence.
    pub fn fsync_meta(&self, ino: Ino) -> Result<()> {
        self.tick();
        let _st = self.state.lock();
        let mut d = self.dev.write();
        {
            let t = Txn::new(&d);
            Inode::load(&t, &self.geo, ino)?;
        }
        d.fence();
        Ok(())
    }

    pub fn stat(&self, ino: Ino) -> Result<Stat> {
        self.query(|t| {
            let i = Inode::load(t, &self.geo, ino)?;
            Ok(Stat {
                ino,
                size: i.size,
                generation: i.generation,
                birth: i.birth,
                blocks: i.mapped_blocks(),
            })
        })
    }

    /// Full structural check of the current image.
    pub fn fsck(&self) -> Result<super::FsckReport> {
        self.tick();
        let dev = self.dev.read();
        super::fsck::check(&dev, &self.geo)
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use parking_lot::RwLock;

    use super::*;
    use crate::pmem::{Policy, SnapshotKind};

    fn fresh(cap: u64) -> (SharedDevice, Kfs) {
        let dev = Arc::new(RwLock::new(PmemDevice::new(cap).unwrap()));
        Kfs::mkfs(&dev, Geometry::for_capacity(cap).unwrap()).unwrap();
        let fs = Kfs::mount(dev.clone()).unwrap();
        (dev, fs)
    }

    fn remount(dev: &SharedDevice) -> Kfs {
        let img = dev.read().snapshot(SnapshotKind::Persistent);
        let d2 = Arc::new(RwLock::new(PmemDevice::from_image(img).unwrap()));
        Kfs::mount(d2).unwrap()
    }

    fn free_blocks(fs: &Kfs) -> u64 {
        fs.fsck().unwrap().free_blocks
    }

    #[test]
    fn first_create_is_ino_1() {
        let (_, fs) = fresh(1 << 20);
        assert_eq!(fs.create("a").unwrap(), Ino(1));
        assert_eq!(fs.lookup("a").unwrap(), Ino(1));
        assert!(matches!(fs.create("a"), Err(KfsError::Exists(_))));
    }

    #[test]
    fn unlink_then_lookup_fails() {
        let (_, fs) = fresh(1 << 20);
        let ino = fs.create("a").unwrap();
        fs.write_direct(ino, 0, &[1; 5000]).unwrap();
        let before = free_blocks(&fs);
        fs.unlink("a").unwrap();
        assert!(matches!(fs.lookup("a"), Err(KfsError::NotFound(_))));
        assert_eq!(free_blocks(&fs), before + 2);
        assert!(matches!(fs.unlink("a"), Err(KfsError::NotFound(_))));
    }

    #[test]
    fn bad_names_rejected() {
        let (_, fs) = fresh(1 << 20);
        assert!(fs.create("").is_err());
        assert!(fs.create("a/b").is_err());
        assert!(fs.create(&"x".repeat(57)).is_err());
        assert!(fs.create(&"x".repeat(56)).is_ok());
    }

    #[test]
    fn write_read_and_persist() {
        let (dev, fs) = fresh(1 << 20);
        let ino = fs.create("f").unwrap();
        let data: Vec<u8> = (0..6000u32).map(|i| (i % 251) as u8).collect();
        fs.write_direct(ino, 100, &data).unwrap();
        assert_eq!(fs.stat(ino).unwrap().size, 6100);
        let back = fs.read_direct(ino, 0, 10_000).unwrap();
        assert_eq!(&back[..100], &[0u8; 100][..]);
        assert_eq!(&back[100..], &data[..]);
        let fs2 = remount(&dev);
        assert_eq!(fs2.read_direct(ino, 100, 6000).unwrap(), data);
        assert!(fs2.fsck().unwrap().is_clean());
    }

    #[test]
    fn relink_aligned_moves_blocks() {
        let (dev, fs) = fresh(1 << 20);
        let src = fs.create("src").unwrap();
        let dst = fs.create("dst").unwrap();
        fs.write_direct(src, 0, &[7; 8192]).unwrap();
        let src_map = fs.map_extents(src, 0, 8192).unwrap();
        dev.write().reset_counters("t");
        fs.relink(src, 0, dst, 0, 8192).unwrap();
        assert_eq!(fs.map_extents(dst, 0, 8192).unwrap(), src_map);
        assert!(fs.map_extents(src, 0, 1).is_err());
        assert_eq!(dev.read().counters().relink_data_bytes_copied, 0);
        assert_eq!(fs.read_direct(dst, 0, 8192).unwrap(), vec![7; 8192]);
        assert_eq!(fs.stat(dst).unwrap().generation, 1);
        assert!(fs.fsck().unwrap().is_clean());
    }

    #[test]
    fn relink_unaligned_tail_copies_exactly_tail() {
        let (dev, fs) = fresh(1 << 20);
        let src = fs.create("src").unwrap();
        let dst = fs.create("dst").unwrap();
        let data: Vec<u8> = (0..8192u32).map(|i| (i * 7 % 256) as u8).collect();
        fs.write_direct(src, 0, &data).unwrap();
        dev.write().reset_counters("t");
        fs.relink(src, 0, dst, 0, 4096 + 512).unwrap();
        assert_eq!(dev.read().counters().relink_data_bytes_copied, 512);
        assert_eq!(fs.read_direct(dst, 0, 8192).unwrap(), data[..4608].to_vec());
        assert!(fs.fsck().unwrap().is_clean());
    }

    #[test]
    fn relink_frees_replaced_destination_blocks() {
        let (_, fs) = fresh(1 << 20);
        let src = fs.create("src").unwrap();
        let dst = fs.create("dst").unwrap();
        fs.write_direct(dst, 0, &[1; 8192]).unwrap();
        let old: Vec<u64> = fs.map_extents(dst, 0, 8192).unwrap().iter().map(|e| e.0).collect();
        fs.write_direct(src, 0, &[2; 8192]).unwrap();
        let free_before = free_blocks(&fs);
        fs.relink(src, 0, dst, 0, 8192).unwrap();
        assert_eq!(free_blocks(&fs), free_before + 2);
        let now: Vec<u64> = fs.map_extents(dst, 0, 8192).unwrap().iter().map(|e| e.0).collect();
        assert_ne!(old, now);
        assert_eq!(fs.read_direct(dst, 0, 8192).unwrap(), vec![2; 8192]);
    }

    #[test]
    fn skipped_dealloc_shows_as_leak() {
        let (_, fs) = fresh(1 << 20);
        let src = fs.create("src").unwrap();
        let dst = fs.create("dst").unwrap();
        fs.write_direct(dst, 0, &[1; 4096]).unwrap();
        fs.write_direct(src, 0, &[2; 4096]).unwrap();
        fs.inject(Fault::SkipRelinkDealloc);
        fs.relink(src, 0, dst, 0, 4096).unwrap();
        assert!(!fs.fsck().unwrap().is_clean());
    }

    #[test]
    fn relink_hole_in_source_is_rejected() {
        let (_, fs) = fresh(1 << 20);
        let src = fs.create("src").unwrap();
        let dst = fs.create("dst").unwrap();
        assert!(matches!(fs.relink(src, 0, dst, 0, 10), Err(KfsError::Hole { .. })));
        assert!(matches!(fs.relink(src, 0, dst, 0, 0), Err(KfsError::InvalidArgument(_))));
    }

    #[test]
    fn relink_by_swap_matches_native() {
        let run = |swap: bool| {
            let (dev, fs) = fresh(1 << 20);
            let src = fs.create("src").unwrap();
            let dst = fs.create("dst").unwrap();
            fs.write_direct(dst, 0, &[1; 12288]).unwrap();
            fs.write_direct(src, 0, &[2; 8192]).unwrap();
            if swap {
                fs.relink_by_swap(src, 0, dst, 4096, 8192).unwrap();
            } else {
                fs.relink(src, 0, dst, 4096, 8192).unwrap();
            }
            assert!(fs.fsck().unwrap().is_clean());
            let content = fs.read_direct(dst, 0, 12288).unwrap();
            let free = free_blocks(&fs);
            drop(dev);
            (content, free)
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn enospc_has_no_partial_effect() {
        let (dev, fs) = fresh(1 << 20);
        let ino = fs.create("big").unwrap();
        let before = dev.read().snapshot(SnapshotKind::Volatile);
        assert!(matches!(fs.allocate(ino, 0, 2 << 20), Err(KfsError::NoSpace)));
        assert_eq!(dev.read().snapshot(SnapshotKind::Volatile), before);
        assert_eq!(fs.stat(ino).unwrap().size, 0);
    }

    #[test]
    fn truncate_shrinks_and_zeroes_tail() {
        let (_, fs) = fresh(1 << 20);
        let ino = fs.create("f").unwrap();
        fs.write_direct(ino, 0, &[9; 10_000]).unwrap();
        fs.truncate(ino, 5000).unwrap();
        assert_eq!(fs.stat(ino).unwrap().blocks, 2);
        fs.truncate(ino, 9000).unwrap();
        let back = fs.read_direct(ino, 0, 9000).unwrap();
        assert_eq!(&back[..5000], &[9u8; 5000][..]);
        assert!(back[5000..].iter().all(|&b| b == 0));
        assert!(fs.fsck().unwrap().is_clean());
    }

    #[test]
    fn extend_zeroes_stale_tail() {
        let (_, fs) = fresh(1 << 20);
        let ino = fs.create("f").unwrap();
        fs.write_direct(ino, 0, &[9; 4096]).unwrap();
        fs.truncate(ino, 10).unwrap();
        fs.write_direct(ino, 3000, &[1; 10]).unwrap();
        let back = fs.read_direct(ino, 0, 3010).unwrap();
        assert!(back[10..3000].iter().all(|&b| b == 0));
    }

    #[test]
    fn rename_replaces_target() {
        let (dev, fs) = fresh(1 << 20);
        let a = fs.create("a").unwrap();
        let b = fs.create("b").unwrap();
        fs.write_direct(b, 0, &[1; 4096]).unwrap();
        fs.rename("a", "b").unwrap();
        assert_eq!(fs.lookup("b").unwrap(), a);
        assert!(fs.lookup("a").is_err());
        assert!(fs.stat(b).is_err());
        let fs2 = remount(&dev);
        assert_eq!(fs2.list(), vec![("b".to_string(), a)]);
        assert!(fs2.fsck().unwrap().is_clean());
    }

    #[test]
    fn mount_is_idempotent() {
        let (dev, fs) = fresh(1 << 20);
        let ino = fs.create("x").unwrap();
        fs.write_direct(ino, 0, &[3; 300]).unwrap();
        let d1 = Arc::new(RwLock::new(
            PmemDevice::from_image(dev.read().snapshot(SnapshotKind::Persistent)).unwrap(),
        ));
        Kfs::mount(d1.clone()).unwrap();
        let s1 = d1.read().snapshot(SnapshotKind::Persistent);
        Kfs::mount(d1.clone()).unwrap();
        assert_eq!(d1.read().snapshot(SnapshotKind::Persistent), s1);
    }

    #[test]
    fn corrupt_superblock_is_unmountable() {
        let (dev, _) = fresh(1 << 20);
        let mut img = dev.read().snapshot(SnapshotKind::Persistent);
        img[20] ^= 0xff;
        let d = Arc::new(RwLock::new(PmemDevice::from_image(img).unwrap()));
        assert!(matches!(Kfs::mount(d), Err(KfsError::BadSuperblock(_))));
    }

    #[test]
    fn create_crash_before_commit_leaves_no_file() {
        let (dev, fs) = fresh(1 << 20);
        dev.write().set_tracing(true);
        let base = dev.read().snapshot(SnapshotKind::Persistent);
        fs.create("a").unwrap();
        let trace = dev.read().trace().to_vec();
        // Replay up to the first fence: journal body durable, no commit.
        let mut d = PmemDevice::from_image(base).unwrap();
        for ev in &trace {
            d.apply_event(ev).unwrap();
            if ev.is_fence() {
                break;
            }
        }
        let img = d.crash_image(Policy::StrictEpoch, &Default::default()).unwrap();
        let fs2 = Kfs::mount(Arc::new(RwLock::new(PmemDevice::from_image(img).unwrap()))).unwrap();
        assert!(fs2.lookup("a").is_err());
        assert!(fs2.fsck().unwrap().is_clean());
    }

    #[test]
    fn calls_and_hints_advance() {
        let (_, fs) = fresh(1 << 20);
        let ino = fs.create("a").unwrap();
        let h = fs.generation_hint(ino);
        fs.allocate(ino, 0, 4096).unwrap();
        assert!(fs.generation_hint(ino) > h);
        assert_eq!(fs.calls(), 2);
    }

    #[test]
    fn many_extents_spill_to_chain() {
        let (dev, fs) = fresh(4 << 20);
        let a = fs.create("a").unwrap();
        let b = fs.create("b").unwrap();
        // Interleave allocations so extents cannot merge.
        for i in 0..20u64 {
            fs.write_direct(a, i * 4096, &[i as u8; 4096]).unwrap();
            fs.write_direct(b, i * 4096, &[0; 4096]).unwrap();
        }
        assert!(fs.fsck().unwrap().is_clean());
        let fs2 = remount(&dev);
        for i in 0..20u64 {
            assert_eq!(fs2.read_direct(a, i * 4096, 4096).unwrap(), vec![i as u8; 4096]);
        }
        fs.unlink("a").unwrap();
        assert!(fs.fsck().unwrap().is_clean());
    }
}
