// SPDX-License-Identifier: Apache-2.0

//! In-memory inode with its extent list, and its encoding.

use super::alloc;
use super::journal::Txn;
use super::layout::{
    get_u32, put_u32, Extent, Geometry, InodeHeader, BLOCK_SIZE, CHAIN_EXTENTS, CHAIN_MAGIC,
    EXTENT_SIZE, INLINE_EXTENTS, INLINE_EXTENT_OFF, INODE_SIZE, MAX_EXTENT_BLOCKS,
};
use super::{Ino, KfsError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Inode {
    pub ino: Ino,
    pub flags: u32,
    pub size: u64,
    pub generation: u64,
    pub birth: u64,
    /// Sorted by `file_block`, non-overlapping.
    pub extents: Vec<Extent>,
    /// Blocks holding the extent chain, in order.
    pub chain: Vec<u32>,
}

impl Inode {
    pub fn new(ino: Ino, birth: u64) -> Self {
        Inode {
            ino,
            flags: 0,
            size: 0,
            generation: 0,
            birth,
            extents: Vec::new(),
            chain: Vec::new(),
        }
    }

    pub fn load(txn: &Txn<'_>, geo: &Geometry, ino: Ino) -> Result<Self> {
        if ino.0 == 0 || ino.0 >= geo.inode_slots() {
            return Err(KfsError::NoSuchInode(ino));
        }
        let slot = txn.read_vec(geo.inode_addr(ino), INODE_SIZE as usize)?;
        let h = InodeHeader::decode(&slot);
        if h.ino != ino.0 {
            return Err(KfsError::NoSuchInode(ino));
        }
        let n = h.extent_count as usize;
        let mut extents = Vec::with_capacity(n);
        let mut chain = Vec::new();
        if n <= INLINE_EXTENTS {
            for i in 0..n {
                let at = INLINE_EXTENT_OFF + i * EXTENT_SIZE;
                extents.push(Extent::decode(&slot[at..at + EXTENT_SIZE]));
            }
        } else {
            let mut next = h.chain_head;
            while extents.len() < n {
                if next < geo.data_start() || next >= geo.total_blocks || chain.len() > n {
                    return Err(KfsError::Corrupt(format!("{ino}: bad extent chain block {next}")));
                }
                let blk = txn.read_vec(geo.block_addr(next), BLOCK_SIZE as usize)?;
                if get_u32(&blk, 0) != CHAIN_MAGIC {
                    return Err(KfsError::Corrupt(format!("{ino}: chain block {next} lacks magic")));
                }
                chain.push(next);
                let count = (get_u32(&blk, 8) as usize).min(CHAIN_EXTENTS);
                for i in 0..count {
                    let at = 16 + i * EXTENT_SIZE;
                    extents.push(Extent::decode(&blk[at..at + EXTENT_SIZE]));
                }
                next = get_u32(&blk, 4);
                if count == 0 {
                    break;
                }
            }
            extents.truncate(n);
        }
        validate_extents(ino, geo, &extents)?;
        Ok(Inode {
            ino,
            flags: h.flags,
            size: h.size,
            generation: h.generation,
            birth: h.birth,
            extents,
            chain,
        })
    }

    /// Writes the slot and the extent chain, growing or shrinking the
    /// chain through the allocator.
    pub fn store(&mut self, txn: &mut Txn<'_>, geo: &Geometry, cursor: &mut u32) -> Result<()> {
        let n = self.extents.len();
        let need = if n <= INLINE_EXTENTS { 0 } else { n.div_ceil(CHAIN_EXTENTS) };
        while self.chain.len() > need {
            let b = self.chain.pop().unwrap();
            alloc::set_used(txn, geo, b, false)?;
        }
        while self.chain.len() < need {
            let (b, _) = alloc::alloc_run(txn, geo, cursor, 1)?;
            self.chain.push(b);
        }
        let mut slot = [0u8; INODE_SIZE as usize];
        InodeHeader {
            ino: self.ino.0,
            flags: self.flags,
            size: self.size,
            generation: self.generation,
            birth: self.birth,
            extent_count: n as u32,
            chain_head: self.chain.first().copied().unwrap_or(0),
        }
        .encode(&mut slot);
        if need == 0 {
            for (i, e) in self.extents.iter().enumerate() {
                let at = INLINE_EXTENT_OFF + i * EXTENT_SIZE;
                e.encode(&mut slot[at..at + EXTENT_SIZE]);
            }
        } else {
            for (ci, &b) in self.chain.iter().enumerate() {
                let part = &self.extents[ci * CHAIN_EXTENTS..((ci + 1) * CHAIN_EXTENTS).min(n)];
                let mut blk = vec![0u8; BLOCK_SIZE as usize];
                put_u32(&mut blk, 0, CHAIN_MAGIC);
                put_u32(&mut blk, 4, self.chain.get(ci + 1).copied().unwrap_or(0));
                put_u32(&mut blk, 8, part.len() as u32);
                for (i, e) in part.iter().enumerate() {
                    let at = 16 + i * EXTENT_SIZE;
                    e.encode(&mut blk[at..at + EXTENT_SIZE]);
                }
                txn.write(geo.block_addr(b), &blk)?;
            }
        }
        txn.write(geo.inode_addr(self.ino), &slot)
    }

    /// Clears the slot and releases chain blocks. Data blocks are the
    /// caller's business.
    pub fn erase(&mut self, txn: &mut Txn<'_>, geo: &Geometry) -> Result<()> {
        for &b in &self.chain {
            alloc::set_used(txn, geo, b, false)?;
        }
        self.chain.clear();
        txn.write(geo.inode_addr(self.ino), &[0u8; INODE_SIZE as usize])
    }

    /// Index of the first extent ending after `fb`.
    fn first_ending_after(&self, fb: u32) -> usize {
        self.extents.partition_point(|e| e.file_end() <= fb)
    }

    pub fn lookup_block(&self, fb: u32) -> Option<u32> {
        let i = self.first_ending_after(fb);
        let e = self.extents.get(i)?;
        (e.file_block <= fb).then(|| e.device_block + (fb - e.file_block))
    }

    /// Maps `[fb, fb + n)` as runs of `(file_block, Option<device_block>, len)`.
    pub fn runs(&self, fb: u32, n: u32) -> Vec<(u32, Option<u32>, u32)> {
        let end = fb + n;
        let mut out = Vec::new();
        let mut pos = fb;
        let mut i = self.first_ending_after(fb);
        while pos < end {
            match self.extents.get(i) {
                Some(e) if e.file_block <= pos => {
                    let stop = e.file_end().min(end);
                    out.push((pos, Some(e.device_block + (pos - e.file_block)), stop - pos));
                    pos = stop;
                    i += 1;
                }
                Some(e) if e.file_block < end => {
                    out.push((pos, None, e.file_block - pos));
                    pos = e.file_block;
                }
                _ => {
                    out.push((pos, None, end - pos));
                    pos = end;
                }
            }
        }
        out
    }

    /// Removes the mapping of `[fb, fb + n)` and returns the removed
    /// pieces.
    pub fn unmap(&mut self, fb: u32, n: u32) -> Vec<Extent> {
        let end = fb + n;
        let mut removed = Vec::new();
        let mut kept = Vec::with_capacity(self.extents.len() + 1);
        for e in self.extents.drain(..) {
            if e.file_end() <= fb || e.file_block >= end {
                kept.push(e);
                continue;
            }
            if e.file_block < fb {
                kept.push(Extent { length: fb - e.file_block, ..e });
            }
            let s = e.file_block.max(fb);
            let t = e.file_end().min(end);
            removed.push(Extent {
                file_block: s,
                device_block: e.device_block + (s - e.file_block),
                length: t - s,
            });
            if e.file_end() > end {
                kept.push(Extent {
                    file_block: end,
                    device_block: e.device_block + (end - e.file_block),
                    length: e.file_end() - end,
                });
            }
        }
        self.extents = kept;
        removed
    }

    /// Maps `[fb, fb + n)` to device blocks starting at `dev`. The range
    /// must currently be unmapped.
    pub fn map(&mut self, fb: u32, dev: u32, n: u32) {
        debug_assert!(self.runs(fb, n).iter().all(|r| r.1.is_none()));
        let i = self.first_ending_after(fb);
        self.extents.insert(
            i,
            Extent {
                file_block: fb,
                device_block: dev,
                length: n,
            },
        );
        self.normalize();
    }

    /// Merges adjacent extents and splits overlong ones.
    fn normalize(&mut self) {
        let mut out: Vec<Extent> = Vec::with_capacity(self.extents.len());
        for e in self.extents.drain(..) {
            let mut e = e;
            if let Some(last) = out.last_mut() {
                if last.file_end() == e.file_block
                    && last.device_block + last.length == e.device_block
                    && last.length < MAX_EXTENT_BLOCKS
                {
                    let take = (MAX_EXTENT_BLOCKS - last.length).min(e.length);
                    last.length += take;
                    e.file_block += take;
                    e.device_block += take;
                    e.length -= take;
                }
            }
            while e.length > 0 {
                let take = e.length.min(MAX_EXTENT_BLOCKS);
                out.push(Extent { length: take, ..e });
                e.file_block += take;
                e.device_block += take;
                e.length -= take;
            }
        }
        self.extents = out;
    }

    pub fn mapped_blocks(&self) -> u64 {
        self.extents.iter().map(|e| e.length as u64).sum()
    }

    /// One past the last mapped file block.
    pub fn mapped_end(&self) -> u32 {
        self.extents.last().map(|e| e.file_end()).unwrap_or(0)
    }
}

/// Rejects extent lists that later arithmetic could not handle: empty,
/// unsorted or overlapping extents, and blocks outside the data region.
fn validate_extents(ino: Ino, geo: &Geometry, extents: &[Extent]) -> Result<()> {
    let mut prev_end = 0u32;
    for e in extents {
        let file_end = e.file_block.checked_add(e.length);
        let dev_end = e.device_block.checked_add(e.length);
        let ok = e.length > 0
            && e.file_block >= prev_end
            && file_end.is_some()
            && e.device_block >= geo.data_start()
            && dev_end.is_some_and(|d| d <= geo.total_blocks);
        if !ok {
            return Err(KfsError::Corrupt(format!("{ino}: bad extent {e:?}")));
        }
        prev_end = e.file_block + e.length;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pmem::PmemDevice;

    fn ext(f: u32, d: u32, l: u32) -> Extent {
        Extent {
            file_block: f,
            device_block: d,
            length: l,
        }
    }

    #[test]
    fn map_merges_contiguous() {
        let mut i = Inode::new(Ino(1), 0);
        i.map(0, 100, 2);
        i.map(2, 102, 3);
        assert_eq!(i.extents, vec![ext(0, 100, 5)]);
        i.map(10, 50, 1);
        assert_eq!(i.extents.len(), 2);
        assert_eq!(i.lookup_block(3), Some(103));
        assert_eq!(i.lookup_block(7), None);
        assert_eq!(i.lookup_block(10), Some(50));
    }

    #[test]
    fn extent_length_capped() {
        let mut i = Inode::new(Ino(1), 0);
        i.map(0, 1000, 600);
        assert_eq!(i.extents, vec![ext(0, 1000, 512), ext(512, 1512, 88)]);
    }

    #[test]
    fn unmap_splits() {
        let mut i = Inode::new(Ino(1), 0);
        i.map(0, 100, 10);
        let removed = i.unmap(3, 4);
        assert_eq!(removed, vec![ext(3, 103, 4)]);
        assert_eq!(i.extents, vec![ext(0, 100, 3), ext(7, 107, 3)]);
        assert_eq!(
            i.runs(2, 6),
            vec![(2, Some(102), 1), (3, None, 4), (7, Some(107), 1)]
        );
    }

    #[test]
    fn chain_round_trip() {
        let geo = Geometry::for_capacity(4 << 20).unwrap();
        let dev = PmemDevice::new(geo.capacity()).unwrap();
        let mut t = Txn::new(&dev);
        let mut cur = 0;
        let mut i = Inode::new(Ino(3), 9);
        for k in 0..300 {
            // Non-contiguous device blocks keep extents separate.
            i.map(k * 2, geo.data_start() + 100 + k * 3, 1);
        }
        i.size = 12345;
        i.store(&mut t, &geo, &mut cur).unwrap();
        assert_eq!(i.chain.len(), 2);
        let back = Inode::load(&t, &geo, Ino(3)).unwrap();
        assert_eq!(back, i);
        i.extents.truncate(4);
        i.store(&mut t, &geo, &mut cur).unwrap();
        assert!(i.chain.is_empty());
        assert_eq!(Inode::load(&t, &geo, Ino(3)).unwrap(), i);
        assert_eq!(alloc::count_free(&t, &geo).unwrap(), (geo.total_blocks - geo.data_start()) as u64);
    }
}
