// SPDX-License-Identifier: Apache-2.0

//! On-device layout.
//!
//! ```text
//! block 0          superblock
//! journal          redo journal, one transaction at a time
//! bitmap           one bit per device block
//! inode table      128-byte inode slots, 32 per block
//! namespace        64-byte name entries, 64 per block
//! data             file blocks and extent-chain blocks
//! ```
//!
//! All integers are little-endian. Checksums are CRC32 (IEEE).

use serde::{Deserialize, Serialize};

use super::{Ino, KfsError, Result};

pub const BLOCK_SIZE: u64 = 4096;
pub const INODE_SIZE: u64 = 128;
pub const INODES_PER_BLOCK: u64 = BLOCK_SIZE / INODE_SIZE;
pub const NS_ENTRY_SIZE: u64 = 64;
pub const NS_PER_BLOCK: u64 = BLOCK_SIZE / NS_ENTRY_SIZE;
/// Longest file name in bytes.
pub const NAME_MAX: usize = 56;
/// Extents stored in the inode slot itself.
pub const INLINE_EXTENTS: usize = 5;
/// Extents per chain block (16-byte header, 255 records).
pub const CHAIN_EXTENTS: usize = 255;
/// Longest single extent, in blocks (2 MiB).
pub const MAX_EXTENT_BLOCKS: u32 = 512;
pub const EXTENT_SIZE: usize = 16;

pub(crate) const SB_MAGIC: &[u8; 8] = b"PMSPLTFS";
pub(crate) const SB_VERSION: u32 = 1;
pub(crate) const CHAIN_MAGIC: u32 = 0x4e48_4358; // "XCHN"

/// Region sizes in blocks. Start offsets are derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub total_blocks: u32,
    pub journal_blocks: u32,
    pub inode_table_blocks: u32,
    pub namespace_blocks: u32,
}

impl Geometry {
    pub fn new(
        total_blocks: u32,
        journal_blocks: u32,
        inode_table_blocks: u32,
        namespace_blocks: u32,
    ) -> Result<Self> {
        let g = Geometry {
            total_blocks,
            journal_blocks,
            inode_table_blocks,
            namespace_blocks,
        };
        if journal_blocks == 0 || inode_table_blocks == 0 || namespace_blocks == 0 {
            return Err(KfsError::BadGeometry("every region needs at least one block".into()));
        }
        if g.data_start() as u64 >= total_blocks as u64 {
            return Err(KfsError::BadGeometry(format!(
                "metadata regions ({} blocks) leave no data blocks out of {}",
                g.data_start(),
                total_blocks
            )));
        }
        Ok(g)
    }

    /// Region sizes scaled to a device capacity in bytes.
    pub fn for_capacity(capacity: u64) -> Result<Self> {
        if capacity % BLOCK_SIZE != 0 || capacity / BLOCK_SIZE > u32::MAX as u64 {
            return Err(KfsError::BadGeometry(format!("unusable capacity {capacity}")));
        }
        let total = (capacity / BLOCK_SIZE) as u32;
        let journal = (total / 64).clamp(8, 512);
        let inodes = (total / 1024).clamp(1, 64);
        let names = (total / 2048).clamp(1, 32);
        Geometry::new(total, journal, inodes, names)
    }

    pub fn bitmap_blocks(&self) -> u32 {
        (self.total_blocks as u64).div_ceil(BLOCK_SIZE * 8) as u32
    }

    pub fn journal_start(&self) -> u32 {
        1
    }

    pub fn bitmap_start(&self) -> u32 {
        self.journal_start() + self.journal_blocks
    }

    pub fn inode_start(&self) -> u32 {
        self.bitmap_start() + self.bitmap_blocks()
    }

    pub fn namespace_start(&self) -> u32 {
        self.inode_start() + self.inode_table_blocks
    }

    /// First block of the data region; everything below is fixed metadata.
    pub fn data_start(&self) -> u32 {
        self.namespace_start() + self.namespace_blocks
    }

    pub fn capacity(&self) -> u64 {
        self.total_blocks as u64 * BLOCK_SIZE
    }

    /// Number of inode slots. Slot 0 is never used, so valid inos are
    /// `1..inode_slots()`.
    pub fn inode_slots(&self) -> u32 {
        (self.inode_table_blocks as u64 * INODES_PER_BLOCK) as u32
    }

    pub fn namespace_slots(&self) -> u32 {
        (self.namespace_blocks as u64 * NS_PER_BLOCK) as u32
    }

    pub fn journal_addr(&self) -> u64 {
        self.journal_start() as u64 * BLOCK_SIZE
    }

    pub fn journal_bytes(&self) -> u64 {
        self.journal_blocks as u64 * BLOCK_SIZE
    }

    pub fn bitmap_addr(&self) -> u64 {
        self.bitmap_start() as u64 * BLOCK_SIZE
    }

    pub fn inode_addr(&self, ino: Ino) -> u64 {
        self.inode_start() as u64 * BLOCK_SIZE + ino.0 as u64 * INODE_SIZE
    }

    pub fn ns_addr(&self, slot: u32) -> u64 {
        self.namespace_start() as u64 * BLOCK_SIZE + slot as u64 * NS_ENTRY_SIZE
    }

    pub fn block_addr(&self, block: u32) -> u64 {
        block as u64 * BLOCK_SIZE
    }

    pub(crate) fn encode(&self) -> [u8; 64] {
        let mut l = [0u8; 64];
        l[0..8].copy_from_slice(SB_MAGIC);
        put_u32(&mut l, 8, SB_VERSION);
        put_u32(&mut l, 12, BLOCK_SIZE as u32);
        put_u32(&mut l, 16, self.total_blocks);
        put_u32(&mut l, 20, self.journal_blocks);
        put_u32(&mut l, 24, self.bitmap_blocks());
        put_u32(&mut l, 28, self.inode_table_blocks);
        put_u32(&mut l, 32, self.namespace_blocks);
        seal_line(&mut l);
        l
    }

    pub(crate) fn decode(l: &[u8]) -> Result<Self> {
        if &l[0..8] != SB_MAGIC {
            return Err(KfsError::BadSuperblock("bad magic".into()));
        }
        if !line_crc_ok(l) {
            return Err(KfsError::BadSuperblock("geometry checksum mismatch".into()));
        }
        if get_u32(l, 8) != SB_VERSION || get_u32(l, 12) != BLOCK_SIZE as u32 {
            return Err(KfsError::BadSuperblock("unsupported version or block size".into()));
        }
        let g = Geometry::new(get_u32(l, 16), get_u32(l, 20), get_u32(l, 28), get_u32(l, 32))
            .map_err(|e| KfsError::BadSuperblock(e.to_string()))?;
        if get_u32(l, 24) != g.bitmap_blocks() {
            return Err(KfsError::BadSuperblock("bitmap size mismatch".into()));
        }
        Ok(g)
    }
}

/// Second superblock line: allocation counters.
pub(crate) const SB_COUNTERS_ADDR: u64 = 64;

pub(crate) fn encode_counters(next_birth: u64) -> [u8; 64] {
    let mut l = [0u8; 64];
    put_u64(&mut l, 0, next_birth);
    seal_line(&mut l);
    l
}

pub(crate) fn decode_counters(l: &[u8]) -> Result<u64> {
    if !line_crc_ok(l) {
        return Err(KfsError::BadSuperblock("counter checksum mismatch".into()));
    }
    Ok(get_u64(l, 0))
}

/// One contiguous mapping of file blocks to device blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extent {
    pub file_block: u32,
    pub device_block: u32,
    pub length: u32,
}

impl Extent {
    pub fn file_end(&self) -> u32 {
        self.file_block.saturating_add(self.length)
    }

    pub(crate) fn encode(&self, out: &mut [u8]) {
        put_u32(out, 0, self.file_block);
        put_u32(out, 4, self.device_block);
        put_u32(out, 8, self.length);
        put_u32(out, 12, 0);
    }

    pub(crate) fn decode(b: &[u8]) -> Self {
        Extent {
            file_block: get_u32(b, 0),
            device_block: get_u32(b, 4),
            length: get_u32(b, 8),
        }
    }
}

/// Decoded inode slot header. Extents are handled by [`super::inode`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub(crate) struct InodeHeader {
    pub ino: u32,
    pub flags: u32,
    pub size: u64,
    pub generation: u64,
    pub birth: u64,
    pub extent_count: u32,
    pub chain_head: u32,
}

impl InodeHeader {
    pub fn encode(&self, out: &mut [u8]) {
        put_u32(out, 0, self.ino);
        put_u32(out, 4, self.flags);
        put_u64(out, 8, self.size);
        put_u64(out, 16, self.generation);
        put_u64(out, 24, self.birth);
        put_u32(out, 32, self.extent_count);
        put_u32(out, 36, self.chain_head);
        out[40..48].fill(0);
    }

    pub fn decode(b: &[u8]) -> Self {
        InodeHeader {
            ino: get_u32(b, 0),
            flags: get_u32(b, 4),
            size: get_u64(b, 8),
            generation: get_u64(b, 16),
            birth: get_u64(b, 24),
            extent_count: get_u32(b, 32),
            chain_head: get_u32(b, 36),
        }
    }
}

/// Offset of the first inline extent inside an inode slot.
pub(crate) const INLINE_EXTENT_OFF: usize = 48;

pub(crate) fn encode_ns_entry(ino: u32, name: &str) -> [u8; 64] {
    let mut l = [0u8; 64];
    put_u32(&mut l, 0, ino);
    l[4..6].copy_from_slice(&(name.len() as u16).to_le_bytes());
    l[8..8 + name.len()].copy_from_slice(name.as_bytes());
    l
}

/// Returns `(ino, name)` for a used entry.
pub(crate) fn decode_ns_entry(l: &[u8]) -> Option<(u32, String)> {
    let ino = get_u32(l, 0);
    if ino == 0 {
        return None;
    }
    let len = (u16::from_le_bytes([l[4], l[5]]) as usize).min(NAME_MAX);
    Some((ino, String::from_utf8_lossy(&l[8..8 + len]).into_owned()))
}

pub(crate) fn put_u32(b: &mut [u8], at: usize, v: u32) {
    b[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u64(b: &mut [u8], at: usize, v: u64) {
    b[at..at + 8].copy_from_slice(&v.to_le_bytes());
}

pub(crate) fn get_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

pub(crate) fn get_u64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

/// Stores a CRC of bytes `[0, 60)` in the last four bytes of a line.
pub(crate) fn seal_line(l: &mut [u8; 64]) {
    let c = crc32fast::hash(&l[..60]);
    put_u32(l, 60, c);
}

pub(crate) fn line_crc_ok(l: &[u8]) -> bool {
    crc32fast::hash(&l[..60]) == get_u32(l, 60)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regions_are_disjoint_and_ordered() {
        let g = Geometry::for_capacity(1 << 20).unwrap();
        assert_eq!(g.total_blocks, 256);
        assert_eq!(g.journal_start(), 1);
        assert_eq!(g.bitmap_start(), 1 + g.journal_blocks);
        assert_eq!(g.bitmap_blocks(), 1);
        assert!(g.inode_start() < g.namespace_start());
        assert!(g.data_start() < g.total_blocks);
    }

    #[test]
    fn bitmap_blocks_round_up() {
        let g = Geometry::new(32769, 8, 1, 1).unwrap();
        assert_eq!(g.bitmap_blocks(), 2);
    }

    #[test]
    fn geometry_round_trip() {
        let g = Geometry::for_capacity(128 << 20).unwrap();
        assert_eq!(Geometry::decode(&g.encode()).unwrap(), g);
        let mut bad = g.encode();
        bad[16] ^= 1;
        assert!(Geometry::decode(&bad).is_err());
    }

    #[test]
    fn rejects_tiny_device() {
        assert!(Geometry::new(10, 8, 1, 1).is_err());
    }

    #[test]
    fn ns_entry_round_trip() {
        let l = encode_ns_entry(7, "hello");
        assert_eq!(decode_ns_entry(&l), Some((7, "hello".to_string())));
        assert_eq!(decode_ns_entry(&[0u8; 64]), None);
    }
}
