// SPDX-License-Identifier: Apache-2.0

//! Structural checker, independent of the in-memory mount state.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::pmem::PmemDevice;

use super::alloc;
use super::inode::Inode;
use super::journal::Txn;
use super::layout::{decode_counters, decode_ns_entry, Geometry, InodeHeader, BLOCK_SIZE, INODE_SIZE, SB_COUNTERS_ADDR};
use super::{Ino, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FsckReport {
    pub total_blocks: u64,
    pub free_blocks: u64,
    /// Blocks referenced by live extents.
    pub data_blocks: u64,
    /// Fixed metadata regions plus extent-chain blocks.
    pub metadata_blocks: u64,
    pub files: u64,
    pub problems: Vec<String>,
}

impl FsckReport {
    pub fn is_clean(&self) -> bool {
        self.problems.is_empty()
    }

    /// Free + live + metadata must account for every block.
    pub fn conserved(&self) -> bool {
        self.free_blocks + self.data_blocks + self.metadata_blocks == self.total_blocks
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Owner {
    Data(Ino),
    Chain(Ino),
}

pub(crate) fn check(dev: &PmemDevice, geo: &Geometry) -> Result<FsckReport> {
    let txn = Txn::new(dev);
    let mut r = FsckReport {
        total_blocks: geo.total_blocks as u64,
        metadata_blocks: geo.data_start() as u64,
        ..FsckReport::default()
    };
    let next_birth = match decode_counters(dev.volatile_slice(SB_COUNTERS_ADDR, 64)?) {
        Ok(b) => b,
        Err(e) => {
            r.problems.push(e.to_string());
            u64::MAX
        }
    };
    for b in 0..geo.data_start() {
        if !alloc::is_used(&txn, geo, b)? {
            r.problems.push(format!("metadata block {b} marked free"));
        }
    }

    let mut owners: HashMap<u32, Owner> = HashMap::new();
    let mut claim = |r: &mut FsckReport, b: u32, who: Owner| {
        if b < geo.data_start() || b >= geo.total_blocks {
            r.problems.push(format!("block {b} outside the data region"));
        } else if owners.insert(b, who).is_some() {
            r.problems.push(format!("block {b} has two owners"));
        }
    };
    let mut live: HashMap<u32, u64> = HashMap::new();
    for i in 1..geo.inode_slots() {
        let ino = Ino(i);
        let h = InodeHeader::decode(dev.volatile_slice(geo.inode_addr(ino), INODE_SIZE)?);
        if h.ino == 0 {
            continue;
        }
        if h.ino != i {
            r.problems.push(format!("slot {i} holds inode number {}", h.ino));
            continue;
        }
        let inode = match Inode::load(&txn, geo, ino) {
            Ok(x) => x,
            Err(e) => {
                r.problems.push(e.to_string());
                continue;
            }
        };
        if inode.birth >= next_birth {
            r.problems.push(format!("{ino}: birth {} not below counter {next_birth}", inode.birth));
        }
        for w in inode.extents.windows(2) {
            if w[0].file_end() > w[1].file_block {
                r.problems.push(format!("{ino}: extents overlap or are unsorted"));
            }
        }
        for e in &inode.extents {
            if e.length == 0 {
                r.problems.push(format!("{ino}: empty extent"));
            }
            for k in 0..e.length {
                claim(&mut r, e.device_block.saturating_add(k), Owner::Data(ino));
            }
            r.data_blocks += e.length as u64;
        }
        for &b in &inode.chain {
            claim(&mut r, b, Owner::Chain(ino));
            r.metadata_blocks += 1;
        }
        let limit = match inode.extents.last() {
            Some(e) => (e.file_end() as u64 + 1) * BLOCK_SIZE - 1,
            None => 0,
        };
        if inode.size > limit {
            r.problems.push(format!("{ino}: size {} beyond mapped range", inode.size));
        }
        live.insert(i, 0);
    }
    r.files = live.len() as u64;

    for (&b, _) in owners.iter() {
        if !alloc::is_used(&txn, geo, b)? {
            r.problems.push(format!("block {b} in use but marked free"));
        }
    }
    for b in geo.data_start()..geo.total_blocks {
        if alloc::is_used(&txn, geo, b)? && !owners.contains_key(&b) {
            r.problems.push(format!("block {b} allocated but unreferenced"));
        }
    }
    r.free_blocks = alloc::count_free(&txn, geo)?;

    let mut names: HashMap<String, u32> = HashMap::new();
    for slot in 0..geo.namespace_slots() {
        let Some((ino, name)) = decode_ns_entry(dev.volatile_slice(geo.ns_addr(slot), 64)?) else {
            continue;
        };
        match live.get_mut(&ino) {
            Some(refs) => *refs += 1,
            None => r.problems.push(format!("name {name:?} points at dead inode {ino}")),
        }
        if names.insert(name.clone(), ino).is_some() {
            r.problems.push(format!("duplicate name {name:?}"));
        }
    }
    let mut orphans: Vec<_> = live.iter().filter(|(_, &n)| n != 1).collect();
    orphans.sort();
    for (ino, n) in orphans {
        r.problems.push(format!("inode {ino} referenced by {n} names"));
    }
    if !r.conserved() {
        r.problems.push(format!(
            "conservation: free {} + data {} + metadata {} != total {}",
            r.free_blocks, r.data_blocks, r.metadata_blocks, r.total_blocks
        ));
    }
    Ok(r)
}
