// SPDX-License-Identifier: Apache-2.0

//! Physical redo journal at 64-byte line granularity.
//!
//! ```text
//! +0      header  "KJHD" rsv txn_id:u64 nrec:u32 payload_len:u32 ... crc:u32@60
//! +64     payload records: addr:u64 nlines:u32 rsv:u32 then nlines*64 bytes
//! +64+P'  commit  "KJCM" rsv txn_id:u64 payload_len:u32 body_crc:u32 ... crc:u32@60
//! ```
//!
//! `P'` is the payload length rounded up to a line. `body_crc` covers the
//! header line and the payload. A transaction is effective iff its
//! commit line is present and both checksums match.

use std::collections::BTreeMap;

use crate::pmem::{IoClass, PmemDevice, LINE_SIZE};

use super::layout::{get_u32, get_u64, line_crc_ok, put_u32, put_u64, seal_line, Geometry};
use super::{KfsError, Result};

const HDR_MAGIC: &[u8; 4] = b"KJHD";
const COMMIT_MAGIC: &[u8; 4] = b"KJCM";
const RECORD_HDR: usize = 16;

/// Data written straight to blocks that the transaction makes reachable.
/// Applied before the journal so they are durable by its first fence.
#[derive(Debug, Clone)]
pub(crate) enum PreWrite {
    Zero { addr: u64, len: u64 },
    Bytes { addr: u64, data: Vec<u8> },
}

/// A metadata transaction under construction: a copy-on-write overlay of
/// 64-byte lines over the device's current image.
pub(crate) struct Txn<'d> {
    dev: &'d PmemDevice,
    lines: BTreeMap<u64, [u8; 64]>,
    pre: Vec<PreWrite>,
    copied: u64,
}

impl<'d> Txn<'d> {
    pub fn new(dev: &'d PmemDevice) -> Self {
        Txn {
            dev,
            lines: BTreeMap::new(),
            pre: Vec::new(),
            copied: 0,
        }
    }

    pub fn read(&self, addr: u64, buf: &mut [u8]) -> Result<()> {
        let mut done = 0usize;
        while done < buf.len() {
            let a = addr + done as u64;
            let line = a & !(LINE_SIZE - 1);
            let off = (a - line) as usize;
            let n = (64 - off).min(buf.len() - done);
            match self.lines.get(&line) {
                Some(l) => buf[done..done + n].copy_from_slice(&l[off..off + n]),
                None => self.dev.load_into(a, &mut buf[done..done + n])?,
            }
            done += n;
        }
        Ok(())
    }

    pub fn read_vec(&self, addr: u64, len: usize) -> Result<Vec<u8>> {
        let mut v = vec![0u8; len];
        self.read(addr, &mut v)?;
        Ok(v)
    }

    pub fn read_line(&self, line: u64) -> Result<[u8; 64]> {
        let mut l = [0u8; 64];
        self.read(line, &mut l)?;
        Ok(l)
    }

    pub fn write(&mut self, addr: u64, data: &[u8]) -> Result<()> {
        let mut done = 0usize;
        while done < data.len() {
            let a = addr + done as u64;
            let line = a & !(LINE_SIZE - 1);
            let off = (a - line) as usize;
            let n = (64 - off).min(data.len() - done);
            if !self.lines.contains_key(&line) {
                let mut l = [0u8; 64];
                self.dev.load_into(line, &mut l)?;
                self.lines.insert(line, l);
            }
            let l = self.lines.get_mut(&line).unwrap();
            l[off..off + n].copy_from_slice(&data[done..done + n]);
            done += n;
        }
        Ok(())
    }

    pub fn pre_zero(&mut self, addr: u64, len: u64) {
        self.pre.push(PreWrite::Zero { addr, len });
    }

    pub fn pre_bytes(&mut self, addr: u64, data: Vec<u8>) {
        self.pre.push(PreWrite::Bytes { addr, data });
    }

    /// Counts bytes copied by a relink; credited at commit.
    pub fn note_copied(&mut self, n: u64) {
        self.copied += n;
    }

    /// Diffs the overlay against the device and frames the journal
    /// payload. Fails without side effects if it would not fit.
    pub fn prepare(self, geo: &Geometry) -> Result<Prepared> {
        let mut runs: Vec<(u64, Vec<u8>)> = Vec::new();
        for (&line, l) in &self.lines {
            if self.dev.volatile_slice(line, 64)? == &l[..] {
                continue;
            }
            match runs.last_mut() {
                Some((start, data)) if *start + data.len() as u64 == line => {
                    data.extend_from_slice(l)
                }
                _ => runs.push((line, l.to_vec())),
            }
        }
        let payload_len: usize = runs.iter().map(|(_, d)| RECORD_HDR + d.len()).sum();
        let needed = 128 + (payload_len as u64).div_ceil(64) * 64;
        if !runs.is_empty() && needed > geo.journal_bytes() {
            return Err(KfsError::TxnTooLarge {
                needed,
                capacity: geo.journal_bytes(),
            });
        }
        Ok(Prepared {
            records: runs,
            pre: self.pre,
            copied: self.copied,
        })
    }
}

pub(crate) struct Prepared {
    records: Vec<(u64, Vec<u8>)>,
    pre: Vec<PreWrite>,
    copied: u64,
}

impl Prepared {
    pub fn has_records(&self) -> bool {
        !self.records.is_empty()
    }

    fn payload(&self) -> Vec<u8> {
        let mut p = Vec::new();
        for (addr, data) in &self.records {
            p.extend_from_slice(&addr.to_le_bytes());
            p.extend_from_slice(&((data.len() / 64) as u32).to_le_bytes());
            p.extend_from_slice(&[0; 4]);
            p.extend_from_slice(data);
        }
        p
    }

    /// Writes pre-data, journal, commit and in-place checkpoint.
    pub fn apply(self, dev: &mut PmemDevice, geo: &Geometry, txn_id: u64, skip_commit: bool) -> Result<()> {
        let prev = dev.set_class(IoClass::Data);
        for w in &self.pre {
            match w {
                PreWrite::Zero { addr, len } => dev.zero_nt(*addr, *len)?,
                PreWrite::Bytes { addr, data } => dev.store_nt(*addr, data)?,
            }
        }
        if self.records.is_empty() {
            if !self.pre.is_empty() {
                dev.fence();
            }
            dev.note_relink_copy(self.copied);
            dev.set_class(prev);
            return Ok(());
        }
        let payload = self.payload();
        let jaddr = geo.journal_addr();
        let mut hdr = [0u8; 64];
        hdr[0..4].copy_from_slice(HDR_MAGIC);
        put_u64(&mut hdr, 8, txn_id);
        put_u32(&mut hdr, 16, self.records.len() as u32);
        put_u32(&mut hdr, 20, payload.len() as u32);
        seal_line(&mut hdr);

        let mut body = crc32fast::Hasher::new();
        body.update(&hdr);
        body.update(&payload);
        let mut commit = [0u8; 64];
        commit[0..4].copy_from_slice(COMMIT_MAGIC);
        put_u64(&mut commit, 8, txn_id);
        put_u32(&mut commit, 16, payload.len() as u32);
        put_u32(&mut commit, 20, body.finalize());
        seal_line(&mut commit);
        let commit_addr = jaddr + 64 + (payload.len() as u64).div_ceil(64) * 64;

        dev.set_class(IoClass::Journal);
        dev.store_nt(jaddr, &hdr)?;
        dev.store_nt(jaddr + 64, &payload)?;
        dev.fence();
        if !skip_commit {
            dev.store_nt(commit_addr, &commit)?;
        }
        dev.fence();
        dev.note_journal_commit();

        dev.set_class(IoClass::Metadata);
        for (addr, data) in &self.records {
            dev.store_nt(*addr, data)?;
        }
        dev.fence();
        // Retire the commit so a later mount cannot replay stale lines over
        // newer in-place writes. Any later fence makes this durable.
        if !skip_commit {
            dev.set_class(IoClass::Journal);
            dev.zero_nt(commit_addr, 64)?;
        }
        dev.note_relink_copy(self.copied);
        dev.set_class(prev);
        Ok(())
    }
}

/// Parsed committed transaction found in the journal region.
type Committed = (Vec<(u64, Vec<u8>)>, u64);

fn committed_records(dev: &PmemDevice, geo: &Geometry) -> Result<Option<Committed>> {
    let jaddr = geo.journal_addr();
    let hdr = dev.load(jaddr, 64)?;
    if &hdr[0..4] != HDR_MAGIC || !line_crc_ok(&hdr) {
        return Ok(None);
    }
    let txn_id = get_u64(&hdr, 8);
    let nrec = get_u32(&hdr, 16) as usize;
    let plen = get_u32(&hdr, 20) as u64;
    let commit_addr = jaddr + 64 + plen.div_ceil(64) * 64;
    if commit_addr + 64 > jaddr + geo.journal_bytes() {
        return Ok(None);
    }
    let commit = dev.load(commit_addr, 64)?;
    if &commit[0..4] != COMMIT_MAGIC
        || !line_crc_ok(&commit)
        || get_u64(&commit, 8) != txn_id
        || get_u32(&commit, 16) as u64 != plen
    {
        return Ok(None);
    }
    let payload = dev.load(jaddr + 64, plen)?;
    let mut body = crc32fast::Hasher::new();
    body.update(&hdr);
    body.update(&payload);
    if body.finalize() != get_u32(&commit, 20) {
        return Ok(None);
    }
    let mut records = Vec::with_capacity(nrec);
    let mut pos = 0usize;
    for _ in 0..nrec {
        if pos + RECORD_HDR > payload.len() {
            return Ok(None);
        }
        let addr = get_u64(&payload, pos);
        let n = get_u32(&payload, pos + 8) as usize * 64;
        pos += RECORD_HDR;
        if pos + n > payload.len() || addr % 64 != 0 || addr + n as u64 > geo.capacity() {
            return Ok(None);
        }
        records.push((addr, payload[pos..pos + n].to_vec()));
        pos += n;
    }
    Ok(Some((records, commit_addr)))
}

/// Re-applies the committed transaction, if any, then clears the journal.
/// Returns whether a transaction was replayed.
pub(crate) fn replay(dev: &mut PmemDevice, geo: &Geometry) -> Result<bool> {
    let prev = dev.set_class(IoClass::Journal);
    let replayed = match committed_records(dev, geo)? {
        Some((records, commit_addr)) => {
            dev.set_class(IoClass::Metadata);
            for (addr, data) in &records {
                dev.store_nt(*addr, data)?;
            }
            dev.fence();
            dev.set_class(IoClass::Journal);
            dev.zero_nt(commit_addr, 64)?;
            dev.fence();
            true
        }
        None => false,
    };
    dev.set_class(prev);
    Ok(replayed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (PmemDevice, Geometry) {
        let geo = Geometry::for_capacity(1 << 20).unwrap();
        (PmemDevice::new(geo.capacity()).unwrap(), geo)
    }

    #[test]
    fn overlay_reads_own_writes() {
        let (dev, _) = setup();
        let mut t = Txn::new(&dev);
        t.write(100, &[1, 2, 3]).unwrap();
        assert_eq!(t.read_vec(99, 5).unwrap(), vec![0, 1, 2, 3, 0]);
        assert_eq!(dev.load(100, 3).unwrap(), vec![0; 3]);
    }

    #[test]
    fn unchanged_lines_are_not_journaled() {
        let (dev, geo) = setup();
        let mut t = Txn::new(&dev);
        t.write(200_000, &[0; 64]).unwrap();
        let p = t.prepare(&geo).unwrap();
        assert!(!p.has_records());
    }

    #[test]
    fn commit_uses_three_fences_and_checkpoints() {
        let (mut dev, geo) = setup();
        let mut t = Txn::new(&dev);
        t.write(200_000, &[9; 10]).unwrap();
        let p = t.prepare(&geo).unwrap();
        p.apply(&mut dev, &geo, 1, false).unwrap();
        assert_eq!(dev.counters().fence_count, 3);
        assert_eq!(dev.counters().journal_commit_count, 1);
        assert_eq!(dev.load(200_000, 10).unwrap(), vec![9; 10]);
        // Only the commit retirement is left pending.
        assert!(!dev.is_clean());
        dev.fence();
        let mut d2 = PmemDevice::from_image(dev.snapshot(crate::pmem::SnapshotKind::Persistent)).unwrap();
        assert!(!replay(&mut d2, &geo).unwrap());
    }

    #[test]
    fn replay_after_lost_checkpoint() {
        let (mut dev, geo) = setup();
        let mut t = Txn::new(&dev);
        t.write(200_000, &[9; 10]).unwrap();
        t.prepare(&geo).unwrap().apply(&mut dev, &geo, 1, false).unwrap();
        // Simulate the checkpoint never reaching media.
        let mut img = dev.snapshot(crate::pmem::SnapshotKind::Persistent);
        img[200_000..200_010].fill(0);
        let mut d2 = PmemDevice::from_image(img).unwrap();
        assert!(replay(&mut d2, &geo).unwrap());
        assert_eq!(d2.load(200_000, 10).unwrap(), vec![9; 10]);
        assert!(d2.is_clean());
        assert!(!replay(&mut d2, &geo).unwrap());
    }

    #[test]
    fn uncommitted_txn_is_ignored() {
        let (mut dev, geo) = setup();
        let mut t = Txn::new(&dev);
        t.write(200_000, &[9; 10]).unwrap();
        t.prepare(&geo).unwrap().apply(&mut dev, &geo, 1, true).unwrap();
        let mut img = dev.snapshot(crate::pmem::SnapshotKind::Persistent);
        img[200_000..200_010].fill(0);
        let mut d2 = PmemDevice::from_image(img).unwrap();
        assert!(!replay(&mut d2, &geo).unwrap());
        assert_eq!(d2.load(200_000, 10).unwrap(), vec![0; 10]);
    }

    #[test]
    fn oversized_txn_rejected() {
        let (dev, geo) = setup();
        let mut t = Txn::new(&dev);
        let big = vec![1u8; geo.journal_bytes() as usize];
        t.write(geo.data_start() as u64 * 4096, &big).unwrap();
        assert!(matches!(t.prepare(&geo), Err(KfsError::TxnTooLarge { .. })));
    }
}
