// SPDX-License-Identifier: Apache-2.0

//! Block bitmap, accessed through a transaction overlay.

use super::journal::Txn;
use super::layout::Geometry;
use super::{KfsError, Result};

pub(crate) fn is_used(txn: &Txn<'_>, geo: &Geometry, block: u32) -> Result<bool> {
    let mut b = [0u8; 1];
    txn.read(geo.bitmap_addr() + block as u64 / 8, &mut b)?;
    Ok(b[0] & (1 << (block % 8)) != 0)
}

pub(crate) fn set_used(txn: &mut Txn<'_>, geo: &Geometry, block: u32, used: bool) -> Result<()> {
    let addr = geo.bitmap_addr() + block as u64 / 8;
    let mut b = [0u8; 1];
    txn.read(addr, &mut b)?;
    if used {
        b[0] |= 1 << (block % 8);
    } else {
        b[0] &= !(1 << (block % 8));
    }
    txn.write(addr, &b)
}

pub(crate) fn free_run(txn: &mut Txn<'_>, geo: &Geometry, start: u32, len: u32) -> Result<()> {
    for b in start..start + len {
        set_used(txn, geo, b, false)?;
    }
    Ok(())
}

/// Next-fit allocation of up to `max_len` contiguous blocks starting the
/// search at `*cursor`. Returns `(start, len)`.
pub(crate) fn alloc_run(
    txn: &mut Txn<'_>,
    geo: &Geometry,
    cursor: &mut u32,
    max_len: u32,
) -> Result<(u32, u32)> {
    let lo = geo.data_start();
    let hi = geo.total_blocks;
    let span = hi - lo;
    let start_at = if *cursor < lo || *cursor >= hi { lo } else { *cursor };
    let mut found = None;
    for i in 0..span {
        let b = lo + (start_at - lo + i) % span;
        if !is_used(txn, geo, b)? {
            found = Some(b);
            break;
        }
    }
    let start = found.ok_or(KfsError::NoSpace)?;
    let mut len = 1;
    while len < max_len && start + len < hi && !is_used(txn, geo, start + len)? {
        len += 1;
    }
    for b in start..start + len {
        set_used(txn, geo, b, true)?;
    }
    *cursor = start + len;
    Ok((start, len))
}

/// Allocates `n` blocks as one or more runs.
pub(crate) fn alloc_blocks(
    txn: &mut Txn<'_>,
    geo: &Geometry,
    cursor: &mut u32,
    n: u32,
) -> Result<Vec<(u32, u32)>> {
    let mut runs = Vec::new();
    let mut left = n;
    while left > 0 {
        let (s, l) = alloc_run(txn, geo, cursor, left)?;
        runs.push((s, l));
        left -= l;
    }
    Ok(runs)
}

/// Counts free blocks in the data region.
pub(crate) fn count_free(txn: &Txn<'_>, geo: &Geometry) -> Result<u64> {
    let mut free = 0;
    for b in geo.data_start()..geo.total_blocks {
        if !is_used(txn, geo, b)? {
            free += 1;
        }
    }
    Ok(free)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pmem::PmemDevice;

    #[test]
    fn next_fit_wraps_and_exhausts() {
        let geo = Geometry::new(32, 2, 1, 1).unwrap();
        let dev = PmemDevice::new(geo.capacity()).unwrap();
        let mut t = Txn::new(&dev);
        let mut cur = 0;
        let data = geo.total_blocks - geo.data_start();
        let (s, l) = alloc_run(&mut t, &geo, &mut cur, 4).unwrap();
        assert_eq!((s, l), (geo.data_start(), 4));
        let runs = alloc_blocks(&mut t, &geo, &mut cur, data - 4).unwrap();
        assert_eq!(runs.iter().map(|r| r.1).sum::<u32>(), data - 4);
        assert!(matches!(alloc_run(&mut t, &geo, &mut cur, 1), Err(KfsError::NoSpace)));
        free_run(&mut t, &geo, s + 1, 2).unwrap();
        assert_eq!(count_free(&t, &geo).unwrap(), 2);
        assert_eq!(alloc_run(&mut t, &geo, &mut cur, 8).unwrap(), (s + 1, 2));
    }
}
