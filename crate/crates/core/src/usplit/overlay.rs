// SPDX-License-Identifier: Apache-2.0

//! Staged-data overlay: which byte ranges of a target file currently live
//! in staging files. Later writes shadow earlier ones.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::kfs::Ino;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagedPiece {
    pub staging_ino: Ino,
    pub staging_off: u64,
    /// Device address of the first byte when known and contiguous.
    pub dev: Option<u64>,
}

impl StagedPiece {
    fn advance(self, by: u64) -> Self {
        StagedPiece {
            staging_ino: self.staging_ino,
            staging_off: self.staging_off + by,
            dev: self.dev.map(|d| d + by),
        }
    }
}

/// Staged range in relink form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagedRange {
    pub target_off: u64,
    pub len: u64,
    pub staging_ino: Ino,
    pub staging_off: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overlay {
    /// start -> (len, piece); ranges never overlap.
    map: BTreeMap<u64, (u64, StagedPiece)>,
}

impl Overlay {
    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// One past the highest staged byte.
    pub fn end(&self) -> u64 {
        self.map.iter().next_back().map(|(s, (l, _))| s + l).unwrap_or(0)
    }

    pub fn bytes(&self) -> u64 {
        self.map.values().map(|(l, _)| *l).sum()
    }

    /// Drops coverage of `[off, off + len)`; returns bytes released per
    /// staging file.
    pub fn remove_range(&mut self, off: u64, len: u64) -> Vec<(Ino, u64)> {
        let end = off + len;
        let mut released = Vec::new();
        let first = self
            .map
            .range(..off)
            .next_back()
            .filter(|(s, (l, _))| *s + *l > off)
            .map(|(s, _)| *s);
        let keys: Vec<u64> = first.into_iter().chain(self.map.range(off..end).map(|(s, _)| *s)).collect();
        for s in keys {
            let (l, p) = self.map.remove(&s).unwrap();
            let e = s + l;
            if s < off {
                self.map.insert(s, (off - s, p));
            }
            if e > end {
                self.map.insert(end, (e - end, p.advance(end - s)));
            }
            let cut = e.min(end) - s.max(off);
            released.push((p.staging_ino, cut));
        }
        released
    }

    /// Records that `[off, off + len)` now lives at `piece`.
    pub fn insert(&mut self, off: u64, len: u64, piece: StagedPiece) -> Vec<(Ino, u64)> {
        let released = self.remove_range(off, len);
        if len > 0 {
            self.map.insert(off, (len, piece));
        }
        released
    }

    /// Splits `[off, off + len)` into staged and unstaged segments.
    pub fn lookup(&self, off: u64, len: u64) -> Vec<(u64, u64, Option<StagedPiece>)> {
        let end = off + len;
        let mut out = Vec::new();
        let mut pos = off;
        let first = self
            .map
            .range(..off)
            .next_back()
            .filter(|(s, (l, _))| *s + *l > off)
            .map(|(s, v)| (*s, *v));
        let iter = first.into_iter().chain(self.map.range(off..end).map(|(s, v)| (*s, *v)));
        for (s, (l, p)) in iter {
            if s > pos {
                out.push((pos, s - pos, None));
                pos = s;
            }
            let e = (s + l).min(end);
            out.push((pos, e - pos, Some(p.advance(pos - s))));
            pos = e;
        }
        if pos < end {
            out.push((pos, end - pos, None));
        }
        out
    }

    /// Pieces in target order, merged where both target and staging
    /// offsets continue in the same staging file.
    pub fn coalesced(&self) -> Vec<StagedRange> {
        let mut out: Vec<StagedRange> = Vec::new();
        for (&s, &(l, p)) in &self.map {
            match out.last_mut() {
                Some(r)
                    if r.target_off + r.len == s
                        && r.staging_ino == p.staging_ino
                        && r.staging_off + r.len == p.staging_off =>
                {
                    r.len += l
                }
                _ => out.push(StagedRange {
                    target_off: s,
                    len: l,
                    staging_ino: p.staging_ino,
                    staging_off: p.staging_off,
                }),
            }
        }
        out
    }

    /// Empties the overlay; returns bytes released per staging file.
    pub fn clear(&mut self) -> Vec<(Ino, u64)> {
        let out = self.map.values().map(|(l, p)| (p.staging_ino, *l)).collect();
        self.map.clear();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn piece(ino: u32, off: u64) -> StagedPiece {
        StagedPiece {
            staging_ino: Ino(ino),
            staging_off: off,
            dev: None,
        }
    }

    #[test]
    fn later_insert_shadows_middle() {
        let mut o = Overlay::default();
        o.insert(0, 100, piece(1, 1000));
        let rel = o.insert(10, 20, piece(2, 0));
        assert_eq!(rel, vec![(Ino(1), 20)]);
        let segs = o.lookup(0, 120);
        assert_eq!(segs.len(), 4);
        assert_eq!(segs[0], (0, 10, Some(piece(1, 1000))));
        assert_eq!(segs[1], (10, 20, Some(piece(2, 0))));
        assert_eq!(segs[2], (30, 70, Some(piece(1, 1030))));
        assert_eq!(segs[3], (100, 20, None));
        assert_eq!(o.bytes(), 100);
    }

    #[test]
    fn contiguous_pieces_coalesce() {
        let mut o = Overlay::default();
        for i in 0..10 {
            o.insert(i * 4096, 4096, piece(1, i * 4096 + 8192));
        }
        let c = o.coalesced();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].len, 40960);
        assert_eq!(c[0].staging_off, 8192);
    }

    proptest! {
        #[test]
        fn overlay_matches_byte_model(ops in prop::collection::vec((0u64..200, 1u64..50), 1..40)) {
            let mut o = Overlay::default();
            let mut model: Vec<Option<(u32, u64)>> = vec![None; 256];
            for (k, (off, len)) in ops.iter().enumerate() {
                let ino = k as u32 + 1;
                o.insert(*off, *len, piece(ino, 0));
                for b in *off..off + len {
                    model[b as usize] = Some((ino, b - off));
                }
            }
            for (s, l, p) in o.lookup(0, 256) {
                for b in s..s + l {
                    let got = p.map(|p| (p.staging_ino.0, p.staging_off + (b - s)));
                    prop_assert_eq!(got, model[b as usize]);
                }
            }
            let staged = model.iter().filter(|m| m.is_some()).count() as u64;
            prop_assert_eq!(o.bytes(), staged);
        }
    }
}
