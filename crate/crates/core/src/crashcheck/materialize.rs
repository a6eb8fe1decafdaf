// SPDX-License-Identifier: Apache-2.0

//! Trace interpreter that rebuilds crash images from a base snapshot.
//!
//! Written separately from the device so the two can be cross-checked.
//! Pending stores are kept per 64-byte line as a program-ordered list of
//! 8-byte-chunk pieces. A fence persists every flushed or non-temporal
//! piece and trims older cached pieces of the same chunk by the bytes it
//! overwrote. A crash plan may additionally persist a prefix of each
//! line's remaining list.

use std::collections::BTreeMap;

use crate::pmem::TraceEvent;

use super::CrashPlan;

#[derive(Debug, Clone, Copy)]
struct Piece {
    /// Chunk address (8-byte aligned).
    chunk: u64,
    mask: u8,
    bytes: [u8; 8],
    flushed: bool,
    nt: bool,
}

/// Incremental interpreter positioned at some trace prefix.
#[derive(Debug, Clone)]
pub struct Materializer<'t> {
    trace: &'t [TraceEvent],
    pos: usize,
    image: Vec<u8>,
    pending: BTreeMap<u64, Vec<Piece>>,
}

impl<'t> Materializer<'t> {
    pub fn new(base: &[u8], trace: &'t [TraceEvent]) -> Self {
        Materializer {
            trace,
            pos: 0,
            image: base.to_vec(),
            pending: BTreeMap::new(),
        }
    }

    /// An interpreter that only tracks pending stores, for enumeration.
    pub fn counting(trace: &'t [TraceEvent]) -> Self {
        Self::new(&[], trace)
    }

    /// Number of events applied so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Applies events up to (excluding) index `prefix`. Moving backwards
    /// is not supported.
    pub fn advance_to(&mut self, prefix: usize) {
        assert!(prefix >= self.pos && prefix <= self.trace.len(), "bad prefix {prefix}");
        while self.pos < prefix {
            let ev = &self.trace[self.pos];
            self.apply(ev);
            self.pos += 1;
        }
    }

    fn apply(&mut self, ev: &TraceEvent) {
        match ev {
            TraceEvent::Store { addr, data, .. } => self.store(*addr, data, false),
            TraceEvent::StoreNt { addr, data, .. } => self.store(*addr, data, true),
            TraceEvent::Flush { line, .. } => {
                if let Some(list) = self.pending.get_mut(line) {
                    for p in list.iter_mut() {
                        p.flushed = true;
                    }
                }
            }
            TraceEvent::Fence { .. } => self.fence(),
        }
    }

    fn store(&mut self, addr: u64, data: &[u8], nt: bool) {
        let mut i = 0usize;
        while i < data.len() {
            let a = addr + i as u64;
            let chunk = a & !7;
            let mut p = Piece {
                chunk,
                mask: 0,
                bytes: [0; 8],
                flushed: false,
                nt,
            };
            while i < data.len() && (addr + i as u64) & !7 == chunk {
                let o = ((addr + i as u64) - chunk) as usize;
                p.mask |= 1 << o;
                p.bytes[o] = data[i];
                i += 1;
            }
            self.pending.entry(chunk & !63).or_default().push(p);
        }
    }

    fn fence(&mut self) {
        let image = &mut self.image;
        self.pending.retain(|_, list| {
            if !list.iter().any(|p| p.flushed || p.nt) {
                return true;
            }
            let mut rest: Vec<Piece> = Vec::with_capacity(list.len());
            for p in list.drain(..) {
                if p.flushed || p.nt {
                    write_piece(image, &p);
                    for r in rest.iter_mut().filter(|r| r.chunk == p.chunk) {
                        r.mask &= !p.mask;
                    }
                    rest.retain(|r| r.mask != 0);
                } else {
                    rest.push(p);
                }
            }
            *list = rest;
            !list.is_empty()
        });
    }

    /// Pending piece count per line at the current position.
    pub fn pending_counts(&self) -> BTreeMap<u64, usize> {
        self.pending.iter().map(|(l, v)| (*l, v.len())).collect()
    }

    /// Image for `plan`, which must be at the current position.
    pub fn image(&self, plan: &CrashPlan) -> Vec<u8> {
        assert_eq!(plan.prefix, self.pos, "materializer is not at the plan's prefix");
        let mut img = self.image.clone();
        for (line, &k) in &plan.keep {
            if let Some(list) = self.pending.get(line) {
                for p in &list[..k.min(list.len())] {
                    write_piece(&mut img, p);
                }
            }
        }
        img
    }
}

fn write_piece(image: &mut [u8], p: &Piece) {
    if image.is_empty() {
        return;
    }
    for i in 0..8 {
        if p.mask & (1 << i) != 0 {
            image[p.chunk as usize + i] = p.bytes[i];
        }
    }
}

/// One-shot form: the image a crash at `plan` leaves.
pub fn materialize(base: &[u8], trace: &[TraceEvent], plan: &CrashPlan) -> Vec<u8> {
    let mut m = Materializer::new(base, trace);
    m.advance_to(plan.prefix);
    m.image(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pmem::{PmemDevice, Policy, SnapshotKind};
    use proptest::prelude::*;

    fn plan(prefix: usize, keep: &[(u64, usize)]) -> CrashPlan {
        CrashPlan {
            prefix,
            keep: keep.iter().copied().collect(),
        }
    }

    #[test]
    fn unfenced_store_is_absent_and_fenced_nt_present() {
        let mut d = PmemDevice::new(4096).unwrap();
        d.set_tracing(true);
        d.store(0, &[1; 8]).unwrap();
        d.store_nt(64, &[2; 8]).unwrap();
        d.fence();
        let base = vec![0u8; 4096];
        let tr = d.trace().to_vec();
        let img = materialize(&base, &tr, &plan(3, &[]));
        assert_eq!(&img[0..8], &[0; 8]);
        assert_eq!(&img[64..72], &[2; 8]);
        let img = materialize(&base, &tr, &plan(3, &[(0, 1)]));
        assert_eq!(&img[0..8], &[1; 8]);
    }

    #[test]
    fn later_fenced_piece_trims_older_cached_bytes() {
        let mut d = PmemDevice::new(4096).unwrap();
        d.set_tracing(true);
        d.store(0, &[1; 8]).unwrap();
        d.store_nt(4, &[2; 4]).unwrap();
        d.fence();
        let base = vec![0u8; 4096];
        let tr = d.trace().to_vec();
        let mut m = Materializer::new(&base, &tr);
        m.advance_to(3);
        assert_eq!(m.pending_counts()[&0], 1);
        let img = m.image(&plan(3, &[(0, 1)]));
        assert_eq!(&img[0..8], &[1, 1, 1, 1, 2, 2, 2, 2]);
    }

    #[derive(Debug, Clone)]
    enum Ev {
        Store(u64, Vec<u8>),
        Nt(u64, Vec<u8>),
        Flush(u64),
        Fence,
    }

    fn ev() -> impl Strategy<Value = Ev> {
        prop_oneof![
            (0u64..256, prop::collection::vec(any::<u8>(), 1..20)).prop_map(|(a, d)| Ev::Store(a, d)),
            (0u64..256, prop::collection::vec(any::<u8>(), 1..20)).prop_map(|(a, d)| Ev::Nt(a, d)),
            (0u64..4).prop_map(|l| Ev::Flush(l * 64)),
            Just(Ev::Fence),
        ]
    }

    proptest! {
        #[test]
        fn agrees_with_device_crash_image(evs in prop::collection::vec(ev(), 0..40), picks in prop::collection::vec(0usize..6, 8)) {
            let mut d = PmemDevice::new(4096).unwrap();
            d.set_tracing(true);
            for e in &evs {
                match e {
                    Ev::Store(a, x) => d.store(*a, x).unwrap(),
                    Ev::Nt(a, x) => d.store_nt(*a, x).unwrap(),
                    Ev::Flush(l) => d.flush(*l, 64).unwrap(),
                    Ev::Fence => d.fence(),
                }
            }
            let tr = d.trace().to_vec();
            let base = vec![0u8; 4096];
            let mut m = Materializer::new(&base, &tr);
            m.advance_to(tr.len());
            let keep: BTreeMap<u64, usize> = m
                .pending_counts()
                .into_iter()
                .enumerate()
                .map(|(i, (l, n))| (l, picks[i % picks.len()].min(n)))
                .collect();
            let p = CrashPlan {
                prefix: tr.len(),
                keep: keep.clone(),
            };
            prop_assert!(m.image(&p) == d.crash_image(Policy::Adversarial, &keep).unwrap());
            let none = CrashPlan::at(tr.len());
            prop_assert!(m.image(&none) == d.snapshot(SnapshotKind::Persistent));
        }
    }
}
