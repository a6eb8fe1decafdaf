// SPDX-License-Identifier: Apache-2.0

//! Recording run and the per-mode model of what must survive a crash.
//!
//! Alongside the shadow model (what reads return) we track the durable
//! content of every file. Names and metadata are synchronous in every
//! mode, so the durable namespace is the shadow namespace.
//!
//! - POSIX: bytes below the durable size are overwritten in place and are
//!   durable on return; anything past it becomes durable at fsync/close.
//! - Sync: as POSIX, but appends are persisted before the call returns.
//! - Strict: every operation is durable and atomic on return.

use std::collections::BTreeMap;
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::kfs::{Fault, Geometry, Kfs};
use crate::pmem::{PmemDevice, SnapshotKind, TraceEvent};
use crate::script::{Offset, Op, Script};
use crate::shadow::{execute, FsView, Outcome, ShadowFs};
use crate::usplit::{Mode, Usplit};

use super::{CheckConfig, CheckError};

/// States a recovered file system may show for one crash point.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expectation {
    /// Acceptable views, oldest first.
    pub exact: Vec<FsView>,
    /// When set, an in-place overwrite may be torn: a view matches if it
    /// has the names and sizes of one of `exact` and every 8-byte chunk
    /// comes from that view or from this one.
    pub torn_base: Option<FsView>,
}

impl Expectation {
    fn only(v: FsView) -> Self {
        Expectation {
            exact: vec![v],
            torn_base: None,
        }
    }

    pub fn admits(&self, got: &FsView) -> bool {
        if self.exact.iter().any(|v| v == got) {
            return true;
        }
        match &self.torn_base {
            Some(base) => self.exact.iter().any(|v| torn_match(got, v, base)),
            None => false,
        }
    }
}

fn torn_match(got: &FsView, cand: &FsView, base: &FsView) -> bool {
    if got.len() != cand.len() {
        return false;
    }
    for ((gn, g), (cn, c)) in got.iter().zip(cand) {
        if gn != cn || g.len() != c.len() {
            return false;
        }
        let b = base.get(gn).map(|v| v.as_slice()).unwrap_or(&[]);
        for (i, (gc, cc)) in g.chunks(8).zip(c.chunks(8)).enumerate() {
            if gc == cc {
                continue;
            }
            let s = i * 8;
            if s + gc.len() > b.len() || &b[s..s + gc.len()] != gc {
                return false;
            }
        }
    }
    true
}

/// Everything the checker needs from one traced run.
#[derive(Debug, Clone)]
pub struct Recorded {
    /// Device image after format and library start, before the script.
    pub base: Vec<u8>,
    pub trace: Vec<TraceEvent>,
    /// Trace index range `[start, end)` of each operation.
    pub bounds: Vec<(usize, usize)>,
    /// Index 0: before the first operation. For operation `r`, `2r + 1`
    /// holds the in-flight expectation and `2r + 2` the completed one.
    pub expectations: Vec<Expectation>,
    /// Shadow view after each operation.
    pub golden: Vec<FsView>,
    /// Operations whose outcome differed from the shadow model.
    pub divergences: Vec<String>,
}

impl Recorded {
    /// Expectation index for a crash after `prefix` events.
    pub fn expectation_at(&self, prefix: usize) -> usize {
        let mut idx = 0;
        for (r, &(s, e)) in self.bounds.iter().enumerate() {
            if s < prefix && prefix < e {
                return 2 * r + 1;
            }
            if e <= prefix {
                idx = 2 * r + 2;
            } else {
                break;
            }
        }
        idx
    }
}

/// Durable content per file identity, indexed like the shadow model.
#[derive(Debug, Clone, Default)]
struct Durable {
    content: BTreeMap<u64, Vec<u8>>,
}

impl Durable {
    fn view(&self, shadow: &ShadowFs) -> FsView {
        shadow
            .names()
            .map(|(n, f)| (n.to_string(), self.content.get(&f).cloned().unwrap_or_default()))
            .collect()
    }

    fn sync(&mut self, shadow: &ShadowFs, file: u64) {
        if let Some(c) = shadow.content(file) {
            self.content.insert(file, c.to_vec());
        }
    }
}

/// Formats a device, starts a library instance and runs `script` with
/// tracing on. `faults` are injected after the base snapshot.
pub fn run_recorded(script: &Script, mode: Mode, cfg: &CheckConfig, faults: &[Fault]) -> Result<Recorded, CheckError> {
    let dev = Arc::new(RwLock::new(PmemDevice::new(cfg.device_size)?));
    Kfs::mkfs(&dev, Geometry::for_capacity(cfg.device_size)?)?;
    let kfs = Arc::new(Kfs::mount(dev.clone())?);
    let u = Usplit::init(kfs.clone(), mode, cfg.usplit.clone())?;
    let base = {
        let mut d = dev.write();
        if !d.is_clean() {
            d.fence();
        }
        d.set_tracing(true);
        d.snapshot(SnapshotKind::Persistent)
    };
    for f in faults {
        kfs.inject(*f);
    }

    let mut shadow = ShadowFs::new();
    let mut durable = Durable::default();
    let mut bounds = Vec::with_capacity(script.len());
    let mut expectations = vec![Expectation::only(FsView::new())];
    let mut golden = Vec::with_capacity(script.len());
    let mut divergences = Vec::new();

    for (r, op) in script.ops.iter().enumerate() {
        let before = durable.view(&shadow);
        let target = match op {
            Op::Write { fd, .. } | Op::Fsync(fd) | Op::Close(fd) => shadow.fd_file(*fd),
            _ => None,
        };
        let at = match op {
            Op::Write { fd, off, .. } => match off {
                Offset::At(o) => Some(*o),
                Offset::Cur => shadow.fd_offset(*fd),
            },
            _ => None,
        };
        let names_before: Vec<u64> = shadow.names().map(|(_, f)| f).collect();

        let start = dev.read().trace().len();
        let got = execute(&u, op);
        let end = dev.read().trace().len();
        bounds.push((start, end));

        let want = shadow.apply(op);
        if !same_outcome(&got, &want) {
            divergences.push(format!("op {r} `{op}`: library returned {got:?}, model {want:?}"));
        }
        golden.push(shadow.view());

        for (_, f) in shadow.names() {
            if !names_before.contains(&f) {
                durable.content.insert(f, Vec::new());
            }
        }
        let failed = want == Outcome::Failed;
        let mut mid: Option<FsView> = None;
        let mut torn = false;
        match op {
            Op::Write { len, .. } if !failed => {
                let file = target.expect("live descriptor");
                let at = at.expect("offset");
                match mode {
                    Mode::Strict => durable.sync(&shadow, file),
                    Mode::Posix | Mode::Sync => {
                        let v = shadow.content(file).unwrap_or(&[]);
                        let d = durable.content.entry(file).or_default();
                        let k = d.len() as u64;
                        let e = (at + len).min(k);
                        if at < e {
                            d[at as usize..e as usize].copy_from_slice(&v[at as usize..e as usize]);
                        }
                        torn = true;
                        if mode == Mode::Sync {
                            mid = Some(durable.view(&shadow));
                            durable.sync(&shadow, file);
                        }
                    }
                }
            }
            Op::Fsync(_) | Op::Close(_) if !failed => {
                if let Some(file) = target {
                    durable.sync(&shadow, file);
                }
            }
            _ => {}
        }
        durable.content.retain(|f, _| shadow.names().any(|(_, g)| g == *f));

        let after = durable.view(&shadow);
        let mut exact = vec![before.clone()];
        exact.extend(mid);
        exact.push(after.clone());
        exact.dedup();
        expectations.push(Expectation {
            exact,
            torn_base: torn.then_some(before),
        });
        expectations.push(Expectation::only(after));
    }

    let trace = dev.write().take_trace();
    drop(u);
    Ok(Recorded {
        base,
        trace,
        bounds,
        expectations,
        golden,
        divergences,
    })
}

fn same_outcome(got: &Outcome, want: &Outcome) -> bool {
    match (got, want) {
        // Descriptor numbers are the library's choice.
        (Outcome::Opened(_), Outcome::Opened(_)) => true,
        _ => got == want,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn view(pairs: &[(&str, &[u8])]) -> FsView {
        pairs.iter().map(|(n, c)| (n.to_string(), c.to_vec())).collect()
    }

    #[test]
    fn torn_views_mix_whole_chunks_only() {
        let base = view(&[("a", &[0; 16])]);
        let new = view(&[("a", &[1; 16])]);
        let e = Expectation {
            exact: vec![base.clone(), new.clone()],
            torn_base: Some(base),
        };
        let mut half = vec![1u8; 8];
        half.extend([0u8; 8]);
        assert!(e.admits(&view(&[("a", &half)])));
        let mut split = vec![1u8; 4];
        split.extend([0u8; 12]);
        assert!(!e.admits(&view(&[("a", &split)])));
        assert!(!e.admits(&view(&[("a", &[1; 8])])));
        assert!(!e.admits(&view(&[("b", &[1; 16])])));
    }

    #[test]
    fn expectation_index_follows_operation_bounds() {
        let rec = Recorded {
            base: vec![],
            trace: vec![],
            bounds: vec![(0, 3), (3, 3), (3, 5)],
            expectations: vec![],
            golden: vec![],
            divergences: vec![],
        };
        assert_eq!(rec.expectation_at(0), 0);
        assert_eq!(rec.expectation_at(1), 1);
        assert_eq!(rec.expectation_at(3), 4);
        assert_eq!(rec.expectation_at(4), 5);
        assert_eq!(rec.expectation_at(5), 6);
    }

    #[test]
    fn posix_append_is_not_durable_until_fsync() {
        let s = Script::parse("open a\nwrite 3 0 100 1\nfsync 3\n").unwrap();
        let rec = run_recorded(&s, Mode::Posix, &CheckConfig::default(), &[]).unwrap();
        assert!(rec.divergences.is_empty());
        assert_eq!(rec.expectations[4].exact, vec![view(&[("a", &[])])]);
        assert_eq!(rec.expectations[6].exact[0]["a"].len(), 100);
    }

    #[test]
    fn strict_and_sync_writes_are_durable_on_return() {
        for mode in [Mode::Sync, Mode::Strict] {
            let s = Script::parse("open a\nwrite 3 0 100 1\n").unwrap();
            let rec = run_recorded(&s, mode, &CheckConfig::default(), &[]).unwrap();
            assert_eq!(rec.expectations[4].exact[0]["a"].len(), 100, "{mode}");
        }
    }
}
