// SPDX-License-Identifier: Apache-2.0

//! Flat in-memory file model used as the reference for script runs, plus
//! the driver that runs the same script operations through a library
//! instance.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::script::{payload, Offset, Op};
use crate::usplit::{Fd, Usplit};

/// Name to content.
pub type FsView = BTreeMap<String, Vec<u8>>;

/// Observable result of one operation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Done,
    Opened(u32),
    Data(Vec<u8>),
    Failed,
}

#[derive(Debug, Clone, Copy)]
struct Desc {
    file: u64,
    off: u64,
    stale: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ShadowFs {
    names: BTreeMap<String, u64>,
    data: BTreeMap<u64, Vec<u8>>,
    fds: BTreeMap<u32, Desc>,
    next_file: u64,
}

impl ShadowFs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn view(&self) -> FsView {
        self.names.iter().map(|(n, f)| (n.clone(), self.data[f].clone())).collect()
    }

    /// File identity behind a descriptor, if it is open and live.
    pub fn fd_file(&self, fd: u32) -> Option<u64> {
        self.fds.get(&fd).filter(|d| !d.stale).map(|d| d.file)
    }

    /// Name currently bound to a file identity.
    pub fn name_of(&self, file: u64) -> Option<&str> {
        self.names.iter().find(|(_, &f)| f == file).map(|(n, _)| n.as_str())
    }

    /// Current offset of a live descriptor.
    pub fn fd_offset(&self, fd: u32) -> Option<u64> {
        self.fds.get(&fd).filter(|d| !d.stale).map(|d| d.off)
    }

    /// Name to file identity for every visible file.
    pub fn names(&self) -> impl Iterator<Item = (&str, u64)> {
        self.names.iter().map(|(n, f)| (n.as_str(), *f))
    }

    pub fn content(&self, file: u64) -> Option<&[u8]> {
        self.data.get(&file).map(|v| v.as_slice())
    }

    fn drop_file(&mut self, file: u64) {
        self.data.remove(&file);
        for d in self.fds.values_mut().filter(|d| d.file == file) {
            d.stale = true;
        }
    }

    fn live(&mut self, fd: u32) -> Option<&mut Desc> {
        self.fds.get_mut(&fd).filter(|d| !d.stale)
    }

    pub fn apply(&mut self, op: &Op) -> Outcome {
        match op {
            Op::Open(name) => {
                if name.starts_with('.') {
                    return Outcome::Failed;
                }
                let file = match self.names.get(name) {
                    Some(&f) => f,
                    None => {
                        let f = self.next_file;
                        self.next_file += 1;
                        self.names.insert(name.clone(), f);
                        self.data.insert(f, Vec::new());
                        f
                    }
                };
                let mut n = 3;
                while self.fds.contains_key(&n) {
                    n += 1;
                }
                self.fds.insert(
                    n,
                    Desc {
                        file,
                        off: 0,
                        stale: false,
                    },
                );
                Outcome::Opened(n)
            }
            Op::Write { fd, off, len, seed } => {
                let Some(d) = self.live(*fd) else {
                    return Outcome::Failed;
                };
                let at = match off {
                    Offset::At(o) => *o,
                    Offset::Cur => {
                        let o = d.off;
                        d.off += len;
                        o
                    }
                };
                let file = d.file;
                let buf = self.data.get_mut(&file).unwrap();
                let end = (at + len) as usize;
                if buf.len() < end && *len > 0 {
                    buf.resize(end, 0);
                }
                buf[at as usize..at as usize + *len as usize].copy_from_slice(&payload(*seed, *len));
                Outcome::Done
            }
            Op::Read { fd, off, len } => {
                let Some(d) = self.live(*fd) else {
                    return Outcome::Failed;
                };
                let file = d.file;
                let at = match off {
                    Offset::At(o) => *o,
                    Offset::Cur => d.off,
                };
                let buf = &self.data[&file];
                let s = (at as usize).min(buf.len());
                let e = (at as usize + *len as usize).min(buf.len());
                let out = buf[s..e].to_vec();
                if *off == Offset::Cur {
                    self.fds.get_mut(fd).unwrap().off += out.len() as u64;
                }
                Outcome::Data(out)
            }
            Op::Fsync(fd) => match self.live(*fd) {
                Some(_) => Outcome::Done,
                None => Outcome::Failed,
            },
            Op::Close(fd) => match self.fds.remove(fd) {
                Some(_) => Outcome::Done,
                None => Outcome::Failed,
            },
            Op::Unlink(name) => match self.names.remove(name) {
                Some(f) => {
                    self.drop_file(f);
                    Outcome::Done
                }
                None => Outcome::Failed,
            },
            Op::Rename(a, b) => {
                if a.starts_with('.') || b.starts_with('.') {
                    return Outcome::Failed;
                }
                let Some(&f) = self.names.get(a) else {
                    return Outcome::Failed;
                };
                if a == b {
                    return Outcome::Done;
                }
                self.names.remove(a);
                if let Some(v) = self.names.insert(b.clone(), f) {
                    self.drop_file(v);
                }
                Outcome::Done
            }
            Op::Mark(_) => Outcome::Done,
        }
    }
}

/// Runs one script operation through a library instance.
pub fn execute(u: &Usplit, op: &Op) -> Outcome {
    let r: crate::usplit::Result<Outcome> = (|| match op {
        Op::Open(name) => Ok(Outcome::Opened(u.open_or_create(name)?.0)),
        Op::Write { fd, off, len, seed } => {
            let data = payload(*seed, *len);
            match off {
                Offset::At(o) => u.pwrite(Fd(*fd), *o, &data)?,
                Offset::Cur => u.write(Fd(*fd), &data)?,
            };
            Ok(Outcome::Done)
        }
        Op::Read { fd, off, len } => Ok(Outcome::Data(match off {
            Offset::At(o) => u.pread(Fd(*fd), *o, *len as usize)?,
            Offset::Cur => u.read(Fd(*fd), *len as usize)?,
        })),
        Op::Fsync(fd) => u.fsync(Fd(*fd)).map(|_| Outcome::Done),
        Op::Close(fd) => u.close(Fd(*fd)).map(|_| Outcome::Done),
        Op::Unlink(name) => u.unlink(name).map(|_| Outcome::Done),
        Op::Rename(a, b) => u.rename(a, b).map(|_| Outcome::Done),
        Op::Mark(_) => Ok(Outcome::Done),
    })();
    r.unwrap_or(Outcome::Failed)
}

/// Current view of all visible files through `u`.
pub fn usplit_view(u: &Usplit) -> crate::usplit::Result<FsView> {
    let mut out = FsView::new();
    for name in u.list() {
        out.insert(name.clone(), u.read_file(&name)?);
    }
    Ok(out)
}

/// Runs `script` through `u` and the shadow model side by side. Every
/// outcome and the complete visible state after every step must agree.
/// Returns the number of steps checked.
pub fn check_equivalence(u: &Usplit, script: &crate::script::Script) -> Result<usize, String> {
    let mut shadow = ShadowFs::new();
    for (i, op) in script.ops.iter().enumerate() {
        let got = execute(u, op);
        let want = shadow.apply(op);
        let same = match (&got, &want) {
            (Outcome::Opened(_), Outcome::Opened(_)) => true,
            _ => got == want,
        };
        if !same {
            return Err(format!("step {i} `{op}`: library {got:?}, model {want:?}"));
        }
        let mut names = u.list();
        names.sort();
        if !names.iter().map(|n| n.as_str()).eq(shadow.names().map(|(n, _)| n)) {
            let model: Vec<&str> = shadow.names().map(|(n, _)| n).collect();
            return Err(format!("step {i} `{op}`: library names {names:?}, model {model:?}"));
        }
        for (name, file) in shadow.names() {
            let data = u.read_file(name).map_err(|e| format!("step {i} `{op}`: reading {name}: {e}"))?;
            if Some(data.as_slice()) != shadow.content(file) {
                return Err(format!("step {i} `{op}`: {name} differs from the model"));
            }
        }
    }
    Ok(script.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::script::{random_script, Script};

    #[test]
    fn random_scripts_match_the_model_in_every_mode() {
        use crate::kfs::{Geometry, Kfs};
        use crate::pmem::PmemDevice;
        use crate::usplit::{Config, Mode};
        use parking_lot::RwLock;
        use std::sync::Arc;

        for mode in [Mode::Posix, Mode::Sync, Mode::Strict] {
            let dev = Arc::new(RwLock::new(PmemDevice::new(16 << 20).unwrap()));
            Kfs::mkfs(&dev, Geometry::for_capacity(16 << 20).unwrap()).unwrap();
            let cfg = Config {
                map_size: 64 << 10,
                staging_count: 2,
                staging_size: 64 << 10,
                log_size: 16 << 10,
                ..Config::default()
            };
            let u = Usplit::recover(dev, mode, cfg).unwrap();
            let script = random_script(7, 400);
            assert_eq!(check_equivalence(&u, &script), Ok(400), "{mode}");
        }
    }

    #[test]
    fn shadow_follows_descriptor_offsets() {
        let s = Script::parse("open a\nwrite 3 @cur 10 1\nwrite 3 @cur 5 2\nread 3 0 100\n").unwrap();
        let mut fs = ShadowFs::new();
        let outs: Vec<_> = s.ops.iter().map(|o| fs.apply(o)).collect();
        assert_eq!(outs[0], Outcome::Opened(3));
        let mut want = payload(1, 10);
        want.extend(payload(2, 5));
        assert_eq!(outs[3], Outcome::Data(want.clone()));
        assert_eq!(fs.view()["a"], want);
    }

    #[test]
    fn unlink_leaves_stale_descriptor() {
        let s = Script::parse("open a\nunlink a\nwrite 3 0 4 1\nclose 3\nclose 3\n").unwrap();
        let mut fs = ShadowFs::new();
        let outs: Vec<_> = s.ops.iter().map(|o| fs.apply(o)).collect();
        assert_eq!(outs[2], Outcome::Failed);
        assert_eq!(outs[3], Outcome::Done);
        assert_eq!(outs[4], Outcome::Failed);
        assert!(fs.view().is_empty());
    }

    #[test]
    fn rename_over_existing_drops_victim() {
        let s = Script::parse("open a\nopen b\nwrite 4 0 3 9\nrename b a\nwrite 3 0 1 1\n").unwrap();
        let mut fs = ShadowFs::new();
        let outs: Vec<_> = s.ops.iter().map(|o| fs.apply(o)).collect();
        assert_eq!(outs[4], Outcome::Failed);
        assert_eq!(fs.view().len(), 1);
        assert_eq!(fs.view()["a"], payload(9, 3));
    }
}
