// SPDX-License-Identifier: Apache-2.0

//! The file-system configurations a benchmark can drive.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::kfs::{Ino, Kfs, KfsError};
use crate::script::Offset;
use crate::usplit::{Config, Fd, FsyncStrategy, Mode, Usplit};

use super::{BenchError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EngineKind {
    SplitfsPosix,
    SplitfsSync,
    SplitfsStrict,
    /// Every call goes through the kernel-side file system: new blocks
    /// are zeroed and each write commits its own metadata transaction.
    DaxBaseline,
    /// Library staging without relink: fsync copies staged bytes into
    /// the target.
    CopyOnFsync,
}

impl EngineKind {
    pub const ALL: [EngineKind; 5] = [
        EngineKind::SplitfsPosix,
        EngineKind::SplitfsSync,
        EngineKind::SplitfsStrict,
        EngineKind::DaxBaseline,
        EngineKind::CopyOnFsync,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EngineKind::SplitfsPosix => "splitfs-posix",
            EngineKind::SplitfsSync => "splitfs-sync",
            EngineKind::SplitfsStrict => "splitfs-strict",
            EngineKind::DaxBaseline => "dax-baseline",
            EngineKind::CopyOnFsync => "copy-on-fsync",
        }
    }
}

impl fmt::Display for EngineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EngineKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "copy-on-fsync-baseline" => Ok(EngineKind::CopyOnFsync),
            _ => EngineKind::ALL
                .into_iter()
                .find(|e| e.name() == s)
                .ok_or_else(|| format!("unknown engine {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct DaxFile {
    ino: Ino,
    off: u64,
}

/// Kernel-path file access with a descriptor table.
pub struct DaxFs {
    kfs: Arc<Kfs>,
    fds: Mutex<BTreeMap<u32, DaxFile>>,
}

impl DaxFs {
    fn file(&self, fd: u32) -> Result<DaxFile> {
        self.fds.lock().get(&fd).copied().ok_or(BenchError::BadDescriptor(fd))
    }
}

/// A running engine. Calls mirror the script operations.
pub enum Engine {
    Split(Usplit),
    Dax(DaxFs),
}

impl Engine {
    pub fn start(kind: EngineKind, kfs: Arc<Kfs>, cfg: &Config) -> Result<Engine> {
        let split = |mode: Mode, strategy: FsyncStrategy| {
            let cfg = Config {
                fsync_strategy: strategy,
                ..cfg.clone()
            };
            Usplit::init(kfs.clone(), mode, cfg).map(Engine::Split)
        };
        Ok(match kind {
            EngineKind::SplitfsPosix => split(Mode::Posix, FsyncStrategy::Relink)?,
            EngineKind::SplitfsSync => split(Mode::Sync, FsyncStrategy::Relink)?,
            EngineKind::SplitfsStrict => split(Mode::Strict, FsyncStrategy::Relink)?,
            EngineKind::CopyOnFsync => split(Mode::Posix, FsyncStrategy::Copy)?,
            EngineKind::DaxBaseline => Engine::Dax(DaxFs {
                kfs,
                fds: Mutex::new(BTreeMap::new()),
            }),
        })
    }

    pub fn kfs(&self) -> &Arc<Kfs> {
        match self {
            Engine::Split(u) => u.kfs(),
            Engine::Dax(d) => &d.kfs,
        }
    }

    pub fn open(&self, name: &str) -> Result<u32> {
        match self {
            Engine::Split(u) => Ok(u.open_or_create(name)?.0),
            Engine::Dax(d) => {
                let ino = match d.kfs.lookup(name) {
                    Ok(i) => i,
                    Err(KfsError::NotFound(_)) => d.kfs.create(name)?,
                    Err(e) => return Err(e.into()),
                };
                let mut fds = d.fds.lock();
                let fd = (3..).find(|n| !fds.contains_key(n)).expect("descriptor space");
                fds.insert(fd, DaxFile { ino, off: 0 });
                Ok(fd)
            }
        }
    }

    pub fn write(&self, fd: u32, off: Offset, data: &[u8]) -> Result<()> {
        match self {
            Engine::Split(u) => {
                match off {
                    Offset::At(o) => u.pwrite(Fd(fd), o, data)?,
                    Offset::Cur => u.write(Fd(fd), data)?,
                };
                Ok(())
            }
            Engine::Dax(d) => {
                let f = d.file(fd)?;
                let at = match off {
                    Offset::At(o) => o,
                    Offset::Cur => f.off,
                };
                d.kfs.write_direct(f.ino, at, data)?;
                if off == Offset::Cur {
                    if let Some(e) = d.fds.lock().get_mut(&fd) {
                        e.off = at + data.len() as u64;
                    }
                }
                Ok(())
            }
        }
    }

    pub fn read(&self, fd: u32, off: Offset, len: u64) -> Result<Vec<u8>> {
        match self {
            Engine::Split(u) => Ok(match off {
                Offset::At(o) => u.pread(Fd(fd), o, len as usize)?,
                Offset::Cur => u.read(Fd(fd), len as usize)?,
            }),
            Engine::Dax(d) => {
                let f = d.file(fd)?;
                let at = match off {
                    Offset::At(o) => o,
                    Offset::Cur => f.off,
                };
                let out = d.kfs.read_direct(f.ino, at, len)?;
                if off == Offset::Cur {
                    if let Some(e) = d.fds.lock().get_mut(&fd) {
                        e.off = at + out.len() as u64;
                    }
                }
                Ok(out)
            }
        }
    }

    pub fn fsync(&self, fd: u32) -> Result<()> {
        match self {
            Engine::Split(u) => Ok(u.fsync(Fd(fd))?),
            Engine::Dax(d) => Ok(d.kfs.fsync_meta(d.file(fd)?.ino)?),
        }
    }

    pub fn close(&self, fd: u32) -> Result<()> {
        match self {
            Engine::Split(u) => Ok(u.close(Fd(fd))?),
            Engine::Dax(d) => d.fds.lock().remove(&fd).map(|_| ()).ok_or(BenchError::BadDescriptor(fd)),
        }
    }

    pub fn unlink(&self, name: &str) -> Result<()> {
        match self {
            Engine::Split(u) => Ok(u.unlink(name)?),
            Engine::Dax(d) => Ok(d.kfs.unlink(name)?),
        }
    }

    pub fn rename(&self, from: &str, to: &str) -> Result<()> {
        match self {
            Engine::Split(u) => Ok(u.rename(from, to)?),
            Engine::Dax(d) => Ok(d.kfs.rename(from, to)?),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for e in EngineKind::ALL {
            assert_eq!(e.name().parse::<EngineKind>().unwrap(), e);
        }
        assert_eq!("copy-on-fsync-baseline".parse::<EngineKind>().unwrap(), EngineKind::CopyOnFsync);
        assert!("ext4".parse::<EngineKind>().is_err());
    }
}
