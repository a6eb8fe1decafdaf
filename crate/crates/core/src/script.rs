// SPDX-License-Identifier: Apache-2.0

//! Workload scripts, one operation per line:
//!
//! ```text
//! open <name>                      # creates the file if missing
//! write <fd> <off|@cur> <len> <seed>
//! read <fd> <off|@cur> <len>
//! fsync <fd>
//! close <fd>
//! unlink <name>
//! rename <a> <b>
//! mark <label>
//! ```
//!
//! Blank lines and `#` comments are ignored. Write payloads are the first
//! `len` bytes of a ChaCha8 stream seeded with `seed`.

use std::fmt;
use std::path::Path;

use std::collections::BTreeSet;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::shadow::ShadowFs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Offset {
    At(u64),
    /// The descriptor's current offset, which the operation advances.
    Cur,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    Open(String),
    Write { fd: u32, off: Offset, len: u64, seed: u64 },
    Read { fd: u32, off: Offset, len: u64 },
    Fsync(u32),
    Close(u32),
    Unlink(String),
    Rename(String, String),
    Mark(String),
}

impl Op {
    /// Whether the operation can change file-system state.
    pub fn mutates(&self) -> bool {
        !matches!(self, Op::Read { .. } | Op::Mark(_))
    }
}

impl fmt::Display for Offset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Offset::At(o) => write!(f, "{o}"),
            Offset::Cur => f.write_str("@cur"),
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Open(n) => write!(f, "open {n}"),
            Op::Write { fd, off, len, seed } => write!(f, "write {fd} {off} {len} {seed}"),
            Op::Read { fd, off, len } => write!(f, "read {fd} {off} {len}"),
            Op::Fsync(fd) => write!(f, "fsync {fd}"),
            Op::Close(fd) => write!(f, "close {fd}"),
            Op::Unlink(n) => write!(f, "unlink {n}"),
            Op::Rename(a, b) => write!(f, "rename {a} {b}"),
            Op::Mark(l) => write!(f, "mark {l}"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScriptError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("reading {path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Script {
    pub ops: Vec<Op>,
}

impl Script {
    pub fn parse(text: &str) -> Result<Script, ScriptError> {
        let mut ops = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            ops.push(parse_line(line).map_err(|reason| ScriptError::Parse { line: i + 1, reason })?);
        }
        Ok(Script { ops })
    }

    pub fn load(path: &Path) -> Result<Script, ScriptError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScriptError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Script::parse(&text)
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }
}

impl fmt::Display for Script {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for op in &self.ops {
            writeln!(f, "{op}")?;
        }
        Ok(())
    }
}

fn parse_line(line: &str) -> Result<Op, String> {
    let w: Vec<&str> = line.split_whitespace().collect();
    let want = |n: usize| {
        if w.len() == n {
            Ok(())
        } else {
            Err(format!("{} takes {} argument(s), got {}", w[0], n - 1, w.len() - 1))
        }
    };
    let num = |s: &str| s.parse::<u64>().map_err(|_| format!("bad number {s:?}"));
    let fd = |s: &str| s.parse::<u32>().map_err(|_| format!("bad descriptor {s:?}"));
    let off = |s: &str| {
        if s == "@cur" {
            Ok(Offset::Cur)
        } else {
            num(s).map(Offset::At)
        }
    };
    match w[0] {
        "open" => want(2).map(|_| Op::Open(w[1].to_string())),
        "write" => {
            want(5)?;
            Ok(Op::Write {
                fd: fd(w[1])?,
                off: off(w[2])?,
                len: num(w[3])?,
                seed: num(w[4])?,
            })
        }
        "read" => {
            want(4)?;
            Ok(Op::Read {
                fd: fd(w[1])?,
                off: off(w[2])?,
                len: num(w[3])?,
            })
        }
        "fsync" => want(2).and_then(|_| Ok(Op::Fsync(fd(w[1])?))),
        "close" => want(2).and_then(|_| Ok(Op::Close(fd(w[1])?))),
        "unlink" => want(2).map(|_| Op::Unlink(w[1].to_string())),
        "rename" => want(3).map(|_| Op::Rename(w[1].to_string(), w[2].to_string())),
        "mark" => want(2).map(|_| Op::Mark(w[1].to_string())),
        other => Err(format!("unknown operation {other:?}")),
    }
}

/// A random operation mix over four names, for equivalence fuzzing.
/// Descriptor numbers follow the lowest-free rule both the model and the
/// library use; a few operations name a descriptor that is not open.
pub fn random_script(seed: u64, n: usize) -> Script {
    const NAMES: [&str; 4] = ["f0", "f1", "f2", "f3"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fds: BTreeSet<u32> = BTreeSet::new();
    let mut shadow = ShadowFs::new();
    let mut ops = Vec::with_capacity(n);
    let name = |rng: &mut ChaCha8Rng| NAMES[rng.gen_range(0..NAMES.len())].to_string();
    while ops.len() < n {
        let live: Vec<u32> = fds.iter().copied().filter(|&f| shadow.fd_file(f).is_some()).collect();
        let stale: Vec<u32> = fds.iter().copied().filter(|&f| shadow.fd_file(f).is_none()).collect();
        let pick = |rng: &mut ChaCha8Rng| {
            if !live.is_empty() && !rng.gen_ratio(1, 20) {
                live[rng.gen_range(0..live.len())]
            } else if !stale.is_empty() && rng.gen_bool(0.5) {
                stale[rng.gen_range(0..stale.len())]
            } else {
                40
            }
        };
        let off = |rng: &mut ChaCha8Rng, span: u64| {
            if rng.gen_bool(0.4) {
                Offset::Cur
            } else if rng.gen_bool(0.3) {
                Offset::At(rng.gen_range(0..span / 4096) * 4096)
            } else {
                Offset::At(rng.gen_range(0..span))
            }
        };
        // With nothing live, mostly open (or free a slot) first.
        let roll = if live.is_empty() && rng.gen_bool(0.8) {
            if fds.len() < 6 {
                0
            } else {
                80
            }
        } else {
            rng.gen_range(0..100)
        };
        let op = match roll {
            0..=9 if fds.len() < 6 => {
                let n = (3..).find(|n| !fds.contains(n)).unwrap();
                fds.insert(n);
                Op::Open(name(&mut rng))
            }
            0..=49 => {
                let len = if rng.gen_bool(0.3) {
                    4096 * rng.gen_range(1..3)
                } else {
                    rng.gen_range(1..6000)
                };
                Op::Write {
                    fd: pick(&mut rng),
                    off: off(&mut rng, 24 << 10),
                    len,
                    seed: rng.gen(),
                }
            }
            50..=64 => Op::Read {
                fd: pick(&mut rng),
                off: off(&mut rng, 28 << 10),
                len: rng.gen_range(1..8192),
            },
            65..=79 => Op::Fsync(pick(&mut rng)),
            80..=92 => {
                let fd = match stale.first() {
                    Some(&f) if rng.gen_bool(0.5) => f,
                    _ => pick(&mut rng),
                };
                fds.remove(&fd);
                Op::Close(fd)
            }
            93..=95 => Op::Unlink(name(&mut rng)),
            _ => Op::Rename(name(&mut rng), name(&mut rng)),
        };
        shadow.apply(&op);
        ops.push(op);
    }
    Script { ops }
}

/// Deterministic write payload.
pub fn payload(seed: u64, len: u64) -> Vec<u8> {
    let mut buf = vec![0u8; len as usize];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut buf);
    buf
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_op_and_round_trips() {
        let text = "open a\nwrite 3 @cur 4096 7 # append\nread 3 0 10\n\nfsync 3\nclose 3\nrename a b\nunlink b\nmark done\n";
        let s = Script::parse(text).unwrap();
        assert_eq!(s.len(), 8);
        assert_eq!(
            s.ops[1],
            Op::Write {
                fd: 3,
                off: Offset::Cur,
                len: 4096,
                seed: 7
            }
        );
        assert_eq!(Script::parse(&s.to_string()).unwrap(), s);
    }

    #[test]
    fn errors_name_the_line() {
        let e = Script::parse("open a\nwrite 3 x 1 1\n").unwrap_err();
        assert!(matches!(e, ScriptError::Parse { line: 2, .. }));
        assert!(Script::parse("frob x").is_err());
        assert!(Script::parse("open").is_err());
    }

    #[test]
    fn payload_is_seeded_and_prefix_stable() {
        assert_eq!(payload(5, 100), payload(5, 100));
        assert_ne!(payload(5, 100), payload(6, 100));
        assert_eq!(payload(5, 1000)[..100], payload(5, 100)[..]);
    }
}
