// SPDX-License-Identifier: Apache-2.0

//! A library instance: descriptor table, per-file state and the data path.
//!
//! Lock order: log gate, then one file state, then the staging pool,
//! then the device. The device lock is never held across a kfs call.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::thread::JoinHandle;

use parking_lot::{Mutex, RwLock};
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::kfs::{Ino, Kfs, KfsError, RelinkOp, Segment, BLOCK_SIZE};
use crate::pmem::SharedDevice;

use super::log::{flags, LogEntry, LogPlacement, OpLog, Opcode, Ticket, FIRST_SLOT};
use super::overlay::{Overlay, StagedPiece, StagedRange};
use super::recover::{self, RecoveryStats};
use super::staging::StagingPool;
use super::{is_hidden, log_name, Config, Fd, FsyncStrategy, Mode, Result, UsplitError};

/// Relink operations per kfs transaction during flushes and recovery.
pub(crate) const RELINK_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Whence {
    Set,
    Cur,
    End,
}

/// Library view of a file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileStat {
    pub ino: Ino,
    pub size: u64,
    /// Bytes waiting in staging files.
    pub staged: u64,
}

#[derive(Debug)]
pub(crate) struct OpenFile {
    pub ino: Ino,
    pub offset: Mutex<u64>,
    pub stale: AtomicBool,
}

#[derive(Debug, Clone)]
pub(crate) struct Region {
    pub hint: u64,
    pub segs: Vec<Segment>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct FileState {
    pub birth: u64,
    /// Size as last read from kfs.
    pub ksize: u64,
    pub attrs_valid: bool,
    pub overlay: Overlay,
    pub regions: FxHashMap<u64, Region>,
    /// Descriptors referring to the file.
    pub open: usize,
    /// Log epoch in which the file's birth was last bound.
    pub logged_epoch: Option<u64>,
    pub gone: bool,
}

impl FileState {
    pub fn vsize(&self) -> u64 {
        self.ksize.max(self.overlay.end())
    }
}

type Files = RwLock<FxHashMap<Ino, Arc<Mutex<FileState>>>>;

pub struct Usplit {
    pub(crate) kfs: Arc<Kfs>,
    pub(crate) dev: SharedDevice,
    pub(crate) mode: Mode,
    pub(crate) cfg: Config,
    pub(crate) fds: RwLock<BTreeMap<u32, Arc<OpenFile>>>,
    pub(crate) files: Files,
    pub(crate) pool: Arc<Mutex<StagingPool>>,
    pub(crate) log: Option<OpLog>,
    pub(crate) recovery: RecoveryStats,
    worker: Option<(mpsc::Sender<()>, JoinHandle<()>)>,
}

impl std::fmt::Debug for Usplit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Usplit")
            .field("mode", &self.mode)
            .field("instance", &self.cfg.instance_id)
            .finish_non_exhaustive()
    }
}

impl Drop for Usplit {
    fn drop(&mut self) {
        if let Some((tx, h)) = self.worker.take() {
            drop(tx);
            let _ = h.join();
        }
    }
}

impl Usplit {
    /// Starts an instance on a mounted file system. In strict mode any
    /// log left by an earlier run of the same instance id is replayed
    /// first; all modes take over leftover staging files.
    pub fn init(kfs: Arc<Kfs>, mode: Mode, cfg: Config) -> Result<Usplit> {
        cfg.validate()?;
        let dev = kfs.device().clone();
        let mut recovery = RecoveryStats::default();
        let log = if mode == Mode::Strict {
            let (log, stats) = open_log(&kfs, &dev, &cfg)?;
            recovery = stats;
            Some(log)
        } else {
            None
        };
        let pool = StagingPool::adopt(&kfs, cfg.instance_id, cfg.staging_size, cfg.staging_count)?;
        // Settle anything still pending so a finished recovery is final.
        {
            let mut d = dev.write();
            if !d.is_clean() {
                d.fence();
            }
        }
        Ok(Self::assemble(kfs, mode, cfg, pool, log, recovery))
    }

    /// Mounts the device and starts an instance, running recovery.
    pub fn recover(dev: SharedDevice, mode: Mode, cfg: Config) -> Result<Usplit> {
        let kfs = Arc::new(Kfs::mount(dev)?);
        Self::init(kfs, mode, cfg)
    }

    pub(crate) fn assemble(
        kfs: Arc<Kfs>,
        mode: Mode,
        cfg: Config,
        pool: StagingPool,
        log: Option<OpLog>,
        recovery: RecoveryStats,
    ) -> Usplit {
        let pool = Arc::new(Mutex::new(pool));
        let worker = cfg.background_replenish.then(|| spawn_worker(kfs.clone(), pool.clone()));
        Usplit {
            dev: kfs.device().clone(),
            kfs,
            mode,
            cfg,
            fds: RwLock::new(BTreeMap::new()),
            files: RwLock::new(FxHashMap::default()),
            pool,
            log,
            recovery,
            worker,
        }
    }

    pub fn kfs(&self) -> &Arc<Kfs> {
        &self.kfs
    }

    pub fn device(&self) -> &SharedDevice {
        &self.dev
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn recovery_stats(&self) -> &RecoveryStats {
        &self.recovery
    }

    /// Next free log slot, if this instance keeps a log.
    pub fn log_tail(&self) -> Option<u64> {
        self.log.as_ref().map(|l| l.tail())
    }

    /// Device address of a log slot, for inspection and fault tests.
    pub fn log_slot_addr(&self, slot: u64) -> Option<u64> {
        self.log.as_ref().filter(|l| slot < l.place.slots).map(|l| l.place.slot_addr(slot))
    }

    /// Staged bytes not yet moved into their targets.
    pub fn staged_bytes(&self) -> u64 {
        self.pool.lock().live_bytes()
    }

    /// Total size of the staging files currently held.
    pub fn staging_capacity(&self) -> u64 {
        self.pool.lock().capacity_bytes()
    }

    // ---- descriptors ----

    fn open_file(&self, fd: Fd) -> Result<Arc<OpenFile>> {
        let of = self.fds.read().get(&fd.0).cloned().ok_or(UsplitError::BadFd(fd))?;
        if of.stale.load(Ordering::Acquire) {
            return Err(UsplitError::Stale(fd));
        }
        Ok(of)
    }

    fn install(&self, of: Arc<OpenFile>) -> Fd {
        let mut fds = self.fds.write();
        let mut n = 3;
        for &k in fds.keys() {
            if k > n {
                break;
            }
            if k == n {
                n += 1;
            }
        }
        fds.insert(n, of);
        Fd(n)
    }

    pub(crate) fn state(&self, ino: Ino) -> Arc<Mutex<FileState>> {
        if let Some(s) = self.files.read().get(&ino) {
            return s.clone();
        }
        self.files.write().entry(ino).or_default().clone()
    }

    fn refresh(&self, ino: Ino, fs: &mut FileState) -> Result<()> {
        let st = self.kfs.stat(ino)?;
        if fs.attrs_valid && fs.birth != st.birth {
            // Same inode number, different file: drop everything cached.
            *fs = FileState::default();
        }
        fs.birth = st.birth;
        fs.ksize = st.size;
        fs.attrs_valid = true;
        Ok(())
    }

    fn check_name(name: &str) -> Result<()> {
        if is_hidden(name) {
            return Err(UsplitError::Reserved(name.to_string()));
        }
        Ok(())
    }

    /// Opens an existing file.
    pub fn open(&self, name: &str) -> Result<Fd> {
        Self::check_name(name)?;
        let ino = self.kfs.lookup(name)?;
        self.attach(ino, None)
    }

    /// Creates a new file; fails if the name exists.
    pub fn create(&self, name: &str) -> Result<Fd> {
        Self::check_name(name)?;
        let ino = self.kfs.create(name)?;
        let st = self.kfs.stat(ino)?;
        self.attach(ino, Some(st.birth))
    }

    pub fn open_or_create(&self, name: &str) -> Result<Fd> {
        match self.open(name) {
            Err(UsplitError::Kfs(KfsError::NotFound(_))) => self.create(name),
            r => r,
        }
    }

    fn attach(&self, ino: Ino, created: Option<u64>) -> Result<Fd> {
        let fsa = self.state(ino);
        let needs_log = {
            let mut fs = fsa.lock();
            if created.is_some() {
                *fs = FileState::default();
            }
            if !fs.attrs_valid {
                self.refresh(ino, &mut fs)?;
            }
            fs.gone = false;
            match &self.log {
                Some(l) => created.is_some() || fs.logged_epoch != Some(l.epoch.load(Ordering::Acquire)),
                None => false,
            }
        };
        if needs_log {
            let t = self.reserve(1)?;
            let mut fs = fsa.lock();
            let log = self.log.as_ref().unwrap();
            let e = LogEntry {
                target_ino: ino.0 as u64,
                staging_off: fs.birth,
                ..LogEntry::new(if created.is_some() { Opcode::Create } else { Opcode::Open })
            };
            log.write_slot(&self.dev, &self.kfs, t.first, e)?;
            fs.logged_epoch = Some(log.epoch.load(Ordering::Acquire));
        }
        fsa.lock().open += 1;
        Ok(self.install(Arc::new(OpenFile {
            ino,
            offset: Mutex::new(0),
            stale: AtomicBool::new(false),
        })))
    }

    /// New descriptor sharing the file offset.
    pub fn dup(&self, fd: Fd) -> Result<Fd> {
        let of = self.open_file(fd)?;
        self.state(of.ino).lock().open += 1;
        Ok(self.install(of))
    }

    /// Closes `fd`; staged data is made durable first.
    pub fn close(&self, fd: Fd) -> Result<()> {
        let of = self.fds.read().get(&fd.0).cloned().ok_or(UsplitError::BadFd(fd))?;
        if !of.stale.load(Ordering::Acquire) {
            self.fsync_ino(of.ino)?;
            let fsa = self.state(of.ino);
            let mut fs = fsa.lock();
            fs.open = fs.open.saturating_sub(1);
        }
        self.fds.write().remove(&fd.0);
        Ok(())
    }

    pub fn lseek(&self, fd: Fd, off: i64, whence: Whence) -> Result<u64> {
        let of = self.open_file(fd)?;
        let base = match whence {
            Whence::Set => 0,
            Whence::Cur => *of.offset.lock() as i64,
            Whence::End => self.fstat(fd)?.size as i64,
        };
        let pos = base
            .checked_add(off)
            .filter(|p| *p >= 0)
            .ok_or_else(|| UsplitError::InvalidArgument(format!("seek to {base} + {off}")))?;
        *of.offset.lock() = pos as u64;
        Ok(pos as u64)
    }

    pub fn fstat(&self, fd: Fd) -> Result<FileStat> {
        let of = self.open_file(fd)?;
        let fsa = self.state(of.ino);
        let mut fs = fsa.lock();
        self.refresh(of.ino, &mut fs)?;
        Ok(FileStat {
            ino: of.ino,
            size: fs.vsize(),
            staged: fs.overlay.bytes(),
        })
    }

    /// Size of a file by name as this instance sees it.
    pub fn stat(&self, name: &str) -> Result<FileStat> {
        let ino = self.kfs.lookup(name)?;
        let fsa = self.state(ino);
        let mut fs = fsa.lock();
        self.refresh(ino, &mut fs)?;
        Ok(FileStat {
            ino,
            size: fs.vsize(),
            staged: fs.overlay.bytes(),
        })
    }

    /// Visible (non-hidden) names.
    pub fn list(&self) -> Vec<String> {
        self.kfs
            .list()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| !is_hidden(n))
            .collect()
    }

    /// Whole content of `name` as this instance sees it, without opening
    /// a descriptor.
    pub fn read_file(&self, name: &str) -> Result<Vec<u8>> {
        Self::check_name(name)?;
        let ino = self.kfs.lookup(name)?;
        let of = OpenFile {
            ino,
            offset: Mutex::new(0),
            stale: AtomicBool::new(false),
        };
        let size = self.stat(name)?.size;
        self.read_at(&of, 0, size as usize)
    }

    // ---- data path ----

    pub fn read(&self, fd: Fd, len: usize) -> Result<Vec<u8>> {
        let of = self.open_file(fd)?;
        let mut pos = of.offset.lock();
        let out = self.read_at(&of, *pos, len)?;
        *pos += out.len() as u64;
        Ok(out)
    }

    pub fn pread(&self, fd: Fd, off: u64, len: usize) -> Result<Vec<u8>> {
        let of = self.open_file(fd)?;
        self.read_at(&of, off, len)
    }

    pub fn write(&self, fd: Fd, data: &[u8]) -> Result<usize> {
        let of = self.open_file(fd)?;
        let mut pos = of.offset.lock();
        let n = self.write_at(&of, *pos, data)?;
        *pos += n as u64;
        Ok(n)
    }

    pub fn pwrite(&self, fd: Fd, off: u64, data: &[u8]) -> Result<usize> {
        let of = self.open_file(fd)?;
        self.write_at(&of, off, data)
    }

    fn read_at(&self, of: &OpenFile, off: u64, len: usize) -> Result<Vec<u8>> {
        let fsa = self.state(of.ino);
        let mut fs = fsa.lock();
        if !fs.attrs_valid || off + len as u64 > fs.vsize() {
            self.refresh(of.ino, &mut fs)?;
        }
        let vs = fs.vsize();
        if off >= vs {
            return Ok(Vec::new());
        }
        let n = (len as u64).min(vs - off);
        let mut out = vec![0u8; n as usize];
        let k = fs.ksize;
        let mut direct: Vec<(u64, u64)> = Vec::new();
        {
            let d = self.dev.read();
            for (s, l, p) in fs.overlay.lookup(off, n) {
                match p {
                    Some(p) => {
                        let dst = &mut out[(s - off) as usize..(s - off + l) as usize];
                        d.load_into(p.dev.expect("live pieces carry device addresses"), dst)?;
                    }
                    None if s < k => direct.push((s, (s + l).min(k) - s)),
                    None => {}
                }
            }
        }
        for (s, l) in direct {
            let segs = self.segments(of.ino, &mut fs, s, l)?;
            let d = self.dev.read();
            for seg in segs {
                if let Some(a) = seg.dev {
                    let o = (seg.file_off - off) as usize;
                    d.load_into(a, &mut out[o..o + seg.len as usize])?;
                }
            }
        }
        Ok(out)
    }

    /// Mapping of `[off, off + len)` from the region cache, refreshing
    /// regions whose generation hint moved.
    fn segments(&self, ino: Ino, fs: &mut FileState, off: u64, len: u64) -> Result<Vec<Segment>> {
        let ms = self.cfg.map_size;
        let end = off + len;
        let mut out = Vec::new();
        let mut pos = off;
        while pos < end {
            let idx = pos / ms;
            let stop = end.min((idx + 1) * ms);
            let hint = self.kfs.generation_hint(ino);
            let fresh = matches!(fs.regions.get(&idx), Some(r) if r.hint == hint);
            if !fresh {
                let segs = self.kfs.map_range(ino, idx * ms, ms)?;
                fs.regions.insert(idx, Region { hint, segs });
            }
            for seg in &fs.regions[&idx].segs {
                let s = seg.file_off.max(pos);
                let e = (seg.file_off + seg.len).min(stop);
                if s < e {
                    out.push(Segment {
                        file_off: s,
                        len: e - s,
                        dev: seg.dev.map(|d| d + (s - seg.file_off)),
                    });
                }
            }
            pos = stop;
        }
        Ok(out)
    }

    fn write_at(&self, of: &OpenFile, off: u64, data: &[u8]) -> Result<usize> {
        if data.is_empty() {
            return Ok(0);
        }
        let len = data.len() as u64;
        let max_chunk = self.pool.lock().max_chunk();
        let ticket = match self.mode {
            Mode::Strict => Some(self.reserve(len.div_ceil(max_chunk))?),
            _ => None,
        };
        let fsa = self.state(of.ino);
        let mut fs = fsa.lock();
        if fs.gone {
            return Err(UsplitError::Kfs(KfsError::NoSuchInode(of.ino)));
        }
        if !fs.attrs_valid {
            self.refresh(of.ino, &mut fs)?;
        }
        let end = off + len;
        match self.mode {
            Mode::Posix | Mode::Sync => {
                let k = fs.ksize;
                if off < k {
                    let stop = end.min(k);
                    self.write_in_place(of.ino, &mut fs, off, &data[..(stop - off) as usize])?;
                }
                if end > k {
                    let s = off.max(k);
                    self.stage(&mut fs, s, &data[(s - off) as usize..], max_chunk)?;
                    if self.mode == Mode::Sync {
                        // No log to replay, so the append is relinked
                        // before the call returns.
                        let released = self.flush(of.ino, &mut fs)?;
                        drop(fs);
                        self.release(&released)?;
                    }
                }
            }
            Mode::Strict => {
                let append = off >= fs.vsize();
                let chunks = self.stage(&mut fs, off, data, max_chunk)?;
                self.dev.write().fence();
                let t = ticket.as_ref().unwrap();
                let log = self.log.as_ref().unwrap();
                let last = chunks.len() - 1;
                for (i, (target_off, staging_ino, staging_off, size)) in chunks.into_iter().enumerate() {
                    let mut fl = if append { flags::APPEND } else { flags::OVERWRITE };
                    if i < last {
                        fl |= flags::CONTINUED;
                    }
                    let e = LogEntry {
                        flags: fl,
                        target_ino: of.ino.0 as u64,
                        target_off,
                        staging_ino: staging_ino.0 as u64,
                        staging_off,
                        size,
                        ..LogEntry::new(Opcode::Write)
                    };
                    log.write_slot(&self.dev, &self.kfs, t.first + i as u64, e)?;
                }
            }
        }
        drop(ticket);
        Ok(data.len())
    }

    /// Overwrites bytes below the kfs size directly on the device.
    fn write_in_place(&self, ino: Ino, fs: &mut FileState, off: u64, data: &[u8]) -> Result<()> {
        let len = data.len() as u64;
        let mut segs = self.segments(ino, fs, off, len)?;
        if segs.iter().any(|s| s.dev.is_none()) {
            for s in segs.iter().filter(|s| s.dev.is_none()) {
                self.kfs.allocate(ino, s.file_off, s.len)?;
            }
            segs = self.segments(ino, fs, off, len)?;
        }
        {
            let mut d = self.dev.write();
            for s in &segs {
                let a = s.dev.ok_or(KfsError::Hole { ino, off: s.file_off })?;
                let o = (s.file_off - off) as usize;
                d.store_nt(a, &data[o..o + s.len as usize])?;
            }
            d.fence();
        }
        let released = fs.overlay.remove_range(off, len);
        self.release(&released)
    }

    /// Copies `data` into staging space. Returns one
    /// `(target_off, staging_ino, staging_off, len)` per allocation.
    fn stage(&self, fs: &mut FileState, off: u64, data: &[u8], max_chunk: u64) -> Result<Vec<(u64, Ino, u64, u64)>> {
        let end = off + data.len() as u64;
        let mut out = Vec::new();
        let mut pos = off;
        while pos < end {
            let n = max_chunk.min(end - pos);
            let (chunk, want_bg) = self.pool.lock().alloc(&self.kfs, pos, n, self.worker.is_some())?;
            if want_bg {
                if let Some((tx, _)) = &self.worker {
                    let _ = tx.send(());
                }
            }
            {
                let mut d = self.dev.write();
                for &(so, l, a) in &chunk.pieces {
                    let o = (pos - off + (so - chunk.staging_off)) as usize;
                    d.store_nt(a, &data[o..o + l as usize])?;
                }
            }
            let mut released = Vec::new();
            for &(so, l, a) in &chunk.pieces {
                let t = pos + (so - chunk.staging_off);
                released.extend(fs.overlay.insert(
                    t,
                    l,
                    StagedPiece {
                        staging_ino: chunk.staging_ino,
                        staging_off: so,
                        dev: Some(a),
                    },
                ));
            }
            self.release(&released)?;
            out.push((pos, chunk.staging_ino, chunk.staging_off, n));
            pos += n;
        }
        Ok(out)
    }

    fn release(&self, released: &[(Ino, u64)]) -> Result<()> {
        if released.is_empty() {
            return Ok(());
        }
        let mut pool = self.pool.lock();
        for &(ino, n) in released {
            pool.release(&self.kfs, ino, n)?;
        }
        Ok(())
    }

    // ---- durability ----

    /// Moves staged data of the file into place. No-op when nothing is
    /// staged.
    pub fn fsync(&self, fd: Fd) -> Result<()> {
        let of = self.open_file(fd)?;
        self.fsync_ino(of.ino)
    }

    fn fsync_ino(&self, ino: Ino) -> Result<()> {
        let fsa = self.state(ino);
        if fsa.lock().overlay.is_empty() {
            return Ok(());
        }
        let ticket = match self.mode {
            Mode::Strict => Some(self.reserve(1)?),
            _ => None,
        };
        let mut fs = fsa.lock();
        let released = self.flush(ino, &mut fs)?;
        if let Some(t) = &ticket {
            let e = LogEntry {
                target_ino: ino.0 as u64,
                staging_off: fs.birth,
                ..LogEntry::new(Opcode::FsyncDone)
            };
            self.log.as_ref().unwrap().write_slot(&self.dev, &self.kfs, t.first, e)?;
        }
        drop(fs);
        drop(ticket);
        self.release(&released)
    }

    /// Applies the overlay to the target and empties it. Returns the
    /// staging bytes to release once the caller has made that durable.
    fn flush(&self, ino: Ino, fs: &mut FileState) -> Result<Vec<(Ino, u64)>> {
        if fs.overlay.is_empty() {
            return Ok(Vec::new());
        }
        match self.cfg.fsync_strategy {
            FsyncStrategy::Relink => {
                let ops: Vec<RelinkOp> = fs.overlay.coalesced().iter().map(|r| relink_op(ino, r)).collect();
                relink_all(&self.kfs, &ops)?;
            }
            FsyncStrategy::Copy => {
                let end = fs.overlay.end();
                let mut run: Option<(u64, Vec<u8>)> = None;
                for (s, l, p) in fs.overlay.lookup(0, end) {
                    let Some(p) = p else { continue };
                    let addr = p.dev.expect("live pieces carry device addresses");
                    if let Some((rs, buf)) = &run {
                        if *rs + buf.len() as u64 != s {
                            self.kfs.write_through(ino, *rs, buf)?;
                            run = None;
                        }
                    }
                    let (_, buf) = run.get_or_insert_with(|| (s, Vec::new()));
                    let at = buf.len();
                    buf.resize(at + l as usize, 0);
                    self.dev.read().load_into(addr, &mut buf[at..])?;
                }
                if let Some((rs, buf)) = run {
                    self.kfs.write_through(ino, rs, &buf)?;
                }
            }
        }
        let released = fs.overlay.clear();
        self.refresh(ino, fs)?;
        Ok(released)
    }

    /// Reserves log slots, checkpointing when the log is full.
    fn reserve(&self, n: u64) -> Result<Ticket<'_>> {
        let log = self.log.as_ref().expect("strict mode keeps a log");
        loop {
            if let Some(t) = log.try_reserve(n)? {
                return Ok(t);
            }
            self.checkpoint()?;
        }
    }

    /// Makes all staged data durable and starts a fresh log epoch. Open
    /// files are re-bound in the new epoch.
    pub fn checkpoint(&self) -> Result<()> {
        let mut released = Vec::new();
        let files: Vec<(Ino, Arc<Mutex<FileState>>)> = {
            let mut v: Vec<_> = self.files.read().iter().map(|(i, s)| (*i, s.clone())).collect();
            v.sort_by_key(|x| x.0);
            v
        };
        let Some(log) = &self.log else {
            for (ino, fsa) in &files {
                let mut fs = fsa.lock();
                released.extend(self.flush(*ino, &mut fs)?);
            }
            return self.release(&released);
        };
        let _gate = log.gate.write();
        for (ino, fsa) in &files {
            let mut fs = fsa.lock();
            if !fs.gone {
                released.extend(self.flush(*ino, &mut fs)?);
            }
        }
        log.reset(&self.dev)?;
        let epoch = log.epoch.load(Ordering::Acquire);
        let mut slot = FIRST_SLOT;
        for (ino, fsa) in &files {
            let mut fs = fsa.lock();
            if fs.open == 0 || fs.gone || slot >= log.place.slots {
                continue;
            }
            let e = LogEntry {
                target_ino: ino.0 as u64,
                staging_off: fs.birth,
                ..LogEntry::new(Opcode::Open)
            };
            log.write_slot(&self.dev, &self.kfs, slot, e)?;
            fs.logged_epoch = Some(epoch);
            slot += 1;
        }
        log.set_tail(slot);
        self.release(&released)
    }

    // ---- namespace ----

    pub fn unlink(&self, name: &str) -> Result<()> {
        Self::check_name(name)?;
        let ino = self.kfs.lookup(name)?;
        if self.log.is_some() {
            let birth = self.kfs.stat(ino)?.birth;
            let t = self.reserve(1)?;
            let e = LogEntry {
                target_ino: ino.0 as u64,
                staging_off: birth,
                ..LogEntry::new(Opcode::Unlink)
            };
            self.log.as_ref().unwrap().write_slot(&self.dev, &self.kfs, t.first, e)?;
        }
        self.kfs.unlink(name)?;
        self.forget(ino)
    }

    /// Renames `old` to `new`, replacing `new` if it exists.
    pub fn rename(&self, old: &str, new: &str) -> Result<()> {
        Self::check_name(old)?;
        Self::check_name(new)?;
        let ino = self.kfs.lookup(old)?;
        let victim = match self.kfs.lookup(new) {
            Ok(v) if v != ino => Some(v),
            _ => None,
        };
        if self.log.is_some() {
            let birth = self.kfs.stat(ino)?.birth;
            let vbirth = match victim {
                Some(v) => self.kfs.stat(v)?.birth,
                None => 0,
            };
            let t = self.reserve(2)?;
            let log = self.log.as_ref().unwrap();
            let src = LogEntry {
                flags: flags::CONTINUED,
                target_ino: ino.0 as u64,
                staging_off: birth,
                ..LogEntry::new(Opcode::RenameSrc)
            };
            log.write_slot(&self.dev, &self.kfs, t.first, src)?;
            let dst = LogEntry {
                target_ino: victim.map(|v| v.0 as u64).unwrap_or(0),
                staging_off: vbirth,
                ..LogEntry::new(Opcode::RenameDst)
            };
            log.write_slot(&self.dev, &self.kfs, t.first + 1, dst)?;
        }
        self.kfs.rename(old, new)?;
        match victim {
            Some(v) => self.forget(v),
            None => Ok(()),
        }
    }

    /// Drops state of a removed file and marks its descriptors stale.
    fn forget(&self, ino: Ino) -> Result<()> {
        let released = match self.files.write().remove(&ino) {
            Some(fsa) => {
                let mut fs = fsa.lock();
                fs.gone = true;
                fs.regions.clear();
                fs.overlay.clear()
            }
            None => Vec::new(),
        };
        for of in self.fds.read().values() {
            if of.ino == ino {
                of.stale.store(true, Ordering::Release);
            }
        }
        self.release(&released)
    }
}

pub(crate) fn relink_op(dst: Ino, r: &StagedRange) -> RelinkOp {
    RelinkOp {
        src: r.staging_ino,
        src_off: r.staging_off,
        dst,
        dst_off: r.target_off,
        size: r.len,
    }
}

/// Applies relinks in batches, splitting any batch the journal cannot
/// hold. A split batch is no longer atomic as a whole.
pub(crate) fn relink_all(kfs: &Kfs, ops: &[RelinkOp]) -> Result<()> {
    for batch in ops.chunks(RELINK_BATCH) {
        relink_split(kfs, batch)?;
    }
    Ok(())
}

fn relink_split(kfs: &Kfs, ops: &[RelinkOp]) -> Result<()> {
    match kfs.relink_batch(ops) {
        Err(KfsError::TxnTooLarge { .. }) if ops.len() > 1 => {
            let (a, b) = ops.split_at(ops.len() / 2);
            relink_split(kfs, a)?;
            relink_split(kfs, b)
        }
        Err(e @ KfsError::TxnTooLarge { .. }) => {
            let op = ops[0];
            let m = (op.dst_off + op.size / 2) / BLOCK_SIZE * BLOCK_SIZE;
            if m <= op.dst_off || m >= op.dst_off + op.size {
                return Err(e.into());
            }
            let head = m - op.dst_off;
            relink_split(kfs, &[RelinkOp { size: head, ..op }])?;
            relink_split(
                kfs,
                &[RelinkOp {
                    src_off: op.src_off + head,
                    dst_off: m,
                    size: op.size - head,
                    ..op
                }],
            )
        }
        r => Ok(r?),
    }
}

/// Opens the instance's log file, creating it if needed, and replays
/// whatever it holds.
fn open_log(kfs: &Kfs, dev: &SharedDevice, cfg: &Config) -> Result<(OpLog, RecoveryStats)> {
    let name = log_name(cfg.instance_id);
    let ino = match kfs.lookup(&name) {
        Ok(ino) => ino,
        Err(KfsError::NotFound(_)) => {
            let ino = kfs.create(&name)?;
            kfs.allocate(ino, 0, cfg.log_size)?;
            ino
        }
        Err(e) => return Err(e.into()),
    };
    let size = kfs.stat(ino)?.size;
    let place = LogPlacement::build(kfs, ino, size)?;
    recover::replay(kfs, dev, place)
}

fn spawn_worker(kfs: Arc<Kfs>, pool: Arc<Mutex<StagingPool>>) -> (mpsc::Sender<()>, JoinHandle<()>) {
    let (tx, rx) = mpsc::channel::<()>();
    let h = std::thread::spawn(move || {
        for () in rx {
            let (inst, index, size) = pool.lock().claim_index();
            match StagingPool::create_detached(&kfs, inst, index, size) {
                Ok(f) => pool.lock().add_created(f),
                Err(_) => pool.lock().cancel_pending(),
            }
        }
    });
    (tx, h)
}
