// SPDX-License-Identifier: Apache-2.0

//! Workloads, engines and result reporting.
//!
//! Timings on an emulated device say little about real hardware, so every
//! result also carries the device counters for the timed section. Write
//! amplification is bytes persisted over bytes the workload wrote.

mod engine;

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::RwLock;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kfs::{Geometry, Kfs, KfsError};
use crate::pmem::{IoCounters, PmemDevice, PmemError, SharedDevice};
use crate::script::{payload, Offset, Op, Script, ScriptError};
use crate::usplit::{Config, UsplitError};

pub use engine::{DaxFs, Engine, EngineKind};

/// Environment variable overriding the emulated device capacity.
pub const DEVICE_SIZE_ENV: &str = "PMSPLIT_DEVICE_SIZE";
pub const DEFAULT_DEVICE_SIZE: u64 = 256 << 20;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Device(#[from] PmemError),
    #[error(transparent)]
    Kfs(#[from] KfsError),
    #[error(transparent)]
    Library(#[from] UsplitError),
    #[error(transparent)]
    Script(#[from] ScriptError),
    #[error("bad descriptor {0}")]
    BadDescriptor(u32),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("writing results: {0}")]
    Io(#[from] std::io::Error),
    #[error("encoding results: {0}")]
    Encode(String),
}

pub type Result<T> = std::result::Result<T, BenchError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Workload {
    SeqRead,
    RandRead,
    /// Sequential overwrite of an existing file.
    SeqWrite,
    RandWrite,
    Append,
    /// Appends with an fsync after every tenth.
    AppendFsync10,
    /// Create, four appends each followed by fsync, read back, delete.
    VarmailMicro,
    Script(PathBuf),
}

impl Workload {
    fn needs_existing_file(&self) -> bool {
        matches!(
            self,
            Workload::SeqRead | Workload::RandRead | Workload::SeqWrite | Workload::RandWrite
        )
    }
}

impl fmt::Display for Workload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Workload::SeqRead => f.write_str("seq_read"),
            Workload::RandRead => f.write_str("rand_read"),
            Workload::SeqWrite => f.write_str("seq_write"),
            Workload::RandWrite => f.write_str("rand_write"),
            Workload::Append => f.write_str("append"),
            Workload::AppendFsync10 => f.write_str("append_fsync10"),
            Workload::VarmailMicro => f.write_str("varmail_micro"),
            Workload::Script(p) => write!(f, "script:{}", p.display()),
        }
    }
}

impl FromStr for Workload {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "seq_read" => Workload::SeqRead,
            "rand_read" => Workload::RandRead,
            "seq_write" => Workload::SeqWrite,
            "rand_write" => Workload::RandWrite,
            "append" => Workload::Append,
            "append_fsync10" => Workload::AppendFsync10,
            "varmail_micro" => Workload::VarmailMicro,
            _ => match s.strip_prefix("script:") {
                Some(p) if !p.is_empty() => Workload::Script(PathBuf::from(p)),
                _ => return Err(format!("unknown workload {s:?}")),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub engine: EngineKind,
    pub workload: Workload,
    pub file_size: u64,
    pub op_size: u64,
    /// Operation count; by default the file size in operations (or, for
    /// `varmail_micro`, in 16 KiB messages).
    pub iterations: Option<u64>,
    pub seed: u64,
    /// Append workloads only: each thread appends to its own file.
    pub threads: usize,
    /// Reporting only: adds this many nanoseconds per persisted byte to a
    /// modeled time.
    pub latency_ns_per_byte: Option<f64>,
    pub device_size: u64,
    pub usplit: Config,
}

impl BenchConfig {
    pub fn new(engine: EngineKind, workload: Workload) -> Self {
        BenchConfig {
            engine,
            workload,
            file_size: 32 << 20,
            op_size: 4096,
            iterations: None,
            seed: 1,
            threads: 1,
            latency_ns_per_byte: None,
            device_size: device_size_from_env().unwrap_or(DEFAULT_DEVICE_SIZE),
            usplit: Config::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BenchError::Config(m));
        if self.op_size == 0 {
            return bad("op_size must be positive".into());
        }
        if self.threads == 0 {
            return bad("threads must be positive".into());
        }
        if self.threads > 1 && !matches!(self.workload, Workload::Append | Workload::AppendFsync10) {
            return bad(format!("{} does not support threads", self.workload));
        }
        if self.device_size % 4096 != 0 {
            return bad(format!("device size {} is not a multiple of 4096", self.device_size));
        }
        Ok(())
    }
}

/// Device capacity from [`DEVICE_SIZE_ENV`], accepting a K, M or G suffix.
pub fn device_size_from_env() -> Option<u64> {
    std::env::var(DEVICE_SIZE_ENV).ok().and_then(|v| parse_size(&v))
}

pub fn parse_size(s: &str) -> Option<u64> {
    let s = s.trim();
    let (num, shift) = match s.chars().last()? {
        'k' | 'K' => (&s[..s.len() - 1], 10),
        'm' | 'M' => (&s[..s.len() - 1], 20),
        'g' | 'G' => (&s[..s.len() - 1], 30),
        _ => (s, 0),
    };
    num.parse::<u64>().ok()?.checked_mul(1 << shift)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub engine: EngineKind,
    pub workload: String,
    pub file_size: u64,
    pub op_size: u64,
    pub threads: usize,
    pub seed: u64,
    pub ops: u64,
    pub logical_bytes: u64,
    pub elapsed: Duration,
    pub ops_per_sec: f64,
    /// Counters for the timed section only.
    pub counters: IoCounters,
    /// Bytes persisted per byte written; absent for read-only runs.
    pub write_amplification: Option<f64>,
    pub kfs_calls: u64,
    pub log_entries: u64,
    pub fences_per_op: f64,
    pub modeled_secs: Option<f64>,
}

/// Runs one benchmark on a fresh device. Setup (format, staging and log
/// allocation, preconditioning) is excluded from timing and counters.
pub fn run(cfg: &BenchConfig) -> Result<BenchResult> {
    cfg.validate()?;
    let mut raw = PmemDevice::new(cfg.device_size)?;
    raw.prefault();
    let dev: SharedDevice = Arc::new(RwLock::new(raw));
    Kfs::mkfs(&dev, Geometry::for_capacity(cfg.device_size)?)?;
    let kfs = Arc::new(Kfs::mount(dev.clone())?);
    let eng = Engine::start(cfg.engine, kfs.clone(), &cfg.usplit)?;
    let buf = payload(cfg.seed, cfg.op_size);

    let mut main_fd = None;
    if cfg.workload.needs_existing_file() {
        let fd = eng.open("bench.dat")?;
        let mut off = 0;
        while off < cfg.file_size {
            let n = cfg.op_size.min(cfg.file_size - off);
            eng.write(fd, Offset::At(off), &buf[..n as usize])?;
            off += n;
        }
        eng.fsync(fd)?;
        main_fd = Some(fd);
    }
    let script = match &cfg.workload {
        Workload::Script(p) => Some(Script::load(p)?),
        _ => None,
    };

    let c0 = dev.read().counters();
    let k0 = kfs.calls();
    let t0 = Instant::now();
    let (ops, logical) = match &cfg.workload {
        Workload::SeqRead | Workload::RandRead | Workload::SeqWrite | Workload::RandWrite => {
            overwrite_or_read(&eng, cfg, main_fd.expect("preconditioned"), &buf)?
        }
        Workload::Append | Workload::AppendFsync10 => appends(&eng, cfg, &buf)?,
        Workload::VarmailMicro => varmail(&eng, cfg, &buf)?,
        Workload::Script(_) => run_script(&eng, script.as_ref().expect("loaded"))?,
    };
    let elapsed = t0.elapsed();
    let counters = dev.read().counters().since(&c0);
    let kfs_calls = kfs.calls() - k0;
    drop(eng);

    let secs = elapsed.as_secs_f64().max(1e-9);
    Ok(BenchResult {
        engine: cfg.engine,
        workload: cfg.workload.to_string(),
        file_size: cfg.file_size,
        op_size: cfg.op_size,
        threads: cfg.threads,
        seed: cfg.seed,
        ops,
        logical_bytes: logical,
        elapsed,
        ops_per_sec: ops as f64 / secs,
        counters,
        write_amplification: (logical > 0).then(|| counters.bytes_persisted as f64 / logical as f64),
        kfs_calls,
        log_entries: counters.log_entries_written,
        fences_per_op: if ops == 0 { 0.0 } else { counters.fence_count as f64 / ops as f64 },
        modeled_secs: cfg
            .latency_ns_per_byte
            .map(|ns| secs + counters.bytes_persisted as f64 * ns * 1e-9),
    })
}

fn overwrite_or_read(eng: &Engine, cfg: &BenchConfig, fd: u32, buf: &[u8]) -> Result<(u64, u64)> {
    let slots = (cfg.file_size / cfg.op_size).max(1);
    let ops = cfg.iterations.unwrap_or(slots);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let writes = matches!(cfg.workload, Workload::SeqWrite | Workload::RandWrite);
    let random = matches!(cfg.workload, Workload::RandRead | Workload::RandWrite);
    let mut sink = 0u64;
    for i in 0..ops {
        let slot = if random { rng.gen_range(0..slots) } else { i % slots };
        let off = slot * cfg.op_size;
        if writes {
            eng.write(fd, Offset::At(off), buf)?;
        } else {
            let got = eng.read(fd, Offset::At(off), cfg.op_size)?;
            sink = sink.wrapping_add(got.first().copied().unwrap_or(0) as u64);
        }
    }
    std::hint::black_box(sink);
    if writes {
        eng.fsync(fd)?;
        Ok((ops, ops * cfg.op_size))
    } else {
        Ok((ops, 0))
    }
}

fn appends(eng: &Engine, cfg: &BenchConfig, buf: &[u8]) -> Result<(u64, u64)> {
    let per_thread = cfg.iterations.unwrap_or((cfg.file_size / cfg.op_size).max(1)) / cfg.threads as u64;
    let every = match cfg.workload {
        Workload::AppendFsync10 => 10,
        _ => u64::MAX,
    };
    let one = |t: usize| -> Result<()> {
        let fd = eng.open(&format!("bench.{t}.dat"))?;
        for i in 1..=per_thread {
            eng.write(fd, Offset::Cur, buf)?;
            if i % every == 0 {
                eng.fsync(fd)?;
            }
        }
        eng.fsync(fd)?;
        eng.close(fd)
    };
    if cfg.threads == 1 {
        one(0)?;
    } else {
        std::thread::scope(|s| {
            let hs: Vec<_> = (0..cfg.threads).map(|t| s.spawn(move || one(t))).collect();
            hs.into_iter()
                .map(|h| h.join().expect("benchmark thread panicked"))
                .collect::<Result<Vec<()>>>()
        })?;
    }
    let ops = per_thread * cfg.threads as u64;
    Ok((ops, ops * cfg.op_size))
}

fn varmail(eng: &Engine, cfg: &BenchConfig, buf: &[u8]) -> Result<(u64, u64)> {
    const MESSAGE: u64 = 16 << 10;
    let n = cfg.iterations.unwrap_or((cfg.file_size / MESSAGE).max(1));
    let chunk = &buf[..(MESSAGE / 4).min(buf.len() as u64) as usize];
    let mut ops = 0;
    let mut logical = 0;
    for i in 0..n {
        let name = format!("mail.{i}");
        let fd = eng.open(&name)?;
        for _ in 0..4 {
            eng.write(fd, Offset::Cur, chunk)?;
            eng.fsync(fd)?;
            logical += chunk.len() as u64;
        }
        eng.read(fd, Offset::At(0), MESSAGE)?;
        eng.close(fd)?;
        eng.unlink(&name)?;
        ops += 12;
    }
    Ok((ops, logical))
}

fn run_script(eng: &Engine, script: &Script) -> Result<(u64, u64)> {
    let mut logical = 0;
    for op in &script.ops {
        match op {
            Op::Open(n) => {
                eng.open(n)?;
            }
            Op::Write { fd, off, len, seed } => {
                eng.write(*fd, *off, &payload(*seed, *len))?;
                logical += len;
            }
            Op::Read { fd, off, len } => {
                eng.read(*fd, *off, *len)?;
            }
            Op::Fsync(fd) => eng.fsync(*fd)?,
            Op::Close(fd) => eng.close(*fd)?,
            Op::Unlink(n) => eng.unlink(n)?,
            Op::Rename(a, b) => eng.rename(a, b)?,
            Op::Mark(_) => {}
        }
    }
    Ok((script.len() as u64, logical))
}

/// Results of several configurations, throughput normalized to the first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub results: Vec<BenchResult>,
    pub normalized: Vec<f64>,
}

pub fn compare(configs: &[BenchConfig]) -> Result<Comparison> {
    let results = configs.iter().map(run).collect::<Result<Vec<_>>>()?;
    let base = results.first().map(|r| r.ops_per_sec).unwrap_or(1.0);
    let normalized = results.iter().map(|r| r.ops_per_sec / base).collect();
    Ok(Comparison { results, normalized })
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<16} {:<16} {:>12} {:>8} {:>14} {:>8} {:>10}",
            "engine", "workload", "ops/s", "norm", "persisted", "WA", "kfs calls"
        )?;
        for (r, n) in self.results.iter().zip(&self.normalized) {
            let wa = r.write_amplification.map(|w| format!("{w:.3}")).unwrap_or_else(|| "-".into());
            writeln!(
                f,
                "{:<16} {:<16} {:>12.0} {:>8.2} {:>14} {:>8} {:>10}",
                r.engine.name(),
                r.workload,
                r.ops_per_sec,
                n,
                r.counters.bytes_persisted,
                wa,
                r.kfs_calls
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Format {
    Csv,
    Json,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(format!("unknown format {s:?}")),
        }
    }
}

/// Flat row for CSV output.
#[derive(Serialize)]
struct Row<'a> {
    engine: &'a str,
    workload: &'a str,
    file_size: u64,
    op_size: u64,
    threads: usize,
    seed: u64,
    ops: u64,
    logical_bytes: u64,
    elapsed_secs: f64,
    ops_per_sec: f64,
    bytes_persisted: u64,
    bytes_stored: u64,
    bytes_stored_nt: u64,
    flushes: u64,
    fences: u64,
    journal_commits: u64,
    log_entries: u64,
    relink_bytes_copied: u64,
    write_amplification: Option<f64>,
    kfs_calls: u64,
    fences_per_op: f64,
    modeled_secs: Option<f64>,
}

/// Serializes `results` in `format`.
pub fn emit(results: &[BenchResult], format: Format, out: &mut dyn std::io::Write) -> Result<()> {
    match format {
        Format::Json => {
            serde_json::to_writer_pretty(&mut *out, results).map_err(|e| BenchError::Encode(e.to_string()))?;
            writeln!(out)?;
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(out);
            for r in results {
                let c = &r.counters;
                w.serialize(Row {
                    engine: r.engine.name(),
                    workload: &r.workload,
                    file_size: r.file_size,
                    op_size: r.op_size,
                    threads: r.threads,
                    seed: r.seed,
                    ops: r.ops,
                    logical_bytes: r.logical_bytes,
                    elapsed_secs: r.elapsed.as_secs_f64(),
                    ops_per_sec: r.ops_per_sec,
                    bytes_persisted: c.bytes_persisted,
                    bytes_stored: c.bytes_stored,
                    bytes_stored_nt: c.bytes_stored_nt,
                    flushes: c.flush_count,
                    fences: c.fence_count,
                    journal_commits: c.journal_commit_count,
                    log_entries: c.log_entries_written,
                    relink_bytes_copied: c.relink_data_bytes_copied,
                    write_amplification: r.write_amplification,
                    kfs_calls: r.kfs_calls,
                    fences_per_op: r.fences_per_op,
                    modeled_secs: r.modeled_secs,
                })
                .map_err(|e| BenchError::Encode(e.to_string()))?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

/// Writes `results` to `path` in `format`.
pub fn emit_to(results: &[BenchResult], format: Format, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    emit(results, format, &mut f)?;
    f.flush()?;
    Ok(())
}
