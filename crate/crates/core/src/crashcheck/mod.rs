// SPDX-License-Identifier: Apache-2.0

//! Trace-driven crash-state checking.
//!
//! A script runs once on a traced device. Crash plans pick a trace prefix
//! and, under the adversarial policy, which still-pending stores reach
//! media. Each resulting image is mounted, recovered by a fresh library
//! instance, checked structurally, and compared with the states the mode
//! permits at that point.

mod materialize;
mod oracle;
mod plan;

use std::collections::{BTreeSet, HashMap};
use std::hash::Hasher;
use std::path::Path;
use std::panic::{self, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::RwLock;
use rustc_hash::FxHasher;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kfs::{Fault, Kfs, KfsError};
use crate::pmem::{PmemDevice, PmemError, Policy};
use crate::script::{Script, ScriptError};
use crate::shadow::FsView;
use crate::usplit::{Config, Mode, Usplit, UsplitError};

pub use materialize::{materialize, Materializer};
pub use oracle::{run_recorded, Expectation, Recorded};
pub use plan::{crash_points, enumerate, CrashPlan};

#[derive(Debug, Error)]
pub enum CheckError {
    #[error(transparent)]
    Device(#[from] PmemError),
    #[error(transparent)]
    Kfs(#[from] KfsError),
    #[error(transparent)]
    Library(#[from] UsplitError),
    #[error("plan prefix {prefix} is past the trace end ({len} events)")]
    BadPlan { prefix: usize, len: usize },
}

/// Device and library settings for recorded runs. Small on purpose: every
/// crash state is a full image copy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckConfig {
    pub device_size: u64,
    pub usplit: Config,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            device_size: 1 << 20,
            usplit: Config {
                map_size: 64 << 10,
                staging_count: 2,
                staging_size: 16 << 10,
                log_size: 4 << 10,
                ..Config::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckOptions {
    pub policy: Policy,
    /// Adversarial plan budget.
    pub budget: usize,
    pub seed: u64,
    pub faults: Vec<Fault>,
    pub config: CheckConfig,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            policy: Policy::StrictEpoch,
            budget: 5000,
            seed: 0x5eed,
            faults: Vec::new(),
            config: CheckConfig::default(),
        }
    }
}

impl CheckOptions {
    pub fn policy(mut self, policy: Policy) -> Self {
        self.policy = policy;
        self
    }

    /// Adds a fault to the recorded run.
    pub fn inject(mut self, fault: Fault) -> Self {
        if !self.faults.contains(&fault) {
            self.faults.push(fault);
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Guarantee {
    /// The recorded run itself disagreed with the shadow model.
    Equivalence,
    /// The trace interpreter and the device disagree on a crash image.
    OracleAgreement,
    Mountable,
    Recoverable,
    /// No structural problems: extents, bitmap, namespace.
    MetadataConsistency,
    AllocatorConservation,
    /// File contents permitted by the mode.
    ModeState(Mode),
}

impl std::fmt::Display for Guarantee {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Guarantee::Equivalence => f.write_str("run matches the shadow model"),
            Guarantee::OracleAgreement => f.write_str("trace interpreter agrees with the device"),
            Guarantee::Mountable => f.write_str("image mounts"),
            Guarantee::Recoverable => f.write_str("library recovery succeeds"),
            Guarantee::MetadataConsistency => f.write_str("metadata is consistent"),
            Guarantee::AllocatorConservation => f.write_str("every block is free, live, or metadata"),
            Guarantee::ModeState(Mode::Posix) => {
                f.write_str("posix: metadata synchronous, in-place overwrites durable, appends atomic at fsync")
            }
            Guarantee::ModeState(Mode::Sync) => f.write_str("sync: every returned operation is durable"),
            Guarantee::ModeState(Mode::Strict) => f.write_str("strict: every returned operation is durable and atomic"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub plan: CrashPlan,
    pub guarantee: Guarantee,
    pub diff: String,
}

/// Deterministic outcome of one script/mode/policy check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub mode: Mode,
    pub policy: Policy,
    pub budget: usize,
    pub seed: u64,
    pub faults: Vec<Fault>,
    pub trace_events: usize,
    pub crash_points: usize,
    pub states_checked: usize,
    pub distinct_images: usize,
    pub violation_count: usize,
    /// The first few violations in plan order.
    pub violations: Vec<Violation>,
    pub max_entries_replayed: u64,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.violation_count == 0
    }
}

/// A report plus the timings that are kept out of it.
#[derive(Debug, Clone)]
pub struct CheckRun {
    pub report: Report,
    pub elapsed: Duration,
    pub max_recovery: Duration,
}

const KEPT_VIOLATIONS: usize = 20;

/// Loads every `*.txt` script in `dir`, sorted by file name.
pub fn load_corpus(dir: &Path) -> Result<Vec<(String, Script)>, ScriptError> {
    let entries = std::fs::read_dir(dir).map_err(|e| ScriptError::Io {
        path: dir.display().to_string(),
        reason: e.to_string(),
    })?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let name = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            Script::load(&p).map(|s| (name, s))
        })
        .collect()
}

/// Records `script` and checks every plan the options select.
pub fn check_script(script: &Script, mode: Mode, opts: &CheckOptions) -> Result<CheckRun, CheckError> {
    let t0 = Instant::now();
    let rec = run_recorded(script, mode, &opts.config, &opts.faults)?;
    let plans = enumerate(&rec.trace, opts.policy, opts.budget, opts.seed);
    let mut run = check_plans(&rec, mode, opts, &plans)?;
    run.elapsed = t0.elapsed();
    Ok(run)
}

/// Re-records `script` and checks a single plan, for reproducing a report.
pub fn replay_plan(script: &Script, mode: Mode, opts: &CheckOptions, plan: &CrashPlan) -> Result<CheckRun, CheckError> {
    let rec = run_recorded(script, mode, &opts.config, &opts.faults)?;
    check_plans(&rec, mode, opts, std::slice::from_ref(plan))
}

/// Checks `plans` (any order) against a recorded run.
pub fn check_plans(rec: &Recorded, mode: Mode, opts: &CheckOptions, plans: &[CrashPlan]) -> Result<CheckRun, CheckError> {
    let t0 = Instant::now();
    let mut order: Vec<usize> = (0..plans.len()).collect();
    order.sort_by_key(|&i| plans[i].prefix);
    if let Some(p) = plans.iter().find(|p| p.prefix > rec.trace.len()) {
        return Err(CheckError::BadPlan {
            prefix: p.prefix,
            len: rec.trace.len(),
        });
    }

    let mut found: Vec<(usize, Violation)> = rec
        .divergences
        .iter()
        .map(|d| {
            (
                usize::MAX,
                Violation {
                    plan: CrashPlan::at(rec.trace.len()),
                    guarantee: Guarantee::Equivalence,
                    diff: d.clone(),
                },
            )
        })
        .collect();
    let mut cache: HashMap<(u64, usize), Result<u64, (Guarantee, String)>> = HashMap::new();
    let mut images: BTreeSet<u64> = BTreeSet::new();
    let mut points: BTreeSet<usize> = BTreeSet::new();
    let mut max_replayed = 0u64;
    let mut max_recovery = Duration::ZERO;

    let mut interp = Materializer::new(&rec.base, &rec.trace);
    let mut device = PmemDevice::from_image(rec.base.clone())?;
    let mut dev_pos = 0usize;
    for i in order {
        let plan = &plans[i];
        points.insert(plan.prefix);
        interp.advance_to(plan.prefix);
        for ev in &rec.trace[dev_pos..plan.prefix] {
            device.apply_event(ev)?;
        }
        dev_pos = plan.prefix;
        let image = interp.image(plan);
        let agree = device
            .crash_image(Policy::Adversarial, &plan.keep)
            .map(|d| d == image)
            .unwrap_or(false);
        if !agree {
            found.push((
                i,
                Violation {
                    plan: plan.clone(),
                    guarantee: Guarantee::OracleAgreement,
                    diff: "materialized image differs from the device's crash image".into(),
                },
            ));
            continue;
        }
        let idx = rec.expectation_at(plan.prefix);
        let h = image_hash(&image);
        images.insert(h);
        let verdict = match cache.get(&(h, idx)) {
            Some(v) => v.clone(),
            None => {
                let t = Instant::now();
                let exp = &rec.expectations[idx];
                let v = panic::catch_unwind(AssertUnwindSafe(|| check_image(image, mode, &opts.config, exp)))
                    .unwrap_or_else(|p| Err((Guarantee::Recoverable, format!("recovery panicked: {}", panic_text(&p)))));
                max_recovery = max_recovery.max(t.elapsed());
                cache.insert((h, idx), v.clone());
                v
            }
        };
        match verdict {
            Ok(n) => max_replayed = max_replayed.max(n),
            Err((guarantee, diff)) => found.push((
                i,
                Violation {
                    plan: plan.clone(),
                    guarantee,
                    diff,
                },
            )),
        }
    }

    found.sort_by_key(|(i, _)| *i);
    let violation_count = found.len();
    let report = Report {
        mode,
        policy: opts.policy,
        budget: opts.budget,
        seed: opts.seed,
        faults: opts.faults.clone(),
        trace_events: rec.trace.len(),
        crash_points: points.len(),
        states_checked: plans.len(),
        distinct_images: images.len(),
        violation_count,
        violations: found.into_iter().take(KEPT_VIOLATIONS).map(|(_, v)| v).collect(),
        max_entries_replayed: max_replayed,
    };
    Ok(CheckRun {
        report,
        elapsed: t0.elapsed(),
        max_recovery,
    })
}

fn panic_text(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_default()
}

fn image_hash(image: &[u8]) -> u64 {
    let mut h = FxHasher::default();
    h.write(image);
    h.finish()
}

/// Mounts and recovers `image`, then compares it with `exp`. Returns the
/// number of log entries replayed.
pub fn check_image(image: Vec<u8>, mode: Mode, cfg: &CheckConfig, exp: &Expectation) -> Result<u64, (Guarantee, String)> {
    let dev = PmemDevice::from_image(image).map_err(|e| (Guarantee::Mountable, e.to_string()))?;
    let dev = Arc::new(RwLock::new(dev));
    let kfs = Arc::new(Kfs::mount(dev).map_err(|e| (Guarantee::Mountable, e.to_string()))?);
    let u = Usplit::init(kfs.clone(), mode, cfg.usplit.clone()).map_err(|e| (Guarantee::Recoverable, e.to_string()))?;
    let replayed = u.recovery_stats().entries_replayed;
    drop(u);
    let f = kfs.fsck().map_err(|e| (Guarantee::MetadataConsistency, e.to_string()))?;
    if !f.is_clean() {
        return Err((Guarantee::MetadataConsistency, f.problems.join("; ")));
    }
    if !f.conserved() {
        return Err((
            Guarantee::AllocatorConservation,
            format!(
                "free {} + live {} + metadata {} != total {}",
                f.free_blocks, f.data_blocks, f.metadata_blocks, f.total_blocks
            ),
        ));
    }
    let view = visible(&kfs).map_err(|e| (Guarantee::MetadataConsistency, e.to_string()))?;
    if exp.admits(&view) {
        Ok(replayed)
    } else {
        Err((Guarantee::ModeState(mode), describe(&view, exp)))
    }
}

fn visible(kfs: &Kfs) -> Result<FsView, KfsError> {
    let mut out = FsView::new();
    for (name, ino) in kfs.list() {
        if name.starts_with('.') {
            continue;
        }
        let size = kfs.stat(ino)?.size;
        out.insert(name, kfs.read_direct(ino, 0, size)?);
    }
    Ok(out)
}

/// Short account of how `got` differs from the closest permitted view.
fn describe(got: &FsView, exp: &Expectation) -> String {
    let diffs: Vec<String> = exp.exact.iter().map(|w| diff_views(got, w)).collect();
    let best = diffs.iter().min_by_key(|d| d.len()).cloned().unwrap_or_default();
    format!("{} permitted state(s); closest: {best}", exp.exact.len())
}

fn diff_views(got: &FsView, want: &FsView) -> String {
    let mut out = Vec::new();
    for n in want.keys().filter(|n| !got.contains_key(*n)) {
        out.push(format!("{n} missing"));
    }
    for n in got.keys().filter(|n| !want.contains_key(*n)) {
        out.push(format!("{n} unexpected"));
    }
    for (n, g) in got {
        let Some(w) = want.get(n) else { continue };
        if g.len() != w.len() {
            out.push(format!("{n} size {} want {}", g.len(), w.len()));
        } else if let Some(i) = g.iter().zip(w).position(|(a, b)| a != b) {
            out.push(format!("{n} differs at byte {i}"));
        }
    }
    out.join(", ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn script(s: &str) -> Script {
        Script::parse(s).unwrap()
    }

    #[test]
    fn empty_script_has_one_state() {
        for policy in [Policy::StrictEpoch, Policy::Adversarial] {
            let run = check_script(&Script::default(), Mode::Posix, &CheckOptions::default().policy(policy)).unwrap();
            assert_eq!(run.report.states_checked, 1);
            assert!(run.report.passed(), "{:?}", run.report.violations);
        }
    }

    #[test]
    fn five_op_posix_script_passes_exhaustively() {
        let s = script("open a\nwrite 3 0 5000 1\nfsync 3\nwrite 3 100 50 2\nclose 3\n");
        let run = check_script(&s, Mode::Posix, &CheckOptions::default()).unwrap();
        assert!(run.report.states_checked > 5);
        assert!(run.report.passed(), "{:#?}", run.report.violations);
    }

    #[test]
    fn skipped_journal_commit_is_caught() {
        let s = script("open a\nopen b\nwrite 3 0 4096 1\nfsync 3\nrename a c\n");
        let opts = CheckOptions::default()
            .policy(Policy::Adversarial)
            .inject(Fault::SkipJournalCommit);
        let run = check_script(&s, Mode::Posix, &opts).unwrap();
        assert!(!run.report.passed());
    }

    #[test]
    fn same_seed_same_report() {
        let s = script("open a\nwrite 3 0 300 1\nfsync 3\n");
        let opts = CheckOptions {
            budget: 200,
            ..CheckOptions::default().policy(Policy::Adversarial)
        };
        let a = check_script(&s, Mode::Strict, &opts).unwrap().report;
        let b = check_script(&s, Mode::Strict, &opts).unwrap().report;
        assert_eq!(a, b);
        assert!(a.passed(), "{:#?}", a.violations);
    }

    #[test]
    fn replayed_plan_reproduces_the_verdict() {
        let s = script("open a\nwrite 3 0 64 1\n");
        let opts = CheckOptions::default().policy(Policy::Adversarial).inject(Fault::SkipLogFence);
        let run = check_script(&s, Mode::Strict, &opts).unwrap();
        let v = run.report.violations.first().expect("a violation").clone();
        let again = replay_plan(&s, Mode::Strict, &opts, &v.plan).unwrap();
        assert_eq!(again.report.violations, vec![v]);
    }
}
