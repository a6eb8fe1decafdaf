// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;

use pmsplit::crashcheck::{self, CheckOptions, Report};
use pmsplit::kfs::Fault;
use pmsplit::pmem::Policy;
use pmsplit::script::Script;
use pmsplit::usplit::Mode;

fn corpus() -> Vec<(String, Script)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scripts");
    crashcheck::load_corpus(&dir).unwrap()
}

fn script(name: &str) -> Script {
    corpus().into_iter().find(|(n, _)| n.starts_with(name)).unwrap().1
}

#[test]
fn corpus_has_enough_short_scripts() {
    let c = corpus();
    assert!(c.len() >= 12, "{} scripts", c.len());
    for (name, s) in &c {
        assert!(!s.is_empty() && s.len() <= 30, "{name}: {} ops", s.len());
    }
}

#[test]
fn corpus_survives_strict_epoch_crashes_in_every_mode() {
    let opts = CheckOptions::default();
    for (name, s) in corpus() {
        for mode in [Mode::Posix, Mode::Sync, Mode::Strict] {
            let run = crashcheck::check_script(&s, mode, &opts).unwrap();
            assert!(run.report.passed(), "{name} {mode}: {:?}", run.report.violations.first());
            assert_eq!(run.report.states_checked, run.report.crash_points);
        }
    }
}

#[test]
fn adversarial_reports_are_reproducible_and_serializable() {
    let s = script("03");
    let opts = CheckOptions {
        budget: 300,
        ..CheckOptions::default().policy(Policy::Adversarial)
    };
    let a = crashcheck::check_script(&s, Mode::Posix, &opts).unwrap().report;
    let b = crashcheck::check_script(&s, Mode::Posix, &opts).unwrap().report;
    assert_eq!(a, b);
    assert!(a.passed());
    assert!(a.states_checked <= 300);
    let back: Report = serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
    assert_eq!(back, a);
}

#[test]
fn injected_fault_is_caught_and_its_plan_replays() {
    let s = script("01");
    let opts = CheckOptions::default().policy(Policy::Adversarial).inject(Fault::SkipLogFence);
    let report = crashcheck::check_script(&s, Mode::Strict, &opts).unwrap().report;
    assert!(!report.passed());
    let v = &report.violations[0];
    let again = crashcheck::replay_plan(&s, Mode::Strict, &opts, &v.plan).unwrap().report;
    assert_eq!(again.states_checked, 1);
    assert_eq!(again.violations.first().map(|x| x.guarantee), Some(v.guarantee));
}
