// SPDX-License-Identifier: Apache-2.0

//! Crash-point selection.
//!
//! Under the strict-epoch policy a crash state only changes at fences, so
//! the points are the trace start, the position right after every fence,
//! and the trace end. Under the adversarial policy a crash right before
//! each fence (and at the trace end) may additionally persist any prefix
//! of every line's pending stores.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::pmem::{Policy, TraceEvent};

use super::materialize::Materializer;

/// One crash state: the first `prefix` trace events happened, and for each
/// listed line the first `keep` of its still-pending stores reached media.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CrashPlan {
    pub prefix: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub keep: BTreeMap<u64, usize>,
}

impl CrashPlan {
    pub fn at(prefix: usize) -> Self {
        CrashPlan {
            prefix,
            keep: BTreeMap::new(),
        }
    }
}

/// Crash points for `policy`, ascending and without duplicates.
pub fn crash_points(trace: &[TraceEvent], policy: Policy) -> Vec<usize> {
    let mut pts: Vec<usize> = match policy {
        Policy::StrictEpoch => std::iter::once(0)
            .chain(trace.iter().enumerate().filter(|(_, e)| e.is_fence()).map(|(i, _)| i + 1))
            .collect(),
        Policy::Adversarial => trace.iter().enumerate().filter(|(_, e)| e.is_fence()).map(|(i, _)| i).collect(),
    };
    pts.push(trace.len());
    pts.sort_unstable();
    pts.dedup();
    pts
}

/// Crash plans for `trace` under `policy`. The adversarial space is
/// enumerated whole when it holds at most `budget` plans; otherwise every
/// point contributes its nothing-extra and everything-extra plans (when
/// they fit) and the rest of the budget is sampled with `seed`.
pub fn enumerate(trace: &[TraceEvent], policy: Policy, budget: usize, seed: u64) -> Vec<CrashPlan> {
    let pts = crash_points(trace, policy);
    if policy == Policy::StrictEpoch {
        return pts.into_iter().map(CrashPlan::at).collect();
    }

    let mut m = Materializer::counting(trace);
    let mut pending: Vec<(usize, Vec<(u64, usize)>)> = Vec::with_capacity(pts.len());
    for &p in &pts {
        m.advance_to(p);
        pending.push((p, m.pending_counts().into_iter().collect()));
    }
    let space = pending.iter().fold(0usize, |acc, (_, lines)| {
        let n = lines.iter().fold(1usize, |a, &(_, c)| a.saturating_mul(c + 1));
        acc.saturating_add(n)
    });

    let mut plans = Vec::new();
    if space <= budget {
        for (p, lines) in &pending {
            let mut choice = vec![0usize; lines.len()];
            loop {
                plans.push(plan_of(*p, lines, &choice));
                // Odometer over the per-line choices.
                let mut i = 0;
                while i < lines.len() && choice[i] == lines[i].1 {
                    choice[i] = 0;
                    i += 1;
                }
                if i == lines.len() {
                    break;
                }
                choice[i] += 1;
            }
        }
        return plans;
    }

    if 2 * pending.len() <= budget {
        for (p, lines) in &pending {
            plans.push(CrashPlan::at(*p));
            if !lines.is_empty() {
                let all: Vec<usize> = lines.iter().map(|l| l.1).collect();
                plans.push(plan_of(*p, lines, &all));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while plans.len() < budget {
        let (p, lines) = &pending[rng.gen_range(0..pending.len())];
        let choice: Vec<usize> = lines.iter().map(|l| rng.gen_range(0..=l.1)).collect();
        plans.push(plan_of(*p, lines, &choice));
    }
    plans.sort();
    plans
}

fn plan_of(prefix: usize, lines: &[(u64, usize)], choice: &[usize]) -> CrashPlan {
    CrashPlan {
        prefix,
        keep: lines
            .iter()
            .zip(choice)
            .filter(|(_, &k)| k > 0)
            .map(|(&(l, _), &k)| (l, k))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pmem::PmemDevice;

    fn trace(f: impl FnOnce(&mut PmemDevice)) -> Vec<TraceEvent> {
        let mut d = PmemDevice::new(4096).unwrap();
        d.set_tracing(true);
        f(&mut d);
        d.take_trace()
    }

    #[test]
    fn strict_epoch_points_follow_fences() {
        let t = trace(|d| {
            d.store_nt(0, &[1; 8]).unwrap();
            d.fence();
            d.store(64, &[1; 8]).unwrap();
        });
        assert_eq!(crash_points(&t, Policy::StrictEpoch), vec![0, 2, 3]);
        assert_eq!(enumerate(&[], Policy::StrictEpoch, 10, 0), vec![CrashPlan::at(0)]);
    }

    #[test]
    fn small_adversarial_space_is_exhaustive() {
        // Two lines with one pending store each before the fence, then one
        // cached store left at the end: 4 + 2 plans.
        let t = trace(|d| {
            d.store_nt(0, &[1; 8]).unwrap();
            d.store_nt(64, &[1; 8]).unwrap();
            d.fence();
            d.store(128, &[1; 8]).unwrap();
        });
        let plans = enumerate(&t, Policy::Adversarial, 100, 0);
        assert_eq!(plans.len(), 6);
        assert!(plans.contains(&CrashPlan {
            prefix: 2,
            keep: [(0, 1), (64, 1)].into_iter().collect()
        }));
    }

    #[test]
    fn sampling_is_deterministic_and_respects_budget() {
        let t = trace(|d| {
            for i in 0..10 {
                d.store_nt(i * 64, &[1; 64]).unwrap();
            }
            d.fence();
        });
        let a = enumerate(&t, Policy::Adversarial, 50, 7);
        assert_eq!(a.len(), 50);
        assert_eq!(a, enumerate(&t, Policy::Adversarial, 50, 7));
        assert_ne!(a, enumerate(&t, Policy::Adversarial, 50, 8));
        assert!(a.contains(&CrashPlan::at(10)));
    }
}
