// SPDX-License-Identifier: Apache-2.0

//! A split user/kernel persistent-memory file system over an emulated
//! PM device, plus a crash-state checker and a counter-based benchmark
//! harness.
//!
//! - [`pmem`]: the emulated device with cache-line persistence semantics.
//! - [`kfs`]: the kernel-side journaled extent file system.
//! - [`usplit`]: the user-space library (staging, relink, operation log).
//! - [`crashcheck`]: trace-driven crash-state enumeration and checking.
//! - [`bench`]: workloads, engines and result reporting.

pub mod pmem;
pub mod kfs;
pub mod usplit;
pub mod script;
pub mod shadow;
pub mod crashcheck;
pub mod bench;
