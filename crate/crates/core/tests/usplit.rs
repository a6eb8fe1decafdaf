// SPDX-License-Identifier: Apache-2.0

use std::sync::Arc;

use parking_lot::RwLock;
use pmsplit::kfs::{Geometry, Kfs};
use pmsplit::pmem::{IoClass, PmemDevice, SharedDevice, SnapshotKind};
use pmsplit::usplit::{Config, FsyncStrategy, Mode, Usplit, UsplitError, Whence};

fn small_cfg() -> Config {
    Config {
        map_size: 64 << 10,
        staging_count: 4,
        staging_size: 256 << 10,
        log_size: 64 << 10,
        ..Config::default()
    }
}

fn device(cap: u64) -> SharedDevice {
    let dev = Arc::new(RwLock::new(PmemDevice::new(cap).unwrap()));
    Kfs::mkfs(&dev, Geometry::for_capacity(cap).unwrap()).unwrap();
    dev
}

fn fresh(mode: Mode) -> Usplit {
    Usplit::recover(device(16 << 20), mode, small_cfg()).unwrap()
}

/// Drops all volatile state and remounts from the persistent image.
fn crash(u: Usplit, mode: Mode) -> Usplit {
    let img = u.device().read().snapshot(SnapshotKind::Persistent);
    drop(u);
    let dev = Arc::new(RwLock::new(PmemDevice::from_image(img).unwrap()));
    Usplit::recover(dev, mode, small_cfg()).unwrap()
}

fn pattern(n: usize, seed: u8) -> Vec<u8> {
    (0..n).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect()
}

#[test]
fn strict_append_costs_one_data_fence_and_one_log_entry() {
    let u = fresh(Mode::Strict);
    let fd = u.create("f").unwrap();
    u.device().write().reset_counters("after open");
    u.write(fd, &pattern(4096, 1)).unwrap();
    let d = u.device().read();
    assert_eq!(d.class_counters(IoClass::Data).bytes_stored_nt, 4096);
    assert_eq!(d.class_counters(IoClass::Log).bytes_stored_nt, 64);
    assert_eq!(d.counters().fence_count, 2);
    assert_eq!(d.counters().log_entries_written, 1);
}

#[test]
fn posix_overwrite_of_mapped_range_bypasses_kfs() {
    let u = fresh(Mode::Posix);
    let fd = u.create("f").unwrap();
    u.write(fd, &pattern(8192, 1)).unwrap();
    u.fsync(fd).unwrap();
    u.pread(fd, 0, 1).unwrap();
    let calls = u.kfs().calls();
    u.device().write().reset_counters("warm");
    u.pwrite(fd, 4096, &pattern(4096, 9)).unwrap();
    assert_eq!(u.kfs().calls(), calls);
    let c = u.device().read().counters();
    assert_eq!(c.bytes_stored_nt, 4096);
    assert_eq!(c.fence_count, 1);
    assert_eq!(u.pread(fd, 4096, 4096).unwrap(), pattern(4096, 9));
}

#[test]
fn posix_append_without_fsync_is_lost_on_crash() {
    let u = fresh(Mode::Posix);
    let fd = u.create("f").unwrap();
    u.write(fd, &pattern(100, 1)).unwrap();
    u.fsync(fd).unwrap();
    u.write(fd, &pattern(5000, 2)).unwrap();
    assert_eq!(u.fstat(fd).unwrap().size, 5100);
    let u = crash(u, Mode::Posix);
    assert_eq!(u.stat("f").unwrap().size, 100);
    assert!(u.kfs().fsck().unwrap().is_clean());
}

#[test]
fn staged_appends_are_moved_not_copied() {
    let u = fresh(Mode::Posix);
    let fd = u.create("f").unwrap();
    for i in 0..10 {
        u.write(fd, &pattern(4096, i)).unwrap();
    }
    u.device().write().reset_counters("before fsync");
    u.fsync(fd).unwrap();
    let c = u.device().read().counters();
    assert_eq!(c.relink_data_bytes_copied, 0);
    assert_eq!(u.kfs().stat(u.fstat(fd).unwrap().ino).unwrap().size, 40960);
    for i in 0..10u8 {
        assert_eq!(u.pread(fd, i as u64 * 4096, 4096).unwrap(), pattern(4096, i));
    }
    assert_eq!(u.staged_bytes(), 0);
}

#[test]
fn fsync_with_nothing_staged_does_nothing() {
    let u = fresh(Mode::Strict);
    let fd = u.create("f").unwrap();
    let tail = u.log_tail();
    u.device().write().reset_counters("idle");
    u.fsync(fd).unwrap();
    let c = u.device().read().counters();
    assert_eq!(c.journal_commit_count, 0);
    assert_eq!(c.log_entries_written, 0);
    assert_eq!(u.log_tail(), tail);
}

#[test]
fn strict_writes_survive_crash_without_fsync() {
    let u = fresh(Mode::Strict);
    let fd = u.create("f").unwrap();
    u.write(fd, &pattern(10000, 3)).unwrap();
    u.pwrite(fd, 100, &pattern(50, 4)).unwrap();
    let u = crash(u, Mode::Strict);
    assert!(u.recovery_stats().entries_replayed >= 2);
    let fd = u.open("f").unwrap();
    let got = u.read(fd, 20000).unwrap();
    let mut want = pattern(10000, 3);
    want[100..150].copy_from_slice(&pattern(50, 4));
    assert_eq!(got, want);
    assert!(u.kfs().fsck().unwrap().is_clean());
}

#[test]
fn recovering_twice_gives_the_same_image() {
    let u = fresh(Mode::Strict);
    let fd = u.create("f").unwrap();
    u.write(fd, &pattern(9000, 3)).unwrap();
    let img = u.device().read().snapshot(SnapshotKind::Persistent);
    drop(u);
    let once = {
        let dev = Arc::new(RwLock::new(PmemDevice::from_image(img.clone()).unwrap()));
        let u = Usplit::recover(dev, Mode::Strict, small_cfg()).unwrap();
        let snap = u.device().read().snapshot(SnapshotKind::Persistent);
        snap
    };
    let dev = Arc::new(RwLock::new(PmemDevice::from_image(once.clone()).unwrap()));
    let u = Usplit::recover(dev, Mode::Strict, small_cfg()).unwrap();
    assert_eq!(u.recovery_stats().entries_scanned, 0);
    assert!(u.device().read().snapshot(SnapshotKind::Persistent) == once);
}

#[test]
fn empty_log_is_a_plain_mount() {
    let u = fresh(Mode::Strict);
    let u = crash(u, Mode::Strict);
    let s = u.recovery_stats();
    assert_eq!(s.entries_scanned, 0);
    assert_eq!(s.relinks, 0);
}

#[test]
fn checkpoint_when_log_fills() {
    let u = fresh(Mode::Strict);
    let fd = u.create("f").unwrap();
    // 64 KiB log holds 1022 entries.
    for i in 0..3000u64 {
        u.write(fd, &[i as u8; 16]).unwrap();
    }
    assert_eq!(u.fstat(fd).unwrap().size, 48000);
    let u = crash(u, Mode::Strict);
    let fd = u.open("f").unwrap();
    let got = u.read(fd, 48000).unwrap();
    for i in 0..3000usize {
        assert_eq!(got[i * 16], i as u8);
    }
}

#[test]
fn other_instance_sees_appends_only_after_fsync() {
    let dev = device(16 << 20);
    let kfs = Arc::new(Kfs::mount(dev).unwrap());
    let a = Usplit::init(kfs.clone(), Mode::Posix, small_cfg()).unwrap();
    let b = Usplit::init(kfs, Mode::Posix, Config { instance_id: 1, ..small_cfg() }).unwrap();
    let fa = a.create("f").unwrap();
    a.write(fa, &pattern(4096, 1)).unwrap();
    let fb = b.open("f").unwrap();
    assert_eq!(b.fstat(fb).unwrap().size, 0);
    a.fsync(fa).unwrap();
    assert_eq!(b.fstat(fb).unwrap().size, 4096);
    assert_eq!(b.pread(fb, 0, 4096).unwrap(), pattern(4096, 1));
    a.pwrite(fa, 10, b"hello").unwrap();
    assert_eq!(b.pread(fb, 10, 5).unwrap(), b"hello");
}

#[test]
fn copy_strategy_writes_data_twice() {
    let dev = device(16 << 20);
    let cfg = Config {
        fsync_strategy: FsyncStrategy::Copy,
        ..small_cfg()
    };
    let u = Usplit::recover(dev, Mode::Posix, cfg).unwrap();
    let fd = u.create("f").unwrap();
    u.device().write().reset_counters("start");
    u.write(fd, &pattern(40960, 1)).unwrap();
    u.fsync(fd).unwrap();
    let data = u.device().read().class_counters(IoClass::Data);
    assert!(data.bytes_stored + data.bytes_stored_nt >= 2 * 40960);
    assert_eq!(u.pread(fd, 0, 40960).unwrap(), pattern(40960, 1));
}

#[test]
fn unlink_makes_descriptors_stale() {
    let u = fresh(Mode::Sync);
    let fd = u.create("f").unwrap();
    u.write(fd, b"abc").unwrap();
    u.unlink("f").unwrap();
    assert!(matches!(u.write(fd, b"x"), Err(UsplitError::Stale(_))));
    assert_eq!(u.staged_bytes(), 0);
    assert!(u.list().is_empty());
}

#[test]
fn rename_replaces_target_and_keeps_data() {
    let u = fresh(Mode::Strict);
    let a = u.create("a").unwrap();
    u.write(a, b"first").unwrap();
    u.close(a).unwrap();
    let b = u.create("b").unwrap();
    u.write(b, b"second").unwrap();
    u.close(b).unwrap();
    u.rename("b", "a").unwrap();
    let u = crash(u, Mode::Strict);
    assert_eq!(u.list(), vec!["a".to_string()]);
    let fd = u.open("a").unwrap();
    assert_eq!(u.read(fd, 100).unwrap(), b"second");
}

#[test]
fn hidden_names_are_reserved() {
    let u = fresh(Mode::Posix);
    assert!(matches!(u.create(".stage.0.9"), Err(UsplitError::Reserved(_))));
}

#[test]
fn dup_shares_offset_and_lseek_moves_it() {
    let u = fresh(Mode::Posix);
    let fd = u.create("f").unwrap();
    let fd2 = u.dup(fd).unwrap();
    u.write(fd, b"0123456789").unwrap();
    u.write(fd2, b"ab").unwrap();
    assert_eq!(u.lseek(fd, 0, Whence::Cur).unwrap(), 12);
    assert_eq!(u.lseek(fd, -2, Whence::End).unwrap(), 10);
    assert_eq!(u.read(fd2, 10).unwrap(), b"ab");
}

#[test]
fn context_round_trip_keeps_staged_data() {
    let dev = device(16 << 20);
    let kfs = Arc::new(Kfs::mount(dev).unwrap());
    let u = Usplit::init(kfs.clone(), Mode::Strict, small_cfg()).unwrap();
    let fd = u.create("f").unwrap();
    u.write(fd, &pattern(5000, 7)).unwrap();
    let json = u.save_context().to_json();
    drop(u);
    let ctx = pmsplit::usplit::Context::from_json(&json).unwrap();
    let u = Usplit::load_context(kfs, ctx).unwrap();
    assert_eq!(u.lseek(fd, 0, Whence::Cur).unwrap(), 5000);
    u.write(fd, b"tail").unwrap();
    u.fsync(fd).unwrap();
    let mut want = pattern(5000, 7);
    want.extend_from_slice(b"tail");
    assert_eq!(u.pread(fd, 0, 6000).unwrap(), want);
}

#[test]
fn large_unaligned_writes_round_trip_in_every_mode() {
    for mode in Mode::ALL {
        let u = fresh(mode);
        let fd = u.create("f").unwrap();
        u.pwrite(fd, 777, &pattern(600_000, 5)).unwrap();
        u.pwrite(fd, 300_001, &pattern(3000, 6)).unwrap();
        u.fsync(fd).unwrap();
        let mut want = vec![0u8; 777];
        want.extend(pattern(600_000, 5));
        want[300_001..303_001].copy_from_slice(&pattern(3000, 6));
        assert_eq!(u.pread(fd, 0, 700_000).unwrap(), want, "{mode}");
        assert!(u.kfs().fsck().unwrap().is_clean(), "{mode}");
    }
}

