use std::sync::atomic::{AtomicUsize, Ordering};

use crum::client::{Session, SessionOptions};
use crum::error::CrumError;
use crum::inproc::InprocProxy;
use crum::shadow::{Mode, ShadowConfig, SHADOW_BASE};
use crum::workloads::{self, Workload};

fn options(mode: Mode) -> SessionOptions {
    static NEXT: AtomicUsize = AtomicUsize::new(2000);
    let slot = NEXT.fetch_add(1, Ordering::Relaxed);
    let mut opts = SessionOptions::from_env();
    opts.shadow = ShadowConfig {
        page_size: 4096,
        mode,
        small_region_pages: 8,
        coarse_write: false,
    };
    opts.shadow_base = Some(SHADOW_BASE + slot * (1 << 30));
    opts
}

fn run_once(w: &Workload, mode: Mode, iters: u64) -> Result<u32, CrumError> {
    let proxy = InprocProxy::spawn(w.managed_bytes() + 1024 * 1024);
    let mut s = Session::over_region(proxy.region(), options(mode)).unwrap();
    let out = workloads::run(&mut s, w, 7, iters)?;
    s.shutdown().unwrap();
    Ok(out.checksum)
}

#[test]
fn dotprod_checksum_is_seed_deterministic() {
    let w = Workload::parse("dotprod:bytes=2m").unwrap();
    let a = run_once(&w, Mode::Normal, 4).unwrap();
    let b = run_once(&w, Mode::Normal, 4).unwrap();
    assert_eq!(a, b);
    // A different seed changes the data and therefore the checksum.
    let proxy = InprocProxy::spawn(w.managed_bytes() + 1024 * 1024);
    let mut s = Session::over_region(proxy.region(), options(Mode::Normal)).unwrap();
    let c = workloads::run(&mut s, &w, 8, 4).unwrap().checksum;
    s.shutdown().unwrap();
    assert_ne!(a, c);
}

#[test]
fn bundled_workloads_pass_verified_mode() {
    for spec in ["dotprod:bytes=1m", "redundant:r=0.5,bytes=1m", "tinyker:regions=8,kernels=64", "bigreg:bytes=1m"] {
        let w = Workload::parse(spec).unwrap();
        run_once(&w, Mode::Verified, 3)
            .unwrap_or_else(|e| panic!("{spec} failed under verified mode: {e:?}"));
    }
}

#[test]
fn violator_flagged_in_verified_silent_in_normal() {
    match run_once(&Workload::Violator, Mode::Verified, 1) {
        Err(CrumError::CycleViolation { .. }) => {}
        other => panic!("expected cycle violation, got {other:?}"),
    }
    run_once(&Workload::Violator, Mode::Normal, 1).unwrap();
}

#[test]
fn bigreg_resumes_from_checkpoint_to_golden_checksum() {
    let w = Workload::parse("bigreg:bytes=1m").unwrap();
    let golden = run_once(&w, Mode::Normal, 6).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("img");
    let opts = options(Mode::Normal);
    {
        let proxy = InprocProxy::spawn(w.managed_bytes() + 1024 * 1024);
        let mut s = Session::over_region(proxy.region(), opts.clone()).unwrap();
        workloads::run(&mut s, &w, 7, 3).unwrap();
        s.checkpoint(&path, crum::ckpt::Strategy::Naive).unwrap();
        s.shutdown().unwrap();
    }
    let proxy = InprocProxy::spawn(w.managed_bytes() + 1024 * 1024);
    let mut s = Session::over_region(proxy.region(), opts).unwrap();
    crum::ckpt::restore_into(&mut s, &path).unwrap();
    let resumed = workloads::run(&mut s, &w, 7, 6).unwrap();
    s.shutdown().unwrap();
    assert_eq!(resumed.iterations_run, 3);
    assert_eq!(resumed.checksum, golden);
}
