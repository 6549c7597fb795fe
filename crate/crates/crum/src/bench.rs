//! Benchmark driver: runs a workload to a mid-point, checkpoints with a
//! chosen strategy, runs to completion, and reports timings and counters.
//! Everything is in-process (device simulation on a thread) so results are
//! comparable across strategies without process-spawn noise.

use std::time::Duration;

use crate::ckpt::{CkptStatus, Strategy};
use crate::client::{Session, SessionOptions};
use crate::error::{CrumError, CrumResult};
use crate::inproc::InprocProxy;
use crate::shadow::SHADOW_BASE;
use crate::workloads::{self, Workload};

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub seed: u64,
    pub iters: u64,
    /// Iteration count before the checkpoint is taken; 0 disables it.
    pub ckpt_at: u64,
    pub strategy: Strategy,
    pub image_path: std::path::PathBuf,
    /// Storage throttle in decimal MB/s; None leaves writes unthrottled.
    pub throttle_mbps: Option<f64>,
    /// Shadow bump base for this run; lets callers keep concurrent test
    /// sessions in disjoint ranges.
    pub shadow_base: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct BenchResult {
    pub workload: String,
    pub strategy: String,
    pub pause_time: Duration,
    pub total_time: Duration,
    pub image_bytes: u64,
    pub drain_time: Duration,
    pub faults_taken: u64,
    pub bulk_bytes: u64,
    /// Wall time of the whole run, setup included.
    pub wall_time: Duration,
    pub checksum: u32,
    pub kernels_launched: u64,
}

impl BenchResult {
    pub const CSV_HEADER: &'static str = "workload,strategy,pause_s,total_s,image_bytes,\
drain_s,faults_taken,bulk_bytes,wall_s,checksum,kernels";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{},{:.6},{},{},{:.6},{:08x},{}",
            self.workload,
            self.strategy,
            self.pause_time.as_secs_f64(),
            self.total_time.as_secs_f64(),
            self.image_bytes,
            self.drain_time.as_secs_f64(),
            self.faults_taken,
            self.bulk_bytes,
            self.wall_time.as_secs_f64(),
            self.checksum,
            self.kernels_launched,
        )
    }
}

pub fn strategy_name(s: Strategy) -> &'static str {
    match s.as_u32() {
        0 => "naive",
        1 => "gzip",
        2 => "pgzip",
        3 => "lz4",
        4 => "forked",
        5 => "forked-gzip",
        6 => "forked-lz4",
        _ => "?",
    }
}

pub fn run_one(w: &Workload, cfg: &BenchConfig) -> CrumResult<BenchResult> {
    let wall_t0 = std::time::Instant::now();
    let proxy = InprocProxy::spawn(w.managed_bytes() + 2 * 1024 * 1024);
    let mut opts = SessionOptions::from_env();
    opts.shadow_base = cfg.shadow_base.or(Some(SHADOW_BASE));
    let mut s = Session::over_region(proxy.region(), opts)?;

    let mut report = None;
    if cfg.ckpt_at > 0 && cfg.ckpt_at < cfg.iters {
        workloads::run(&mut s, w, cfg.seed, cfg.ckpt_at)?;
        if let Some(mbps) = cfg.throttle_mbps {
            std::env::set_var("CRUM_STORE_THROTTLE_MBPS", format!("{mbps}"));
        }
        let first = s.checkpoint(&cfg.image_path, cfg.strategy);
        let first = match first {
            Ok(r) => r,
            Err(e) => {
                std::env::remove_var("CRUM_STORE_THROTTLE_MBPS");
                return Err(e);
            }
        };
        let settled = if first.completed {
            first
        } else {
            match s.ckpt_wait() {
                CkptStatus::Done(r) => r,
                CkptStatus::Failed(code) => {
                    std::env::remove_var("CRUM_STORE_THROTTLE_MBPS");
                    return Err(CrumError::RestoreFailed(format!(
                        "forked checkpoint child failed with code {code}"
                    )));
                }
                _ => unreachable!("wait_completion never leaves a child running"),
            }
        };
        std::env::remove_var("CRUM_STORE_THROTTLE_MBPS");
        report = Some(settled);
    }
    let out = workloads::run(&mut s, w, cfg.seed, cfg.iters)?;
    let counters = s.counters();
    s.shutdown()?;

    let (pause, total, bytes, drain) = match report {
        Some(r) => (r.pause, r.total, r.image_bytes, r.drain),
        None => (Duration::ZERO, Duration::ZERO, 0, Duration::ZERO),
    };
    Ok(BenchResult {
        workload: w.name().to_string(),
        strategy: strategy_name(cfg.strategy).to_string(),
        pause_time: pause,
        total_time: total,
        image_bytes: bytes,
        drain_time: drain,
        faults_taken: counters.read_faults + counters.write_faults,
        bulk_bytes: counters.bulk_bytes,
        wall_time: wall_t0.elapsed(),
        checksum: out.checksum,
        kernels_launched: out.kernels_launched,
    })
}

/// Fixed-width human table for a result set.
pub fn render_table(rows: &[BenchResult]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<10} {:<12} {:>9} {:>9} {:>12} {:>9} {:>8} {:>12}\n",
        "workload", "strategy", "pause_s", "total_s", "image_bytes", "drain_s", "faults", "bulk_bytes"
    ));
    for r in rows {
        out.push_str(&format!(
            "{:<10} {:<12} {:>9.3} {:>9.3} {:>12} {:>9.3} {:>8} {:>12}\n",
            r.workload,
            r.strategy,
            r.pause_time.as_secs_f64(),
            r.total_time.as_secs_f64(),
            r.image_bytes,
            r.drain_time.as_secs_f64(),
            r.faults_taken,
            r.bulk_bytes,
        ));
    }
    out
}
