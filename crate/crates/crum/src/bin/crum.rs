//! Launcher/coordinator CLI: runs applications under the runtime (proxy +
//! interposed app + control socket), triggers checkpoints, restarts from
//! images, and drives the benchmark suite.

use std::io::{BufRead, BufReader, Write};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::PathBuf;
use std::process::{Child, Command, ExitCode};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand};

use crum::bench::{self, BenchConfig, BenchResult};
use crum::ckpt::Strategy;
use crum::wire::shm::SharedRegion;
use crum::workloads::Workload;

#[derive(Parser)]
#[command(name = "crum", about = "checkpoint-restart runtime launcher")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an application under the runtime.
    Run {
        #[arg(long, value_parser = ["normal", "verified"], default_value = "normal")]
        mode: String,
        #[arg(long)]
        pipeline_depth: Option<u32>,
        /// Device arena capacity in bytes.
        #[arg(long, default_value_t = 1 << 30)]
        arena: usize,
        /// Control socket path (default /tmp/crum-<pid>.sock).
        #[arg(long)]
        socket: Option<PathBuf>,
        /// Application command line.
        #[arg(last = true, required = true)]
        app: Vec<String>,
    },
    /// Trigger a checkpoint on a running session.
    Ckpt {
        #[arg(long)]
        socket: PathBuf,
        #[arg(long, value_parser = ["naive", "gzip", "pgzip", "lz4", "forked", "forked-gzip", "forked-lz4"])]
        strategy: String,
        /// Image destination path.
        #[arg(long)]
        path: PathBuf,
    },
    /// Restart an application from a checkpoint image.
    Restart {
        image: PathBuf,
        #[arg(long, value_parser = ["normal", "verified"], default_value = "normal")]
        mode: String,
        #[arg(long)]
        pipeline_depth: Option<u32>,
        #[arg(long, default_value_t = 1 << 30)]
        arena: usize,
        #[arg(long)]
        socket: Option<PathBuf>,
        #[arg(last = true, required = true)]
        app: Vec<String>,
    },
    /// Run the benchmark suite (in-process device simulation).
    Bench {
        /// Comma-separated workload specs.
        #[arg(long, default_value = "dotprod:bytes=64m,tinyker,bigreg:bytes=64m,redundant:r=0.5,bytes=64m")]
        workloads: String,
        /// Comma-separated strategies to compare.
        #[arg(long, default_value = "naive,gzip,pgzip,lz4,forked")]
        strategies: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        iters: u64,
        /// Checkpoint after this many iterations (0 = no checkpoint).
        #[arg(long, default_value_t = 5)]
        ckpt_at: u64,
        /// Storage throttle in decimal MB/s.
        #[arg(long)]
        throttle_mbps: Option<f64>,
        /// Also write the CSV to this file.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match Cli::parse().cmd {
        Cmd::Run {
            mode,
            pipeline_depth,
            arena,
            socket,
            app,
        } => cmd_run(&mode, pipeline_depth, arena, socket, &app, None),
        Cmd::Restart {
            image,
            mode,
            pipeline_depth,
            arena,
            socket,
            app,
        } => cmd_run(&mode, pipeline_depth, arena, socket, &app, Some(image)),
        Cmd::Ckpt {
            socket,
            strategy,
            path,
        } => cmd_ckpt(&socket, &strategy, &path),
        Cmd::Bench {
            workloads,
            strategies,
            seed,
            iters,
            ckpt_at,
            throttle_mbps,
            csv,
        } => cmd_bench(&workloads, &strategies, seed, iters, ckpt_at, throttle_mbps, csv),
    }
}

fn sibling(name: &str) -> PathBuf {
    std::env::current_exe()
        .ok()
        .and_then(|p| p.parent().map(|d| d.join(name)))
        .unwrap_or_else(|| PathBuf::from(name))
}

fn fail(code: &str, detail: impl std::fmt::Display) -> ExitCode {
    eprintln!("ERR {code} {detail}");
    ExitCode::FAILURE
}

fn cmd_run(
    mode: &str,
    pipeline_depth: Option<u32>,
    arena: usize,
    socket: Option<PathBuf>,
    app: &[String],
    restart_image: Option<PathBuf>,
) -> ExitCode {
    if let Some(image) = &restart_image {
        if !image.is_file() {
            return fail("no-image", image.display());
        }
    }
    let id = std::process::id();
    let shm_name = format!("/crum-{id}");
    let sock_path = socket.unwrap_or_else(|| PathBuf::from(format!("/tmp/crum-{id}.sock")));

    let mut proxy = match Command::new(sibling("crum-proxy"))
        .arg("--shm")
        .arg(&shm_name)
        .arg("--arena")
        .arg(arena.to_string())
        .spawn()
    {
        Ok(c) => c,
        Err(e) => return fail("spawn-proxy", e),
    };

    // Wait for the proxy to publish the control region.
    let region = match wait_region(&shm_name, &mut proxy) {
        Ok(r) => r,
        Err(code) => {
            let _ = proxy.kill();
            let _ = proxy.wait();
            return code;
        }
    };

    let _ = std::fs::remove_file(&sock_path);
    let listener = match UnixListener::bind(&sock_path) {
        Ok(l) => l,
        Err(e) => {
            let _ = proxy.kill();
            let _ = proxy.wait();
            return fail("socket-bind", e);
        }
    };
    println!("SESSION {}", sock_path.display());

    let mut cmd = Command::new(&app[0]);
    cmd.args(&app[1..])
        .env("CRUM_SHM_NAME", &shm_name)
        .env("CRUM_MODE", mode);
    if let Some(d) = pipeline_depth {
        cmd.env("CRUM_PIPELINE_DEPTH", d.to_string());
    }
    if let Some(image) = &restart_image {
        cmd.env("CRUM_RESTART", image);
    }
    let mut child = match cmd.spawn() {
        Ok(c) => c,
        Err(e) => {
            let _ = proxy.kill();
            let _ = proxy.wait();
            let _ = std::fs::remove_file(&sock_path);
            return fail("spawn-app", e);
        }
    };

    // Control socket relay, until the app exits.
    let done = Arc::new(AtomicBool::new(false));
    let relay = {
        let done = done.clone();
        let region = region.clone();
        listener.set_nonblocking(true).ok();
        std::thread::spawn(move || relay_loop(&listener, &region, &done))
    };

    let app_status = child.wait();
    done.store(true, Ordering::Release);
    let _ = relay.join();
    let proxy_status = proxy.wait();
    let _ = std::fs::remove_file(&sock_path);

    let app_code = match app_status {
        Ok(st) => st.code().unwrap_or(1),
        Err(e) => return fail("wait-app", e),
    };
    if app_code != 0 {
        eprintln!("ERR app-exit {app_code}");
        return ExitCode::from(app_code.clamp(0, 255) as u8);
    }
    match proxy_status {
        Ok(st) if st.success() => ExitCode::SUCCESS,
        Ok(st) => fail("proxy-exit", st.code().unwrap_or(1)),
        Err(e) => fail("wait-proxy", e),
    }
}

/// Attaches to the proxy's control region, waiting for it to come up.
fn wait_region(shm_name: &str, proxy: &mut Child) -> Result<Arc<SharedRegion>, ExitCode> {
    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        if let Ok(Some(st)) = proxy.try_wait() {
            return Err(fail("proxy-died", st.code().unwrap_or(1)));
        }
        match SharedRegion::attach(shm_name) {
            Ok(r) => {
                let r = Arc::new(r);
                while r.header().proxy_ready.load(Ordering::Acquire) == 0 {
                    if Instant::now() > deadline {
                        return Err(fail("proxy-timeout", shm_name));
                    }
                    std::thread::sleep(Duration::from_millis(5));
                }
                return Ok(r);
            }
            Err(_) if Instant::now() < deadline => {
                std::thread::sleep(Duration::from_millis(5))
            }
            Err(e) => return Err(fail("shm-attach", e)),
        }
    }
}

fn relay_loop(listener: &UnixListener, region: &SharedRegion, done: &AtomicBool) {
    while !done.load(Ordering::Acquire) {
        match listener.accept() {
            Ok((stream, _)) => {
                if let Err(e) = serve_ckpt_request(stream, region, done) {
                    eprintln!("ERR control-socket {e}");
                }
            }
            Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(20));
            }
            Err(_) => return,
        }
    }
}

/// Handles one `CKPT <strategy> <path>` request: writes the mailbox, waits
/// for the app to service it at a call boundary, relays the outcome.
fn serve_ckpt_request(
    mut stream: UnixStream,
    region: &SharedRegion,
    done: &AtomicBool,
) -> std::io::Result<()> {
    let mut line = String::new();
    BufReader::new(stream.try_clone()?).read_line(&mut line)?;
    let parts: Vec<&str> = line.split_whitespace().collect();
    let (strategy, path) = match parts.as_slice() {
        ["CKPT", s, p] => match Strategy::parse(s) {
            Some(st) => (st, *p),
            None => {
                stream.write_all(b"ERR 5\n")?;
                return Ok(());
            }
        },
        _ => {
            stream.write_all(b"ERR 5\n")?;
            return Ok(());
        }
    };
    let h = region.header();
    if path.len() > h.ckpt_path.len() {
        stream.write_all(b"ERR 5\n")?;
        return Ok(());
    }
    let req = h.ckpt_done_seq.load(Ordering::Acquire) + 1;
    unsafe {
        std::ptr::copy_nonoverlapping(
            path.as_ptr(),
            h.ckpt_path.as_ptr() as *mut u8,
            path.len(),
        );
    }
    h.ckpt_path_len.store(path.len() as u32, Ordering::Release);
    h.ckpt_strategy.store(strategy.as_u32(), Ordering::Release);
    h.ckpt_req_seq.store(req, Ordering::Release);

    let deadline = Instant::now() + Duration::from_secs(300);
    while h.ckpt_done_seq.load(Ordering::Acquire) != req {
        if done.load(Ordering::Acquire) || Instant::now() > deadline {
            stream.write_all(b"ERR 7\n")?;
            return Ok(());
        }
        std::thread::sleep(Duration::from_millis(2));
    }
    let status = h.ckpt_status.load(Ordering::Acquire);
    if status == 0 {
        let reply = format!(
            "OK {} {} {}\n",
            h.ckpt_pause_us.load(Ordering::Acquire) / 1000,
            h.ckpt_total_us.load(Ordering::Acquire) / 1000,
            h.ckpt_bytes.load(Ordering::Acquire),
        );
        stream.write_all(reply.as_bytes())?;
    } else {
        stream.write_all(format!("ERR {status}\n").as_bytes())?;
    }
    Ok(())
}

fn cmd_ckpt(socket: &PathBuf, strategy: &str, path: &PathBuf) -> ExitCode {
    let mut stream = match UnixStream::connect(socket) {
        Ok(s) => s,
        Err(e) => return fail("connect", e),
    };
    let line = format!("CKPT {} {}\n", strategy, path.display());
    if let Err(e) = stream.write_all(line.as_bytes()) {
        return fail("send", e);
    }
    let mut reply = String::new();
    if let Err(e) = BufReader::new(stream).read_line(&mut reply) {
        return fail("recv", e);
    }
    print!("{reply}");
    if reply.starts_with("OK ") {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn cmd_bench(
    workload_list: &str,
    strategy_list: &str,
    seed: u64,
    iters: u64,
    ckpt_at: u64,
    throttle_mbps: Option<f64>,
    csv: Option<PathBuf>,
) -> ExitCode {
    // Workload specs may contain commas inside parameters (r=0.5,bytes=64m),
    // so split on commas that start a new known workload name.
    let workloads = match split_workloads(workload_list) {
        Ok(w) => w,
        Err(bad) => return fail("bad-workload", bad),
    };
    let mut strategies = Vec::new();
    for s in strategy_list.split(',').filter(|s| !s.is_empty()) {
        match Strategy::parse(s) {
            Some(st) => strategies.push(st),
            None => return fail("bad-strategy", s),
        }
    }

    let dir = std::env::temp_dir().join(format!("crum-bench-{}", std::process::id()));
    if let Err(e) = std::fs::create_dir_all(&dir) {
        return fail("tempdir", e);
    }
    let mut rows: Vec<BenchResult> = Vec::new();
    for w in &workloads {
        for &strategy in &strategies {
            let cfg = BenchConfig {
                seed,
                iters,
                ckpt_at,
                strategy,
                image_path: dir
                    .join(format!("{}-{}.img", w.name(), bench::strategy_name(strategy))),
                throttle_mbps,
                shadow_base: None,
            };
            match bench::run_one(w, &cfg) {
                Ok(row) => {
                    eprintln!("done: {}", row.csv_row());
                    rows.push(row);
                }
                Err(e) => return fail("bench", format!("{}/{:?}: {e}", w.name(), strategy)),
            }
        }
    }

    let mut csv_text = String::from(BenchResult::CSV_HEADER);
    csv_text.push('\n');
    for r in &rows {
        csv_text.push_str(&r.csv_row());
        csv_text.push('\n');
    }
    if let Some(path) = csv {
        if let Err(e) = std::fs::write(&path, &csv_text) {
            return fail("csv-write", e);
        }
    }
    print!("{csv_text}");
    println!();
    print!("{}", bench::render_table(&rows));
    let _ = std::fs::remove_dir_all(&dir);
    ExitCode::SUCCESS
}

fn split_workloads(list: &str) -> Result<Vec<Workload>, String> {
    const NAMES: [&str; 5] = ["dotprod", "tinyker", "bigreg", "redundant", "violator"];
    let mut specs: Vec<String> = Vec::new();
    for piece in list.split(',').filter(|s| !s.is_empty()) {
        let starts_new = NAMES
            .iter()
            .any(|n| piece == *n || piece.starts_with(&format!("{n}:")));
        if starts_new || specs.is_empty() {
            specs.push(piece.to_string());
        } else {
            let last = specs.last_mut().unwrap();
            last.push(',');
            last.push_str(piece);
        }
    }
    specs
        .iter()
        .map(|s| Workload::parse(s).ok_or_else(|| s.clone()))
        .collect()
}
