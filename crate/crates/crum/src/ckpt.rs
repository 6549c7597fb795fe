//! Checkpoint and restart.
//!
//! Checkpoint: quiesce (flush pipeline, synchronize, flush dirty pages),
//! drain every managed region back into its shadow pages, stage device-kind
//! payloads, detach from the proxy, then write the image — in-line (NAIVE /
//! COMPRESS) or from a copy-on-write forked child while the parent
//! reattaches and resumes (FORKED).
//!
//! Restart: replay the allocation log against a fresh proxy, asserting every
//! recorded result is reproduced exactly, re-map shadows at their recorded
//! addresses, push payloads, and hand the application back its state blob.
//!
//! The on-disk image format is documented byte-by-byte in docs/FORMAT.md.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use crate::client::{ReplayLog, ReplayOp, Session, SessionCore, SessionState};
use crate::device::RegionKind;
use crate::error::{CkptError, CrumError, CrumResult, ErrCode};
use crate::wire::bulk::BulkMode;
use crate::wire::payload::{Opcode, PayloadReader};

pub const FORMAT_VERSION: u32 = 1;
pub const IMAGE_MAGIC: [u8; 4] = *b"CRUM";
const CHUNK_BYTES: usize = 4 * 1024 * 1024;

const SECTION_REPLAY: u8 = 1;
const SECTION_REGION_TABLE: u8 = 2;
const SECTION_APP_STATE: u8 = 3;
const SECTION_REGION_PAYLOAD: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Codec {
    Raw = 0,
    Deflate = 1,
    Lz4 = 2,
}

impl Codec {
    pub fn from_u8(v: u8) -> Option<Codec> {
        match v {
            0 => Some(Codec::Raw),
            1 => Some(Codec::Deflate),
            2 => Some(Codec::Lz4),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Naive,
    Compress { codec: Codec, workers: usize },
    Forked { codec: Codec },
}

impl Strategy {
    /// Mailbox / CLI encoding.
    pub fn from_u32(v: u32) -> Option<Strategy> {
        Some(match v {
            0 => Strategy::Naive,
            1 => Strategy::Compress {
                codec: Codec::Deflate,
                workers: 1,
            },
            2 => Strategy::Compress {
                codec: Codec::Deflate,
                workers: default_workers(),
            },
            3 => Strategy::Compress {
                codec: Codec::Lz4,
                workers: 1,
            },
            4 => Strategy::Forked { codec: Codec::Raw },
            5 => Strategy::Forked {
                codec: Codec::Deflate,
            },
            6 => Strategy::Forked { codec: Codec::Lz4 },
            _ => return None,
        })
    }

    pub fn as_u32(self) -> u32 {
        match self {
            Strategy::Naive => 0,
            Strategy::Compress {
                codec: Codec::Deflate,
                workers: 1,
            } => 1,
            Strategy::Compress {
                codec: Codec::Deflate,
                ..
            } => 2,
            Strategy::Compress { .. } => 3,
            Strategy::Forked { codec: Codec::Raw } => 4,
            Strategy::Forked {
                codec: Codec::Deflate,
            } => 5,
            Strategy::Forked { codec: Codec::Lz4 } => 6,
        }
    }

    pub fn parse(s: &str) -> Option<Strategy> {
        Some(match s {
            "naive" => Strategy::Naive,
            "gzip" => Strategy::Compress {
                codec: Codec::Deflate,
                workers: 1,
            },
            "pgzip" => Strategy::Compress {
                codec: Codec::Deflate,
                workers: default_workers(),
            },
            "lz4" => Strategy::Compress {
                codec: Codec::Lz4,
                workers: 1,
            },
            "forked" => Strategy::Forked { codec: Codec::Raw },
            "forked-gzip" => Strategy::Forked {
                codec: Codec::Deflate,
            },
            "forked-lz4" => Strategy::Forked { codec: Codec::Lz4 },
            _ => return None,
        })
    }
}

fn default_workers() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .max(2)
}

#[derive(Debug, Clone, Copy)]
pub struct CkptReport {
    /// Application suspension: quiesce + drain + (write for in-line
    /// strategies, process duplication for FORKED).
    pub pause: Duration,
    /// End-to-end until the image is durably on disk. For FORKED this is
    /// known only once the child is reaped (`completed` = true).
    pub total: Duration,
    pub image_bytes: u64,
    pub drain: Duration,
    pub completed: bool,
}

#[derive(Debug, Clone, Copy)]
pub enum CkptStatus {
    Idle,
    ChildRunning,
    Done(CkptReport),
    /// Asynchronous write failure, as an `error_code` value.
    Failed(u32),
}

/// Book-keeping for a live FORKED child.
pub(crate) struct PendingFork {
    pid: libc::pid_t,
    started: Instant,
    path: PathBuf,
    report: CkptReport,
}

/// Stable numeric codes for the mailbox / control socket.
pub fn error_code(e: &CrumError) -> u32 {
    match e {
        CrumError::Ckpt(CkptError::DrainFailed(_)) => 1,
        CrumError::Ckpt(CkptError::WriteFailed(_)) => 2,
        CrumError::Ckpt(CkptError::ConcurrentCheckpoint) => 3,
        CrumError::Ckpt(CkptError::CrcMismatch { .. }) => 4,
        CrumError::Ckpt(CkptError::BadImage(_)) => 5,
        CrumError::Ckpt(CkptError::ReplayDivergence(_)) => 6,
        CrumError::Ckpt(CkptError::Io(_)) => 7,
        CrumError::RestoreFailed(_) => 8,
        _ => 100,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionEntry {
    pub id: u64,
    pub kind: RegionKind,
    pub len: u64,
    pub shadow: u64,
}

/// Decoded checkpoint image.
pub struct Image {
    pub codec: Codec,
    pub mode: u8,
    pub page_size: u32,
    pub arena_capacity: u64,
    pub replay: ReplayLog,
    pub regions: Vec<(RegionEntry, Vec<u8>)>,
    pub app_state: Vec<u8>,
}

/// Everything the image writer needs, assembled before any fork so the
/// child only serializes and writes.
struct ImageContent<'a> {
    mode: u8,
    page_size: u32,
    arena_capacity: u64,
    replay: Vec<u8>,
    table: Vec<RegionEntry>,
    payloads: Vec<&'a [u8]>,
    app_state: &'a [u8],
}

pub(crate) fn checkpoint(
    core: &mut SessionCore,
    path: &Path,
    strategy: Strategy,
) -> CrumResult<CkptReport> {
    if core.state != SessionState::Running {
        return Err(CrumError::NotRunning("checkpoint needs a running session"));
    }
    reap_child(core);
    if core.forked_child.is_some() {
        return Err(CkptError::ConcurrentCheckpoint.into());
    }

    let t0 = Instant::now();
    // Phase 1 — quiesce and drain.
    core.tx.flush().map_err(CrumError::Wire)?;
    core.sync_now()?;
    core.flush_dirty_now()?;
    let drain_t0 = Instant::now();
    core.drain_now()?;
    let device_staged = stage_device_regions(core)?;
    let drain = drain_t0.elapsed();
    assert_no_device_side_allocs(core)?;
    core.blocking_call(Opcode::Detach, |_| {})?;
    core.state = SessionState::Detached;

    // Assemble content views over the drained shadow pages and staging.
    let replay = core.replay.encode();
    let mut table = Vec::new();
    let mut payloads: Vec<&[u8]> = Vec::new();
    for r in core.shadows.regions() {
        table.push(RegionEntry {
            id: r.real_region,
            kind: RegionKind::Managed,
            len: r.logical_len as u64,
            shadow: r.shadow_base as u64,
        });
        payloads
            .push(unsafe { std::slice::from_raw_parts(r.shadow_base as *const u8, r.logical_len) });
    }
    for (id, data) in &device_staged {
        table.push(RegionEntry {
            id: *id,
            kind: RegionKind::Device,
            len: data.len() as u64,
            shadow: 0,
        });
        payloads.push(data.as_slice());
    }
    let content = ImageContent {
        mode: core.shadows.config().mode as u8,
        page_size: core.shadows.page_size() as u32,
        arena_capacity: core.header().arena_len.load(std::sync::atomic::Ordering::Acquire),
        replay,
        table,
        payloads,
        app_state: &core.app_state,
    };

    let report = match strategy {
        Strategy::Naive => {
            let bytes = write_image(path, Codec::Raw, 1, &content)?;
            reattach(core)?;
            let t = t0.elapsed();
            CkptReport {
                pause: t,
                total: t,
                image_bytes: bytes,
                drain,
                completed: true,
            }
        }
        Strategy::Compress { codec, workers } => {
            let bytes = write_image(path, codec, workers, &content)?;
            reattach(core)?;
            let t = t0.elapsed();
            CkptReport {
                pause: t,
                total: t,
                image_bytes: bytes,
                drain,
                completed: true,
            }
        }
        Strategy::Forked { codec } => {
            let pid = unsafe { libc::fork() };
            if pid < 0 {
                reattach(core)?;
                return Err(CkptError::WriteFailed("fork failed".into()).into());
            }
            if pid == 0 {
                // Child: the copy-on-write duplicate holds the complete
                // drained state. Serialize, sync, and exit — never touch
                // the inherited channel or shared region.
                let code = match write_image(path, codec, 1, &content) {
                    Ok(_) => 0,
                    Err(_) => 2,
                };
                unsafe { libc::_exit(code) };
            }
            let pause = t0.elapsed();
            let report = CkptReport {
                pause,
                total: pause,
                image_bytes: 0,
                drain,
                completed: false,
            };
            core.forked_child = Some(PendingFork {
                pid,
                started: t0,
                path: path.to_path_buf(),
                report,
            });
            reattach(core)?;
            report
        }
    };
    if report.completed {
        core.last_ckpt = Some(Ok(report));
    }
    Ok(report)
}

fn reattach(core: &mut SessionCore) -> CrumResult<()> {
    core.blocking_call(Opcode::Attach, |_| {})?;
    core.state = SessionState::Running;
    Ok(())
}

fn assert_no_device_side_allocs(core: &mut SessionCore) -> CrumResult<()> {
    // Light digest (no data CRC): the pause path only needs the counters.
    let reply = core.blocking_call(Opcode::StateDigest, |w| {
        w.u8(0);
    })?;
    let digest =
        crate::proxy::StateDigest::decode(&mut PayloadReader::new(&reply.data[..reply.len]))
            .ok_or(CrumError::Device(ErrCode::BadRequest))?;
    if digest.device_side_allocs != 0 {
        return Err(CkptError::DrainFailed("live device-side allocations".into()).into());
    }
    if digest.pending_tasks != 0 {
        return Err(CkptError::DrainFailed("pending device tasks after quiesce".into()).into());
    }
    Ok(())
}

/// Copies every live DEVICE-kind region into host staging buffers.
fn stage_device_regions(core: &mut SessionCore) -> CrumResult<Vec<(u64, Vec<u8>)>> {
    let regions: Vec<(u64, u64)> = core
        .device_regions
        .iter()
        .map(|(&id, &len)| (id, len))
        .collect();
    let mut out = Vec::with_capacity(regions.len());
    for (id, len) in regions {
        let mut buf = vec![0u8; len as usize];
        match core.bulk {
            BulkMode::SingleCopy => {
                let addr = buf.as_mut_ptr() as u64;
                core.blocking_call(Opcode::MemcpyD2H, |w| {
                    w.u64(id).u64(0).u64(len).u64(addr);
                })?;
            }
            BulkMode::Scratch => {
                use crate::shadow::UvmTransport;
                let addr = buf.as_mut_ptr() as usize;
                core.transport()
                    .fetch(id, 0, addr, len as usize)
                    .map_err(CrumError::Wire)?;
            }
        }
        out.push((id, buf));
    }
    Ok(out)
}

/// Non-blocking reap of a finished FORKED child; folds its outcome into
/// `last_ckpt`.
fn reap_child(core: &mut SessionCore) {
    let Some(pending) = core.forked_child.take() else {
        return;
    };
    let mut status: libc::c_int = 0;
    let r = unsafe { libc::waitpid(pending.pid, &mut status, libc::WNOHANG) };
    if r == 0 {
        core.forked_child = Some(pending);
        return;
    }
    let exit_code = if r == pending.pid && libc::WIFEXITED(status) {
        libc::WEXITSTATUS(status)
    } else {
        2
    };
    if exit_code == 0 {
        let mut report = pending.report;
        report.total = pending.started.elapsed();
        report.image_bytes = std::fs::metadata(&pending.path)
            .map(|m| m.len())
            .unwrap_or(0);
        report.completed = true;
        core.last_ckpt = Some(Ok(report));
    } else {
        core.last_ckpt = Some(Err(error_code(
            &CkptError::WriteFailed(format!("child exit {exit_code}")).into(),
        )));
    }
}

pub(crate) fn status(core: &mut SessionCore) -> CkptStatus {
    reap_child(core);
    if core.forked_child.is_some() {
        return CkptStatus::ChildRunning;
    }
    match core.last_ckpt {
        None => CkptStatus::Idle,
        Some(Ok(report)) => CkptStatus::Done(report),
        Some(Err(code)) => CkptStatus::Failed(code),
    }
}

/// Blocks until a FORKED child (if any) has finished, then reports.
pub(crate) fn wait_completion(core: &mut SessionCore) -> CkptStatus {
    loop {
        match status(core) {
            CkptStatus::ChildRunning => std::thread::sleep(Duration::from_micros(200)),
            s => return s,
        }
    }
}

// ---------------------------------------------------------------------------
// Image serialization.

/// Writer that limits throughput to CRUM_STORE_THROTTLE_MBPS (decimal
/// megabytes per second) via a token bucket over total bytes written.
struct ThrottledWriter<W: Write> {
    inner: W,
    rate: Option<f64>, // bytes per second
    started: Instant,
    written: u64,
}

impl<W: Write> ThrottledWriter<W> {
    fn new(inner: W) -> ThrottledWriter<W> {
        let rate = std::env::var("CRUM_STORE_THROTTLE_MBPS")
            .ok()
            .and_then(|v| v.parse::<f64>().ok())
            .filter(|&v| v > 0.0)
            .map(|mbps| mbps * 1e6);
        ThrottledWriter {
            inner,
            rate,
            started: Instant::now(),
            written: 0,
        }
    }
}

impl<W: Write> Write for ThrottledWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let chunk = if self.rate.is_some() {
            buf.len().min(1024 * 1024)
        } else {
            buf.len()
        };
        if let Some(rate) = self.rate {
            let due = (self.written + chunk as u64) as f64 / rate;
            let elapsed = self.started.elapsed().as_secs_f64();
            if due > elapsed {
                std::thread::sleep(Duration::from_secs_f64(due - elapsed));
            }
        }
        let n = self.inner.write(&buf[..chunk])?;
        self.written += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

fn encode_chunk(codec: Codec, raw: &[u8]) -> Vec<u8> {
    match codec {
        Codec::Raw => raw.to_vec(),
        Codec::Deflate => {
            let mut enc = flate2::write::DeflateEncoder::new(
                Vec::new(),
                flate2::Compression::fast(),
            );
            enc.write_all(raw).expect("in-memory deflate");
            enc.finish().expect("in-memory deflate")
        }
        Codec::Lz4 => lz4_flex::compress(raw),
    }
}

fn decode_chunk(codec: Codec, enc: &[u8], raw_len: usize) -> Result<Vec<u8>, CkptError> {
    match codec {
        Codec::Raw => Ok(enc.to_vec()),
        Codec::Deflate => {
            let mut out = Vec::with_capacity(raw_len);
            flate2::read::DeflateDecoder::new(enc)
                .read_to_end(&mut out)
                .map_err(|e| CkptError::BadImage(format!("deflate: {e}")))?;
            Ok(out)
        }
        Codec::Lz4 => lz4_flex::decompress(enc, raw_len)
            .map_err(|e| CkptError::BadImage(format!("lz4: {e}"))),
    }
}

/// Codec-frames one payload: chunk_count u32, then per chunk
/// (raw_len u32, enc_len u32, enc bytes). Chunks are compressed in
/// parallel when `workers` > 1.
fn frame_payload(codec: Codec, workers: usize, raw: &[u8]) -> Vec<u8> {
    let chunks: Vec<&[u8]> = if raw.is_empty() {
        Vec::new()
    } else {
        raw.chunks(CHUNK_BYTES).collect()
    };
    let encoded: Vec<Vec<u8>> = if workers <= 1 || chunks.len() <= 1 {
        chunks.iter().map(|c| encode_chunk(codec, c)).collect()
    } else {
        let mut out: Vec<Option<Vec<u8>>> = vec![None; chunks.len()];
        let n_workers = workers.min(chunks.len());
        std::thread::scope(|scope| {
            for (w, slots) in out.chunks_mut(chunks.len().div_ceil(n_workers)).enumerate() {
                let base = w * chunks.len().div_ceil(n_workers);
                let chunks = &chunks;
                scope.spawn(move || {
                    for (i, slot) in slots.iter_mut().enumerate() {
                        *slot = Some(encode_chunk(codec, chunks[base + i]));
                    }
                });
            }
        });
        out.into_iter().map(|o| o.unwrap()).collect()
    };
    let mut framed = Vec::new();
    framed.extend_from_slice(&(encoded.len() as u32).to_le_bytes());
    for (raw_chunk, enc) in chunks.iter().zip(&encoded) {
        framed.extend_from_slice(&(raw_chunk.len() as u32).to_le_bytes());
        framed.extend_from_slice(&(enc.len() as u32).to_le_bytes());
        framed.extend_from_slice(enc);
    }
    framed
}

fn deframe_payload(codec: Codec, framed: &[u8], expect_len: usize) -> Result<Vec<u8>, CkptError> {
    let bad = || CkptError::BadImage("truncated payload framing".into());
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8], CkptError> {
        let s = framed.get(*at..*at + n).ok_or_else(bad)?;
        *at += n;
        Ok(s)
    };
    let count = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(expect_len);
    for _ in 0..count {
        let raw_len = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
        let enc_len = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
        let enc = take(&mut at, enc_len)?;
        let raw = decode_chunk(codec, enc, raw_len)?;
        if raw.len() != raw_len {
            return Err(CkptError::BadImage("chunk length mismatch".into()));
        }
        out.extend_from_slice(&raw);
    }
    if at != framed.len() || out.len() != expect_len {
        return Err(CkptError::BadImage("payload length mismatch".into()));
    }
    Ok(out)
}

fn encode_region_table(table: &[RegionEntry]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(table.len() as u32).to_le_bytes());
    for e in table {
        out.extend_from_slice(&e.id.to_le_bytes());
        out.push(e.kind as u8);
        out.extend_from_slice(&e.len.to_le_bytes());
        out.extend_from_slice(&e.shadow.to_le_bytes());
    }
    out
}

struct SectionHeader {
    tag: u8,
    enc_len: u64,
    raw_len: u64,
    crc: u32,
}

impl SectionHeader {
    const BYTES: usize = 32;

    fn encode(&self) -> [u8; Self::BYTES] {
        let mut b = [0u8; Self::BYTES];
        b[0] = self.tag;
        b[4..12].copy_from_slice(&self.enc_len.to_le_bytes());
        b[12..20].copy_from_slice(&self.raw_len.to_le_bytes());
        b[20..24].copy_from_slice(&self.crc.to_le_bytes());
        b
    }

    fn decode(b: &[u8]) -> Option<SectionHeader> {
        if b.len() < Self::BYTES {
            return None;
        }
        Some(SectionHeader {
            tag: b[0],
            enc_len: u64::from_le_bytes(b[4..12].try_into().unwrap()),
            raw_len: u64::from_le_bytes(b[12..20].try_into().unwrap()),
            crc: u32::from_le_bytes(b[20..24].try_into().unwrap()),
        })
    }
}

fn write_image(
    path: &Path,
    codec: Codec,
    workers: usize,
    content: &ImageContent<'_>,
) -> Result<u64, CkptError> {
    let file = File::create(path).map_err(|e| CkptError::WriteFailed(e.to_string()))?;
    let mut w = ThrottledWriter::new(std::io::BufWriter::new(file));
    let mut file_crc = crc32fast::Hasher::new();
    let mut emit = |w: &mut dyn Write, bytes: &[u8]| -> Result<(), CkptError> {
        file_crc.update(bytes);
        w.write_all(bytes)
            .map_err(|e| CkptError::WriteFailed(e.to_string()))
    };

    // Fixed header.
    let mut header = [0u8; 32];
    header[0..4].copy_from_slice(&IMAGE_MAGIC);
    header[4..8].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
    header[8] = codec as u8;
    header[9] = content.mode;
    header[12..16].copy_from_slice(&content.page_size.to_le_bytes());
    header[16..24].copy_from_slice(&content.arena_capacity.to_le_bytes());
    let section_count = 3 + content.table.len() as u32;
    header[24..28].copy_from_slice(&section_count.to_le_bytes());
    emit(&mut w, &header)?;

    let mut section = |w: &mut ThrottledWriter<_>,
                       tag: u8,
                       raw_len: u64,
                       enc: &[u8]|
     -> Result<(), CkptError> {
        let h = SectionHeader {
            tag,
            enc_len: enc.len() as u64,
            raw_len,
            crc: crc32fast::hash(enc),
        };
        file_crc.update(&h.encode());
        w.write_all(&h.encode())
            .map_err(|e| CkptError::WriteFailed(e.to_string()))?;
        file_crc.update(enc);
        w.write_all(enc)
            .map_err(|e| CkptError::WriteFailed(e.to_string()))
    };

    section(
        &mut w,
        SECTION_REPLAY,
        content.replay.len() as u64,
        &content.replay,
    )?;
    let table = encode_region_table(&content.table);
    section(&mut w, SECTION_REGION_TABLE, table.len() as u64, &table)?;
    section(
        &mut w,
        SECTION_APP_STATE,
        content.app_state.len() as u64,
        content.app_state,
    )?;
    for payload in &content.payloads {
        let framed = frame_payload(codec, workers, payload);
        section(&mut w, SECTION_REGION_PAYLOAD, payload.len() as u64, &framed)?;
    }

    let crc = file_crc.finalize();
    w.write_all(&crc.to_le_bytes())
        .map_err(|e| CkptError::WriteFailed(e.to_string()))?;
    w.flush().map_err(|e| CkptError::WriteFailed(e.to_string()))?;
    let file = w
        .inner
        .into_inner()
        .map_err(|e| CkptError::WriteFailed(e.to_string()))?;
    file.sync_all()
        .map_err(|e| CkptError::WriteFailed(e.to_string()))?;
    Ok(file
        .metadata()
        .map_err(|e| CkptError::WriteFailed(e.to_string()))?
        .len())
}

pub fn load_image(path: &Path) -> Result<Image, CkptError> {
    let data = std::fs::read(path)?;
    if data.len() < 36 {
        return Err(CkptError::BadImage("file too short".into()));
    }
    let (body, tail) = data.split_at(data.len() - 4);
    let want = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != want {
        return Err(CkptError::CrcMismatch { section: "file" });
    }
    if body[0..4] != IMAGE_MAGIC {
        return Err(CkptError::BadImage("bad magic".into()));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CkptError::BadImage(format!("unknown format version {version}")));
    }
    let codec = Codec::from_u8(body[8]).ok_or_else(|| CkptError::BadImage("bad codec".into()))?;
    let mode = body[9];
    let page_size = u32::from_le_bytes(body[12..16].try_into().unwrap());
    let arena_capacity = u64::from_le_bytes(body[16..24].try_into().unwrap());
    let section_count = u32::from_le_bytes(body[24..28].try_into().unwrap()) as usize;

    let mut at = 32usize;
    let mut replay = None;
    let mut table: Vec<RegionEntry> = Vec::new();
    let mut app_state = Vec::new();
    let mut payloads: Vec<(u64, Vec<u8>)> = Vec::new(); // (raw_len, framed)
    for _ in 0..section_count {
        let h = SectionHeader::decode(&body[at..])
            .ok_or_else(|| CkptError::BadImage("truncated section header".into()))?;
        at += SectionHeader::BYTES;
        let enc = body
            .get(at..at + h.enc_len as usize)
            .ok_or_else(|| CkptError::BadImage("truncated section".into()))?;
        at += h.enc_len as usize;
        if crc32fast::hash(enc) != h.crc {
            return Err(CkptError::CrcMismatch { section: "section" });
        }
        match h.tag {
            SECTION_REPLAY => {
                replay = Some(
                    ReplayLog::decode(enc)
                        .ok_or_else(|| CkptError::BadImage("bad replay log".into()))?,
                );
            }
            SECTION_REGION_TABLE => {
                table = decode_region_table(enc)?;
            }
            SECTION_APP_STATE => app_state = enc.to_vec(),
            SECTION_REGION_PAYLOAD => payloads.push((h.raw_len, enc.to_vec())),
            t => return Err(CkptError::BadImage(format!("unknown section tag {t}"))),
        }
    }
    if payloads.len() != table.len() {
        return Err(CkptError::BadImage("payload/table count mismatch".into()));
    }
    let mut regions = Vec::with_capacity(table.len());
    for (entry, (raw_len, framed)) in table.into_iter().zip(payloads) {
        if raw_len != entry.len {
            return Err(CkptError::BadImage("table/payload length mismatch".into()));
        }
        let raw = deframe_payload(codec, &framed, raw_len as usize)?;
        regions.push((entry, raw));
    }
    Ok(Image {
        codec,
        mode,
        page_size,
        arena_capacity,
        replay: replay.ok_or_else(|| CkptError::BadImage("missing replay section".into()))?,
        regions,
        app_state,
    })
}

fn decode_region_table(buf: &[u8]) -> Result<Vec<RegionEntry>, CkptError> {
    let bad = || CkptError::BadImage("truncated region table".into());
    if buf.len() < 4 {
        return Err(bad());
    }
    let count = u32::from_le_bytes(buf[0..4].try_into().unwrap()) as usize;
    let mut at = 4usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let rec = buf.get(at..at + 25).ok_or_else(bad)?;
        at += 25;
        out.push(RegionEntry {
            id: u64::from_le_bytes(rec[0..8].try_into().unwrap()),
            kind: RegionKind::from_u8(rec[8]).ok_or_else(bad)?,
            len: u64::from_le_bytes(rec[9..17].try_into().unwrap()),
            shadow: u64::from_le_bytes(rec[17..25].try_into().unwrap()),
        });
    }
    if at != buf.len() {
        return Err(bad());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Restore.

/// Rebuilds a fresh session's proxy and shadow state from an image. The
/// session must not have made any state-creating calls yet.
pub fn restore_into(session: &mut Session, path: &Path) -> CrumResult<()> {
    let image = load_image(path)?;
    let core = session.core_mut();
    if !core.replay.ops.is_empty() {
        return Err(CrumError::RestoreFailed(
            "restore requires a fresh session".into(),
        ));
    }

    // Replay the state-creating calls, asserting each recorded result.
    for (i, op) in image.replay.ops.iter().enumerate() {
        replay_one(core, i, op)?;
    }
    core.replay = image.replay;

    // Push payloads: managed into shadows (created dirty), device via the
    // explicit-copy path.
    for (entry, data) in &image.regions {
        match entry.kind {
            RegionKind::Managed => {
                let shadow = core
                    .shadows
                    .region_by_id(entry.id)
                    .ok_or_else(|| {
                        CrumError::RestoreFailed(format!(
                            "region {} missing after replay",
                            entry.id
                        ))
                    })?
                    .shadow_base;
                unsafe {
                    std::ptr::copy_nonoverlapping(data.as_ptr(), shadow as *mut u8, data.len());
                }
            }
            RegionKind::Device => match core.bulk {
                BulkMode::SingleCopy => {
                    let addr = data.as_ptr() as u64;
                    let (id, len) = (entry.id, entry.len);
                    core.blocking_call(Opcode::MemcpyH2D, |w| {
                        w.u64(id).u64(0).u64(len).u64(addr);
                    })?;
                }
                BulkMode::Scratch => {
                    use crate::shadow::UvmTransport;
                    let addr = data.as_ptr() as usize;
                    core.transport()
                        .store(entry.id, 0, addr, data.len())
                        .map_err(CrumError::Wire)?;
                    core.transport().barrier().map_err(CrumError::Wire)?;
                }
            },
        }
    }
    // Managed payloads sit dirty in their shadows; send them to the real
    // regions so device and shadow agree.
    core.flush_dirty_now()?;
    core.app_state = image.app_state;
    core.state = SessionState::Running;
    Ok(())
}

fn replay_one(core: &mut SessionCore, index: usize, op: &ReplayOp) -> CrumResult<()> {
    let diverged = |what: &str, want: u64, got: u64| -> CrumError {
        CkptError::ReplayDivergence(format!(
            "record {index}: {what} expected {want}, got {got}"
        ))
        .into()
    };
    match *op {
        ReplayOp::MallocManaged {
            len,
            region,
            offset,
            shadow,
        } => {
            let reply = core
                .blocking_call(Opcode::Alloc, |w| {
                    w.u8(RegionKind::Managed as u8).u64(len);
                })
                .map_err(|e| match e {
                    CrumError::Device(code) => CkptError::ReplayDivergence(format!(
                        "record {index}: alloc failed with {code:?}"
                    ))
                    .into(),
                    other => other,
                })?;
            let mut r = PayloadReader::new(&reply.data[..reply.len]);
            let got_region = r.u64().ok_or(CrumError::Device(ErrCode::BadRequest))?;
            let got_offset = r.u64().ok_or(CrumError::Device(ErrCode::BadRequest))?;
            if got_region != region {
                return Err(diverged("region id", region, got_region));
            }
            if got_offset != offset {
                return Err(diverged("offset", offset, got_offset));
            }
            let got_shadow = core
                .shadows
                .create_shadow(region, len as usize, Some(shadow as usize))?;
            debug_assert_eq!(got_shadow as u64, shadow);
            Ok(())
        }
        ReplayOp::MallocDevice {
            len,
            region,
            offset,
        } => {
            let reply = core.blocking_call(Opcode::Alloc, |w| {
                w.u8(RegionKind::Device as u8).u64(len);
            })?;
            let mut r = PayloadReader::new(&reply.data[..reply.len]);
            let got_region = r.u64().ok_or(CrumError::Device(ErrCode::BadRequest))?;
            let got_offset = r.u64().ok_or(CrumError::Device(ErrCode::BadRequest))?;
            if got_region != region {
                return Err(diverged("region id", region, got_region));
            }
            if got_offset != offset {
                return Err(diverged("offset", offset, got_offset));
            }
            core.device_regions.insert(region, len);
            Ok(())
        }
        ReplayOp::Free { region } => {
            core.blocking_call(Opcode::Free, |w| {
                w.u64(region);
            })?;
            core.shadows.remove(region);
            core.device_regions.remove(&region);
            Ok(())
        }
        ReplayOp::StreamCreate { stream } => {
            let reply = core.blocking_call(Opcode::StreamCreate, |_| {})?;
            let got = PayloadReader::new(&reply.data[..reply.len])
                .u64()
                .ok_or(CrumError::Device(ErrCode::BadRequest))?;
            if got != stream {
                return Err(diverged("stream id", stream, got));
            }
            Ok(())
        }
        ReplayOp::StreamDestroy { stream } => {
            core.blocking_call(Opcode::StreamDestroy, |w| {
                w.u64(stream);
            })?;
            Ok(())
        }
        ReplayOp::EventCreate { event } => {
            let reply = core.blocking_call(Opcode::EventCreate, |_| {})?;
            let got = PayloadReader::new(&reply.data[..reply.len])
                .u64()
                .ok_or(CrumError::Device(ErrCode::BadRequest))?;
            if got != event {
                return Err(diverged("event id", event, got));
            }
            Ok(())
        }
    }
}
