//! The application-facing API. Every call is interposed here, forwarded to
//! the proxy over the pipelined channel, and — when it creates session state
//! — recorded in the replay log for restart.
//!
//! A session is confined to one thread. Shadow-page faults interrupt that
//! thread's compute code and are resolved by the signal layer at the bottom
//! of this module; by contract they never interrupt an in-progress API call.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::device::{RegionId, RegionKind, StreamId};
use crate::error::{CrumError, CrumResult, ErrCode, WireError};
use crate::shadow::{Access, Mode, ShadowConfig, ShadowCounters, ShadowTable, UvmTransport};
use crate::wire::bulk::BulkMode;
use crate::wire::payload::{LaunchArgs, Opcode, PayloadReader, PayloadWriter};
use crate::wire::ring::{CallSender, Reply, WaitClass};
use crate::wire::shm::{ShmHeader, SharedRegion, CKPT_PATH_MAX};
use crate::wire::DEFAULT_RING_SLOTS;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionState {
    Running,
    Quiesced,
    Detached,
}

impl SessionState {
    fn name(self) -> &'static str {
        match self {
            SessionState::Running => "RUNNING",
            SessionState::Quiesced => "QUIESCED",
            SessionState::Detached => "DETACHED",
        }
    }
}

/// One record of the replay log: a state-creating call together with the
/// result it produced, so a restart can verify deterministic re-creation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplayOp {
    MallocManaged {
        len: u64,
        region: RegionId,
        offset: u64,
        shadow: u64,
    },
    MallocDevice {
        len: u64,
        region: RegionId,
        offset: u64,
    },
    Free {
        region: RegionId,
    },
    StreamCreate {
        stream: StreamId,
    },
    StreamDestroy {
        stream: StreamId,
    },
    EventCreate {
        event: u64,
    },
}

#[derive(Debug, Clone, Default)]
pub struct ReplayLog {
    pub ops: Vec<ReplayOp>,
}

impl ReplayLog {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.ops.len() as u32).to_le_bytes());
        for op in &self.ops {
            match *op {
                ReplayOp::MallocManaged {
                    len,
                    region,
                    offset,
                    shadow,
                } => {
                    out.push(1);
                    for v in [len, region, offset, shadow] {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                ReplayOp::MallocDevice {
                    len,
                    region,
                    offset,
                } => {
                    out.push(2);
                    for v in [len, region, offset] {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                ReplayOp::Free { region } => {
                    out.push(3);
                    out.extend_from_slice(&region.to_le_bytes());
                }
                ReplayOp::StreamCreate { stream } => {
                    out.push(4);
                    out.extend_from_slice(&stream.to_le_bytes());
                }
                ReplayOp::StreamDestroy { stream } => {
                    out.push(5);
                    out.extend_from_slice(&stream.to_le_bytes());
                }
                ReplayOp::EventCreate { event } => {
                    out.push(6);
                    out.extend_from_slice(&event.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Option<ReplayLog> {
        let mut r = PayloadCursor { buf, at: 0 };
        let count = r.u32()? as usize;
        let mut ops = Vec::with_capacity(count);
        for _ in 0..count {
            let op = match r.u8()? {
                1 => ReplayOp::MallocManaged {
                    len: r.u64()?,
                    region: r.u64()?,
                    offset: r.u64()?,
                    shadow: r.u64()?,
                },
                2 => ReplayOp::MallocDevice {
                    len: r.u64()?,
                    region: r.u64()?,
                    offset: r.u64()?,
                },
                3 => ReplayOp::Free { region: r.u64()? },
                4 => ReplayOp::StreamCreate { stream: r.u64()? },
                5 => ReplayOp::StreamDestroy { stream: r.u64()? },
                6 => ReplayOp::EventCreate { event: r.u64()? },
                _ => return None,
            };
            ops.push(op);
        }
        (r.at == buf.len()).then_some(ReplayLog { ops })
    }
}

/// Like `PayloadReader` but over an unbounded byte slice.
struct PayloadCursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl PayloadCursor<'_> {
    fn u8(&mut self) -> Option<u8> {
        let v = *self.buf.get(self.at)?;
        self.at += 1;
        Some(v)
    }
    fn u32(&mut self) -> Option<u32> {
        let s = self.buf.get(self.at..self.at + 4)?;
        self.at += 4;
        Some(u32::from_le_bytes(s.try_into().unwrap()))
    }
    fn u64(&mut self) -> Option<u64> {
        let s = self.buf.get(self.at..self.at + 8)?;
        self.at += 8;
        Some(u64::from_le_bytes(s.try_into().unwrap()))
    }
}

/// Creation knobs, resolved from the environment by default.
#[derive(Clone)]
pub struct SessionOptions {
    pub depth: u32,
    pub shadow: ShadowConfig,
    pub bulk: BulkMode,
    /// Override of the shadow bump base, for multi-session test processes.
    pub shadow_base: Option<usize>,
}

impl SessionOptions {
    pub fn from_env() -> SessionOptions {
        SessionOptions {
            depth: std::env::var("CRUM_PIPELINE_DEPTH")
                .ok()
                .and_then(|v| v.parse().ok())
                .unwrap_or(DEFAULT_RING_SLOTS),
            shadow: ShadowConfig::from_env(),
            bulk: BulkMode::from_env(),
            shadow_base: None,
        }
    }
}

pub(crate) struct SessionCore {
    pub(crate) tx: CallSender,
    pub(crate) region: Arc<SharedRegion>,
    pub(crate) shadows: ShadowTable,
    pub(crate) replay: ReplayLog,
    pub(crate) state: SessionState,
    pub(crate) bulk: BulkMode,
    /// Live DEVICE-kind regions and their lengths (staged at checkpoint).
    pub(crate) device_regions: std::collections::BTreeMap<RegionId, u64>,
    pub(crate) app_state: Vec<u8>,
    pub(crate) pending_violation: Option<(RegionId, usize)>,
    pub(crate) forked_child: Option<crate::ckpt::PendingFork>,
    pub(crate) last_ckpt: Option<Result<crate::ckpt::CkptReport, u32>>,
    owner: libc::pthread_t,
}

/// Transport that routes shadow-page data through the call ring, so bulk
/// transfers stay ordered with pipelined kernel launches.
pub(crate) struct RingTransport<'a> {
    tx: &'a mut CallSender,
    region: &'a SharedRegion,
    mode: BulkMode,
}

impl RingTransport<'_> {
    fn blocking(&mut self, op: Opcode, w: &PayloadWriter) -> Result<Reply, WireError> {
        let seq = self.tx.send_call(op as u16, true, w.as_slice())?;
        self.tx.wait_reply(seq, WaitClass::Fine)
    }
}

impl UvmTransport for RingTransport<'_> {
    fn fetch(
        &mut self,
        region: RegionId,
        offset: usize,
        dst_addr: usize,
        len: usize,
    ) -> Result<(), WireError> {
        match self.mode {
            BulkMode::SingleCopy => {
                let mut w = PayloadWriter::new();
                w.u64(region).u64(offset as u64).u64(len as u64).u64(dst_addr as u64);
                let r = self.blocking(Opcode::UvmRead, &w)?;
                if r.status != 0 {
                    return Err(WireError::BulkIo(format!("fetch status {}", r.status)));
                }
            }
            BulkMode::Scratch => {
                let (scratch, cap) = self.region.scratch();
                let mut done = 0;
                while done < len {
                    let n = (len - done).min(cap);
                    let mut w = PayloadWriter::new();
                    w.u64(region)
                        .u64((offset + done) as u64)
                        .u64(n as u64)
                        .u64(0);
                    let r = self.blocking(Opcode::ScratchRead, &w)?;
                    if r.status != 0 {
                        return Err(WireError::BulkIo(format!("fetch status {}", r.status)));
                    }
                    unsafe {
                        std::ptr::copy_nonoverlapping(
                            scratch as *const u8,
                            (dst_addr + done) as *mut u8,
                            n,
                        );
                    }
                    done += n;
                }
            }
        }
        Ok(())
    }

    fn store(
        &mut self,
        region: RegionId,
        offset: usize,
        src_addr: usize,
        len: usize,
    ) -> Result<(), WireError> {
        match self.mode {
            BulkMode::SingleCopy => {
                // Pipelined: the proxy pulls the bytes when it reaches the
                // message; the pages stay stable until the barrier returns.
                let mut w = PayloadWriter::new();
                w.u64(region).u64(offset as u64).u64(len as u64).u64(src_addr as u64);
                self.tx.send_call(Opcode::UvmWrite as u16, false, w.as_slice())?;
            }
            BulkMode::Scratch => {
                // The scratch buffer is reused per transfer, so each chunk
                // must complete before the next is staged.
                let (scratch, cap) = self.region.scratch();
                let mut done = 0;
                while done < len {
                    let n = (len - done).min(cap);
                    unsafe {
                        std::ptr::copy_nonoverlapping(
                            (src_addr + done) as *const u8,
                            scratch,
                            n,
                        );
                    }
                    let mut w = PayloadWriter::new();
                    w.u64(region)
                        .u64((offset + done) as u64)
                        .u64(n as u64)
                        .u64(0);
                    let r = self.blocking(Opcode::ScratchWrite, &w)?;
                    if r.status != 0 {
                        return Err(WireError::BulkIo(format!("store status {}", r.status)));
                    }
                    done += n;
                }
            }
        }
        Ok(())
    }

    fn barrier(&mut self) -> Result<(), WireError> {
        self.tx.flush()
    }
}

impl SessionCore {
    pub(crate) fn header(&self) -> &ShmHeader {
        self.region.header()
    }

    pub(crate) fn transport(&mut self) -> RingTransport<'_> {
        RingTransport {
            tx: &mut self.tx,
            region: &self.region,
            mode: self.bulk,
        }
    }

    pub(crate) fn blocking_call(
        &mut self,
        op: Opcode,
        build: impl FnOnce(&mut PayloadWriter),
    ) -> CrumResult<Reply> {
        let mut w = PayloadWriter::new();
        build(&mut w);
        let class = if op == Opcode::Synchronize {
            WaitClass::Coarse
        } else {
            WaitClass::Fine
        };
        let seq = self.tx.send_call(op as u16, true, w.as_slice())?;
        let reply = self.tx.wait_reply(seq, class)?;
        if reply.status != 0 {
            return Err(CrumError::Device(ErrCode::from_u32(reply.status)));
        }
        Ok(reply)
    }

    pub(crate) fn flush_dirty_now(&mut self) -> CrumResult<usize> {
        // Borrow split: take the table out while the transport borrows tx.
        let mut shadows = std::mem::replace(
            &mut self.shadows,
            ShadowTable::with_base(ShadowConfig::from_env(), 0),
        );
        let result = shadows.flush_dirty(&mut self.transport());
        self.shadows = shadows;
        result
    }

    pub(crate) fn drain_now(&mut self) -> CrumResult<u64> {
        let mut shadows = std::mem::replace(
            &mut self.shadows,
            ShadowTable::with_base(ShadowConfig::from_env(), 0),
        );
        let result = shadows.drain_to_shadow(&mut self.transport());
        self.shadows = shadows;
        result
    }

    pub(crate) fn sync_now(&mut self) -> CrumResult<()> {
        self.blocking_call(Opcode::Synchronize, |_| {})?;
        Ok(())
    }

    /// Fault-handler entry: resolve or report. Returns false for faults
    /// that are not on shadow pages.
    fn on_fault(&mut self, addr: usize, write: bool) -> bool {
        let access = if write { Access::Write } else { Access::Read };
        let mut shadows = std::mem::replace(
            &mut self.shadows,
            ShadowTable::with_base(ShadowConfig::from_env(), 0),
        );
        let result = shadows.handle_fault(addr, access, &mut self.transport());
        self.shadows = shadows;
        match result {
            Ok(handled) => handled,
            Err(CrumError::CycleViolation { region, page }) => {
                if self.pending_violation.is_none() {
                    self.pending_violation = Some((region, page));
                }
                true
            }
            Err(e) => {
                // The proxy is unreachable mid-fault; there is no frame to
                // return an error to.
                let msg = format!("crum: fatal fault-time transport error: {e}\n");
                unsafe {
                    libc::write(2, msg.as_ptr() as *const libc::c_void, msg.len());
                    libc::_exit(3);
                }
            }
        }
    }
}

pub struct Session {
    core: Box<SessionCore>,
    registered: bool,
}

impl Session {
    /// Attaches to the launcher-provided shared region named by
    /// CRUM_SHM_NAME. Runs a restore first if CRUM_RESTART names an image.
    pub fn attach() -> CrumResult<Session> {
        let name = std::env::var("CRUM_SHM_NAME")
            .map_err(|_| CrumError::NoProxy)?;
        let region = Arc::new(SharedRegion::attach(&name).map_err(|e| match e {
            WireError::VersionMismatch { .. } => CrumError::Wire(e),
            _ => CrumError::NoProxy,
        })?);
        let mut session = Session::over_region(region, SessionOptions::from_env())?;
        if let Ok(image) = std::env::var("CRUM_RESTART") {
            crate::ckpt::restore_into(&mut session, std::path::Path::new(&image))?;
        }
        Ok(session)
    }

    /// Attaches over an already-mapped region (in-process harness, restore
    /// tooling).
    pub fn over_region(region: Arc<SharedRegion>, opts: SessionOptions) -> CrumResult<Session> {
        let h = region.header();
        h.app_pid.store(std::process::id(), Ordering::Release);
        crate::wire::bulk::allow_cross_memory_attach();
        let deadline = Instant::now() + Duration::from_secs(10);
        while h.proxy_ready.load(Ordering::Acquire) == 0 {
            if h.proxy_closed.load(Ordering::Acquire) != 0 || Instant::now() > deadline {
                return Err(CrumError::NoProxy);
            }
            std::thread::sleep(Duration::from_millis(1));
        }
        let shadows = match opts.shadow_base {
            Some(b) => ShadowTable::with_base(opts.shadow.clone(), b),
            None => ShadowTable::new(opts.shadow.clone()),
        };
        let core = Box::new(SessionCore {
            tx: CallSender::new(region.clone(), opts.depth),
            region,
            shadows,
            replay: ReplayLog::default(),
            state: SessionState::Running,
            bulk: opts.bulk,
            device_regions: Default::default(),
            app_state: Vec::new(),
            pending_violation: None,
            forked_child: None,
            last_ckpt: None,
            owner: unsafe { libc::pthread_self() },
        });
        let mut s = Session {
            core,
            registered: false,
        };
        signal::install_handler();
        signal::register(&mut *s.core);
        s.registered = true;
        Ok(s)
    }

    /// Guard run at every API entry: ownership, state, latched violations,
    /// and pending checkpoint requests from the launcher.
    fn pre_call(&mut self) -> CrumResult<()> {
        if unsafe { libc::pthread_self() } != self.core.owner {
            return Err(CrumError::WrongThread);
        }
        if self.core.state != SessionState::Running {
            return Err(CrumError::NotRunning(self.core.state.name()));
        }
        if let Some((region, page)) = self.core.pending_violation.take() {
            return Err(CrumError::CycleViolation { region, page });
        }
        self.poll_ckpt_mailbox();
        Ok(())
    }

    /// Services one launcher checkpoint request, if present, at this call
    /// boundary.
    fn poll_ckpt_mailbox(&mut self) {
        let h = self.core.region.header();
        let req = h.ckpt_req_seq.load(Ordering::Acquire);
        if req == h.ckpt_done_seq.load(Ordering::Acquire) {
            return;
        }
        h.ckpt_ack_seq.store(req, Ordering::Release);
        let strategy = crate::ckpt::Strategy::from_u32(h.ckpt_strategy.load(Ordering::Acquire));
        let path_len = (h.ckpt_path_len.load(Ordering::Acquire) as usize).min(CKPT_PATH_MAX);
        let path_bytes = unsafe {
            std::slice::from_raw_parts(h.ckpt_path.as_ptr(), path_len)
        };
        let path = std::path::PathBuf::from(String::from_utf8_lossy(path_bytes).into_owned());
        let result = match strategy {
            Some(s) => crate::ckpt::checkpoint(&mut self.core, &path, s),
            None => Err(crate::error::CkptError::BadImage("unknown strategy".into()).into()),
        };
        let h = self.core.region.header();
        match result {
            Ok(report) => {
                h.ckpt_status.store(0, Ordering::Release);
                h.ckpt_pause_us
                    .store(report.pause.as_micros() as u64, Ordering::Release);
                h.ckpt_total_us
                    .store(report.total.as_micros() as u64, Ordering::Release);
                h.ckpt_bytes.store(report.image_bytes, Ordering::Release);
            }
            Err(e) => {
                h.ckpt_status
                    .store(crate::ckpt::error_code(&e), Ordering::Release);
            }
        }
        h.ckpt_done_seq.store(req, Ordering::Release);
    }

    pub fn malloc_managed(&mut self, len: usize) -> CrumResult<usize> {
        self.pre_call()?;
        if len == 0 {
            return Err(CrumError::InvalidArg("zero-length allocation".into()));
        }
        let reply = self.core.blocking_call(Opcode::Alloc, |w| {
            w.u8(RegionKind::Managed as u8).u64(len as u64);
        })?;
        let mut r = PayloadReader::new(&reply.data[..reply.len]);
        let region = r.u64().ok_or(CrumError::Device(ErrCode::BadRequest))?;
        let offset = r.u64().ok_or(CrumError::Device(ErrCode::BadRequest))?;
        let shadow = self.core.shadows.create_shadow(region, len, None)?;
        self.core.replay.ops.push(ReplayOp::MallocManaged {
            len: len as u64,
            region,
            offset,
            shadow: shadow as u64,
        });
        Ok(shadow)
    }

    pub fn malloc_device(&mut self, len: usize) -> CrumResult<RegionId> {
        self.pre_call()?;
        if len == 0 {
            return Err(CrumError::InvalidArg("zero-length allocation".into()));
        }
        let reply = self.core.blocking_call(Opcode::Alloc, |w| {
            w.u8(RegionKind::Device as u8).u64(len as u64);
        })?;
        let mut r = PayloadReader::new(&reply.data[..reply.len]);
        let region = r.u64().ok_or(CrumError::Device(ErrCode::BadRequest))?;
        let offset = r.u64().ok_or(CrumError::Device(ErrCode::BadRequest))?;
        self.core.device_regions.insert(region, len as u64);
        self.core.replay.ops.push(ReplayOp::MallocDevice {
            len: len as u64,
            region,
            offset,
        });
        Ok(region)
    }

    pub fn free_managed(&mut self, shadow_addr: usize) -> CrumResult<()> {
        self.pre_call()?;
        let region = self.region_id(shadow_addr)?;
        self.core.blocking_call(Opcode::Free, |w| {
            w.u64(region);
        })?;
        self.core.shadows.remove(region);
        self.core.replay.ops.push(ReplayOp::Free { region });
        Ok(())
    }

    pub fn free_device(&mut self, region: RegionId) -> CrumResult<()> {
        self.pre_call()?;
        self.core.blocking_call(Opcode::Free, |w| {
            w.u64(region);
        })?;
        self.core.device_regions.remove(&region);
        self.core.replay.ops.push(ReplayOp::Free { region });
        Ok(())
    }

    /// RegionId backing the managed allocation that contains `shadow_addr`.
    pub fn region_id(&self, shadow_addr: usize) -> CrumResult<RegionId> {
        self.core
            .shadows
            .lookup(shadow_addr)
            .map(|r| r.real_region)
            .ok_or(CrumError::Device(ErrCode::UnknownRegion))
    }

    pub fn memcpy_h2d(&mut self, region: RegionId, offset: usize, src: &[u8]) -> CrumResult<()> {
        self.pre_call()?;
        self.device_copy(Opcode::MemcpyH2D, region, offset, src.as_ptr() as usize, src.len())
    }

    pub fn memcpy_d2h(
        &mut self,
        region: RegionId,
        offset: usize,
        dst: &mut [u8],
    ) -> CrumResult<()> {
        self.pre_call()?;
        let (addr, len) = (dst.as_mut_ptr() as usize, dst.len());
        self.device_copy(Opcode::MemcpyD2H, region, offset, addr, len)
    }

    fn device_copy(
        &mut self,
        op: Opcode,
        region: RegionId,
        offset: usize,
        host_addr: usize,
        len: usize,
    ) -> CrumResult<()> {
        if len == 0 {
            return Err(CrumError::InvalidArg("zero-length transfer".into()));
        }
        match self.core.bulk {
            BulkMode::SingleCopy => {
                self.core.blocking_call(op, |w| {
                    w.u64(region).u64(offset as u64).u64(len as u64).u64(host_addr as u64);
                })?;
                Ok(())
            }
            BulkMode::Scratch => {
                let mut t = self.core.transport();
                let r = if op == Opcode::MemcpyD2H {
                    t.fetch(region, offset, host_addr, len)
                } else {
                    t.store(region, offset, host_addr, len)
                };
                r?;
                Ok(())
            }
        }
    }

    pub fn stream_create(&mut self) -> CrumResult<StreamId> {
        self.pre_call()?;
        let reply = self.core.blocking_call(Opcode::StreamCreate, |_| {})?;
        let stream = PayloadReader::new(&reply.data[..reply.len])
            .u64()
            .ok_or(CrumError::Device(ErrCode::BadRequest))?;
        self.core.replay.ops.push(ReplayOp::StreamCreate { stream });
        Ok(stream)
    }

    pub fn stream_destroy(&mut self, stream: StreamId) -> CrumResult<()> {
        self.pre_call()?;
        self.core.blocking_call(Opcode::StreamDestroy, |w| {
            w.u64(stream);
        })?;
        self.core.replay.ops.push(ReplayOp::StreamDestroy { stream });
        Ok(())
    }

    pub fn event_create(&mut self) -> CrumResult<u64> {
        self.pre_call()?;
        let reply = self.core.blocking_call(Opcode::EventCreate, |_| {})?;
        let event = PayloadReader::new(&reply.data[..reply.len])
            .u64()
            .ok_or(CrumError::Device(ErrCode::BadRequest))?;
        self.core.replay.ops.push(ReplayOp::EventCreate { event });
        Ok(event)
    }

    /// Pipelined (non-blocking); errors surface at the next flush.
    pub fn event_record(&mut self, event: u64, stream: StreamId) -> CrumResult<()> {
        self.pre_call()?;
        let mut w = PayloadWriter::new();
        w.u64(event).u64(stream);
        self.core
            .tx
            .send_call(Opcode::EventRecord as u16, false, w.as_slice())?;
        Ok(())
    }

    pub fn event_query(&mut self, event: u64) -> CrumResult<bool> {
        self.pre_call()?;
        let reply = self.core.blocking_call(Opcode::EventQuery, |w| {
            w.u64(event);
        })?;
        Ok(reply.data[..reply.len].first().copied() == Some(1))
    }

    /// Pipelined kernel launch. Dirty shadow pages are flushed (and all
    /// regions re-protected) before the message is enqueued.
    pub fn launch(
        &mut self,
        stream: StreamId,
        kernel: &str,
        regions: &[RegionId],
        scalars: &[u64],
    ) -> CrumResult<()> {
        self.pre_call()?;
        self.core.flush_dirty_now()?;
        let mut w = PayloadWriter::new();
        LaunchArgs {
            stream,
            grid: (1, 1),
            kernel,
            regions,
            scalars,
        }
        .encode(&mut w);
        self.core
            .tx
            .send_call(Opcode::Launch as u16, false, w.as_slice())?;
        Ok(())
    }

    /// Blocking: flushes the pipeline and waits for the device to drain all
    /// stream FIFOs. Deferred errors from pipelined calls surface here.
    pub fn synchronize(&mut self) -> CrumResult<()> {
        self.pre_call()?;
        self.core.flush_dirty_now()?;
        self.core.sync_now()?;
        self.core.tx.take_deferred_error()?;
        Ok(())
    }

    /// Explicit checkpoint (the launcher-triggered path goes through the
    /// mailbox instead).
    pub fn checkpoint(
        &mut self,
        path: &std::path::Path,
        strategy: crate::ckpt::Strategy,
    ) -> CrumResult<crate::ckpt::CkptReport> {
        self.pre_call()?;
        crate::ckpt::checkpoint(&mut self.core, path, strategy)
    }

    pub fn ckpt_status(&mut self) -> crate::ckpt::CkptStatus {
        crate::ckpt::status(&mut self.core)
    }

    /// Blocks until any in-flight forked checkpoint child has finished.
    pub fn ckpt_wait(&mut self) -> crate::ckpt::CkptStatus {
        crate::ckpt::wait_completion(&mut self.core)
    }

    /// Opaque state the application wants carried in checkpoint images
    /// (e.g. its iteration counter).
    pub fn set_app_state(&mut self, blob: &[u8]) {
        self.core.app_state = blob.to_vec();
    }

    pub fn app_state(&self) -> &[u8] {
        &self.core.app_state
    }

    pub fn counters(&self) -> ShadowCounters {
        self.core.shadows.counters
    }

    pub fn mode(&self) -> Mode {
        self.core.shadows.config().mode
    }

    pub fn state(&self) -> SessionState {
        self.core.state
    }

    pub fn replay_log(&self) -> &ReplayLog {
        &self.core.replay
    }

    /// Debug assertion of the shadow invariants (acceptance harness hook).
    pub fn check_shadow_invariants(&self) -> Result<(), String> {
        self.core.shadows.check_invariants()
    }

    /// Deep digest of the proxy's observable state.
    pub fn proxy_digest(&mut self) -> CrumResult<crate::proxy::StateDigest> {
        self.pre_call()?;
        let reply = self.core.blocking_call(Opcode::StateDigest, |_| {})?;
        crate::proxy::StateDigest::decode(&mut PayloadReader::new(&reply.data[..reply.len]))
            .ok_or(CrumError::Device(ErrCode::BadRequest))
    }

    pub(crate) fn core_mut(&mut self) -> &mut SessionCore {
        &mut self.core
    }

    /// Graceful teardown: the proxy exits cleanly.
    pub fn shutdown(mut self) -> CrumResult<()> {
        self.pre_call()?;
        self.core.blocking_call(Opcode::Shutdown, |_| {})?;
        self.core.state = SessionState::Detached;
        Ok(())
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        if self.registered {
            signal::deregister(&mut *self.core);
        }
        self.core
            .region
            .header()
            .app_closed
            .store(1, Ordering::Release);
        self.core.shadows.clear_all();
    }
}

/// SIGSEGV plumbing: faults on shadow pages are routed to the owning
/// session; everything else falls through to default handling.
mod signal {
    use super::*;

    const MAX_SESSIONS: usize = 64;

    static LOCK: AtomicBool = AtomicBool::new(false);
    static mut REGISTRY: [*mut SessionCore; MAX_SESSIONS] = [std::ptr::null_mut(); MAX_SESSIONS];

    fn with_registry<R>(f: impl FnOnce(&mut [*mut SessionCore; MAX_SESSIONS]) -> R) -> R {
        while LOCK
            .compare_exchange(false, true, Ordering::Acquire, Ordering::Relaxed)
            .is_err()
        {
            unsafe { libc::sched_yield() };
        }
        let r = unsafe { f(&mut *(&raw mut REGISTRY)) };
        LOCK.store(false, Ordering::Release);
        r
    }

    pub(super) fn register(core: *mut SessionCore) {
        with_registry(|reg| {
            for slot in reg.iter_mut() {
                if slot.is_null() {
                    *slot = core;
                    return;
                }
            }
            panic!("too many live sessions in one process");
        });
    }

    pub(super) fn deregister(core: *mut SessionCore) {
        with_registry(|reg| {
            for slot in reg.iter_mut() {
                if *slot == core {
                    *slot = std::ptr::null_mut();
                }
            }
        });
    }

    pub(super) fn install_handler() {
        static ONCE: std::sync::Once = std::sync::Once::new();
        ONCE.call_once(|| unsafe {
            let mut sa: libc::sigaction = std::mem::zeroed();
            sa.sa_sigaction = handler
                as extern "C" fn(libc::c_int, *mut libc::siginfo_t, *mut libc::c_void)
                as usize;
            sa.sa_flags = libc::SA_SIGINFO;
            libc::sigemptyset(&mut sa.sa_mask);
            libc::sigaction(libc::SIGSEGV, &sa, std::ptr::null_mut());
        });
    }

    extern "C" fn handler(
        _sig: libc::c_int,
        info: *mut libc::siginfo_t,
        ctx: *mut libc::c_void,
    ) {
        let addr = unsafe { (*info).si_addr() } as usize;
        // x86_64 page-fault error code: bit 1 set for write access.
        let write = unsafe {
            let uc = &*(ctx as *const libc::ucontext_t);
            uc.uc_mcontext.gregs[libc::REG_ERR as usize] & 0x2 != 0
        };
        let me = unsafe { libc::pthread_self() };
        let core = with_registry(|reg| {
            for &slot in reg.iter() {
                if slot.is_null() {
                    continue;
                }
                let core = unsafe { &*slot };
                if core.owner == me && core.shadows.lookup(addr).is_some() {
                    return slot;
                }
            }
            std::ptr::null_mut()
        });
        let handled = !core.is_null() && unsafe { (*core).on_fault(addr, write) };
        if !handled {
            // Not a shadow fault: restore default disposition; the kernel
            // re-raises on instruction retry.
            unsafe {
                let mut sa: libc::sigaction = std::mem::zeroed();
                sa.sa_sigaction = libc::SIG_DFL;
                libc::sigaction(libc::SIGSEGV, &sa, std::ptr::null_mut());
            }
        }
    }
}
