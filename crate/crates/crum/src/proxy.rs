//! The proxy: a passive listener that owns the device session and executes
//! forwarded calls. Every proxy action is a response to exactly one call
//! message; the proxy never initiates traffic.

use std::sync::atomic::Ordering;
use std::sync::Arc;

use crate::device::{DeviceState, KernelTask, RegionKind};
use crate::error::{DeviceError, ErrCode};
use crate::wire::bulk::{allow_cross_memory_attach, cma_read, cma_write};
use crate::wire::payload::{LaunchArgs, Opcode, PayloadReader, PayloadWriter};
use crate::wire::ring::{CallReceiver, RawCall};
use crate::wire::shm::SharedRegion;
use crate::WireError;

/// Why the serve loop ended. Maps onto the proxy binary's exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitReason {
    /// Shutdown opcode received.
    Clean,
    /// Malformed opcode or undecodable arguments for a call that cannot be
    /// answered with an error status.
    Protocol,
    /// Channel torn down: the application vanished without a shutdown.
    TornDown,
}

pub struct Proxy {
    device: DeviceState,
    rx: CallReceiver,
    region: Arc<SharedRegion>,
}

impl Proxy {
    pub fn new(region: Arc<SharedRegion>, device: DeviceState) -> Proxy {
        let h = region.header();
        h.proxy_pid.store(std::process::id(), Ordering::Release);
        h.arena_base.store(device.arena_base() as u64, Ordering::Release);
        h.arena_len.store(device.arena_capacity() as u64, Ordering::Release);
        allow_cross_memory_attach();
        h.proxy_ready.store(1, Ordering::Release);
        Proxy {
            rx: CallReceiver::new(region.clone()),
            device,
            region,
        }
    }

    pub fn device(&self) -> &DeviceState {
        &self.device
    }

    /// Serves calls until shutdown or teardown.
    pub fn run(&mut self) -> ExitReason {
        let reason = loop {
            let call = match self.rx.recv_wait() {
                Ok(c) => c,
                Err(WireError::ChannelClosed) => break ExitReason::TornDown,
                Err(_) => break ExitReason::Protocol,
            };
            let Some(op) = Opcode::from_u16(call.opcode) else {
                self.rx.complete(&call, ErrCode::BadRequest as u32, &[]);
                break ExitReason::Protocol;
            };
            if op == Opcode::Shutdown {
                self.rx.complete(&call, 0, &[]);
                break ExitReason::Clean;
            }
            let (status, reply) = self.dispatch(op, &call);
            self.rx.complete(&call, status, reply.as_slice());
        };
        self.region
            .header()
            .proxy_closed
            .store(1, Ordering::Release);
        reason
    }

    fn app_pid(&self) -> i32 {
        self.region.header().app_pid.load(Ordering::Acquire) as i32
    }

    fn dispatch(&mut self, op: Opcode, call: &RawCall) -> (u32, PayloadWriter) {
        let mut reply = PayloadWriter::new();
        let mut args = PayloadReader::new(&call.payload);
        let status = match self.exec(op, &mut args, &mut reply) {
            Ok(()) => 0,
            Err(e) => e.code() as u32,
        };
        (status, reply)
    }

    fn exec(
        &mut self,
        op: Opcode,
        args: &mut PayloadReader<'_>,
        reply: &mut PayloadWriter,
    ) -> Result<(), DeviceError> {
        let bad = || DeviceError::BadRequest("truncated arguments".into());
        match op {
            Opcode::Nop | Opcode::Detach | Opcode::Attach => Ok(()),
            Opcode::Shutdown => unreachable!("handled by the loop"),
            Opcode::DeviceInfo => {
                reply
                    .u64(self.device.session_epoch())
                    .u64(self.device.arena_capacity() as u64)
                    .u64(self.device.arena_base() as u64)
                    .u64(crate::device::DEVICE_PAGE as u64);
                Ok(())
            }
            Opcode::Alloc => {
                let kind = RegionKind::from_u8(args.u8().ok_or_else(bad)?)
                    .ok_or_else(|| DeviceError::BadRequest("bad region kind".into()))?;
                let len = args.u64().ok_or_else(bad)? as usize;
                let (id, offset) = self.device.alloc(kind, len)?;
                let real = self.device.arena_base() + offset;
                reply.u64(id).u64(offset as u64).u64(real as u64);
                Ok(())
            }
            Opcode::Free => self.device.free(args.u64().ok_or_else(bad)?),
            Opcode::StreamCreate => {
                reply.u64(self.device.stream_create());
                Ok(())
            }
            Opcode::StreamDestroy => self.device.stream_destroy(args.u64().ok_or_else(bad)?),
            Opcode::EventCreate => {
                reply.u64(self.device.event_create());
                Ok(())
            }
            Opcode::EventRecord => {
                let ev = args.u64().ok_or_else(bad)?;
                let stream = args.u64().ok_or_else(bad)?;
                self.device.event_record(ev, stream)
            }
            Opcode::EventQuery => {
                let complete = self.device.event_query(args.u64().ok_or_else(bad)?)?;
                reply.u8(complete as u8);
                Ok(())
            }
            Opcode::Launch => {
                let (stream, grid, name, regions, scalars) =
                    LaunchArgs::decode(args).ok_or_else(bad)?;
                self.device.launch(
                    stream,
                    KernelTask {
                        kernel_name: name.to_string(),
                        region_args: regions,
                        scalar_args: scalars,
                        grid,
                    },
                )
            }
            Opcode::Synchronize => self.device.synchronize(),
            Opcode::UvmRead | Opcode::MemcpyD2H => {
                let (id, offset, len, app_addr) = self.xfer_args(args)?;
                self.check_kind(id, op == Opcode::UvmRead)?;
                let src = self.device.region_bytes(id, offset, len)?;
                cma_write(self.app_pid(), app_addr, src)
                    .map_err(|e| DeviceError::BadRequest(format!("bulk: {e}")))
            }
            Opcode::UvmWrite | Opcode::MemcpyH2D => {
                let (id, offset, len, app_addr) = self.xfer_args(args)?;
                self.check_kind(id, op == Opcode::UvmWrite)?;
                let pid = self.app_pid();
                let dst = self.device.region_bytes_mut(id, offset, len)?;
                cma_read(pid, app_addr, dst)
                    .map_err(|e| DeviceError::BadRequest(format!("bulk: {e}")))
            }
            Opcode::ScratchRead => {
                let (id, offset, len, _) = self.xfer_args(args)?;
                let (scratch, scratch_len) = self.region.scratch();
                if len > scratch_len {
                    return Err(DeviceError::BadRequest("scratch overflow".into()));
                }
                let src = self.device.region_bytes(id, offset, len)?;
                unsafe { std::ptr::copy_nonoverlapping(src.as_ptr(), scratch, len) };
                Ok(())
            }
            Opcode::ScratchWrite => {
                let (id, offset, len, _) = self.xfer_args(args)?;
                let (scratch, scratch_len) = self.region.scratch();
                if len > scratch_len {
                    return Err(DeviceError::BadRequest("scratch overflow".into()));
                }
                let dst = self.device.region_bytes_mut(id, offset, len)?;
                unsafe { std::ptr::copy_nonoverlapping(scratch as *const u8, dst.as_mut_ptr(), len) };
                Ok(())
            }
            Opcode::RegionCrc => {
                let id = args.u64().ok_or_else(bad)?;
                let alloc = self.device.allocation(id)?;
                let len = alloc.len;
                let bytes = self.device.region_bytes(id, 0, len)?;
                reply.u32(crc32fast::hash(bytes));
                Ok(())
            }
            Opcode::StateDigest => {
                // Optional flag byte: 0 skips the live-data CRC, which walks
                // every allocated byte and is too expensive inside a
                // checkpoint pause. Absent or nonzero means full digest.
                let with_data = args.u8().map(|b| b != 0).unwrap_or(true);
                let d = state_digest_with(&self.device, with_data);
                d.encode(reply);
                Ok(())
            }
        }
    }

    fn xfer_args(
        &mut self,
        args: &mut PayloadReader<'_>,
    ) -> Result<(u64, usize, usize, usize), DeviceError> {
        let bad = || DeviceError::BadRequest("truncated arguments".into());
        let id = args.u64().ok_or_else(bad)?;
        let offset = args.u64().ok_or_else(bad)? as usize;
        let len = args.u64().ok_or_else(bad)? as usize;
        let app_addr = args.u64().ok_or_else(bad)? as usize;
        Ok((id, offset, len, app_addr))
    }

    fn check_kind(&self, id: u64, want_managed: bool) -> Result<(), DeviceError> {
        let alloc = self.device.allocation(id)?;
        let ok = match alloc.kind {
            RegionKind::Managed => want_managed,
            RegionKind::Device => !want_managed,
        };
        if ok {
            Ok(())
        } else {
            Err(DeviceError::BadRequest(
                "region kind does not match transfer opcode".into(),
            ))
        }
    }
}

/// A digest of the proxy's full observable state: allocation table, stream
/// and event tables, and the contents of live regions. Two proxies with
/// equal digests are indistinguishable to the application.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateDigest {
    pub epoch: u64,
    pub alloc_count: u64,
    pub alloc_table_crc: u32,
    pub stream_count: u64,
    pub stream_ids_crc: u32,
    pub event_count: u64,
    pub live_bytes: u64,
    pub live_data_crc: u32,
    pub pending_tasks: u64,
    /// Always zero in this device model; asserted at checkpoint time.
    pub device_side_allocs: u64,
}

impl StateDigest {
    pub fn encode(&self, w: &mut PayloadWriter) {
        w.u64(self.epoch)
            .u64(self.alloc_count)
            .u32(self.alloc_table_crc)
            .u64(self.stream_count)
            .u32(self.stream_ids_crc)
            .u64(self.event_count)
            .u64(self.live_bytes)
            .u32(self.live_data_crc)
            .u64(self.pending_tasks)
            .u64(self.device_side_allocs);
    }

    pub fn decode(r: &mut PayloadReader<'_>) -> Option<StateDigest> {
        Some(StateDigest {
            epoch: r.u64()?,
            alloc_count: r.u64()?,
            alloc_table_crc: r.u32()?,
            stream_count: r.u64()?,
            stream_ids_crc: r.u32()?,
            event_count: r.u64()?,
            live_bytes: r.u64()?,
            live_data_crc: r.u32()?,
            pending_tasks: r.u64()?,
            device_side_allocs: r.u64()?,
        })
    }
}

pub fn state_digest(device: &DeviceState) -> StateDigest {
    state_digest_with(device, true)
}

pub fn state_digest_with(device: &DeviceState, with_data: bool) -> StateDigest {
    let mut table = crc32fast::Hasher::new();
    let mut data = crc32fast::Hasher::new();
    let mut count = 0u64;
    let mut live_bytes = 0u64;
    for alloc in device.allocations() {
        count += 1;
        table.update(&alloc.id.to_le_bytes());
        table.update(&[alloc.kind as u8]);
        table.update(&alloc.offset.to_le_bytes());
        table.update(&alloc.len.to_le_bytes());
        live_bytes += alloc.len as u64;
        if with_data {
            data.update(device.region_bytes(alloc.id, 0, alloc.len).unwrap());
        }
    }
    let streams = device.stream_ids();
    let mut scrc = crc32fast::Hasher::new();
    for s in &streams {
        scrc.update(&s.to_le_bytes());
    }
    StateDigest {
        epoch: device.session_epoch(),
        alloc_count: count,
        alloc_table_crc: table.finalize(),
        stream_count: streams.len() as u64,
        stream_ids_crc: scrc.finalize(),
        event_count: device.event_ids().len() as u64,
        live_bytes,
        live_data_crc: data.finalize(),
        pending_tasks: device.pending_tasks() as u64,
        device_side_allocs: 0,
    }
}
