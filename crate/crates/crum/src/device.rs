//! Deterministic simulation of an accelerator device.
//!
//! The device owns a byte arena carved up by a bump allocator, a registry of
//! named kernels, and stream/event bookkeeping. All of this state lives only
//! inside the proxy process; the application never maps the arena.
//!
//! Allocation is strictly bump-with-no-reuse so that replaying the same call
//! sequence always reproduces the same (region id, offset) pairs.

use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use crate::error::{DeviceError, DeviceResult};
#[cfg(test)]
use crate::error::ErrCode;

pub type RegionId = u64;
pub type StreamId = u64;
pub type EventId = u64;

pub const DEFAULT_ARENA_BYTES: usize = 256 * 1024 * 1024;
pub const DEVICE_PAGE: usize = 4096;

/// Names understood by the kernel registry.
pub const KERNELS: &[&str] = &["fill", "dot", "saxpy", "stencil3", "sleep_us"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum RegionKind {
    Device = 0,
    Managed = 1,
}

impl RegionKind {
    pub fn from_u8(v: u8) -> Option<RegionKind> {
        match v {
            0 => Some(RegionKind::Device),
            1 => Some(RegionKind::Managed),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Allocation {
    pub id: RegionId,
    pub kind: RegionKind,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
pub struct KernelTask {
    pub kernel_name: String,
    pub region_args: Vec<RegionId>,
    pub scalar_args: Vec<u64>,
    /// (blocks, threads); controls simulated work decomposition only.
    pub grid: (u32, u32),
}

#[derive(Debug, Clone, Default)]
pub struct EventState {
    pub recorded_on: Option<StreamId>,
    pub complete: bool,
}

// One device session per process: models the non-reentrant driver. A second
// initialization attempt in the same process fails permanently.
static PROCESS_SESSION_CLAIMED: AtomicBool = AtomicBool::new(false);

/// Claims the process-wide device session. Fails on the second call, no
/// matter what happened to the first session.
pub fn claim_process_session() -> DeviceResult<()> {
    if PROCESS_SESSION_CLAIMED.swap(true, Ordering::SeqCst) {
        Err(DeviceError::AlreadyInitialized)
    } else {
        Ok(())
    }
}

/// Initializes the device for this process.
pub fn device_init(arena_bytes: usize) -> DeviceResult<DeviceState> {
    claim_process_session()?;
    Ok(DeviceState::new(arena_bytes))
}

#[derive(Debug)]
pub struct DeviceState {
    arena: Vec<u8>,
    cursor: usize,
    next_region: RegionId,
    allocations: BTreeMap<RegionId, Allocation>,
    streams: BTreeMap<StreamId, VecDeque<KernelTask>>,
    next_stream: StreamId,
    events: BTreeMap<EventId, EventState>,
    next_event: EventId,
    session_epoch: u64,
}

impl DeviceState {
    /// Fresh device state, as a newly spawned proxy would see it. The
    /// process-level non-reentrancy guard lives in [`device_init`]; this
    /// constructor is for proxies and simulation harnesses that manage the
    /// session lifecycle themselves.
    pub fn new(arena_bytes: usize) -> DeviceState {
        DeviceState {
            arena: vec![0u8; arena_bytes],
            cursor: 0,
            next_region: 1,
            allocations: BTreeMap::new(),
            streams: BTreeMap::new(),
            next_stream: 1,
            events: BTreeMap::new(),
            next_event: 1,
            session_epoch: 1,
        }
    }

    pub fn session_epoch(&self) -> u64 {
        self.session_epoch
    }

    pub fn arena_capacity(&self) -> usize {
        self.arena.len()
    }

    /// Base address of the arena in this process. Published so the isolation
    /// check can assert the application never maps it.
    pub fn arena_base(&self) -> usize {
        self.arena.as_ptr() as usize
    }

    pub fn allocations(&self) -> impl Iterator<Item = &Allocation> {
        self.allocations.values()
    }

    pub fn allocation(&self, id: RegionId) -> DeviceResult<&Allocation> {
        self.allocations
            .get(&id)
            .ok_or(DeviceError::UnknownRegion(id))
    }

    pub fn stream_ids(&self) -> Vec<StreamId> {
        self.streams.keys().copied().collect()
    }

    pub fn event_ids(&self) -> Vec<EventId> {
        self.events.keys().copied().collect()
    }

    pub fn alloc(&mut self, kind: RegionKind, len: usize) -> DeviceResult<(RegionId, usize)> {
        if len == 0 {
            return Err(DeviceError::BadRequest("zero-length allocation".into()));
        }
        let aligned = len.div_ceil(DEVICE_PAGE) * DEVICE_PAGE;
        let remaining = self.arena.len() - self.cursor;
        if aligned > remaining {
            return Err(DeviceError::OutOfArena {
                requested: len,
                remaining,
            });
        }
        let id = self.next_region;
        let offset = self.cursor;
        self.next_region += 1;
        self.cursor += aligned;
        // Arena bytes at a fresh offset are always zero (never recycled).
        self.allocations.insert(
            id,
            Allocation {
                id,
                kind,
                offset,
                len,
            },
        );
        Ok((id, offset))
    }

    /// Removes the allocation. Arena space is not recycled, which keeps the
    /// offset sequence a pure function of the allocation call sequence.
    pub fn free(&mut self, id: RegionId) -> DeviceResult<()> {
        self.allocations
            .remove(&id)
            .map(|_| ())
            .ok_or(DeviceError::UnknownRegion(id))
    }

    pub fn region_bytes(&self, id: RegionId, offset: usize, len: usize) -> DeviceResult<&[u8]> {
        let alloc = self.allocation(id)?;
        if offset.checked_add(len).is_none_or(|end| end > alloc.len) {
            return Err(DeviceError::RangeOutOfBounds {
                offset,
                len,
                region_len: alloc.len,
            });
        }
        Ok(&self.arena[alloc.offset + offset..alloc.offset + offset + len])
    }

    pub fn region_bytes_mut(
        &mut self,
        id: RegionId,
        offset: usize,
        len: usize,
    ) -> DeviceResult<&mut [u8]> {
        let alloc = self.allocation(id)?.clone();
        if offset.checked_add(len).is_none_or(|end| end > alloc.len) {
            return Err(DeviceError::RangeOutOfBounds {
                offset,
                len,
                region_len: alloc.len,
            });
        }
        Ok(&mut self.arena[alloc.offset + offset..alloc.offset + offset + len])
    }

    pub fn stream_create(&mut self) -> StreamId {
        let id = self.next_stream;
        self.next_stream += 1;
        self.streams.insert(id, VecDeque::new());
        id
    }

    pub fn stream_destroy(&mut self, id: StreamId) -> DeviceResult<()> {
        self.streams
            .remove(&id)
            .map(|_| ())
            .ok_or(DeviceError::UnknownStream(id))
    }

    pub fn event_create(&mut self) -> EventId {
        let id = self.next_event;
        self.next_event += 1;
        self.events.insert(id, EventState::default());
        id
    }

    pub fn event_record(&mut self, event: EventId, stream: StreamId) -> DeviceResult<()> {
        let queue_empty = self
            .streams
            .get(&stream)
            .ok_or(DeviceError::UnknownStream(stream))?
            .is_empty();
        let ev = self
            .events
            .get_mut(&event)
            .ok_or(DeviceError::UnknownEvent(event))?;
        ev.recorded_on = Some(stream);
        ev.complete = queue_empty;
        Ok(())
    }

    pub fn event_query(&self, event: EventId) -> DeviceResult<bool> {
        self.events
            .get(&event)
            .map(|e| e.complete)
            .ok_or(DeviceError::UnknownEvent(event))
    }

    /// Appends a task to the stream FIFO. Execution is deferred until
    /// [`DeviceState::synchronize`].
    pub fn launch(&mut self, stream: StreamId, task: KernelTask) -> DeviceResult<()> {
        if !KERNELS.contains(&task.kernel_name.as_str()) {
            return Err(DeviceError::UnknownKernel(task.kernel_name));
        }
        if task.grid.0 == 0 || task.grid.1 == 0 {
            return Err(DeviceError::BadRequest("grid dimensions must be positive".into()));
        }
        self.streams
            .get_mut(&stream)
            .ok_or(DeviceError::UnknownStream(stream))?
            .push_back(task);
        Ok(())
    }

    /// Drains all stream FIFOs. Streams are visited in ascending id order,
    /// one task per stream per round, until all queues are empty. The first
    /// task failure aborts the drain and is reported with its stream and
    /// task index.
    pub fn synchronize(&mut self) -> DeviceResult<()> {
        let ids: Vec<StreamId> = self.streams.keys().copied().collect();
        let mut indices: BTreeMap<StreamId, usize> = ids.iter().map(|&s| (s, 0)).collect();
        loop {
            let mut progressed = false;
            for &sid in &ids {
                let task = match self.streams.get_mut(&sid) {
                    Some(q) => q.pop_front(),
                    None => None,
                };
                if let Some(task) = task {
                    progressed = true;
                    let index = indices[&sid];
                    *indices.get_mut(&sid).unwrap() += 1;
                    if let Err(e) = self.execute(&task) {
                        return Err(DeviceError::KernelExec {
                            stream: sid,
                            index,
                            cause: e.code(),
                        });
                    }
                }
            }
            if !progressed {
                break;
            }
        }
        for ev in self.events.values_mut() {
            if ev.recorded_on.is_some() {
                ev.complete = true;
            }
        }
        Ok(())
    }

    pub fn pending_tasks(&self) -> usize {
        self.streams.values().map(|q| q.len()).sum()
    }

    fn region_f32(&self, id: RegionId) -> DeviceResult<Vec<f32>> {
        let alloc = self.allocation(id)?;
        let bytes = &self.arena[alloc.offset..alloc.offset + alloc.len];
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn store_f32(&mut self, id: RegionId, values: &[f32]) -> DeviceResult<()> {
        let alloc = self.allocation(id)?.clone();
        for (i, v) in values.iter().enumerate() {
            let at = alloc.offset + i * 4;
            self.arena[at..at + 4].copy_from_slice(&v.to_le_bytes());
        }
        Ok(())
    }

    fn execute(&mut self, task: &KernelTask) -> DeviceResult<()> {
        exec_kernel(self, task)
    }
}

fn want_regions(task: &KernelTask, n: usize) -> DeviceResult<()> {
    if task.region_args.len() != n {
        return Err(DeviceError::BadRequest(format!(
            "kernel `{}` expects {} region args, got {}",
            task.kernel_name,
            n,
            task.region_args.len()
        )));
    }
    Ok(())
}

fn scalar_f32(task: &KernelTask, i: usize) -> DeviceResult<f32> {
    task.scalar_args
        .get(i)
        .map(|&bits| f32::from_bits(bits as u32))
        .ok_or_else(|| DeviceError::BadRequest("missing scalar argument".into()))
}

/// Executes one kernel against the arena. This is a pure function of
/// (arena snapshot, task): no hidden randomness, and `sleep_us` only burns
/// wall time.
pub fn exec_kernel(dev: &mut DeviceState, task: &KernelTask) -> DeviceResult<()> {
    match task.kernel_name.as_str() {
        "fill" => {
            want_regions(task, 1)?;
            let value = scalar_f32(task, 0)?;
            let len = dev.allocation(task.region_args[0])?.len;
            let lanes = len / 4;
            dev.store_f32(task.region_args[0], &vec![value; lanes])?;
            Ok(())
        }
        "dot" => {
            want_regions(task, 3)?;
            let a = dev.region_f32(task.region_args[0])?;
            let b = dev.region_f32(task.region_args[1])?;
            let n = a.len().min(b.len());
            let mut acc = 0.0f32;
            for i in 0..n {
                acc += a[i] * b[i];
            }
            let out = task.region_args[2];
            dev.allocation(out)?;
            let bytes = acc.to_le_bytes();
            dev.region_bytes_mut(out, 0, 4)?.copy_from_slice(&bytes);
            Ok(())
        }
        "saxpy" => {
            // y[i] += scale * x[i]
            want_regions(task, 2)?;
            let scale = scalar_f32(task, 0)?;
            let x = dev.region_f32(task.region_args[0])?;
            let mut y = dev.region_f32(task.region_args[1])?;
            let n = x.len().min(y.len());
            for i in 0..n {
                y[i] += scale * x[i];
            }
            dev.store_f32(task.region_args[1], &y)
        }
        "stencil3" => {
            // 3-point average over the region, using tmp as scratch.
            want_regions(task, 2)?;
            let src = dev.region_f32(task.region_args[0])?;
            dev.allocation(task.region_args[1])?;
            let n = src.len();
            let mut out = vec![0.0f32; n];
            for i in 0..n {
                let l = if i == 0 { src[0] } else { src[i - 1] };
                let r = if i + 1 == n { src[n - 1] } else { src[i + 1] };
                out[i] = (l + src[i] + r) / 3.0;
            }
            dev.store_f32(task.region_args[1], &out)?;
            dev.store_f32(task.region_args[0], &out)
        }
        "sleep_us" => {
            let us = task.scalar_args.first().copied().unwrap_or(0);
            let deadline = Instant::now() + Duration::from_micros(us);
            while Instant::now() < deadline {
                std::hint::spin_loop();
            }
            Ok(())
        }
        other => Err(DeviceError::UnknownKernel(other.to_string())),
    }
}
