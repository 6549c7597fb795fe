//! Opcodes and inline-payload argument encoding.
//!
//! Arguments are packed little-endian into the 240-byte inline area of a
//! ring slot. The writer and reader are allocation-free so they can be used
//! from the shadow-page fault handler.
//!
//! Per-opcode layouts (all integers little-endian):
//!
//! - `Alloc`:        kind u8, len u64 → reply: region u64, offset u64, real_addr u64
//! - `Free`:         region u64
//! - `StreamCreate`: — → reply: stream u64
//! - `StreamDestroy`:stream u64
//! - `EventCreate`:  — → reply: event u64
//! - `EventRecord`:  event u64, stream u64
//! - `EventQuery`:   event u64 → reply: complete u8
//! - `Launch`:       stream u64, grid u32×2, name (u8 len + bytes),
//!                   regions (u8 count + u64s), scalars (u8 count + u64s)
//! - `Synchronize`:  —
//! - `UvmRead`/`UvmWrite`/`MemcpyD2H`/`MemcpyH2D`:
//!                   region u64, offset u64, len u64, app_addr u64
//! - `ScratchRead`/`ScratchWrite`:
//!                   region u64, offset u64, len u64 (len ≤ scratch size)
//! - `RegionCrc`:    region u64 → reply: crc u32
//! - `DeviceInfo`:   — → reply: epoch u64, capacity u64, arena_base u64,
//!                   cursor u64
//! - `StateDigest`:  — → reply: see `proxy::state_digest`

use crate::wire::shm::INLINE_PAYLOAD;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum Opcode {
    Nop = 0,
    Shutdown = 1,
    DeviceInfo = 2,
    Alloc = 3,
    Free = 4,
    StreamCreate = 5,
    StreamDestroy = 6,
    EventCreate = 7,
    EventRecord = 8,
    EventQuery = 9,
    Launch = 10,
    Synchronize = 11,
    UvmRead = 12,
    UvmWrite = 13,
    MemcpyH2D = 14,
    MemcpyD2H = 15,
    ScratchRead = 16,
    ScratchWrite = 17,
    RegionCrc = 18,
    StateDigest = 19,
    Detach = 20,
    Attach = 21,
}

impl Opcode {
    pub fn from_u16(v: u16) -> Option<Opcode> {
        use Opcode::*;
        Some(match v {
            0 => Nop,
            1 => Shutdown,
            2 => DeviceInfo,
            3 => Alloc,
            4 => Free,
            5 => StreamCreate,
            6 => StreamDestroy,
            7 => EventCreate,
            8 => EventRecord,
            9 => EventQuery,
            10 => Launch,
            11 => Synchronize,
            12 => UvmRead,
            13 => UvmWrite,
            14 => MemcpyH2D,
            15 => MemcpyD2H,
            16 => ScratchRead,
            17 => ScratchWrite,
            18 => RegionCrc,
            19 => StateDigest,
            20 => Detach,
            21 => Attach,
            _ => return None,
        })
    }
}

/// Fixed-buffer argument writer.
pub struct PayloadWriter {
    buf: [u8; INLINE_PAYLOAD],
    at: usize,
}

impl Default for PayloadWriter {
    fn default() -> Self {
        Self::new()
    }
}

impl PayloadWriter {
    pub fn new() -> PayloadWriter {
        PayloadWriter {
            buf: [0; INLINE_PAYLOAD],
            at: 0,
        }
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf[self.at] = v;
        self.at += 1;
        self
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }

    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.buf[self.at..self.at + v.len()].copy_from_slice(v);
        self.at += v.len();
        self
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.buf[..self.at]
    }
}

/// Fixed-buffer argument reader. Out-of-bounds reads yield `None`, which the
/// proxy maps to a bad-request status.
pub struct PayloadReader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> PayloadReader<'a> {
    pub fn new(buf: &'a [u8]) -> PayloadReader<'a> {
        PayloadReader { buf, at: 0 }
    }

    pub fn u8(&mut self) -> Option<u8> {
        let v = *self.buf.get(self.at)?;
        self.at += 1;
        Some(v)
    }

    pub fn u16(&mut self) -> Option<u16> {
        Some(u16::from_le_bytes(self.take::<2>()?))
    }

    pub fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take::<4>()?))
    }

    pub fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take::<8>()?))
    }

    pub fn bytes(&mut self, len: usize) -> Option<&'a [u8]> {
        if self.at + len > self.buf.len() {
            return None;
        }
        let s = &self.buf[self.at..self.at + len];
        self.at += len;
        Some(s)
    }

    fn take<const N: usize>(&mut self) -> Option<[u8; N]> {
        let s = self.bytes(N)?;
        let mut out = [0u8; N];
        out.copy_from_slice(s);
        Some(out)
    }
}

pub const MAX_KERNEL_NAME: usize = 32;
pub const MAX_LAUNCH_ARGS: usize = 8;

/// Encoded form of a kernel launch, bounded to fit the inline payload.
pub struct LaunchArgs<'a> {
    pub stream: u64,
    pub grid: (u32, u32),
    pub kernel: &'a str,
    pub regions: &'a [u64],
    pub scalars: &'a [u64],
}

impl<'a> LaunchArgs<'a> {
    pub fn encode(&self, w: &mut PayloadWriter) {
        debug_assert!(self.kernel.len() <= MAX_KERNEL_NAME);
        debug_assert!(self.regions.len() <= MAX_LAUNCH_ARGS);
        debug_assert!(self.scalars.len() <= MAX_LAUNCH_ARGS);
        w.u64(self.stream);
        w.u32(self.grid.0).u32(self.grid.1);
        w.u8(self.kernel.len() as u8).bytes(self.kernel.as_bytes());
        w.u8(self.regions.len() as u8);
        for &r in self.regions {
            w.u64(r);
        }
        w.u8(self.scalars.len() as u8);
        for &s in self.scalars {
            w.u64(s);
        }
    }

    pub fn decode(r: &mut PayloadReader<'a>) -> Option<(u64, (u32, u32), &'a str, Vec<u64>, Vec<u64>)> {
        let stream = r.u64()?;
        let grid = (r.u32()?, r.u32()?);
        let name_len = r.u8()? as usize;
        if name_len > MAX_KERNEL_NAME {
            return None;
        }
        let name = std::str::from_utf8(r.bytes(name_len)?).ok()?;
        let nr = r.u8()? as usize;
        if nr > MAX_LAUNCH_ARGS {
            return None;
        }
        let mut regions = Vec::with_capacity(nr);
        for _ in 0..nr {
            regions.push(r.u64()?);
        }
        let ns = r.u8()? as usize;
        if ns > MAX_LAUNCH_ARGS {
            return None;
        }
        let mut scalars = Vec::with_capacity(ns);
        for _ in 0..ns {
            scalars.push(r.u64()?);
        }
        Some((stream, grid, name, regions, scalars))
    }
}
