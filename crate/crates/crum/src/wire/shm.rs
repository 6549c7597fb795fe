//! Layout and lifecycle of the shared control region.
//!
//! The region holds a layout version byte at offset 0, the ring indices and
//! slots, a single reply slot, a sticky deferred-error latch, the checkpoint
//! request mailbox used by the launcher, and the scratch buffer for the
//! two-copy bulk fallback.

use std::ffi::CString;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};

use crate::error::{WireError, WireResult};

pub const LAYOUT_VERSION: u8 = 1;
pub const SHM_MAGIC: u32 = 0x4d55_5243; // "CRUM"
pub const INLINE_PAYLOAD: usize = 240;
pub const CKPT_PATH_MAX: usize = 512;

/// One ring slot. Written in full by the producer before the head index is
/// advanced, so no per-field atomicity is needed.
#[repr(C)]
#[derive(Clone, Copy)]
pub struct Slot {
    pub seq: u64,
    pub opcode: u16,
    pub blocking: u8,
    pub _pad: [u8; 5],
    pub bulk_len: u64,
    pub payload: [u8; INLINE_PAYLOAD],
}

impl Slot {
    pub const fn zeroed() -> Slot {
        Slot {
            seq: 0,
            opcode: 0,
            blocking: 0,
            _pad: [0; 5],
            bulk_len: 0,
            payload: [0; INLINE_PAYLOAD],
        }
    }
}

#[repr(C)]
pub struct ShmHeader {
    pub version: u8, // must stay at offset 0
    pub _pad0: [u8; 3],
    pub magic: u32,
    pub ring_slots: u32,
    pub scratch_bytes: u32,

    pub app_pid: AtomicU32,
    pub proxy_pid: AtomicU32,
    pub proxy_ready: AtomicU32,
    pub proxy_closed: AtomicU32,
    pub app_closed: AtomicU32,
    pub _pad1: u32,

    /// Count of messages published by the producer.
    pub head: AtomicU64,
    /// Count of messages consumed and replied to by the proxy.
    pub tail: AtomicU64,
    pub requests_seen: AtomicU64,
    pub replies_written: AtomicU64,

    // Single reply slot; the producer is single-threaded per session so one
    // outstanding reply wait suffices. Ordered by the release store of
    // `reply_seq`.
    pub reply_status: AtomicU32,
    pub reply_len: AtomicU32,
    pub reply_seq: AtomicU64,
    pub reply_data: [u8; INLINE_PAYLOAD],

    // First deferred (non-blocking) call error since the last flush.
    pub err_valid: AtomicU32,
    pub err_opcode: AtomicU32,
    pub err_status: AtomicU32,
    pub _pad2: u32,
    pub err_seq: AtomicU64,

    // Checkpoint request mailbox: launcher writes a request, the client
    // picks it up at its next API call boundary and posts the result.
    pub ckpt_req_seq: AtomicU64,
    pub ckpt_ack_seq: AtomicU64,
    pub ckpt_done_seq: AtomicU64,
    pub ckpt_strategy: AtomicU32,
    pub ckpt_status: AtomicU32,
    pub ckpt_pause_us: AtomicU64,
    pub ckpt_total_us: AtomicU64,
    pub ckpt_bytes: AtomicU64,
    pub ckpt_path_len: AtomicU32,
    pub _pad3: u32,
    pub ckpt_path: [u8; CKPT_PATH_MAX],

    // Published by the proxy so the isolation check can assert the
    // application never maps the arena.
    pub arena_base: AtomicU64,
    pub arena_len: AtomicU64,
}

fn region_len(ring_slots: u32, scratch_bytes: u32) -> usize {
    std::mem::size_of::<ShmHeader>()
        + ring_slots as usize * std::mem::size_of::<Slot>()
        + scratch_bytes as usize
}

/// A mapped shared control region. The creator unlinks the backing object on
/// drop; attachers only unmap.
pub struct SharedRegion {
    base: *mut u8,
    len: usize,
    name: String,
    owner: bool,
}

// The region is plain shared memory coordinated through atomics; references
// handed out are to Sync data.
unsafe impl Send for SharedRegion {}
unsafe impl Sync for SharedRegion {}

impl SharedRegion {
    pub fn create(name: &str, ring_slots: u32, scratch_bytes: u32) -> WireResult<SharedRegion> {
        assert!(ring_slots.is_power_of_two(), "ring slots must be a power of two");
        let len = region_len(ring_slots, scratch_bytes);
        let base = unsafe { map_shm(name, len, true)? };
        let region = SharedRegion {
            base,
            len,
            name: name.to_string(),
            owner: true,
        };
        let h = region.header();
        // Fields start zeroed (fresh shm object is zero-filled).
        unsafe {
            let hm = region.base as *mut ShmHeader;
            (*hm).magic = SHM_MAGIC;
            (*hm).ring_slots = ring_slots;
            (*hm).scratch_bytes = scratch_bytes;
            (*hm).version = LAYOUT_VERSION;
        }
        h.head.store(0, Ordering::SeqCst);
        Ok(region)
    }

    pub fn attach(name: &str) -> WireResult<SharedRegion> {
        // Map the header first to learn the geometry.
        let hdr_len = std::mem::size_of::<ShmHeader>();
        let probe = unsafe { map_shm(name, hdr_len, false)? };
        let (version, ring_slots, scratch_bytes) = unsafe {
            let h = &*(probe as *const ShmHeader);
            (h.version, h.ring_slots, h.scratch_bytes)
        };
        unsafe { libc::munmap(probe as *mut libc::c_void, hdr_len) };
        if version != LAYOUT_VERSION {
            return Err(WireError::VersionMismatch {
                ours: LAYOUT_VERSION,
                theirs: version,
            });
        }
        let len = region_len(ring_slots, scratch_bytes);
        let base = unsafe { map_shm(name, len, false)? };
        Ok(SharedRegion {
            base,
            len,
            name: name.to_string(),
            owner: false,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn header(&self) -> &ShmHeader {
        unsafe { &*(self.base as *const ShmHeader) }
    }

    pub fn ring_slots(&self) -> u32 {
        self.header().ring_slots
    }

    pub(crate) fn slot_ptr(&self, index: u64) -> *mut Slot {
        let slots = self.header().ring_slots as u64;
        debug_assert!(slots.is_power_of_two());
        let i = (index & (slots - 1)) as usize;
        unsafe {
            (self.base.add(std::mem::size_of::<ShmHeader>()) as *mut Slot).add(i)
        }
    }

    pub fn scratch(&self) -> (*mut u8, usize) {
        let off = std::mem::size_of::<ShmHeader>()
            + self.header().ring_slots as usize * std::mem::size_of::<Slot>();
        (unsafe { self.base.add(off) }, self.header().scratch_bytes as usize)
    }
}

impl Drop for SharedRegion {
    fn drop(&mut self) {
        unsafe {
            libc::munmap(self.base as *mut libc::c_void, self.len);
        }
        if self.owner {
            if let Ok(cname) = CString::new(self.name.clone()) {
                unsafe { libc::shm_unlink(cname.as_ptr()) };
            }
        }
    }
}

unsafe fn map_shm(name: &str, len: usize, create: bool) -> WireResult<*mut u8> {
    let cname = CString::new(name).map_err(|_| WireError::Setup("bad shm name".into()))?;
    let mut flags = libc::O_RDWR;
    if create {
        flags |= libc::O_CREAT | libc::O_EXCL;
    }
    let fd = libc::shm_open(cname.as_ptr(), flags, 0o600);
    if fd < 0 {
        return Err(WireError::Setup(format!(
            "shm_open({name}): {}",
            std::io::Error::last_os_error()
        )));
    }
    if create && libc::ftruncate(fd, len as libc::off_t) != 0 {
        let e = std::io::Error::last_os_error();
        libc::close(fd);
        libc::shm_unlink(cname.as_ptr());
        return Err(WireError::Setup(format!("ftruncate({name}): {e}")));
    }
    let p = libc::mmap(
        std::ptr::null_mut(),
        len,
        libc::PROT_READ | libc::PROT_WRITE,
        libc::MAP_SHARED,
        fd,
        0,
    );
    libc::close(fd);
    if p == libc::MAP_FAILED {
        return Err(WireError::Setup(format!(
            "mmap({name}): {}",
            std::io::Error::last_os_error()
        )));
    }
    Ok(p as *mut u8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn create_attach_roundtrip_and_version_check() {
        let name = format!("/crum-test-shm-{}", std::process::id());
        let r = SharedRegion::create(&name, 64, 4096).unwrap();
        r.header().app_pid.store(42, Ordering::SeqCst);
        let r2 = SharedRegion::attach(&name).unwrap();
        assert_eq!(r2.header().app_pid.load(Ordering::SeqCst), 42);
        assert_eq!(r2.ring_slots(), 64);

        // Corrupt the version byte; a new attach must refuse.
        unsafe {
            let hm = r.base as *mut ShmHeader;
            (*hm).version = 99;
        }
        match SharedRegion::attach(&name) {
            Err(WireError::VersionMismatch { theirs: 99, .. }) => {}
            Err(other) => panic!("expected version mismatch, got {other:?}"),
            Ok(_) => panic!("attach must refuse a mismatched version"),
        }
    }

    #[test]
    fn version_byte_is_at_offset_zero() {
        assert_eq!(std::mem::offset_of!(ShmHeader, version), 0);
    }
}
