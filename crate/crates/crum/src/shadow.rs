//! Shadow-page synchronization: application-side mirrors of the proxy's
//! real managed regions, kept in sync through page-protection faults.
//!
//! Each region cycles through three phases. After a device-visible call it
//! is PROTECTED (no access). The first read fault enters READ_PHASE: pages
//! are fetched from the proxy and granted read-only, with the fetch window
//! doubling on each fault. The first write fault enters WRITE_PHASE: pages
//! are granted read-write and tracked in a dirty bitmap. The next device
//! call flushes dirty pages back to the real region and re-protects.
//!
//! This module is a pure state machine over an abstract [`UvmTransport`];
//! the SIGSEGV plumbing that drives it lives in the client.

use std::collections::BTreeMap;

use crate::device::RegionId;
use crate::error::{CrumError, WireError};

pub const SHADOW_BASE: usize = 0x7d00_0000_0000;
pub const DEFAULT_SMALL_REGION_PAGES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Protected,
    ReadPhase,
    WritePhase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Normal,
    Verified,
}

/// Moves bytes between shadow pages and the corresponding real region on
/// the proxy. Implementations must be safe to call from the fault handler:
/// no allocation, no locks shared with interrupted code.
pub trait UvmTransport {
    /// Blocking: copy `len` real-region bytes at `offset` into application
    /// memory at `dst_addr`. Data must be present when this returns.
    fn fetch(&mut self, region: RegionId, offset: usize, dst_addr: usize, len: usize)
        -> Result<(), WireError>;
    /// Send `len` bytes at `src_addr` to the real region at `offset`. May be
    /// pipelined; [`UvmTransport::barrier`] awaits completion.
    fn store(&mut self, region: RegionId, offset: usize, src_addr: usize, len: usize)
        -> Result<(), WireError>;
    /// Completion barrier for previously issued stores.
    fn barrier(&mut self) -> Result<(), WireError>;
}

/// Dense page bitmap.
#[derive(Debug, Clone)]
pub struct Bitmap {
    words: Vec<u64>,
    len: usize,
    set_count: usize,
}

impl Bitmap {
    pub fn new(len: usize) -> Bitmap {
        Bitmap {
            words: vec![0; len.div_ceil(64)],
            len,
            set_count: 0,
        }
    }

    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        self.words[i / 64] & (1 << (i % 64)) != 0
    }

    pub fn set(&mut self, i: usize) {
        debug_assert!(i < self.len);
        let w = &mut self.words[i / 64];
        if *w & (1 << (i % 64)) == 0 {
            *w |= 1 << (i % 64);
            self.set_count += 1;
        }
    }

    pub fn set_all(&mut self) {
        for (i, w) in self.words.iter_mut().enumerate() {
            let bits = (self.len - i * 64).min(64);
            *w = if bits == 64 { !0 } else { (1u64 << bits) - 1 };
        }
        self.set_count = self.len;
    }

    pub fn clear_bit(&mut self, i: usize) {
        let w = &mut self.words[i / 64];
        if *w & (1 << (i % 64)) != 0 {
            *w &= !(1 << (i % 64));
            self.set_count -= 1;
        }
    }

    pub fn clear(&mut self) {
        self.words.iter_mut().for_each(|w| *w = 0);
        self.set_count = 0;
    }

    pub fn count(&self) -> usize {
        self.set_count
    }

    pub fn is_empty(&self) -> bool {
        self.set_count == 0
    }

    /// Next run of consecutive set bits at or after `from`.
    pub fn next_run(&self, from: usize) -> Option<(usize, usize)> {
        let mut i = from;
        while i < self.len && !self.get(i) {
            i += 1;
        }
        if i >= self.len {
            return None;
        }
        let start = i;
        while i < self.len && self.get(i) {
            i += 1;
        }
        Some((start, i - start))
    }
}

#[derive(Debug)]
pub struct ShadowRegion {
    pub shadow_base: usize,
    pub real_region: RegionId,
    /// Logical region length; the mapping is rounded up to a page multiple.
    pub logical_len: usize,
    pub mapped_len: usize,
    pub phase: Phase,
    pub dirty: Bitmap,
    readable: Bitmap,
    pub prefetch_window: usize,
    /// Verified mode: the single page currently holding a write grant.
    pub open_write_page: Option<usize>,
    page_size: usize,
}

impl ShadowRegion {
    pub fn pages(&self) -> usize {
        self.mapped_len / self.page_size
    }

    pub fn contains(&self, addr: usize) -> bool {
        addr >= self.shadow_base && addr < self.shadow_base + self.mapped_len
    }

    fn page_of(&self, addr: usize) -> usize {
        (addr - self.shadow_base) / self.page_size
    }

    fn window_cap(&self) -> usize {
        self.pages().next_power_of_two()
    }

    /// Bytes of real-region data backing pages [start, start+n), clamped to
    /// the logical length.
    fn span_bytes(&self, start_page: usize, n_pages: usize) -> (usize, usize) {
        let offset = start_page * self.page_size;
        let len = (n_pages * self.page_size).min(self.logical_len.saturating_sub(offset));
        (offset, len)
    }
}

fn mprotect(addr: usize, len: usize, prot: libc::c_int) -> Result<(), CrumError> {
    let r = unsafe { libc::mprotect(addr as *mut libc::c_void, len, prot) };
    if r != 0 {
        return Err(CrumError::MapFailed(format!(
            "mprotect({addr:#x}, {len}): {}",
            std::io::Error::last_os_error()
        )));
    }
    Ok(())
}

/// Tuning knobs, resolved once at session setup.
#[derive(Debug, Clone)]
pub struct ShadowConfig {
    pub page_size: usize,
    pub mode: Mode,
    /// Regions up to this many pages are fetched whole on the first read
    /// fault.
    pub small_region_pages: usize,
    /// Region-wide write grants with a whole-region dirty mark, matching
    /// the original region-granularity permission scheme.
    pub coarse_write: bool,
}

impl ShadowConfig {
    pub fn from_env() -> ShadowConfig {
        let page_size = std::env::var("CRUM_PAGE_SIZE")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or_else(|| unsafe { libc::sysconf(libc::_SC_PAGESIZE) as usize });
        ShadowConfig {
            page_size,
            mode: match std::env::var("CRUM_MODE").as_deref() {
                Ok("verified") => Mode::Verified,
                _ => Mode::Normal,
            },
            small_region_pages: std::env::var("CRUM_SMALL_REGION_PAGES")
                .ok()
                .and_then(|v| v.parse().ok())
                .unwrap_or(DEFAULT_SMALL_REGION_PAGES),
            coarse_write: std::env::var("CRUM_COARSE_WRITE").as_deref() == Ok("1"),
        }
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct ShadowCounters {
    pub read_faults: u64,
    pub write_faults: u64,
    pub pages_fetched: u64,
    pub pages_flushed: u64,
    pub bulk_bytes: u64,
}

/// All shadow regions of one session, keyed by base address.
pub struct ShadowTable {
    regions: BTreeMap<usize, ShadowRegion>,
    config: ShadowConfig,
    next_base: usize,
    pub counters: ShadowCounters,
}

impl ShadowTable {
    pub fn new(config: ShadowConfig) -> ShadowTable {
        ShadowTable::with_base(config, SHADOW_BASE)
    }

    /// As [`ShadowTable::new`] with an explicit bump-allocation base; used
    /// when several tables must coexist in one process.
    pub fn with_base(config: ShadowConfig, base: usize) -> ShadowTable {
        ShadowTable {
            regions: BTreeMap::new(),
            config,
            next_base: base,
            counters: ShadowCounters::default(),
        }
    }

    pub fn config(&self) -> &ShadowConfig {
        &self.config
    }

    pub fn page_size(&self) -> usize {
        self.config.page_size
    }

    pub fn regions(&self) -> impl Iterator<Item = &ShadowRegion> {
        self.regions.values()
    }

    pub fn region_by_id(&self, id: RegionId) -> Option<&ShadowRegion> {
        self.regions.values().find(|r| r.real_region == id)
    }

    /// Region owning `addr`, if any. Allocation-free; callable from the
    /// fault handler.
    pub fn lookup(&self, addr: usize) -> Option<&ShadowRegion> {
        let (_, r) = self.regions.range(..=addr).next_back()?;
        r.contains(addr).then_some(r)
    }

    fn lookup_base(&self, addr: usize) -> Option<usize> {
        self.lookup(addr).map(|r| r.shadow_base)
    }

    /// Maps a fresh shadow region. New regions start in WRITE_PHASE with
    /// every page writable and dirty, so first-touch initialization by the
    /// application is captured without faulting.
    pub fn create_shadow(
        &mut self,
        real: RegionId,
        len: usize,
        at: Option<usize>,
    ) -> Result<usize, CrumError> {
        if len == 0 {
            return Err(CrumError::InvalidArg("zero-length shadow region".into()));
        }
        let page = self.config.page_size;
        let mapped_len = len.div_ceil(page) * page;
        let base = match at {
            Some(addr) => addr,
            None => {
                // One-page guard gap between regions.
                let b = self.next_base;
                self.next_base = b + mapped_len + page;
                b
            }
        };
        if self.regions.values().any(|r| {
            base < r.shadow_base + r.mapped_len && r.shadow_base < base + mapped_len
        }) {
            return Err(CrumError::MapFailed(format!(
                "shadow overlap at {base:#x}"
            )));
        }
        let p = unsafe {
            libc::mmap(
                base as *mut libc::c_void,
                mapped_len,
                libc::PROT_READ | libc::PROT_WRITE,
                libc::MAP_PRIVATE | libc::MAP_ANONYMOUS | libc::MAP_FIXED_NOREPLACE,
                -1,
                0,
            )
        };
        if p == libc::MAP_FAILED {
            let e = std::io::Error::last_os_error();
            return if at.is_some() {
                Err(CrumError::AddressUnavailable(base))
            } else {
                Err(CrumError::MapFailed(format!("mmap({base:#x}): {e}")))
            };
        }
        if p as usize != base {
            unsafe { libc::munmap(p, mapped_len) };
            return Err(CrumError::AddressUnavailable(base));
        }
        if at.is_some() {
            self.next_base = self.next_base.max(base + mapped_len + page);
        }
        let mut region = ShadowRegion {
            shadow_base: base,
            real_region: real,
            logical_len: len,
            mapped_len,
            phase: Phase::WritePhase,
            dirty: Bitmap::new(mapped_len / page),
            readable: Bitmap::new(mapped_len / page),
            prefetch_window: 1,
            open_write_page: None,
            page_size: page,
        };
        region.dirty.set_all();
        region.readable.set_all();
        self.regions.insert(base, region);
        Ok(base)
    }

    /// Unmaps and forgets all regions. Used on session teardown.
    pub fn clear_all(&mut self) {
        for r in self.regions.values() {
            unsafe { libc::munmap(r.shadow_base as *mut libc::c_void, r.mapped_len) };
        }
        self.regions.clear();
    }

    pub fn remove(&mut self, id: RegionId) -> bool {
        let base = match self.regions.values().find(|r| r.real_region == id) {
            Some(r) => r.shadow_base,
            None => return false,
        };
        let r = self.regions.remove(&base).unwrap();
        unsafe { libc::munmap(r.shadow_base as *mut libc::c_void, r.mapped_len) };
        true
    }

    /// Resolves one page fault per Algorithm 1. Returns `Ok(false)` when the
    /// address is not a shadow page (the fault belongs to default handling).
    ///
    /// A verified-mode cycle violation still grants the access (so the
    /// program can proceed deterministically) but reports the violation; the
    /// caller is expected to latch it.
    pub fn handle_fault(
        &mut self,
        addr: usize,
        access: Access,
        transport: &mut dyn UvmTransport,
    ) -> Result<bool, CrumError> {
        let Some(base) = self.lookup_base(addr) else {
            return Ok(false);
        };
        match access {
            Access::Read => self.read_fault(base, addr, transport).map(|_| true),
            Access::Write => self.write_fault(base, addr, transport).map(|_| true),
        }
    }

    fn read_fault(
        &mut self,
        base: usize,
        addr: usize,
        transport: &mut dyn UvmTransport,
    ) -> Result<(), CrumError> {
        self.counters.read_faults += 1;
        let (phase, page) = {
            let r = &self.regions[&base];
            (r.phase, r.page_of(addr))
        };
        if phase == Phase::WritePhase {
            if self.config.mode == Mode::Verified {
                // The assumed call/read/write cycle is broken. Grant the
                // read so execution stays well-defined, then report.
                let region_id = {
                    let r = self.regions.get_mut(&base).unwrap();
                    r.real_region
                };
                self.fetch_span(base, page, 1, transport)?;
                return Err(CrumError::CycleViolation {
                    region: region_id,
                    page,
                });
            }
            // Normal mode: send this region's dirty data ahead of the read
            // so the fetch observes a consistent real region, then fall
            // into a fresh read phase.
            self.flush_region(base, transport)?;
            transport.barrier()?;
            self.protect_region(base)?;
        }
        {
            let r = self.regions.get_mut(&base).unwrap();
            if r.phase != Phase::ReadPhase {
                r.phase = Phase::ReadPhase;
                r.prefetch_window = 1;
            }
        }
        let (start, n) = {
            let r = &self.regions[&base];
            if r.pages() <= self.config.small_region_pages {
                (0, r.pages())
            } else {
                let n = r.prefetch_window.min(r.pages() - page);
                (page, n.max(1))
            }
        };
        self.fetch_span(base, start, n, transport)?;
        let r = self.regions.get_mut(&base).unwrap();
        let cap = r.window_cap();
        r.prefetch_window = (r.prefetch_window * 2).min(cap);
        Ok(())
    }

    fn write_fault(
        &mut self,
        base: usize,
        addr: usize,
        transport: &mut dyn UvmTransport,
    ) -> Result<(), CrumError> {
        self.counters.write_faults += 1;
        let page_size = self.config.page_size;
        let coarse = self.config.coarse_write;
        let verified = self.config.mode == Mode::Verified;
        let (page, pages) = {
            let r = &self.regions[&base];
            (r.page_of(addr), r.pages())
        };
        // A host write usually touches part of a page, but the flush later
        // sends whole pages; any page that is not currently resident must be
        // fetched first or the flush would push stale bytes over newer
        // device data.
        if coarse {
            let mut p = 0;
            while p < pages {
                if self.regions[&base].readable.get(p) {
                    p += 1;
                    continue;
                }
                let mut n = 1;
                while p + n < pages && !self.regions[&base].readable.get(p + n) {
                    n += 1;
                }
                self.fetch_span(base, p, n, transport)?;
                p += n;
            }
        } else if !self.regions[&base].readable.get(page) {
            self.fetch_span(base, page, 1, transport)?;
        }
        let r = self.regions.get_mut(&base).unwrap();
        r.phase = Phase::WritePhase;
        if coarse {
            mprotect(r.shadow_base, r.mapped_len, libc::PROT_READ | libc::PROT_WRITE)?;
            r.dirty.set_all();
            r.readable.set_all();
            return Ok(());
        }
        if verified {
            if let Some(prev) = r.open_write_page.take() {
                if prev != page {
                    // Keep at most one page writable so the write set stays
                    // observable.
                    mprotect(r.shadow_base + prev * page_size, page_size, libc::PROT_READ)?;
                }
            }
            r.open_write_page = Some(page);
        }
        mprotect(
            r.shadow_base + page * page_size,
            page_size,
            libc::PROT_READ | libc::PROT_WRITE,
        )?;
        r.dirty.set(page);
        r.readable.set(page);
        Ok(())
    }

    /// Fetches pages [start, start+n) of the region into its shadow pages
    /// and grants read access on them.
    fn fetch_span(
        &mut self,
        base: usize,
        start: usize,
        n: usize,
        transport: &mut dyn UvmTransport,
    ) -> Result<(), CrumError> {
        let (region_id, span_addr, offset, len, page_size) = {
            let r = &self.regions[&base];
            let (offset, len) = r.span_bytes(start, n);
            (
                r.real_region,
                r.shadow_base + start * r.page_size,
                offset,
                len,
                r.page_size,
            )
        };
        if len == 0 {
            return Ok(());
        }
        let span_len = n * page_size;
        mprotect(span_addr, span_len, libc::PROT_READ | libc::PROT_WRITE)?;
        transport.fetch(region_id, offset, span_addr, len)?;
        mprotect(span_addr, span_len, libc::PROT_READ)?;
        let r = self.regions.get_mut(&base).unwrap();
        for p in start..start + n {
            r.readable.set(p);
        }
        self.counters.pages_fetched += n as u64;
        self.counters.bulk_bytes += len as u64;
        Ok(())
    }

    /// Sends the region's dirty runs to the real region, coalescing
    /// consecutive dirty pages into single transfers. Does not re-protect.
    fn flush_region(
        &mut self,
        base: usize,
        transport: &mut dyn UvmTransport,
    ) -> Result<usize, CrumError> {
        let (region_id, shadow_base, page_size) = {
            let r = &self.regions[&base];
            (r.real_region, r.shadow_base, r.page_size)
        };
        let mut flushed = 0usize;
        let mut cursor = 0usize;
        loop {
            let run = {
                let r = &self.regions[&base];
                r.dirty.next_run(cursor)
            };
            let Some((start, n)) = run else { break };
            cursor = start + n;
            let (offset, len) = {
                let r = &self.regions[&base];
                r.span_bytes(start, n)
            };
            if len > 0 {
                transport.store(region_id, offset, shadow_base + start * page_size, len)?;
                self.counters.bulk_bytes += len as u64;
            }
            flushed += n;
        }
        let r = self.regions.get_mut(&base).unwrap();
        r.dirty.clear();
        self.counters.pages_flushed += flushed as u64;
        Ok(flushed)
    }

    fn protect_region(&mut self, base: usize) -> Result<(), CrumError> {
        let r = self.regions.get_mut(&base).unwrap();
        if r.phase == Phase::Protected && r.readable.is_empty() && r.dirty.is_empty() {
            return Ok(());
        }
        mprotect(r.shadow_base, r.mapped_len, libc::PROT_NONE)?;
        r.phase = Phase::Protected;
        r.dirty.clear();
        r.readable.clear();
        r.prefetch_window = 1;
        r.open_write_page = None;
        Ok(())
    }

    /// The pre-call hook: sends every dirty page to its real region, then
    /// removes all access so the next host touch faults. Every region is
    /// re-protected, since the upcoming device work may rewrite any region.
    /// Returns the number of pages flushed.
    pub fn flush_dirty(&mut self, transport: &mut dyn UvmTransport) -> Result<usize, CrumError> {
        let bases: Vec<usize> = self.regions.keys().copied().collect();
        let mut flushed = 0;
        for base in &bases {
            flushed += self.flush_region(*base, transport)?;
        }
        if flushed > 0 {
            transport.barrier()?;
        }
        for base in &bases {
            self.protect_region(*base)?;
        }
        Ok(flushed)
    }

    /// Copies every managed region's full contents from the proxy into the
    /// shadow pages and leaves them readable, so a copy-on-write snapshot of
    /// this process sees complete data.
    pub fn drain_to_shadow(&mut self, transport: &mut dyn UvmTransport) -> Result<u64, CrumError> {
        let bases: Vec<usize> = self.regions.keys().copied().collect();
        let mut bytes = 0u64;
        for base in bases {
            let pages = {
                let r = self.regions.get_mut(&base).unwrap();
                r.dirty.clear();
                r.phase = Phase::ReadPhase;
                r.prefetch_window = 1;
                r.open_write_page = None;
                r.readable.clear();
                r.pages()
            };
            self.fetch_span(base, 0, pages, transport)?;
            let r = self.regions.get_mut(&base).unwrap();
            r.phase = Phase::ReadPhase;
            bytes += r.logical_len as u64;
        }
        Ok(bytes)
    }

    /// Debug walk asserting the phase/protection/dirty invariants of every
    /// region against the live page protections.
    pub fn check_invariants(&self) -> Result<(), String> {
        for r in self.regions.values() {
            match r.phase {
                Phase::Protected => {
                    if !r.dirty.is_empty() {
                        return Err(format!(
                            "region {} PROTECTED with {} dirty pages",
                            r.real_region,
                            r.dirty.count()
                        ));
                    }
                    if !r.readable.is_empty() {
                        return Err(format!(
                            "region {} PROTECTED with readable pages",
                            r.real_region
                        ));
                    }
                }
                Phase::ReadPhase => {
                    if !r.dirty.is_empty() {
                        return Err(format!(
                            "region {} READ_PHASE with dirty pages",
                            r.real_region
                        ));
                    }
                }
                Phase::WritePhase => {}
            }
            if r.prefetch_window > r.window_cap() {
                return Err(format!(
                    "region {} prefetch window {} exceeds cap {}",
                    r.real_region,
                    r.prefetch_window,
                    r.window_cap()
                ));
            }
            for p in 0..r.pages() {
                let probed = probe_protection(r.shadow_base + p * r.page_size, r.page_size);
                let expect_readable = r.readable.get(p);
                if probed.0 != expect_readable {
                    return Err(format!(
                        "region {} page {p}: readable bit {expect_readable} but mapping {} readable",
                        r.real_region,
                        if probed.0 { "is" } else { "is not" },
                    ));
                }
                if probed.1 && !r.dirty.get(p) && r.phase != Phase::WritePhase {
                    return Err(format!(
                        "region {} page {p} writable outside WRITE_PHASE",
                        r.real_region
                    ));
                }
            }
        }
        Ok(())
    }
}

impl Drop for ShadowTable {
    fn drop(&mut self) {
        self.clear_all();
    }
}

/// (readable, writable) of the page at `addr`, from /proc/self/maps.
fn probe_protection(addr: usize, _len: usize) -> (bool, bool) {
    let maps = std::fs::read_to_string("/proc/self/maps").unwrap_or_default();
    for line in maps.lines() {
        let mut parts = line.split_whitespace();
        let range = parts.next().unwrap_or("");
        let perms = parts.next().unwrap_or("");
        if let Some((lo, hi)) = range.split_once('-') {
            let lo = usize::from_str_radix(lo, 16).unwrap_or(0);
            let hi = usize::from_str_radix(hi, 16).unwrap_or(0);
            if addr >= lo && addr < hi {
                return (perms.contains('r'), perms.contains('w'));
            }
        }
    }
    (false, false)
}
