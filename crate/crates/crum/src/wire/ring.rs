//! The pipelined call ring: one producer (application), one consumer (proxy).
//!
//! Waiting never spins hard: on small or oversubscribed hosts the peer needs
//! the CPU to make progress, so waits are built from `sched_yield` and short
//! sleeps. Barrier waits (pipeline flushes and device synchronize) poll
//! coarsely; those calls are long by nature and fine polling would starve a
//! busy proxy on a shared core.

use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Duration;

use crate::error::{WireError, WireResult};
use crate::wire::shm::{SharedRegion, Slot, INLINE_PAYLOAD};

/// How eagerly a wait polls.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WaitClass {
    /// Latency-sensitive control waits: yield to the peer, with an escape
    /// sleep so an idle wait does not burn the core.
    Fine,
    /// Completion barriers: poll on a fixed coarse interval.
    Coarse,
}

const COARSE_POLL: Duration = Duration::from_micros(200);
const FINE_ESCAPE_AFTER: u32 = 512;
const FINE_ESCAPE_SLEEP: Duration = Duration::from_micros(50);
const LIVENESS_CHECK_EVERY: u32 = 64;

fn pid_alive(pid: u32) -> bool {
    if pid == 0 {
        return true; // not yet published
    }
    unsafe { libc::kill(pid as libc::pid_t, 0) == 0 || *libc::__errno_location() != libc::ESRCH }
}

/// Waits until `cond` holds. `peer` reports whether the other side is still
/// there; once it is gone and the condition still fails, the wait errors out.
fn wait_until(
    class: WaitClass,
    mut cond: impl FnMut() -> bool,
    mut peer_gone: impl FnMut() -> bool,
) -> WireResult<()> {
    let mut iters: u32 = 0;
    loop {
        if cond() {
            return Ok(());
        }
        iters = iters.wrapping_add(1);
        if iters % LIVENESS_CHECK_EVERY == 0 && peer_gone() {
            // Re-check once: the peer may have completed just before dying.
            return if cond() {
                Ok(())
            } else {
                Err(WireError::ChannelClosed)
            };
        }
        match class {
            WaitClass::Coarse => std::thread::sleep(COARSE_POLL),
            WaitClass::Fine => {
                if iters % FINE_ESCAPE_AFTER == 0 {
                    std::thread::sleep(FINE_ESCAPE_SLEEP);
                } else {
                    unsafe { libc::sched_yield() };
                }
            }
        }
    }
}

/// A decoded reply for one blocking call.
#[derive(Debug, Clone)]
pub struct Reply {
    pub seq: u64,
    pub status: u32,
    pub data: [u8; INLINE_PAYLOAD],
    pub len: usize,
}

/// Producer end of the ring. Confined to the session thread (plus the fault
/// handler, which by contract only runs between the session thread's own
/// channel operations).
pub struct CallSender {
    region: Arc<SharedRegion>,
    next_seq: u64,
    depth: u64,
}

impl CallSender {
    pub fn new(region: Arc<SharedRegion>, depth: u32) -> CallSender {
        let slots = region.ring_slots() as u64;
        let depth = (depth.max(1) as u64).min(slots);
        let next_seq = region.header().head.load(Ordering::Acquire);
        CallSender {
            region,
            next_seq,
            depth,
        }
    }

    pub fn region(&self) -> &Arc<SharedRegion> {
        &self.region
    }

    pub fn last_seq(&self) -> u64 {
        self.next_seq
    }

    fn proxy_gone(&self) -> bool {
        let h = self.region.header();
        h.proxy_closed.load(Ordering::Acquire) != 0
            || !pid_alive(h.proxy_pid.load(Ordering::Acquire))
    }

    /// Enqueues one call. Non-blocking calls return as soon as the message
    /// is visible to the proxy; a full ring exerts back-pressure rather than
    /// erroring. Returns the sequence number of the message.
    pub fn send_call(&mut self, opcode: u16, blocking: bool, payload: &[u8]) -> WireResult<u64> {
        assert!(payload.len() <= INLINE_PAYLOAD, "payload exceeds inline area");
        let h = self.region.header();
        let depth = self.depth;
        let head = self.next_seq;
        wait_until(
            WaitClass::Fine,
            || head - h.tail.load(Ordering::Acquire) < depth,
            || self.proxy_gone(),
        )?;
        let seq = self.next_seq + 1;
        unsafe {
            let slot = self.region.slot_ptr(head);
            let mut s = Slot::zeroed();
            s.seq = seq;
            s.opcode = opcode;
            s.blocking = blocking as u8;
            s.payload[..payload.len()].copy_from_slice(payload);
            std::ptr::write_volatile(slot, s);
        }
        self.next_seq = seq;
        h.head.store(seq, Ordering::Release);
        Ok(seq)
    }

    /// Waits for the reply to `seq`. Valid only for the most recent blocking
    /// call (there is a single reply slot).
    pub fn wait_reply(&mut self, seq: u64, class: WaitClass) -> WireResult<Reply> {
        let h = self.region.header();
        wait_until(
            class,
            || h.reply_seq.load(Ordering::Acquire) >= seq,
            || self.proxy_gone(),
        )?;
        let got = h.reply_seq.load(Ordering::Acquire);
        debug_assert_eq!(got, seq, "reply slot overwritten under a blocking wait");
        let mut data = [0u8; INLINE_PAYLOAD];
        data.copy_from_slice(&h.reply_data);
        Ok(Reply {
            seq: got,
            status: h.reply_status.load(Ordering::Acquire),
            len: h.reply_len.load(Ordering::Acquire) as usize,
            data,
        })
    }

    /// Pipeline flush: waits until everything sent has been executed and
    /// replied, then surfaces the first deferred error, tagged with the
    /// sequence number of the call that failed.
    pub fn flush(&mut self) -> WireResult<()> {
        let h = self.region.header();
        let target = self.next_seq;
        wait_until(
            WaitClass::Coarse,
            || h.tail.load(Ordering::Acquire) >= target,
            || self.proxy_gone(),
        )?;
        self.take_deferred_error()
    }

    /// Pops the deferred-error latch if set.
    pub fn take_deferred_error(&mut self) -> WireResult<()> {
        let h = self.region.header();
        if h.err_valid.swap(0, Ordering::AcqRel) != 0 {
            return Err(WireError::DeferredCallError {
                seq: h.err_seq.load(Ordering::Acquire),
                opcode: h.err_opcode.load(Ordering::Acquire) as u16,
                status: h.err_status.load(Ordering::Acquire),
            });
        }
        Ok(())
    }

    pub fn in_flight(&self) -> u64 {
        self.next_seq - self.region.header().tail.load(Ordering::Acquire)
    }
}

/// A call as seen by the consumer.
#[derive(Clone, Copy)]
pub struct RawCall {
    pub seq: u64,
    pub opcode: u16,
    pub blocking: bool,
    pub payload: [u8; INLINE_PAYLOAD],
}

/// Consumer end of the ring (the proxy loop).
pub struct CallReceiver {
    region: Arc<SharedRegion>,
    next: u64,
}

impl CallReceiver {
    pub fn new(region: Arc<SharedRegion>) -> CallReceiver {
        let next = region.header().tail.load(Ordering::Acquire);
        CallReceiver { region, next }
    }

    pub fn region(&self) -> &Arc<SharedRegion> {
        &self.region
    }

    fn app_gone(&self) -> bool {
        let h = self.region.header();
        h.app_closed.load(Ordering::Acquire) != 0
            || !pid_alive(h.app_pid.load(Ordering::Acquire))
    }

    /// Waits for the next call. `Err(ChannelClosed)` once the application is
    /// gone and the ring is empty.
    pub fn recv_wait(&mut self) -> WireResult<RawCall> {
        let h = self.region.header();
        let next = self.next;
        wait_until(
            WaitClass::Fine,
            || h.head.load(Ordering::Acquire) > next,
            || self.app_gone(),
        )?;
        let slot = unsafe { std::ptr::read_volatile(self.region.slot_ptr(next)) };
        h.requests_seen.fetch_add(1, Ordering::AcqRel);
        Ok(RawCall {
            seq: slot.seq,
            opcode: slot.opcode,
            blocking: slot.blocking != 0,
            payload: slot.payload,
        })
    }

    /// Publishes the reply for the call at the front of the ring and frees
    /// its slot. Every message gets a reply; errors of non-blocking calls
    /// additionally set the sticky deferred-error latch.
    pub fn complete(&mut self, call: &RawCall, status: u32, data: &[u8]) {
        debug_assert!(data.len() <= INLINE_PAYLOAD);
        let h = self.region.header();
        unsafe {
            let dst = h.reply_data.as_ptr() as *mut u8;
            std::ptr::copy_nonoverlapping(data.as_ptr(), dst, data.len());
        }
        h.reply_status.store(status, Ordering::Release);
        h.reply_len.store(data.len() as u32, Ordering::Release);
        h.reply_seq.store(call.seq, Ordering::Release);
        if status != 0 && !call.blocking && h.err_valid.load(Ordering::Acquire) == 0 {
            h.err_seq.store(call.seq, Ordering::Release);
            h.err_opcode.store(call.opcode as u32, Ordering::Release);
            h.err_status.store(status, Ordering::Release);
            h.err_valid.store(1, Ordering::Release);
        }
        h.replies_written.fetch_add(1, Ordering::AcqRel);
        self.next = call.seq;
        h.tail.store(call.seq, Ordering::Release);
    }
}
