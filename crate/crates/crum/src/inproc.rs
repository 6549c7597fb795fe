//! In-process session harness: runs the proxy serve loop on a thread of the
//! current process, over a real shared control region. Single-copy bulk
//! transfers then operate on our own pid. Used by tests and benchmarks that
//! do not need true process isolation.

use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use crate::device::DeviceState;
use crate::proxy::{ExitReason, Proxy};
use crate::wire::shm::SharedRegion;
use crate::wire::{DEFAULT_RING_SLOTS, DEFAULT_SCRATCH_BYTES};

pub struct InprocProxy {
    region: Arc<SharedRegion>,
    handle: Option<JoinHandle<ExitReason>>,
}

impl InprocProxy {
    /// Creates a fresh shared region with a unique name and serves it from a
    /// background thread until shutdown or teardown.
    pub fn spawn(arena_bytes: usize) -> InprocProxy {
        static NEXT: AtomicU32 = AtomicU32::new(0);
        let name = format!(
            "/crum-inproc-{}-{}",
            std::process::id(),
            NEXT.fetch_add(1, Ordering::Relaxed)
        );
        let region = Arc::new(
            SharedRegion::create(&name, DEFAULT_RING_SLOTS, DEFAULT_SCRATCH_BYTES as u32)
                .expect("in-process shared region"),
        );
        region
            .header()
            .app_pid
            .store(std::process::id(), Ordering::Release);
        let r = region.clone();
        let handle = std::thread::spawn(move || {
            let mut proxy = Proxy::new(r, DeviceState::new(arena_bytes));
            proxy.run()
        });
        InprocProxy {
            region,
            handle: Some(handle),
        }
    }

    pub fn region(&self) -> Arc<SharedRegion> {
        self.region.clone()
    }

    pub fn shm_name(&self) -> &str {
        self.region.name()
    }

    /// Waits for the serve loop to end (the client must have shut the
    /// session down, or teardown must be in progress).
    pub fn join(mut self) -> ExitReason {
        self.handle.take().unwrap().join().expect("proxy thread")
    }
}

impl Drop for InprocProxy {
    fn drop(&mut self) {
        if let Some(h) = self.handle.take() {
            // Unblock the serve loop if the client never sent a shutdown.
            self.region
                .header()
                .app_closed
                .store(1, Ordering::Release);
            let _ = h.join();
        }
    }
}
