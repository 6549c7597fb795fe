//! Shared-memory transport between application and proxy.
//!
//! The transport is a pipelined ring of fixed-size call messages plus a bulk
//! data path. The ring is strictly one producer (the application session
//! thread) and one consumer (the proxy loop); neither side ever holds a
//! mutual-exclusion primitive across a wait on the other process.

pub mod bulk;
pub mod payload;
pub mod ring;
pub mod shm;

pub use bulk::{BulkChannel, BulkMode};
pub use payload::{Opcode, PayloadReader, PayloadWriter};
pub use ring::{CallSender, CallReceiver, RawCall, Reply, WaitClass};
pub use shm::{SharedRegion, ShmHeader, Slot, CKPT_PATH_MAX, INLINE_PAYLOAD, LAYOUT_VERSION};

/// Default number of ring slots (power of two).
pub const DEFAULT_RING_SLOTS: u32 = 64;
/// Default scratch buffer for the two-copy fallback bulk path.
pub const DEFAULT_SCRATCH_BYTES: u32 = 256 * 1024;
