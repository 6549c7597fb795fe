//! crum: a checkpoint-restart runtime for accelerator applications that use
//! unified (managed) memory.
//!
//! Device state lives only inside a proxy process; the application talks to
//! it over a pipelined shared-memory channel and sees managed memory through
//! page-fault-tracked shadow regions. Checkpoints drain the device, then
//! write the image in-line, compressed, or from a copy-on-write forked child
//! while the application resumes.

pub mod bench;
pub mod ckpt;
pub mod client;
pub mod device;
pub mod error;
pub mod inproc;
pub mod proxy;
pub mod shadow;
pub mod wire;
pub mod workloads;

pub use error::{CkptError, CrumError, DeviceError, ErrCode, WireError};
