//! Error types shared across the runtime.
//!
//! Device-side failures are reduced to a stable numeric code (`ErrCode`)
//! when they cross the wire; the client re-inflates them into typed errors.

use thiserror::Error;

/// Stable status codes carried in reply slots. `0` is success.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum ErrCode {
    Ok = 0,
    NotInitialized = 1,
    AlreadyInitialized = 2,
    OutOfArena = 3,
    UnknownRegion = 4,
    UnknownStream = 5,
    UnknownKernel = 6,
    UnknownEvent = 7,
    RangeOutOfBounds = 8,
    BadRequest = 9,
    BulkFailed = 10,
    KernelExec = 11,
}

impl ErrCode {
    pub fn from_u32(v: u32) -> ErrCode {
        match v {
            0 => ErrCode::Ok,
            1 => ErrCode::NotInitialized,
            2 => ErrCode::AlreadyInitialized,
            3 => ErrCode::OutOfArena,
            4 => ErrCode::UnknownRegion,
            5 => ErrCode::UnknownStream,
            6 => ErrCode::UnknownKernel,
            7 => ErrCode::UnknownEvent,
            8 => ErrCode::RangeOutOfBounds,
            10 => ErrCode::BulkFailed,
            11 => ErrCode::KernelExec,
            _ => ErrCode::BadRequest,
        }
    }
}

/// Failures inside the simulated device.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DeviceError {
    #[error("device session not initialized")]
    NotInitialized,
    #[error("device session already initialized in this process")]
    AlreadyInitialized,
    #[error("allocation of {requested} bytes exceeds remaining arena ({remaining} left)")]
    OutOfArena { requested: usize, remaining: usize },
    #[error("unknown region {0}")]
    UnknownRegion(u64),
    #[error("unknown stream {0}")]
    UnknownStream(u64),
    #[error("unknown kernel `{0}`")]
    UnknownKernel(String),
    #[error("unknown event {0}")]
    UnknownEvent(u64),
    #[error("range {offset}+{len} out of bounds for region of {region_len} bytes")]
    RangeOutOfBounds {
        offset: usize,
        len: usize,
        region_len: usize,
    },
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("kernel on stream {stream} (task index {index}) failed: {cause:?}")]
    KernelExec {
        stream: u64,
        index: usize,
        cause: ErrCode,
    },
}

impl DeviceError {
    pub fn code(&self) -> ErrCode {
        match self {
            DeviceError::NotInitialized => ErrCode::NotInitialized,
            DeviceError::AlreadyInitialized => ErrCode::AlreadyInitialized,
            DeviceError::OutOfArena { .. } => ErrCode::OutOfArena,
            DeviceError::UnknownRegion(_) => ErrCode::UnknownRegion,
            DeviceError::UnknownStream(_) => ErrCode::UnknownStream,
            DeviceError::UnknownKernel(_) => ErrCode::UnknownKernel,
            DeviceError::UnknownEvent(_) => ErrCode::UnknownEvent,
            DeviceError::RangeOutOfBounds { .. } => ErrCode::RangeOutOfBounds,
            DeviceError::BadRequest(_) => ErrCode::BadRequest,
            DeviceError::KernelExec { .. } => ErrCode::KernelExec,
        }
    }
}

/// Transport-level failures on the shared-memory channel.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("channel closed: peer process is gone")]
    ChannelClosed,
    #[error("shared region layout version mismatch (ours {ours}, theirs {theirs})")]
    VersionMismatch { ours: u8, theirs: u8 },
    #[error("pipelined call seq {seq} (opcode {opcode}) failed with status {status}")]
    DeferredCallError { seq: u64, opcode: u16, status: u32 },
    #[error("bulk transfer moved {moved} of {expected} bytes")]
    PartialTransfer { moved: usize, expected: usize },
    #[error("remote process {pid} is gone")]
    RemoteGone { pid: i32 },
    #[error("bulk transfer failed: {0}")]
    BulkIo(String),
    #[error("shared region setup failed: {0}")]
    Setup(String),
}

/// Errors surfaced by the application-facing API.
#[derive(Debug, Error)]
pub enum CrumError {
    #[error("no proxy process reachable")]
    NoProxy,
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("device call failed: {0:?}")]
    Device(ErrCode),
    #[error("session is not running (state {0})")]
    NotRunning(&'static str),
    #[error("session is owned by another thread")]
    WrongThread,
    #[error("write/read cycle violation detected on shadow region {region} page {page}")]
    CycleViolation { region: u64, page: usize },
    #[error("shadow mapping failed: {0}")]
    MapFailed(String),
    #[error("recorded shadow address {0:#x} cannot be re-mapped")]
    AddressUnavailable(usize),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
    #[error("restore failed: {0}")]
    RestoreFailed(String),
    #[error("invalid argument: {0}")]
    InvalidArg(String),
}

/// Checkpoint/restore failures.
#[derive(Debug, Error)]
pub enum CkptError {
    #[error("device drain failed: {0}")]
    DrainFailed(String),
    #[error("checkpoint image write failed: {0}")]
    WriteFailed(String),
    #[error("a forked checkpoint child is still running")]
    ConcurrentCheckpoint,
    #[error("image CRC mismatch ({section})")]
    CrcMismatch { section: &'static str },
    #[error("image is malformed: {0}")]
    BadImage(String),
    #[error("replay divergence: {0}")]
    ReplayDivergence(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type DeviceResult<T> = Result<T, DeviceError>;
pub type WireResult<T> = Result<T, WireError>;
pub type CrumResult<T> = Result<T, CrumError>;
