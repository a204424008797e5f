use crate::engine::StreamId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Error {
    #[error("progress recursion: stream progress invoked from inside a poll hook")]
    ProgressRecursion,

    #[error("cannot free default stream")]
    FreeNullStream,

    #[error("stream {stream} still has {count} pending tasks")]
    PendingTasks { stream: StreamId, count: usize },

    #[error("stream {stream} still has {count} pending operations attached")]
    PendingOperations { stream: StreamId, count: usize },

    #[error("invalid or freed stream {0}")]
    InvalidStream(StreamId),

    #[error("a subsystem hook is already registered at order {0}")]
    DuplicateHookOrder(i32),

    #[error("no subsystem hook named {0:?}")]
    UnknownHook(String),

    #[error("invalid or freed request handle")]
    InvalidRequest,

    #[error("request already complete")]
    AlreadyComplete,

    #[error("operation requires a generalized request")]
    NotGeneralized,

    #[error("invalid rank {rank} for world of size {size}")]
    InvalidRank { rank: usize, size: usize },

    #[error("invalid context id {0}")]
    InvalidContext(u32),

    #[error("message of {length} bytes truncated into a {capacity}-byte buffer")]
    Truncated { length: usize, capacity: usize },

    #[error("inverted thresholds: lightweight {lightweight} > eager {eager}")]
    InvertedThresholds { lightweight: usize, eager: usize },

    #[error("pipeline threshold {pipeline} is below the eager threshold {eager}")]
    PipelineBelowEager { pipeline: usize, eager: usize },

    #[error("world size must be at least 1")]
    EmptyWorld,

    #[error("world size {0} is not a power of two")]
    NotPowerOfTwo(usize),

    #[error("buffer of {len} elements does not match count {count}")]
    CountMismatch { len: usize, count: usize },
}
