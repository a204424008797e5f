//! A stream-scoped progress engine for nonblocking message passing.
//!
//! The crate is organised around four pieces:
//!
//! * [`engine`]: streams (serial execution contexts), user poll-hook tasks and
//!   the collated progress pass that drives built-in subsystem hooks and
//!   registered tasks.
//! * [`request`]: completion handles with a side-effect-free completion query,
//!   generalized (user-completed) requests and a blocking wait built on
//!   stream progress.
//! * [`transport`]: an in-process world of endpoints connected by simulated
//!   NICs, implementing lightweight, eager and rendezvous send protocols with
//!   posted/unexpected receive matching.
//! * [`collective`]: a recursive-doubling allreduce written as an ordinary
//!   poll-hook task, and a gather/broadcast baseline driven by the collective
//!   subsystem hook.
//!
//! ```
//! use progress_engine::{Engine, PollOutcome};
//!
//! let engine = Engine::new();
//! let stream = engine.stream_create(&Default::default()).unwrap();
//! engine
//!     .async_start(|thing| {
//!         *thing.state() -= 1;
//!         if *thing.state() == 0 { PollOutcome::Done } else { PollOutcome::Pending }
//!     }, 3u32, &stream)
//!     .unwrap();
//! while engine.pending_tasks(&stream) > 0 {
//!     engine.stream_progress(&stream).unwrap();
//! }
//! engine.stream_free(stream).unwrap();
//! ```

pub mod clock;
pub mod collective;
pub mod engine;
mod error;
pub mod request;
pub mod transport;

pub use clock::Clock;
pub use engine::{
    AsyncThing, Counters, Engine, Hints, PassContext, PollOutcome, Stream, StreamId, TaskId,
    TraceEvent, TraceOutcome, TraceTarget, COLLECTIVE_HOOK_ORDER, TRANSPORT_HOOK_ORDER,
};
pub use error::{Error, Result};
pub use request::{GeneralizedOps, NoopOps, Request, RequestKind, Status};
pub use transport::{
    ContextId, Endpoint, LatencyModel, MessageEnvelope, Protocol, SendClass, Thresholds, World,
};
