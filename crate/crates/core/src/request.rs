//! Completion handles.
//!
//! A [`Request`] carries an atomic done flag that flips from false to true
//! exactly once. [`Request::is_complete`] only reads that flag: it never runs
//! a progress pass, touches the transport or invokes a callback.
//!
//! Generalized requests are completed by user code through
//! [`Request::complete`], typically from inside a poll hook, and report
//! status through a [`GeneralizedOps`] implementation.

use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, OnceLock, PoisonError};

use bytes::Bytes;

use crate::engine::{Stream, StreamId, StreamInner};
use crate::error::{Error, Result};

/// What a completed request reports about the message it carried.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub struct Status {
    pub source: usize,
    pub tag: i32,
    pub length: usize,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum RequestKind {
    Send,
    Recv,
    Generalized,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RequestId(u64);

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Callbacks of a generalized request. The implementing value doubles as the
/// request's extra state.
pub trait GeneralizedOps: Send + 'static {
    /// Fills in the status. Called once, when the request is completed.
    fn query(&mut self, _status: &mut Status) {}

    /// Called once when the request is destroyed.
    fn free(&mut self) {}

    /// Stored for completeness; the runtime never cancels requests.
    fn cancel(&mut self, _complete: bool) {}
}

/// Generalized-request callbacks that do nothing.
#[derive(Copy, Clone, Debug, Default)]
pub struct NoopOps;

impl GeneralizedOps for NoopOps {}

static NEXT_REQUEST: AtomicU64 = AtomicU64::new(1);

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(PoisonError::into_inner)
}

struct RequestInner {
    id: RequestId,
    kind: RequestKind,
    done: AtomicBool,
    completing: AtomicBool,
    outcome: OnceLock<Result<Status>>,
    released: AtomicBool,
    send_buffer: Mutex<Option<Bytes>>,
    recv_buffer: Mutex<Option<Vec<u8>>>,
    ops: Mutex<Option<Box<dyn GeneralizedOps>>>,
    free_fired: AtomicBool,
    owner: StreamId,
    attached: Option<Arc<StreamInner>>,
}

impl RequestInner {
    fn fire_free_once(&self) {
        if self.kind == RequestKind::Generalized && !self.free_fired.swap(true, Ordering::AcqRel) {
            if let Some(ops) = lock(&self.ops).as_mut() {
                ops.free();
            }
        }
    }
}

impl Drop for RequestInner {
    fn drop(&mut self) {
        self.fire_free_once();
        if !self.done.load(Ordering::Acquire) {
            if let Some(s) = &self.attached {
                s.detach_operation();
            }
        }
    }
}

/// A completion handle. Clones refer to the same request; freeing through
/// any clone invalidates all of them.
#[derive(Clone)]
pub struct Request {
    inner: Arc<RequestInner>,
}

impl fmt::Debug for Request {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Request")
            .field("id", &self.inner.id)
            .field("kind", &self.inner.kind)
            .field("done", &self.inner.done.load(Ordering::Relaxed))
            .finish()
    }
}

impl Request {
    fn with_kind(kind: RequestKind, attached: Option<Arc<StreamInner>>, owner: StreamId) -> Self {
        Request {
            inner: Arc::new(RequestInner {
                id: RequestId(NEXT_REQUEST.fetch_add(1, Ordering::Relaxed)),
                kind,
                done: AtomicBool::new(false),
                completing: AtomicBool::new(false),
                outcome: OnceLock::new(),
                released: AtomicBool::new(false),
                send_buffer: Mutex::new(None),
                recv_buffer: Mutex::new(None),
                ops: Mutex::new(None),
                free_fired: AtomicBool::new(false),
                owner,
                attached,
            }),
        }
    }

    /// A point-to-point request counted as in flight on `stream` until it
    /// completes.
    pub(crate) fn new_p2p(kind: RequestKind, stream: &Stream) -> Self {
        stream.inner.attach_operation();
        Self::with_kind(kind, Some(Arc::clone(&stream.inner)), stream.id())
    }

    /// Starts a generalized request. It stays pending until
    /// [`Request::complete`] is called.
    pub fn start_generalized<O: GeneralizedOps>(ops: O) -> Self {
        let req = Self::with_kind(RequestKind::Generalized, None, StreamId::NULL);
        *lock(&req.inner.ops) = Some(Box::new(ops));
        req
    }

    pub fn id(&self) -> RequestId {
        self.inner.id
    }

    pub fn kind(&self) -> RequestKind {
        self.inner.kind
    }

    /// Stream whose passes drive this request's operation.
    pub fn owner_stream(&self) -> StreamId {
        self.inner.owner
    }

    /// Reads the done flag. Never advances progress.
    #[inline]
    pub fn is_complete(&self) -> Result<bool> {
        if self.inner.released.load(Ordering::Relaxed) {
            return Err(Error::InvalidRequest);
        }
        Ok(self.inner.done.load(Ordering::Acquire))
    }

    /// Completion outcome, once done.
    pub fn status(&self) -> Option<Result<Status>> {
        if !self.inner.done.load(Ordering::Acquire) {
            return None;
        }
        self.inner.outcome.get().cloned()
    }

    /// Completes a generalized request: invokes `query` to fill the status,
    /// then publishes the done flag.
    pub fn complete(&self) -> Result<()> {
        let inner = &self.inner;
        if inner.kind != RequestKind::Generalized {
            return Err(Error::NotGeneralized);
        }
        if inner.completing.swap(true, Ordering::AcqRel) {
            return Err(Error::AlreadyComplete);
        }
        let mut status = Status::default();
        if let Some(ops) = lock(&inner.ops).as_mut() {
            ops.query(&mut status);
        }
        self.finish(Ok(status));
        if inner.released.load(Ordering::Acquire) {
            inner.fire_free_once();
        }
        Ok(())
    }

    /// Releases the caller's handle. A pending point-to-point operation keeps
    /// running and is destroyed when it finishes; a generalized request calls
    /// `free` once it is both freed and complete.
    pub fn free(&self) -> Result<()> {
        let inner = &self.inner;
        if inner.released.swap(true, Ordering::AcqRel) {
            return Err(Error::InvalidRequest);
        }
        if inner.done.load(Ordering::Acquire) {
            inner.fire_free_once();
        }
        Ok(())
    }

    pub fn is_freed(&self) -> bool {
        self.inner.released.load(Ordering::Acquire)
    }

    /// Spins `stream` until the request is done, then frees it.
    pub fn wait(&self, stream: &Stream) -> Result<Status> {
        if self.is_freed() {
            return Err(Error::InvalidRequest);
        }
        while !self.inner.done.load(Ordering::Acquire) {
            stream.inner.progress()?;
        }
        let outcome = self
            .inner
            .outcome
            .get()
            .cloned()
            .expect("done flag set before outcome");
        self.free()?;
        outcome
    }

    /// Takes back the receive buffer of a completed receive. Still allowed
    /// after the request has been freed.
    pub fn take_buffer(&self) -> Option<Vec<u8>> {
        lock(&self.inner.recv_buffer).take()
    }

    /// Takes back the caller's send buffer. Until the transport has dropped
    /// its references, `Bytes::try_into_mut` on the result fails.
    pub fn take_send_buffer(&self) -> Option<Bytes> {
        lock(&self.inner.send_buffer).take()
    }

    pub(crate) fn set_send_buffer(&self, buf: Bytes) {
        *lock(&self.inner.send_buffer) = Some(buf);
    }

    pub(crate) fn set_recv_buffer(&self, buf: Vec<u8>) {
        *lock(&self.inner.recv_buffer) = Some(buf);
    }

    /// Publishes the outcome, then the done flag (release), so a reader that
    /// observes done also observes the status.
    pub(crate) fn finish(&self, outcome: Result<Status>) {
        if self.inner.outcome.set(outcome).is_err() {
            return;
        }
        self.inner.done.store(true, Ordering::Release);
        if let Some(s) = &self.inner.attached {
            s.detach_operation();
        }
    }
}
