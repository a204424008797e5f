//! Allreduce (sum of `i32`) built on the public engine and transport APIs.
//!
//! [`allreduce_start`] runs recursive doubling as an ordinary async task: each
//! poll checks the round's two requests, folds the received vector into the
//! local one, and posts the next exchange with partner `rank ^ mask`.
//! [`baseline_allreduce`] gathers to rank 0, sums, and broadcasts; it is
//! driven by the world's `collective` subsystem hook and exists as a
//! comparison point.

use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, PoisonError};

use crate::engine::{AsyncThing, PollOutcome, Stream};
use crate::error::{Error, Result};
use crate::request::Request;
use crate::transport::{ContextId, Endpoint};

/// Tag reserved for recursive-doubling exchanges.
pub const ALLREDUCE_TAG: i32 = -0x0A11;
/// Tag reserved for the gather/broadcast baseline.
pub const BASELINE_TAG: i32 = -0x0B11;

pub(crate) enum SchedulePoll {
    Idle,
    Progress,
    Done,
}

/// A collective state machine advanced by the `collective` subsystem hook.
pub(crate) trait CollectiveSchedule: Send {
    fn poll(&mut self) -> SchedulePoll;
}

fn encode(values: &[i32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn decode_into(bytes: &[u8], out: &mut [i32]) {
    for (dst, chunk) in out.iter_mut().zip(bytes.chunks_exact(4)) {
        *dst = i32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
    }
}

fn accumulate(buf: &mut [i32], tmp: &[i32]) {
    for (b, t) in buf.iter_mut().zip(tmp) {
        *b = b.wrapping_add(*t);
    }
}

fn check_args(endpoint: &Endpoint, buf: &[i32], count: usize) -> Result<()> {
    let size = endpoint.world_size();
    if !size.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(size));
    }
    if buf.len() != count {
        return Err(Error::CountMismatch {
            len: buf.len(),
            count,
        });
    }
    Ok(())
}

/// One exchange of a recursive-doubling run.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Round {
    pub round: u32,
    pub mask: usize,
    pub partner: usize,
}

struct Completion {
    done: AtomicBool,
    result: Mutex<Option<Result<Vec<i32>>>>,
    rounds: Mutex<Vec<Round>>,
}

/// Externally visible completion of an allreduce.
#[derive(Clone)]
pub struct AllreduceHandle {
    inner: Arc<Completion>,
}

impl fmt::Debug for AllreduceHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AllreduceHandle")
            .field("done", &self.is_done())
            .finish()
    }
}

impl AllreduceHandle {
    fn new() -> Self {
        AllreduceHandle {
            inner: Arc::new(Completion {
                done: AtomicBool::new(false),
                result: Mutex::new(None),
                rounds: Mutex::new(Vec::new()),
            }),
        }
    }

    fn finish(&self, result: Result<Vec<i32>>) {
        *self
            .inner
            .result
            .lock()
            .unwrap_or_else(PoisonError::into_inner) = Some(result);
        self.inner.done.store(true, Ordering::Release);
    }

    fn log_round(&self, round: Round) {
        self.inner
            .rounds
            .lock()
            .unwrap_or_else(PoisonError::into_inner)
            .push(round);
    }

    pub fn is_done(&self) -> bool {
        self.inner.done.load(Ordering::Acquire)
    }

    /// The reduced vector, once done. Yields it only once.
    pub fn take_result(&self) -> Option<Result<Vec<i32>>> {
        if !self.is_done() {
            return None;
        }
        self.inner
            .result
            .lock()
            .unwrap_or_else(PoisonError::into_inner)
            .take()
    }

    /// Exchanges issued so far, in order.
    pub fn rounds(&self) -> Vec<Round> {
        self.inner
            .rounds
            .lock()
            .unwrap_or_else(PoisonError::into_inner)
            .clone()
    }

    /// Spins `stream` until done and returns the reduced vector.
    pub fn wait(&self, stream: &Stream) -> Result<Vec<i32>> {
        while !self.is_done() {
            stream.inner.progress()?;
        }
        self.take_result().unwrap_or(Err(Error::InvalidRequest))
    }
}

struct RecursiveDoubling {
    endpoint: Endpoint,
    stream: Stream,
    context: ContextId,
    buf: Vec<i32>,
    tmp: Vec<i32>,
    rank: usize,
    size: usize,
    mask: usize,
    round: u32,
    /// Receive, then send.
    reqs: [Option<Request>; 2],
    handle: AllreduceHandle,
}

impl RecursiveDoubling {
    fn poll(&mut self) -> PollOutcome {
        match self.step() {
            Ok(outcome) => outcome,
            Err(e) => {
                self.handle.finish(Err(e));
                PollOutcome::Done
            }
        }
    }

    fn step(&mut self) -> Result<PollOutcome> {
        let mut req_done = 0;
        for i in 0..2 {
            match &self.reqs[i] {
                None => req_done += 1,
                Some(req) if req.is_complete()? => {
                    let req = self.reqs[i].take().expect("checked above");
                    if i == 0 {
                        if let Some(Err(e)) = req.status() {
                            req.free()?;
                            return Err(e);
                        }
                        let bytes = req.take_buffer().unwrap_or_default();
                        decode_into(&bytes, &mut self.tmp);
                    }
                    req.free()?;
                    req_done += 1;
                }
                Some(_) => {}
            }
        }
        if req_done != 2 {
            return Ok(PollOutcome::Pending);
        }

        if self.mask > 1 {
            accumulate(&mut self.buf, &self.tmp);
        }

        if self.mask == self.size {
            self.handle.finish(Ok(std::mem::take(&mut self.buf)));
            return Ok(PollOutcome::Done);
        }

        let dst = self.rank ^ self.mask;
        let len = self.buf.len() * 4;
        self.reqs[0] = Some(self.endpoint.irecv(
            vec![0; len],
            dst,
            ALLREDUCE_TAG,
            self.context,
            &self.stream,
        )?);
        self.reqs[1] = Some(self.endpoint.isend(
            encode(&self.buf),
            dst,
            ALLREDUCE_TAG,
            self.context,
            &self.stream,
        )?);
        self.handle.log_round(Round {
            round: self.round,
            mask: self.mask,
            partner: dst,
        });
        self.round += 1;
        self.mask <<= 1;
        Ok(PollOutcome::Pending)
    }
}

/// Starts an in-place recursive-doubling allreduce of `buf` as an async task
/// on `stream`. The world size must be a power of two and `buf.len()` must
/// equal `count`. Integer overflow wraps.
pub fn allreduce_start(
    endpoint: &Endpoint,
    buf: Vec<i32>,
    count: usize,
    context: ContextId,
    stream: &Stream,
) -> Result<AllreduceHandle> {
    check_args(endpoint, &buf, count)?;
    let handle = AllreduceHandle::new();
    let state = RecursiveDoubling {
        endpoint: endpoint.clone(),
        stream: stream.clone(),
        context,
        tmp: vec![0; count],
        buf,
        rank: endpoint.rank(),
        size: endpoint.world_size(),
        mask: 1,
        round: 0,
        reqs: [None, None],
        handle: handle.clone(),
    };
    endpoint.engine().async_start(
        |thing: &mut AsyncThing<'_, RecursiveDoubling>| thing.state().poll(),
        state,
        stream,
    )?;
    Ok(handle)
}

/// Runs [`allreduce_start`] on the default stream and spins it to
/// completion, leaving the sum in `buf`.
pub fn allreduce_blocking(
    endpoint: &Endpoint,
    buf: &mut [i32],
    count: usize,
    context: ContextId,
) -> Result<()> {
    let stream = endpoint.engine().null_stream().clone();
    allreduce_blocking_on(endpoint, buf, count, context, &stream)
}

/// [`allreduce_blocking`] on an explicit stream.
pub fn allreduce_blocking_on(
    endpoint: &Endpoint,
    buf: &mut [i32],
    count: usize,
    context: ContextId,
    stream: &Stream,
) -> Result<()> {
    let handle = allreduce_start(endpoint, buf.to_vec(), count, context, stream)?;
    let out = handle.wait(stream)?;
    buf.copy_from_slice(&out);
    Ok(())
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
enum Phase {
    Start,
    Gather,
    Broadcast,
}

struct Baseline {
    endpoint: Endpoint,
    stream: Stream,
    context: ContextId,
    buf: Vec<i32>,
    phase: Phase,
    /// Root: one receive per non-root rank, in rank order. Others: the
    /// contribution send and the result receive.
    reqs: Vec<Request>,
    handle: AllreduceHandle,
}

impl Baseline {
    fn step(&mut self) -> Result<SchedulePoll> {
        let rank = self.endpoint.rank();
        let size = self.endpoint.world_size();
        let len = self.buf.len() * 4;
        let (ep, ctx, s) = (&self.endpoint, self.context, &self.stream);
        match self.phase {
            Phase::Start => {
                if size == 1 {
                    self.handle.finish(Ok(std::mem::take(&mut self.buf)));
                    return Ok(SchedulePoll::Done);
                }
                if rank == 0 {
                    for src in 1..size {
                        self.reqs
                            .push(ep.irecv(vec![0; len], src, BASELINE_TAG, ctx, s)?);
                    }
                } else {
                    self.reqs
                        .push(ep.isend(encode(&self.buf), 0, BASELINE_TAG, ctx, s)?);
                    self.reqs
                        .push(ep.irecv(vec![0; len], 0, BASELINE_TAG, ctx, s)?);
                }
                self.phase = Phase::Gather;
                Ok(SchedulePoll::Progress)
            }
            Phase::Gather | Phase::Broadcast => {
                for r in &self.reqs {
                    if !r.is_complete()? {
                        return Ok(SchedulePoll::Idle);
                    }
                }
                let reqs = std::mem::take(&mut self.reqs);
                for r in &reqs {
                    if let Some(Err(e)) = r.status() {
                        return Err(e);
                    }
                }
                if rank == 0 && self.phase == Phase::Gather {
                    let mut tmp = vec![0; self.buf.len()];
                    for r in &reqs {
                        decode_into(&r.take_buffer().unwrap_or_default(), &mut tmp);
                        accumulate(&mut self.buf, &tmp);
                    }
                    for dst in 1..size {
                        self.reqs
                            .push(ep.isend(encode(&self.buf), dst, BASELINE_TAG, ctx, s)?);
                    }
                    self.phase = Phase::Broadcast;
                    free_all(&reqs)?;
                    return Ok(SchedulePoll::Progress);
                }
                if rank != 0 {
                    decode_into(&reqs[1].take_buffer().unwrap_or_default(), &mut self.buf);
                }
                free_all(&reqs)?;
                self.handle.finish(Ok(std::mem::take(&mut self.buf)));
                Ok(SchedulePoll::Done)
            }
        }
    }
}

fn free_all(reqs: &[Request]) -> Result<()> {
    reqs.iter().try_for_each(Request::free)
}

impl CollectiveSchedule for Baseline {
    fn poll(&mut self) -> SchedulePoll {
        match self.step() {
            Ok(p) => p,
            Err(e) => {
                self.handle.finish(Err(e));
                SchedulePoll::Done
            }
        }
    }
}

/// Starts a gather-to-root, sum, broadcast allreduce driven by the world's
/// `collective` subsystem hook. Its requests are owned by `stream`.
pub fn baseline_allreduce_start(
    endpoint: &Endpoint,
    buf: Vec<i32>,
    count: usize,
    context: ContextId,
    stream: &Stream,
) -> Result<AllreduceHandle> {
    check_args(endpoint, &buf, count)?;
    endpoint.engine().check_stream(stream)?;
    let handle = AllreduceHandle::new();
    endpoint.world().add_schedule(Box::new(Baseline {
        endpoint: endpoint.clone(),
        stream: stream.clone(),
        context,
        buf,
        phase: Phase::Start,
        reqs: Vec::new(),
        handle: handle.clone(),
    }));
    Ok(handle)
}

/// Blocking baseline allreduce on the default stream.
pub fn baseline_allreduce(
    endpoint: &Endpoint,
    buf: &mut [i32],
    count: usize,
    context: ContextId,
) -> Result<()> {
    let stream = endpoint.engine().null_stream().clone();
    let handle = baseline_allreduce_start(endpoint, buf.to_vec(), count, context, &stream)?;
    let out = handle.wait(&stream)?;
    buf.copy_from_slice(&out);
    Ok(())
}
