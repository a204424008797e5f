//! Streams, poll-hook tasks and the collated progress pass.
//!
//! A [`Stream`] is a serial execution context. Each stream owns an ordered
//! registry of async tasks and a pass lock; calling
//! [`Engine::stream_progress`] runs exactly one collated pass:
//!
//! 1. every registered subsystem hook in ascending order, stopping at the
//!    first hook that reports progress;
//! 2. every registered task's poll hook once, in registration order. Tasks
//!    returning [`PollOutcome::Done`] are dropped on the spot.
//!
//! Passes on different streams share no lock on the hot path. Passes on the
//! same stream serialize on that stream's pass lock.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::fmt;
use std::mem;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, PoisonError};

use crate::error::{Error, Result};

/// Default position of the collective-schedule subsystem hook.
pub const COLLECTIVE_HOOK_ORDER: i32 = 10;
/// Default position of the transport subsystem hook; polled last.
pub const TRANSPORT_HOOK_ORDER: i32 = 100;

const SKIP_HINT_PREFIX: &str = "skip_subsystem:";

/// Creation-time key/value info attached to a stream.
pub type Hints = BTreeMap<String, String>;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StreamId(u64);

impl StreamId {
    pub const NULL: StreamId = StreamId(0);

    pub fn as_u64(self) -> u64 {
        self.0
    }
}

impl fmt::Display for StreamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TaskId(u64);

impl TaskId {
    pub fn as_u64(self) -> u64 {
        self.0
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Result of one invocation of a task's poll hook.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum PollOutcome {
    /// The task is finished. Its state is dropped and the hook is never
    /// called again.
    Done,
    /// The task is still waiting; poll it again next pass.
    Pending,
}

/// What a subsystem hook sees about the pass that invoked it.
#[derive(Copy, Clone, Debug)]
pub struct PassContext {
    pub stream: StreamId,
    pub pass: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TraceTarget {
    Hook(String),
    Task(TaskId),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum TraceOutcome {
    /// Subsystem hook reported progress.
    Progress,
    /// Subsystem hook had nothing to do.
    Idle,
    Done,
    Pending,
}

/// One record of the engine trace: who was invoked in which pass of which
/// stream, and what it returned.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub pass: u64,
    pub stream: StreamId,
    pub target: TraceTarget,
    pub outcome: TraceOutcome,
}

/// Engine-wide instrumentation counters. Only advanced while instrumentation
/// is enabled.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub passes: u64,
    pub task_polls: u64,
    pub task_retirements: u64,
    pub hook_calls: BTreeMap<String, u64>,
}

type HookFn = dyn Fn(&PassContext) -> bool + Send + Sync;

struct HookEntry {
    name: String,
    order: i32,
    poll: Box<HookFn>,
    calls: AtomicU64,
}

type HookList = Arc<[Arc<HookEntry>]>;

struct EngineShared {
    hooks: Mutex<HookList>,
    hook_generation: AtomicU64,
    next_stream: AtomicU64,
    next_task: AtomicU64,
    instrumented: AtomicBool,
    tracing: AtomicBool,
    trace: Mutex<Vec<TraceEvent>>,
    passes: AtomicU64,
    task_polls: AtomicU64,
    task_retirements: AtomicU64,
}

impl EngineShared {
    fn record(&self, event: TraceEvent) {
        lock(&self.trace).push(event);
    }

    fn next_task_id(&self) -> TaskId {
        TaskId(self.next_task.fetch_add(1, Ordering::Relaxed))
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(PoisonError::into_inner)
}

thread_local! {
    static IN_PROGRESS: Cell<bool> = const { Cell::new(false) };
}

/// Marks the current thread as inside a progress pass until dropped.
struct ProgressGuard;

impl ProgressGuard {
    fn enter() -> Result<Self> {
        IN_PROGRESS.with(|flag| {
            if flag.replace(true) {
                Err(Error::ProgressRecursion)
            } else {
                Ok(ProgressGuard)
            }
        })
    }
}

impl Drop for ProgressGuard {
    fn drop(&mut self) {
        IN_PROGRESS.with(|flag| flag.set(false));
    }
}

/// Whether the calling thread is currently executing a progress pass.
pub fn in_progress() -> bool {
    IN_PROGRESS.with(Cell::get)
}

trait ErasedTask: Send {
    fn poll(&mut self, cx: &mut TaskCx<'_>) -> PollOutcome;
}

struct Task<S, F> {
    state: S,
    hook: F,
}

impl<S, F> ErasedTask for Task<S, F>
where
    S: Send,
    F: FnMut(&mut AsyncThing<'_, S>) -> PollOutcome + Send,
{
    fn poll(&mut self, cx: &mut TaskCx<'_>) -> PollOutcome {
        let mut thing = AsyncThing {
            state: &mut self.state,
            task: cx.task,
            stream: cx.stream,
            pass: cx.pass,
            engine: cx.engine,
            spawned: &mut *cx.spawned,
        };
        (self.hook)(&mut thing)
    }
}

struct TaskRecord {
    id: TaskId,
    body: Box<dyn ErasedTask>,
}

type Spawned = (Arc<StreamInner>, TaskRecord);

struct TaskCx<'a> {
    task: TaskId,
    stream: StreamId,
    pass: u64,
    engine: &'a Arc<EngineShared>,
    spawned: &'a mut Vec<Spawned>,
}

/// The handle a poll hook receives: the task's user state plus the
/// engine-side context it needs to spawn follow-up tasks.
pub struct AsyncThing<'a, S> {
    state: &'a mut S,
    task: TaskId,
    stream: StreamId,
    pass: u64,
    engine: &'a Arc<EngineShared>,
    spawned: &'a mut Vec<Spawned>,
}

impl<S> AsyncThing<'_, S> {
    /// The state passed at registration. Always the same object for the
    /// lifetime of the task.
    pub fn state(&mut self) -> &mut S {
        self.state
    }

    pub fn task_id(&self) -> TaskId {
        self.task
    }

    pub fn stream_id(&self) -> StreamId {
        self.stream
    }

    /// Pass number of the owning stream in which this poll runs.
    pub fn pass(&self) -> u64 {
        self.pass
    }

    /// Stages a new task. It is appended to `stream` after the current hook
    /// returns and is first polled in a later pass.
    pub fn spawn<S2, F2>(&mut self, hook: F2, state: S2, stream: &Stream) -> Result<TaskId>
    where
        S2: Send + 'static,
        F2: FnMut(&mut AsyncThing<'_, S2>) -> PollOutcome + Send + 'static,
    {
        let target = &stream.inner;
        if !Arc::ptr_eq(&target.engine, self.engine) || target.freed.load(Ordering::Acquire) {
            return Err(Error::InvalidStream(target.id));
        }
        let id = self.engine.next_task_id();
        self.spawned.push((
            Arc::clone(target),
            TaskRecord {
                id,
                body: Box::new(Task { state, hook }),
            },
        ));
        Ok(id)
    }
}

struct PassState {
    passes: u64,
    hooks: HookList,
    hook_generation: u64,
    scratch: Vec<TaskRecord>,
    spawned: Vec<Spawned>,
}

pub(crate) struct StreamInner {
    id: StreamId,
    hints: Hints,
    skip: Vec<String>,
    engine: Arc<EngineShared>,
    pass: Mutex<PassState>,
    registry: Mutex<Vec<TaskRecord>>,
    pending: AtomicUsize,
    inflight: AtomicUsize,
    freed: AtomicBool,
}

impl StreamInner {
    fn new(id: StreamId, hints: Hints, engine: Arc<EngineShared>) -> Self {
        let skip = hints
            .iter()
            .filter_map(|(k, v)| {
                let name = k.strip_prefix(SKIP_HINT_PREFIX)?;
                (v == "true").then(|| name.to_owned())
            })
            .collect();
        StreamInner {
            id,
            hints,
            skip,
            engine,
            pass: Mutex::new(PassState {
                passes: 0,
                hooks: Arc::from(Vec::new()),
                hook_generation: u64::MAX,
                scratch: Vec::new(),
                spawned: Vec::new(),
            }),
            registry: Mutex::new(Vec::new()),
            pending: AtomicUsize::new(0),
            inflight: AtomicUsize::new(0),
            freed: AtomicBool::new(false),
        }
    }

    fn enqueue(&self, record: TaskRecord) {
        self.pending.fetch_add(1, Ordering::AcqRel);
        lock(&self.registry).push(record);
    }

    pub(crate) fn is_freed(&self) -> bool {
        self.freed.load(Ordering::Acquire)
    }

    pub(crate) fn attach_operation(&self) {
        self.inflight.fetch_add(1, Ordering::AcqRel);
    }

    pub(crate) fn detach_operation(&self) {
        self.inflight.fetch_sub(1, Ordering::AcqRel);
    }

    /// One collated pass. See the module docs.
    pub(crate) fn progress(self: &Arc<Self>) -> Result<bool> {
        let _guard = ProgressGuard::enter()?;
        if self.is_freed() {
            return Err(Error::InvalidStream(self.id));
        }
        let engine = &self.engine;
        let mut ps = lock(&self.pass);
        ps.passes += 1;
        let pass = ps.passes;
        let instrumented = engine.instrumented.load(Ordering::Relaxed);
        let tracing = engine.tracing.load(Ordering::Relaxed);
        if instrumented {
            engine.passes.fetch_add(1, Ordering::Relaxed);
        }

        let generation = engine.hook_generation.load(Ordering::Acquire);
        if generation != ps.hook_generation {
            let all = lock(&engine.hooks).clone();
            ps.hooks = all
                .iter()
                .filter(|h| !self.skip.iter().any(|s| *s == h.name))
                .cloned()
                .collect();
            ps.hook_generation = generation;
        }

        let mut made_progress = false;
        let cx = PassContext {
            stream: self.id,
            pass,
        };
        for hook in ps.hooks.iter() {
            let progressed = (hook.poll)(&cx);
            if instrumented {
                hook.calls.fetch_add(1, Ordering::Relaxed);
            }
            if tracing {
                engine.record(TraceEvent {
                    pass,
                    stream: self.id,
                    target: TraceTarget::Hook(hook.name.clone()),
                    outcome: if progressed {
                        TraceOutcome::Progress
                    } else {
                        TraceOutcome::Idle
                    },
                });
            }
            if progressed {
                made_progress = true;
                break;
            }
        }

        if self.pending.load(Ordering::Acquire) == 0 {
            return Ok(made_progress);
        }

        let mut current = mem::take(&mut ps.scratch);
        mem::swap(&mut *lock(&self.registry), &mut current);
        let mut spawned = mem::take(&mut ps.spawned);
        let mut polls = 0u64;
        let mut retired = 0u64;
        current.retain_mut(|record| {
            let outcome = {
                let mut tcx = TaskCx {
                    task: record.id,
                    stream: self.id,
                    pass,
                    engine,
                    spawned: &mut spawned,
                };
                record.body.poll(&mut tcx)
            };
            polls += 1;
            if tracing {
                engine.record(TraceEvent {
                    pass,
                    stream: self.id,
                    target: TraceTarget::Task(record.id),
                    outcome: match outcome {
                        PollOutcome::Done => TraceOutcome::Done,
                        PollOutcome::Pending => TraceOutcome::Pending,
                    },
                });
            }
            for (target, child) in spawned.drain(..) {
                target.enqueue(child);
            }
            match outcome {
                PollOutcome::Done => {
                    self.pending.fetch_sub(1, Ordering::AcqRel);
                    retired += 1;
                    false
                }
                PollOutcome::Pending => true,
            }
        });

        {
            let mut registry = lock(&self.registry);
            current.append(&mut registry);
            mem::swap(&mut *registry, &mut current);
        }
        ps.scratch = current;
        ps.spawned = spawned;

        if instrumented {
            engine.task_polls.fetch_add(polls, Ordering::Relaxed);
            engine
                .task_retirements
                .fetch_add(retired, Ordering::Relaxed);
        }
        Ok(made_progress || retired > 0)
    }
}

/// Handle to a serial execution context. Cheap to clone and to move between
/// threads.
#[derive(Clone)]
pub struct Stream {
    pub(crate) inner: Arc<StreamInner>,
}

impl Stream {
    pub fn id(&self) -> StreamId {
        self.inner.id
    }

    pub fn hints(&self) -> &Hints {
        &self.inner.hints
    }

    pub fn is_null(&self) -> bool {
        self.inner.id == StreamId::NULL
    }

    /// Whether the stream's passes skip the subsystem hook called `name`.
    pub fn skips_subsystem(&self, name: &str) -> bool {
        self.inner.skip.iter().any(|s| s == name)
    }
}

impl fmt::Debug for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Stream")
            .field("id", &self.inner.id)
            .field("pending", &self.inner.pending.load(Ordering::Relaxed))
            .field("freed", &self.inner.is_freed())
            .finish()
    }
}

/// The progress engine: the subsystem hook table, the default stream and the
/// instrumentation sinks.
#[derive(Clone)]
pub struct Engine {
    shared: Arc<EngineShared>,
    null: Stream,
}

impl Default for Engine {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let hooks: Vec<_> = lock(&self.shared.hooks)
            .iter()
            .map(|h| (h.order, h.name.clone()))
            .collect();
        f.debug_struct("Engine").field("hooks", &hooks).finish()
    }
}

impl Engine {
    pub fn new() -> Self {
        let shared = Arc::new(EngineShared {
            hooks: Mutex::new(Arc::from(Vec::new())),
            hook_generation: AtomicU64::new(0),
            next_stream: AtomicU64::new(1),
            next_task: AtomicU64::new(0),
            instrumented: AtomicBool::new(false),
            tracing: AtomicBool::new(false),
            trace: Mutex::new(Vec::new()),
            passes: AtomicU64::new(0),
            task_polls: AtomicU64::new(0),
            task_retirements: AtomicU64::new(0),
        });
        let null = Stream {
            inner: Arc::new(StreamInner::new(
                StreamId::NULL,
                Hints::new(),
                Arc::clone(&shared),
            )),
        };
        Engine { shared, null }
    }

    /// The default stream. It always exists and cannot be freed.
    pub fn null_stream(&self) -> &Stream {
        &self.null
    }

    pub fn stream_create(&self, hints: &Hints) -> Result<Stream> {
        let id = StreamId(self.shared.next_stream.fetch_add(1, Ordering::Relaxed));
        Ok(Stream {
            inner: Arc::new(StreamInner::new(
                id,
                hints.clone(),
                Arc::clone(&self.shared),
            )),
        })
    }

    /// Invalidates `stream`. Other clones of the handle become unusable.
    pub fn stream_free(&self, stream: Stream) -> Result<()> {
        let inner = self.own(&stream)?;
        if inner.id == StreamId::NULL {
            return Err(Error::FreeNullStream);
        }
        let _pass = lock(&inner.pass);
        let count = inner.pending.load(Ordering::Acquire);
        if count > 0 {
            return Err(Error::PendingTasks {
                stream: inner.id,
                count,
            });
        }
        let count = inner.inflight.load(Ordering::Acquire);
        if count > 0 {
            return Err(Error::PendingOperations {
                stream: inner.id,
                count,
            });
        }
        inner.freed.store(true, Ordering::Release);
        Ok(())
    }

    /// Registers a poll-hook task on `stream`. The hook runs once per pass of
    /// that stream until it returns [`PollOutcome::Done`].
    pub fn async_start<S, F>(&self, hook: F, state: S, stream: &Stream) -> Result<TaskId>
    where
        S: Send + 'static,
        F: FnMut(&mut AsyncThing<'_, S>) -> PollOutcome + Send + 'static,
    {
        let inner = self.own(stream)?;
        let id = self.shared.next_task_id();
        inner.enqueue(TaskRecord {
            id,
            body: Box::new(Task { state, hook }),
        });
        Ok(id)
    }

    /// Runs one collated pass on `stream` and reports whether anything
    /// advanced. Fails with [`Error::ProgressRecursion`] when called from
    /// inside a poll hook or subsystem hook.
    pub fn stream_progress(&self, stream: &Stream) -> Result<bool> {
        if in_progress() {
            return Err(Error::ProgressRecursion);
        }
        self.own(stream)?.progress()
    }

    /// Number of tasks registered on `stream` that have not returned DONE.
    pub fn pending_tasks(&self, stream: &Stream) -> usize {
        stream.inner.pending.load(Ordering::Acquire)
    }

    /// Adds a built-in subsystem hook. Hooks run in ascending `order` at the
    /// start of every pass of every stream whose hints do not exclude `name`.
    pub fn register_subsystem_hook<F>(&self, name: &str, order: i32, poll: F) -> Result<()>
    where
        F: Fn(&PassContext) -> bool + Send + Sync + 'static,
    {
        let mut hooks = lock(&self.shared.hooks);
        if hooks.iter().any(|h| h.order == order) {
            return Err(Error::DuplicateHookOrder(order));
        }
        let mut list: Vec<_> = hooks.iter().cloned().collect();
        list.push(Arc::new(HookEntry {
            name: name.to_owned(),
            order,
            poll: Box::new(poll),
            calls: AtomicU64::new(0),
        }));
        list.sort_by_key(|h| h.order);
        *hooks = list.into();
        self.shared.hook_generation.fetch_add(1, Ordering::AcqRel);
        Ok(())
    }

    pub fn unregister_subsystem_hook(&self, name: &str) -> Result<()> {
        let mut hooks = lock(&self.shared.hooks);
        if !hooks.iter().any(|h| h.name == name) {
            return Err(Error::UnknownHook(name.to_owned()));
        }
        let list: Vec<_> = hooks.iter().filter(|h| h.name != name).cloned().collect();
        *hooks = list.into();
        self.shared.hook_generation.fetch_add(1, Ordering::AcqRel);
        Ok(())
    }

    /// Names of the registered subsystem hooks in invocation order.
    pub fn subsystem_hooks(&self) -> Vec<(i32, String)> {
        lock(&self.shared.hooks)
            .iter()
            .map(|h| (h.order, h.name.clone()))
            .collect()
    }

    /// Enables or disables the counters returned by [`Engine::counters`].
    pub fn set_instrumentation(&self, on: bool) {
        self.shared.instrumented.store(on, Ordering::Relaxed);
    }

    /// Enables or disables per-invocation trace records. Also toggles
    /// instrumentation counters.
    pub fn set_tracing(&self, on: bool) {
        self.set_instrumentation(on);
        self.shared.tracing.store(on, Ordering::Relaxed);
    }

    pub fn counters(&self) -> Counters {
        let s = &self.shared;
        Counters {
            passes: s.passes.load(Ordering::Relaxed),
            task_polls: s.task_polls.load(Ordering::Relaxed),
            task_retirements: s.task_retirements.load(Ordering::Relaxed),
            hook_calls: lock(&s.hooks)
                .iter()
                .map(|h| (h.name.clone(), h.calls.load(Ordering::Relaxed)))
                .collect(),
        }
    }

    pub fn take_trace(&self) -> Vec<TraceEvent> {
        mem::take(&mut *lock(&self.shared.trace))
    }

    pub(crate) fn check_stream(&self, stream: &Stream) -> Result<()> {
        self.own(stream).map(|_| ())
    }

    fn own<'a>(&self, stream: &'a Stream) -> Result<&'a Arc<StreamInner>> {
        let inner = &stream.inner;
        if !Arc::ptr_eq(&inner.engine, &self.shared) || inner.is_freed() {
            return Err(Error::InvalidStream(inner.id));
        }
        Ok(inner)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;

    fn countdown() -> impl FnMut(&mut AsyncThing<'_, u32>) -> PollOutcome + Send {
        |thing| {
            let left = thing.state();
            if *left == 0 {
                PollOutcome::Done
            } else {
                *left -= 1;
                PollOutcome::Pending
            }
        }
    }

    #[test]
    fn fresh_streams_are_empty_and_distinct() {
        let engine = Engine::new();
        let a = engine.stream_create(&Hints::new()).unwrap();
        let b = engine.stream_create(&Hints::new()).unwrap();
        assert_ne!(a.id(), b.id());
        assert_ne!(a.id(), StreamId::NULL);
        assert_eq!(engine.pending_tasks(&a), 0);
        assert!(engine.null_stream().is_null());
    }

    #[test]
    fn free_rules() {
        let engine = Engine::new();
        assert_eq!(
            engine.stream_free(engine.null_stream().clone()),
            Err(Error::FreeNullStream)
        );
        assert!(Error::FreeNullStream
            .to_string()
            .contains("cannot free default stream"));

        let s = engine.stream_create(&Hints::new()).unwrap();
        engine.async_start(countdown(), 5u32, &s).unwrap();
        let err = engine.stream_free(s.clone()).unwrap_err();
        assert!(err.to_string().contains("pending tasks"), "{err}");

        while engine.pending_tasks(&s) > 0 {
            engine.stream_progress(&s).unwrap();
        }
        let keep = s.clone();
        engine.stream_free(s).unwrap();
        assert_eq!(
            engine.stream_progress(&keep),
            Err(Error::InvalidStream(keep.id()))
        );
        assert!(engine.async_start(countdown(), 0u32, &keep).is_err());
        assert!(engine.stream_free(keep).is_err());
    }

    #[test]
    fn expired_task_retires_on_first_pass() {
        let engine = Engine::new();
        let s = engine.null_stream();
        engine.async_start(countdown(), 0u32, s).unwrap();
        assert_eq!(engine.pending_tasks(s), 1);
        assert!(engine.stream_progress(s).unwrap());
        assert_eq!(engine.pending_tasks(s), 0);
        assert!(!engine.stream_progress(s).unwrap());
    }

    #[test]
    fn get_state_returns_registered_object() {
        let engine = Engine::new();
        let s = engine.null_stream();
        let boxed = Box::new(17u64);
        let addr = &*boxed as *const u64 as usize;
        let seen = Arc::new(Mutex::new(Vec::new()));
        let sink = Arc::clone(&seen);
        engine
            .async_start(
                move |thing: &mut AsyncThing<'_, (Box<u64>, u32)>| {
                    let (b, passes) = thing.state();
                    sink.lock()
                        .unwrap()
                        .push((&**b as *const u64 as usize, **b, *passes));
                    *passes += 1;
                    if *passes == 3 {
                        PollOutcome::Done
                    } else {
                        PollOutcome::Pending
                    }
                },
                (boxed, 0u32),
                s,
            )
            .unwrap();
        for _ in 0..3 {
            engine.stream_progress(s).unwrap();
        }
        let seen = seen.lock().unwrap();
        assert_eq!(*seen, vec![(addr, 17, 0), (addr, 17, 1), (addr, 17, 2)]);
    }

    #[test]
    fn tasks_only_run_on_their_stream() {
        let engine = Engine::new();
        let a = engine.stream_create(&Hints::new()).unwrap();
        let b = engine.stream_create(&Hints::new()).unwrap();
        let calls = Arc::new(AtomicUsize::new(0));
        let c = Arc::clone(&calls);
        engine
            .async_start(
                move |_: &mut AsyncThing<'_, ()>| {
                    c.fetch_add(1, Ordering::Relaxed);
                    PollOutcome::Pending
                },
                (),
                &a,
            )
            .unwrap();
        for _ in 0..10 {
            engine.stream_progress(&b).unwrap();
        }
        assert_eq!(calls.load(Ordering::Relaxed), 0);
        engine.stream_progress(&a).unwrap();
        assert_eq!(calls.load(Ordering::Relaxed), 1);
    }

    #[test]
    fn spawned_child_runs_next_pass_at_tail() {
        let engine = Engine::new();
        engine.set_tracing(true);
        let s = engine.null_stream().clone();
        let target = s.clone();
        // one long-lived sibling registered after the parent
        engine
            .async_start(
                move |thing: &mut AsyncThing<'_, bool>| {
                    if !*thing.state() {
                        *thing.state() = true;
                        thing
                            .spawn(|_: &mut AsyncThing<'_, ()>| PollOutcome::Done, (), &target)
                            .unwrap();
                    }
                    PollOutcome::Done
                },
                false,
                &s,
            )
            .unwrap();
        let sibling = engine.async_start(countdown(), 1u32, &s).unwrap();
        engine.stream_progress(&s).unwrap();
        let first = engine.take_trace();
        let polled: Vec<_> = first
            .iter()
            .filter_map(|e| match e.target {
                TraceTarget::Task(t) => Some(t),
                _ => None,
            })
            .collect();
        // the child is not polled in the spawning pass
        assert_eq!(polled.len(), 2);
        assert_eq!(polled[1], sibling);
        assert_eq!(engine.pending_tasks(&s), 2);

        engine.stream_progress(&s).unwrap();
        let second: Vec<_> = engine
            .take_trace()
            .into_iter()
            .filter_map(|e| match e.target {
                TraceTarget::Task(t) => Some((t, e.outcome)),
                _ => None,
            })
            .collect();
        assert_eq!(second.len(), 2);
        assert_eq!(second[0], (sibling, TraceOutcome::Done));
        assert!(second[1].0 > sibling);
        assert_eq!(engine.pending_tasks(&s), 0);
    }

    #[test]
    fn spawn_to_freed_stream_fails() {
        let engine = Engine::new();
        let dead = engine.stream_create(&Hints::new()).unwrap();
        let handle = dead.clone();
        engine.stream_free(dead).unwrap();
        let result = Arc::new(Mutex::new(None));
        let out = Arc::clone(&result);
        engine
            .async_start(
                move |thing: &mut AsyncThing<'_, ()>| {
                    let r =
                        thing.spawn(|_: &mut AsyncThing<'_, ()>| PollOutcome::Done, (), &handle);
                    *out.lock().unwrap() = Some(r.map(|_| ()));
                    PollOutcome::Done
                },
                (),
                engine.null_stream(),
            )
            .unwrap();
        engine.stream_progress(engine.null_stream()).unwrap();
        assert!(matches!(
            *result.lock().unwrap(),
            Some(Err(Error::InvalidStream(_)))
        ));
    }

    #[test]
    fn recursion_is_rejected() {
        let engine = Engine::new();
        let inner = engine.clone();
        let observed = Arc::new(Mutex::new(None));
        let out = Arc::clone(&observed);
        engine
            .async_start(
                move |_: &mut AsyncThing<'_, ()>| {
                    *out.lock().unwrap() = Some(inner.stream_progress(inner.null_stream()));
                    PollOutcome::Done
                },
                (),
                engine.null_stream(),
            )
            .unwrap();
        engine.stream_progress(engine.null_stream()).unwrap();
        assert_eq!(
            *observed.lock().unwrap(),
            Some(Err(Error::ProgressRecursion))
        );
        // the guard is released after the pass
        assert!(!in_progress());
        assert_eq!(engine.stream_progress(engine.null_stream()), Ok(false));
    }

    #[test]
    fn hooks_run_in_order_with_early_exit() {
        let engine = Engine::new();
        engine.set_tracing(true);
        let fire = Arc::new(AtomicBool::new(false));
        let f = Arc::clone(&fire);
        engine
            .register_subsystem_hook("late", 100, |_| false)
            .unwrap();
        engine
            .register_subsystem_hook("early", 10, move |_| f.load(Ordering::Relaxed))
            .unwrap();
        assert_eq!(
            engine.subsystem_hooks(),
            vec![(10, "early".to_owned()), (100, "late".to_owned())]
        );
        assert_eq!(
            engine.register_subsystem_hook("dup", 10, |_| false),
            Err(Error::DuplicateHookOrder(10))
        );

        let s = engine.null_stream();
        engine.async_start(countdown(), 1u32, s).unwrap();
        assert!(!engine.stream_progress(s).unwrap());
        fire.store(true, Ordering::Relaxed);
        assert!(engine.stream_progress(s).unwrap());
        let trace = engine.take_trace();
        let pass2: Vec<_> = trace.iter().filter(|e| e.pass == 2).collect();
        assert_eq!(pass2[0].target, TraceTarget::Hook("early".into()));
        assert_eq!(pass2[0].outcome, TraceOutcome::Progress);
        // late hook skipped, task still polled
        assert!(matches!(pass2[1].target, TraceTarget::Task(_)));
        assert_eq!(pass2.len(), 2);
        let c = engine.counters();
        assert_eq!(c.hook_calls["early"], 2);
        assert_eq!(c.hook_calls["late"], 1);
        assert_eq!(c.passes, 2);
    }

    #[test]
    fn hint_skips_named_hook() {
        let engine = Engine::new();
        engine.set_instrumentation(true);
        engine
            .register_subsystem_hook("transport", TRANSPORT_HOOK_ORDER, |_| false)
            .unwrap();
        let mut hints = Hints::new();
        hints.insert("skip_subsystem:transport".into(), "true".into());
        hints.insert("unrelated".into(), "whatever".into());
        let s = engine.stream_create(&hints).unwrap();
        assert!(s.skips_subsystem("transport"));
        for _ in 0..5 {
            engine.stream_progress(&s).unwrap();
        }
        assert_eq!(engine.counters().hook_calls["transport"], 0);
        engine.stream_progress(engine.null_stream()).unwrap();
        assert_eq!(engine.counters().hook_calls["transport"], 1);
    }

    #[test]
    fn unregister_removes_hook() {
        let engine = Engine::new();
        engine.register_subsystem_hook("x", 1, |_| true).unwrap();
        assert!(engine.stream_progress(engine.null_stream()).unwrap());
        engine.unregister_subsystem_hook("x").unwrap();
        assert!(!engine.stream_progress(engine.null_stream()).unwrap());
        assert!(matches!(
            engine.unregister_subsystem_hook("x"),
            Err(Error::UnknownHook(_))
        ));
    }

    #[test]
    fn foreign_stream_rejected() {
        let a = Engine::new();
        let b = Engine::new();
        let s = b.stream_create(&Hints::new()).unwrap();
        assert!(matches!(
            a.stream_progress(&s),
            Err(Error::InvalidStream(_))
        ));
    }
}
