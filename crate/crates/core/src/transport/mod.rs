//! In-process message transport.
//!
//! A [`World`] is a set of endpoints (ranks) living in one process. Each
//! endpoint owns a [`SimulatedNic`](nic) work queue, an incoming packet queue,
//! a posted-receive list and an unexpected-message list. Sends pick one of
//! three protocols by size:
//!
//! | class       | packets                  | sender wait blocks |
//! |-------------|--------------------------|--------------------|
//! | lightweight | EAGER (payload copied)   | 0                  |
//! | eager       | EAGER                    | 1 (NIC completion) |
//! | rendezvous  | RTS, CTS, RDV_DATA       | 2 (CTS, data)      |
//!
//! plus an optional pipelined rendezvous for very large messages. Protocol
//! state machines only move inside [`World::poll`], which the world registers
//! with the engine as the `transport` subsystem hook.

mod envelope;
mod nic;
mod trace;

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::mem;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, PoisonError, Weak};

use bytes::Bytes;

pub use envelope::{
    ContextId, MessageEnvelope, Protocol, SendClass, Thresholds, PIPELINE_CHUNK,
    PIPELINE_MAX_IN_FLIGHT,
};
pub use nic::LatencyModel;
pub use trace::{
    PacketEvent, PacketEventKind, ProtocolState, RecvState, SendState, StateTransition,
    TransportStats,
};

use crate::clock::Clock;
use crate::collective::{CollectiveSchedule, SchedulePoll};
use crate::engine::{Engine, Stream, COLLECTIVE_HOOK_ORDER, TRANSPORT_HOOK_ORDER};
use crate::error::{Error, Result};
use crate::request::{Request, RequestKind, Status};
use nic::{Packet, SimulatedNic};

/// Subsystem hook name of the transport.
pub const TRANSPORT_HOOK: &str = "transport";
/// Subsystem hook name of the collective-schedule driver.
pub const COLLECTIVE_HOOK: &str = "collective";

/// Identifier of one protocol state machine.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OpId(pub(crate) u64);

impl fmt::Display for OpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(PoisonError::into_inner)
}

struct SendOp {
    request: Request,
    state: SendState,
    class: SendClass,
    dest: usize,
    tag: i32,
    context: ContextId,
    data: Bytes,
    nic_flag: Option<Arc<AtomicBool>>,
    cts: Option<OpId>,
    next_offset: usize,
    in_flight: VecDeque<Arc<AtomicBool>>,
}

struct RecvOp {
    request: Request,
    state: RecvState,
    source: usize,
    tag: i32,
    context: ContextId,
    buffer: Vec<u8>,
    message_len: usize,
    eager_arrived: bool,
    rdv_send_op: Option<OpId>,
    received: usize,
}

impl RecvOp {
    /// Copies `payload` into the user buffer at `offset`, dropping whatever
    /// does not fit.
    fn deposit(&mut self, offset: usize, payload: &[u8]) {
        let cap = self.buffer.len();
        if offset < cap {
            let n = payload.len().min(cap - offset);
            self.buffer[offset..offset + n].copy_from_slice(&payload[..n]);
        }
        self.received += payload.len();
    }
}

struct PostedRecv {
    source: usize,
    tag: i32,
    context: ContextId,
    op: OpId,
}

struct Unexpected {
    envelope: MessageEnvelope,
    payload: Option<Vec<u8>>,
    send_op: OpId,
}

struct EndpointState {
    nic: SimulatedNic,
    posted: VecDeque<PostedRecv>,
    unexpected: VecDeque<Unexpected>,
    sends: BTreeMap<OpId, SendOp>,
    recvs: BTreeMap<OpId, RecvOp>,
}

impl EndpointState {
    fn take_posted(&mut self, env: &MessageEnvelope) -> Option<OpId> {
        let idx = self
            .posted
            .iter()
            .position(|p| env.matches(p.source, p.tag, p.context))?;
        self.posted.remove(idx).map(|p| p.op)
    }
}

struct EndpointShared {
    in_queue: Mutex<VecDeque<Packet>>,
    state: Mutex<EndpointState>,
}

#[derive(Default)]
struct Counters {
    packets_sent: AtomicU64,
    transitions: AtomicU64,
    intermediate_copies: AtomicU64,
    sends_issued: AtomicU64,
    sends_completed: AtomicU64,
    recvs_completed: AtomicU64,
}

pub(crate) struct WorldShared {
    engine: Engine,
    size: usize,
    clock: Clock,
    lightweight: AtomicUsize,
    eager: AtomicUsize,
    pipeline: AtomicUsize,
    next_context: AtomicU32,
    next_op: AtomicU64,
    endpoints: Box<[EndpointShared]>,
    /// Transmissions queued, packets undrained and operations unfinished.
    outstanding: AtomicUsize,
    polls: AtomicU64,
    instrumented: AtomicBool,
    counters: Counters,
    packet_trace: Mutex<Vec<PacketEvent>>,
    transitions: Mutex<Vec<StateTransition>>,
    schedules: Mutex<Vec<Box<dyn CollectiveSchedule>>>,
    schedule_count: AtomicUsize,
}

impl WorldShared {
    fn thresholds(&self) -> Thresholds {
        let pipeline = self.pipeline.load(Ordering::Relaxed);
        Thresholds {
            lightweight: self.lightweight.load(Ordering::Relaxed),
            eager: self.eager.load(Ordering::Relaxed),
            pipeline: (pipeline != usize::MAX).then_some(pipeline),
        }
    }

    fn instrumented(&self) -> bool {
        self.instrumented.load(Ordering::Relaxed)
    }

    fn bump(&self, counter: &AtomicU64) {
        if self.instrumented() {
            counter.fetch_add(1, Ordering::Relaxed);
        }
    }

    fn check_rank(&self, rank: usize) -> Result<()> {
        if rank >= self.size {
            return Err(Error::InvalidRank {
                rank,
                size: self.size,
            });
        }
        Ok(())
    }

    fn check_context(&self, context: ContextId) -> Result<()> {
        if context.0 >= self.next_context.load(Ordering::Acquire) {
            return Err(Error::InvalidContext(context.0));
        }
        Ok(())
    }

    fn next_op(&self) -> OpId {
        OpId(self.next_op.fetch_add(1, Ordering::Relaxed))
    }

    fn event(
        &self,
        src: usize,
        dst: usize,
        tag: i32,
        protocol: Protocol,
        bytes: usize,
        event: PacketEventKind,
    ) {
        if self.instrumented() {
            lock(&self.packet_trace).push(PacketEvent {
                pass: self.polls.load(Ordering::Relaxed),
                src,
                dst,
                tag,
                protocol,
                bytes,
                event,
            });
        }
    }

    fn transition(&self, rank: usize, op: OpId, request: &Request, state: ProtocolState) {
        if self.instrumented() {
            self.counters.transitions.fetch_add(1, Ordering::Relaxed);
            lock(&self.transitions).push(StateTransition {
                pass: self.polls.load(Ordering::Relaxed),
                rank,
                op,
                request: request.id(),
                state,
            });
        }
    }

    fn submit(&self, nic: &mut SimulatedNic, packet: Packet, flag: Option<Arc<AtomicBool>>) {
        let env = packet.envelope;
        self.event(
            env.source,
            packet.dest,
            env.tag,
            env.protocol,
            env.length,
            PacketEventKind::Send,
        );
        self.bump(&self.counters.packets_sent);
        self.outstanding.fetch_add(1, Ordering::AcqRel);
        nic.submit(packet, self.clock.now_ns(), flag);
    }

    /// The transport subsystem hook.
    fn poll(&self) -> bool {
        if self.outstanding.load(Ordering::Acquire) == 0 {
            return false;
        }
        self.polls.fetch_add(1, Ordering::Relaxed);
        let now = self.clock.now_ns();
        let mut progressed = false;

        // Transmissions whose delay has elapsed land in the peer's queue.
        for ep in self.endpoints.iter() {
            let Ok(mut st) = ep.state.try_lock() else {
                continue;
            };
            while let Some(tx) = st.nic.pop_ready(now) {
                lock(&self.endpoints[tx.packet.dest].in_queue).push_back(tx.packet);
                if let Some(flag) = tx.flag {
                    flag.store(true, Ordering::Release);
                }
                progressed = true;
            }
        }

        for (rank, ep) in self.endpoints.iter().enumerate() {
            let Ok(mut st) = ep.state.try_lock() else {
                continue;
            };
            let arrived = mem::take(&mut *lock(&ep.in_queue));
            for packet in arrived {
                self.arrive(rank, &mut st, packet);
                progressed = true;
            }
        }

        for (rank, ep) in self.endpoints.iter().enumerate() {
            let Ok(mut st) = ep.state.try_lock() else {
                continue;
            };
            progressed |= self.advance(rank, &mut st);
        }

        if !progressed && self.clock.is_virtual() {
            let next = self
                .endpoints
                .iter()
                .filter_map(|ep| ep.state.try_lock().ok()?.nic.next_ready_at())
                .min();
            if let Some(t) = next {
                self.clock.advance_to(t);
            }
        }
        progressed
    }

    fn arrive(&self, rank: usize, st: &mut EndpointState, packet: Packet) {
        self.outstanding.fetch_sub(1, Ordering::AcqRel);
        let env = packet.envelope;
        self.event(
            env.source,
            rank,
            env.tag,
            env.protocol,
            env.length,
            PacketEventKind::Arrive,
        );
        match env.protocol {
            Protocol::Eager | Protocol::Rts => {
                if let Some(op_id) = st.take_posted(&env) {
                    let op = st.recvs.get_mut(&op_id).expect("posted receive has an op");
                    op.message_len = env.length;
                    if env.protocol == Protocol::Eager {
                        op.deposit(0, packet.payload.as_deref().unwrap_or(&[]));
                        op.eager_arrived = true;
                    } else {
                        op.rdv_send_op = Some(packet.send_op);
                    }
                    self.event(
                        env.source,
                        rank,
                        env.tag,
                        env.protocol,
                        env.length,
                        PacketEventKind::Match,
                    );
                } else {
                    let payload = packet.payload.map(|p| {
                        self.bump(&self.counters.intermediate_copies);
                        p.to_vec()
                    });
                    st.unexpected.push_back(Unexpected {
                        envelope: env,
                        payload,
                        send_op: packet.send_op,
                    });
                }
            }
            Protocol::Cts => {
                if let Some(op) = st.sends.get_mut(&packet.send_op) {
                    op.cts = packet.recv_op;
                }
            }
            Protocol::RdvData => {
                let op = packet.recv_op.and_then(|id| st.recvs.get_mut(&id));
                if let Some(op) = op {
                    op.deposit(packet.offset, packet.payload.as_deref().unwrap_or(&[]));
                }
            }
        }
    }

    /// Moves every state machine of one endpoint by at most one transition.
    fn advance(&self, rank: usize, st: &mut EndpointState) -> bool {
        let mut progressed = false;
        let EndpointState {
            nic, sends, recvs, ..
        } = st;

        sends.retain(|&id, op| {
            let flag_set = || {
                op.nic_flag
                    .as_ref()
                    .is_some_and(|f| f.load(Ordering::Acquire))
            };
            match op.state {
                SendState::EagerWaitNic | SendState::RdvWaitData if flag_set() => {
                    self.finish_send(rank, id, op);
                    progressed = true;
                    false
                }
                SendState::RdvWaitCts if op.cts.is_some() => {
                    if op.class == SendClass::Pipeline {
                        op.state = SendState::PipelineStreaming;
                        self.pump_pipeline(rank, id, op, nic);
                    } else {
                        let flag = Arc::new(AtomicBool::new(false));
                        let packet = Packet {
                            envelope: MessageEnvelope {
                                source: rank,
                                tag: op.tag,
                                context: op.context,
                                length: op.data.len(),
                                protocol: Protocol::RdvData,
                            },
                            dest: op.dest,
                            payload: Some(op.data.clone()),
                            offset: 0,
                            send_op: id,
                            recv_op: op.cts,
                        };
                        self.submit(nic, packet, Some(Arc::clone(&flag)));
                        op.nic_flag = Some(flag);
                        op.state = SendState::RdvWaitData;
                    }
                    self.transition(rank, id, &op.request, ProtocolState::Send(op.state));
                    progressed = true;
                    true
                }
                SendState::PipelineStreaming => {
                    progressed |= self.pump_pipeline(rank, id, op, nic);
                    if op.next_offset >= op.data.len() && op.in_flight.is_empty() {
                        self.finish_send(rank, id, op);
                        progressed = true;
                        false
                    } else {
                        true
                    }
                }
                _ => true,
            }
        });

        recvs.retain(|&id, op| match op.state {
            RecvState::WaitEager if op.eager_arrived => {
                self.finish_recv(rank, id, op, Protocol::Eager);
                progressed = true;
                false
            }
            RecvState::WaitEager if op.rdv_send_op.is_some() => {
                op.state = RecvState::RdvSendCts;
                self.transition(rank, id, &op.request, ProtocolState::Recv(op.state));
                progressed = true;
                true
            }
            RecvState::RdvSendCts => {
                let packet = Packet {
                    envelope: MessageEnvelope {
                        source: rank,
                        tag: op.tag,
                        context: op.context,
                        length: 0,
                        protocol: Protocol::Cts,
                    },
                    dest: op.source,
                    payload: None,
                    offset: 0,
                    send_op: op.rdv_send_op.expect("rendezvous receive knows its sender"),
                    recv_op: Some(id),
                };
                self.submit(nic, packet, None);
                op.state = RecvState::RdvWaitData;
                self.transition(rank, id, &op.request, ProtocolState::Recv(op.state));
                progressed = true;
                true
            }
            RecvState::RdvWaitData if op.received >= op.message_len => {
                self.finish_recv(rank, id, op, Protocol::RdvData);
                progressed = true;
                false
            }
            _ => true,
        });
        progressed
    }

    /// Retires NIC-complete chunks and keeps up to `PIPELINE_MAX_IN_FLIGHT`
    /// chunks on the wire.
    fn pump_pipeline(
        &self,
        rank: usize,
        id: OpId,
        op: &mut SendOp,
        nic: &mut SimulatedNic,
    ) -> bool {
        let mut progressed = false;
        while op
            .in_flight
            .front()
            .is_some_and(|f| f.load(Ordering::Acquire))
        {
            op.in_flight.pop_front();
            progressed = true;
        }
        let len = op.data.len();
        while op.in_flight.len() < PIPELINE_MAX_IN_FLIGHT && op.next_offset < len {
            let end = (op.next_offset + PIPELINE_CHUNK).min(len);
            let flag = Arc::new(AtomicBool::new(false));
            let packet = Packet {
                envelope: MessageEnvelope {
                    source: rank,
                    tag: op.tag,
                    context: op.context,
                    length: end - op.next_offset,
                    protocol: Protocol::RdvData,
                },
                dest: op.dest,
                payload: Some(op.data.slice(op.next_offset..end)),
                offset: op.next_offset,
                send_op: id,
                recv_op: op.cts,
            };
            self.submit(nic, packet, Some(Arc::clone(&flag)));
            op.in_flight.push_back(flag);
            op.next_offset = end;
            progressed = true;
        }
        progressed
    }

    fn finish_send(&self, rank: usize, id: OpId, op: &mut SendOp) {
        op.state = SendState::Complete;
        self.transition(rank, id, &op.request, ProtocolState::Send(op.state));
        let protocol = match op.class {
            SendClass::Lightweight | SendClass::Eager => Protocol::Eager,
            SendClass::Rendezvous | SendClass::Pipeline => Protocol::RdvData,
        };
        let length = op.data.len();
        self.event(
            rank,
            op.dest,
            op.tag,
            protocol,
            length,
            PacketEventKind::Complete,
        );
        op.data = Bytes::new();
        op.request.finish(Ok(Status {
            source: rank,
            tag: op.tag,
            length,
        }));
        self.bump(&self.counters.sends_completed);
        self.outstanding.fetch_sub(1, Ordering::AcqRel);
    }

    fn finish_recv(&self, rank: usize, id: OpId, op: &mut RecvOp, protocol: Protocol) {
        op.state = RecvState::Complete;
        self.transition(rank, id, &op.request, ProtocolState::Recv(op.state));
        self.event(
            op.source,
            rank,
            op.tag,
            protocol,
            op.message_len,
            PacketEventKind::Complete,
        );
        let capacity = op.buffer.len();
        let outcome = if op.message_len > capacity {
            Err(Error::Truncated {
                length: op.message_len,
                capacity,
            })
        } else {
            Ok(Status {
                source: op.source,
                tag: op.tag,
                length: op.message_len,
            })
        };
        op.request.set_recv_buffer(mem::take(&mut op.buffer));
        op.request.finish(outcome);
        self.bump(&self.counters.recvs_completed);
        self.outstanding.fetch_sub(1, Ordering::AcqRel);
    }

    pub(crate) fn add_schedule(&self, schedule: Box<dyn CollectiveSchedule>) {
        let mut list = lock(&self.schedules);
        list.push(schedule);
        self.schedule_count.fetch_add(1, Ordering::AcqRel);
    }

    /// The collective subsystem hook.
    fn poll_schedules(&self) -> bool {
        if self.schedule_count.load(Ordering::Acquire) == 0 {
            return false;
        }
        let Ok(mut list) = self.schedules.try_lock() else {
            return false;
        };
        let mut progressed = false;
        list.retain_mut(|s| match s.poll() {
            SchedulePoll::Idle => true,
            SchedulePoll::Progress => {
                progressed = true;
                true
            }
            SchedulePoll::Done => {
                progressed = true;
                self.schedule_count.fetch_sub(1, Ordering::AcqRel);
                false
            }
        });
        progressed
    }
}

/// A set of in-process endpoints sharing one engine.
///
/// Creating a world registers the `transport` and `collective` subsystem
/// hooks with the engine; dropping it unregisters them. One world per engine.
pub struct World {
    shared: Arc<WorldShared>,
}

impl fmt::Debug for World {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("World")
            .field("size", &self.shared.size)
            .field("thresholds", &self.shared.thresholds())
            .finish()
    }
}

impl World {
    /// A world on the monotonic clock.
    pub fn new(engine: &Engine, size: usize, latency: LatencyModel) -> Result<World> {
        Self::with_clock(engine, size, latency, Clock::monotonic())
    }

    /// A world whose NIC delays are measured on `clock`. With a virtual
    /// clock, an otherwise idle transport pass jumps time forward to the next
    /// pending transmission.
    pub fn with_clock(
        engine: &Engine,
        size: usize,
        latency: LatencyModel,
        clock: Clock,
    ) -> Result<World> {
        if size == 0 {
            return Err(Error::EmptyWorld);
        }
        let defaults = Thresholds::default();
        let endpoints = (0..size)
            .map(|_| EndpointShared {
                in_queue: Mutex::new(VecDeque::new()),
                state: Mutex::new(EndpointState {
                    nic: SimulatedNic::new(latency),
                    posted: VecDeque::new(),
                    unexpected: VecDeque::new(),
                    sends: BTreeMap::new(),
                    recvs: BTreeMap::new(),
                }),
            })
            .collect();
        let shared = Arc::new(WorldShared {
            engine: engine.clone(),
            size,
            clock,
            lightweight: AtomicUsize::new(defaults.lightweight),
            eager: AtomicUsize::new(defaults.eager),
            pipeline: AtomicUsize::new(usize::MAX),
            next_context: AtomicU32::new(ContextId::DEFAULT.0 + 1),
            next_op: AtomicU64::new(0),
            endpoints,
            outstanding: AtomicUsize::new(0),
            polls: AtomicU64::new(0),
            instrumented: AtomicBool::new(false),
            counters: Counters::default(),
            packet_trace: Mutex::new(Vec::new()),
            transitions: Mutex::new(Vec::new()),
            schedules: Mutex::new(Vec::new()),
            schedule_count: AtomicUsize::new(0),
        });

        let weak: Weak<WorldShared> = Arc::downgrade(&shared);
        engine.register_subsystem_hook(TRANSPORT_HOOK, TRANSPORT_HOOK_ORDER, move |_| {
            weak.upgrade().is_some_and(|w| w.poll())
        })?;
        let weak: Weak<WorldShared> = Arc::downgrade(&shared);
        let registered =
            engine.register_subsystem_hook(COLLECTIVE_HOOK, COLLECTIVE_HOOK_ORDER, move |_| {
                weak.upgrade().is_some_and(|w| w.poll_schedules())
            });
        if let Err(e) = registered {
            let _ = engine.unregister_subsystem_hook(TRANSPORT_HOOK);
            return Err(e);
        }
        Ok(World { shared })
    }

    pub fn size(&self) -> usize {
        self.shared.size
    }

    pub fn engine(&self) -> &Engine {
        &self.shared.engine
    }

    pub fn clock(&self) -> &Clock {
        &self.shared.clock
    }

    pub fn endpoint(&self, rank: usize) -> Result<Endpoint> {
        self.shared.check_rank(rank)?;
        Ok(Endpoint {
            world: Arc::clone(&self.shared),
            rank,
        })
    }

    pub fn endpoints(&self) -> Vec<Endpoint> {
        (0..self.size())
            .map(|rank| Endpoint {
                world: Arc::clone(&self.shared),
                rank,
            })
            .collect()
    }

    /// Allocates a fresh communicator context.
    pub fn context_create(&self) -> ContextId {
        ContextId(self.shared.next_context.fetch_add(1, Ordering::AcqRel))
    }

    pub fn thresholds(&self) -> Thresholds {
        self.shared.thresholds()
    }

    /// Changes the protocol thresholds for subsequent sends.
    pub fn set_thresholds(&self, lightweight: usize, eager: usize) -> Result<()> {
        let t = Thresholds {
            lightweight,
            eager,
            pipeline: self.shared.thresholds().pipeline,
        };
        t.validate()?;
        self.shared
            .lightweight
            .store(lightweight, Ordering::Relaxed);
        self.shared.eager.store(eager, Ordering::Relaxed);
        Ok(())
    }

    /// Enables pipelined rendezvous for messages longer than `threshold`.
    pub fn set_pipeline_threshold(&self, threshold: Option<usize>) -> Result<()> {
        self.shared.thresholds().with_pipeline(threshold)?;
        self.shared
            .pipeline
            .store(threshold.unwrap_or(usize::MAX), Ordering::Relaxed);
        Ok(())
    }

    /// Turns on counters, the packet trace and the state-transition trace.
    pub fn set_instrumentation(&self, on: bool) {
        self.shared.instrumented.store(on, Ordering::Relaxed);
    }

    pub fn stats(&self) -> TransportStats {
        let c = &self.shared.counters;
        TransportStats {
            polls: self.shared.polls.load(Ordering::Relaxed),
            packets_sent: c.packets_sent.load(Ordering::Relaxed),
            transitions: c.transitions.load(Ordering::Relaxed),
            intermediate_copies: c.intermediate_copies.load(Ordering::Relaxed),
            sends_issued: c.sends_issued.load(Ordering::Relaxed),
            sends_completed: c.sends_completed.load(Ordering::Relaxed),
            recvs_completed: c.recvs_completed.load(Ordering::Relaxed),
        }
    }

    pub fn take_packet_trace(&self) -> Vec<PacketEvent> {
        mem::take(&mut *lock(&self.shared.packet_trace))
    }

    pub fn take_transitions(&self) -> Vec<StateTransition> {
        mem::take(&mut *lock(&self.shared.transitions))
    }

    /// Current state of every live protocol state machine, keyed by op.
    pub fn live_states(&self) -> BTreeMap<OpId, ProtocolState> {
        let mut out = BTreeMap::new();
        for ep in self.shared.endpoints.iter() {
            let st = lock(&ep.state);
            out.extend(
                st.sends
                    .iter()
                    .map(|(id, op)| (*id, ProtocolState::Send(op.state))),
            );
            out.extend(
                st.recvs
                    .iter()
                    .map(|(id, op)| (*id, ProtocolState::Recv(op.state))),
            );
        }
        out
    }

    /// Messages sitting in unexpected lists across all endpoints.
    pub fn unexpected_count(&self) -> usize {
        self.shared
            .endpoints
            .iter()
            .map(|ep| lock(&ep.state).unexpected.len())
            .sum()
    }

    /// Receives posted and not yet matched, across all endpoints.
    pub fn posted_count(&self) -> usize {
        self.shared
            .endpoints
            .iter()
            .map(|ep| lock(&ep.state).posted.len())
            .sum()
    }

    /// Whether no transmission, undrained packet or unfinished operation
    /// remains.
    pub fn is_quiescent(&self) -> bool {
        self.shared.outstanding.load(Ordering::Acquire) == 0
    }

    /// Runs the transport hook directly, outside any stream pass.
    pub fn poll(&self) -> bool {
        self.shared.poll()
    }
}

impl Drop for World {
    fn drop(&mut self) {
        let _ = self.shared.engine.unregister_subsystem_hook(TRANSPORT_HOOK);
        let _ = self
            .shared
            .engine
            .unregister_subsystem_hook(COLLECTIVE_HOOK);
    }
}

/// One rank of a [`World`]. Cheap to clone and to move to the thread that
/// plays the rank.
#[derive(Clone)]
pub struct Endpoint {
    world: Arc<WorldShared>,
    rank: usize,
}

impl fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Endpoint")
            .field("rank", &self.rank)
            .field("world_size", &self.world.size)
            .finish()
    }
}

impl Endpoint {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn world_size(&self) -> usize {
        self.world.size
    }

    pub fn engine(&self) -> &Engine {
        &self.world.engine
    }

    pub(crate) fn world(&self) -> &Arc<WorldShared> {
        &self.world
    }

    /// Starts a send of `data` to `dest`.
    ///
    /// Lightweight sends copy the payload and return an already complete
    /// request. Larger sends keep a reference to `data` until the request
    /// completes; [`Request::take_send_buffer`] hands it back.
    pub fn isend(
        &self,
        data: impl Into<Bytes>,
        dest: usize,
        tag: i32,
        context: ContextId,
        stream: &Stream,
    ) -> Result<Request> {
        let w = &*self.world;
        w.check_rank(dest)?;
        w.check_context(context)?;
        w.engine.check_stream(stream)?;
        let data: Bytes = data.into();
        let len = data.len();
        let class = w.thresholds().classify(len);
        let request = Request::new_p2p(RequestKind::Send, stream);
        let id = w.next_op();
        let rank = self.rank;
        let envelope = MessageEnvelope {
            source: rank,
            tag,
            context,
            length: len,
            protocol: Protocol::Eager,
        };

        let mut st = lock(&w.endpoints[rank].state);
        w.bump(&w.counters.sends_issued);
        match class {
            SendClass::Lightweight => {
                w.bump(&w.counters.intermediate_copies);
                let copy = Bytes::copy_from_slice(&data);
                let packet = Packet {
                    envelope,
                    dest,
                    payload: Some(copy),
                    offset: 0,
                    send_op: id,
                    recv_op: None,
                };
                w.submit(&mut st.nic, packet, None);
                w.transition(
                    rank,
                    id,
                    &request,
                    ProtocolState::Send(SendState::LightweightDone),
                );
                w.event(
                    rank,
                    dest,
                    tag,
                    Protocol::Eager,
                    len,
                    PacketEventKind::Complete,
                );
                request.finish(Ok(Status {
                    source: rank,
                    tag,
                    length: len,
                }));
                w.bump(&w.counters.sends_completed);
            }
            SendClass::Eager => {
                let flag = Arc::new(AtomicBool::new(false));
                let packet = Packet {
                    envelope,
                    dest,
                    payload: Some(data.clone()),
                    offset: 0,
                    send_op: id,
                    recv_op: None,
                };
                w.submit(&mut st.nic, packet, Some(Arc::clone(&flag)));
                self.register_send(
                    &mut st,
                    id,
                    &request,
                    class,
                    dest,
                    tag,
                    context,
                    data.clone(),
                    Some(flag),
                    SendState::EagerWaitNic,
                );
            }
            SendClass::Rendezvous | SendClass::Pipeline => {
                let packet = Packet {
                    envelope: MessageEnvelope {
                        protocol: Protocol::Rts,
                        ..envelope
                    },
                    dest,
                    payload: None,
                    offset: 0,
                    send_op: id,
                    recv_op: None,
                };
                w.submit(&mut st.nic, packet, None);
                self.register_send(
                    &mut st,
                    id,
                    &request,
                    class,
                    dest,
                    tag,
                    context,
                    data.clone(),
                    None,
                    SendState::RdvWaitCts,
                );
            }
        }
        drop(st);
        request.set_send_buffer(data);
        Ok(request)
    }

    #[allow(clippy::too_many_arguments)]
    fn register_send(
        &self,
        st: &mut EndpointState,
        id: OpId,
        request: &Request,
        class: SendClass,
        dest: usize,
        tag: i32,
        context: ContextId,
        data: Bytes,
        nic_flag: Option<Arc<AtomicBool>>,
        state: SendState,
    ) {
        let w = &*self.world;
        w.outstanding.fetch_add(1, Ordering::AcqRel);
        w.transition(self.rank, id, request, ProtocolState::Send(state));
        st.sends.insert(
            id,
            SendOp {
                request: request.clone(),
                state,
                class,
                dest,
                tag,
                context,
                data,
                nic_flag,
                cts: None,
                next_offset: 0,
                in_flight: VecDeque::new(),
            },
        );
    }

    /// Posts a receive into `buffer`. The buffer's length is the capacity; a
    /// longer matching message completes the request with
    /// [`Error::Truncated`]. Reclaim the filled buffer with
    /// [`Request::take_buffer`].
    pub fn irecv(
        &self,
        buffer: Vec<u8>,
        source: usize,
        tag: i32,
        context: ContextId,
        stream: &Stream,
    ) -> Result<Request> {
        let w = &*self.world;
        w.check_rank(source)?;
        w.check_context(context)?;
        w.engine.check_stream(stream)?;
        let request = Request::new_p2p(RequestKind::Recv, stream);
        let id = w.next_op();
        let rank = self.rank;
        let mut op = RecvOp {
            request: request.clone(),
            state: RecvState::WaitEager,
            source,
            tag,
            context,
            buffer,
            message_len: 0,
            eager_arrived: false,
            rdv_send_op: None,
            received: 0,
        };

        let mut st = lock(&w.endpoints[rank].state);
        let hit = st
            .unexpected
            .iter()
            .position(|u| u.envelope.matches(source, tag, context));
        match hit.and_then(|i| st.unexpected.remove(i)) {
            Some(u) => {
                let env = u.envelope;
                op.message_len = env.length;
                match u.payload {
                    Some(payload) => {
                        op.deposit(0, &payload);
                        op.eager_arrived = true;
                    }
                    None => op.rdv_send_op = Some(u.send_op),
                }
                w.event(
                    env.source,
                    rank,
                    tag,
                    env.protocol,
                    env.length,
                    PacketEventKind::Match,
                );
            }
            None => st.posted.push_back(PostedRecv {
                source,
                tag,
                context,
                op: id,
            }),
        }
        w.outstanding.fetch_add(1, Ordering::AcqRel);
        w.transition(
            rank,
            id,
            &request,
            ProtocolState::Recv(RecvState::WaitEager),
        );
        st.recvs.insert(id, op);
        Ok(request)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spin(world: &World, req: &Request) -> usize {
        let mut polls = 0;
        while !req.is_complete().unwrap() {
            world.poll();
            polls += 1;
            assert!(polls < 10_000, "request never completed");
        }
        polls
    }

    #[test]
    fn loopback_world_of_one() {
        let engine = Engine::new();
        let world = World::new(&engine, 1, LatencyModel::ZERO).unwrap();
        let ep = world.endpoint(0).unwrap();
        let s = engine.null_stream();
        let r = ep.irecv(vec![0; 4], 0, 1, ContextId::DEFAULT, s).unwrap();
        let t = ep
            .isend(vec![1u8, 2, 3, 4], 0, 1, ContextId::DEFAULT, s)
            .unwrap();
        assert!(t.is_complete().unwrap());
        let status = r.wait(s).unwrap();
        assert_eq!(
            status,
            Status {
                source: 0,
                tag: 1,
                length: 4
            }
        );
        assert_eq!(r.take_buffer().unwrap(), vec![1, 2, 3, 4]);
    }

    #[test]
    fn world_rejects_bad_arguments() {
        let engine = Engine::new();
        assert!(matches!(
            World::new(&engine, 0, LatencyModel::ZERO),
            Err(Error::EmptyWorld)
        ));
        let world = World::new(&engine, 4, LatencyModel::ZERO).unwrap();
        assert_eq!(world.endpoints().len(), 4);
        assert!(World::new(&engine, 2, LatencyModel::ZERO).is_err());
        let ep = world.endpoint(0).unwrap();
        let s = engine.null_stream();
        assert_eq!(
            ep.isend(vec![0u8], 4, 0, ContextId::DEFAULT, s)
                .unwrap_err(),
            Error::InvalidRank { rank: 4, size: 4 }
        );
        assert_eq!(
            ep.irecv(vec![0u8], 1, 0, ContextId(9), s).unwrap_err(),
            Error::InvalidContext(9)
        );
        let ctx = world.context_create();
        assert!(ep.irecv(vec![0u8], 1, 0, ctx, s).is_ok());
        assert!(world.endpoint(4).is_err());
        assert!(world.set_thresholds(5, 4).is_err());
    }

    #[test]
    fn dropping_world_unregisters_hooks() {
        let engine = Engine::new();
        {
            let _w = World::new(&engine, 2, LatencyModel::ZERO).unwrap();
            assert_eq!(engine.subsystem_hooks().len(), 2);
        }
        assert!(engine.subsystem_hooks().is_empty());
        let _again = World::new(&engine, 2, LatencyModel::ZERO).unwrap();
    }

    #[test]
    fn truncation_is_reported_on_the_request() {
        let engine = Engine::new();
        let world = World::new(&engine, 2, LatencyModel::ZERO).unwrap();
        let s = engine.null_stream();
        let (a, b) = (world.endpoint(0).unwrap(), world.endpoint(1).unwrap());
        for len in [16usize, 16 * 1024, 200 * 1024] {
            let r = b.irecv(vec![0; 8], 0, 3, ContextId::DEFAULT, s).unwrap();
            let t = a
                .isend(vec![7u8; len], 1, 3, ContextId::DEFAULT, s)
                .unwrap();
            assert_eq!(
                r.wait(s),
                Err(Error::Truncated {
                    length: len,
                    capacity: 8
                })
            );
            assert_eq!(r.take_buffer().unwrap(), vec![7u8; 8]);
            t.wait(s).unwrap();
        }
        assert!(world.is_quiescent());
    }

    #[test]
    fn rendezvous_waits_for_cts_then_data() {
        let engine = Engine::new();
        let world = World::new(&engine, 2, LatencyModel::ZERO).unwrap();
        let s = engine.null_stream();
        let (a, b) = (world.endpoint(0).unwrap(), world.endpoint(1).unwrap());
        let t = a
            .isend(vec![1u8; 100_000], 1, 0, ContextId::DEFAULT, s)
            .unwrap();
        for _ in 0..5 {
            world.poll();
        }
        // RTS sits unexpected; no payload has moved
        assert_eq!(world.unexpected_count(), 1);
        assert!(!t.is_complete().unwrap());
        let r = b
            .irecv(vec![0; 100_000], 0, 0, ContextId::DEFAULT, s)
            .unwrap();
        spin(&world, &r);
        spin(&world, &t);
        assert_eq!(r.take_buffer().unwrap(), vec![1u8; 100_000]);
    }

    #[test]
    fn pipeline_chunks_arrive_in_place() {
        let engine = Engine::new();
        let world = World::new(&engine, 2, LatencyModel::ZERO).unwrap();
        world.set_pipeline_threshold(Some(128 * 1024)).unwrap();
        world.set_instrumentation(true);
        let s = engine.null_stream();
        let (a, b) = (world.endpoint(0).unwrap(), world.endpoint(1).unwrap());
        let len = 5 * PIPELINE_CHUNK + 123;
        let data: Vec<u8> = (0..len).map(|i| (i % 251) as u8).collect();
        let r = b.irecv(vec![0; len], 0, 0, ContextId::DEFAULT, s).unwrap();
        let t = a.isend(data.clone(), 1, 0, ContextId::DEFAULT, s).unwrap();
        spin(&world, &t);
        spin(&world, &r);
        assert_eq!(r.take_buffer().unwrap(), data);
        let chunks = world
            .take_packet_trace()
            .into_iter()
            .filter(|e| e.protocol == Protocol::RdvData && e.event == PacketEventKind::Send)
            .count();
        assert_eq!(chunks, 6);
    }
}
