use std::fmt;

use super::envelope::Protocol;
use super::OpId;
use crate::request::RequestId;

/// Sender-side protocol state.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum SendState {
    LightweightDone,
    EagerWaitNic,
    RdvWaitCts,
    RdvWaitData,
    PipelineStreaming,
    Complete,
}

/// Receiver-side protocol state. `WaitEager` is the initial "waiting for a
/// matching message" state for every receive.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum RecvState {
    WaitEager,
    RdvSendCts,
    RdvWaitData,
    Complete,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum ProtocolState {
    Send(SendState),
    Recv(RecvState),
}

impl ProtocolState {
    /// Whether the state is a wait block: it can only be left when an
    /// external completion event is observed.
    pub fn is_wait(self) -> bool {
        matches!(
            self,
            ProtocolState::Send(
                SendState::EagerWaitNic
                    | SendState::RdvWaitCts
                    | SendState::RdvWaitData
                    | SendState::PipelineStreaming
            ) | ProtocolState::Recv(RecvState::WaitEager | RecvState::RdvWaitData)
        )
    }
}

/// A protocol state machine entering `state`.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct StateTransition {
    pub pass: u64,
    pub rank: usize,
    pub op: OpId,
    pub request: RequestId,
    pub state: ProtocolState,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum PacketEventKind {
    Send,
    Arrive,
    Match,
    Complete,
}

impl PacketEventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PacketEventKind::Send => "SEND",
            PacketEventKind::Arrive => "ARRIVE",
            PacketEventKind::Match => "MATCH",
            PacketEventKind::Complete => "COMPLETE",
        }
    }
}

/// One line of the packet trace. `Display` renders the line-oriented
/// `pass,src,dst,tag,protocol,bytes,event` record.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct PacketEvent {
    pub pass: u64,
    pub src: usize,
    pub dst: usize,
    pub tag: i32,
    pub protocol: Protocol,
    pub bytes: usize,
    pub event: PacketEventKind,
}

impl PacketEvent {
    pub const HEADER: &'static str = "pass,src,dst,tag,protocol,bytes,event";
}

impl fmt::Display for PacketEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{},{}",
            self.pass,
            self.src,
            self.dst,
            self.tag,
            self.protocol,
            self.bytes,
            self.event.as_str()
        )
    }
}

/// Transport counters, advanced while instrumentation is on.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub struct TransportStats {
    pub polls: u64,
    pub packets_sent: u64,
    pub transitions: u64,
    /// Payload copies into transport-owned storage (lightweight buffering,
    /// unexpected eager messages). Copies into user receive buffers are not
    /// counted here.
    pub intermediate_copies: u64,
    pub sends_issued: u64,
    pub sends_completed: u64,
    pub recvs_completed: u64,
}
