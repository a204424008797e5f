use std::collections::VecDeque;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use bytes::Bytes;

use super::envelope::MessageEnvelope;
use super::OpId;

/// Per-packet and per-byte transmission delay of a simulated NIC.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub struct LatencyModel {
    pub per_packet_ns: u64,
    pub per_byte_ns: u64,
}

impl LatencyModel {
    pub const ZERO: LatencyModel = LatencyModel {
        per_packet_ns: 0,
        per_byte_ns: 0,
    };

    pub fn new(per_packet_ns: u64, per_byte_ns: u64) -> Self {
        LatencyModel {
            per_packet_ns,
            per_byte_ns,
        }
    }

    pub fn delay_ns(&self, bytes: usize) -> u64 {
        self.per_packet_ns
            .saturating_add(self.per_byte_ns.saturating_mul(bytes as u64))
    }
}

#[derive(Debug)]
pub(crate) struct Packet {
    pub envelope: MessageEnvelope,
    pub dest: usize,
    pub payload: Option<Bytes>,
    /// Byte offset of a data chunk within its message.
    pub offset: usize,
    /// Operation id at the original sender.
    pub send_op: OpId,
    /// Operation id at the original receiver, once known (CTS, RDV_DATA).
    pub recv_op: Option<OpId>,
}

impl Packet {
    pub fn wire_bytes(&self) -> usize {
        self.payload.as_ref().map_or(0, Bytes::len)
    }
}

pub(crate) struct Transmission {
    pub packet: Packet,
    pub ready_at: u64,
    pub flag: Option<Arc<AtomicBool>>,
}

/// A serial NIC: transmissions leave in submission order, each occupying the
/// NIC for its modelled delay.
pub(crate) struct SimulatedNic {
    latency: LatencyModel,
    busy_until: u64,
    work: VecDeque<Transmission>,
}

impl SimulatedNic {
    pub fn new(latency: LatencyModel) -> Self {
        SimulatedNic {
            latency,
            busy_until: 0,
            work: VecDeque::new(),
        }
    }

    pub fn submit(&mut self, packet: Packet, now: u64, flag: Option<Arc<AtomicBool>>) {
        let ready_at = now.max(self.busy_until) + self.latency.delay_ns(packet.wire_bytes());
        self.busy_until = ready_at;
        self.work.push_back(Transmission {
            packet,
            ready_at,
            flag,
        });
    }

    pub fn pop_ready(&mut self, now: u64) -> Option<Transmission> {
        if self.work.front()?.ready_at <= now {
            self.work.pop_front()
        } else {
            None
        }
    }

    pub fn next_ready_at(&self) -> Option<u64> {
        self.work.front().map(|t| t.ready_at)
    }

    #[cfg(test)]
    pub fn len(&self) -> usize {
        self.work.len()
    }
}
