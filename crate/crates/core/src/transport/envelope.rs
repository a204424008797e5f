use std::fmt;

use crate::error::{Error, Result};

/// Communicator context. Messages only match receives posted on the same
/// context.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContextId(pub u32);

impl ContextId {
    pub const DEFAULT: ContextId = ContextId(0);
}

impl fmt::Display for ContextId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Wire-level packet kind.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Protocol {
    Eager,
    Rts,
    Cts,
    RdvData,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Eager => "EAGER",
            Protocol::Rts => "RTS",
            Protocol::Cts => "CTS",
            Protocol::RdvData => "RDV_DATA",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Matching and dispatch key of a packet. Only `(source, tag, context)`
/// participate in matching.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct MessageEnvelope {
    pub source: usize,
    pub tag: i32,
    pub context: ContextId,
    pub length: usize,
    pub protocol: Protocol,
}

impl MessageEnvelope {
    #[inline]
    pub fn matches(&self, source: usize, tag: i32, context: ContextId) -> bool {
        self.source == source && self.tag == tag && self.context == context
    }
}

/// Which protocol a send of a given size uses.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum SendClass {
    /// Copied at initiation; complete on return.
    Lightweight,
    /// Payload sent without handshake; one wait for NIC completion.
    Eager,
    /// RTS/CTS handshake, then payload; two waits.
    Rendezvous,
    /// Rendezvous handshake, then fixed-size chunks with a bounded number in
    /// flight.
    Pipeline,
}

/// Size of one pipeline chunk.
pub const PIPELINE_CHUNK: usize = 64 * 1024;
/// Maximum pipeline chunks transmitted but not yet NIC-complete.
pub const PIPELINE_MAX_IN_FLIGHT: usize = 2;

/// Protocol selection thresholds in bytes. A send of `len` bytes is
/// lightweight if `len <= lightweight`, eager if `len <= eager`, pipelined
/// if it exceeds the optional pipeline threshold, and rendezvous otherwise.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Thresholds {
    pub lightweight: usize,
    pub eager: usize,
    pub pipeline: Option<usize>,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            lightweight: 1024,
            eager: 64 * 1024,
            pipeline: None,
        }
    }
}

impl Thresholds {
    /// Sentinel for "no upper bound".
    pub const UNBOUNDED: usize = usize::MAX;

    pub fn new(lightweight: usize, eager: usize) -> Result<Self> {
        let t = Thresholds {
            lightweight,
            eager,
            pipeline: None,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn with_pipeline(mut self, pipeline: Option<usize>) -> Result<Self> {
        self.pipeline = pipeline;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lightweight > self.eager {
            return Err(Error::InvertedThresholds {
                lightweight: self.lightweight,
                eager: self.eager,
            });
        }
        if let Some(p) = self.pipeline {
            if p < self.eager {
                return Err(Error::PipelineBelowEager {
                    pipeline: p,
                    eager: self.eager,
                });
            }
        }
        Ok(())
    }

    pub fn classify(&self, len: usize) -> SendClass {
        if len <= self.lightweight {
            SendClass::Lightweight
        } else if len <= self.eager {
            SendClass::Eager
        } else if self.pipeline.is_some_and(|p| len > p) {
            SendClass::Pipeline
        } else {
            SendClass::Rendezvous
        }
    }
}
