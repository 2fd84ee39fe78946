//! Datagram transports: the [`Transport`] trait, and an emulated shared
//! channel for desk-scale runs in virtual time.

mod emulated;

pub use emulated::{
    ChannelConfig, ChannelError, ChannelStats, Delivery, EmulatedChannel, EmulatedEndpoint, EmulatedNetwork,
    EnqueueResult, NetworkClock, TraceEntry,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::probe::HEADER_LEN;

/// One received datagram.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Datagram {
    pub src: String,
    /// At least the probe header; the emulated channel does not carry padding.
    pub bytes: Vec<u8>,
    /// Size on the wire, padding included.
    pub wire_bytes: u32,
    pub rx_ns: u64,
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("unknown endpoint {0}")]
    UnknownEndpoint(String),
    #[error("bad address {0}")]
    BadAddress(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Datagram semantics: whole packets or nothing, never corrupted.
pub trait Transport: Send {
    fn local_addr(&self) -> String;

    fn send_to(&mut self, dst: &str, datagram: &[u8]) -> Result<(), TransportError>;

    /// Send a probe header padded with zeros to `wire_bytes`.
    fn send_probe(&mut self, dst: &str, header: &[u8; HEADER_LEN], wire_bytes: u32) -> Result<(), TransportError> {
        let mut buf = vec![0u8; (wire_bytes as usize).max(HEADER_LEN)];
        buf[..HEADER_LEN].copy_from_slice(header);
        self.send_to(dst, &buf)
    }

    fn try_recv(&mut self) -> Result<Option<Datagram>, TransportError>;

    /// Current time on this transport's clock, in nanoseconds.
    fn now_ns(&self) -> u64;
}

/// Selects the data-plane transport of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransportConfig {
    Udp,
    Emulated(ChannelConfig),
}

impl TransportConfig {
    pub fn name(&self) -> &'static str {
        match self {
            TransportConfig::Udp => "udp",
            TransportConfig::Emulated(_) => "emulated",
        }
    }
}

/// Wall-clock nanoseconds since the Unix epoch.
pub fn system_now_ns() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0)
}
