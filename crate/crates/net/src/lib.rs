//! Networked side of sting: real sockets, the embedded control broker, the
//! real-time agent and collector loops, and the controller's HTTP API.
//!
//! Everything protocol-level (codec, schedules, metrics, state machines)
//! lives in `sting-core`; this crate only moves bytes and drives clocks.

pub mod api;
pub mod broker;
pub mod launch;
pub mod relay;
pub mod runtime;
pub mod scenarios;
pub mod testbed;
pub mod udp;
pub mod wire;
