//! Distributed interference stress testing: traffic generation, a compact
//! probe protocol, per-flow metrics, an emulated shared channel, and the
//! agent/controller state machines that run multi-step contention scenarios.
//!
//! Everything here is sans-IO. Socket transports, the control-plane broker
//! and the HTTP API live in `sting-net`.

pub mod agent;
pub mod analysis;
pub mod channel;
pub mod collector;
pub mod control;
pub mod controller;
pub mod dataplane;
pub mod library;
pub mod metrics;
pub mod parallel;
pub mod probe;
pub mod sim;
pub mod stats;
pub mod traffic;
