//! Deterministic discrete-event simulation of a single multi-access edge
//! host that serves local devices and defends itself against volumetric
//! attacks from compromised devices.
//!
//! The library is organised as a stack:
//!
//! * [`engine`] owns virtual time, the event queue and seeded randomness.
//! * [`netmodel`] and [`infra`] describe the modelled world: devices,
//!   packets, routing, virtual machines and host capacity.
//! * [`trafficgen`], [`flowpipe`], [`detector`] and [`dpi`] produce and
//!   analyse traffic: packet generators, flow records, windowed feature
//!   vectors, the anomaly models and the payload inspector.
//! * [`orchestrator`] reacts to anomaly and crash notifications with a
//!   fixed nine-step management conversation that provisions, repairs and
//!   retires the inspection machine.
//! * [`scenario`], [`sim`], [`eventlog`] and [`metrics`] tie the pieces
//!   together: declarative run descriptions, the simulation loop, the
//!   line-oriented event log and the summary report derived from it.
//!
//! Every run is a pure function of the scenario file and the seed. Two
//! runs with the same inputs produce byte-identical event logs; the
//! simulator never consults wall-clock time, thread scheduling or map
//! iteration order that could differ between executions.

pub mod detector;
pub mod dpi;
pub mod engine;
pub mod eventlog;
pub mod flowpipe;
pub mod infra;
pub mod metrics;
pub mod netmodel;
pub mod orchestrator;
pub mod scenario;
pub mod sim;
pub mod trafficgen;
