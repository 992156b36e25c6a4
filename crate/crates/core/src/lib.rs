//! Deterministic leader-follower vehicle simulation.
//!
//! Nodes talk over an in-process topic bus ([`msgbus`]): vehicle plants
//! ([`vehicle`]), a forward lidar with headway differentiation
//! ([`perception`]), the threshold velocity follower ([`control`]) and CSV
//! trajectory playback ([`injector`]). [`scenario`] wires them from a TOML
//! file and runs the fixed-step loop; [`recorder`] captures every topic into
//! a per-topic CSV bag and computes run metrics.

pub mod cli;
pub mod control;
pub mod injector;
pub mod msgbus;
pub mod perception;
pub mod recorder;
pub mod scenario;
pub mod vehicle;
