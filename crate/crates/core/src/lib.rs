//! Discrete-time simulator for distributed sidelink resource allocation on
//! a ring road, with three MAC variants: plain sensing-based semi-persistent
//! scheduling, a stochastic one-shot relocation layered on top of it, and an
//! enhancement that probes the vacated slot and breaks persistent collisions
//! early. The crate also ships the closed-form and Monte Carlo companions
//! used to cross-check the simulation.
//!
//! Everything is deterministic per seed: random state is split into named
//! streams so mobility is identical across schemes, and reports serialize
//! to byte-identical JSON for one configuration.

pub mod analytic;
pub mod congestion;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod oneshot;
pub mod phy;
pub mod scenario;
pub mod sps;

pub use engine::{
    run, run_forced, run_forced_traced, run_traced, ForcedScenario, ForcedVehicle, SimConfig,
    SimulationReport,
};
pub use error::{ConfigError, SimError};
pub use oneshot::Scheme;
