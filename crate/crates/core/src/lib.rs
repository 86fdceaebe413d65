//! Planning, orchestration and simulation of stateful microservice migration
//! between edge hosts.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`] - closed-form worst-case KPI model for Cold, PreCopy and
//!   Iterative PreCopy migration, plus the two inversions the designer needs.
//! * [`profiler`] - dirty-page rate estimation, a synthetic dirtying workload
//!   and least-squares calibration of the model parameters.
//! * [`orchestrator`] - metrics aggregation, the migration designer and a
//!   Monte Carlo strategy analysis under uncertain bandwidth.
//! * [`agents`] - source/destination/client/orchestrator state machines over
//!   a pub/sub/query bus, and the client flow table.
//! * [`simnet`] - deterministic discrete-event simulator that runs the agents
//!   against a Poisson dirty-page process.
//! * [`scenario`] and [`sweep`] - the scenario file format, target sweeps and
//!   CSV reporting used by the command-line tool.

pub mod agents;
pub mod error;
pub mod model;
pub mod orchestrator;
pub mod profiler;
pub mod scenario;
pub mod simnet;
pub mod sweep;
pub mod units;

pub use error::{Error, Result};
pub use model::{Kpis, ModelParams, MsProfile, StepDurations, StepId, Strategy, StrategyKind};
pub use orchestrator::{MigrationConfig, MigrationTask, MetricsView, Objective};
pub use simnet::{MigrationOutcome, Scenario};
