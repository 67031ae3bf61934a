//! Simulation and auto-configuration for pipeline-parallel plus data-parallel
//! training on clusters of preemptible GPUs.
//!
//! The crate is organised bottom-up:
//!
//! * [`config`] holds the shared domain types (model, hardware, job, cluster,
//!   parallel configuration) and the constraint checker.
//! * [`calibration`] stores per-cut-point primitive timings and synthesizes
//!   them analytically when no measurements are available.
//! * [`partitioner`] finds cut-points in an operator profile and groups them
//!   into balanced pipeline stages with a memory-feasibility check.
//! * [`schedule`] generates the rule-based micro-batch schedule and the GPipe
//!   reference schedule, and validates schedules against the rules.
//! * [`sim`] runs one mini-batch through a discrete-event model of the job.
//! * [`planner`] sweeps pipeline depths and picks the fastest configuration.
//! * [`morphing`] replays preemption traces through a cluster manager.
//!
//! The guide under `book/` walks through each of these with runnable
//! examples; its snippets are compiled as doctests of this crate.

pub mod calibration;
pub mod config;
pub mod error;
pub mod gantt;
pub mod morphing;
pub mod partitioner;
pub mod planner;
pub mod presets;
pub mod schedule;
pub mod sim;
pub mod units;

pub use error::{Error, Result};
pub use units::Micros;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/schedules.md")]
    mod schedules {}
    #[doc = include_str!("../../../book/src/calibration.md")]
    mod calibration {}
    #[doc = include_str!("../../../book/src/partitioning.md")]
    mod partitioning {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/planning.md")]
    mod planning {}
    #[doc = include_str!("../../../book/src/morphing.md")]
    mod morphing {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
}
