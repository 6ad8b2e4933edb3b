//! Core logic for cross-origin web filtering measurement: target expansion,
//! HAR-driven task generation, task scheduling, result aggregation and
//! per-region filtering inference.
//!
//! Everything here is synchronous and free of I/O beyond what callers pass
//! in; the HTTP services and the simulated client live in `crossprobe-net`.

pub mod collect;
pub mod css;
pub mod detector;
pub mod domain;
pub mod har;
pub mod schedule;
pub mod taskgen;

pub use domain::{
    canonicalize_resource_key, BrowserFamily, ClientContext, DetectionConfig, FilteringVerdict, MeasurementResult,
    MeasurementTask, Region, RegionStats, ResultState, TargetPattern, TaskDescriptor, TaskType,
};
