//! Programmable binned streaming pipelines.
//!
//! Declare a rendering pipeline as a graph of stages, each factored
//! into bin assignment, scheduling and processing. The synthesis passes
//! statically order the stages and collapse them into a small set of
//! launchable kernels, which the multicore runtime executes over
//! spatially binned work. Reference renderers validate every shipped
//! pipeline pixel for pixel.

pub mod bezier;
pub mod env;
pub mod graph;
pub mod math;
pub mod oracle;
pub mod ordering;
pub mod pipelines;
pub mod prim;
pub mod runtime;
pub mod scene;
pub mod skeleton;
pub mod synthesis;

pub use env::{Framebuffer, PipeParams, RunEnv};
pub use graph::{BinConfig, BinGrid, PipelineGraph, ScheduleKind, StageDecl};
pub use pipelines::{build_variant, render, Overrides, Variant};
pub use prim::{Primitive, PrimitiveKind};
pub use scene::{Camera, Scene};
