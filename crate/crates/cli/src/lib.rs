//! Library surface of the segmentation pipeline: configuration, the
//! end-to-end run/compare drivers, slice overlays, and phantom suite
//! generation. The `vertseg` binary is a thin veneer over these.

pub mod config;
pub mod overlay;
pub mod pipeline;
pub mod suite;

pub use config::{AtlasMode, ManifestRef, RunConfig};
pub use pipeline::{run_compare, run_segment, CaseOutcome, ComparisonReport, Stage, StageError};
