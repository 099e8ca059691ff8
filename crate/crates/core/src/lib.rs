//! Multi-atlas 3D segmentation engine: B-spline/affine registration driven by
//! normalized mutual information, joint label fusion of warped atlas labels,
//! morphological and level-set post-processing, and surface-distance
//! evaluation. Joint vertebra-rib atlases let rib votes compete with vertebra
//! votes during fusion, suppressing segmentation leakage into adjacent
//! high-intensity bone.

pub mod error;
pub mod filters;
pub mod fusion;
pub mod grid;
pub mod kdtree;
pub mod metrics;
pub mod nifti;
pub mod phantom;
pub mod postprocess;
pub mod registration;
pub mod transform;
pub mod volume;
pub mod warp;

pub use error::{Error, Result};
pub use grid::{Grid, VoxelIndex};
pub use transform::{AffineTransform, BSplineGrid, SpatialTransform};
pub use volume::{LabelMap, Legend, Volume};
