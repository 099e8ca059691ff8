//! Atlas-to-target registration: affine initialization followed by cubic
//! B-spline free-form deformation, both maximizing the penalized cost
//! `C = (1 - alpha) * NMI - alpha * P` over a multi-resolution pyramid.

mod affine;
mod bending;
mod bspline;
mod histogram;

pub use affine::{affine_register, AffineParams12};
pub use bending::{bending_energy, bending_energy_gradient, bending_energy_strided};
pub use bspline::{bspline_register, mean_residual_displacement};
pub use histogram::{
    joint_histogram, joint_histogram_with, nmi, parzen_cubic, parzen_cubic_d1, BinScale,
    HistogramKernel, JointHistogram,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::downsample_by_two;
use crate::transform::{AffineTransform, BSplineGrid, SpatialTransform};
use crate::volume::Volume;
use crate::warp::warp_volume_with;

/// Registration configuration. Defaults follow the penalized-NMI setup with
/// alpha = 0.005 and a 3-level pyramid.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationParams {
    /// Penalty weight in `C = (1 - alpha) * NMI - alpha * P`.
    pub alpha: f64,
    /// Histogram bins per image.
    pub bins: usize,
    /// Pyramid levels; each level downsamples by 2 per axis.
    pub levels: usize,
    /// B-spline control spacing (mm) at the finest level. `None` picks
    /// 5 voxels of the fixed image.
    pub control_spacing_mm: Option<f64>,
    /// Iteration cap per pyramid level.
    pub max_iterations: usize,
    /// Convergence tolerance on the cost increase per accepted step.
    pub tolerance: f64,
    /// Initial line-search step: mm of control-point motion (B-spline) or
    /// scaled-parameter units (affine).
    pub initial_step: f64,
    /// Line search terminates when the step shrinks below this.
    pub min_step: f64,
    /// Estimate forward and inverse affines and average them in the
    /// matrix-log domain. Forward-only is the default.
    pub symmetric_affine: bool,
    /// Sub-lattice stride for the bending penalty during optimization.
    pub penalty_stride: usize,
}

impl Default for RegistrationParams {
    fn default() -> Self {
        Self {
            alpha: 0.005,
            bins: 64,
            levels: 3,
            control_spacing_mm: None,
            max_iterations: 50,
            tolerance: 1e-6,
            initial_step: 2.0,
            min_step: 1e-3,
            symmetric_affine: false,
            penalty_stride: 2,
        }
    }
}

impl RegistrationParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::InvalidParams(format!("alpha must be in [0, 1), got {}", self.alpha)));
        }
        if self.bins < 8 {
            return Err(Error::InvalidParams(format!("bins must be >= 8, got {}", self.bins)));
        }
        if self.levels < 1 {
            return Err(Error::InvalidParams("levels must be >= 1".into()));
        }
        if let Some(s) = self.control_spacing_mm {
            if !(s > 0.0) {
                return Err(Error::InvalidParams("control spacing must be > 0".into()));
            }
        }
        if !(self.min_step > 0.0) || self.initial_step < self.min_step {
            return Err(Error::InvalidParams("need initial_step >= min_step > 0".into()));
        }
        Ok(())
    }

    /// Effective finest-level control spacing for a fixed image.
    pub fn control_spacing_for(&self, fixed: &crate::grid::Grid) -> f64 {
        self.control_spacing_mm
            .unwrap_or_else(|| 5.0 * fixed.spacing.iter().cloned().fold(f64::INFINITY, f64::min))
    }
}

/// Optimizer output: the estimate plus a convergence flag (false when the
/// iteration cap was exhausted at any level) and the final cost.
#[derive(Clone, Debug)]
pub struct RegistrationResult<T> {
    pub transform: T,
    pub converged: bool,
    pub cost: f64,
}

/// Finest-first image pyramid. Level 0 is the input; each further level
/// halves every axis after Gaussian smoothing.
pub fn build_pyramid(v: &Volume, levels: usize) -> Result<Vec<Volume>> {
    let mut out = vec![v.clone()];
    for _ in 1..levels.max(1) {
        let coarser = downsample_by_two(out.last().unwrap())?;
        if coarser.grid().dims.iter().any(|&d| d < 4) {
            break;
        }
        out.push(coarser);
    }
    Ok(out)
}

/// Penalized registration cost `C = (1 - alpha) * NMI - alpha * P` for an
/// arbitrary transform. Affine-only calls use P = 0.
pub fn cost<T: SpatialTransform>(
    fixed: &Volume,
    moving: &Volume,
    transform: &T,
    params: &RegistrationParams,
    penalty: Option<f64>,
) -> Result<f64> {
    params.validate()?;
    let warped = warp_volume_with(moving, transform, fixed.grid(), moving.min_intensity());
    let hist = joint_histogram_with(fixed, &warped, params.bins, HistogramKernel::CubicBSpline)?;
    let p = penalty.unwrap_or(0.0);
    Ok((1.0 - params.alpha) * hist.nmi() - params.alpha * p)
}

/// Cost of a B-spline transform, including its bending penalty.
pub fn cost_bspline(
    fixed: &Volume,
    moving: &Volume,
    grid: &BSplineGrid,
    params: &RegistrationParams,
) -> Result<f64> {
    let p = bending_energy(grid, fixed.grid());
    cost(fixed, moving, grid, params, Some(p))
}

/// Cost of an affine transform (penalty-free).
pub fn cost_affine(
    fixed: &Volume,
    moving: &Volume,
    transform: &AffineTransform,
    params: &RegistrationParams,
) -> Result<f64> {
    cost(fixed, moving, transform, params, None)
}
