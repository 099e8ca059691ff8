//! Deterministic synthetic "vertebra + rib" phantoms: a vertebral-body
//! ellipsoid with two transverse-process bars, and rib tubes abutting the
//! process tips across a configurable gap. Bone and rib share the same
//! intensity band, so appearance alone cannot separate them — the geometry
//! that makes segmentation leakage reproducible.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::filters::gaussian_smooth_mm;
use crate::grid::Grid;
use crate::transform::BSplineGrid;
use crate::volume::{legend, LabelMap, Volume};
use crate::warp::{warp_labels, warp_volume_with};

pub const VERTEBRA_LABEL: u32 = 1;
pub const RIB_LABEL: u32 = 2;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Vertebral body ellipsoid center (mm) and radii (mm).
    pub body_center: [f64; 3],
    pub body_radii: [f64; 3],
    /// Transverse processes: bars along +/- x from the body surface.
    pub process_length: f64,
    pub process_radius: f64,
    /// Gap between process tip and rib start, in voxels along x.
    pub rib_gap_voxels: f64,
    pub rib_length: f64,
    pub rib_radius: f64,
    pub bone_intensity: f32,
    pub tissue_intensity: f32,
    pub smoothing_sigma_mm: f64,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [64, 64, 64],
            spacing: [1.0, 1.0, 1.0],
            body_center: [31.5, 34.0, 31.5],
            body_radii: [10.0, 8.0, 7.0],
            process_length: 9.0,
            process_radius: 2.6,
            rib_gap_voxels: 2.0,
            rib_length: 9.0,
            rib_radius: 2.6,
            bone_intensity: 400.0,
            tissue_intensity: 40.0,
            smoothing_sigma_mm: 0.8,
            noise_sigma: 4.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.dims, self.spacing, [0.0; 3])
    }

    /// x coordinate (mm) where the process tip ends on the given side.
    fn process_tip_x(&self, side: f64) -> f64 {
        self.body_center[0] + side * (self.body_radii[0] - 1.0 + self.process_length)
    }

    fn in_body(&self, p: [f64; 3]) -> bool {
        let d = (0..3)
            .map(|a| ((p[a] - self.body_center[a]) / self.body_radii[a]).powi(2))
            .sum::<f64>();
        d <= 1.0
    }

    fn in_process(&self, p: [f64; 3]) -> bool {
        for side in [-1.0, 1.0] {
            let start = self.body_center[0] + side * (self.body_radii[0] - 1.0);
            let tip = self.process_tip_x(side);
            let (lo, hi) = if side < 0.0 { (tip, start) } else { (start, tip) };
            if p[0] >= lo && p[0] <= hi {
                let dy = p[1] - self.body_center[1];
                let dz = p[2] - self.body_center[2];
                if dy * dy + dz * dz <= self.process_radius * self.process_radius {
                    return true;
                }
            }
        }
        false
    }

    fn in_rib(&self, p: [f64; 3]) -> bool {
        let gap_mm = self.rib_gap_voxels * self.spacing[0];
        for side in [-1.0, 1.0] {
            let start = self.process_tip_x(side) + side * gap_mm;
            let end = start + side * self.rib_length;
            let (lo, hi) = if side < 0.0 { (end, start) } else { (start, end) };
            if p[0] >= lo && p[0] <= hi {
                let dy = p[1] - self.body_center[1];
                let dz = p[2] - self.body_center[2];
                if dy * dy + dz * dz <= self.rib_radius * self.rib_radius {
                    return true;
                }
            }
        }
        false
    }

    fn label_at(&self, p: [f64; 3]) -> u32 {
        if self.in_body(p) || self.in_process(p) {
            VERTEBRA_LABEL
        } else if self.in_rib(p) {
            RIB_LABEL
        } else {
            0
        }
    }
}

/// Deterministic standard normal via Box-Muller.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Generate the phantom: smoothed piecewise-constant intensity with seeded
/// Gaussian noise, and the analytic label map with legend
/// {0: background, 1: vertebra, 2: rib}.
pub fn make_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelMap)> {
    let grid = spec.grid()?;
    let [nx, ny, nz] = grid.dims;

    let mut labels = vec![0u32; grid.len()];
    let mut raw = vec![0f32; grid.len()];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let p = grid.voxel_to_world_unchecked(i, j, k);
                let l = spec.label_at(p);
                let flat = grid.offset(i, j, k);
                labels[flat] = l;
                raw[flat] = if l == 0 { spec.tissue_intensity } else { spec.bone_intensity };
            }
        }
    }
    let mut image = Volume::new(grid, raw)?;
    if spec.smoothing_sigma_mm > 0.0 {
        image = gaussian_smooth_mm(&image, spec.smoothing_sigma_mm);
    }
    let volume = if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let noisy: Vec<f32> =
            image.data().iter().map(|&v| v + spec.noise_sigma * normal(&mut rng) as f32).collect();
        Volume::new(grid, noisy)?
    } else {
        image
    };
    let label_map =
        LabelMap::new(grid, labels, legend(&[(VERTEBRA_LABEL, "vertebra"), (RIB_LABEL, "rib")]))?;
    Ok((volume, label_map))
}

/// Evaluation region masks derived from the analytic geometry: "VB" covers
/// the body ellipsoid, "TP" the process bars extended across the gap to the
/// volume edge (so leakage onto the ribs falls inside the TP region).
pub fn substructure_regions(spec: &PhantomSpec) -> Result<BTreeMap<String, LabelMap>> {
    let grid = spec.grid()?;
    let [nx, ny, nz] = grid.dims;
    let margin = 2.0 * spec.spacing[0];
    let mut vb = vec![0u32; grid.len()];
    let mut tp = vec![0u32; grid.len()];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let p = grid.voxel_to_world_unchecked(i, j, k);
                let flat = grid.offset(i, j, k);
                let d = (0..3)
                    .map(|a| ((p[a] - spec.body_center[a]) / (spec.body_radii[a] + margin)).powi(2))
                    .sum::<f64>();
                if d <= 1.0 {
                    vb[flat] = 1;
                }
                // TP region: outside the body along x, within a widened tube
                let dy = p[1] - spec.body_center[1];
                let dz = p[2] - spec.body_center[2];
                let r = spec.process_radius.max(spec.rib_radius) + margin;
                if dy * dy + dz * dz <= r * r
                    && (p[0] - spec.body_center[0]).abs() >= spec.body_radii[0] - 1.0
                {
                    tp[flat] = 1;
                }
            }
        }
    }
    let mut out = BTreeMap::new();
    out.insert("VB".to_string(), LabelMap::new(grid, vb, legend(&[(1, "region")]))?);
    out.insert("TP".to_string(), LabelMap::new(grid, tp, legend(&[(1, "region")]))?);
    Ok(out)
}

/// One member of a synthetic atlas family.
#[derive(Clone, Debug)]
pub struct PhantomAtlas {
    pub id: String,
    pub intensity: Volume,
    /// Joint labels: vertebra and rib.
    pub labels_joint: LabelMap,
    /// Same warp with rib voxels relabeled to background.
    pub labels_vertebra_only: LabelMap,
}

/// Generate `n` atlases by warping the base phantom with independent random
/// smooth B-spline displacement fields (control spacing 16 mm, per-component
/// uniform in [-magnitude, magnitude]).
pub fn make_atlas_family(
    base: &PhantomSpec,
    n: usize,
    deform_magnitude_mm: f64,
    seed: u64,
) -> Result<Vec<PhantomAtlas>> {
    let (volume, labels) = make_phantom(base)?;
    let grid = *volume.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for idx in 0..n {
        let mut warp = BSplineGrid::for_image(&grid, [16.0, 16.0, 16.0])?;
        for d in warp.displacements_mut() {
            for c in 0..3 {
                d[c] = if deform_magnitude_mm > 0.0 {
                    rng.random_range(-deform_magnitude_mm..deform_magnitude_mm)
                } else {
                    0.0
                };
            }
        }
        let intensity = warp_volume_with(&volume, &warp, &grid, volume.min_intensity());
        let labels_joint = warp_labels(&labels, &warp, &grid);
        let labels_vertebra_only =
            labels_joint.relabel(|v| if v == RIB_LABEL { 0 } else { v })?;
        out.push(PhantomAtlas {
            id: format!("atlas{idx:02}"),
            intensity,
            labels_joint,
            labels_vertebra_only,
        });
    }
    Ok(out)
}
