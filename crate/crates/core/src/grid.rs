//! Voxel lattice geometry shared by intensity volumes and label maps.
//!
//! World coordinates are axis-aligned: `world = origin + index * spacing`,
//! with no direction cosines. Data is stored row-major with x fastest.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A voxel address on a [`Grid`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VoxelIndex {
    pub i: usize,
    pub j: usize,
    pub k: usize,
}

impl VoxelIndex {
    pub fn new(i: usize, j: usize, k: usize) -> Self {
        Self { i, j, k }
    }
}

impl From<(usize, usize, usize)> for VoxelIndex {
    fn from((i, j, k): (usize, usize, usize)) -> Self {
        Self { i, j, k }
    }
}

/// Lattice geometry: voxel counts, physical spacing (mm) and origin (mm).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d < 1) {
            return Err(Error::InvalidGrid(format!("dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidGrid(format!("spacing must be > 0, got {spacing:?}")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGrid(format!("origin must be finite, got {origin:?}")));
        }
        Ok(Self { dims, spacing, origin })
    }

    /// Unit-spacing grid at the world origin.
    pub fn isotropic(dims: [usize; 3]) -> Self {
        Self { dims, spacing: [1.0; 3], origin: [0.0; 3] }
    }

    /// Total number of voxels.
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat offset of a voxel; x fastest.
    #[inline]
    pub fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.dims[0] && j < self.dims[1] && k < self.dims[2]);
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn contains(&self, index: VoxelIndex) -> bool {
        index.i < self.dims[0] && index.j < self.dims[1] && index.k < self.dims[2]
    }

    /// Recover the (i, j, k) address of a flat offset.
    #[inline]
    pub fn delinearize(&self, flat: usize) -> VoxelIndex {
        let i = flat % self.dims[0];
        let rest = flat / self.dims[0];
        VoxelIndex::new(i, rest % self.dims[1], rest / self.dims[1])
    }

    /// World coordinates (mm) of a voxel center: `origin + index * spacing`.
    pub fn voxel_to_world(&self, index: VoxelIndex) -> Result<[f64; 3]> {
        if !self.contains(index) {
            return Err(Error::IndexOutOfRange { i: index.i, j: index.j, k: index.k, dims: self.dims });
        }
        Ok(self.voxel_to_world_unchecked(index.i, index.j, index.k))
    }

    #[inline]
    pub fn voxel_to_world_unchecked(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        ]
    }

    /// Continuous voxel coordinates of a world point (inverse of `voxel_to_world`).
    #[inline]
    pub fn world_to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// Physical extent (mm) from first to last voxel center, per axis.
    pub fn extent(&self) -> [f64; 3] {
        [
            (self.dims[0] - 1) as f64 * self.spacing[0],
            (self.dims[1] - 1) as f64 * self.spacing[1],
            (self.dims[2] - 1) as f64 * self.spacing[2],
        ]
    }

    /// Iterate all voxel indices in storage order (x fastest).
    pub fn indices(&self) -> impl Iterator<Item = VoxelIndex> + '_ {
        let [nx, ny, nz] = self.dims;
        (0..nz).flat_map(move |k| {
            (0..ny).flat_map(move |j| (0..nx).map(move |i| VoxelIndex::new(i, j, k)))
        })
    }

    /// Error unless `other` has identical dims, spacing and origin.
    pub fn ensure_same(&self, other: &Grid) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch { expected: format!("{self:?}"), actual: format!("{other:?}") })
        }
    }
}
