//! Intensity volumes and integer label maps.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::grid::{Grid, VoxelIndex};

/// Label id -> structure name (e.g. 0 = "background", 1 = "vertebra", 2 = "rib").
pub type Legend = BTreeMap<u32, String>;

/// 3D scalar intensity image on a [`Grid`]. Immutable after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    grid: Grid,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f32>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidGrid(format!(
                "data length {} does not match grid {:?} ({} voxels)",
                data.len(),
                grid.dims,
                grid.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid("volume contains non-finite intensities".into()));
        }
        Ok(Self { grid, data })
    }

    /// Build a volume by evaluating `f` at every voxel index.
    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let [nx, ny, nz] = grid.dims;
        let mut data = Vec::with_capacity(grid.len());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(grid, data)
    }

    pub fn zeros(grid: Grid) -> Self {
        Self { data: vec![0.0; grid.len()], grid }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.grid.offset(i, j, k)]
    }

    pub fn at(&self, index: VoxelIndex) -> Result<f32> {
        if !self.grid.contains(index) {
            return Err(Error::IndexOutOfRange {
                i: index.i,
                j: index.j,
                k: index.k,
                dims: self.grid.dims,
            });
        }
        Ok(self.get(index.i, index.j, index.k))
    }

    /// Minimum intensity; used as the default out-of-field padding value.
    pub fn min_intensity(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max_intensity(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn into_parts(self) -> (Grid, Vec<f32>) {
        (self.grid, self.data)
    }

    /// Cell base index and fractional offset for continuous voxel
    /// coordinates, or `None` outside the lattice. Coordinates within 1e-9 of
    /// an integer lattice plane snap to it, so sampling exactly at voxel
    /// centers reproduces stored values bit for bit.
    fn locate(&self, vox: [f64; 3]) -> Option<([usize; 3], [f64; 3])> {
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let n = self.grid.dims[a];
            let mut c = vox[a];
            let r = c.round();
            if (c - r).abs() < 1e-9 {
                c = r;
            }
            if c < 0.0 || c > (n - 1) as f64 {
                return None;
            }
            let f = c.floor();
            let mut b = f as usize;
            let mut t = c - f;
            if b == n - 1 {
                // exactly on the last plane
                b = n.saturating_sub(2);
                t = if n == 1 { 0.0 } else { 1.0 };
            }
            base[a] = b;
            frac[a] = t;
        }
        Some((base, frac))
    }

    /// Trilinear interpolation at continuous voxel coordinates.
    /// Returns `None` when the sample point falls outside the voxel lattice.
    pub fn sample_trilinear(&self, vox: [f64; 3]) -> Option<f32> {
        let [nx, ny, nz] = self.grid.dims;
        let (base, frac) = self.locate(vox)?;
        let (i, j, k) = (base[0], base[1], base[2]);
        let (tx, ty, tz) = (frac[0], frac[1], frac[2]);
        let i1 = (i + 1).min(nx - 1);
        let j1 = (j + 1).min(ny - 1);
        let k1 = (k + 1).min(nz - 1);

        // Exact-lattice fast path keeps identity warps bit-exact.
        if tx == 0.0 && ty == 0.0 && tz == 0.0 {
            return Some(self.get(i, j, k));
        }

        let v = |i, j, k| self.get(i, j, k) as f64;
        let c00 = v(i, j, k) * (1.0 - tx) + v(i1, j, k) * tx;
        let c10 = v(i, j1, k) * (1.0 - tx) + v(i1, j1, k) * tx;
        let c01 = v(i, j, k1) * (1.0 - tx) + v(i1, j, k1) * tx;
        let c11 = v(i, j1, k1) * (1.0 - tx) + v(i1, j1, k1) * tx;
        let c0 = c00 * (1.0 - ty) + c10 * ty;
        let c1 = c01 * (1.0 - ty) + c11 * ty;
        Some((c0 * (1.0 - tz) + c1 * tz) as f32)
    }

    /// Trilinear sample at a world-space point (mm).
    pub fn sample_world(&self, p: [f64; 3]) -> Option<f32> {
        self.sample_trilinear(self.grid.world_to_voxel(p))
    }

    /// Exact spatial gradient (per mm) of the trilinear interpolant at a
    /// world point: the in-cell analytic derivative. Zero outside the
    /// lattice; one-sided at cell boundaries.
    pub fn gradient_world(&self, p: [f64; 3]) -> [f64; 3] {
        let [nx, ny, nz] = self.grid.dims;
        let Some((base, frac)) = self.locate(self.grid.world_to_voxel(p)) else {
            return [0.0; 3];
        };
        let (i, j, k) = (base[0], base[1], base[2]);
        let (tx, ty, tz) = (frac[0], frac[1], frac[2]);
        let i1 = (i + 1).min(nx - 1);
        let j1 = (j + 1).min(ny - 1);
        let k1 = (k + 1).min(nz - 1);
        let v = |i, j, k| self.get(i, j, k) as f64;
        let (v000, v100) = (v(i, j, k), v(i1, j, k));
        let (v010, v110) = (v(i, j1, k), v(i1, j1, k));
        let (v001, v101) = (v(i, j, k1), v(i1, j, k1));
        let (v011, v111) = (v(i, j1, k1), v(i1, j1, k1));
        let s = self.grid.spacing;
        let gx = ((v100 - v000) * (1.0 - ty) + (v110 - v010) * ty) * (1.0 - tz)
            + ((v101 - v001) * (1.0 - ty) + (v111 - v011) * ty) * tz;
        let gy = ((v010 - v000) * (1.0 - tx) + (v110 - v100) * tx) * (1.0 - tz)
            + ((v011 - v001) * (1.0 - tx) + (v111 - v101) * tx) * tz;
        let gz = ((v001 - v000) * (1.0 - tx) + (v101 - v100) * tx) * (1.0 - ty)
            + ((v011 - v010) * (1.0 - tx) + (v111 - v110) * tx) * ty;
        [gx / s[0], gy / s[1], gz / s[2]]
    }
}

/// 3D integer label image on a [`Grid`] with a label legend.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    grid: Grid,
    data: Vec<u32>,
    legend: Legend,
}

impl LabelMap {
    /// Construct a label map; every label id present in `data` must appear in
    /// `legend`. Label 0 is added as "background" if absent.
    pub fn new(grid: Grid, data: Vec<u32>, mut legend: Legend) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidGrid(format!(
                "label data length {} does not match grid {:?}",
                data.len(),
                grid.dims
            )));
        }
        legend.entry(0).or_insert_with(|| "background".into());
        for &v in &data {
            if !legend.contains_key(&v) {
                return Err(Error::UnknownLabel(v));
            }
        }
        Ok(Self { grid, data, legend })
    }

    /// All-background map.
    pub fn zeros(grid: Grid, legend: Legend) -> Self {
        let mut legend = legend;
        legend.entry(0).or_insert_with(|| "background".into());
        Self { data: vec![0; grid.len()], grid, legend }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn legend(&self) -> &Legend {
        &self.legend
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> u32 {
        self.data[self.grid.offset(i, j, k)]
    }

    pub fn at(&self, index: VoxelIndex) -> Result<u32> {
        if !self.grid.contains(index) {
            return Err(Error::IndexOutOfRange {
                i: index.i,
                j: index.j,
                k: index.k,
                dims: self.grid.dims,
            });
        }
        Ok(self.get(index.i, index.j, index.k))
    }

    /// Distinct label ids present in the data.
    pub fn present_labels(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.data.iter().copied().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        ids.sort_unstable();
        ids
    }

    /// Number of voxels carrying `label`.
    pub fn count(&self, label: u32) -> usize {
        self.data.iter().filter(|&&v| v == label).count()
    }

    /// Binary view: true where the voxel carries `label`.
    pub fn mask_of(&self, label: u32) -> Vec<bool> {
        self.data.iter().map(|&v| v == label).collect()
    }

    /// Replace the data, keeping grid and legend. The new data must only use
    /// legend ids.
    pub fn with_data(&self, data: Vec<u32>) -> Result<Self> {
        Self::new(self.grid, data, self.legend.clone())
    }

    /// Map label ids; `f` returning 0 drops a label to background.
    /// Legend entries whose id no longer occurs are retained only for id 0 and
    /// ids still present.
    pub fn relabel(&self, f: impl Fn(u32) -> u32) -> Result<Self> {
        let data: Vec<u32> = self.data.iter().map(|&v| f(v)).collect();
        let mut legend = Legend::new();
        legend.insert(0, self.legend.get(&0).cloned().unwrap_or_else(|| "background".into()));
        for &v in &data {
            if v != 0 {
                let name = self
                    .legend
                    .get(&v)
                    .cloned()
                    .ok_or(Error::UnknownLabel(v))?;
                legend.insert(v, name);
            }
        }
        Self::new(self.grid, data, legend)
    }

    pub fn into_parts(self) -> (Grid, Vec<u32>, Legend) {
        (self.grid, self.data, self.legend)
    }
}

/// Convenience constructor for legends: `legend(&[(1, "vertebra"), (2, "rib")])`.
pub fn legend(entries: &[(u32, &str)]) -> Legend {
    let mut m = Legend::new();
    m.insert(0, "background".into());
    for &(id, name) in entries {
        m.insert(id, name.into());
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(grid: Grid) -> Volume {
        Volume::from_fn(grid, |i, j, k| (i + 10 * j + 100 * k) as f32).unwrap()
    }

    #[test]
    fn volume_rejects_bad_data() {
        let g = Grid::isotropic([2, 2, 2]);
        assert!(Volume::new(g, vec![0.0; 7]).is_err());
        assert!(Volume::new(g, vec![f32::NAN; 8]).is_err());
    }

    #[test]
    fn trilinear_at_lattice_points_is_exact() {
        let v = ramp(Grid::isotropic([4, 4, 4]));
        for idx in v.grid().indices() {
            let s = v.sample_trilinear([idx.i as f64, idx.j as f64, idx.k as f64]).unwrap();
            assert_eq!(s.to_bits(), v.get(idx.i, idx.j, idx.k).to_bits());
        }
    }

    #[test]
    fn trilinear_midpoint() {
        let v = ramp(Grid::isotropic([4, 4, 4]));
        let s = v.sample_trilinear([0.5, 0.5, 0.5]).unwrap();
        // mean of the 8 cube corners of the ramp
        let expected = (0.0 + 1.0 + 10.0 + 11.0 + 100.0 + 101.0 + 110.0 + 111.0) / 8.0;
        assert!((s - expected as f32).abs() < 1e-5);
    }

    #[test]
    fn trilinear_outside_is_none() {
        let v = ramp(Grid::isotropic([4, 4, 4]));
        assert!(v.sample_trilinear([-0.51, 0.0, 0.0]).is_none());
        assert!(v.sample_trilinear([3.1, 0.0, 0.0]).is_none());
    }

    #[test]
    fn labelmap_requires_legend_cover() {
        let g = Grid::isotropic([2, 2, 2]);
        let err = LabelMap::new(g, vec![0, 0, 0, 3, 0, 0, 0, 0], legend(&[(1, "vertebra")]));
        assert!(matches!(err, Err(Error::UnknownLabel(3))));
        let ok = LabelMap::new(g, vec![0, 0, 0, 1, 0, 0, 0, 0], legend(&[(1, "vertebra")]));
        assert!(ok.is_ok());
    }

    #[test]
    fn relabel_drops_rib() {
        let g = Grid::isotropic([2, 2, 2]);
        let lm = LabelMap::new(g, vec![0, 1, 2, 1, 2, 0, 0, 0], legend(&[(1, "vertebra"), (2, "rib")])).unwrap();
        let v_only = lm.relabel(|v| if v == 2 { 0 } else { v }).unwrap();
        assert_eq!(v_only.count(2), 0);
        assert_eq!(v_only.count(1), 2);
        assert!(!v_only.legend().contains_key(&2));
    }
}
