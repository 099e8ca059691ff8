//! Joint label fusion: combine n warped atlas label maps into a consensus by
//! per-voxel weighted voting, with weights `w = M^-1 1 / (1^T M^-1 1)` from a
//! pairwise intensity-residual dependency matrix M. Multi-label atlases vote
//! with their full legend, so rib votes compete with vertebra votes and
//! absorb would-be leakage across the costovertebral gap.

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::VoxelIndex;
use crate::volume::{LabelMap, Legend, Volume};

/// One atlas after registration: its intensity and labels resampled onto the
/// target grid (trilinear / nearest-neighbor respectively).
#[derive(Clone, Debug)]
pub struct WarpedAtlas {
    pub intensity: Volume,
    pub labels: LabelMap,
    pub source_id: String,
}

impl WarpedAtlas {
    pub fn new(intensity: Volume, labels: LabelMap, source_id: impl Into<String>) -> Result<Self> {
        intensity.grid().ensure_same(labels.grid())?;
        Ok(Self { intensity, labels, source_id: source_id.into() })
    }
}

/// Fusion configuration; the patch/search construction of the dependency
/// matrix follows the joint-label-fusion method, with every parameter
/// configurable.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionParams {
    /// Appearance patch radius (voxels).
    pub patch_radius: usize,
    /// Local search radius for patch alignment (voxels).
    pub search_radius: usize,
    /// Exponent applied to the patch residual products.
    pub beta: f64,
    /// Conditioning added to M as `epsilon * mean(diag) * I`.
    pub epsilon: f64,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self { patch_radius: 2, search_radius: 3, beta: 2.0, epsilon: 0.1 }
    }
}

impl FusionParams {
    pub fn validate(&self) -> Result<()> {
        if self.patch_radius < 1 {
            return Err(Error::InvalidParams("patch_radius must be >= 1".into()));
        }
        if !(self.beta > 0.0) {
            return Err(Error::InvalidParams("beta must be > 0".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidParams("epsilon must be > 0".into()));
        }
        Ok(())
    }
}

/// Pairwise dependency matrix for one voxel; symmetric, positive definite
/// after conditioning.
#[derive(Clone, Debug)]
pub struct DependencyMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl DependencyMatrix {
    pub fn from_entries(n: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != n * n {
            return Err(Error::InvalidParams("dependency matrix size mismatch".into()));
        }
        for i in 0..n {
            for j in 0..i {
                if (entries[i * n + j] - entries[j * n + i]).abs()
                    > 1e-9 * entries[i * n + j].abs().max(1.0)
                {
                    return Err(Error::InvalidParams("dependency matrix must be symmetric".into()));
                }
            }
        }
        Ok(Self { n, entries })
    }

    pub fn identity(n: usize) -> Self {
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            entries[i * n + i] = 1.0;
        }
        Self { n, entries }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }
}

/// Per-voxel voting weights; sum to 1.
pub type FusionWeights = Vec<f64>;

#[inline]
fn clamp_patch_value(v: &Volume, i: isize, j: isize, k: isize) -> f64 {
    let d = v.grid().dims;
    let i = i.clamp(0, d[0] as isize - 1) as usize;
    let j = j.clamp(0, d[1] as isize - 1) as usize;
    let k = k.clamp(0, d[2] as isize - 1) as usize;
    v.get(i, j, k) as f64
}

/// Search offsets in a fixed deterministic order: ascending offset norm,
/// then lexicographic (dz, dy, dx). With strict improvement this realizes
/// the tie-break.
fn search_offsets(radius: usize) -> Vec<[isize; 3]> {
    let r = radius as isize;
    let mut offs = Vec::with_capacity((2 * radius + 1).pow(3));
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                offs.push([dx, dy, dz]);
            }
        }
    }
    offs.sort_by_key(|o| (o[0] * o[0] + o[1] * o[1] + o[2] * o[2], o[2], o[1], o[0]));
    offs
}

/// Offset within the search window minimizing the sum of squared intensity
/// differences between the target patch at `x` and the atlas patch at
/// `x + offset`. Patches clamp at borders.
pub fn best_patch_offset(
    target: &Volume,
    atlas: &WarpedAtlas,
    x: VoxelIndex,
    params: &FusionParams,
) -> [isize; 3] {
    let offsets = search_offsets(params.search_radius);
    best_patch_offset_ordered(target, &atlas.intensity, x, params.patch_radius, &offsets)
}

fn best_patch_offset_ordered(
    target: &Volume,
    atlas: &Volume,
    x: VoxelIndex,
    patch_radius: usize,
    offsets: &[[isize; 3]],
) -> [isize; 3] {
    let r = patch_radius as isize;
    let (xi, xj, xk) = (x.i as isize, x.j as isize, x.k as isize);
    let mut best = offsets[0];
    let mut best_ssd = f64::INFINITY;
    for &off in offsets {
        let mut ssd = 0.0;
        for dk in -r..=r {
            for dj in -r..=r {
                for di in -r..=r {
                    let t = clamp_patch_value(target, xi + di, xj + dj, xk + dk);
                    let a = clamp_patch_value(
                        atlas,
                        xi + di + off[0],
                        xj + dj + off[1],
                        xk + dk + off[2],
                    );
                    ssd += (t - a) * (t - a);
                }
            }
        }
        if ssd < best_ssd {
            best_ssd = ssd;
            best = off;
        }
    }
    best
}

/// Absolute intensity residuals of an atlas patch (at a given offset)
/// against the target patch, one value per patch voxel.
fn patch_residuals(
    target: &Volume,
    atlas: &Volume,
    x: VoxelIndex,
    offset: [isize; 3],
    patch_radius: usize,
) -> Vec<f64> {
    let r = patch_radius as isize;
    let (xi, xj, xk) = (x.i as isize, x.j as isize, x.k as isize);
    let mut out = Vec::with_capacity((2 * patch_radius + 1).pow(3));
    for dk in -r..=r {
        for dj in -r..=r {
            for di in -r..=r {
                let t = clamp_patch_value(target, xi + di, xj + dj, xk + dk);
                let a = clamp_patch_value(
                    atlas,
                    xi + di + offset[0],
                    xj + dj + offset[1],
                    xk + dk + offset[2],
                );
                out.push((t - a).abs());
            }
        }
    }
    out
}

/// Conditioning floor when all residuals vanish and the mean diagonal is 0.
const CONDITIONING_FLOOR: f64 = 1e-12;

/// Build the conditioned dependency matrix at voxel `x`:
/// `M(i,j) = (sum_patch |I_i - I_T| * |I_j - I_T|)^beta + eps * mean(diag) * I`,
/// each atlas sampled at its best patch offset.
pub fn dependency_matrix(
    target: &Volume,
    atlases: &[WarpedAtlas],
    x: VoxelIndex,
    params: &FusionParams,
) -> Result<DependencyMatrix> {
    params.validate()?;
    if atlases.is_empty() {
        return Err(Error::EmptyAtlasList);
    }
    let offsets = search_offsets(params.search_radius);
    let residuals: Vec<Vec<f64>> = atlases
        .iter()
        .map(|a| {
            let off = best_patch_offset_ordered(target, &a.intensity, x, params.patch_radius, &offsets);
            patch_residuals(target, &a.intensity, x, off, params.patch_radius)
        })
        .collect();
    Ok(dependency_from_residuals(&residuals, params))
}

fn dependency_from_residuals(residuals: &[Vec<f64>], params: &FusionParams) -> DependencyMatrix {
    let n = residuals.len();
    let mut entries = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i..n {
            let dot: f64 = residuals[i].iter().zip(&residuals[j]).map(|(a, b)| a * b).sum();
            let v = dot.powf(params.beta);
            entries[i * n + j] = v;
            entries[j * n + i] = v;
        }
    }
    let mean_diag = (0..n).map(|i| entries[i * n + i]).sum::<f64>() / n as f64;
    // keep M strictly positive definite even when every residual is zero
    let cond = (params.epsilon * mean_diag).max(CONDITIONING_FLOOR);
    for i in 0..n {
        entries[i * n + i] += cond;
    }
    DependencyMatrix { n, entries }
}

/// Solve `w = M^-1 1 / (1^T M^-1 1)` by Cholesky factorization, never by
/// explicit inversion. If the factorization fails, the diagonal conditioning
/// is raised once (10x the mean diagonal) before giving up.
pub fn fusion_weights(m: &DependencyMatrix) -> Result<FusionWeights> {
    let n = m.n;
    if n == 1 {
        return Ok(vec![1.0]);
    }
    let solve = |entries: &[f64]| -> Option<DVector<f64>> {
        let mat = DMatrix::from_row_slice(n, n, entries);
        let chol = Cholesky::new(mat)?;
        Some(chol.solve(&DVector::from_element(n, 1.0)))
    };
    let solution = match solve(&m.entries) {
        Some(s) => s,
        None => {
            let mean_diag = (0..n).map(|i| m.entries[i * n + i]).sum::<f64>() / n as f64;
            let bump = (10.0 * mean_diag).max(CONDITIONING_FLOOR);
            let mut retry = m.entries.clone();
            for i in 0..n {
                retry[i * n + i] += bump;
            }
            solve(&retry).ok_or(Error::NotPositiveDefinite)?
        }
    };
    let total: f64 = solution.iter().sum();
    if !(total.abs() > 0.0) || !total.is_finite() {
        return Err(Error::NotPositiveDefinite);
    }
    Ok(solution.iter().map(|v| v / total).collect())
}

/// Consensus labeling by per-voxel weighted voting.
///
/// Atlases are canonically ordered by `source_id` before any arithmetic, so
/// the result is invariant under permutation of the input list. Voxels where
/// all atlases agree take that label directly (weights sum to 1 regardless);
/// the dependency matrix is solved only where votes disagree.
pub fn fuse_labels(
    atlases: &[WarpedAtlas],
    target: &Volume,
    params: &FusionParams,
) -> Result<LabelMap> {
    params.validate()?;
    if atlases.is_empty() {
        return Err(Error::EmptyAtlasList);
    }
    let mut order: Vec<usize> = (0..atlases.len()).collect();
    order.sort_by(|&a, &b| atlases[a].source_id.cmp(&atlases[b].source_id));
    let atlases: Vec<&WarpedAtlas> = order.into_iter().map(|i| &atlases[i]).collect();

    for a in &atlases {
        target.grid().ensure_same(a.intensity.grid())?;
        target.grid().ensure_same(a.labels.grid())?;
    }
    let grid = *target.grid();
    let mut legend = Legend::new();
    for a in &atlases {
        for (id, name) in a.labels.legend() {
            match legend.get(id) {
                Some(existing) if existing != name => {
                    return Err(Error::LegendConflict {
                        id: *id,
                        first: existing.clone(),
                        second: name.clone(),
                    });
                }
                _ => {
                    legend.insert(*id, name.clone());
                }
            }
        }
    }

    let offsets = search_offsets(params.search_radius);
    let mut out = vec![0u32; grid.len()];
    out.par_iter_mut().enumerate().for_each(|(flat, out_label)| {
        let votes: Vec<u32> = atlases.iter().map(|a| a.labels.data()[flat]).collect();
        if votes.iter().all(|&v| v == votes[0]) {
            *out_label = votes[0];
            return;
        }
        let x = grid.delinearize(flat);
        let residuals: Vec<Vec<f64>> = atlases
            .iter()
            .map(|a| {
                let off =
                    best_patch_offset_ordered(target, &a.intensity, x, params.patch_radius, &offsets);
                patch_residuals(target, &a.intensity, x, off, params.patch_radius)
            })
            .collect();
        let m = dependency_from_residuals(&residuals, params);
        let weights = match fusion_weights(&m) {
            Ok(w) => w,
            Err(_) => vec![1.0 / votes.len() as f64; votes.len()],
        };
        *out_label = argmax_label(&votes, &weights);
    });

    LabelMap::new(grid, out, legend)
}

/// Accumulate weights per candidate label and take the argmax; ties break
/// toward background (0), then the smaller label id. Per-label sums run over
/// weights sorted by total order, so the outcome is independent of atlas
/// ordering at the bit level.
fn argmax_label(votes: &[u32], weights: &[f64]) -> u32 {
    let mut candidates: Vec<u32> = votes.to_vec();
    candidates.sort_unstable();
    candidates.dedup();
    let mut best_label = 0u32;
    let mut best_score = f64::NEG_INFINITY;
    for &label in &candidates {
        let mut parts: Vec<f64> =
            votes.iter().zip(weights).filter(|(v, _)| **v == label).map(|(_, w)| *w).collect();
        parts.sort_by(f64::total_cmp);
        let score: f64 = parts.iter().sum();
        // candidates ascend, so strict > keeps background/smaller ids on ties
        if score > best_score {
            best_score = score;
            best_label = label;
        }
    }
    best_label
}

/// Binary mask of one structure from a consensus labeling; the legend keeps
/// `{0, id}`.
pub fn extract_structure(consensus: &LabelMap, id: u32) -> Result<LabelMap> {
    if !consensus.legend().contains_key(&id) {
        return Err(Error::UnknownLabel(id));
    }
    consensus.relabel(|v| if v == id { id } else { 0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::volume::legend;
    use approx::assert_relative_eq;

    fn texture(g: Grid, salt: u32) -> Volume {
        Volume::from_fn(g, |i, j, k| {
            let n = (i as u32)
                .wrapping_mul(73856093)
                .wrapping_add((j as u32).wrapping_mul(19349663))
                .wrapping_add((k as u32).wrapping_mul(83492791))
                .wrapping_add(salt.wrapping_mul(2654435761));
            (n % 977) as f32 * 0.41
        })
        .unwrap()
    }

    fn atlas_like(v: &Volume, labels: Vec<u32>, leg: &[(u32, &str)], id: impl Into<String>) -> WarpedAtlas {
        let lm = LabelMap::new(*v.grid(), labels, legend(leg)).unwrap();
        WarpedAtlas::new(v.clone(), lm, id).unwrap()
    }

    #[test]
    fn identical_atlas_has_zero_offset() {
        let g = Grid::isotropic([9, 9, 9]);
        let v = texture(g, 0);
        let a = atlas_like(&v, vec![0; g.len()], &[], "a");
        let off = best_patch_offset(&v, &a, VoxelIndex::new(4, 4, 4), &FusionParams::default());
        assert_eq!(off, [0, 0, 0]);
    }

    #[test]
    fn shifted_atlas_recovers_alignment() {
        let g = Grid::isotropic([11, 9, 9]);
        let target = texture(g, 0);
        // atlas(x) = target(x + 1): the matching atlas patch for the target
        // patch at x sits at offset (-1, 0, 0)
        let atlas_vol = Volume::from_fn(g, |i, j, k| {
            if i + 1 < 11 {
                target.get(i + 1, j, k)
            } else {
                -1000.0
            }
        })
        .unwrap();
        let a = atlas_like(&atlas_vol, vec![0; g.len()], &[], "a");
        let off = best_patch_offset(&target, &a, VoxelIndex::new(5, 4, 4), &FusionParams::default());
        assert_eq!(off, [-1, 0, 0]);
    }

    #[test]
    fn constant_patches_tie_break_to_zero() {
        let g = Grid::isotropic([9, 9, 9]);
        let v = Volume::from_fn(g, |_, _, _| 7.0).unwrap();
        let a = atlas_like(&v, vec![0; g.len()], &[], "a");
        let off = best_patch_offset(&v, &a, VoxelIndex::new(4, 4, 4), &FusionParams::default());
        assert_eq!(off, [0, 0, 0]);
    }

    #[test]
    fn identical_patches_give_conditioned_identity_and_uniform_weights() {
        let g = Grid::isotropic([9, 9, 9]);
        let v = texture(g, 3);
        let atlases: Vec<WarpedAtlas> =
            (0..3).map(|n| atlas_like(&v, vec![0; g.len()], &[], format!("a{n}"))).collect();
        let m = dependency_matrix(&v, &atlases, VoxelIndex::new(4, 4, 4), &FusionParams::default())
            .unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    assert!(m.get(i, j) > 0.0);
                } else {
                    assert_eq!(m.get(i, j), 0.0);
                }
            }
        }
        let w = fusion_weights(&m).unwrap();
        for &wi in &w {
            assert_relative_eq!(wi, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn dependency_matches_hand_computation() {
        // n = 2 with constant-offset atlases; patch_radius 1 on a 3x3x3
        // volume, centered so clamping never leaves the block
        let g = Grid::isotropic([3, 3, 3]);
        let target = Volume::from_fn(g, |i, j, k| (i + j + k) as f32).unwrap();
        let a0 = Volume::from_fn(g, |i, j, k| (i + j + k) as f32 + 1.0).unwrap();
        let a1 = Volume::from_fn(g, |i, j, k| (i + j + k) as f32 + 2.0).unwrap();
        let params = FusionParams { patch_radius: 1, search_radius: 0, beta: 2.0, epsilon: 0.1 };
        let atlases =
            vec![atlas_like(&a0, vec![0; 27], &[], "a0"), atlas_like(&a1, vec![0; 27], &[], "a1")];
        let m = dependency_matrix(&target, &atlases, VoxelIndex::new(1, 1, 1), &params).unwrap();
        // residuals: a0 -> 1 per voxel, a1 -> 2 per voxel, 27 patch voxels:
        // M00 = (27*1*1)^2, M11 = (27*2*2)^2, M01 = (27*1*2)^2
        let m00 = 27.0f64.powi(2);
        let m11 = 108.0f64.powi(2);
        let m01 = 54.0f64.powi(2);
        let cond = 0.1 * (m00 + m11) / 2.0;
        assert_relative_eq!(m.get(0, 0), m00 + cond, epsilon = 1e-9);
        assert_relative_eq!(m.get(1, 1), m11 + cond, epsilon = 1e-9);
        assert_relative_eq!(m.get(0, 1), m01, epsilon = 1e-9);
        assert_relative_eq!(m.get(1, 0), m01, epsilon = 1e-9);
    }

    #[test]
    fn weights_for_single_atlas_and_identity() {
        assert_eq!(fusion_weights(&DependencyMatrix::identity(1)).unwrap(), vec![1.0]);
        let w = fusion_weights(&DependencyMatrix::identity(4)).unwrap();
        for &wi in &w {
            assert_relative_eq!(wi, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn weights_for_diag_1_4() {
        // M = diag(1, 4): M^-1 1 = (1, 0.25) -> w = (0.8, 0.2)
        let m = DependencyMatrix::from_entries(2, vec![1.0, 0.0, 0.0, 4.0]).unwrap();
        let w = fusion_weights(&m).unwrap();
        assert_relative_eq!(w[0], 0.8, epsilon = 1e-12);
        assert_relative_eq!(w[1], 0.2, epsilon = 1e-12);
    }

    #[test]
    fn weights_sum_to_one_on_random_spd() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let n = rng.random_range(2..7);
            let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0f64));
            let spd = a.transpose() * &a + DMatrix::identity(n, n) * 0.05;
            let entries: Vec<f64> =
                (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| spd[(i, j)]).collect();
            let m = DependencyMatrix::from_entries(n, entries).unwrap();
            let w = fusion_weights(&m).unwrap();
            assert_relative_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        }
    }

    fn votes_fixture(votes: &[u32]) -> (Vec<WarpedAtlas>, Volume) {
        let g = Grid::isotropic([7, 7, 7]);
        let target = texture(g, 0);
        let atlases: Vec<WarpedAtlas> = votes
            .iter()
            .enumerate()
            .map(|(n, &v)| {
                let mut labels = vec![0u32; g.len()];
                labels[g.offset(3, 3, 3)] = v;
                atlas_like(&target, labels, &[(1, "vertebra"), (2, "rib")], format!("a{n}"))
            })
            .collect();
        (atlases, target)
    }

    #[test]
    fn unanimous_vote_passes_through() {
        let (atlases, target) = votes_fixture(&[1, 1, 1]);
        let c = fuse_labels(&atlases, &target, &FusionParams::default()).unwrap();
        assert_eq!(c.get(3, 3, 3), 1);
        assert_eq!(c.count(1), 1);
    }

    #[test]
    fn majority_vote_with_uniform_weights() {
        // atlases share the target intensity, so M is conditioning-only and
        // weights are uniform: {1, 1, 2} -> 1
        let (atlases, target) = votes_fixture(&[1, 1, 2]);
        let c = fuse_labels(&atlases, &target, &FusionParams::default()).unwrap();
        assert_eq!(c.get(3, 3, 3), 1);
    }

    #[test]
    fn rib_majority_excludes_vertebra() {
        // {vertebra, rib, rib} -> rib: the joint-atlas mechanism at unit scale
        let (atlases, target) = votes_fixture(&[1, 2, 2]);
        let c = fuse_labels(&atlases, &target, &FusionParams::default()).unwrap();
        assert_eq!(c.get(3, 3, 3), 2);
        let vertebra = extract_structure(&c, 1).unwrap();
        assert_eq!(vertebra.count(1), 0);
    }

    #[test]
    fn tie_breaks_toward_background_then_smaller_id() {
        // 2/3 weight on label 1 vs 1/3 on background: 1 wins
        let (a, t) = votes_fixture(&[0, 1, 1]);
        assert_eq!(fuse_labels(&a, &t, &FusionParams::default()).unwrap().get(3, 3, 3), 1);
        // exact tie {0, 1}: background wins
        let (a, t) = votes_fixture(&[0, 1]);
        assert_eq!(fuse_labels(&a, &t, &FusionParams::default()).unwrap().get(3, 3, 3), 0);
        // exact tie {1, 2}: smaller id wins
        let (a, t) = votes_fixture(&[1, 2]);
        assert_eq!(fuse_labels(&a, &t, &FusionParams::default()).unwrap().get(3, 3, 3), 1);
    }

    #[test]
    fn consensus_invariant_under_permutation() {
        let g = Grid::isotropic([8, 8, 8]);
        let target = texture(g, 0);
        let mut atlases: Vec<WarpedAtlas> = (0..4)
            .map(|n| {
                let vol = texture(g, n + 1);
                let labels: Vec<u32> = (0..g.len())
                    .map(|f| {
                        if (f + n as usize) % 5 == 0 {
                            1
                        } else if (f + n as usize) % 7 == 0 {
                            2
                        } else {
                            0
                        }
                    })
                    .collect();
                atlas_like(&vol, labels, &[(1, "vertebra"), (2, "rib")], format!("a{n}"))
            })
            .collect();
        let params = FusionParams { search_radius: 1, ..Default::default() };
        let c1 = fuse_labels(&atlases, &target, &params).unwrap();
        atlases.reverse();
        let c2 = fuse_labels(&atlases, &target, &params).unwrap();
        assert_eq!(c1.data(), c2.data());
        atlases.swap(0, 2);
        let c3 = fuse_labels(&atlases, &target, &params).unwrap();
        assert_eq!(c1.data(), c3.data());
    }

    #[test]
    fn unanimous_everywhere_equals_input() {
        let g = Grid::isotropic([8, 8, 8]);
        let target = texture(g, 0);
        let labels: Vec<u32> = (0..g.len()).map(|f| if f % 3 == 0 { 1 } else { 0 }).collect();
        let atlases: Vec<WarpedAtlas> = (0..3)
            .map(|n| atlas_like(&texture(g, n + 1), labels.clone(), &[(1, "vertebra")], format!("a{n}")))
            .collect();
        let c = fuse_labels(&atlases, &target, &FusionParams::default()).unwrap();
        assert_eq!(c.data(), labels.as_slice());
    }

    #[test]
    fn intensity_scaling_leaves_consensus_unchanged() {
        // scaling all intensities by s scales M by a constant; with epsilon
        // relative to the mean diagonal the argmax is unchanged
        let g = Grid::isotropic([8, 8, 8]);
        let mk_set = |scale: f32| -> (Vec<WarpedAtlas>, Volume) {
            let t = Volume::from_fn(g, |i, j, k| texture(g, 0).get(i, j, k) * scale).unwrap();
            let atlases: Vec<WarpedAtlas> = (0..3)
                .map(|n| {
                    let vol =
                        Volume::from_fn(g, |i, j, k| texture(g, n + 1).get(i, j, k) * scale).unwrap();
                    let labels: Vec<u32> =
                        (0..g.len()).map(|f| if (f + n as usize) % 4 == 0 { 1 } else { 0 }).collect();
                    atlas_like(&vol, labels, &[(1, "vertebra")], format!("a{n}"))
                })
                .collect();
            (atlases, t)
        };
        let params = FusionParams { search_radius: 1, ..Default::default() };
        let (a1, t1) = mk_set(1.0);
        let (a2, t2) = mk_set(3.0);
        let c1 = fuse_labels(&a1, &t1, &params).unwrap();
        let c2 = fuse_labels(&a2, &t2, &params).unwrap();
        assert_eq!(c1.data(), c2.data());
    }

    #[test]
    fn extract_structure_variants() {
        let g = Grid::isotropic([4, 4, 4]);
        let empty = LabelMap::zeros(g, legend(&[(1, "vertebra")]));
        let e = extract_structure(&empty, 1).unwrap();
        assert_eq!(e.count(1), 0);

        let data: Vec<u32> = (0..g.len()).map(|f| (f % 3) as u32).collect();
        let lm = LabelMap::new(g, data.clone(), legend(&[(1, "vertebra"), (2, "rib")])).unwrap();
        let m = extract_structure(&lm, 1).unwrap();
        for (got, src) in m.data().iter().zip(&data) {
            assert_eq!(*got, if *src == 1 { 1 } else { 0 });
        }
        assert_eq!(m.legend().len(), 2);
        assert!(m.legend().contains_key(&0) && m.legend().contains_key(&1));
        assert!(matches!(extract_structure(&lm, 9), Err(Error::UnknownLabel(9))));
    }
}
