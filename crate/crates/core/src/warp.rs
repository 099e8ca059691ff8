//! Resampling of volumes and label maps through spatial transforms.

use rayon::prelude::*;

use crate::grid::Grid;
use crate::transform::SpatialTransform;
use crate::volume::{LabelMap, Volume};

/// Resample `moving` onto `target` through `transform` with trilinear
/// interpolation. Out-of-field samples take `moving`'s minimum intensity.
pub fn warp_volume<T: SpatialTransform>(moving: &Volume, transform: &T, target: &Grid) -> Volume {
    warp_volume_with(moving, transform, target, moving.min_intensity())
}

/// As [`warp_volume`] with an explicit padding intensity.
pub fn warp_volume_with<T: SpatialTransform>(
    moving: &Volume,
    transform: &T,
    target: &Grid,
    padding: f32,
) -> Volume {
    let points = transform.map_grid(target);
    let mut data = vec![0.0f32; target.len()];
    // disjoint output voxels: parallel schedule cannot affect the result
    data.par_iter_mut().zip(points.par_iter()).for_each(|(out, p)| {
        *out = moving.sample_world(*p).unwrap_or(padding);
    });
    Volume::new(*target, data).expect("warped samples are finite")
}

/// Resample labels with nearest-neighbor interpolation; out-of-field voxels
/// become background (0). The legend is passed through verbatim.
pub fn warp_labels<T: SpatialTransform>(moving: &LabelMap, transform: &T, target: &Grid) -> LabelMap {
    let points = transform.map_grid(target);
    let grid = *moving.grid();
    let [nx, ny, nz] = grid.dims;
    let src = moving.data();
    let mut data = vec![0u32; target.len()];
    data.par_iter_mut().zip(points.par_iter()).for_each(|(out, p)| {
        let v = grid.world_to_voxel(*p);
        let i = v[0].round();
        let j = v[1].round();
        let k = v[2].round();
        if i >= 0.0 && j >= 0.0 && k >= 0.0 {
            let (i, j, k) = (i as usize, j as usize, k as usize);
            if i < nx && j < ny && k < nz {
                *out = src[grid.offset(i, j, k)];
            }
        }
    });
    LabelMap::new(*target, data, moving.legend().clone()).expect("legend covers all warped labels")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transform::{AffineTransform, BSplineGrid};
    use crate::volume::legend;

    fn ramp(grid: Grid) -> Volume {
        // non-periodic texture so shifts are detectable
        Volume::from_fn(grid, |i, j, k| {
            (i * i + 3 * j + 7 * k) as f32 + ((i * 13 + j * 5 + k * 11) % 17) as f32 * 0.25
        })
        .unwrap()
    }

    #[test]
    fn identity_warp_is_bit_exact() {
        let v = ramp(Grid::new([6, 5, 4], [0.7, 1.1, 1.3], [2.0, -1.0, 0.5]).unwrap());
        let w = warp_volume(&v, &AffineTransform::identity(), v.grid());
        assert_eq!(v.data(), w.data());
    }

    #[test]
    fn one_voxel_translation_shifts_interior() {
        let g = Grid::isotropic([8, 6, 6]);
        let v = ramp(g);
        // mapping x -> x - 1 samples moving at (i-1): output(i) = input(i-1)
        let t = AffineTransform::from_translation([-1.0, 0.0, 0.0]);
        let w = warp_volume(&v, &t, &g);
        for k in 0..6 {
            for j in 0..6 {
                for i in 1..8 {
                    assert_eq!(w.get(i, j, k), v.get(i - 1, j, k), "at ({i},{j},{k})");
                }
            }
        }
    }

    #[test]
    fn zero_bspline_equals_identity_affine() {
        let g = Grid::isotropic([8, 8, 8]);
        let v = ramp(g);
        let b = BSplineGrid::for_image(&g, [4.0; 3]).unwrap();
        let wa = warp_volume(&v, &AffineTransform::identity(), &g);
        let wb = warp_volume(&v, &b, &g);
        assert_eq!(wa.data(), wb.data());
    }

    #[test]
    fn out_of_field_uses_minimum_padding() {
        let g = Grid::isotropic([4, 4, 4]);
        let v = Volume::from_fn(g, |i, _, _| 10.0 + i as f32).unwrap();
        let t = AffineTransform::from_translation([100.0, 0.0, 0.0]);
        let w = warp_volume(&v, &t, &g);
        assert!(w.data().iter().all(|&x| x == 10.0));
    }

    #[test]
    fn labels_shift_and_keep_legend() {
        let g = Grid::isotropic([6, 6, 6]);
        let mut data = vec![0u32; g.len()];
        data[g.offset(3, 3, 3)] = 2;
        let lm = LabelMap::new(g, data, legend(&[(1, "vertebra"), (2, "rib")])).unwrap();

        let id = warp_labels(&lm, &AffineTransform::identity(), &g);
        assert_eq!(id.data(), lm.data());

        let t = AffineTransform::from_translation([-1.0, 0.0, 0.0]);
        let w = warp_labels(&lm, &t, &g);
        assert_eq!(w.get(4, 3, 3), 2);
        assert_eq!(w.count(2), 1);
        assert_eq!(w.legend(), lm.legend());
    }

    #[test]
    fn warp_labels_never_invents_ids() {
        let g = Grid::isotropic([5, 5, 5]);
        let data: Vec<u32> = (0..g.len()).map(|n| (n % 3) as u32).collect();
        let lm = LabelMap::new(g, data, legend(&[(1, "a"), (2, "b")])).unwrap();
        let t = AffineTransform::from_rotation(2, 0.35, [2.0, 2.0, 2.0]);
        let w = warp_labels(&lm, &t, &g);
        for &v in w.data() {
            assert!(v <= 2);
        }
    }

    #[test]
    fn affine_warp_matches_direct_sampling() {
        // warping by A then reading voxel x equals sampling moving at A(x)
        let g = Grid::new([10, 9, 8], [1.0, 1.2, 0.9], [0.0, 1.0, -2.0]).unwrap();
        let v = ramp(g);
        let a = AffineTransform::from_rotation(1, 0.12, [4.0, 4.0, 2.0])
            .compose(&AffineTransform::from_translation([0.7, -0.4, 0.9]));
        let w = warp_volume(&v, &a, &g);
        for idx in [(2, 3, 4), (5, 5, 5), (7, 2, 6), (1, 8, 3)] {
            let p = g.voxel_to_world_unchecked(idx.0, idx.1, idx.2);
            let direct = v.sample_world(a.map_point(p)).unwrap_or(v.min_intensity());
            let warped = w.get(idx.0, idx.1, idx.2);
            assert!((direct - warped).abs() <= 1e-6 * direct.abs().max(1.0));
        }
    }
}
