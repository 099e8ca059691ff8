//! Separable Gaussian smoothing, Laplacian, and downsampling used by the
//! registration pyramid and the level-set edge term.

use crate::error::Result;
use crate::grid::Grid;
use crate::volume::Volume;

/// Discrete Gaussian kernel with standard deviation `sigma` (in samples),
/// truncated at 3 sigma and normalized to unit sum.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|n| {
            let x = n as f64 - radius as f64;
            (-0.5 * (x / sigma).powi(2)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

fn convolve_axis(data: &[f32], dims: [usize; 3], axis: usize, kernel: &[f64]) -> Vec<f32> {
    let [nx, ny, nz] = dims;
    let radius = kernel.len() / 2;
    let n_axis = dims[axis];
    let mut out = vec![0.0f32; data.len()];
    let stride = match axis {
        0 => 1,
        1 => nx,
        _ => nx * ny,
    };
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let pos = [i, j, k][axis];
                let flat = i + nx * (j + ny * k);
                let mut acc = 0.0f64;
                for (t, &w) in kernel.iter().enumerate() {
                    // clamp boundary samples
                    let p = (pos as isize + t as isize - radius as isize).clamp(0, n_axis as isize - 1) as usize;
                    let src = flat as isize + (p as isize - pos as isize) * stride as isize;
                    acc += w * data[src as usize] as f64;
                }
                out[flat] = acc as f32;
            }
        }
    }
    out
}

/// Gaussian smoothing with per-axis sigma given in voxels.
pub fn gaussian_smooth_voxels(v: &Volume, sigma_voxels: [f64; 3]) -> Volume {
    let mut data = v.data().to_vec();
    for axis in 0..3 {
        if sigma_voxels[axis] > 0.0 {
            data = convolve_axis(&data, v.grid().dims, axis, &gaussian_kernel(sigma_voxels[axis]));
        }
    }
    Volume::new(*v.grid(), data).expect("smoothing preserves finiteness")
}

/// Gaussian smoothing with sigma in millimeters.
pub fn gaussian_smooth_mm(v: &Volume, sigma_mm: f64) -> Volume {
    let s = v.grid().spacing;
    gaussian_smooth_voxels(v, [sigma_mm / s[0], sigma_mm / s[1], sigma_mm / s[2]])
}

/// 7-point Laplacian with physical spacing; boundary voxels use clamped
/// neighbors (zero second derivative across the border).
pub fn laplacian(v: &Volume) -> Volume {
    let g = v.grid();
    let [nx, ny, nz] = g.dims;
    let s = g.spacing;
    let mut out = vec![0.0f32; g.len()];
    let at = |i: isize, j: isize, k: isize| -> f64 {
        let i = i.clamp(0, nx as isize - 1) as usize;
        let j = j.clamp(0, ny as isize - 1) as usize;
        let k = k.clamp(0, nz as isize - 1) as usize;
        v.get(i, j, k) as f64
    };
    for k in 0..nz as isize {
        for j in 0..ny as isize {
            for i in 0..nx as isize {
                let c = at(i, j, k);
                let dxx = (at(i + 1, j, k) - 2.0 * c + at(i - 1, j, k)) / (s[0] * s[0]);
                let dyy = (at(i, j + 1, k) - 2.0 * c + at(i, j - 1, k)) / (s[1] * s[1]);
                let dzz = (at(i, j, k + 1) - 2.0 * c + at(i, j, k - 1)) / (s[2] * s[2]);
                out[(i as usize) + nx * ((j as usize) + ny * (k as usize))] = (dxx + dyy + dzz) as f32;
            }
        }
    }
    Volume::new(*g, out).expect("laplacian is finite")
}

/// Laplacian of Gaussian: smooth with `sigma_mm` then take the Laplacian.
pub fn laplacian_of_gaussian(v: &Volume, sigma_mm: f64) -> Volume {
    laplacian(&gaussian_smooth_mm(v, sigma_mm))
}

/// Downsample by 2 per axis (Gaussian pre-smoothing sigma = 0.7 * factor in
/// voxels), keeping world geometry: spacing doubles, origin stays on the
/// first retained voxel center.
pub fn downsample_by_two(v: &Volume) -> Result<Volume> {
    let g = v.grid();
    let smoothed = gaussian_smooth_voxels(v, [1.4, 1.4, 1.4]);
    let dims = [
        (g.dims[0] + 1) / 2,
        (g.dims[1] + 1) / 2,
        (g.dims[2] + 1) / 2,
    ];
    let spacing = [g.spacing[0] * 2.0, g.spacing[1] * 2.0, g.spacing[2] * 2.0];
    let coarse = Grid::new(dims.map(|d| d.max(1)), spacing, g.origin)?;
    Volume::from_fn(coarse, |i, j, k| smoothed.get(i * 2, j * 2, k * 2))
}
