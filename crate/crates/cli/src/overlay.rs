//! Slice overlays: windowed grayscale background with colored mask contours
//! (ground truth yellow, vertebra-only result red, joint-atlas result blue).

use image::{Rgb, RgbImage};
use vertseg_core::error::{Error, Result};
use vertseg_core::volume::{LabelMap, Volume};

pub const GT_COLOR: Rgb<u8> = Rgb([255, 230, 0]);
pub const V_COLOR: Rgb<u8> = Rgb([230, 30, 30]);
pub const VR_COLOR: Rgb<u8> = Rgb([40, 90, 255]);

/// Extract slice dims (width, height) for a given axis.
fn slice_shape(dims: [usize; 3], axis: usize) -> (usize, usize) {
    match axis {
        0 => (dims[1], dims[2]),
        1 => (dims[0], dims[2]),
        _ => (dims[0], dims[1]),
    }
}

#[inline]
fn slice_index(dims: [usize; 3], axis: usize, index: usize, u: usize, v: usize) -> usize {
    let (i, j, k) = match axis {
        0 => (index, u, v),
        1 => (u, index, v),
        _ => (u, v, index),
    };
    i + dims[0] * (j + dims[1] * k)
}

fn contour_pixels(mask: &LabelMap, axis: usize, index: usize) -> Vec<(usize, usize)> {
    let dims = mask.grid().dims;
    let (w, h) = slice_shape(dims, axis);
    let fg = |u: isize, v: isize| -> bool {
        if u < 0 || v < 0 || u >= w as isize || v >= h as isize {
            return false;
        }
        mask.data()[slice_index(dims, axis, index, u as usize, v as usize)] != 0
    };
    let mut out = Vec::new();
    for v in 0..h {
        for u in 0..w {
            if !fg(u as isize, v as isize) {
                continue;
            }
            let boundary = !fg(u as isize - 1, v as isize)
                || !fg(u as isize + 1, v as isize)
                || !fg(u as isize, v as isize - 1)
                || !fg(u as isize, v as isize + 1);
            if boundary {
                out.push((u, v));
            }
        }
    }
    out
}

/// Render one slice with optional contour overlays. Deterministic bytes for
/// identical inputs.
pub fn render_overlay(
    target: &Volume,
    gt: Option<&LabelMap>,
    mask_v: Option<&LabelMap>,
    mask_vr: Option<&LabelMap>,
    axis: usize,
    index: usize,
) -> Result<RgbImage> {
    if axis > 2 {
        return Err(Error::InvalidParams(format!("axis must be 0, 1 or 2, got {axis}")));
    }
    let dims = target.grid().dims;
    if index >= dims[axis] {
        return Err(Error::IndexOutOfRange {
            i: index,
            j: 0,
            k: 0,
            dims,
        });
    }
    for m in [gt, mask_v, mask_vr].into_iter().flatten() {
        target.grid().ensure_same(m.grid())?;
    }
    let (w, h) = slice_shape(dims, axis);

    // window on the slice range
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for v in 0..h {
        for u in 0..w {
            let x = target.data()[slice_index(dims, axis, index, u, v)];
            lo = lo.min(x);
            hi = hi.max(x);
        }
    }
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };

    let mut img = RgbImage::new(w as u32, h as u32);
    for v in 0..h {
        for u in 0..w {
            let x = target.data()[slice_index(dims, axis, index, u, v)];
            let g = ((x - lo) * scale).clamp(0.0, 255.0) as u8;
            img.put_pixel(u as u32, v as u32, Rgb([g, g, g]));
        }
    }
    for (mask, color) in [(gt, GT_COLOR), (mask_v, V_COLOR), (mask_vr, VR_COLOR)] {
        if let Some(m) = mask {
            for (u, v) in contour_pixels(m, axis, index) {
                img.put_pixel(u as u32, v as u32, color);
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use vertseg_core::grid::Grid;
    use vertseg_core::volume::legend;

    #[test]
    fn empty_masks_give_grayscale_only() {
        let g = Grid::isotropic([8, 8, 8]);
        let t = Volume::from_fn(g, |i, j, _| (i * 8 + j) as f32).unwrap();
        let img = render_overlay(&t, None, None, None, 2, 4).unwrap();
        for p in img.pixels() {
            assert!(p[0] == p[1] && p[1] == p[2], "non-gray pixel {p:?}");
        }
    }

    #[test]
    fn single_voxel_mask_colors_exactly_its_pixel() {
        let g = Grid::isotropic([8, 8, 8]);
        let t = Volume::from_fn(g, |_, _, _| 10.0).unwrap();
        let mut data = vec![0u32; g.len()];
        data[g.offset(3, 5, 4)] = 1;
        let m = LabelMap::new(g, data, legend(&[(1, "s")])).unwrap();
        let img = render_overlay(&t, Some(&m), None, None, 2, 4).unwrap();
        let mut colored = 0;
        for (x, y, p) in img.enumerate_pixels() {
            if *p == GT_COLOR {
                assert_eq!((x, y), (3, 5));
                colored += 1;
            }
        }
        assert_eq!(colored, 1);
        // a different slice shows nothing
        let img2 = render_overlay(&t, Some(&m), None, None, 2, 5).unwrap();
        assert!(img2.pixels().all(|p| *p != GT_COLOR));
    }

    #[test]
    fn deterministic_bytes() {
        let g = Grid::isotropic([10, 10, 10]);
        let t = Volume::from_fn(g, |i, j, k| (i + j + k) as f32).unwrap();
        let mut data = vec![0u32; g.len()];
        for f in (0..g.len()).step_by(7) {
            data[f] = 1;
        }
        let m = LabelMap::new(g, data, legend(&[(1, "s")])).unwrap();
        let a = render_overlay(&t, Some(&m), Some(&m), None, 1, 3).unwrap();
        let b = render_overlay(&t, Some(&m), Some(&m), None, 1, 3).unwrap();
        assert_eq!(a.as_raw(), b.as_raw());
    }

    #[test]
    fn bad_axis_and_index_rejected() {
        let g = Grid::isotropic([4, 4, 4]);
        let t = Volume::from_fn(g, |_, _, _| 0.0).unwrap();
        assert!(render_overlay(&t, None, None, None, 3, 0).is_err());
        assert!(render_overlay(&t, None, None, None, 0, 4).is_err());
    }
}
