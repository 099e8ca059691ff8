//! Island removal and hole filling on binary masks. Foreground components
//! use 26-connectivity, background hole detection uses 6-connectivity (the
//! standard complementary pairing).

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::volume::LabelMap;

fn binary_label(mask: &LabelMap) -> Result<Option<u32>> {
    let mut label = None;
    for &v in mask.data() {
        if v != 0 {
            match label {
                None => label = Some(v),
                Some(l) if l != v => {
                    return Err(Error::InvalidParams(format!(
                        "expected a binary mask, found labels {l} and {v}"
                    )))
                }
                _ => {}
            }
        }
    }
    Ok(label)
}

fn neighbors26(dims: [usize; 3], flat: usize, out: &mut Vec<usize>) {
    out.clear();
    let [nx, ny, nz] = dims;
    let i = flat % nx;
    let j = (flat / nx) % ny;
    let k = flat / (nx * ny);
    for dk in -1i64..=1 {
        for dj in -1i64..=1 {
            for di in -1i64..=1 {
                if di == 0 && dj == 0 && dk == 0 {
                    continue;
                }
                let (ni, nj, nk) = (i as i64 + di, j as i64 + dj, k as i64 + dk);
                if ni >= 0 && nj >= 0 && nk >= 0 && ni < nx as i64 && nj < ny as i64 && nk < nz as i64 {
                    out.push(ni as usize + nx * (nj as usize + ny * nk as usize));
                }
            }
        }
    }
}

fn neighbors6(dims: [usize; 3], flat: usize, out: &mut Vec<usize>) {
    out.clear();
    let [nx, ny, nz] = dims;
    let i = flat % nx;
    let j = (flat / nx) % ny;
    let k = flat / (nx * ny);
    if i > 0 {
        out.push(flat - 1);
    }
    if i + 1 < nx {
        out.push(flat + 1);
    }
    if j > 0 {
        out.push(flat - nx);
    }
    if j + 1 < ny {
        out.push(flat + nx);
    }
    if k > 0 {
        out.push(flat - nx * ny);
    }
    if k + 1 < nz {
        out.push(flat + nx * ny);
    }
}

/// Keep only the largest 26-connected foreground component; size ties go to
/// the component containing the lowest flat index.
pub fn remove_islands(mask: &LabelMap) -> Result<LabelMap> {
    let Some(label) = binary_label(mask)? else {
        return Ok(mask.clone());
    };
    let dims = mask.grid().dims;
    let data = mask.data();
    let mut component = vec![u32::MAX; data.len()];
    let mut sizes: Vec<(usize, usize)> = Vec::new(); // (size, seed flat index)
    let mut queue = VecDeque::new();
    let mut nbr = Vec::with_capacity(26);
    for start in 0..data.len() {
        if data[start] == 0 || component[start] != u32::MAX {
            continue;
        }
        let id = sizes.len() as u32;
        let mut size = 0usize;
        component[start] = id;
        queue.push_back(start);
        while let Some(f) = queue.pop_front() {
            size += 1;
            neighbors26(dims, f, &mut nbr);
            for &n in &nbr {
                if data[n] != 0 && component[n] == u32::MAX {
                    component[n] = id;
                    queue.push_back(n);
                }
            }
        }
        sizes.push((size, start));
    }
    if sizes.is_empty() {
        return Ok(mask.clone());
    }
    // components were seeded in raster order: max_by_key keeps the earliest
    // seed on ties because later entries must be strictly larger to win
    let best = sizes
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| a.0.cmp(&b.0).then(b.1.cmp(&a.1)))
        .map(|(idx, _)| idx as u32)
        .unwrap();
    let out: Vec<u32> =
        component.iter().map(|&c| if c == best { label } else { 0 }).collect();
    mask.with_data(out)
}

fn dilate26(fg: &mut [bool], dims: [usize; 3]) {
    let src = fg.to_vec();
    let mut nbr = Vec::with_capacity(26);
    for flat in 0..src.len() {
        if src[flat] {
            continue;
        }
        neighbors26(dims, flat, &mut nbr);
        if nbr.iter().any(|&n| src[n]) {
            fg[flat] = true;
        }
    }
}

fn erode26(fg: &mut [bool], dims: [usize; 3]) {
    let src = fg.to_vec();
    let mut nbr = Vec::with_capacity(26);
    for flat in 0..src.len() {
        if !src[flat] {
            continue;
        }
        neighbors26(dims, flat, &mut nbr);
        // voxels at the volume border keep their value (the structuring
        // element is clipped there rather than treating outside as background)
        if nbr.len() == 26 && !nbr.iter().all(|&n| src[n]) {
            fg[flat] = false;
        }
    }
}

/// Fill interior holes: background components with no 6-connected path to the
/// volume border become foreground; then one morphological closing with a
/// 3x3x3 structuring element.
pub fn fill_holes(mask: &LabelMap) -> Result<LabelMap> {
    let Some(label) = binary_label(mask)? else {
        return Ok(mask.clone());
    };
    let dims = mask.grid().dims;
    let [nx, ny, nz] = dims;
    let data = mask.data();
    let mut fg: Vec<bool> = data.iter().map(|&v| v != 0).collect();

    // flood the outside: 6-connected background reachable from the border
    let mut outside = vec![false; fg.len()];
    let mut queue = VecDeque::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if i == 0 || j == 0 || k == 0 || i == nx - 1 || j == ny - 1 || k == nz - 1 {
                    let flat = i + nx * (j + ny * k);
                    if !fg[flat] && !outside[flat] {
                        outside[flat] = true;
                        queue.push_back(flat);
                    }
                }
            }
        }
    }
    let mut nbr = Vec::with_capacity(6);
    while let Some(f) = queue.pop_front() {
        neighbors6(dims, f, &mut nbr);
        for &n in &nbr {
            if !fg[n] && !outside[n] {
                outside[n] = true;
                queue.push_back(n);
            }
        }
    }
    for flat in 0..fg.len() {
        if !fg[flat] && !outside[flat] {
            fg[flat] = true;
        }
    }

    dilate26(&mut fg, dims);
    erode26(&mut fg, dims);

    let out: Vec<u32> = fg.iter().map(|&b| if b { label } else { 0 }).collect();
    mask.with_data(out)
}
