//! Bending energy of a B-spline displacement field: the mean, over sampled
//! domain points, of the sum of squared second spatial derivatives of the
//! displacement (six unique terms per component, mixed terms counted twice).
//! Zero for any globally affine field.

use rayon::prelude::*;

use crate::grid::Grid;
use crate::transform::{bspline_weights, bspline_weights_d1, bspline_weights_d2, BSplineGrid};

const CHUNK: usize = 1 << 13;

/// The six second-derivative axis pairs and their multiplicities.
const TERMS: [(usize, usize, f64); 6] = [
    (0, 0, 1.0),
    (1, 1, 1.0),
    (2, 2, 1.0),
    (0, 1, 2.0),
    (0, 2, 2.0),
    (1, 2, 2.0),
];

struct AxisTable {
    cell: Vec<usize>,
    w0: Vec<[f64; 4]>,
    w1: Vec<[f64; 4]>,
    w2: Vec<[f64; 4]>,
}

fn axis_table(grid: &BSplineGrid, domain: &Grid, axis: usize, stride: usize) -> (AxisTable, Vec<usize>) {
    let n = domain.dims[axis];
    let samples: Vec<usize> = (0..n).step_by(stride).collect();
    let mut t = AxisTable {
        cell: Vec::with_capacity(samples.len()),
        w0: Vec::with_capacity(samples.len()),
        w1: Vec::with_capacity(samples.len()),
        w2: Vec::with_capacity(samples.len()),
    };
    let origin = grid.control_origin()[axis];
    let delta = grid.control_spacing()[axis];
    let max_cell = grid.control_dims()[axis] - 3;
    for &idx in &samples {
        let w = domain.origin[axis] + idx as f64 * domain.spacing[axis];
        let u = (w - origin) / delta;
        let c = (u.floor() as isize).clamp(1, max_cell as isize) as usize;
        let f = (u - c as f64).clamp(0.0, 1.0);
        t.cell.push(c);
        // chain rule: d/dx = (1/delta) d/du
        t.w0.push(bspline_weights(f));
        t.w1.push(bspline_weights_d1(f).map(|v| v / delta));
        t.w2.push(bspline_weights_d2(f).map(|v| v / (delta * delta)));
    }
    (t, samples)
}

/// Bending energy sampled at every voxel center of `domain`.
pub fn bending_energy(grid: &BSplineGrid, domain: &Grid) -> f64 {
    bending_energy_strided(grid, domain, 1)
}

/// Bending energy sampled on a strided sub-lattice of `domain`.
pub fn bending_energy_strided(grid: &BSplineGrid, domain: &Grid, stride: usize) -> f64 {
    let stride = stride.max(1);
    let (tx, sx) = axis_table(grid, domain, 0, stride);
    let (ty, sy) = axis_table(grid, domain, 1, stride);
    let (tz, sz) = axis_table(grid, domain, 2, stride);
    let n_samples = sx.len() * sy.len() * sz.len();
    if n_samples == 0 {
        return 0.0;
    }
    let [ncx, ncy, _] = grid.control_dims();
    let disp = grid.displacements();

    // flatten sample lattice; iterate fixed-size chunks for a deterministic sum
    let sample_ids: Vec<usize> = (0..n_samples).collect();
    let total: f64 = sample_ids
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = 0.0f64;
            let mut w_cache = [[[0.0f64; 4]; 4]; 6];
            for &s in chunk {
                let xi = s % sx.len();
                let rest = s / sx.len();
                let yi = rest % sy.len();
                let zi = rest / sy.len();
                let d2 = second_derivs(&tx, &ty, &tz, xi, yi, zi, ncx, ncy, disp, &mut w_cache);
                for (t, &(_, _, mult)) in TERMS.iter().enumerate() {
                    acc += mult * (d2[t][0] * d2[t][0] + d2[t][1] * d2[t][1] + d2[t][2] * d2[t][2]);
                }
            }
            acc
        })
        .collect::<Vec<f64>>()
        .into_iter()
        .sum();

    total / n_samples as f64
}

/// Second derivatives of the displacement components for the six axis pairs
/// at one sample; fills `w_cache[t][b][a]` with the xy-partial basis products
/// for reuse by the gradient scatter.
#[inline]
#[allow(clippy::too_many_arguments)]
fn second_derivs(
    tx: &AxisTable,
    ty: &AxisTable,
    tz: &AxisTable,
    xi: usize,
    yi: usize,
    zi: usize,
    ncx: usize,
    ncy: usize,
    disp: &[[f64; 3]],
    w_cache: &mut [[[f64; 4]; 4]; 6],
) -> [[f64; 3]; 6] {
    let (cx, cy, cz) = (tx.cell[xi], ty.cell[yi], tz.cell[zi]);
    let mut d2 = [[0.0f64; 3]; 6];
    for (t, &(pa, pb, _)) in TERMS.iter().enumerate() {
        let (ox, oy, oz) = orders(pa, pb);
        for b in 0..4 {
            let wy = pick(ty, yi, b, oy);
            for a in 0..4 {
                w_cache[t][b][a] = pick(tx, xi, a, ox) * wy;
            }
        }
        for c in 0..4 {
            let wz = pick(tz, zi, c, oz);
            for b in 0..4 {
                let row = (cx - 1) + ncx * ((cy - 1 + b) + ncy * (cz - 1 + c));
                for a in 0..4 {
                    let w = w_cache[t][b][a] * wz;
                    let d = &disp[row + a];
                    d2[t][0] += w * d[0];
                    d2[t][1] += w * d[1];
                    d2[t][2] += w * d[2];
                }
            }
        }
    }
    d2
}

/// Gradient of [`bending_energy_strided`] with respect to every control-point
/// displacement component.
pub fn bending_energy_gradient(grid: &BSplineGrid, domain: &Grid, stride: usize) -> Vec<[f64; 3]> {
    let stride = stride.max(1);
    let (tx, sx) = axis_table(grid, domain, 0, stride);
    let (ty, sy) = axis_table(grid, domain, 1, stride);
    let (tz, sz) = axis_table(grid, domain, 2, stride);
    let n_samples = sx.len() * sy.len() * sz.len();
    let n_controls = grid.num_controls();
    if n_samples == 0 {
        return vec![[0.0; 3]; n_controls];
    }
    let [ncx, ncy, _] = grid.control_dims();
    let disp = grid.displacements();
    let norm = 2.0 / n_samples as f64;

    let sample_ids: Vec<usize> = (0..n_samples).collect();
    let partials: Vec<Vec<[f64; 3]>> = sample_ids
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grad = vec![[0.0f64; 3]; n_controls];
            let mut w_cache = [[[0.0f64; 4]; 4]; 6]; // [term][b][a] xy basis product
            for &s in chunk {
                let xi = s % sx.len();
                let rest = s / sx.len();
                let yi = rest % sy.len();
                let zi = rest / sy.len();
                let (cx, cy, cz) = (tx.cell[xi], ty.cell[yi], tz.cell[zi]);
                let d2 = second_derivs(&tx, &ty, &tz, xi, yi, zi, ncx, ncy, disp, &mut w_cache);
                // scatter 2 * mult * d2 * basis back to the 64 support controls
                for c in 0..4 {
                    for b in 0..4 {
                        let base = (cx - 1) + ncx * ((cy - 1 + b) + ncy * (cz - 1 + c));
                        for a in 0..4 {
                            let mut gx = 0.0;
                            let mut gy = 0.0;
                            let mut gz = 0.0;
                            for (t, &(pa, pb, mult)) in TERMS.iter().enumerate() {
                                let (_, _, oz) = orders(pa, pb);
                                let wz = pick(&tz, zi, c, oz);
                                let w = w_cache[t][b][a] * wz * mult * norm;
                                gx += w * d2[t][0];
                                gy += w * d2[t][1];
                                gz += w * d2[t][2];
                            }
                            let g = &mut grad[base + a];
                            g[0] += gx;
                            g[1] += gy;
                            g[2] += gz;
                        }
                    }
                }
            }
            grad
        })
        .collect();

    let mut grad = vec![[0.0f64; 3]; n_controls];
    for p in partials {
        for (g, q) in grad.iter_mut().zip(p) {
            g[0] += q[0];
            g[1] += q[1];
            g[2] += q[2];
        }
    }
    grad
}

#[inline]
fn orders(pa: usize, pb: usize) -> (u8, u8, u8) {
    let mut o = [0u8; 3];
    o[pa] += 1;
    o[pb] += 1;
    (o[0], o[1], o[2])
}

#[inline]
fn pick(t: &AxisTable, idx: usize, support: usize, order: u8) -> f64 {
    match order {
        0 => t.w0[idx][support],
        1 => t.w1[idx][support],
        _ => t.w2[idx][support],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_grid(seed: u64, magnitude: f64) -> (BSplineGrid, Grid) {
        let domain = Grid::new([12, 10, 11], [1.0, 1.2, 0.9], [0.0, -1.0, 2.0]).unwrap();
        let mut g = BSplineGrid::for_image(&domain, [3.0, 3.5, 2.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for d in g.displacements_mut() {
            for c in 0..3 {
                d[c] = rng.random_range(-magnitude..magnitude);
            }
        }
        (g, domain)
    }

    /// Central finite differences of the analytic displacement field.
    fn fd_bending(grid: &BSplineGrid, domain: &Grid) -> f64 {
        let h = 1e-3;
        let mut total = 0.0;
        let mut n = 0usize;
        for idx in domain.indices() {
            let p = domain.voxel_to_world_unchecked(idx.i, idx.j, idx.k);
            let f = |q: [f64; 3]| grid.displacement_at(q);
            let mut sum = 0.0;
            for &(a, b, mult) in &TERMS {
                let d2 = if a == b {
                    let mut lo = p;
                    let mut hi = p;
                    lo[a] -= h;
                    hi[a] += h;
                    let (flo, fc, fhi) = (f(lo), f(p), f(hi));
                    [0, 1, 2].map(|c| (fhi[c] - 2.0 * fc[c] + flo[c]) / (h * h))
                } else {
                    let mut pp = p;
                    let mut pm = p;
                    let mut mp = p;
                    let mut mm = p;
                    pp[a] += h;
                    pp[b] += h;
                    pm[a] += h;
                    pm[b] -= h;
                    mp[a] -= h;
                    mp[b] += h;
                    mm[a] -= h;
                    mm[b] -= h;
                    let (fpp, fpm, fmp, fmm) = (f(pp), f(pm), f(mp), f(mm));
                    [0, 1, 2].map(|c| (fpp[c] - fpm[c] - fmp[c] + fmm[c]) / (4.0 * h * h))
                };
                sum += mult * d2.iter().map(|v| v * v).sum::<f64>();
            }
            total += sum;
            n += 1;
        }
        total / n as f64
    }

    #[test]
    fn zero_displacements_give_zero() {
        let domain = Grid::isotropic([10, 10, 10]);
        let g = BSplineGrid::for_image(&domain, [4.0; 3]).unwrap();
        assert_eq!(bending_energy(&g, &domain), 0.0);
    }

    #[test]
    fn affine_field_gives_zero() {
        // displacement linear in control position: u(p) = L p + t is
        // reproduced exactly by the spline, so second derivatives vanish
        let domain = Grid::isotropic([10, 10, 10]);
        let mut g = BSplineGrid::for_image(&domain, [4.0; 3]).unwrap();
        let [ncx, ncy, ncz] = g.control_dims();
        let origin = g.control_origin();
        let spacing = g.control_spacing();
        for ck in 0..ncz {
            for cj in 0..ncy {
                for ci in 0..ncx {
                    let p = [
                        origin[0] + ci as f64 * spacing[0],
                        origin[1] + cj as f64 * spacing[1],
                        origin[2] + ck as f64 * spacing[2],
                    ];
                    let off = g.control_offset(ci, cj, ck);
                    g.displacements_mut()[off] = [
                        0.02 * p[0] - 0.01 * p[1] + 0.3,
                        0.05 * p[2] - 1.0,
                        -0.03 * p[0] + 0.04 * p[2] + 0.2,
                    ];
                }
            }
        }
        let p = bending_energy(&g, &domain);
        assert!(p.abs() < 1e-18, "P = {p}");
    }

    #[test]
    fn constant_shift_invariance() {
        let (g, domain) = random_grid(7, 1.5);
        let p0 = bending_energy(&g, &domain);
        let mut shifted = g.clone();
        for d in shifted.displacements_mut() {
            d[0] += 10.0;
            d[1] -= 3.0;
            d[2] += 0.5;
        }
        let p1 = bending_energy(&shifted, &domain);
        assert_relative_eq!(p0, p1, epsilon = 1e-9 * p0.abs().max(1.0));
    }

    #[test]
    fn matches_finite_difference_oracle() {
        let (g, domain) = random_grid(3, 1.0);
        let analytic = bending_energy(&g, &domain);
        let fd = fd_bending(&g, &domain);
        assert_relative_eq!(analytic, fd, max_relative = 1e-4);
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let (g, domain) = random_grid(11, 0.8);
        let grad = bending_energy_gradient(&g, &domain, 1);
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..12 {
            let cp = rng.random_range(0..g.num_controls());
            let c = rng.random_range(0..3usize);
            let mut plus = g.clone();
            plus.displacements_mut()[cp][c] += h;
            let mut minus = g.clone();
            minus.displacements_mut()[cp][c] -= h;
            let fd = (bending_energy(&plus, &domain) - bending_energy(&minus, &domain)) / (2.0 * h);
            assert_relative_eq!(grad[cp][c], fd, epsilon = 1e-6, max_relative = 1e-4);
        }
    }
}
