//! Joint intensity histograms and normalized mutual information.
//!
//! Intensities are linearly rescaled to bin coordinates [0, bins-1] and
//! accumulated either into the nearest bin (box kernel, used for metric
//! reporting) or spread with a cubic B-spline Parzen window (used during
//! optimization, where differentiability matters). Total mass is normalized
//! to 1.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Voxels per parallel accumulation chunk. Partial histograms are merged in
/// chunk order so results do not depend on the thread count.
const CHUNK: usize = 1 << 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HistogramKernel {
    /// Nearest-bin accumulation; exact NMI = 2 for identical images.
    Box,
    /// Cubic B-spline Parzen window, differentiable in the sample value.
    CubicBSpline,
}

/// Cubic B-spline Parzen kernel, support (-2, 2), unit integral and unit sum
/// over integer shifts.
#[inline]
pub fn parzen_cubic(t: f64) -> f64 {
    let a = t.abs();
    if a < 1.0 {
        2.0 / 3.0 - a * a + a * a * a / 2.0
    } else if a < 2.0 {
        let b = 2.0 - a;
        b * b * b / 6.0
    } else {
        0.0
    }
}

/// Derivative of [`parzen_cubic`].
#[inline]
pub fn parzen_cubic_d1(t: f64) -> f64 {
    let a = t.abs();
    let s = if t < 0.0 { -1.0 } else { 1.0 };
    if a < 1.0 {
        s * (1.5 * a * a - 2.0 * a)
    } else if a < 2.0 {
        let b = 2.0 - a;
        s * (-0.5 * b * b)
    } else {
        0.0
    }
}

/// Linear map from intensity to bin coordinate in [0, bins-1].
///
/// The data range lands on [1.5, bins-2.5], leaving a guard margin so the
/// 4-bin cubic kernel support never crosses the histogram edge: mass is
/// conserved without clamping and the accumulation stays differentiable in
/// the sample value everywhere.
#[derive(Clone, Copy, Debug)]
pub struct BinScale {
    pub min: f64,
    pub scale: f64,
    pub bins: usize,
}

/// Guard bins per side.
pub const BIN_MARGIN: f64 = 1.5;

impl BinScale {
    /// Map `[min, max]` onto the guarded interior. Errors when the range is
    /// empty.
    pub fn new(min: f64, max: f64, bins: usize) -> Result<Self> {
        if !(max > min) {
            return Err(Error::DegenerateIntensityRange);
        }
        if bins < 8 {
            return Err(Error::InvalidParams(format!("bins must be >= 8, got {bins}")));
        }
        Ok(Self { min, scale: (bins as f64 - 1.0 - 2.0 * BIN_MARGIN) / (max - min), bins })
    }

    pub fn from_volume(v: &Volume, bins: usize) -> Result<Self> {
        Self::new(v.min_intensity() as f64, v.max_intensity() as f64, bins)
    }

    #[inline]
    pub fn bin(&self, v: f64) -> f64 {
        (BIN_MARGIN + (v - self.min) * self.scale).clamp(0.0, self.bins as f64 - 1.0)
    }
}

/// Normalized joint histogram of two equally-sized samples.
#[derive(Clone, Debug)]
pub struct JointHistogram {
    bins: usize,
    /// bins x bins probabilities, fixed-axis major (row = fixed bin).
    probs: Vec<f64>,
    marginal_fixed: Vec<f64>,
    marginal_moving: Vec<f64>,
}

impl JointHistogram {
    /// Accumulate from paired samples with explicit bin scales.
    pub fn from_samples(
        fixed: &[f32],
        moving: &[f32],
        fixed_scale: BinScale,
        moving_scale: BinScale,
        kernel: HistogramKernel,
    ) -> Result<Self> {
        assert_eq!(fixed.len(), moving.len());
        if fixed.is_empty() {
            return Err(Error::DegenerateIntensityRange);
        }
        let bins = fixed_scale.bins;
        assert_eq!(bins, moving_scale.bins);

        let partials: Vec<Vec<f64>> = fixed
            .par_chunks(CHUNK)
            .zip(moving.par_chunks(CHUNK))
            .map(|(fc, mc)| {
                let mut h = vec![0.0f64; bins * bins];
                match kernel {
                    HistogramKernel::Box => {
                        for (f, m) in fc.iter().zip(mc.iter()) {
                            let bi = fixed_scale.bin(*f as f64).round() as usize;
                            let bj = moving_scale.bin(*m as f64).round() as usize;
                            h[bi * bins + bj] += 1.0;
                        }
                    }
                    HistogramKernel::CubicBSpline => {
                        for (f, m) in fc.iter().zip(mc.iter()) {
                            let bf = fixed_scale.bin(*f as f64);
                            let bm = moving_scale.bin(*m as f64);
                            spread_cubic(&mut h, bins, bf, bm);
                        }
                    }
                }
                h
            })
            .collect();

        let mut counts = vec![0.0f64; bins * bins];
        for p in partials {
            for (c, v) in counts.iter_mut().zip(p) {
                *c += v;
            }
        }
        Self::from_counts(counts, bins)
    }

    /// Build from raw non-negative counts; normalizes and caches marginals.
    pub fn from_counts(counts: Vec<f64>, bins: usize) -> Result<Self> {
        assert_eq!(counts.len(), bins * bins);
        let total: f64 = counts.iter().sum();
        if !(total > 0.0) {
            return Err(Error::DegenerateIntensityRange);
        }
        let probs: Vec<f64> = counts.iter().map(|c| c / total).collect();
        let mut marginal_fixed = vec![0.0f64; bins];
        let mut marginal_moving = vec![0.0f64; bins];
        for i in 0..bins {
            for j in 0..bins {
                let p = probs[i * bins + j];
                marginal_fixed[i] += p;
                marginal_moving[j] += p;
            }
        }
        Ok(Self { bins, probs, marginal_fixed, marginal_moving })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn marginal_fixed(&self) -> &[f64] {
        &self.marginal_fixed
    }

    pub fn marginal_moving(&self) -> &[f64] {
        &self.marginal_moving
    }

    pub fn mass(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// Marginal entropies and joint entropy, in nats, with 0 log 0 = 0.
    pub fn entropies(&self) -> (f64, f64, f64) {
        let h = |ps: &[f64]| -> f64 { -ps.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>() };
        (h(&self.marginal_fixed), h(&self.marginal_moving), h(&self.probs))
    }

    /// Normalized mutual information (H1 + H2) / H12, in [1, 2].
    pub fn nmi(&self) -> f64 {
        let (h1, h2, h12) = self.entropies();
        assert!(
            h12 > 0.0 || (h1 == 0.0 && h2 == 0.0),
            "zero joint entropy with non-degenerate marginals"
        );
        if h12 == 0.0 {
            // single occupied cell: both marginals are delta distributions
            return 2.0;
        }
        (h1 + h2) / h12
    }
}

/// Spread unit mass at continuous bin coordinates with the cubic kernel;
/// spill past the edges is clamped into the boundary bins so total mass is
/// preserved exactly.
#[inline]
fn spread_cubic(h: &mut [f64], bins: usize, bf: f64, bm: f64) {
    let fi = bf.floor() as isize;
    let fj = bm.floor() as isize;
    let mut wf = [0.0f64; 4];
    let mut wm = [0.0f64; 4];
    let mut idf = [0usize; 4];
    let mut idm = [0usize; 4];
    for a in 0..4usize {
        let i = fi - 1 + a as isize;
        wf[a] = parzen_cubic(i as f64 - bf);
        idf[a] = i.clamp(0, bins as isize - 1) as usize;
        let j = fj - 1 + a as isize;
        wm[a] = parzen_cubic(j as f64 - bm);
        idm[a] = j.clamp(0, bins as isize - 1) as usize;
    }
    for a in 0..4 {
        if wf[a] == 0.0 {
            continue;
        }
        let row = idf[a] * bins;
        for b in 0..4 {
            h[row + idm[b]] += wf[a] * wm[b];
        }
    }
}

/// Joint histogram of two volumes on the same grid, ranges taken from each
/// volume's own data. Cubic Parzen kernel.
pub fn joint_histogram(fixed: &Volume, warped: &Volume, bins: usize) -> Result<JointHistogram> {
    joint_histogram_with(fixed, warped, bins, HistogramKernel::CubicBSpline)
}

pub fn joint_histogram_with(
    fixed: &Volume,
    warped: &Volume,
    bins: usize,
    kernel: HistogramKernel,
) -> Result<JointHistogram> {
    fixed.grid().ensure_same(warped.grid())?;
    if bins < 8 {
        return Err(Error::InvalidParams(format!("bins must be >= 8, got {bins}")));
    }
    let fs = BinScale::from_volume(fixed, bins)?;
    let ms = BinScale::from_volume(warped, bins)?;
    JointHistogram::from_samples(fixed.data(), warped.data(), fs, ms, kernel)
}

/// Normalized mutual information of a joint histogram (Eq: (H1 + H2) / H12).
pub fn nmi(hist: &JointHistogram) -> f64 {
    hist.nmi()
}
