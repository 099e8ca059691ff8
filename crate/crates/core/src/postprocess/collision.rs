//! Collision resolution between per-vertebra masks: voxels claimed by two or
//! more vertebrae are reassigned by a perceptron trained per case on the
//! uncontested voxels, with intensity-difference and centroid-distance
//! features.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::volume::{LabelMap, Volume};

/// Linear classifier over z-scored features.
#[derive(Clone, Debug)]
pub struct PerceptronModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
}

impl PerceptronModel {
    fn zscore(&self, features: &[f64]) -> Vec<f64> {
        features
            .iter()
            .zip(self.feature_means.iter().zip(&self.feature_stds))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    /// Decision value; >= 0 classifies as the positive class.
    pub fn decision(&self, features: &[f64]) -> f64 {
        let z = self.zscore(features);
        self.weights.iter().zip(&z).map(|(w, x)| w * x).sum::<f64>() + self.bias
    }

    pub fn classify(&self, features: &[f64]) -> bool {
        self.decision(features) >= 0.0
    }
}

/// Standard perceptron updates on z-scored features, deterministic example
/// order, fixed epoch cap. `labels[i]` true marks the positive class.
pub fn train_perceptron(features: &[Vec<f64>], labels: &[bool], epochs: usize) -> Result<PerceptronModel> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::InvalidParams("perceptron needs matched features and labels".into()));
    }
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(Error::SingleClassTraining);
    }
    let dim = features[0].len();
    let n = features.len() as f64;
    let mut means = vec![0.0f64; dim];
    for f in features {
        for (m, v) in means.iter_mut().zip(f) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= n;
    }
    let mut stds = vec![0.0f64; dim];
    for f in features {
        for (s, (v, m)) in stds.iter_mut().zip(f.iter().zip(&means)) {
            *s += (v - m) * (v - m);
        }
    }
    for s in &mut stds {
        *s = (*s / n).sqrt();
        // constant features carry no information; unit scale keeps them inert
        if *s <= 1e-12 {
            *s = 1.0;
        }
    }

    let mut model =
        PerceptronModel { weights: vec![0.0; dim], bias: 0.0, feature_means: means, feature_stds: stds };
    for _ in 0..epochs.max(1) {
        let mut errors = 0usize;
        for (f, &label) in features.iter().zip(labels) {
            let y = if label { 1.0 } else { -1.0 };
            let pred = if model.decision(f) >= 0.0 { 1.0 } else { -1.0 };
            if pred != y {
                let z = model.zscore(f);
                for (w, x) in model.weights.iter_mut().zip(&z) {
                    *w += y * x;
                }
                model.bias += y;
                errors += 1;
            }
        }
        if errors == 0 {
            break;
        }
    }
    Ok(model)
}

struct VertebraStats {
    label: u32,
    mean_intensity: f64,
    centroid: [f64; 3],
    /// true when the vertebra had no uncontested voxels and stats fell back
    /// to its full claimed region
    fallback: bool,
}

fn stats_over(target: &Volume, flats: &[usize]) -> (f64, [f64; 3]) {
    let g = target.grid();
    let mut sum_i = 0.0f64;
    let mut c = [0.0f64; 3];
    for &f in flats {
        let idx = g.delinearize(f);
        sum_i += target.data()[f] as f64;
        let p = g.voxel_to_world_unchecked(idx.i, idx.j, idx.k);
        c[0] += p[0];
        c[1] += p[1];
        c[2] += p[2];
    }
    let n = flats.len().max(1) as f64;
    (sum_i / n, [c[0] / n, c[1] / n, c[2] / n])
}

#[inline]
fn collision_features(target: &Volume, flat: usize, a: &VertebraStats, b: &VertebraStats) -> Vec<f64> {
    let g = target.grid();
    let idx = g.delinearize(flat);
    let p = g.voxel_to_world_unchecked(idx.i, idx.j, idx.k);
    let intensity = target.data()[flat] as f64;
    let dist = |c: [f64; 3]| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt();
    vec![intensity - a.mean_intensity, intensity - b.mean_intensity, dist(a.centroid), dist(b.centroid)]
}

/// Outcome of collision resolution: disjoint masks plus a per-input flag
/// marking vertebrae whose statistics fell back to the full claimed region.
pub struct CollisionResolution {
    pub masks: Vec<LabelMap>,
    pub fallback_flags: Vec<bool>,
}

/// Reassign every contested voxel (claimed by >= 2 masks) to exactly one
/// claimant. Claims are resolved pairwise in ascending label-id order; each
/// pair uses a perceptron trained on that case's uncontested voxels, or
/// nearest-centroid assignment when a vertebra has no uncontested voxels.
/// Output masks are pairwise disjoint and jointly cover exactly the union of
/// the inputs.
pub fn resolve_collisions(masks: &[LabelMap], target: &Volume) -> Result<CollisionResolution> {
    if masks.is_empty() {
        return Ok(CollisionResolution { masks: vec![], fallback_flags: vec![] });
    }
    for m in masks {
        target.grid().ensure_same(m.grid())?;
    }
    let n = masks.len();
    let n_vox = target.grid().len();

    // claim count per voxel
    let mut claims = vec![0u8; n_vox];
    for m in masks {
        for (c, &v) in claims.iter_mut().zip(m.data()) {
            if v != 0 {
                *c = c.saturating_add(1);
            }
        }
    }

    let mut uncontested: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut claimed: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (vi, m) in masks.iter().enumerate() {
        for (flat, &v) in m.data().iter().enumerate() {
            if v != 0 {
                claimed[vi].push(flat);
                if claims[flat] == 1 {
                    uncontested[vi].push(flat);
                }
            }
        }
    }

    let stats: Vec<VertebraStats> = (0..n)
        .map(|vi| {
            let label = masks[vi].data().iter().copied().find(|&v| v != 0).unwrap_or(0);
            let fallback = uncontested[vi].is_empty();
            let basis = if fallback { &claimed[vi] } else { &uncontested[vi] };
            let (mean_intensity, centroid) = stats_over(target, basis);
            VertebraStats { label, mean_intensity, centroid, fallback }
        })
        .collect();

    // resolve pairwise in ascending label-id order
    let mut vertebra_order: Vec<usize> = (0..n).collect();
    vertebra_order.sort_by_key(|&vi| (stats[vi].label, vi));

    // winner per contested voxel, keyed by flat index
    let mut winner: BTreeMap<usize, usize> = BTreeMap::new();
    for flat in 0..n_vox {
        if claims[flat] < 2 {
            continue;
        }
        let claimants: Vec<usize> = vertebra_order
            .iter()
            .copied()
            .filter(|&vi| masks[vi].data()[flat] != 0)
            .collect();
        winner.insert(flat, claimants[0]);
    }
    // pair models are trained lazily and cached
    let mut models: BTreeMap<(usize, usize), Option<PerceptronModel>> = BTreeMap::new();
    let flats: Vec<usize> = winner.keys().copied().collect();
    for flat in flats {
        let claimants: Vec<usize> = vertebra_order
            .iter()
            .copied()
            .filter(|&vi| masks[vi].data()[flat] != 0)
            .collect();
        let mut current = claimants[0];
        for &challenger in &claimants[1..] {
            let (a, b) = (current, challenger);
            let model = models.entry((a, b)).or_insert_with(|| {
                if stats[a].fallback || stats[b].fallback {
                    return None;
                }
                let mut features: Vec<Vec<f64>> = Vec::new();
                let mut labels: Vec<bool> = Vec::new();
                for &f in &uncontested[a] {
                    features.push(collision_features(target, f, &stats[a], &stats[b]));
                    labels.push(true);
                }
                for &f in &uncontested[b] {
                    features.push(collision_features(target, f, &stats[a], &stats[b]));
                    labels.push(false);
                }
                train_perceptron(&features, &labels, 50).ok()
            });
            let a_wins = match model {
                Some(m) => m.classify(&collision_features(target, flat, &stats[a], &stats[b])),
                None => {
                    // nearest-centroid fallback
                    let f = collision_features(target, flat, &stats[a], &stats[b]);
                    f[2] <= f[3]
                }
            };
            current = if a_wins { a } else { b };
        }
        winner.insert(flat, current);
    }

    let out: Vec<LabelMap> = (0..n)
        .map(|vi| {
            let data: Vec<u32> = masks[vi]
                .data()
                .iter()
                .enumerate()
                .map(|(flat, &v)| {
                    if v == 0 {
                        0
                    } else if claims[flat] < 2 || winner.get(&flat) == Some(&vi) {
                        v
                    } else {
                        0
                    }
                })
                .collect();
            masks[vi].with_data(data)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(CollisionResolution {
        masks: out,
        fallback_flags: stats.iter().map(|s| s.fallback).collect(),
    })
}
