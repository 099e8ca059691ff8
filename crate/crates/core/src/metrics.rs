//! Segmentation evaluation: Dice coefficient and one-sided mean / max
//! surface distances, whole-structure and per-substructure, with tabular
//! reporting (CSV and Markdown).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kdtree::KdTree;
use crate::volume::LabelMap;

/// Surface voxels of a binary mask as world coordinates (mm).
#[derive(Clone, Debug)]
pub struct SurfaceSet {
    pub points: Vec<[f64; 3]>,
}

impl SurfaceSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[inline]
fn is_fg(v: u32) -> bool {
    v != 0
}

/// Dice coefficient in percent: `2 |GT ∩ S| / (|GT| + |S|) * 100`.
/// Any nonzero label counts as foreground. Both-empty is 100 by convention
/// (vacuously perfect agreement).
pub fn dice(gt: &LabelMap, seg: &LabelMap) -> Result<f64> {
    gt.grid().ensure_same(seg.grid())?;
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    for (&g, &s) in gt.data().iter().zip(seg.data()) {
        let gf = is_fg(g);
        let sf = is_fg(s);
        a += gf as usize;
        b += sf as usize;
        inter += (gf && sf) as usize;
    }
    if a + b == 0 {
        return Ok(100.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64 * 100.0)
}

/// Foreground voxels with at least one background 6-neighbor; the volume
/// border counts as background. Coordinates in mm.
pub fn surface_voxels(mask: &LabelMap) -> SurfaceSet {
    let g = mask.grid();
    let [nx, ny, nz] = g.dims;
    let data = mask.data();
    let mut points = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if !is_fg(data[g.offset(i, j, k)]) {
                    continue;
                }
                let on_surface = i == 0
                    || i == nx - 1
                    || j == 0
                    || j == ny - 1
                    || k == 0
                    || k == nz - 1
                    || !is_fg(data[g.offset(i - 1, j, k)])
                    || !is_fg(data[g.offset(i + 1, j, k)])
                    || !is_fg(data[g.offset(i, j - 1, k)])
                    || !is_fg(data[g.offset(i, j + 1, k)])
                    || !is_fg(data[g.offset(i, j, k - 1)])
                    || !is_fg(data[g.offset(i, j, k + 1)]);
                if on_surface {
                    points.push(g.voxel_to_world_unchecked(i, j, k));
                }
            }
        }
    }
    SurfaceSet { points }
}

fn one_sided_distances(seg_surface: &SurfaceSet, gt_surface: &SurfaceSet) -> Result<Vec<f64>> {
    if seg_surface.is_empty() {
        return Err(Error::EmptySurface("segmentation"));
    }
    if gt_surface.is_empty() {
        return Err(Error::EmptySurface("ground-truth"));
    }
    let tree = KdTree::build(gt_surface.points.clone());
    Ok(seg_surface.points.iter().map(|&p| tree.nearest(p)).collect())
}

/// Mean one-sided surface distance (mm), segmentation -> ground truth.
pub fn asd(seg_surface: &SurfaceSet, gt_surface: &SurfaceSet) -> Result<f64> {
    let d = one_sided_distances(seg_surface, gt_surface)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Maximum one-sided surface distance (mm) over the same direction.
pub fn asd_max(seg_surface: &SurfaceSet, gt_surface: &SurfaceSet) -> Result<f64> {
    let d = one_sided_distances(seg_surface, gt_surface)?;
    Ok(d.into_iter().fold(0.0, f64::max))
}

/// Symmetric-average variant (mean of both directions); provided behind this
/// explicit call, not the default, since the reported formula is one-sided.
pub fn asd_symmetric(seg_surface: &SurfaceSet, gt_surface: &SurfaceSet) -> Result<f64> {
    Ok(0.5 * (asd(seg_surface, gt_surface)? + asd(gt_surface, seg_surface)?))
}

/// Metrics for one region.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub dice_pct: f64,
    pub asd_mm: f64,
    pub asd_max_mm: f64,
}

/// Whole-structure metrics plus per-substructure metrics for one case.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub whole: RegionMetrics,
    pub substructures: BTreeMap<String, RegionMetrics>,
}

fn region_metrics(seg: &LabelMap, gt: &LabelMap) -> Result<RegionMetrics> {
    let dc = dice(gt, seg)?;
    let seg_n = seg.data().iter().filter(|&&v| is_fg(v)).count();
    let gt_n = gt.data().iter().filter(|&&v| is_fg(v)).count();
    if seg_n == 0 && gt_n == 0 {
        // vacuously perfect: distances are zero by the both-empty convention
        return Ok(RegionMetrics { dice_pct: dc, asd_mm: 0.0, asd_max_mm: 0.0 });
    }
    let ss = surface_voxels(seg);
    let gs = surface_voxels(gt);
    Ok(RegionMetrics { dice_pct: dc, asd_mm: asd(&ss, &gs)?, asd_max_mm: asd_max(&ss, &gs)? })
}

fn restrict(mask: &LabelMap, region: &LabelMap) -> Result<LabelMap> {
    mask.grid().ensure_same(region.grid())?;
    let data: Vec<u32> = mask
        .data()
        .iter()
        .zip(region.data())
        .map(|(&m, &r)| if is_fg(m) && is_fg(r) { 1 } else { 0 })
        .collect();
    LabelMap::new(*mask.grid(), data, crate::volume::legend(&[(1, "region")]))
}

/// Whole-structure metrics plus, for each named substructure mask, metrics of
/// `seg ∩ region` against `gt ∩ region`.
pub fn evaluate(
    seg: &LabelMap,
    gt: &LabelMap,
    substructures: &BTreeMap<String, LabelMap>,
) -> Result<EvalReport> {
    seg.grid().ensure_same(gt.grid())?;
    let whole = region_metrics(seg, gt)?;
    let mut subs = BTreeMap::new();
    for (name, region) in substructures {
        let s = restrict(seg, region)?;
        let g = restrict(gt, region)?;
        subs.insert(name.clone(), region_metrics(&s, &g)?);
    }
    Ok(EvalReport { whole, substructures: subs })
}

/// Mean and sample standard deviation (n-1; zero when n <= 1).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Aggregate of a cohort of cases under one label (e.g. "V" or "VR").
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CohortSummary {
    pub label: String,
    pub n: usize,
    /// region order: whole structure first, then substructures by name
    pub regions: Vec<String>,
    pub dice: BTreeMap<String, (f64, f64)>,
    pub asd: BTreeMap<String, (f64, f64)>,
    pub asd_max: BTreeMap<String, (f64, f64)>,
}

/// Name used for the whole-structure column.
pub const WHOLE_REGION: &str = "WV";

pub fn summarize(label: impl Into<String>, reports: &[EvalReport]) -> CohortSummary {
    let mut regions = vec![WHOLE_REGION.to_string()];
    if let Some(first) = reports.first() {
        regions.extend(first.substructures.keys().cloned());
    }
    let collect = |f: &dyn Fn(&RegionMetrics) -> f64| -> BTreeMap<String, (f64, f64)> {
        let mut out = BTreeMap::new();
        for region in &regions {
            let values: Vec<f64> = reports
                .iter()
                .filter_map(|r| {
                    if region == WHOLE_REGION {
                        Some(f(&r.whole))
                    } else {
                        r.substructures.get(region).map(f)
                    }
                })
                .collect();
            out.insert(region.clone(), mean_std(&values));
        }
        out
    };
    let dice = collect(&|m| m.dice_pct);
    let asd = collect(&|m| m.asd_mm);
    let asd_max = collect(&|m| m.asd_max_mm);
    CohortSummary { label: label.into(), n: reports.len(), regions, dice, asd, asd_max }
}

fn fmt_ms((mean, std): (f64, f64)) -> String {
    format!("{mean:.2} ({std:.2})")
}

/// Dice table: one row per cohort, columns DC-<region>.
pub fn dice_table_csv(rows: &[CohortSummary]) -> String {
    let mut out = String::new();
    if rows.is_empty() {
        return out;
    }
    out.push_str("cohort,n");
    for r in &rows[0].regions {
        out.push_str(&format!(",DC-{r}-mean,DC-{r}-std"));
    }
    out.push('\n');
    for row in rows {
        out.push_str(&format!("{},{}", row.label, row.n));
        for r in &row.regions {
            let (m, s) = row.dice[r];
            out.push_str(&format!(",{m:.4},{s:.4}"));
        }
        out.push('\n');
    }
    out
}

pub fn dice_table_markdown(rows: &[CohortSummary]) -> String {
    let mut out = String::new();
    if rows.is_empty() {
        return out;
    }
    out.push_str("| Cohort | N |");
    for r in &rows[0].regions {
        out.push_str(&format!(" DC-{r} |"));
    }
    out.push('\n');
    out.push_str("|---|---|");
    for _ in &rows[0].regions {
        out.push_str("---|");
    }
    out.push('\n');
    for row in rows {
        out.push_str(&format!("| {} | {} |", row.label, row.n));
        for r in &row.regions {
            out.push_str(&format!(" {} |", fmt_ms(row.dice[r])));
        }
        out.push('\n');
    }
    out
}

/// Surface-distance table: ASD and ASD_max columns per region.
pub fn surface_table_csv(rows: &[CohortSummary]) -> String {
    let mut out = String::new();
    if rows.is_empty() {
        return out;
    }
    out.push_str("cohort,n");
    for r in &rows[0].regions {
        out.push_str(&format!(",ASD-{r}-mean,ASD-{r}-std"));
    }
    for r in &rows[0].regions {
        out.push_str(&format!(",ASDmax-{r}-mean,ASDmax-{r}-std"));
    }
    out.push('\n');
    for row in rows {
        out.push_str(&format!("{},{}", row.label, row.n));
        for r in &row.regions {
            let (m, s) = row.asd[r];
            out.push_str(&format!(",{m:.4},{s:.4}"));
        }
        for r in &row.regions {
            let (m, s) = row.asd_max[r];
            out.push_str(&format!(",{m:.4},{s:.4}"));
        }
        out.push('\n');
    }
    out
}

pub fn surface_table_markdown(rows: &[CohortSummary]) -> String {
    let mut out = String::new();
    if rows.is_empty() {
        return out;
    }
    out.push_str("| Cohort |");
    for r in &rows[0].regions {
        out.push_str(&format!(" ASD-{r} |"));
    }
    for r in &rows[0].regions {
        out.push_str(&format!(" ASDmax-{r} |"));
    }
    out.push('\n');
    out.push('|');
    for _ in 0..(2 * rows[0].regions.len() + 1) {
        out.push_str("---|");
    }
    out.push('\n');
    for row in rows {
        out.push_str(&format!("| {} |", row.label));
        for r in &row.regions {
            out.push_str(&format!(" {} |", fmt_ms(row.asd[r])));
        }
        for r in &row.regions {
            out.push_str(&format!(" {} |", fmt_ms(row.asd_max[r])));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::volume::legend;
    use approx::assert_relative_eq;

    fn mask_from(g: Grid, f: impl Fn(usize, usize, usize) -> bool) -> LabelMap {
        let [nx, ny, nz] = g.dims;
        let mut data = vec![0u32; g.len()];
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    if f(i, j, k) {
                        data[g.offset(i, j, k)] = 1;
                    }
                }
            }
        }
        LabelMap::new(g, data, legend(&[(1, "s")])).unwrap()
    }

    #[test]
    fn dice_identical_disjoint_partial() {
        let g = Grid::isotropic([10, 10, 10]);
        let a = mask_from(g, |i, _, _| i < 5);
        assert_eq!(dice(&a, &a).unwrap(), 100.0);
        let b = mask_from(g, |i, _, _| i >= 5);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        // |GT| = |S| = 100 with |∩| = 80 -> exactly 80%
        let g2 = Grid::isotropic([10, 10, 2]);
        let gt = mask_from(g2, |_, _, k| k == 0);
        let seg = mask_from(g2, |_, j, k| (k == 0 && j < 8) || (k == 1 && j >= 8));
        assert_eq!(gt.count(1), 100);
        assert_eq!(seg.count(1), 100);
        assert_relative_eq!(dice(&gt, &seg).unwrap(), 80.0, epsilon = 1e-12);
    }

    #[test]
    fn dice_both_empty_is_100() {
        let g = Grid::isotropic([4, 4, 4]);
        let e = mask_from(g, |_, _, _| false);
        assert_eq!(dice(&e, &e).unwrap(), 100.0);
    }

    #[test]
    fn dice_is_symmetric() {
        let g = Grid::isotropic([8, 8, 8]);
        let a = mask_from(g, |i, j, _| i + j < 8);
        let b = mask_from(g, |i, _, k| i + k < 9);
        assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
    }

    #[test]
    fn surface_of_single_voxel_and_cube() {
        let g = Grid::isotropic([5, 5, 5]);
        let single = mask_from(g, |i, j, k| (i, j, k) == (2, 2, 2));
        let s = surface_voxels(&single);
        assert_eq!(s.points, vec![[2.0, 2.0, 2.0]]);

        // solid 3x3x3 cube: 26 surface voxels (all but the center)
        let cube = mask_from(g, |i, j, k| (1..4).contains(&i) && (1..4).contains(&j) && (1..4).contains(&k));
        assert_eq!(surface_voxels(&cube).len(), 26);

        let empty = mask_from(g, |_, _, _| false);
        assert!(surface_voxels(&empty).is_empty());
    }

    #[test]
    fn border_counts_as_background() {
        let g = Grid::isotropic([3, 3, 3]);
        let full = mask_from(g, |_, _, _| true);
        // every voxel touches the border except the center... center has all
        // 6 neighbors foreground, so 26 surface voxels
        assert_eq!(surface_voxels(&full).len(), 26);
    }

    #[test]
    fn asd_identical_and_parallel_planes() {
        let g = Grid::new([8, 8, 8], [1.0, 1.0, 0.5], [0.0; 3]).unwrap();
        let a = mask_from(g, |_, _, k| k == 2);
        let sa = surface_voxels(&a);
        assert_eq!(asd(&sa, &sa).unwrap(), 0.0);
        assert_eq!(asd_max(&sa, &sa).unwrap(), 0.0);

        // plane k=2 vs k=6 with z spacing 0.5 -> 2.0 mm apart
        let b = mask_from(g, |_, _, k| k == 6);
        let sb = surface_voxels(&b);
        assert_relative_eq!(asd(&sa, &sb).unwrap(), 2.0, epsilon = 1e-9);
        assert_relative_eq!(asd_max(&sa, &sb).unwrap(), 2.0, epsilon = 1e-9);
    }

    #[test]
    fn asd_is_one_sided_and_asymmetric() {
        // seg = single plane; gt = plane plus a far outlier blob:
        // seg->gt sees the nearby plane only; gt->seg includes the outlier
        let g = Grid::isotropic([20, 5, 5]);
        let seg = mask_from(g, |i, _, _| i == 0);
        let gt = mask_from(g, |i, j, k| i == 0 || (i == 19 && j == 2 && k == 2));
        let ss = surface_voxels(&seg);
        let gs = surface_voxels(&gt);
        let fwd = asd(&ss, &gs).unwrap();
        let bwd = asd(&gs, &ss).unwrap();
        assert_eq!(fwd, 0.0);
        assert!(bwd > 0.0, "one-sided distances must differ");
        assert_relative_eq!(
            asd_symmetric(&ss, &gs).unwrap(),
            0.5 * (fwd + bwd),
            epsilon = 1e-12
        );
    }

    #[test]
    fn asd_max_dominated_by_outlier() {
        let g = Grid::isotropic([20, 5, 5]);
        let gt = mask_from(g, |i, _, _| i == 0);
        // seg = same plane plus one voxel 10 mm away
        let seg = mask_from(g, |i, j, k| i == 0 || (i == 10 && j == 2 && k == 2));
        let ss = surface_voxels(&seg);
        let gs = surface_voxels(&gt);
        let max = asd_max(&ss, &gs).unwrap();
        let mean = asd(&ss, &gs).unwrap();
        assert_relative_eq!(max, 10.0, epsilon = 1e-9);
        assert!(mean < 1.0, "mean {mean} should be far below the outlier");
    }

    #[test]
    fn empty_surface_is_an_error() {
        let g = Grid::isotropic([4, 4, 4]);
        let e = surface_voxels(&mask_from(g, |_, _, _| false));
        let f = surface_voxels(&mask_from(g, |i, _, _| i == 0));
        assert!(matches!(asd(&e, &f), Err(Error::EmptySurface("segmentation"))));
        assert!(matches!(asd(&f, &e), Err(Error::EmptySurface("ground-truth"))));
    }

    #[test]
    fn evaluate_perfect_case_with_substructures() {
        let g = Grid::isotropic([8, 8, 8]);
        let m = mask_from(g, |i, j, k| i > 2 && j > 2 && k > 2);
        let mut subs = BTreeMap::new();
        subs.insert("TP".to_string(), mask_from(g, |i, _, _| i > 4));
        subs.insert("VB".to_string(), mask_from(g, |i, _, _| i <= 4));
        let r = evaluate(&m, &m, &subs).unwrap();
        assert_eq!(r.whole.dice_pct, 100.0);
        assert_eq!(r.whole.asd_mm, 0.0);
        for sub in r.substructures.values() {
            assert_eq!(sub.dice_pct, 100.0);
            assert_eq!(sub.asd_mm, 0.0);
            assert_eq!(sub.asd_max_mm, 0.0);
        }
    }

    #[test]
    fn aggregate_mean_std() {
        let (m, s) = mean_std(&[2.0]);
        assert_eq!((m, s), (2.0, 0.0));
        // hand-computed 2-case aggregate
        let (m, s) = mean_std(&[90.0, 94.0]);
        assert_relative_eq!(m, 92.0, epsilon = 1e-12);
        assert_relative_eq!(s, (2.0f64 * 4.0).sqrt(), epsilon = 1e-12); // sqrt(8)
    }

    #[test]
    fn summary_tables_have_expected_shape() {
        let g = Grid::isotropic([6, 6, 6]);
        let m = mask_from(g, |i, _, _| i < 3);
        let mut subs = BTreeMap::new();
        subs.insert("TP".to_string(), mask_from(g, |_, j, _| j < 3));
        let r = evaluate(&m, &m, &subs).unwrap();
        let summary = summarize("V", &[r.clone(), r]);
        assert_eq!(summary.n, 2);
        assert_eq!(summary.regions, vec!["WV".to_string(), "TP".to_string()]);
        let csv = dice_table_csv(&[summary.clone()]);
        assert!(csv.starts_with("cohort,n,DC-WV-mean,DC-WV-std,DC-TP-mean,DC-TP-std"));
        let md = surface_table_markdown(&[summary]);
        assert!(md.contains("ASDmax-TP"));
    }
}
