//! End-to-end orchestration: per-atlas registration (parallel), joint label
//! fusion, the post-processing chain, evaluation against ground truth, and
//! the vertebra-only vs joint-atlas comparison.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use vertseg_core::fusion::{fuse_labels, extract_structure, WarpedAtlas};
use vertseg_core::metrics::{
    dice_table_csv, dice_table_markdown, evaluate, summarize, surface_table_csv,
    surface_table_markdown, CohortSummary, EvalReport,
};
use vertseg_core::nifti::{load_manifest, read_labels, read_volume, write_labels, write_volume, AtlasManifest};
use vertseg_core::postprocess::postprocess_chain;
use vertseg_core::registration::{affine_register, bspline_register};
use vertseg_core::transform::ComposedTransform;
use vertseg_core::volume::{LabelMap, Volume};
use vertseg_core::warp::{warp_labels, warp_volume_with};

use crate::config::{AtlasMode, RunConfig};

/// Pipeline stages double as exit-code categories.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Config,
    Load,
    Registration,
    Fusion,
    Postprocess,
    Evaluate,
    Io,
    Overlay,
}

impl Stage {
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Config => 2,
            Stage::Load => 3,
            Stage::Registration => 4,
            Stage::Fusion => 5,
            Stage::Postprocess => 6,
            Stage::Evaluate => 7,
            Stage::Io => 8,
            Stage::Overlay => 9,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Load => "load",
            Stage::Registration => "registration",
            Stage::Fusion => "fusion",
            Stage::Postprocess => "postprocess",
            Stage::Evaluate => "evaluate",
            Stage::Io => "io",
            Stage::Overlay => "overlay",
        }
    }
}

#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub error: anyhow::Error,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage {}: {:#}", self.stage.name(), self.error)
    }
}

impl std::error::Error for StageError {}

pub type PipelineResult<T> = Result<T, StageError>;

trait StageCtx<T> {
    fn stage(self, stage: Stage) -> PipelineResult<T>;
}

impl<T, E: Into<anyhow::Error>> StageCtx<T> for Result<T, E> {
    fn stage(self, stage: Stage) -> PipelineResult<T> {
        self.map_err(|e| StageError { stage, error: e.into() })
    }
}

/// Everything produced for one case.
#[derive(Clone, Debug, Serialize)]
pub struct CaseOutcome {
    pub case: String,
    pub case_dir: PathBuf,
    /// structure id -> final mask path (relative to the case dir)
    pub masks: BTreeMap<u32, PathBuf>,
    /// structure id -> evaluation, when ground truth was available
    pub reports: BTreeMap<u32, EvalReport>,
}

#[derive(Serialize)]
struct RunSummary<'a> {
    case: &'a str,
    atlas_mode: &'a AtlasMode,
    seed: u64,
    atlases: Vec<String>,
    artifacts: BTreeMap<String, PathBuf>,
    masks: &'a BTreeMap<u32, PathBuf>,
    reports: &'a BTreeMap<u32, EvalReport>,
}

fn case_name(manifest_path: &Path) -> String {
    manifest_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "case".into())
}

/// Drop labels whose legend name marks them as rib structures.
fn apply_atlas_mode(labels: &LabelMap, mode: AtlasMode) -> anyhow::Result<LabelMap> {
    match mode {
        AtlasMode::JointVertebraRib | AtlasMode::Bundled => Ok(labels.clone()),
        AtlasMode::VertebraOnly => {
            let rib_ids: Vec<u32> = labels
                .legend()
                .iter()
                .filter(|(_, name)| name.to_ascii_lowercase().contains("rib"))
                .map(|(id, _)| *id)
                .collect();
            Ok(labels.relabel(|v| if rib_ids.contains(&v) { 0 } else { v })?)
        }
    }
}

struct LoadedCase {
    target: Volume,
    ground_truth: Option<LabelMap>,
    substructures: BTreeMap<String, LabelMap>,
    atlases: Vec<(String, Volume, LabelMap)>,
}

fn load_case(manifest: &AtlasManifest, mode: AtlasMode) -> anyhow::Result<LoadedCase> {
    let target = read_volume(&manifest.target.intensity)?;
    let ground_truth = match &manifest.target.ground_truth {
        Some(p) => Some(read_labels(p)?),
        None => None,
    };
    let mut substructures = BTreeMap::new();
    for (name, p) in &manifest.target.substructures {
        substructures.insert(name.clone(), read_labels(p)?);
    }
    let mut atlases = Vec::with_capacity(manifest.atlases.len());
    for (idx, entry) in manifest.atlases.iter().enumerate() {
        let intensity = read_volume(&entry.intensity)?;
        let labels = apply_atlas_mode(&read_labels(&entry.labels)?, mode)?;
        let stem = entry
            .labels
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        atlases.push((format!("{idx:02}_{stem}"), intensity, labels));
    }
    Ok(LoadedCase { target, ground_truth, substructures, atlases })
}

struct Timings {
    entries: Vec<(String, f64)>,
}

impl Timings {
    fn new() -> Self {
        Self { entries: Vec::new() }
    }

    fn record<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let t0 = Instant::now();
        let out = f();
        self.entries.push((name.to_string(), t0.elapsed().as_secs_f64()));
        out
    }

    fn write(&self, path: &Path) -> anyhow::Result<()> {
        let map: BTreeMap<&str, f64> =
            self.entries.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        serde_json::to_writer_pretty(std::fs::File::create(path)?, &map)?;
        Ok(())
    }
}

/// Register one atlas to the target and resample it (intensity and labels)
/// onto the target grid through the composed affine + free-form transform in
/// a single pass.
fn register_atlas(
    target: &Volume,
    atlas_intensity: &Volume,
    atlas_labels: &LabelMap,
    config: &RunConfig,
) -> anyhow::Result<(WarpedAtlas, vertseg_core::AffineTransform, vertseg_core::BSplineGrid, bool)> {
    let affine = affine_register(target, atlas_intensity, &config.registration)?;
    let ffd = bspline_register(target, atlas_intensity, &affine.transform, &config.registration)?;
    let composed = ComposedTransform { affine: &affine.transform, bspline: &ffd.transform };
    let warped_intensity = warp_volume_with(
        atlas_intensity,
        &composed,
        target.grid(),
        atlas_intensity.min_intensity(),
    );
    let warped_labels = warp_labels(atlas_labels, &composed, target.grid());
    let converged = affine.converged && ffd.converged;
    Ok((
        WarpedAtlas::new(warped_intensity, warped_labels, "placeholder")?,
        affine.transform,
        ffd.transform,
        converged,
    ))
}

/// Run the full pipeline for every case in the config. Artifacts land under
/// `<output_dir>/<case>/`; partial outputs are retained on error.
pub fn run_segment(config: &RunConfig) -> PipelineResult<Vec<CaseOutcome>> {
    config.validate().stage(Stage::Config)?;
    let run = || -> PipelineResult<Vec<CaseOutcome>> {
        config
            .cases()
            .iter()
            .map(|manifest_path| run_case(config, manifest_path))
            .collect()
    };
    if config.jobs > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.jobs)
            .build()
            .map_err(|e| StageError { stage: Stage::Config, error: e.into() })?;
        pool.install(run)
    } else {
        run()
    }
}

fn run_case(config: &RunConfig, manifest_path: &Path) -> PipelineResult<CaseOutcome> {
    use rayon::prelude::*;

    let case = case_name(manifest_path);
    let case_dir = config.output_dir.join(&case);
    std::fs::create_dir_all(case_dir.join("transforms")).stage(Stage::Io)?;
    std::fs::create_dir_all(case_dir.join("warped")).stage(Stage::Io)?;
    std::fs::create_dir_all(case_dir.join("masks")).stage(Stage::Io)?;
    if config.trace {
        std::fs::create_dir_all(case_dir.join("trace")).stage(Stage::Io)?;
    }

    let mut timings = Timings::new();
    let mut artifacts: BTreeMap<String, PathBuf> = BTreeMap::new();

    let manifest = load_manifest(manifest_path).stage(Stage::Load)?;
    let loaded = timings
        .record("load", || load_case(&manifest, config.atlas_mode))
        .stage(Stage::Load)?;

    // per-atlas registrations are independent; rayon preserves output order
    let registered: Vec<_> = timings.record("registration", || {
        loaded
            .atlases
            .par_iter()
            .map(|(id, intensity, labels)| {
                register_atlas(&loaded.target, intensity, labels, config)
                    .map(|(mut warped, affine, ffd, converged)| {
                        warped.source_id = id.clone();
                        (id.clone(), warped, affine, ffd, converged)
                    })
            })
            .collect::<Vec<anyhow::Result<_>>>()
    });
    let mut warped_atlases = Vec::with_capacity(registered.len());
    for result in registered {
        let (id, warped, affine, ffd, _converged) = result.stage(Stage::Registration)?;
        let affine_path = case_dir.join("transforms").join(format!("{id}.affine.json"));
        serde_json::to_writer_pretty(
            std::fs::File::create(&affine_path).stage(Stage::Io)?,
            &affine,
        )
        .stage(Stage::Io)?;
        let ffd_path = case_dir.join("transforms").join(format!("{id}.ffd.json"));
        ffd.save(&ffd_path).stage(Stage::Io)?;
        let wi_path = case_dir.join("warped").join(format!("{id}.nii"));
        write_volume(&warped.intensity, &wi_path).stage(Stage::Io)?;
        let wl_path = case_dir.join("warped").join(format!("{id}_labels.nii"));
        write_labels(&warped.labels, &wl_path).stage(Stage::Io)?;
        warped_atlases.push(warped);
    }
    artifacts.insert("transforms".into(), PathBuf::from("transforms"));
    artifacts.insert("warped".into(), PathBuf::from("warped"));

    let consensus = timings
        .record("fusion", || fuse_labels(&warped_atlases, &loaded.target, &config.fusion))
        .stage(Stage::Fusion)?;
    let consensus_path = case_dir.join("consensus.nii");
    write_labels(&consensus, &consensus_path).stage(Stage::Io)?;
    artifacts.insert("consensus".into(), PathBuf::from("consensus.nii"));

    // per-structure masks through the correction chain
    let structure_masks: Vec<LabelMap> = config
        .structures
        .iter()
        .map(|&id| extract_structure(&consensus, id))
        .collect::<Result<_, _>>()
        .stage(Stage::Postprocess)?;
    let chain = timings
        .record("postprocess", || {
            postprocess_chain(&structure_masks, &loaded.target, &config.levelset, config.trace)
        })
        .stage(Stage::Postprocess)?;
    if let Some(traces) = &chain.traces {
        for (sid, trace) in config.structures.iter().zip(traces) {
            for (stage_name, mask) in &trace.stages {
                let p = case_dir.join("trace").join(format!("s{sid}_{stage_name}.nii"));
                write_labels(mask, &p).stage(Stage::Io)?;
            }
        }
    }

    let mut masks = BTreeMap::new();
    for (&sid, mask) in config.structures.iter().zip(&chain.masks) {
        let rel = PathBuf::from("masks").join(format!("structure_{sid:03}.nii"));
        write_labels(mask, &case_dir.join(&rel)).stage(Stage::Io)?;
        masks.insert(sid, rel);
    }

    // evaluation against ground truth, when present
    let mut reports = BTreeMap::new();
    if let Some(gt) = &loaded.ground_truth {
        let eval_result: anyhow::Result<()> = timings.record("evaluate", || {
            for (&sid, mask) in config.structures.iter().zip(&chain.masks) {
                let gt_mask = extract_structure(gt, sid)?;
                let report = evaluate(mask, &gt_mask, &loaded.substructures)?;
                reports.insert(sid, report);
            }
            Ok(())
        });
        eval_result.stage(Stage::Evaluate)?;
        let csv = evaluation_csv(&reports);
        std::fs::write(case_dir.join("evaluation.csv"), csv).stage(Stage::Io)?;
        artifacts.insert("evaluation".into(), PathBuf::from("evaluation.csv"));
    }

    let summary = RunSummary {
        case: &case,
        atlas_mode: &config.atlas_mode,
        seed: config.seed,
        atlases: warped_atlases.iter().map(|a| a.source_id.clone()).collect(),
        artifacts,
        masks: &masks,
        reports: &reports,
    };
    serde_json::to_writer_pretty(
        std::fs::File::create(case_dir.join("run_summary.json")).stage(Stage::Io)?,
        &summary,
    )
    .stage(Stage::Io)?;
    // wall-clock timings are the one non-reproducible artifact; they live in
    // their own file so everything else is byte-stable
    timings.write(&case_dir.join("timings.json")).stage(Stage::Io)?;

    Ok(CaseOutcome { case, case_dir, masks, reports })
}

fn evaluation_csv(reports: &BTreeMap<u32, EvalReport>) -> String {
    let mut out = String::from("structure,region,dice_pct,asd_mm,asd_max_mm\n");
    for (sid, report) in reports {
        out.push_str(&format!(
            "{sid},WV,{:.6},{:.6},{:.6}\n",
            report.whole.dice_pct, report.whole.asd_mm, report.whole.asd_max_mm
        ));
        for (name, m) in &report.substructures {
            out.push_str(&format!(
                "{sid},{name},{:.6},{:.6},{:.6}\n",
                m.dice_pct, m.asd_mm, m.asd_max_mm
            ));
        }
    }
    out
}

/// One (case, structure) comparison row.
#[derive(Clone, Debug, Serialize)]
pub struct CompareRow {
    pub case: String,
    pub structure: u32,
    pub dice_v: f64,
    pub dice_vr: f64,
    pub dice_delta: f64,
    pub asd_v: f64,
    pub asd_vr: f64,
    pub asd_delta: f64,
    pub asd_max_v: f64,
    pub asd_max_vr: f64,
    pub asd_max_delta: f64,
    /// true when the joint-atlas run strictly reduced the max surface distance
    pub vr_reduces_asd_max: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct ComparisonReport {
    pub rows: Vec<CompareRow>,
    pub summary_v: CohortSummary,
    pub summary_vr: CohortSummary,
}

impl ComparisonReport {
    pub fn csv(&self) -> String {
        let mut out = String::from(
            "case,structure,dice_v,dice_vr,dice_delta,asd_v,asd_vr,asd_delta,asd_max_v,asd_max_vr,asd_max_delta,vr_reduces_asd_max\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
                r.case,
                r.structure,
                r.dice_v,
                r.dice_vr,
                r.dice_delta,
                r.asd_v,
                r.asd_vr,
                r.asd_delta,
                r.asd_max_v,
                r.asd_max_vr,
                r.asd_max_delta,
                r.vr_reduces_asd_max
            ));
        }
        out
    }

    pub fn markdown(&self) -> String {
        let mut out = String::new();
        out.push_str("# Vertebra-only (V) vs joint vertebra-rib (VR) atlases\n\n");
        out.push_str("## Dice coefficient (%)\n\n");
        out.push_str(&dice_table_markdown(&[self.summary_v.clone(), self.summary_vr.clone()]));
        out.push_str("\n## Surface distances (mm)\n\n");
        out.push_str(&surface_table_markdown(&[self.summary_v.clone(), self.summary_vr.clone()]));
        out.push_str("\n## Per-case deltas (VR - V)\n\n");
        out.push_str("| Case | Structure | ΔDC | ΔASD | ΔASDmax | VR reduces ASDmax |\n");
        out.push_str("|---|---|---|---|---|---|\n");
        for r in &self.rows {
            out.push_str(&format!(
                "| {} | {} | {:+.2} | {:+.3} | {:+.3} | {} |\n",
                r.case, r.structure, r.dice_delta, r.asd_delta, r.asd_max_delta,
                if r.vr_reduces_asd_max { "yes" } else { "no" }
            ));
        }
        out
    }

    pub fn tables_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&dice_table_csv(&[self.summary_v.clone(), self.summary_vr.clone()]));
        out.push('\n');
        out.push_str(&surface_table_csv(&[self.summary_v.clone(), self.summary_vr.clone()]));
        out
    }
}

/// Run both configurations (identical except atlas mode) over the same cases
/// and assemble the side-by-side report, written under `compare_dir`.
pub fn run_compare(
    config_v: &RunConfig,
    config_vr: &RunConfig,
    compare_dir: &Path,
) -> PipelineResult<ComparisonReport> {
    config_v.comparable_with(config_vr).stage(Stage::Config)?;
    let outcomes_v = run_segment(config_v)?;
    let outcomes_vr = run_segment(config_vr)?;

    let mut rows = Vec::new();
    let mut reports_v = Vec::new();
    let mut reports_vr = Vec::new();
    for (ov, ovr) in outcomes_v.iter().zip(&outcomes_vr) {
        for (&sid, rv) in &ov.reports {
            let Some(rvr) = ovr.reports.get(&sid) else { continue };
            reports_v.push(rv.clone());
            reports_vr.push(rvr.clone());
            rows.push(CompareRow {
                case: ov.case.clone(),
                structure: sid,
                dice_v: rv.whole.dice_pct,
                dice_vr: rvr.whole.dice_pct,
                dice_delta: rvr.whole.dice_pct - rv.whole.dice_pct,
                asd_v: rv.whole.asd_mm,
                asd_vr: rvr.whole.asd_mm,
                asd_delta: rvr.whole.asd_mm - rv.whole.asd_mm,
                asd_max_v: rv.whole.asd_max_mm,
                asd_max_vr: rvr.whole.asd_max_mm,
                asd_max_delta: rvr.whole.asd_max_mm - rv.whole.asd_max_mm,
                vr_reduces_asd_max: rvr.whole.asd_max_mm < rv.whole.asd_max_mm,
            });
        }
    }
    let report = ComparisonReport {
        rows,
        summary_v: summarize("V", &reports_v),
        summary_vr: summarize("VR", &reports_vr),
    };
    std::fs::create_dir_all(compare_dir).stage(Stage::Io)?;
    std::fs::write(compare_dir.join("comparison.csv"), report.csv()).stage(Stage::Io)?;
    std::fs::write(compare_dir.join("tables.csv"), report.tables_csv()).stage(Stage::Io)?;
    std::fs::write(compare_dir.join("comparison.md"), report.markdown()).stage(Stage::Io)?;
    Ok(report)
}
