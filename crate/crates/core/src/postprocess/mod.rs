//! Consensus correction chain: island removal, hole filling, inter-vertebra
//! collision resolution, and level-set boundary refinement, in that order.

mod collision;
mod levelset;
mod morphology;

pub use collision::{resolve_collisions, train_perceptron, CollisionResolution, PerceptronModel};
pub use levelset::{level_set_refine, LevelSetParams};
pub use morphology::{fill_holes, remove_islands};

use crate::error::Result;
use crate::volume::{LabelMap, Volume};

/// Per-stage snapshots for one mask, captured when tracing is enabled.
#[derive(Clone, Debug)]
pub struct StageTrace {
    /// (stage name, mask after that stage); four entries per mask.
    pub stages: Vec<(&'static str, LabelMap)>,
}

pub struct ChainOutput {
    pub masks: Vec<LabelMap>,
    /// Per input mask: collision statistics fell back to the full claimed
    /// region (no uncontested voxels).
    pub collision_fallbacks: Vec<bool>,
    pub traces: Option<Vec<StageTrace>>,
}

/// Run the full correction chain over per-vertebra consensus masks:
/// `remove_islands -> fill_holes -> resolve_collisions -> level_set_refine`.
/// Empty masks pass through the morphological stages and skip refinement.
pub fn postprocess_chain(
    masks: &[LabelMap],
    target: &Volume,
    levelset: &LevelSetParams,
    trace: bool,
) -> Result<ChainOutput> {
    if masks.is_empty() {
        return Ok(ChainOutput { masks: vec![], collision_fallbacks: vec![], traces: None });
    }
    let mut traces: Option<Vec<StageTrace>> =
        if trace { Some(vec![StageTrace { stages: Vec::new() }; masks.len()]) } else { None };
    let record = |traces: &mut Option<Vec<StageTrace>>, idx: usize, name: &'static str, m: &LabelMap| {
        if let Some(t) = traces {
            t[idx].stages.push((name, m.clone()));
        }
    };

    let mut stage1 = Vec::with_capacity(masks.len());
    for (idx, m) in masks.iter().enumerate() {
        let islands = remove_islands(m)?;
        record(&mut traces, idx, "islands", &islands);
        let filled = fill_holes(&islands)?;
        record(&mut traces, idx, "holes", &filled);
        stage1.push(filled);
    }

    let resolution = resolve_collisions(&stage1, target)?;
    for (idx, m) in resolution.masks.iter().enumerate() {
        record(&mut traces, idx, "collisions", m);
    }

    let mut final_masks = Vec::with_capacity(resolution.masks.len());
    for (idx, m) in resolution.masks.iter().enumerate() {
        let refined = if m.data().iter().any(|&v| v != 0) {
            level_set_refine(m, target, levelset)?
        } else {
            m.clone()
        };
        record(&mut traces, idx, "levelset", &refined);
        final_masks.push(refined);
    }

    Ok(ChainOutput {
        masks: final_masks,
        collision_fallbacks: resolution.fallback_flags,
        traces,
    })
}
