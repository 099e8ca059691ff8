//! Run configuration: one JSON document drives a whole segmentation run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vertseg_core::fusion::FusionParams;
use vertseg_core::postprocess::LevelSetParams;
use vertseg_core::registration::RegistrationParams;

/// Which label set the atlases contribute during fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AtlasMode {
    /// Rib labels are dropped at load time; only vertebra votes compete.
    VertebraOnly,
    /// Full joint legend: rib votes compete with vertebra votes.
    JointVertebraRib,
    /// Multi-vertebra bundles; same fusion path as joint atlases.
    Bundled,
}

/// Case manifests: a single path or an explicit list.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ManifestRef {
    One(PathBuf),
    Many(Vec<PathBuf>),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub manifest: ManifestRef,
    pub atlas_mode: AtlasMode,
    pub registration: RegistrationParams,
    pub fusion: FusionParams,
    pub levelset: LevelSetParams,
    /// Label ids to extract from the consensus and post-process.
    pub structures: Vec<u32>,
    pub output_dir: PathBuf,
    /// Worker threads; 0 uses the rayon default.
    pub jobs: usize,
    /// Emit per-stage mask dumps under `<output_dir>/<case>/trace/`.
    pub trace: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: ManifestRef::One(PathBuf::from("manifest.json")),
            atlas_mode: AtlasMode::JointVertebraRib,
            registration: RegistrationParams::default(),
            fusion: FusionParams::default(),
            levelset: LevelSetParams::default(),
            structures: vec![1],
            output_dir: PathBuf::from("out"),
            jobs: 0,
            trace: false,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| anyhow::anyhow!("cannot open config {}: {e}", path.display()))?;
        let mut config: RunConfig = serde_json::from_reader(file)?;
        // manifest paths resolve against the config file location
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        config.manifest = match config.manifest {
            ManifestRef::One(p) => ManifestRef::One(resolve(base, &p)),
            ManifestRef::Many(ps) => {
                ManifestRef::Many(ps.iter().map(|p| resolve(base, p)).collect())
            }
        };
        if !config.output_dir.is_absolute() {
            config.output_dir = base.join(&config.output_dir);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.registration.validate()?;
        self.fusion.validate()?;
        if self.structures.is_empty() {
            anyhow::bail!("config must name at least one structure label id");
        }
        if self.structures.contains(&0) {
            anyhow::bail!("background (0) cannot be a segmented structure");
        }
        Ok(())
    }

    pub fn cases(&self) -> Vec<PathBuf> {
        match &self.manifest {
            ManifestRef::One(p) => vec![p.clone()],
            ManifestRef::Many(ps) => ps.clone(),
        }
    }

    /// Equality of everything except atlas mode and output directory; the
    /// precondition for a V-vs-VR comparison.
    pub fn comparable_with(&self, other: &RunConfig) -> anyhow::Result<()> {
        let strip = |c: &RunConfig| -> serde_json::Value {
            let mut v = serde_json::to_value(c).expect("config serializes");
            let obj = v.as_object_mut().unwrap();
            obj.remove("atlas_mode");
            obj.remove("output_dir");
            v
        };
        if strip(self) != strip(other) {
            anyhow::bail!("configs must be identical except for atlas_mode and output_dir");
        }
        if self.atlas_mode == other.atlas_mode {
            anyhow::bail!("comparison requires two different atlas modes");
        }
        Ok(())
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn json_round_trip_with_mode_names() {
        let json = serde_json::json!({
            "manifest": "cases/m1.json",
            "atlas_mode": "joint-vertebra-rib",
            "structures": [1],
            "output_dir": "out",
        });
        let c: RunConfig = serde_json::from_value(json).unwrap();
        assert_eq!(c.atlas_mode, AtlasMode::JointVertebraRib);
        assert_eq!(c.cases().len(), 1);

        let json2 = serde_json::json!({
            "manifest": ["a.json", "b.json"],
            "atlas_mode": "vertebra-only",
        });
        let c2: RunConfig = serde_json::from_value(json2).unwrap();
        assert_eq!(c2.cases().len(), 2);
    }

    #[test]
    fn comparability_requires_mode_difference_only() {
        let v = RunConfig { atlas_mode: AtlasMode::VertebraOnly, ..Default::default() };
        let mut vr = RunConfig { atlas_mode: AtlasMode::JointVertebraRib, ..Default::default() };
        vr.output_dir = PathBuf::from("elsewhere");
        assert!(v.comparable_with(&vr).is_ok());
        assert!(v.comparable_with(&v).is_err());
        let mut different = vr.clone();
        different.seed = 99;
        assert!(v.comparable_with(&different).is_err());
    }

    #[test]
    fn zero_structures_rejected() {
        let c = RunConfig { structures: vec![], ..Default::default() };
        assert!(c.validate().is_err());
        let c = RunConfig { structures: vec![0], ..Default::default() };
        assert!(c.validate().is_err());
    }
}
