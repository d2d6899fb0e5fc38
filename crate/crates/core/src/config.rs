//! Run configuration: one TOML file describing the scene, cameras, power profiles,
//! quality targets and every tunable constant of the pipeline.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curve::OptimizeSettings;
use crate::error::{Error, Result};
use crate::foveation::FoveationPlan;
use crate::power::{DisplayModel, EnergyModel};
use crate::prune::ControllerConfig;
use crate::raster::RasterSettings;
use crate::scene::{generate_synthetic_scene, load_scene, sample_poses, CameraPose, GeneratorSpec, PoseSpec, Scene, SceneFormat};

pub const SCHEMA_VERSION: u32 = 1;

/// Either a point-cloud file or generator parameters; exactly one must be set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSource {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub format: SceneFormat,
    /// Its `seed` must be left unset; the run seed is used.
    #[serde(default)]
    pub generator: Option<GeneratorSpec>,
}

/// A named built-in profile or explicit coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DisplayProfile {
    Named(String),
    Custom(DisplayModel),
}

impl DisplayProfile {
    pub fn resolve(&self) -> Result<DisplayModel> {
        match self {
            DisplayProfile::Named(n) if n == "example" => Ok(DisplayModel::EXAMPLE),
            DisplayProfile::Named(n) => Err(Error::Config(format!("unknown display profile `{n}`"))),
            DisplayProfile::Custom(m) => m.validate().map(|_| *m),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EnergyProfile {
    Named(String),
    Custom(EnergyModel),
}

impl Default for EnergyProfile {
    fn default() -> Self {
        EnergyProfile::Named("default".into())
    }
}

impl EnergyProfile {
    pub fn resolve(&self) -> Result<EnergyModel> {
        match self {
            EnergyProfile::Named(n) if n == "default" => Ok(EnergyModel::default()),
            EnergyProfile::Named(n) => Err(Error::Config(format!("unknown energy profile `{n}`"))),
            EnergyProfile::Custom(m) => m.validate().map(|_| *m),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    H,
    M,
    L,
}

impl Preset {
    /// Fraction of the reference quality targeted.
    pub fn fraction(self) -> f64 {
        match self {
            Preset::H => 0.99,
            Preset::M => 0.98,
            Preset::L => 0.97,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QualityTargets {
    /// Quality of the dense model that presets are fractions of, dB.
    pub reference_psnr_db: f64,
    pub presets: Vec<Preset>,
    /// Additional absolute targets, dB.
    pub targets_db: Vec<f64>,
}

impl Default for QualityTargets {
    fn default() -> Self {
        Self { reference_psnr_db: 30.0, presets: vec![Preset::M], targets_db: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingPlan {
    pub rho: Vec<f64>,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        Self { rho: OptimizeSettings::default().rho_plan }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub scene: SceneSource,
    #[serde(default)]
    pub poses: PoseSpec,
    pub display: DisplayProfile,
    #[serde(default)]
    pub energy: EnergyProfile,
    #[serde(default)]
    pub raster: RasterSettings,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub quality: QualityTargets,
    #[serde(default)]
    pub sampling: SamplingPlan,
    #[serde(default)]
    pub foveation: Option<FoveationPlan>,
    #[serde(default)]
    pub threads: Option<usize>,
}

/// One quality target of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub q_min: f64,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml_str(&text)?;
        // Relative scene paths are relative to the config file.
        if let (Some(p), Some(dir)) = (&config.scene.path, path.parent()) {
            if p.is_relative() {
                config.scene.path = Some(dir.join(p));
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        match (&self.scene.path, &self.scene.generator) {
            (Some(_), None) => {}
            (None, Some(g)) => {
                if g.seed != 0 {
                    return Err(Error::Config("set the run seed instead of scene.generator.seed".into()));
                }
                GeneratorSpec { seed: self.seed, ..g.clone() }.validate().map_err(as_config)?;
            }
            _ => return Err(Error::Config("scene needs exactly one of `path` or `generator`".into())),
        }
        self.display.resolve()?;
        self.energy.resolve()?;
        self.controller.validate()?;
        if self.raster.tile_size == 0 {
            return Err(Error::Config("tile_size must be positive".into()));
        }
        if self.poses.count == 0 && self.poses.explicit.is_empty() {
            return Err(Error::Config("pose plan yields no cameras".into()));
        }
        if self.sampling.rho.len() < 3 || self.sampling.rho.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::Config("sampling plan needs at least 3 ratios in [0, 1)".into()));
        }
        let q = &self.quality;
        if !(q.reference_psnr_db > 0.0 && q.reference_psnr_db.is_finite()) {
            return Err(Error::Config("reference_psnr_db must be positive".into()));
        }
        if q.presets.is_empty() && q.targets_db.is_empty() {
            return Err(Error::Config("no quality targets".into()));
        }
        if q.targets_db.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::Config("quality targets must be positive".into()));
        }
        if let Some(plan) = &self.foveation {
            plan.validate()?;
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be positive".into()));
        }
        Ok(())
    }

    /// Presets first, in the given order, then absolute targets.
    pub fn variants(&self) -> Vec<Variant> {
        let q = &self.quality;
        q.presets
            .iter()
            .map(|p| Variant { name: format!("{p:?}"), q_min: p.fraction() * q.reference_psnr_db })
            .chain(q.targets_db.iter().map(|&t| Variant { name: format!("q{t}"), q_min: t }))
            .collect()
    }

    pub fn optimize_settings(&self) -> Result<OptimizeSettings> {
        Ok(OptimizeSettings {
            rho_plan: self.sampling.rho.clone(),
            controller: self.controller.clone(),
            display: self.display.resolve()?,
            energy: self.energy.resolve()?,
        })
    }

    pub fn load_scene(&self) -> Result<Scene> {
        match (&self.scene.path, &self.scene.generator) {
            (Some(p), _) => load_scene(p, self.scene.format),
            (None, Some(g)) => generate_synthetic_scene(&GeneratorSpec { seed: self.seed, ..g.clone() }),
            (None, None) => Err(Error::Config("no scene source".into())),
        }
    }

    pub fn poses(&self, scene: &Scene) -> Result<Vec<CameraPose>> {
        sample_poses(scene, &self.poses, self.seed)
    }

    /// Digest of everything that affects results; output location and thread count
    /// are excluded.
    pub fn fingerprint(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = None;
        c.threads = None;
        let digest = Sha256::digest(serde_json::to_vec(&c)?);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema_version = 1
seed = 3
display = "example"

[scene.generator]
count = 50
"#;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = RunConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(c.display.resolve().unwrap(), DisplayModel::EXAMPLE);
        assert_eq!(c.energy.resolve().unwrap(), EnergyModel::default());
        assert_eq!(c.variants(), vec![Variant { name: "M".into(), q_min: 0.98 * 30.0 }]);
        assert_eq!(c.load_scene().unwrap().len(), 50);
    }

    #[test]
    fn seed_is_mandatory() {
        let text = MINIMAL.replace("seed = 3\n", "");
        assert!(matches!(RunConfig::from_toml_str(&text), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_profile_and_keys_are_config_errors() {
        let text = MINIMAL.replace("\"example\"", "\"oled-9000\"");
        assert!(matches!(RunConfig::from_toml_str(&text), Err(Error::Config(_))));
        let text = format!("{MINIMAL}\n[controller]\nlambda_zero = 1.0\n");
        assert!(matches!(RunConfig::from_toml_str(&text), Err(Error::Config(_))));
        let text = MINIMAL.replace("schema_version = 1", "schema_version = 2");
        assert!(matches!(RunConfig::from_toml_str(&text), Err(Error::Config(_))));
    }

    #[test]
    fn explicit_display_coefficients() {
        let text = MINIMAL.replace(
            "display = \"example\"",
            "display = { alpha = 0.1, beta = 0.2, gamma = 0.3, s = 0.05 }",
        );
        let c = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(c.display.resolve().unwrap(), DisplayModel { alpha: 0.1, beta: 0.2, gamma: 0.3, s: 0.05 });
    }

    #[test]
    fn presets_scale_reference() {
        let text = format!("{MINIMAL}\n[quality]\nreference_psnr_db = 40.0\npresets = [\"H\", \"M\", \"L\"]\ntargets_db = [25.5]\n");
        let v = RunConfig::from_toml_str(&text).unwrap().variants();
        let q: Vec<f64> = v.iter().map(|v| v.q_min).collect();
        assert_eq!(q, vec![0.99 * 40.0, 0.98 * 40.0, 0.97 * 40.0, 25.5]);
        assert_eq!(v[3].name, "q25.5");
    }

    #[test]
    fn fingerprint_ignores_output_and_threads() {
        let a = RunConfig::from_toml_str(MINIMAL).unwrap();
        let b = RunConfig { output_dir: Some("x".into()), threads: Some(3), ..a.clone() };
        let c = RunConfig { seed: 4, ..a.clone() };
        assert_eq!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
        assert_ne!(a.fingerprint().unwrap(), c.fingerprint().unwrap());
    }
}
