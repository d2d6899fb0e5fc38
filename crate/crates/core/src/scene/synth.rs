use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{GaussianPoint, Scene};
use crate::error::{Error, Result};

/// Per-channel color weighting: each channel is drawn as `weight * U(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ColorDistribution {
    #[default]
    Uniform,
    BlueHeavy,
    RedHeavy,
    GreenHeavy,
    Weighted([f64; 3]),
}

impl ColorDistribution {
    pub fn weights(&self) -> [f64; 3] {
        match *self {
            ColorDistribution::Uniform => [1.0, 1.0, 1.0],
            ColorDistribution::BlueHeavy => [0.45, 0.7, 1.0],
            ColorDistribution::RedHeavy => [1.0, 0.7, 0.45],
            ColorDistribution::GreenHeavy => [0.6, 1.0, 0.6],
            ColorDistribution::Weighted(w) => w,
        }
    }
}

/// Parameters of the synthetic scene generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub count: usize,
    /// Half-extent of the box positions are drawn from.
    #[serde(default = "default_extent")]
    pub extent: [f64; 3],
    #[serde(default = "default_log_scale_mean")]
    pub log_scale_mean: f64,
    #[serde(default = "default_log_scale_std")]
    pub log_scale_std: f64,
    #[serde(default = "default_opacity_range")]
    pub opacity_range: [f64; 2],
    #[serde(default)]
    pub colors: ColorDistribution,
    #[serde(default)]
    pub seed: u64,
}

fn default_extent() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}
fn default_log_scale_mean() -> f64 {
    -2.8
}
fn default_log_scale_std() -> f64 {
    0.35
}
fn default_opacity_range() -> [f64; 2] {
    [0.35, 0.95]
}

impl GeneratorSpec {
    pub fn new(count: usize, seed: u64) -> Self {
        Self {
            count,
            extent: default_extent(),
            log_scale_mean: default_log_scale_mean(),
            log_scale_std: default_log_scale_std(),
            opacity_range: default_opacity_range(),
            colors: ColorDistribution::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.extent.iter().all(|e| e.is_finite() && *e > 0.0) {
            return Err(Error::Invalid("generator extent must be positive".into()));
        }
        if !(self.log_scale_mean.is_finite() && self.log_scale_std.is_finite())
            || self.log_scale_std < 0.0
        {
            return Err(Error::Invalid("invalid log-scale distribution".into()));
        }
        let [lo, hi] = self.opacity_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::Invalid("opacity range must lie in [0,1]".into()));
        }
        let w = self.colors.weights();
        if !w.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("color weights must lie in [0,1]".into()));
        }
        Ok(())
    }
}

/// Generates a deterministic random scene: uniform positions in a box, log-normal
/// scales, uniformly random orientations, and channel-weighted colors.
pub fn generate_synthetic_scene(spec: &GeneratorSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let log_scale = Normal::new(spec.log_scale_mean, spec.log_scale_std)
        .map_err(|e| Error::Invalid(e.to_string()))?;
    let weights = spec.colors.weights();
    let [op_lo, op_hi] = spec.opacity_range;

    let points = (0..spec.count)
        .map(|_| {
            let position = Vector3::from_fn(|i, _| rng.random_range(-1.0..=1.0) * spec.extent[i]);
            let scale = Vector3::from_fn(|_, _| log_scale.sample(&mut rng).exp());
            let q = Quaternion::new(
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            );
            let rotation = if q.norm() > 1e-9 {
                UnitQuaternion::from_quaternion(q)
            } else {
                UnitQuaternion::identity()
            };
            let opacity = if op_hi > op_lo { rng.random_range(op_lo..=op_hi) } else { op_lo };
            let rgb = weights.map(|w| w * rng.random::<f64>());
            let mut p = GaussianPoint {
                position,
                scale,
                rotation,
                opacity,
                sh_dc: [0.0; 3],
                sh_rest: Vec::new(),
            };
            p.set_color(rgb);
            p
        })
        .collect();
    Ok(Scene::new(format!("synthetic-{}", spec.seed), points))
}
