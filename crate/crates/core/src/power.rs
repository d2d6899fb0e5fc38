//! Display and rendering power models and their averages over a pose set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Framebuffer, OpCounters, Rasterizer};
use crate::scene::{CameraPose, Scene};

/// Emissive panel model: Watts are affine in the mean linear channel values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisplayModel {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub s: f64,
}

impl DisplayModel {
    /// Illustrative profile with blue the most expensive channel. Not a measurement.
    pub const EXAMPLE: DisplayModel = DisplayModel { alpha: 0.036, beta: 0.027, gamma: 0.072, s: 0.006 };

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(self.alpha) && ok(self.beta) && ok(self.gamma) && ok(self.s)) {
            return Err(Error::Config("display coefficients must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn coefficients(&self) -> [f64; 3] {
        [self.alpha, self.beta, self.gamma]
    }

    /// Watts for given mean channel values.
    pub fn watts(&self, means: [f64; 3]) -> f64 {
        self.alpha * means[0] + self.beta * means[1] + self.gamma * means[2] + self.s
    }
}

impl Default for DisplayModel {
    fn default() -> Self {
        Self::EXAMPLE
    }
}

/// Per-operation energies (Joules) and frame rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyModel {
    pub e_flop: f64,
    pub e_sram: f64,
    pub e_dram: f64,
    pub fps: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        Self { e_flop: 0.53e-12, e_sram: 0.24e-12, e_dram: 10.88e-12, fps: 60.0 }
    }
}

impl EnergyModel {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(self.e_flop) && ok(self.e_sram) && ok(self.e_dram) && ok(self.fps)) {
            return Err(Error::Config("energy model constants must be positive".into()));
        }
        Ok(())
    }

    /// Joules per frame.
    pub fn frame_energy(&self, c: &OpCounters) -> f64 {
        self.e_flop * c.flop_count as f64
            + self.e_sram * c.sram_bytes as f64
            + self.e_dram * c.dram_bytes as f64
    }
}

/// Display power of a linear-RGB frame.
pub fn display_power(image: &Framebuffer, model: &DisplayModel) -> f64 {
    model.watts(image.channel_means())
}

/// Rendering power implied by one frame's counters at the model's frame rate.
pub fn rendering_power(counters: &OpCounters, model: &EnergyModel) -> f64 {
    model.frame_energy(counters) * model.fps
}

/// One frame's contribution to a [`PowerReport`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FramePower {
    pub display_watts: f64,
    pub rendering_watts: f64,
    pub counters: OpCounters,
}

impl FramePower {
    pub fn new(image: &Framebuffer, counters: OpCounters, d: &DisplayModel, e: &EnergyModel) -> Self {
        Self {
            display_watts: display_power(image, d),
            rendering_watts: rendering_power(&counters, e),
            counters,
        }
    }

    /// Display power averaged over the pixels where `mask` holds.
    pub fn masked(
        image: &Framebuffer,
        mask: Option<&[bool]>,
        counters: OpCounters,
        d: &DisplayModel,
        e: &EnergyModel,
    ) -> Self {
        Self {
            display_watts: d.watts(image.channel_means_masked(mask)),
            rendering_watts: rendering_power(&counters, e),
            counters,
        }
    }
}

/// Pose-averaged power of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerReport {
    pub display_watts: f64,
    pub rendering_watts: f64,
    pub total_watts: f64,
    pub per_pose: Vec<FramePower>,
    /// Counters summed over all poses.
    pub counters: OpCounters,
}

impl PowerReport {
    pub fn from_frames(per_pose: Vec<FramePower>) -> Result<Self> {
        if per_pose.is_empty() {
            return Err(Error::Invalid("power report needs at least one pose".into()));
        }
        let n = per_pose.len() as f64;
        let display_watts = per_pose.iter().map(|f| f.display_watts).sum::<f64>() / n;
        let rendering_watts = per_pose.iter().map(|f| f.rendering_watts).sum::<f64>() / n;
        let counters = per_pose.iter().map(|f| f.counters).sum();
        Ok(Self {
            display_watts,
            rendering_watts,
            total_watts: display_watts + rendering_watts,
            per_pose,
            counters,
        })
    }
}

/// Renders `scene` from every pose and averages the two power terms.
pub fn evaluate_model(
    scene: &Scene,
    poses: &[CameraPose],
    display: &DisplayModel,
    energy: &EnergyModel,
) -> Result<PowerReport> {
    evaluate_with(&Rasterizer::default(), scene, poses, display, energy)
}

pub fn evaluate_with(
    rasterizer: &Rasterizer,
    scene: &Scene,
    poses: &[CameraPose],
    display: &DisplayModel,
    energy: &EnergyModel,
) -> Result<PowerReport> {
    if poses.is_empty() {
        return Err(Error::Invalid("power evaluation needs at least one pose".into()));
    }
    let frames = poses
        .iter()
        .map(|pose| {
            let out = rasterizer.render(scene, pose);
            FramePower::new(&out.framebuffer, out.counters(), display, energy)
        })
        .collect();
    PowerReport::from_frames(frames)
}
