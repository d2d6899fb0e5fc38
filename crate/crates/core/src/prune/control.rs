use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{compute_prune_scores_masked, prune, Finetuner, PruneScore};
use crate::error::{Error, Result};
use crate::power::{DisplayModel, EnergyModel, FramePower, PowerReport};
use crate::quality::{ecc_quality_masked, mse_masked, PoolingMap, PSNR_CAP_DB};
use crate::raster::{Framebuffer, Rasterizer, TileMask};
use crate::scene::{CameraPose, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    pub lambda0: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Initial adjustment scale; annealed to 1 over the run.
    pub anneal_s0: f64,
    /// Fine-tuning steps per run.
    pub max_iterations: usize,
    /// Fine-tuning steps between quality checks.
    pub check_interval: usize,
    /// Width of the accepted quality band above the target, dB.
    pub epsilon_db: f64,
    /// Step in the preconditioned metric; at most 1 is guaranteed to descend.
    pub step_size: f64,
    /// Quality change below which a run pinned at `lambda_min` counts as stalled, dB.
    pub stall_tolerance_db: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            lambda0: 0.1,
            lambda_min: 1e-6,
            lambda_max: 1e3,
            anneal_s0: 2.0,
            max_iterations: 1000,
            check_interval: 10,
            epsilon_db: 0.05,
            step_size: 1.0,
            stall_tolerance_db: 0.01,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lambda_min > 0.0 && self.lambda_min <= self.lambda_max && self.lambda_max.is_finite()) {
            return bad("lambda bounds must satisfy 0 < min <= max");
        }
        if !(self.lambda0 >= 0.0 && self.lambda0.is_finite()) {
            return bad("initial lambda must be non-negative");
        }
        if !(self.anneal_s0 >= 1.0 && self.anneal_s0.is_finite()) {
            return bad("adjustment scale must be at least 1");
        }
        if self.check_interval == 0 || self.max_iterations < self.check_interval {
            return bad("need 0 < check_interval <= max_iterations");
        }
        if !(self.epsilon_db > 0.0) || !(self.step_size > 0.0) || !(self.stall_tolerance_db >= 0.0) {
            return bad("epsilon, step size and stall tolerance must be positive");
        }
        Ok(())
    }

    /// Number of quality checks after which the scale reaches 1.
    pub fn control_steps(&self) -> usize {
        self.max_iterations / self.check_interval
    }
}

/// Cosine-annealed adjustment scale: `s0` at step 0, exactly 1 from `total` on.
pub fn anneal_scale(s0: f64, step: usize, total: usize) -> f64 {
    if step >= total {
        return 1.0;
    }
    let t = step as f64 / total as f64;
    1.0 + (s0 - 1.0) * 0.5 * (1.0 + (PI * t).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneFinetuneState {
    pub rho: f64,
    pub lambda: f64,
    pub scale: f64,
    pub q_min: f64,
    pub epsilon: f64,
    /// Fine-tuning steps taken.
    pub iteration: usize,
    /// Penalty updates taken.
    pub control_step: usize,
    pub quality_history: Vec<f64>,
}

impl PruneFinetuneState {
    pub fn new(rho: f64, q_min: f64, config: &ControllerConfig) -> Self {
        Self {
            rho,
            lambda: config.lambda0.clamp(config.lambda_min, config.lambda_max),
            scale: anneal_scale(config.anneal_s0, 0, config.control_steps()),
            q_min,
            epsilon: config.epsilon_db,
            iteration: 0,
            control_step: 0,
            quality_history: Vec::new(),
        }
    }

    pub fn in_band(&self, quality: f64) -> bool {
        quality >= self.q_min && quality <= self.q_min + self.epsilon
    }
}

/// Multiplies the penalty by the current scale when quality meets the target and
/// divides otherwise, then advances the annealing schedule.
pub fn adapt_lambda(mut state: PruneFinetuneState, measured_quality: f64, config: &ControllerConfig) -> PruneFinetuneState {
    let next = if measured_quality >= state.q_min {
        state.lambda * state.scale
    } else {
        state.lambda / state.scale
    };
    state.lambda = next.clamp(config.lambda_min, config.lambda_max);
    state.quality_history.push(measured_quality);
    state.control_step += 1;
    state.scale = anneal_scale(config.anneal_s0, state.control_step, config.control_steps());
    state
}

/// One quality check of the control loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlRecord {
    pub iteration: usize,
    pub quality_db: f64,
    pub lambda: f64,
    pub scale: f64,
    /// Penalty used for the following steps; `None` when the loop stopped here.
    pub next_lambda: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleFlags {
    pub converged: bool,
    /// Target missed with the penalty at its lower bound and quality stalled.
    pub unreachable: bool,
    /// Iteration budget exhausted without entering the quality band.
    pub max_iterations: bool,
}

impl SampleFlags {
    pub fn flagged(&self) -> bool {
        !self.converged
    }
}

/// A pruned, fine-tuned model on (or near) the iso-quality curve.
#[derive(Debug, Clone)]
pub struct IsoQualitySample {
    pub scene: Scene,
    pub rho: f64,
    pub q_min: f64,
    pub lambda_used: f64,
    pub quality_db: f64,
    pub iterations: usize,
    pub flags: SampleFlags,
    pub trajectory: Vec<ControlRecord>,
    pub report: PowerReport,
}

impl IsoQualitySample {
    pub fn display_watts(&self) -> f64 {
        self.report.display_watts
    }

    pub fn rendering_watts(&self) -> f64 {
        self.report.rendering_watts
    }

    pub fn total_watts(&self) -> f64 {
        self.report.total_watts
    }
}

/// How a sample's quality is scored against the references.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QualityMeasure {
    /// Mean PSNR over poses, each capped, on the scope's pixels.
    #[default]
    Psnr,
    /// `-10 log10` of the pose-mean eccentricity-pooled error on the scope's pixels.
    Pooled { gaze: [f64; 2], pooling: PoolingMap },
}

/// Restricts sampling to part of the frame. The default scope is the full frame.
#[derive(Debug, Clone, Default)]
pub struct SampleScope {
    /// Pixels entering the fine-tuning loss and display power.
    pub pixel_mask: Option<Vec<bool>>,
    /// Pixels scored for quality; defaults to `pixel_mask`.
    pub quality_mask: Option<Vec<bool>>,
    /// Tiles rendered; must cover `pixel_mask` and `quality_mask`.
    pub tile_mask: Option<TileMask>,
    /// Pixels whose blend weights rank points for pruning; defaults to `pixel_mask`.
    pub importance_mask: Option<Vec<bool>>,
    pub measure: QualityMeasure,
}

/// Caches the reference frames and pruning scores of a base model across samples.
pub struct IsoQualitySampler<'a> {
    pub rasterizer: Rasterizer,
    pub base: &'a Scene,
    pub poses: &'a [CameraPose],
    pub references: Vec<Framebuffer>,
    pub scores: PruneScore,
    pub display: DisplayModel,
    pub energy: EnergyModel,
    pub config: ControllerConfig,
    pub scope: SampleScope,
}

impl<'a> IsoQualitySampler<'a> {
    /// Full-frame sampler whose references are the renders of `dense`.
    pub fn new(
        rasterizer: Rasterizer,
        dense: &'a Scene,
        poses: &'a [CameraPose],
        display: DisplayModel,
        energy: EnergyModel,
        config: ControllerConfig,
    ) -> Result<Self> {
        let references = poses.iter().map(|p| rasterizer.render(dense, p).framebuffer).collect();
        Self::with_scope(rasterizer, dense, poses, references, display, energy, config, SampleScope::default())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_scope(
        rasterizer: Rasterizer,
        base: &'a Scene,
        poses: &'a [CameraPose],
        references: Vec<Framebuffer>,
        display: DisplayModel,
        energy: EnergyModel,
        config: ControllerConfig,
        scope: SampleScope,
    ) -> Result<Self> {
        config.validate()?;
        display.validate()?;
        energy.validate()?;
        if poses.is_empty() || references.len() != poses.len() {
            return Err(Error::Invalid("sampling needs one reference per pose".into()));
        }
        if let QualityMeasure::Pooled { pooling, .. } = &scope.measure {
            pooling.validate()?;
        }
        let importance_mask = scope.importance_mask.as_deref().or(scope.pixel_mask.as_deref());
        let importance_tiles = importance_mask.map(|m| {
            let grid = rasterizer.grid(&poses[0]);
            TileMask::from_pixels(&grid, |x, y| m[y * poses[0].width + x])
        });
        let scores =
            compute_prune_scores_masked(&rasterizer, base, poses, importance_mask, importance_tiles.as_ref())?;
        Ok(Self { rasterizer, base, poses, references, scores, display, energy, config, scope })
    }

    fn quality_mask(&self) -> Option<&[bool]> {
        self.scope.quality_mask.as_deref().or(self.scope.pixel_mask.as_deref())
    }

    fn quality(&self, tuner: &Finetuner, colors: &[[f64; 3]]) -> Result<f64> {
        if self.scope.measure == QualityMeasure::Psnr && self.scope.quality_mask.is_none() {
            return Ok(tuner.quality(colors));
        }
        let frames = tuner.frames(colors);
        let mask = self.quality_mask();
        let mut total = 0.0;
        for (f, r) in frames.iter().zip(&self.references) {
            total += match &self.scope.measure {
                QualityMeasure::Psnr => pooled_db(mse_masked(f, r, mask)?),
                QualityMeasure::Pooled { gaze, pooling } => ecc_quality_masked(f, r, *gaze, pooling, mask)?,
            };
        }
        let mean = total / frames.len() as f64;
        Ok(match self.scope.measure {
            QualityMeasure::Psnr => mean,
            QualityMeasure::Pooled { .. } => pooled_db(mean),
        })
    }

    /// Pose-averaged power of `scene` within the scope.
    pub fn evaluate(&self, scene: &Scene) -> Result<PowerReport> {
        let frames = self
            .poses
            .iter()
            .map(|pose| {
                let out = self.rasterizer.render_masked(scene, pose, self.scope.tile_mask.as_ref());
                FramePower::masked(
                    &out.framebuffer,
                    self.scope.pixel_mask.as_deref(),
                    out.counters(),
                    &self.display,
                    &self.energy,
                )
            })
            .collect();
        PowerReport::from_frames(frames)
    }

    /// Quality of the pruned model after `steps` unpenalized fine-tuning steps; an
    /// upper estimate of what the controller can reach at `rho`.
    pub fn probe(&self, rho: f64, steps: usize) -> Result<f64> {
        let scene = prune(self.base, &self.scores, rho)?;
        let tuner = self.tuner(&scene)?;
        let mut colors = Finetuner::colors_of(&scene);
        for _ in 0..steps {
            tuner.step(&mut colors, 0.0, self.config.step_size);
        }
        self.quality(&tuner, &colors)
    }

    fn tuner(&self, scene: &Scene) -> Result<Finetuner> {
        Finetuner::with_mask(
            &self.rasterizer,
            scene,
            self.poses,
            &self.references,
            self.display,
            self.scope.pixel_mask.as_deref(),
            self.scope.tile_mask.as_ref(),
        )
    }

    /// Prunes the base model to `rho`, then fine-tunes colors under the controlled
    /// display penalty until quality lands in `[q_min, q_min + epsilon]`.
    pub fn sample(&self, rho: f64, q_min: f64) -> Result<IsoQualitySample> {
        if !(q_min.is_finite() && q_min < PSNR_CAP_DB) {
            return Err(Error::Invalid(format!("quality target {q_min} dB is not attainable")));
        }
        let config = &self.config;
        let mut scene = prune(self.base, &self.scores, rho)?;
        let tuner = self.tuner(&scene)?;
        let mut colors = Finetuner::colors_of(&scene);
        let mut state = PruneFinetuneState::new(rho, q_min, config);
        let total = config.control_steps();
        let mut trajectory = Vec::with_capacity(total + 1);
        let mut flags = SampleFlags::default();
        let mut previous: Option<f64> = None;

        loop {
            let q = self.quality(&tuner, &colors)?;
            let mut record = ControlRecord {
                iteration: state.iteration,
                quality_db: q,
                lambda: state.lambda,
                scale: state.scale,
                next_lambda: None,
            };
            if state.in_band(q) {
                flags.converged = true;
            } else if state.lambda <= config.lambda_min
                && q < q_min
                && previous.is_some_and(|p| (q - p).abs() < config.stall_tolerance_db)
            {
                flags.unreachable = true;
            } else if state.control_step >= total {
                flags.max_iterations = true;
            }
            if flags != SampleFlags::default() {
                state.quality_history.push(q);
                trajectory.push(record);
                break;
            }
            state = adapt_lambda(state, q, config);
            record.next_lambda = Some(state.lambda);
            trajectory.push(record);
            previous = Some(q);
            for _ in 0..config.check_interval {
                tuner.step(&mut colors, state.lambda, config.step_size);
                state.iteration += 1;
            }
        }
        if flags.flagged() {
            log::warn!(
                "rho {rho}: quality {:.3} dB outside [{q_min:.3}, {:.3}] after {} steps",
                state.quality_history.last().copied().unwrap_or(f64::NAN),
                q_min + state.epsilon,
                state.iteration
            );
        }

        Finetuner::apply(&mut scene, &colors);
        let report = self.evaluate(&scene)?;
        let quality_db = *state.quality_history.last().expect("at least one check");
        Ok(IsoQualitySample {
            scene,
            rho,
            q_min,
            lambda_used: state.lambda,
            quality_db,
            iterations: state.iteration,
            flags,
            trajectory,
            report,
        })
    }
}

/// Pooled error expressed in dB, capped like PSNR.
pub fn pooled_db(error: f64) -> f64 {
    if error <= 0.0 {
        PSNR_CAP_DB
    } else {
        (-10.0 * error.log10()).min(PSNR_CAP_DB)
    }
}

/// Convenience wrapper building a one-off [`IsoQualitySampler`].
pub fn sample_iso_quality_point(
    dense: &Scene,
    poses: &[CameraPose],
    rho: f64,
    q_min: f64,
    display: &DisplayModel,
    energy: &EnergyModel,
    config: &ControllerConfig,
) -> Result<IsoQualitySample> {
    IsoQualitySampler::new(Rasterizer::default(), dense, poses, *display, *energy, config.clone())?
        .sample(rho, q_min)
}
