//! Foveated rendering with a cascade of models, one per eccentricity region.
//!
//! Region 1 (around the gaze) uses the power-optimal model. Each further region's
//! model is pruned from its predecessor and fine-tuned until its pooled error in its
//! own band matches region 1's. Frames are composed by rendering each model only on
//! the tiles its region touches and blending linearly across region boundaries.

use serde::{Deserialize, Serialize};

use crate::curve::{build_power_optimal_model, Checkpointer, OptimizeReport, OptimizeSettings};
use crate::error::{Error, Result};
use crate::power::{FramePower, PowerReport};
use crate::prune::{pooled_db, IsoQualitySample, IsoQualitySampler, QualityMeasure, SampleFlags, SampleScope};
use crate::quality::{ecc_quality_masked, PoolingMap};
use crate::raster::{Framebuffer, OpCounters, Rasterizer, TileMask};
use crate::scene::{CameraPose, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FoveationPlan {
    /// Outer eccentricity of every region but the last, degrees, increasing.
    pub boundaries_deg: Vec<f64>,
    /// Width of the linear cross-fade centered on each boundary, degrees.
    pub blend_band_deg: f64,
    /// Gaze in pixels; the frame center when unset.
    pub gaze: Option<[f64; 2]>,
    /// Pixels per degree; derived from the horizontal focal length when unset.
    pub pixels_per_degree: Option<f64>,
    pub pool_base_diameter_px: f64,
    pub pool_slope_px_per_degree: f64,
    /// Allowed relative deviation of a region's pooled error from region 1's.
    pub alignment_tolerance: f64,
    /// Fraction of the tolerance targeted, leaving room for the controller band.
    pub alignment_margin: f64,
    /// Increasing pruning ratios, relative to the predecessor, tried after 0 for
    /// regions 2 on; the scan stops at the first ratio that does not lower the
    /// region's power or cannot reach its target.
    pub rho_ladder: Vec<f64>,
    /// Unpenalized fine-tuning steps used to screen a ratio before controlling it.
    pub probe_steps: usize,
}

impl Default for FoveationPlan {
    fn default() -> Self {
        let pool = PoolingMap::default();
        Self {
            boundaries_deg: vec![5.0, 12.0, 25.0],
            blend_band_deg: 2.0,
            gaze: None,
            pixels_per_degree: None,
            pool_base_diameter_px: pool.base_diameter_px,
            pool_slope_px_per_degree: pool.slope_px_per_degree,
            alignment_tolerance: 0.05,
            alignment_margin: 0.8,
            rho_ladder: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            probe_steps: 100,
        }
    }
}

impl FoveationPlan {
    /// A plan with a single region: no foveation.
    pub fn single_region() -> Self {
        Self { boundaries_deg: Vec::new(), ..Self::default() }
    }

    pub fn region_count(&self) -> usize {
        self.boundaries_deg.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let half = 0.5 * self.blend_band_deg;
        if !(self.blend_band_deg >= 0.0 && self.blend_band_deg.is_finite()) {
            return bad("blend band must be non-negative".into());
        }
        let mut prev = 0.0;
        for (i, &b) in self.boundaries_deg.iter().enumerate() {
            let gap = if i == 0 { half } else { self.blend_band_deg };
            if !(b.is_finite() && b - prev > gap) {
                return bad(format!("region boundary {b} deg must exceed {prev} deg by more than the blend band"));
            }
            prev = b;
        }
        if !(self.alignment_tolerance > 0.0 && (0.0..=1.0).contains(&self.alignment_margin)) {
            return bad("alignment tolerance must be positive and margin in [0, 1]".into());
        }
        if self.rho_ladder.iter().any(|r| !(0.0..1.0).contains(r))
            || self.rho_ladder.windows(2).any(|w| w[0] >= w[1])
        {
            return bad("ladder ratios must increase within [0, 1)".into());
        }
        if self.pixels_per_degree.is_some_and(|p| !(p > 0.0)) {
            return bad("pixels per degree must be positive".into());
        }
        self.pooling(1.0).validate()
    }

    fn pooling(&self, ppd: f64) -> PoolingMap {
        PoolingMap {
            pixels_per_degree: ppd,
            base_diameter_px: self.pool_base_diameter_px,
            slope_px_per_degree: self.pool_slope_px_per_degree,
        }
    }

    /// Target gap in dB below region 1's pooled quality.
    pub fn alignment_offset_db(&self) -> f64 {
        self.alignment_margin * 10.0 * (1.0 + self.alignment_tolerance).log10()
    }
}

/// Per-pixel region geometry for one resolution.
#[derive(Debug, Clone)]
pub struct RegionLayout {
    pub width: usize,
    pub height: usize,
    pub gaze: [f64; 2],
    pub pooling: PoolingMap,
    /// Blend weight of each region at each pixel; they sum to 1 per pixel.
    pub weights: Vec<Vec<f64>>,
    /// Pixels with non-zero weight.
    pub support: Vec<Vec<bool>>,
    /// Render masks covering exactly the support pixels.
    pub tiles: Vec<TileMask>,
    /// Pixels at or beyond the inner edge of each region's support.
    pub outer_field: Vec<Vec<bool>>,
}

/// Weight of the inside of boundary `b` at eccentricity `e`.
fn inside(e: f64, b: f64, half: f64) -> f64 {
    if half == 0.0 {
        return if e < b { 1.0 } else { 0.0 };
    }
    ((b + half - e) / (2.0 * half)).clamp(0.0, 1.0)
}

impl RegionLayout {
    pub fn new(plan: &FoveationPlan, rasterizer: &Rasterizer, pose: &CameraPose) -> Result<Self> {
        plan.validate()?;
        let (w, h) = (pose.width, pose.height);
        let gaze = plan.gaze.unwrap_or([0.5 * w as f64, 0.5 * h as f64]);
        if !(gaze[0] >= 0.0 && gaze[0] <= w as f64 && gaze[1] >= 0.0 && gaze[1] <= h as f64) {
            return Err(Error::Config(format!("gaze ({}, {}) outside {w}x{h} frame", gaze[0], gaze[1])));
        }
        let ppd = plan.pixels_per_degree.unwrap_or(pose.intrinsics.fx * std::f64::consts::PI / 180.0);
        let pooling = plan.pooling(ppd);
        let half = 0.5 * plan.blend_band_deg;
        let n = plan.region_count();
        let b = &plan.boundaries_deg;
        let mut weights = vec![vec![0.0; w * h]; n];
        let mut outer_field = vec![vec![false; w * h]; n];
        for y in 0..h {
            for x in 0..w {
                let e = pooling.eccentricity(gaze, x, y);
                let p = y * w + x;
                let mut below = 0.0;
                for k in 0..n {
                    let upto = if k + 1 < n { inside(e, b[k], half) } else { 1.0 };
                    weights[k][p] = upto - below;
                    below = upto;
                    outer_field[k][p] = k == 0 || e >= b[k - 1] - half;
                }
            }
        }
        let support: Vec<Vec<bool>> = weights.iter().map(|r| r.iter().map(|v| *v > 0.0).collect()).collect();
        let grid = rasterizer.grid(pose);
        let tiles = support.iter().map(|m| TileMask::from_pixel_mask(&grid, m.clone())).collect::<Result<_>>()?;
        Ok(Self { width: w, height: h, gaze, pooling, weights, support, tiles, outer_field })
    }

    pub fn region_count(&self) -> usize {
        self.weights.len()
    }

    /// Blends per-region frames with the layout's weights.
    pub fn composite(&self, frames: &[Framebuffer]) -> Result<Framebuffer> {
        if frames.len() != self.region_count() {
            return Err(Error::Invalid("one frame per region expected".into()));
        }
        let mut data = vec![[0.0; 3]; self.width * self.height];
        for (frame, weights) in frames.iter().zip(&self.weights) {
            if frame.width != self.width || frame.height != self.height {
                return Err(Error::DimensionMismatch(frame.width, frame.height, self.width, self.height));
            }
            for ((out, px), &wk) in data.iter_mut().zip(frame.pixels()).zip(weights) {
                if wk > 0.0 {
                    for c in 0..3 {
                        out[c] += wk * px[c];
                    }
                }
            }
        }
        Framebuffer::from_raw(self.width, self.height, data)
    }
}

fn check_uniform(poses: &[CameraPose]) -> Result<&CameraPose> {
    let first = poses.first().ok_or_else(|| Error::Invalid("foveation needs at least one pose".into()))?;
    if poses.iter().any(|p| p.width != first.width || p.height != first.height || p.intrinsics != first.intrinsics) {
        return Err(Error::Invalid("foveation needs poses sharing resolution and intrinsics".into()));
    }
    Ok(first)
}

/// Summary of one region's model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub index: usize,
    /// Outer boundary in degrees; `None` for the outermost region.
    pub outer_deg: Option<f64>,
    pub point_count: usize,
    /// Pruning ratio applied to the predecessor.
    pub rho_relative: f64,
    pub lambda_used: f64,
    pub target_db: f64,
    pub quality_db: f64,
    /// Pose-mean pooled error on the region's support.
    pub pooled_error: f64,
    /// `pooled_error` relative to region 1's.
    pub alignment_ratio: f64,
    pub flags: SampleFlags,
    /// No pruned model reached the target; the predecessor is used unchanged.
    pub reused_predecessor: bool,
    pub share: RegionShare,
    /// Rendering power of the model over the full frame.
    pub model_rendering_watts: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeReport {
    pub plan: FoveationPlan,
    pub gaze: [f64; 2],
    pub pixels_per_degree: f64,
    pub regions: Vec<RegionSummary>,
    pub primary: OptimizeReport,
}

pub struct Cascade {
    pub models: Vec<Scene>,
    pub layout: RegionLayout,
    pub report: CascadeReport,
}

fn pooled_error(
    rasterizer: &Rasterizer,
    scene: &Scene,
    poses: &[CameraPose],
    refs: &[Framebuffer],
    layout: &RegionLayout,
    region: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for (pose, r) in poses.iter().zip(refs) {
        // Full frame: pools near the region's edge reach past its pixels.
        let frame = rasterizer.render(scene, pose).framebuffer;
        total += ecc_quality_masked(&frame, r, layout.gaze, &layout.pooling, Some(&layout.support[region]))?;
    }
    Ok(total / poses.len() as f64)
}

/// A region's additive contribution to the foveated frame's power.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionShare {
    pub display_watts: f64,
    pub rendering_watts: f64,
}

impl RegionShare {
    pub fn total(&self) -> f64 {
        self.display_watts + self.rendering_watts
    }
}

/// Pose-mean display power of `scene` weighted by the region's blend weights, plus
/// the rendering power of drawing only the region's pixels.
pub fn region_share(
    rasterizer: &Rasterizer,
    scene: &Scene,
    poses: &[CameraPose],
    layout: &RegionLayout,
    region: usize,
    settings: &OptimizeSettings,
) -> RegionShare {
    let d = &settings.display;
    let coef = d.coefficients();
    let weights = &layout.weights[region];
    let mut share = RegionShare::default();
    for pose in poses {
        let out = rasterizer.render_masked(scene, pose, Some(&layout.tiles[region]));
        let per_pixel: f64 = out
            .framebuffer
            .pixels()
            .zip(weights)
            .map(|(px, w)| w * (coef[0] * px[0] + coef[1] * px[1] + coef[2] * px[2] + d.s))
            .sum();
        share.display_watts += per_pixel / weights.len() as f64;
        share.rendering_watts += crate::power::rendering_power(&out.counters(), &settings.energy);
    }
    let n = poses.len() as f64;
    share.display_watts /= n;
    share.rendering_watts /= n;
    share
}

fn rendering_watts(
    rasterizer: &Rasterizer,
    scene: &Scene,
    poses: &[CameraPose],
    tiles: Option<&TileMask>,
    settings: &OptimizeSettings,
) -> f64 {
    let total: f64 = poses
        .iter()
        .map(|p| crate::power::rendering_power(&rasterizer.render_masked(scene, p, tiles).counters(), &settings.energy))
        .sum();
    total / poses.len() as f64
}

/// Builds region 1 with the power-optimal procedure and every further region from
/// its predecessor, aligning pooled quality to region 1.
pub fn build_cascade(
    rasterizer: &Rasterizer,
    dense: &Scene,
    poses: &[CameraPose],
    plan: &FoveationPlan,
    q_min: f64,
    settings: &OptimizeSettings,
    checkpoint: Option<(&Checkpointer, &str)>,
) -> Result<Cascade> {
    let pose0 = check_uniform(poses)?;
    let layout = RegionLayout::new(plan, rasterizer, pose0)?;
    let primary = build_power_optimal_model(rasterizer, dense, poses, q_min, settings, checkpoint)?;
    let refs: Vec<Framebuffer> = poses.iter().map(|p| rasterizer.render(dense, p).framebuffer).collect();

    let e1 = pooled_error(rasterizer, &primary.scene, poses, &refs, &layout, 0)?;
    let q1 = pooled_db(e1);
    let target = q1 - plan.alignment_offset_db();
    let mut models = vec![primary.scene];
    let mut regions = vec![RegionSummary {
        index: 1,
        outer_deg: plan.boundaries_deg.first().copied(),
        point_count: models[0].len(),
        rho_relative: primary.report.optimum.rho_star,
        lambda_used: primary.report.final_model.sample.lambda_used,
        target_db: q_min,
        quality_db: primary.report.final_model.sample.quality_achieved,
        pooled_error: e1,
        alignment_ratio: 1.0,
        flags: primary.report.final_model.sample.flags,
        reused_predecessor: false,
        share: region_share(rasterizer, &models[0], poses, &layout, 0, settings),
        model_rendering_watts: primary.report.final_model.report.rendering_watts,
    }];

    for k in 1..layout.region_count() {
        // Tuned over everything outside its inner edge, so the model stays a sound
        // starting point for the regions beyond; scored on its own band.
        let scope = SampleScope {
            pixel_mask: Some(layout.outer_field[k].clone()),
            quality_mask: Some(layout.support[k].clone()),
            tile_mask: None,
            importance_mask: None,
            measure: QualityMeasure::Pooled { gaze: layout.gaze, pooling: layout.pooling },
        };
        let pred = &models[k - 1];
        let sampler = IsoQualitySampler::with_scope(
            rasterizer.clone(),
            pred,
            poses,
            refs.clone(),
            settings.display,
            settings.energy,
            settings.controller.clone(),
            scope,
        )?;
        let mut chosen: Option<(f64, IsoQualitySample)> = None;
        let mut last_flags = SampleFlags::default();
        for &rho in [0.0].iter().chain(&plan.rho_ladder) {
            let probe = sampler.probe(rho, plan.probe_steps)?;
            if probe < target {
                log::debug!("region {}: rho {rho} probe {probe:.3} dB below {target:.3} dB", k + 1);
                break;
            }
            let s = sampler.sample(rho, target)?;
            last_flags = s.flags;
            if !s.flags.converged {
                break;
            }
            let share = region_share(rasterizer, &s.scene, poses, &layout, k, settings).total();
            log::info!(
                "region {}: rho {rho}, {} points, {:.3} dB (target {target:.3}), share {share:.6} W",
                k + 1,
                s.scene.len(),
                s.quality_db
            );
            if chosen.as_ref().is_some_and(|(best, _)| share >= *best) {
                break;
            }
            chosen = Some((share, s));
        }
        let (scene, rho, lambda, quality, flags, reused) = match chosen {
            Some((_, s)) => (s.scene, s.rho, s.lambda_used, s.quality_db, s.flags, false),
            None => {
                log::warn!("region {}: target {target:.3} dB unreachable; reusing region {}", k + 1, k);
                let e = pooled_error(rasterizer, pred, poses, &refs, &layout, k)?;
                let flags = SampleFlags { converged: false, unreachable: true, ..last_flags };
                (pred.clone(), 0.0, 0.0, pooled_db(e), flags, true)
            }
        };
        let e = pooled_error(rasterizer, &scene, poses, &refs, &layout, k)?;
        regions.push(RegionSummary {
            index: k + 1,
            outer_deg: plan.boundaries_deg.get(k).copied(),
            point_count: scene.len(),
            rho_relative: rho,
            lambda_used: lambda,
            target_db: target,
            quality_db: quality,
            pooled_error: e,
            alignment_ratio: if e1 > 0.0 { e / e1 } else { f64::NAN },
            flags,
            reused_predecessor: reused,
            share: region_share(rasterizer, &scene, poses, &layout, k, settings),
            model_rendering_watts: rendering_watts(rasterizer, &scene, poses, None, settings),
        });
        models.push(scene);
    }

    let report = CascadeReport {
        plan: plan.clone(),
        gaze: layout.gaze,
        pixels_per_degree: layout.pooling.pixels_per_degree,
        regions,
        primary: primary.report,
    };
    Ok(Cascade { models, layout, report })
}

/// A composited frame and the summed work of all regions.
#[derive(Debug, Clone)]
pub struct FoveatedFrame {
    pub framebuffer: Framebuffer,
    pub counters: OpCounters,
    pub region_counters: Vec<OpCounters>,
}

/// Renders each model on its region's tiles and blends the results.
pub fn render_foveated(
    rasterizer: &Rasterizer,
    models: &[Scene],
    layout: &RegionLayout,
    pose: &CameraPose,
) -> Result<FoveatedFrame> {
    if models.len() != layout.region_count() {
        return Err(Error::Invalid(format!(
            "{} models for {} regions",
            models.len(),
            layout.region_count()
        )));
    }
    if pose.width != layout.width || pose.height != layout.height {
        return Err(Error::DimensionMismatch(pose.width, pose.height, layout.width, layout.height));
    }
    let outs: Vec<_> = models
        .iter()
        .zip(&layout.tiles)
        .map(|(m, t)| rasterizer.render_masked(m, pose, Some(t)))
        .collect();
    let region_counters: Vec<OpCounters> = outs.iter().map(|o| o.counters()).collect();
    let frames: Vec<Framebuffer> = outs.into_iter().map(|o| o.framebuffer).collect();
    Ok(FoveatedFrame {
        framebuffer: layout.composite(&frames)?,
        counters: region_counters.iter().copied().sum(),
        region_counters,
    })
}

/// Pose-averaged power of the foveated pipeline: display on the composite, rendering
/// from the summed region counters.
pub fn foveated_power_report(
    rasterizer: &Rasterizer,
    models: &[Scene],
    layout: &RegionLayout,
    poses: &[CameraPose],
    settings: &OptimizeSettings,
) -> Result<PowerReport> {
    check_uniform(poses)?;
    let frames = poses
        .iter()
        .map(|pose| {
            let f = render_foveated(rasterizer, models, layout, pose)?;
            Ok(FramePower::new(&f.framebuffer, f.counters, &settings.display, &settings.energy))
        })
        .collect::<Result<Vec<_>>>()?;
    PowerReport::from_frames(frames)
}
