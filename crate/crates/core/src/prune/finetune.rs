use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::power::DisplayModel;
use crate::quality::{mean_psnr, mse_masked, PSNR_CAP_DB};
use crate::raster::{BlendWeights, Framebuffer, Rasterizer, TileMask};
use crate::scene::{CameraPose, Scene, SH_C0};

/// Color fine-tuning of a fixed-geometry scene against reference frames.
///
/// The loss is the pose-mean of `MSE(frame, reference) + lambda * display_watts(frame)`.
/// Only colors change, so each pose's blend weights are captured once and frames are
/// re-composed from them.
///
/// Steps are projected gradient descent on the colors in `[0, 1]`, scaled per point by
/// the inverse of the corresponding row sum of the (non-negative) MSE Hessian. The
/// scaled Hessian then has spectral radius at most 1, so a unit step never increases
/// the loss.
///
/// With a pixel mask, the MSE and display terms average over masked pixels only.
pub struct Finetuner {
    weights: Vec<BlendWeights>,
    references: Vec<Framebuffer>,
    display: DisplayModel,
    precond: Vec<f64>,
    n_points: usize,
    mask: Option<Vec<bool>>,
}

impl Finetuner {
    pub fn new(
        rasterizer: &Rasterizer,
        scene: &Scene,
        poses: &[CameraPose],
        references: &[Framebuffer],
        display: DisplayModel,
    ) -> Result<Self> {
        Self::with_mask(rasterizer, scene, poses, references, display, None, None)
    }

    /// Restricts the loss to `pixel_mask` and rendering to `tile_mask`, which must
    /// cover every masked pixel.
    pub fn with_mask(
        rasterizer: &Rasterizer,
        scene: &Scene,
        poses: &[CameraPose],
        references: &[Framebuffer],
        display: DisplayModel,
        pixel_mask: Option<&[bool]>,
        tile_mask: Option<&TileMask>,
    ) -> Result<Self> {
        if poses.is_empty() || poses.len() != references.len() {
            return Err(Error::Invalid("fine-tuning needs one reference per pose".into()));
        }
        for (p, r) in poses.iter().zip(references) {
            if p.width != r.width || p.height != r.height {
                return Err(Error::DimensionMismatch(p.width, p.height, r.width, r.height));
            }
            if pixel_mask.is_some_and(|m| m.len() != p.pixel_count()) {
                return Err(Error::Invalid("pixel mask does not match the camera resolution".into()));
            }
        }
        let mask = pixel_mask.map(<[bool]>::to_vec);
        let weights: Vec<BlendWeights> = poses
            .iter()
            .map(|pose| rasterizer.render_with_weights(scene, pose, tile_mask).1)
            .collect();
        let n = scene.len();
        let mut precond = vec![0.0; n];
        for w in &weights {
            let totals = w.pixel_totals();
            let active = mask.as_ref().map_or(w.pixel_count(), |m| m.iter().filter(|b| **b).count());
            let scale = 2.0 / (3.0 * active.max(1) as f64 * poses.len() as f64);
            for (p, total) in totals.iter().enumerate() {
                if mask.as_ref().is_some_and(|m| !m[p]) {
                    continue;
                }
                for e in w.row(p) {
                    precond[e.point as usize] += scale * e.weight * total;
                }
            }
        }
        Ok(Self { weights, references: references.to_vec(), display, precond, n_points: n, mask })
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    /// Clamped per-point colors of `scene`, the optimization variables.
    pub fn colors_of(scene: &Scene) -> Vec<[f64; 3]> {
        scene.points.iter().map(|p| p.color().map(|v| v.clamp(0.0, 1.0))).collect()
    }

    /// Writes colors back as degree-0 SH coefficients.
    pub fn apply(scene: &mut Scene, colors: &[[f64; 3]]) {
        for (p, c) in scene.points.iter_mut().zip(colors) {
            p.set_color(*c);
        }
    }

    pub fn frames(&self, colors: &[[f64; 3]]) -> Vec<Framebuffer> {
        self.weights.par_iter().map(|w| w.compose(colors)).collect()
    }

    pub fn references(&self) -> &[Framebuffer] {
        &self.references
    }

    /// Mean PSNR (each capped) over the masked pixels.
    pub fn quality(&self, colors: &[[f64; 3]]) -> f64 {
        let frames = self.frames(colors);
        if self.mask.is_none() {
            return mean_psnr(&frames, &self.references).expect("matching frames");
        }
        let total: f64 = frames
            .iter()
            .zip(&self.references)
            .map(|(f, r)| {
                let m = mse_masked(f, r, self.mask()).expect("matching frames");
                if m == 0.0 { PSNR_CAP_DB } else { (-10.0 * m.log10()).min(PSNR_CAP_DB) }
            })
            .sum();
        total / frames.len() as f64
    }

    pub fn display_watts(&self, colors: &[[f64; 3]]) -> f64 {
        let frames = self.frames(colors);
        frames.iter().map(|f| self.display.watts(f.channel_means_masked(self.mask()))).sum::<f64>()
            / frames.len() as f64
    }

    /// Loss and its gradient with respect to the point colors.
    pub fn loss_and_gradient(&self, colors: &[[f64; 3]], lambda: f64) -> (f64, Vec<[f64; 3]>) {
        let n_poses = self.weights.len() as f64;
        let coef = self.display.coefficients();
        let mask = self.mask();
        let per_pose: Vec<(f64, Vec<[f64; 3]>)> = self
            .weights
            .par_iter()
            .zip(&self.references)
            .map(|(w, reference)| {
                let frame = w.compose(colors);
                let np = mask.map_or(frame.len(), |m| m.iter().filter(|b| **b).count()).max(1) as f64;
                let mut sq = 0.0;
                let upstream: Vec<[f64; 3]> = frame
                    .raw()
                    .iter()
                    .zip(reference.pixels())
                    .enumerate()
                    .map(|(i, (px, r))| {
                        let mut g = [0.0; 3];
                        if mask.is_some_and(|m| !m[i]) {
                            return g;
                        }
                        for k in 0..3 {
                            let d = px[k] - r[k];
                            sq += d * d;
                            g[k] = (2.0 * d / (3.0 * np) + lambda * coef[k] / np) / n_poses;
                        }
                        g
                    })
                    .collect();
                let loss = sq / (3.0 * np) + lambda * self.display.watts(frame.channel_means_masked(mask));
                (loss / n_poses, w.backprop(&upstream, self.n_points))
            })
            .collect();
        let mut loss = 0.0;
        let mut grad = vec![[0.0; 3]; self.n_points];
        for (l, g) in per_pose {
            loss += l;
            for (acc, v) in grad.iter_mut().zip(g) {
                for k in 0..3 {
                    acc[k] += v[k];
                }
            }
        }
        (loss, grad)
    }

    /// Gradient with respect to the degree-0 SH coefficients.
    pub fn loss_and_sh_gradient(&self, colors: &[[f64; 3]], lambda: f64) -> (f64, Vec<[f64; 3]>) {
        let (loss, grad) = self.loss_and_gradient(colors, lambda);
        (loss, grad.into_iter().map(|g| g.map(|v| v * SH_C0)).collect())
    }

    /// One preconditioned projected step; returns the loss before the step.
    pub fn step(&self, colors: &mut [[f64; 3]], lambda: f64, step_size: f64) -> f64 {
        let (loss, grad) = self.loss_and_gradient(colors, lambda);
        for ((c, g), d) in colors.iter_mut().zip(&grad).zip(&self.precond) {
            if *d > 0.0 {
                for k in 0..3 {
                    c[k] = (c[k] - step_size * g[k] / d).clamp(0.0, 1.0);
                }
            }
        }
        loss
    }
}

/// One fine-tuning step on `scene`'s colors; returns the updated scene and the loss
/// before the step.
pub fn finetune_step(
    scene: &Scene,
    poses: &[CameraPose],
    references: &[Framebuffer],
    display: &DisplayModel,
    lambda: f64,
    step_size: f64,
) -> Result<(Scene, f64)> {
    let tuner = Finetuner::new(&Rasterizer::default(), scene, poses, references, *display)?;
    let mut colors = Finetuner::colors_of(scene);
    let loss = tuner.step(&mut colors, lambda, step_size);
    let mut out = scene.clone();
    Finetuner::apply(&mut out, &colors);
    Ok((out, loss))
}
