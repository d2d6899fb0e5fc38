//! Efficiency-aware pruning, color fine-tuning under a display-power penalty, and the
//! adaptive penalty controller that produces one iso-quality model per pruning ratio.

mod control;
mod finetune;

pub use control::{
    adapt_lambda, anneal_scale, sample_iso_quality_point, ControlRecord, ControllerConfig, IsoQualitySampler,
    IsoQualitySample, PruneFinetuneState, pooled_db, QualityMeasure, SampleFlags, SampleScope,
};
pub use finetune::{finetune_step, Finetuner};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Rasterizer, TileMask};
use crate::scene::{CameraPose, Scene};

/// Per-point pruning priority: `score = importance / max(cost, 1)`, lowest pruned first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneScore {
    /// Sum of blend weights `alpha * T` over all pixels of all poses.
    pub importance: Vec<f64>,
    /// Number of (pose, tile) pairs the point is binned into.
    pub cost: Vec<f64>,
    pub score: Vec<f64>,
}

impl PruneScore {
    pub fn from_parts(importance: Vec<f64>, cost: Vec<f64>) -> Self {
        let score = importance.iter().zip(&cost).map(|(i, c)| i / c.max(1.0)).collect();
        Self { importance, cost, score }
    }

    pub fn len(&self) -> usize {
        self.score.len()
    }

    pub fn is_empty(&self) -> bool {
        self.score.is_empty()
    }
}

pub fn compute_prune_scores(scene: &Scene, poses: &[CameraPose]) -> Result<PruneScore> {
    compute_prune_scores_with(&Rasterizer::default(), scene, poses)
}

pub fn compute_prune_scores_with(
    rasterizer: &Rasterizer,
    scene: &Scene,
    poses: &[CameraPose],
) -> Result<PruneScore> {
    compute_prune_scores_masked(rasterizer, scene, poses, None, None)
}

/// Scores restricted to a field of view: importance sums weights over `pixel_mask`
/// only and cost counts tiles inside `tile_mask` only.
pub fn compute_prune_scores_masked(
    rasterizer: &Rasterizer,
    scene: &Scene,
    poses: &[CameraPose],
    pixel_mask: Option<&[bool]>,
    tile_mask: Option<&TileMask>,
) -> Result<PruneScore> {
    if poses.is_empty() {
        return Err(Error::Invalid("pruning scores need at least one pose".into()));
    }
    let n = scene.len();
    let mut importance = vec![0.0; n];
    let mut cost = vec![0.0; n];
    for pose in poses {
        if pixel_mask.is_some_and(|m| m.len() != pose.pixel_count()) {
            return Err(Error::Invalid("pixel mask does not match the camera resolution".into()));
        }
        let projection = rasterizer.project(scene, pose, tile_mask);
        for s in &projection.splats {
            cost[s.index] += s.tiles.len() as f64;
        }
        let (_, weights) = rasterizer.render_with_weights(scene, pose, tile_mask);
        match pixel_mask {
            None => weights.add_point_totals(&mut importance),
            Some(mask) => {
                for (p, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
                    for e in weights.row(p) {
                        importance[e.point as usize] += e.weight;
                    }
                }
            }
        }
    }
    Ok(PruneScore::from_parts(importance, cost))
}

/// Number of points removed at ratio `rho` from `n` points.
pub fn prune_count(n: usize, rho: f64) -> usize {
    ((rho * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Removes the `ceil(rho * N)` lowest-scoring points (ties by index); order preserved.
pub fn prune(scene: &Scene, scores: &PruneScore, rho: f64) -> Result<Scene> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Invalid(format!("pruning ratio {rho} outside [0, 1)")));
    }
    if scores.len() != scene.len() {
        return Err(Error::Invalid("score count does not match scene".into()));
    }
    let mut order: Vec<usize> = (0..scene.len()).collect();
    order.sort_by(|&a, &b| scores.score[a].total_cmp(&scores.score[b]).then(a.cmp(&b)));
    let mut keep = vec![true; scene.len()];
    for &i in &order[..prune_count(scene.len(), rho)] {
        keep[i] = false;
    }
    Ok(scene.retain_indices(&keep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_synthetic_scene, sample_poses, GeneratorSpec, PoseSpec};

    #[test]
    fn prune_counts() {
        let scene = generate_synthetic_scene(&GeneratorSpec::new(10, 1)).unwrap();
        let scores = PruneScore::from_parts((0..10).map(|i| i as f64).collect(), vec![1.0; 10]);
        assert_eq!(prune(&scene, &scores, 0.0).unwrap(), scene);
        let half = prune(&scene, &scores, 0.5).unwrap();
        assert_eq!(half.len(), 5);
        assert_eq!(half.points[0], scene.points[5]);
        assert!(prune(&scene, &scores, 1.0).is_err());
        assert_eq!(prune_count(10, 0.15), 2);
        assert_eq!(prune_count(100, 0.3), 30);
    }

    #[test]
    fn ties_break_by_index() {
        let scene = generate_synthetic_scene(&GeneratorSpec::new(4, 2)).unwrap();
        let scores = PruneScore::from_parts(vec![1.0; 4], vec![1.0; 4]);
        let out = prune(&scene, &scores, 0.5).unwrap();
        assert_eq!(out.points, scene.points[2..].to_vec());
    }

    #[test]
    fn larger_span_lowers_score() {
        let s = PruneScore::from_parts(vec![2.0, 2.0], vec![3.0, 12.0]);
        assert_eq!(s.cost[1], 4.0 * s.cost[0]);
        assert!(s.score[1] < s.score[0]);
    }

    #[test]
    fn full_masks_match_unmasked_scores() {
        let scene = generate_synthetic_scene(&GeneratorSpec::new(60, 5)).unwrap();
        let poses = sample_poses(&scene, &PoseSpec { width: 32, height: 32, ..PoseSpec::with_count(2) }, 2).unwrap();
        let r = Rasterizer::default();
        let grid = r.grid(&poses[0]);
        let all = vec![true; 32 * 32];
        let a = compute_prune_scores_with(&r, &scene, &poses).unwrap();
        let b = compute_prune_scores_masked(&r, &scene, &poses, Some(&all), Some(&TileMask::full(&grid))).unwrap();
        assert_eq!(a.cost, b.cost);
        for (x, y) in a.importance.iter().zip(&b.importance) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn scores_are_deterministic() {
        let scene = generate_synthetic_scene(&GeneratorSpec::new(80, 3)).unwrap();
        let poses = sample_poses(&scene, &PoseSpec { width: 32, height: 32, ..PoseSpec::with_count(2) }, 1).unwrap();
        let a = compute_prune_scores(&scene, &poses).unwrap();
        let b = compute_prune_scores(&scene, &poses).unwrap();
        assert_eq!(a, b);
        assert!(a.score.iter().all(|v| v.is_finite()));
    }
}
