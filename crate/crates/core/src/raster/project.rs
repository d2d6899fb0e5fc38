use nalgebra::{Matrix2x3, Matrix3};
use rayon::prelude::*;

use super::{RasterSettings, TileGrid, TileMask};
use crate::scene::{CameraPose, GaussianPoint, Scene};

/// Squared Mahalanobis radius of the splat footprint (3 sigma).
pub const FOOTPRINT_CUTOFF_SQ: f64 = 9.0;

/// A point after perspective projection, with the tiles its footprint reaches.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedSplat {
    /// Index of the source point in the scene.
    pub index: usize,
    pub mean: [f64; 2],
    /// Screen-space covariance `(xx, xy, yy)` in square pixels.
    pub cov: [f64; 3],
    /// Inverse covariance `(xx, xy, yy)`.
    pub conic: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    /// Shaded color, clamped to `[0, 1]`.
    pub color: [f64; 3],
    /// Row-major tile indices whose pixel centers fall inside the footprint.
    pub tiles: Vec<u32>,
}

impl ProjectedSplat {
    /// Squared Mahalanobis distance of the pixel center `(px + 0.5, py + 0.5)`.
    #[inline]
    pub fn mahalanobis(&self, px: usize, py: usize) -> f64 {
        let dx = px as f64 + 0.5 - self.mean[0];
        let dy = py as f64 + 0.5 - self.mean[1];
        self.conic[0] * dx * dx + 2.0 * self.conic[1] * dx * dy + self.conic[2] * dy * dy
    }

    /// Alpha at a pixel, or `None` outside the footprint.
    #[inline]
    pub fn alpha_at(&self, px: usize, py: usize) -> Option<f64> {
        let m = self.mahalanobis(px, py);
        (m <= FOOTPRINT_CUTOFF_SQ).then(|| self.opacity * (-0.5 * m).exp())
    }
}

/// All visible splats of one frame.
#[derive(Debug, Clone)]
pub struct Projection {
    pub grid: TileGrid,
    pub splats: Vec<ProjectedSplat>,
}

fn project_one(
    index: usize,
    point: &GaussianPoint,
    pose: &CameraPose,
    settings: &RasterSettings,
    grid: &TileGrid,
    mask: Option<&TileMask>,
) -> Option<ProjectedSplat> {
    let cam = pose.world_to_camera * nalgebra::Point3::from(point.position);
    if !(cam.z > settings.near_plane) {
        return None;
    }
    let k = &pose.intrinsics;
    let (x, y, z) = (cam.x, cam.y, cam.z);

    // Clamp the Jacobian evaluation point to a slightly enlarged frustum.
    let lim_x = 1.3 * (0.5 * pose.width as f64 / k.fx);
    let lim_y = 1.3 * (0.5 * pose.height as f64 / k.fy);
    let tx = (x / z).clamp(-lim_x, lim_x) * z;
    let ty = (y / z).clamp(-lim_y, lim_y) * z;
    let jac = Matrix2x3::new(
        k.fx / z,
        0.0,
        -k.fx * tx / (z * z),
        0.0,
        k.fy / z,
        -k.fy * ty / (z * z),
    );

    let m = point.rotation.to_rotation_matrix().into_inner() * Matrix3::from_diagonal(&point.scale);
    let cov3 = m * m.transpose();
    let w = pose.world_to_camera.rotation.to_rotation_matrix().into_inner();
    let t = jac * w;
    let cov2 = t * cov3 * t.transpose();
    let a = cov2[(0, 0)] + settings.cov_floor;
    let b = 0.5 * (cov2[(0, 1)] + cov2[(1, 0)]);
    let c = cov2[(1, 1)] + settings.cov_floor;
    let det = a * c - b * b;
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let conic = [c / det, -b / det, a / det];
    let mean = [k.fx * x / z + k.cx, k.fy * y / z + k.cy];
    if !(mean[0].is_finite() && mean[1].is_finite()) {
        return None;
    }

    let color = point.color().map(|v| v.clamp(0.0, 1.0));
    let mut splat = ProjectedSplat {
        index,
        mean,
        cov: [a, b, c],
        conic,
        depth: z,
        opacity: point.opacity,
        color,
        tiles: Vec::new(),
    };

    // Pixel-center bounding box of the 3-sigma ellipse, padded by one pixel; the
    // per-pixel test below is authoritative.
    let rx = (FOOTPRINT_CUTOFF_SQ * a).sqrt();
    let ry = (FOOTPRINT_CUTOFF_SQ * c).sqrt();
    let x0 = (mean[0] - rx - 0.5).ceil() - 1.0;
    let x1 = (mean[0] + rx - 0.5).floor() + 1.0;
    let y0 = (mean[1] - ry - 0.5).ceil() - 1.0;
    let y1 = (mean[1] + ry - 0.5).floor() + 1.0;
    if x1 < 0.0 || y1 < 0.0 || x0 > (grid.width - 1) as f64 || y0 > (grid.height - 1) as f64 {
        return None;
    }
    let x0 = x0.max(0.0) as usize;
    let y0 = y0.max(0.0) as usize;
    let x1 = (x1 as usize).min(grid.width - 1);
    let y1 = (y1 as usize).min(grid.height - 1);

    let ts = grid.tile_size;
    for ty in y0 / ts..=y1 / ts {
        for tx in x0 / ts..=x1 / ts {
            let tile = ty * grid.tiles_x + tx;
            if mask.is_some_and(|m| !m.contains(tile)) {
                continue;
            }
            let (rx0, ry0, rx1, ry1) = grid.tile_rect(tile);
            let hit = (ry0.max(y0)..ry1.min(y1 + 1))
                .any(|py| (rx0.max(x0)..rx1.min(x1 + 1)).any(|px| splat.mahalanobis(px, py) <= FOOTPRINT_CUTOFF_SQ));
            if hit {
                splat.tiles.push(tile as u32);
            }
        }
    }
    (!splat.tiles.is_empty()).then_some(splat)
}

/// Projects every point; points behind the near plane, with degenerate covariance, or
/// touching no (unmasked) tile are culled.
pub fn project_points(
    scene: &Scene,
    pose: &CameraPose,
    settings: &RasterSettings,
    mask: Option<&TileMask>,
) -> Projection {
    let grid = TileGrid::new(pose.width, pose.height, settings.tile_size);
    let splats = scene
        .points
        .par_iter()
        .enumerate()
        .filter_map(|(i, p)| project_one(i, p, pose, settings, &grid, mask))
        .collect();
    Projection { grid, splats }
}
