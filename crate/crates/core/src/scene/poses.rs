use std::f64::consts::TAU;

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CameraPose, Scene};
use crate::error::{Error, Result};

/// A fixed camera given by eye and look-at target (world units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplicitPose {
    pub eye: [f64; 3],
    pub target: [f64; 3],
}

/// How the evaluation/training pose set is produced.
///
/// With `explicit` empty, `count` cameras are placed on an orbit around the scene
/// bounding-box center: azimuths are stratified over the full circle with a seeded
/// jitter, elevations uniform in `elevation_deg`, radius `radius_factor` times the
/// bounding-box half-diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSpec {
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default = "default_res")]
    pub width: usize,
    #[serde(default = "default_res")]
    pub height: usize,
    #[serde(default = "default_fov")]
    pub fov_x_deg: f64,
    #[serde(default = "default_radius_factor")]
    pub radius_factor: f64,
    #[serde(default = "default_elevation")]
    pub elevation_deg: [f64; 2],
    #[serde(default)]
    pub explicit: Vec<ExplicitPose>,
}

fn default_count() -> usize {
    4
}
fn default_res() -> usize {
    128
}
fn default_fov() -> f64 {
    50.0
}
fn default_radius_factor() -> f64 {
    1.8
}
fn default_elevation() -> [f64; 2] {
    [-25.0, 35.0]
}

impl Default for PoseSpec {
    fn default() -> Self {
        Self {
            count: default_count(),
            width: default_res(),
            height: default_res(),
            fov_x_deg: default_fov(),
            radius_factor: default_radius_factor(),
            elevation_deg: default_elevation(),
            explicit: Vec::new(),
        }
    }
}

impl PoseSpec {
    pub fn with_count(count: usize) -> Self {
        Self { count, ..Self::default() }
    }
}

/// Produces the pose set; deterministic in `seed`.
pub fn sample_poses(scene: &Scene, spec: &PoseSpec, seed: u64) -> Result<Vec<CameraPose>> {
    if !(spec.fov_x_deg > 0.0 && spec.fov_x_deg < 180.0) {
        return Err(Error::Invalid(format!("field of view {} deg", spec.fov_x_deg)));
    }
    let intrinsics = CameraPose::intrinsics_from_fov(spec.fov_x_deg, spec.width, spec.height);
    let up = Vector3::z();

    if !spec.explicit.is_empty() {
        return spec
            .explicit
            .iter()
            .map(|p| {
                CameraPose::look_at(
                    Point3::from(p.eye),
                    Point3::from(p.target),
                    up,
                    intrinsics,
                    spec.width,
                    spec.height,
                )
            })
            .collect();
    }

    if spec.count == 0 {
        return Err(Error::Invalid("pose count must be at least 1".into()));
    }
    let [el_lo, el_hi] = spec.elevation_deg;
    if !(el_lo <= el_hi && el_lo > -89.0 && el_hi < 89.0) {
        return Err(Error::Invalid("elevation range must lie within (-89, 89) degrees".into()));
    }
    // An empty scene is framed as the unit box.
    let (lo, hi) = scene.bounding_box().unwrap_or((Vector3::repeat(-1.0), Vector3::repeat(1.0)));
    let half_diag = 0.5 * (hi - lo).norm();
    if !(half_diag > 1e-9) {
        return Err(Error::Degenerate("scene extent is zero".into()));
    }
    let center = Point3::from(0.5 * (lo + hi));
    let radius = spec.radius_factor * half_diag;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..spec.count)
        .map(|i| {
            let azimuth = TAU * (i as f64 + rng.random::<f64>()) / spec.count as f64;
            let elevation = if el_hi > el_lo {
                rng.random_range(el_lo..=el_hi).to_radians()
            } else {
                el_lo.to_radians()
            };
            let dir = Vector3::new(
                elevation.cos() * azimuth.cos(),
                elevation.cos() * azimuth.sin(),
                elevation.sin(),
            );
            CameraPose::look_at(center + radius * dir, center, up, intrinsics, spec.width, spec.height)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_synthetic_scene, GeneratorSpec};

    fn scene() -> Scene {
        generate_synthetic_scene(&GeneratorSpec::new(50, 3)).unwrap()
    }

    #[test]
    fn single_pose_has_finite_center_ray() {
        let s = scene();
        let poses = sample_poses(&s, &PoseSpec::with_count(1), 0).unwrap();
        assert_eq!(poses.len(), 1);
        let (lo, hi) = s.bounding_box().unwrap();
        let ray = Point3::from(0.5 * (lo + hi)) - poses[0].eye();
        assert!(ray.iter().all(|v| v.is_finite()) && ray.norm() > 0.0);
    }

    #[test]
    fn deterministic_for_seed() {
        let s = scene();
        let a = sample_poses(&s, &PoseSpec::with_count(8), 11).unwrap();
        let b = sample_poses(&s, &PoseSpec::with_count(8), 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn center_projects_inside_every_image() {
        let s = scene();
        let (lo, hi) = s.bounding_box().unwrap();
        let center = Point3::from(0.5 * (lo + hi));
        let spec = PoseSpec { width: 96, height: 64, ..PoseSpec::with_count(8) };
        for pose in sample_poses(&s, &spec, 5).unwrap() {
            // Independent pinhole projection from the raw matrix.
            let m = pose.world_to_camera.to_homogeneous();
            let c = m * center.to_homogeneous();
            assert!(c.z > 0.0);
            let k = pose.intrinsics;
            let u = k.fx * c.x / c.z + k.cx;
            let v = k.fy * c.y / c.z + k.cy;
            assert!((0.0..96.0).contains(&u) && (0.0..64.0).contains(&v), "({u},{v})");
        }
    }

    #[test]
    fn degenerate_extent_is_an_error() {
        let mut s = scene();
        s.points.truncate(1);
        assert!(matches!(
            sample_poses(&s, &PoseSpec::with_count(2), 0),
            Err(Error::Degenerate(_))
        ));
        s.points.clear();
        assert_eq!(sample_poses(&s, &PoseSpec::with_count(2), 0).unwrap().len(), 2);
    }
}
