//! Scene representation: Gaussian splat primitives, cameras, and scene I/O.

mod ply;
mod poses;
mod synth;

pub use ply::{load_scene, save_scene, SceneFormat};
pub use poses::{sample_poses, PoseSpec};
pub use synth::{generate_synthetic_scene, ColorDistribution, GeneratorSpec};

use nalgebra::{Isometry3, Point3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Zeroth-order spherical harmonic basis constant.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;

/// Converts a degree-0 SH coefficient to a linear color value (before clamping).
#[inline]
pub fn sh_to_color(sh: f64) -> f64 {
    SH_C0 * sh + 0.5
}

#[inline]
pub fn color_to_sh(color: f64) -> f64 {
    (color - 0.5) / SH_C0
}

/// One anisotropic Gaussian primitive.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPoint {
    pub position: Vector3<f64>,
    /// Per-axis standard deviation in scene units (already exp-decoded).
    pub scale: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    /// Opacity in `[0, 1]` (already sigmoid-decoded).
    pub opacity: f64,
    /// Degree-0 SH coefficients, one per RGB channel.
    pub sh_dc: [f64; 3],
    /// Higher-order SH coefficients, preserved through I/O but not used for shading.
    pub sh_rest: Vec<f64>,
}

impl GaussianPoint {
    /// Linear RGB color as used by the rasterizer, unclamped.
    pub fn color(&self) -> [f64; 3] {
        self.sh_dc.map(sh_to_color)
    }

    pub fn set_color(&mut self, rgb: [f64; 3]) {
        self.sh_dc = rgb.map(color_to_sh);
    }

    /// Checks the primitive invariants; `index` is used for error reporting.
    pub fn validate(&self, index: usize) -> Result<()> {
        let bad = |field| Err(Error::InvalidPoint { index, field });
        if !self.position.iter().all(|v| v.is_finite()) {
            return bad("position");
        }
        if !self.scale.iter().all(|v| v.is_finite() && *v > 0.0) {
            return bad("scale");
        }
        let q = self.rotation.quaternion();
        if !q.coords.iter().all(|v| v.is_finite()) || (q.norm() - 1.0).abs() > 1e-6 {
            return bad("rotation");
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return bad("opacity");
        }
        if !self.sh_dc.iter().all(|v| v.is_finite()) {
            return bad("sh_dc");
        }
        if !self.sh_rest.iter().all(|v| v.is_finite()) {
            return bad("sh_rest");
        }
        Ok(())
    }
}

/// An ordered collection of splats with an identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub points: Vec<GaussianPoint>,
}

impl Scene {
    pub fn new(id: impl Into<String>, points: Vec<GaussianPoint>) -> Self {
        Self { id: id.into(), points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let rest_len = self.points.first().map_or(0, |p| p.sh_rest.len());
        for (i, p) in self.points.iter().enumerate() {
            p.validate(i)?;
            if p.sh_rest.len() != rest_len {
                return Err(Error::InvalidPoint { index: i, field: "sh_rest" });
            }
        }
        Ok(())
    }

    /// Axis-aligned bounds of the point centers, `None` for an empty scene.
    pub fn bounding_box(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let first = self.points.first()?.position;
        Some(self.points.iter().fold((first, first), |(lo, hi), p| {
            (lo.inf(&p.position), hi.sup(&p.position))
        }))
    }

    /// Returns the scene with only the points whose indices satisfy `keep`, order preserved.
    pub fn retain_indices(&self, keep: &[bool]) -> Scene {
        let points = self
            .points
            .iter()
            .zip(keep)
            .filter(|(_, &k)| k)
            .map(|(p, _)| p.clone())
            .collect();
        Scene { id: self.id.clone(), points }
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// A camera: world-to-camera rigid transform, intrinsics, and resolution.
///
/// Camera space follows the usual computer-vision convention: +x right, +y down,
/// +z forward.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    pub world_to_camera: Isometry3<f64>,
    pub intrinsics: Intrinsics,
    pub width: usize,
    pub height: usize,
}

impl CameraPose {
    pub fn new(
        world_to_camera: Isometry3<f64>,
        intrinsics: Intrinsics,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Invalid(format!("camera resolution {width}x{height}")));
        }
        if !(intrinsics.fx > 0.0 && intrinsics.fy > 0.0)
            || !intrinsics.cx.is_finite()
            || !intrinsics.cy.is_finite()
        {
            return Err(Error::Invalid("focal lengths must be positive".into()));
        }
        Ok(Self { world_to_camera, intrinsics, width, height })
    }

    /// Camera at `eye` looking at `target`, with `up` as the world up direction.
    pub fn look_at(
        eye: Point3<f64>,
        target: Point3<f64>,
        up: Vector3<f64>,
        intrinsics: Intrinsics,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::Invalid("camera eye coincides with target".into()));
        }
        let forward = forward.normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-9 {
            return Err(Error::Invalid("view direction parallel to up vector".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rot = nalgebra::Matrix3::from_rows(&[
            right.transpose(),
            down.transpose(),
            forward.transpose(),
        ]);
        let rotation =
            UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(rot));
        let translation = -(rotation * eye.coords);
        Self::new(
            Isometry3::from_parts(Translation3::from(translation), rotation),
            intrinsics,
            width,
            height,
        )
    }

    /// Symmetric pinhole intrinsics for a horizontal field of view.
    pub fn intrinsics_from_fov(fov_x_deg: f64, width: usize, height: usize) -> Intrinsics {
        let fx = 0.5 * width as f64 / (0.5 * fov_x_deg.to_radians()).tan();
        Intrinsics { fx, fy: fx, cx: 0.5 * width as f64, cy: 0.5 * height as f64 }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Camera center in world coordinates.
    pub fn eye(&self) -> Point3<f64> {
        self.world_to_camera.inverse() * Point3::origin()
    }

    /// Projects a world point to pixel coordinates; `None` when behind the camera.
    pub fn project(&self, world: &Point3<f64>) -> Option<[f64; 2]> {
        let c = self.world_to_camera * world;
        if c.z <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        Some([k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point() -> GaussianPoint {
        GaussianPoint {
            position: Vector3::zeros(),
            scale: Vector3::repeat(0.1),
            rotation: UnitQuaternion::identity(),
            opacity: 0.5,
            sh_dc: [0.0; 3],
            sh_rest: vec![],
        }
    }

    #[test]
    fn invariant_violations_are_reported_by_field() {
        let mut p = point();
        p.scale.x = 0.0;
        assert!(matches!(p.validate(3), Err(Error::InvalidPoint { index: 3, field: "scale" })));
        let mut p = point();
        p.opacity = 1.5;
        assert!(matches!(p.validate(0), Err(Error::InvalidPoint { field: "opacity", .. })));
        let mut p = point();
        p.sh_dc[1] = f64::NAN;
        assert!(p.validate(0).is_err());
    }

    #[test]
    fn color_round_trips_through_sh() {
        let mut p = point();
        p.set_color([0.1, 0.5, 0.9]);
        let c = p.color();
        for (a, b) in c.iter().zip([0.1, 0.5, 0.9]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn look_at_centers_target() {
        let k = CameraPose::intrinsics_from_fov(60.0, 64, 48);
        let pose = CameraPose::look_at(
            Point3::new(3.0, 1.0, 0.5),
            Point3::new(0.2, -0.1, 0.0),
            Vector3::z(),
            k,
            64,
            48,
        )
        .unwrap();
        let uv = pose.project(&Point3::new(0.2, -0.1, 0.0)).unwrap();
        assert!((uv[0] - 32.0).abs() < 1e-9 && (uv[1] - 24.0).abs() < 1e-9);
        assert!((pose.eye() - Point3::new(3.0, 1.0, 0.5)).norm() < 1e-12);
    }

    #[test]
    fn invalid_cameras_are_rejected() {
        let mut k = CameraPose::intrinsics_from_fov(60.0, 8, 8);
        assert!(CameraPose::new(Isometry3::identity(), k, 0, 8).is_err());
        k.fx = -1.0;
        assert!(CameraPose::new(Isometry3::identity(), k, 8, 8).is_err());
    }
}
