//! Orbit cameras looking at the origin and the eight-view schedule.

use nalgebra::{Matrix4, Point3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;

/// Default orbit radius for meshes normalized to the unit sphere; the sphere
/// spans about 80% of the frame height at [`DEFAULT_FOV_Y`].
pub const DEFAULT_DISTANCE: f64 = 3.2;
pub const DEFAULT_FOV_Y: f64 = 45.0;

/// `(azimuth, elevation)` pairs in degrees of the default eight-view schedule.
pub const EIGHT_VIEW_ANGLES: [(f64, f64); 8] = [
    (-180.0, 15.0),
    (-120.0, -15.0),
    (-60.0, 15.0),
    (0.0, -15.0),
    (60.0, 15.0),
    (120.0, -15.0),
    (-180.0, -45.0),
    (0.0, 45.0),
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("invalid camera pose: {0}")]
    InvalidPose(String),
    #[error("point is behind the near plane (depth {depth}, near {near})")]
    BehindCamera { depth: f64, near: f64 },
    #[error("view schedule is empty")]
    EmptySchedule,
    #[error("view schedule repeats (azimuth {0}, elevation {1})")]
    DuplicatePose(f64, f64),
}

/// Maps any azimuth into `(-180, 180]`.
pub fn normalize_azimuth(az: f64) -> f64 {
    let a = az.rem_euclid(360.0);
    if a > 180.0 {
        a - 360.0
    } else {
        a
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    /// Degrees, `(-180, 180]`, 0 looks at the mesh front (+Z) and 90 from +X.
    pub azimuth: f64,
    /// Degrees, `[-90, 90]`, positive above the horizon.
    pub elevation: f64,
    pub distance: f64,
    /// Vertical field of view in degrees.
    pub fov_y: f64,
    /// Square frame edge in pixels.
    pub image_size: usize,
}

/// Projection of a world point: normalized device coordinates (x right, y up)
/// and eye-space depth along the viewing axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected {
    pub ndc: [f64; 2],
    pub depth: f64,
}

impl CameraPose {
    pub fn new(
        azimuth: f64,
        elevation: f64,
        distance: f64,
        fov_y: f64,
        image_size: usize,
    ) -> Result<Self, CameraError> {
        if !(-90.0..=90.0).contains(&elevation) {
            return Err(CameraError::InvalidPose(format!("elevation {elevation} outside [-90, 90]")));
        }
        if !(distance > 0.0 && distance.is_finite()) {
            return Err(CameraError::InvalidPose(format!("distance {distance} must be positive")));
        }
        if !(fov_y > 0.0 && fov_y < 180.0) {
            return Err(CameraError::InvalidPose(format!("fov_y {fov_y} outside (0, 180)")));
        }
        if !azimuth.is_finite() {
            return Err(CameraError::InvalidPose(format!("azimuth {azimuth} is not finite")));
        }
        Ok(Self {
            azimuth: normalize_azimuth(azimuth),
            elevation,
            distance,
            fov_y,
            image_size,
        })
    }

    /// Same orientation, different frame size.
    pub fn with_size(&self, image_size: usize) -> Self {
        Self { image_size, ..*self }
    }

    pub fn position(&self) -> Vec3 {
        let (az, el) = (self.azimuth.to_radians(), self.elevation.to_radians());
        Vec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos()) * self.distance
    }

    pub fn forward(&self) -> Vec3 {
        -self.position().normalize()
    }

    pub fn near(&self) -> f64 {
        self.distance / 100.0
    }

    fn up_hint(&self) -> Vec3 {
        // Looking straight up or down: +Y is parallel to the view axis.
        if self.elevation.abs() >= 90.0 - 1e-9 {
            Vec3::x()
        } else {
            Vec3::y()
        }
    }

    /// Right-handed look-at transform from world to eye space; the camera looks
    /// down -Z in eye space.
    pub fn view_matrix(&self) -> Matrix4<f64> {
        let eye = Point3::from(self.position());
        Matrix4::look_at_rh(&eye, &Point3::origin(), &self.up_hint())
    }

    fn tan_half_fov(&self) -> f64 {
        (self.fov_y.to_radians() * 0.5).tan()
    }

    pub fn to_eye(&self, p: &Vec3) -> Vec3 {
        let v = self.view_matrix() * Vector4::new(p.x, p.y, p.z, 1.0);
        Vec3::new(v.x, v.y, v.z)
    }

    pub fn project(&self, p: &Vec3) -> Result<Projected, CameraError> {
        let e = self.to_eye(p);
        let depth = -e.z;
        if depth < self.near() {
            return Err(CameraError::BehindCamera {
                depth,
                near: self.near(),
            });
        }
        let t = self.tan_half_fov();
        Ok(Projected {
            ndc: [e.x / (depth * t), e.y / (depth * t)],
            depth,
        })
    }

    pub fn unproject(&self, ndc: [f64; 2], depth: f64) -> Vec3 {
        let t = self.tan_half_fov();
        let eye = Vector4::new(ndc[0] * t * depth, ndc[1] * t * depth, -depth, 1.0);
        let inv = self
            .view_matrix()
            .try_inverse()
            .expect("look-at matrices are rigid and invertible");
        let w = inv * eye;
        Vec3::new(w.x, w.y, w.z)
    }

    /// NDC of pixel `(px, py)`'s center; row 0 is the top of the frame.
    pub fn pixel_center_ndc(&self, px: usize, py: usize) -> [f64; 2] {
        let s = self.image_size as f64;
        [(px as f64 + 0.5) / s * 2.0 - 1.0, 1.0 - (py as f64 + 0.5) / s * 2.0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewSchedule {
    poses: Vec<CameraPose>,
}

impl ViewSchedule {
    pub fn from_angles(
        angles: &[(f64, f64)],
        distance: f64,
        fov_y: f64,
        image_size: usize,
    ) -> Result<Self, CameraError> {
        if angles.is_empty() {
            return Err(CameraError::EmptySchedule);
        }
        let poses = angles
            .iter()
            .map(|&(az, el)| CameraPose::new(az, el, distance, fov_y, image_size))
            .collect::<Result<Vec<_>, _>>()?;
        for (i, a) in poses.iter().enumerate() {
            if poses[..i]
                .iter()
                .any(|b| b.azimuth == a.azimuth && b.elevation == a.elevation)
            {
                return Err(CameraError::DuplicatePose(a.azimuth, a.elevation));
            }
        }
        Ok(Self { poses })
    }

    /// The fixed eight-view orbit: alternating ±15° elevations every 60° of
    /// azimuth plus one view from below-behind and one from above-front.
    pub fn eight_views(distance: f64, fov_y: f64, image_size: usize) -> Result<Self, CameraError> {
        Self::from_angles(&EIGHT_VIEW_ANGLES, distance, fov_y, image_size)
    }

    pub fn poses(&self) -> &[CameraPose] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn with_size(&self, image_size: usize) -> Self {
        Self {
            poses: self.poses.iter().map(|p| p.with_size(image_size)).collect(),
        }
    }

    /// Largest azimuth gap between neighbouring views, wrapping around.
    pub fn max_azimuth_gap(&self) -> f64 {
        let mut az: Vec<f64> = self.poses.iter().map(|p| p.azimuth).collect();
        az.sort_by(f64::total_cmp);
        az.dedup();
        let wrap = az[0] + 360.0 - az[az.len() - 1];
        az.windows(2).map(|w| w[1] - w[0]).fold(wrap, f64::max)
    }
}
