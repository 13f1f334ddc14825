//! Pinhole camera model, mounting extrinsics, depth images, and depth bins.
//!
//! Conventions: the robot frame is x-forward, y-left, z-up with the origin on
//! the ground under the axle. The camera frame is the usual pinhole frame,
//! z along the optical axis, x to image right, y to image down. Depth values
//! are *range along the ray* in meters; 0 encodes an invalid pixel.

use nalgebra::{Isometry3, Matrix3, Point3, Rotation3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinodynamics::State2D;

/// Roll/pitch attitude of the robot body (yaw lives in [`State2D`]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Attitude3D {
    pub roll: f64,
    pub pitch: f64,
}

/// Pinhole intrinsics plus the camera-to-robot rigid transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Camera frame to robot frame.
    pub extrinsic: Isometry3<f64>,
}

/// Camera mounting description used by scenario configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraMount {
    pub height: f64,
    pub forward: f64,
    pub pitch_down: f64,
}

impl Default for CameraMount {
    fn default() -> Self {
        Self { height: 0.3, forward: 0.0, pitch_down: 15f64.to_radians() }
    }
}

impl CameraModel {
    /// Build a camera from resolution, horizontal field of view, and mount.
    pub fn from_fov(width: usize, height: usize, hfov: f64, mount: &CameraMount) -> Self {
        let fx = width as f64 / (2.0 * (hfov / 2.0).tan());
        let fy = fx;
        Self {
            fx,
            fy,
            cx: width as f64 / 2.0 - 0.5,
            cy: height as f64 / 2.0 - 0.5,
            width,
            height,
            extrinsic: mount_extrinsic(mount),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig("camera resolution must be positive".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidConfig("focal lengths must be positive".into()));
        }
        let r = self.extrinsic.rotation.to_rotation_matrix();
        let err = (r.matrix() * r.matrix().transpose() - Matrix3::identity()).norm();
        if err > 1e-9 {
            return Err(Error::InvalidConfig("extrinsic rotation is not orthonormal".into()));
        }
        Ok(())
    }

    /// Unit ray direction through pixel (u, v), in the camera frame.
    pub fn ray_dir(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0).normalize()
    }

    /// Camera-frame point for pixel (u, v) at range `d` along the ray.
    pub fn back_project(&self, u: f64, v: f64, range: f64) -> Point3<f64> {
        Point3::from(self.ray_dir(u, v) * range)
    }

    /// Project a camera-frame point; returns (u, v, range) or None behind the camera.
    pub fn project(&self, p: &Point3<f64>) -> Option<(f64, f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        let u = self.fx * p.x / p.z + self.cx;
        let v = self.fy * p.y / p.z + self.cy;
        Some((u, v, p.coords.norm()))
    }
}

/// Camera-to-robot isometry for a body-mounted camera with the robot flat.
pub fn mount_extrinsic(mount: &CameraMount) -> Isometry3<f64> {
    // optical axis forward, pitched down; image right = -y_robot, image down toward ground
    let p = mount.pitch_down;
    let rot = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[
        Vector3::new(0.0, -1.0, 0.0),
        Vector3::new(-p.sin(), 0.0, -p.cos()),
        Vector3::new(p.cos(), 0.0, -p.sin()),
    ]));
    Isometry3::from_parts(
        Translation3::new(mount.forward, 0.0, mount.height),
        UnitQuaternion::from_rotation_matrix(&rot),
    )
}

/// Robot-to-world isometry for a planar pose with roll/pitch attitude.
pub fn robot_to_world(pose: &State2D, attitude: &Attitude3D) -> Isometry3<f64> {
    let rot = UnitQuaternion::from_euler_angles(attitude.roll, attitude.pitch, pose.theta);
    Isometry3::from_parts(Translation3::new(pose.px, pose.py, 0.0), rot)
}

/// SE(2) pose as a 3D isometry (flat attitude).
pub fn pose_isometry(pose: &State2D) -> Isometry3<f64> {
    robot_to_world(pose, &Attitude3D::default())
}

/// Depth image with range-along-ray values in meters; 0 marks invalid pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthImage {
    pub fn invalid(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, d: f64) {
        self.data[v * self.width + u] = d;
    }

    #[inline]
    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        self.get(u, v) > 0.0
    }
}

/// Discretization of the depth axis for the classification target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthBins {
    pub d_min: f64,
    pub d_max: f64,
    pub count: usize,
}

impl DepthBins {
    pub fn new(d_min: f64, d_max: f64, count: usize) -> Result<Self> {
        if !(d_min < d_max) || count < 2 {
            return Err(Error::InvalidConfig("depth bins need d_min < d_max and count >= 2".into()));
        }
        Ok(Self { d_min, d_max, count })
    }

    pub fn width(&self) -> f64 {
        (self.d_max - self.d_min) / self.count as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.d_min + (i as f64 + 0.5) * self.width()
    }

    /// Bin index of a depth value, clamped into range.
    pub fn index_of(&self, d: f64) -> usize {
        let i = ((d - self.d_min) / self.width()).floor();
        (i.max(0.0) as usize).min(self.count - 1)
    }
}

impl Default for DepthBins {
    fn default() -> Self {
        Self { d_min: 0.5, d_max: 10.0, count: 32 }
    }
}
