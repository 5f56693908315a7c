//! Pinhole camera model: intrinsics, rigid camera-to-world poses, projection
//! and unprojection, and per-pixel rays.
//!
//! Conventions: the camera looks down its local +Z axis, +X is right, +Y is
//! down, matching image coordinates (u right, v down). Pixel centers sit at
//! half-integer coordinates: pixel `(x, y)` covers `[x, x+1) x [y, y+1)` and
//! its center is `(x + 0.5, y + 0.5)`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::GeometryError;
use crate::img::{DepthMap, ImageF};

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        if !(fx.is_finite() && fy.is_finite() && cx.is_finite() && cy.is_finite()) {
            return Err(GeometryError::BadIntrinsics("non-finite parameter".into()));
        }
        if fx <= 0.0 || fy <= 0.0 {
            return Err(GeometryError::BadIntrinsics(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::BadIntrinsics(format!(
                "zero-sized image plane {width}x{height}"
            )));
        }
        Ok(Self { fx, fy, cx, cy, width, height })
    }

    /// Symmetric intrinsics with a given vertical field of view in radians.
    pub fn from_fov(width: usize, height: usize, fov_y: f64) -> Result<Self, GeometryError> {
        if !(fov_y.is_finite() && fov_y > 0.0 && fov_y < std::f64::consts::PI) {
            return Err(GeometryError::BadIntrinsics(format!("bad vertical fov {fov_y}")));
        }
        let f = height as f64 / (2.0 * (fov_y / 2.0).tan());
        Self::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }
}

/// Rigid camera-to-world transform. `rotation` maps camera-frame directions
/// to world-frame directions; `translation` is the camera center in world
/// coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl CameraPose {
    const ORTHONORMAL_TOL: f64 = 1e-6;

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let gram = rotation.transpose() * rotation;
        let deviation = (gram - Matrix3::identity()).norm();
        let det = rotation.determinant();
        if !deviation.is_finite() || deviation > Self::ORTHONORMAL_TOL || det <= 0.0 {
            return Err(GeometryError::BadRotation { deviation, det });
        }
        Ok(Self { rotation, translation })
    }

    /// Pose whose +Z axis points from `eye` toward `target`, with `up`
    /// fixing the roll. `up` must not be parallel to the view direction.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or(GeometryError::BadIntrinsics("look_at: eye equals target".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or(GeometryError::BadIntrinsics("look_at: up parallel to view".into()))?;
        // +Y is down in the camera frame, so down = forward x right.
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        Self::new(rotation, eye)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    /// Camera center in world coordinates.
    pub fn camera_center(&self) -> Vector3<f64> {
        self.translation
    }

    /// World-frame direction of the camera's optical (+Z) axis.
    pub fn forward_axis(&self) -> Vector3<f64> {
        self.rotation.column(2).into()
    }

    pub fn camera_to_world(&self, p_cam: Vector3<f64>) -> Vector3<f64> {
        self.rotation * p_cam + self.translation
    }

    pub fn world_to_camera(&self, p_world: Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p_world - self.translation)
    }
}

/// Result of projecting a world point into a view.
#[derive(Debug, Clone, Copy)]
pub struct Projection {
    /// Pixel coordinates (u, v); NaN when the point is behind the camera.
    pub pixel: [f64; 2],
    /// Depth along the optical axis (camera-frame z).
    pub depth: f64,
    /// True when the point is at or behind the camera plane (z <= 0).
    pub behind: bool,
    /// True when the pixel lands inside the image: `0 <= u < W && 0 <= v < H`.
    pub in_frame: bool,
}

/// A ray with a normalized direction.
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// A posed, calibrated view, optionally carrying its image and depth.
#[derive(Debug, Clone)]
pub struct CameraView {
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
    pub image: Option<ImageF>,
    pub depth: Option<DepthMap>,
}

impl CameraView {
    pub fn new(intrinsics: CameraIntrinsics, pose: CameraPose) -> Self {
        Self { intrinsics, pose, image: None, depth: None }
    }

    /// Project a world point into this view.
    pub fn project(&self, p_world: Vector3<f64>) -> Projection {
        let p = self.pose.world_to_camera(p_world);
        let depth = p.z;
        if depth <= 0.0 {
            return Projection { pixel: [f64::NAN, f64::NAN], depth, behind: true, in_frame: false };
        }
        let k = &self.intrinsics;
        let u = k.fx * p.x / depth + k.cx;
        let v = k.fy * p.y / depth + k.cy;
        let in_frame =
            u >= 0.0 && u < k.width as f64 && v >= 0.0 && v < k.height as f64;
        Projection { pixel: [u, v], depth, behind: false, in_frame }
    }

    /// World point at pixel coordinates `(u, v)` and camera-frame depth `z`.
    pub fn unproject(&self, pixel: [f64; 2], depth: f64) -> Vector3<f64> {
        let k = &self.intrinsics;
        let x = (pixel[0] - k.cx) / k.fx * depth;
        let y = (pixel[1] - k.cy) / k.fy * depth;
        self.pose.camera_to_world(Vector3::new(x, y, depth))
    }

    /// Ray through the center of pixel `(x, y)`, with a normalized
    /// world-frame direction.
    pub fn ray_for_pixel(&self, x: usize, y: usize) -> Result<Ray, GeometryError> {
        let k = &self.intrinsics;
        if x >= k.width || y >= k.height {
            return Err(GeometryError::PixelOutOfBounds {
                x,
                y,
                width: k.width,
                height: k.height,
            });
        }
        Ok(self.ray_through([x as f64 + 0.5, y as f64 + 0.5]))
    }

    /// Ray through arbitrary (possibly fractional) pixel coordinates.
    pub fn ray_through(&self, pixel: [f64; 2]) -> Ray {
        let k = &self.intrinsics;
        let dir_cam = Vector3::new(
            (pixel[0] - k.cx) / k.fx,
            (pixel[1] - k.cy) / k.fy,
            1.0,
        );
        let dir_world = (self.pose.rotation() * dir_cam).normalize();
        Ray { origin: self.pose.camera_center(), direction: dir_world }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn test_view() -> CameraView {
        let k = CameraIntrinsics::from_fov(64, 48, 1.0).unwrap();
        let pose = CameraPose::look_at(
            Vector3::new(0.2, -0.1, 0.3),
            Vector3::new(0.2, -0.1, 2.0),
            Vector3::new(0.0, -1.0, 0.0),
        )
        .unwrap();
        CameraView::new(k, pose)
    }

    #[test]
    fn point_behind_camera_is_flagged_with_nan_pixel() {
        let view = test_view();
        let p = view.pose.camera_to_world(Vector3::new(0.1, 0.2, -1.0));
        let proj = view.project(p);
        assert!(proj.behind);
        assert!(!proj.in_frame);
        assert!(proj.pixel[0].is_nan() && proj.pixel[1].is_nan());
        assert!(proj.depth < 0.0);
    }

    #[test]
    fn point_on_optical_axis_hits_principal_point() {
        let view = test_view();
        let p = view.pose.camera_to_world(Vector3::new(0.0, 0.0, 2.0));
        let proj = view.project(p);
        assert!(proj.in_frame);
        assert_relative_eq!(proj.pixel[0], view.intrinsics.cx, epsilon = 1e-12);
        assert_relative_eq!(proj.pixel[1], view.intrinsics.cy, epsilon = 1e-12);
        assert_relative_eq!(proj.depth, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn out_of_frame_points_are_reported() {
        let view = test_view();
        // A point far to the side at modest depth projects outside the image.
        let p = view.pose.camera_to_world(Vector3::new(50.0, 0.0, 1.0));
        let proj = view.project(p);
        assert!(!proj.behind);
        assert!(!proj.in_frame);
        assert!(proj.pixel[0] >= view.intrinsics.width as f64);
    }

    #[test]
    fn non_orthonormal_rotation_is_rejected() {
        let mut r = Matrix3::identity();
        r[(0, 0)] = 1.1;
        let err = CameraPose::new(r, Vector3::zeros()).unwrap_err();
        assert!(matches!(err, GeometryError::BadRotation { .. }));

        // A reflection (det = -1) must also be rejected.
        let mut refl = Matrix3::identity();
        refl[(2, 2)] = -1.0;
        let err = CameraPose::new(refl, Vector3::zeros()).unwrap_err();
        assert!(matches!(err, GeometryError::BadRotation { .. }));
    }

    #[test]
    fn look_at_points_forward_at_target() {
        let eye = Vector3::new(1.0, 2.0, 3.0);
        let target = Vector3::new(-2.0, 0.5, 1.0);
        let pose = CameraPose::look_at(eye, target, Vector3::new(0.0, -1.0, 0.0)).unwrap();
        let fwd = pose.forward_axis();
        let expect = (target - eye).normalize();
        assert_relative_eq!(fwd, expect, epsilon = 1e-12);
        assert_relative_eq!(pose.camera_center(), eye, epsilon = 1e-12);
    }

    #[test]
    fn ray_for_pixel_checks_bounds() {
        let view = test_view();
        assert!(view.ray_for_pixel(63, 47).is_ok());
        assert!(matches!(
            view.ray_for_pixel(64, 0),
            Err(GeometryError::PixelOutOfBounds { .. })
        ));
    }

    #[test]
    fn ray_direction_is_normalized_and_consistent_with_unproject() {
        let view = test_view();
        let ray = view.ray_for_pixel(10, 20).unwrap();
        assert_relative_eq!(ray.direction.norm(), 1.0, epsilon = 1e-12);
        // Unprojecting the same pixel center at some depth must land on the ray.
        let p = view.unproject([10.5, 20.5], 1.7);
        let to_p = p - ray.origin;
        let t = to_p.dot(&ray.direction);
        assert_relative_eq!(ray.at(t), p, epsilon = 1e-9);
    }

    proptest! {
        #[test]
        fn project_unproject_roundtrip(
            u in 0.0f64..64.0,
            v in 0.0f64..48.0,
            depth in 0.05f64..10.0,
        ) {
            let view = test_view();
            let world = view.unproject([u, v], depth);
            let proj = view.project(world);
            prop_assert!(!proj.behind);
            prop_assert!((proj.pixel[0] - u).abs() < 1e-7);
            prop_assert!((proj.pixel[1] - v).abs() < 1e-7);
            prop_assert!((proj.depth - depth).abs() < 1e-9);
        }

        #[test]
        fn world_camera_roundtrip(
            x in -5.0f64..5.0,
            y in -5.0f64..5.0,
            z in -5.0f64..5.0,
        ) {
            let pose = test_view().pose;
            let p = Vector3::new(x, y, z);
            let back = pose.camera_to_world(pose.world_to_camera(p));
            prop_assert!((back - p).norm() < 1e-10);
        }
    }
}
