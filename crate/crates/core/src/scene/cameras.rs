//! Camera rigs for capturing the synthetic scenes: a ring of poses inside
//! the room, alternating slightly in height for vertical parallax.

use nalgebra::Vector3;

use crate::geometry::{CameraPose, GeometryError};

/// `count` poses on a horizontal circle of `radius` around `center`,
/// azimuths evenly spaced, alternating `center.y ± height_jitter`. With
/// `inward` the cameras face the ring center; otherwise they face outward
/// at the surrounding walls.
pub fn ring_cameras(
    center: Vector3<f64>,
    radius: f64,
    height_jitter: f64,
    count: usize,
    inward: bool,
) -> Result<Vec<CameraPose>, GeometryError> {
    assert!(count > 0 && radius > 0.0);
    let mut poses = Vec::with_capacity(count);
    for i in 0..count {
        let az = i as f64 / count as f64 * std::f64::consts::TAU;
        let dy = if i % 2 == 0 { height_jitter } else { -height_jitter };
        let eye = center + Vector3::new(radius * az.cos(), dy, radius * az.sin());
        let out_dir = Vector3::new(az.cos(), 0.0, az.sin());
        let target = if inward { center } else { eye + out_dir * 10.0 };
        poses.push(CameraPose::look_at(eye, target, Vector3::new(0.0, -1.0, 0.0))?);
    }
    Ok(poses)
}
