//! Camera models, view frusta over the sparse voxel lattice, and neighbor
//! view selection for multi-view feature construction.

mod camera;
mod frustum;
mod neighbors;

pub use camera::{CameraIntrinsics, CameraPose, CameraView, Projection, Ray};
pub use frustum::frustum_voxels;
pub use neighbors::{select_neighbor_views, NeighborOrder};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("camera intrinsics invalid: {0}")]
    BadIntrinsics(String),
    #[error("camera pose rotation is not a proper rotation (|R^T R - I| = {deviation:.3e}, det = {det:.6})")]
    BadRotation { deviation: f64, det: f64 },
    #[error("pixel ({x}, {y}) is outside a {width}x{height} image")]
    PixelOutOfBounds { x: usize, y: usize, width: usize, height: usize },
    #[error("neighbor selection needs at least one view")]
    NoViews,
    #[error("view index {index} out of range for {count} views")]
    ViewIndexOutOfRange { index: usize, count: usize },
}
