//! Volume rendering over the sparse feature grid: lattice traversal with
//! empty-space skipping, per-segment sampling, a small decoder network from
//! interpolated features to density and radiance, and front-to-back alpha
//! compositing (differentiable end to end).

mod decoder;
mod pipeline;
mod traverse;

pub use decoder::DecoderSpec;
pub use pipeline::{render_batch, render_image, render_rays_values, RenderedImage};
pub use traverse::{build_sample_plan, ray_active_segments, SamplePlan};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("render config invalid: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
    #[error(transparent)]
    Tape(#[from] crate::autodiff::TapeError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Image(#[from] crate::img::ImageError),
}

/// Ray-marching parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RenderConfig {
    /// Closest sample distance along each ray.
    pub near: f64,
    /// Farthest sample distance along each ray.
    pub far: f64,
    /// Samples placed inside each occupied voxel a ray crosses.
    pub samples_per_voxel: usize,
    /// Color composited behind the scene for rays that keep transmittance.
    pub background: [f64; 3],
    /// Minimum accumulated opacity for a ray's expected depth to count as
    /// a valid surface hit.
    pub opacity_threshold: f64,
    /// Rays decoded per forward pass when rendering full images.
    pub ray_batch: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            near: 0.02,
            far: 3.0,
            samples_per_voxel: 4,
            background: [1.0, 1.0, 1.0],
            opacity_threshold: 0.5,
            ray_batch: 1024,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<(), RenderError> {
        if !(self.near.is_finite() && self.far.is_finite() && self.near >= 0.0) {
            return Err(RenderError::BadConfig(format!(
                "near/far must be finite and non-negative, got {} / {}",
                self.near, self.far
            )));
        }
        if self.near >= self.far {
            return Err(RenderError::BadConfig(format!(
                "near {} must be below far {}",
                self.near, self.far
            )));
        }
        if self.samples_per_voxel == 0 {
            return Err(RenderError::BadConfig("samples_per_voxel must be >= 1".into()));
        }
        if self.ray_batch == 0 {
            return Err(RenderError::BadConfig("ray_batch must be >= 1".into()));
        }
        if !self.background.iter().all(|c| c.is_finite()) {
            return Err(RenderError::BadConfig("non-finite background color".into()));
        }
        if !(0.0..=1.0).contains(&self.opacity_threshold) {
            return Err(RenderError::BadConfig(format!(
                "opacity_threshold {} outside [0,1]",
                self.opacity_threshold
            )));
        }
        Ok(())
    }
}
