//! Synthetic desk-scale scenes with an analytic ray tracer (the source of
//! ground-truth images and depths), dataset generation and on-disk layout,
//! camera rigs, and image/depth quality metrics.

mod cameras;
mod dataset;
mod metrics;
mod shapes;

pub use cameras::ring_cameras;
pub use dataset::{DatasetOptions, FrameRecord, SceneDataset, SceneManifest, SceneSplit};
pub use metrics::{depth_metrics, psnr, ssim, DepthReport};
pub use shapes::{CubeRoom, GlossyRoom, Hit, SceneModel, SphereRoom};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("scene I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest parse: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("manifest invalid: {0}")]
    BadManifest(String),
    #[error(transparent)]
    Image(#[from] crate::img::ImageError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

/// The built-in scene families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    /// Closed room, textured walls, cameras on an interior ring looking out.
    CubeRoom,
    /// Room with a matte sphere at the center, cameras looking inward.
    Sphere,
    /// Room with a view-dependent glossy patch on one wall.
    Glossy,
}

impl SceneKind {
    pub fn model(self) -> Box<dyn SceneModel> {
        let lo = Vector3::new(-0.7, -0.6, -0.7);
        let hi = Vector3::new(0.7, 0.6, 0.7);
        match self {
            SceneKind::CubeRoom => Box::new(CubeRoom::textbook(lo, hi)),
            SceneKind::Sphere => Box::new(SphereRoom::new(
                CubeRoom::textbook(lo, hi),
                Vector3::new(0.0, 0.0, 0.0),
                0.25,
            )),
            SceneKind::Glossy => Box::new(GlossyRoom::new(CubeRoom::textbook(lo, hi))),
        }
    }

    /// Do the rig cameras face the room walls or the room center?
    pub fn looks_inward(self) -> bool {
        matches!(self, SceneKind::Sphere)
    }

    pub fn name(self) -> &'static str {
        match self {
            SceneKind::CubeRoom => "cube-room",
            SceneKind::Sphere => "sphere",
            SceneKind::Glossy => "glossy",
        }
    }

    /// World-space box enclosing the scene contents (the room interior).
    pub fn bounds(self) -> (Vector3<f64>, Vector3<f64>) {
        (Vector3::new(-0.7, -0.6, -0.7), Vector3::new(0.7, 0.6, 0.7))
    }
}

impl std::str::FromStr for SceneKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cube-room" => Ok(SceneKind::CubeRoom),
            "sphere" => Ok(SceneKind::Sphere),
            "glossy" => Ok(SceneKind::Glossy),
            other => Err(format!("unknown scene {other:?} (cube-room, sphere, glossy)")),
        }
    }
}
