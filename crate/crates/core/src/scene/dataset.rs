//! Dataset generation from analytic scene models and the on-disk layout:
//! a JSON manifest next to per-frame PNG images and PFM depth maps.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{SceneError, SceneModel};
use crate::geometry::{CameraIntrinsics, CameraPose, CameraView};
use crate::img::{DepthMap, ImageF};

/// Format tag written into every manifest and checked on load.
pub const MANIFEST_SCHEMA: &str = "voxfusion-scene/1";

/// Human-readable statement of the conventions baked into the files.
pub const CONVENTION: &str = "camera: +z forward, +x right, +y down; pixel centers at \
half-integer coordinates; depth: euclidean distance along the pixel ray; \
PFM scanlines run bottom-to-top";

/// Which optimization stage a frame participates in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneSplit {
    Train,
    Heldout,
}

/// One frame's file names, pose, and split assignment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameRecord {
    pub image: String,
    pub depth: String,
    /// Camera-to-world rotation, row-major.
    pub rotation: [[f64; 3]; 3],
    /// Camera center in world coordinates.
    pub translation: [f64; 3],
    pub split: SceneSplit,
}

/// Everything needed to interpret the files in a scene directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneManifest {
    pub schema: String,
    pub name: String,
    pub convention: String,
    pub intrinsics: CameraIntrinsics,
    /// Ray-marching window and reconstruction defaults for this scene.
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
    pub voxel_size: f64,
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
    pub frames: Vec<FrameRecord>,
}

/// Per-scene settings recorded in the manifest alongside the frames.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetOptions {
    /// Hold out every n-th frame (indices n-1, 2n-1, ...); 0 holds out none.
    pub heldout_stride: usize,
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
    pub voxel_size: f64,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            heldout_stride: 4,
            near: 0.02,
            far: 3.0,
            background: [1.0, 1.0, 1.0],
            voxel_size: 0.05,
        }
    }
}

/// A set of posed views with ground-truth images and depths, plus the
/// manifest describing them.
#[derive(Debug, Clone)]
pub struct SceneDataset {
    pub manifest: SceneManifest,
    pub views: Vec<CameraView>,
}

fn pose_to_arrays(pose: &CameraPose) -> ([[f64; 3]; 3], [f64; 3]) {
    let r = pose.rotation();
    let t = pose.camera_center();
    (
        [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
        ],
        [t.x, t.y, t.z],
    )
}

fn pose_from_arrays(r: &[[f64; 3]; 3], t: &[f64; 3]) -> Result<CameraPose, SceneError> {
    let rotation = Matrix3::new(
        r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
    );
    Ok(CameraPose::new(rotation, Vector3::new(t[0], t[1], t[2]))?)
}

fn check_options(opts: &DatasetOptions) -> Result<(), SceneError> {
    if !(opts.near.is_finite() && opts.far.is_finite() && opts.near > 0.0 && opts.near < opts.far)
    {
        return Err(SceneError::BadManifest(format!(
            "need 0 < near < far, got near={}, far={}",
            opts.near, opts.far
        )));
    }
    if !(opts.voxel_size.is_finite() && opts.voxel_size > 0.0) {
        return Err(SceneError::BadManifest(format!(
            "voxel size must be positive, got {}",
            opts.voxel_size
        )));
    }
    if opts.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(SceneError::BadManifest(format!(
            "background color out of [0,1]: {:?}",
            opts.background
        )));
    }
    Ok(())
}

impl SceneDataset {
    /// Render ground truth for each pose with the analytic tracer.
    ///
    /// Images are quantized to 8 bits per channel and depths rounded through
    /// f32, so the in-memory dataset is bit-identical to a save/load
    /// round-trip. Frames are deterministic functions of the inputs.
    pub fn generate(
        name: &str,
        model: &dyn SceneModel,
        poses: &[CameraPose],
        intrinsics: CameraIntrinsics,
        bounds: (Vector3<f64>, Vector3<f64>),
        opts: &DatasetOptions,
    ) -> Result<Self, SceneError> {
        if poses.is_empty() {
            return Err(SceneError::BadManifest("dataset needs at least one frame".into()));
        }
        check_options(opts)?;
        let (w, h) = (intrinsics.width, intrinsics.height);
        let mut views = Vec::with_capacity(poses.len());
        let mut frames = Vec::with_capacity(poses.len());
        for (i, pose) in poses.iter().enumerate() {
            let view = CameraView::new(intrinsics, *pose);
            let traced: Vec<(f64, [f64; 3])> = (0..w * h)
                .into_par_iter()
                .map(|p| {
                    let ray = view
                        .ray_for_pixel(p % w, p / w)
                        .expect("pixel index within image bounds");
                    match model.trace(&ray) {
                        // Round through f32 to match PFM storage exactly.
                        Some(hit) => (hit.t as f32 as f64, hit.rgb),
                        None => (f64::NAN, opts.background),
                    }
                })
                .collect();
            let mut image =
                ImageF::from_pixels(w, h, traced.iter().map(|&(_, rgb)| rgb).collect())?;
            image.quantize_u8();
            let mut depth = DepthMap::new(w, h)?;
            for (p, &(t, _)) in traced.iter().enumerate() {
                if t.is_finite() {
                    depth.set(p % w, p / w, t);
                }
            }
            let (rotation, translation) = pose_to_arrays(pose);
            let split = if opts.heldout_stride >= 1 && (i + 1) % opts.heldout_stride == 0 {
                SceneSplit::Heldout
            } else {
                SceneSplit::Train
            };
            frames.push(FrameRecord {
                image: format!("frame_{i:03}.png"),
                depth: format!("depth_{i:03}.pfm"),
                rotation,
                translation,
                split,
            });
            let mut view = view;
            view.image = Some(image);
            view.depth = Some(depth);
            views.push(view);
        }
        let manifest = SceneManifest {
            schema: MANIFEST_SCHEMA.into(),
            name: name.into(),
            convention: CONVENTION.into(),
            intrinsics,
            near: opts.near,
            far: opts.far,
            background: opts.background,
            voxel_size: opts.voxel_size,
            bounds_min: [bounds.0.x, bounds.0.y, bounds.0.z],
            bounds_max: [bounds.1.x, bounds.1.y, bounds.1.z],
            frames,
        };
        Ok(Self { manifest, views })
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn indices_of(&self, split: SceneSplit) -> Vec<usize> {
        self.manifest
            .frames
            .iter()
            .enumerate()
            .filter(|(_, f)| f.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// World-space scene bounds recorded in the manifest.
    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let lo = self.manifest.bounds_min;
        let hi = self.manifest.bounds_max;
        (Vector3::new(lo[0], lo[1], lo[2]), Vector3::new(hi[0], hi[1], hi[2]))
    }

    /// Write `manifest.json` plus one PNG and one PFM per frame.
    pub fn save(&self, dir: &Path) -> Result<(), SceneError> {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&self.manifest)?,
        )?;
        for (record, view) in self.manifest.frames.iter().zip(&self.views) {
            let image = view
                .image
                .as_ref()
                .ok_or_else(|| SceneError::BadManifest(format!("{}: no image", record.image)))?;
            let depth = view
                .depth
                .as_ref()
                .ok_or_else(|| SceneError::BadManifest(format!("{}: no depth", record.depth)))?;
            image.save_png(&dir.join(&record.image))?;
            depth.save_pfm(&dir.join(&record.depth))?;
        }
        Ok(())
    }

    /// Read a scene directory back, validating the schema tag, the poses,
    /// and that every frame matches the manifest dimensions.
    pub fn load(dir: &Path) -> Result<Self, SceneError> {
        let manifest: SceneManifest =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.schema != MANIFEST_SCHEMA {
            return Err(SceneError::BadManifest(format!(
                "schema {:?} not supported (want {MANIFEST_SCHEMA:?})",
                manifest.schema
            )));
        }
        if manifest.frames.is_empty() {
            return Err(SceneError::BadManifest("manifest lists no frames".into()));
        }
        check_options(&DatasetOptions {
            heldout_stride: 0,
            near: manifest.near,
            far: manifest.far,
            background: manifest.background,
            voxel_size: manifest.voxel_size,
        })?;
        if manifest
            .bounds_min
            .iter()
            .zip(&manifest.bounds_max)
            .any(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo < hi))
        {
            return Err(SceneError::BadManifest(format!(
                "bad bounds {:?}..{:?}",
                manifest.bounds_min, manifest.bounds_max
            )));
        }
        let k = CameraIntrinsics::new(
            manifest.intrinsics.fx,
            manifest.intrinsics.fy,
            manifest.intrinsics.cx,
            manifest.intrinsics.cy,
            manifest.intrinsics.width,
            manifest.intrinsics.height,
        )?;
        let mut views = Vec::with_capacity(manifest.frames.len());
        for record in &manifest.frames {
            let pose = pose_from_arrays(&record.rotation, &record.translation)?;
            let image = ImageF::load_png(&dir.join(&record.image))?;
            let depth = DepthMap::load_pfm(&dir.join(&record.depth))?;
            for (name, dims) in [
                (&record.image, (image.width(), image.height())),
                (&record.depth, (depth.width(), depth.height())),
            ] {
                if dims != (k.width, k.height) {
                    return Err(SceneError::BadManifest(format!(
                        "{name}: {}x{} does not match manifest {}x{}",
                        dims.0, dims.1, k.width, k.height
                    )));
                }
            }
            let mut view = CameraView::new(k, pose);
            view.image = Some(image);
            view.depth = Some(depth);
            views.push(view);
        }
        Ok(Self { manifest, views })
    }
}
