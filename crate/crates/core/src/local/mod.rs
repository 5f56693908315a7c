//! Per-frame local feature volumes: lift a target view and its neighbor
//! views into a sparse voxel volume covering their joint frustum.
//!
//! For every voxel center, each view that sees it contributes the
//! bilinearly-interpolated image feature at its projection together with an
//! embedding of its view depth. Per-view contributions are reduced to their
//! mean and variance over the visible views only, then refined by a stack of
//! sparse 3D convolutions into the volume's feature channels.

use std::collections::BTreeSet;
use std::sync::Arc;

use nalgebra::Vector3;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{GatherPlan, MaskSet, NeighborTable, NodeId, Real, TapeError, Tensor};
use crate::geometry::{frustum_voxels, CameraView, GeometryError};
use crate::grid::{GridError, GridSpec, SparseVoxelGrid, VoxelSet};
use crate::nn::{Activation, ConvStackSpec, Graph, MlpSpec, NnError, ParameterStore, SparseStackSpec};

#[derive(Debug, Error)]
pub enum LocalError {
    #[error("view {0} carries no image")]
    MissingImage(usize),
    #[error("view {index} image is {got_w}x{got_h}, intrinsics say {want_w}x{want_h}")]
    ImageSizeMismatch { index: usize, got_w: usize, got_h: usize, want_w: usize, want_h: usize },
    #[error("local volume spec invalid: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Architecture of the local volume builder. `encoder_channels` excludes the
/// RGB input (it is prepended automatically); `fuse_channels` excludes the
/// reduced multi-view input width (computed from the encoder and depth
/// widths) and ends in the volume's feature width.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalVolumeSpec {
    pub encoder_channels: Vec<usize>,
    pub encoder_kernels: Vec<usize>,
    pub encoder_strides: Vec<usize>,
    /// Depth embedding widths after the scalar input, ending in its output
    /// width.
    pub depth_channels: Vec<usize>,
    /// Sparse refinement widths after the input, ending in the volume width.
    pub fuse_channels: Vec<usize>,
    pub fuse_kernels: Vec<usize>,
    /// Farthest view depth (meters) a voxel may have to count as seen.
    pub max_depth: f64,
    /// Views per frame: the target plus its nearest neighbors.
    pub neighbor_views: usize,
}

impl Default for LocalVolumeSpec {
    fn default() -> Self {
        Self {
            encoder_channels: vec![32, 48, 64],
            encoder_kernels: vec![3, 3, 3],
            encoder_strides: vec![2, 2, 1],
            depth_channels: vec![32, 32, 32, 32, 16],
            fuse_channels: vec![64, 32, 32, 16, 16],
            fuse_kernels: vec![1, 3, 3, 3, 1],
            max_depth: 3.0,
            neighbor_views: 3,
        }
    }
}

impl LocalVolumeSpec {
    pub const ENCODER_PREFIX: &'static str = "encoder";
    pub const DEPTH_PREFIX: &'static str = "depth";
    pub const FUSE_PREFIX: &'static str = "local_fuse";

    pub fn validate(&self) -> Result<(), LocalError> {
        if self.encoder_channels.is_empty()
            || self.encoder_kernels.len() != self.encoder_channels.len()
            || self.encoder_strides.len() != self.encoder_channels.len()
        {
            return Err(LocalError::BadSpec(
                "encoder channels/kernels/strides lengths must match and be non-empty".into(),
            ));
        }
        if self.depth_channels.is_empty() {
            return Err(LocalError::BadSpec("depth embedding needs at least one layer".into()));
        }
        if self.fuse_channels.is_empty() || self.fuse_kernels.len() != self.fuse_channels.len() {
            return Err(LocalError::BadSpec(
                "fuse channels/kernels lengths must match and be non-empty".into(),
            ));
        }
        if !(self.max_depth.is_finite() && self.max_depth > 0.0) {
            return Err(LocalError::BadSpec(format!("max_depth {} invalid", self.max_depth)));
        }
        if self.neighbor_views == 0 {
            return Err(LocalError::BadSpec("need at least one view per frame".into()));
        }
        Ok(())
    }

    /// Image feature width produced by the encoder.
    pub fn image_feature_width(&self) -> usize {
        *self.encoder_channels.last().expect("validated non-empty")
    }

    /// Depth embedding width.
    pub fn depth_feature_width(&self) -> usize {
        *self.depth_channels.last().expect("validated non-empty")
    }

    /// Width of one view's contribution to a voxel.
    pub fn per_view_width(&self) -> usize {
        self.image_feature_width() + self.depth_feature_width()
    }

    /// Feature width of the finished local volume.
    pub fn volume_channels(&self) -> usize {
        *self.fuse_channels.last().expect("validated non-empty")
    }

    fn encoder_spec(&self) -> ConvStackSpec {
        let mut channels = vec![3];
        channels.extend_from_slice(&self.encoder_channels);
        ConvStackSpec {
            prefix: Self::ENCODER_PREFIX.into(),
            channels,
            kernels: self.encoder_kernels.clone(),
            strides: self.encoder_strides.clone(),
        }
    }

    fn depth_spec(&self) -> MlpSpec {
        let mut widths = vec![1];
        widths.extend_from_slice(&self.depth_channels);
        MlpSpec::new(Self::DEPTH_PREFIX, widths)
    }

    fn fuse_spec(&self) -> SparseStackSpec {
        let mut channels = vec![2 * self.per_view_width()];
        channels.extend_from_slice(&self.fuse_channels);
        SparseStackSpec::new(Self::FUSE_PREFIX, channels, self.fuse_kernels.clone())
            .with_output(Activation::None)
    }

    pub fn register<T: Real>(
        &self,
        store: &mut ParameterStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(), LocalError> {
        self.validate()?;
        self.encoder_spec().register(store, rng)?;
        self.depth_spec().register(store, rng)?;
        self.fuse_spec().register(store, rng)?;
        Ok(())
    }
}

/// A local volume under construction on a tape: its voxel set and the node
/// holding its `[V, C]` features.
#[derive(Debug)]
pub struct LocalVolume {
    pub set: VoxelSet,
    pub features: NodeId,
}

/// The voxels a view covers: in-frame with depth in `(0, max_depth]`. This
/// is the same predicate frustum rasterization uses, so a voxel produced by
/// `frustum_voxels` for a view is always covered by that view.
fn view_covers(view: &CameraView, spec: &GridSpec, coord: [i32; 3], max_depth: f64) -> Option<f64> {
    let proj = view.project(spec.voxel_center(coord));
    (!proj.behind && proj.in_frame && proj.depth <= max_depth).then_some(proj.depth)
}

/// Bilinear interpolation taps into a `rows = y*w + x` flattened feature
/// map, with coordinates clamped to the border.
fn bilinear_taps<T: Real>(fw: usize, fh: usize, x: f64, y: f64) -> Vec<(u32, T)> {
    let cx = x.clamp(0.0, (fw - 1) as f64);
    let cy = y.clamp(0.0, (fh - 1) as f64);
    let x0 = cx.floor().min((fw - 1) as f64);
    let y0 = cy.floor().min((fh - 1) as f64);
    let fx = cx - x0;
    let fy = cy - y0;
    let (x0, y0) = (x0 as usize, y0 as usize);
    let x1 = (x0 + 1).min(fw - 1);
    let y1 = (y0 + 1).min(fh - 1);
    let mut taps = Vec::with_capacity(4);
    let mut push = |xx: usize, yy: usize, w: f64| {
        if w > 0.0 {
            taps.push(((yy * fw + xx) as u32, T::from_f64(w)));
        }
    };
    push(x0, y0, (1.0 - fx) * (1.0 - fy));
    push(x1, y0, fx * (1.0 - fy));
    push(x0, y1, (1.0 - fx) * fy);
    push(x1, y1, fx * fy);
    taps
}

/// Record the construction of a frame's local volume on the graph's tape.
///
/// `views` holds the target view first, then its neighbors; all must carry
/// images. `clip` optionally bounds the volume to a world-space box. The
/// volume's voxel set is the union of the views' truncated frusta; it can be
/// empty when no view sees any voxel, in which case the feature node is a
/// `[0, C]` tensor.
pub fn build_local_volume<T: Real>(
    g: &mut Graph<'_, T>,
    spec: &LocalVolumeSpec,
    grid_spec: &GridSpec,
    views: &[CameraView],
    clip: Option<(Vector3<f64>, Vector3<f64>)>,
) -> Result<LocalVolume, LocalError> {
    spec.validate()?;
    for (i, v) in views.iter().enumerate() {
        let img = v.image.as_ref().ok_or(LocalError::MissingImage(i))?;
        if img.width() != v.intrinsics.width || img.height() != v.intrinsics.height {
            return Err(LocalError::ImageSizeMismatch {
                index: i,
                got_w: img.width(),
                got_h: img.height(),
                want_w: v.intrinsics.width,
                want_h: v.intrinsics.height,
            });
        }
    }

    // Union of the views' truncated frusta, deduplicated and sorted.
    let mut union: BTreeSet<[i32; 3]> = BTreeSet::new();
    for v in views {
        union.extend(frustum_voxels(v, grid_spec, spec.max_depth, clip));
    }
    let set = VoxelSet::from_coords(union.into_iter().collect())?;
    let voxels = set.len();
    if voxels == 0 {
        let features = g.tape.constant(Tensor::zeros(&[0, spec.volume_channels()]));
        return Ok(LocalVolume { set, features });
    }

    let encoder = spec.encoder_spec();
    let factor = spec.encoder_strides.iter().product::<usize>() as f64;

    let mut per_view: Vec<NodeId> = Vec::with_capacity(views.len());
    let mut masks: Vec<Vec<bool>> = Vec::with_capacity(views.len());
    for view in views {
        let img = view.image.as_ref().expect("checked above");
        let (w, h) = (img.width(), img.height());

        // Encode the image: [3,H,W] -> [Cf, fh, fw] -> [(fh*fw), Cf].
        let mut chw = Vec::with_capacity(3 * w * h);
        for c in 0..3 {
            for p in img.pixels() {
                chw.push(T::from_f64(p[c]));
            }
        }
        let input = g.tape.input(Tensor::from_vec(&[3, h, w], chw));
        let fmap = encoder.forward(g, input)?;
        let fshape = g.tape.value(fmap).shape().to_vec();
        let (fh, fw) = (fshape[1], fshape[2]);
        let frows = g.tape.chw_to_rows(fmap)?;

        // Project every voxel center; visible ones pull interpolated image
        // features and contribute their view depth.
        let mut taps: Vec<Vec<(u32, T)>> = Vec::with_capacity(voxels);
        let mut mask = Vec::with_capacity(voxels);
        let mut depths = Vec::with_capacity(voxels);
        for &coord in set.coords() {
            match view_covers(view, grid_spec, coord, spec.max_depth) {
                Some(depth) => {
                    let proj = view.project(grid_spec.voxel_center(coord));
                    // Feature-map pixel (a, b) aggregates the image region
                    // around ((a+0.5)*factor, (b+0.5)*factor).
                    let fx = proj.pixel[0] / factor - 0.5;
                    let fy = proj.pixel[1] / factor - 0.5;
                    taps.push(bilinear_taps::<T>(fw, fh, fx, fy));
                    mask.push(true);
                    depths.push(T::from_f64(depth));
                }
                None => {
                    taps.push(Vec::new());
                    mask.push(false);
                    depths.push(T::zero());
                }
            }
        }
        let img_feats = g.tape.gather(frows, Arc::new(GatherPlan::new(taps)))?;
        let depth_in = g.tape.input(Tensor::from_vec(&[voxels, 1], depths));
        let depth_feats = spec.depth_spec().forward(g, depth_in)?;
        let combined = g.tape.concat_cols(&[img_feats, depth_feats])?;
        per_view.push(combined);
        masks.push(mask);
    }

    let reduced = g.tape.masked_mean_var(&per_view, Arc::new(MaskSet::new(masks)))?;

    let mut table_cache: std::collections::HashMap<usize, Arc<NeighborTable>> =
        std::collections::HashMap::new();
    let mut tables = |k: usize| {
        table_cache.entry(k).or_insert_with(|| Arc::new(set.neighbor_table(k))).clone()
    };
    let features = spec.fuse_spec().forward(g, reduced, &mut tables)?;

    Ok(LocalVolume { set, features })
}

/// Build a frame's local volume without keeping a tape, returning it as a
/// plain sparse grid.
pub fn local_volume_values<T: Real>(
    store: &ParameterStore<T>,
    spec: &LocalVolumeSpec,
    grid_spec: &GridSpec,
    views: &[CameraView],
    clip: Option<(Vector3<f64>, Vector3<f64>)>,
) -> Result<SparseVoxelGrid<T>, LocalError> {
    let mut g = Graph::new(store);
    let vol = build_local_volume(&mut g, spec, grid_spec, views, clip)?;
    let features = g.tape.value(vol.features).clone();
    let mut out_spec = *grid_spec;
    out_spec.channels = spec.volume_channels();
    Ok(SparseVoxelGrid::new(out_spec, vol.set, features)?)
}
