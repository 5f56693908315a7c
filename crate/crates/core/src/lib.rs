//! Incremental neural scene reconstruction from posed RGB video.
//!
//! The library builds a sparse voxel feature volume of a scene one frame at a
//! time: a 2D CNN lifts each frame (plus a few neighbor views) into a local
//! sparse feature volume, a gated recurrent unit over sparse voxels fuses the
//! local volume into a persistent global volume, and a small MLP decodes any
//! world point + view direction into density and radiance, rendered with
//! differentiable ray marching. Everything is trained end to end from image
//! reconstruction loss alone; a per-scene fine-tuning stage sharpens the fused
//! volume with prune-and-subdivide refinement.
//!
//! Module map:
//! - [`autodiff`]: tensor tape with reverse-mode differentiation
//! - [`nn`]: parameter store, layer builders, Adam
//! - [`geometry`]: cameras, rays, frustum coverage, neighbor view selection
//! - [`grid`]: sparse voxel grids, trilinear sampling, prune/subdivide
//! - [`render`]: ray sampling, alpha compositing, image rendering
//! - [`local`]: per-frame local volume construction
//! - [`fusion`]: recurrent fusion of local volumes into the global volume
//! - [`scene`]: synthetic scenes, dataset I/O, image metrics
//! - [`train`]: losses, training stages, checkpoints
//! - [`img`]: float image / depth-map containers and PNG/PFM I/O

pub mod autodiff;
pub mod fusion;
pub mod geometry;
pub mod grid;
pub mod img;
pub mod local;
pub mod nn;
pub mod render;
pub mod scene;
pub mod train;
