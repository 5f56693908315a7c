//! Training: rendering losses, the three optimization stages, and
//! checkpointing.
//!
//! Stage one trains the whole network (image encoder, per-frame volume
//! builder, decoder) by rendering individual frames from their own local
//! volumes. Stage two adds the recurrent fusion: short frame windows are
//! unrolled on the tape with a truncated-gradient warm-up prefix, and the
//! loss mixes per-frame local renders with renders from the fused global
//! volume. Stage three is per-scene fine-tuning: the fused volume's features
//! and the decoder are optimized directly, with periodic prune-and-subdivide
//! refinement of the voxel grid.

mod checkpoint;
mod loss;
mod stages;

pub use checkpoint::Checkpoint;
pub use loss::{rendered_rgb_loss, sample_pixel_batch, sample_pixel_batch_multi, PixelBatch};
pub use stages::{EvalPoint, StageReport, Trainer};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{FusionError, FusionSpec};
use crate::local::{LocalError, LocalVolumeSpec};
use crate::nn::{AdamConfig, NnError};
use crate::render::{DecoderSpec, RenderConfig, RenderError};

/// Name under which the global volume's features are exposed as a trainable
/// leaf during fine-tuning (the network parameters keep their own names).
pub const GRID_FEATURES: &str = "grid.features";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training config invalid: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Local(#[from] LocalError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tape(#[from] crate::autodiff::TapeError),
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Image(#[from] crate::img::ImageError),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint invalid: {0}")]
    Checkpoint(String),
    #[error("loss became non-finite at iteration {0}")]
    NonFiniteLoss(usize),
}

/// The full model: local volume builder, recurrent fusion, and decoder.
/// The three sub-specs must agree on the volume feature width.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub local: LocalVolumeSpec,
    pub fusion: FusionSpec,
    pub decoder: DecoderSpec,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            local: LocalVolumeSpec::default(),
            fusion: FusionSpec::default(),
            decoder: DecoderSpec::default(),
        }
    }
}

impl ModelSpec {
    /// A compact configuration sized for single-core CPU runs on small
    /// synthetic scenes. Same architecture shape as the default (stride-4
    /// image encoder, five-layer volume fusion stack, three-gate recurrent
    /// update, sinusoidal-encoded decoder), narrower everywhere.
    pub fn desk() -> Self {
        Self {
            local: LocalVolumeSpec {
                encoder_channels: vec![6, 8, 12],
                encoder_kernels: vec![3, 3, 3],
                encoder_strides: vec![2, 2, 1],
                depth_channels: vec![8, 6],
                fuse_channels: vec![16, 8, 8, 8, 8],
                fuse_kernels: vec![1, 3, 3, 3, 1],
                max_depth: 3.0,
                neighbor_views: 3,
            },
            fusion: FusionSpec {
                channels: 8,
                gate_channels: vec![8, 8],
                gate_kernels: vec![1, 3, 1],
            },
            decoder: DecoderSpec { feature_channels: 8, pe_octaves: 4, hidden: vec![32, 32] },
        }
    }

    /// Feature width of the volumes the three parts exchange.
    pub fn channels(&self) -> usize {
        self.fusion.channels
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.local.validate()?;
        self.fusion.validate()?;
        let c = self.local.volume_channels();
        if c != self.fusion.channels {
            return Err(TrainError::BadConfig(format!(
                "local volume emits {c} channels but fusion expects {}",
                self.fusion.channels
            )));
        }
        if c != self.decoder.feature_channels {
            return Err(TrainError::BadConfig(format!(
                "volume carries {c} channels but decoder expects {}",
                self.decoder.feature_channels
            )));
        }
        Ok(())
    }

    pub fn register<T: crate::autodiff::Real>(
        &self,
        store: &mut crate::nn::ParameterStore<T>,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<(), TrainError> {
        self.validate()?;
        self.local.register(store, rng)?;
        self.fusion.register(store, rng)?;
        self.decoder.register(store, rng)?;
        Ok(())
    }
}

/// Knobs shared by every optimization stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageConfig {
    /// Upper bound on optimizer iterations.
    pub iterations: usize,
    /// Supervision rays drawn per iteration.
    pub rays_per_batch: usize,
    /// Adam step size for this stage.
    pub lr: f64,
    /// Evaluate every this many iterations (0: never evaluate mid-stage).
    pub eval_every: usize,
    /// Stop the stage once an evaluation reaches this PSNR (dB).
    pub psnr_target: Option<f64>,
}

/// Fine-tuning adds grid refinement on top of the stage knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub stage: StageConfig,
    /// Iterations at whose start the grid is pruned and subdivided.
    pub refine_at: Vec<usize>,
    /// Prune a voxel when even its densest interior probe keeps more than
    /// this much transmittance over a unit step.
    pub prune_transparency: f64,
}

/// Everything a training run needs besides the dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub render: RenderConfig,
    /// Adam moments configuration; each stage overrides the step size with
    /// its own `lr`.
    pub adam: AdamConfig,
    pub seed: u64,
    /// Frames unrolled on the tape per end-to-end iteration.
    pub tbptt_window: usize,
    pub local: StageConfig,
    pub fuse: StageConfig,
    pub finetune: FinetuneConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            render: RenderConfig::default(),
            adam: AdamConfig::default(),
            seed: 7,
            tbptt_window: 4,
            local: StageConfig {
                iterations: 20_000,
                rays_per_batch: 128,
                lr: 3e-3,
                eval_every: 500,
                psnr_target: None,
            },
            fuse: StageConfig {
                iterations: 2_000,
                rays_per_batch: 128,
                lr: 1e-3,
                eval_every: 250,
                psnr_target: None,
            },
            finetune: FinetuneConfig {
                stage: StageConfig {
                    iterations: 5_000,
                    rays_per_batch: 128,
                    lr: 5e-3,
                    eval_every: 500,
                    psnr_target: None,
                },
                refine_at: vec![1_000],
                prune_transparency: 0.6,
            },
        }
    }
}

impl TrainConfig {
    /// Compact configuration for single-core desk-scale runs: the small
    /// model, tighter ray budgets, early stopping left to the caller.
    pub fn desk() -> Self {
        Self {
            model: ModelSpec::desk(),
            local: StageConfig {
                iterations: 20_000,
                rays_per_batch: 96,
                lr: 3e-3,
                eval_every: 400,
                psnr_target: None,
            },
            fuse: StageConfig {
                iterations: 1_200,
                rays_per_batch: 96,
                lr: 1e-3,
                eval_every: 200,
                psnr_target: None,
            },
            finetune: FinetuneConfig {
                stage: StageConfig {
                    iterations: 5_000,
                    rays_per_batch: 128,
                    lr: 5e-3,
                    eval_every: 400,
                    psnr_target: None,
                },
                refine_at: vec![1_000],
                prune_transparency: 0.6,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        self.render.validate()?;
        if self.tbptt_window == 0 {
            return Err(TrainError::BadConfig("tbptt_window must be at least 1".into()));
        }
        for (name, s) in
            [("local", &self.local), ("fuse", &self.fuse), ("finetune", &self.finetune.stage)]
        {
            if s.rays_per_batch == 0 {
                return Err(TrainError::BadConfig(format!("{name}: rays_per_batch is 0")));
            }
            if !(s.lr.is_finite() && s.lr > 0.0) {
                return Err(TrainError::BadConfig(format!("{name}: bad learning rate {}", s.lr)));
            }
        }
        if !(0.0..=1.0).contains(&self.finetune.prune_transparency) {
            return Err(TrainError::BadConfig(format!(
                "prune_transparency must be in [0,1], got {}",
                self.finetune.prune_transparency
            )));
        }
        Ok(())
    }
}
