//! The training driver: stage loops, evaluation, reconstruction, and grid
//! refinement during fine-tuning.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{GatherPlan, Real, Tensor};
use crate::fusion::fuse_values;
use crate::geometry::{select_neighbor_views, CameraPose, CameraView, NeighborOrder};
use crate::grid::{
    interior_probe_points, prune_grid, subdivide_grid, trilinear_taps, GridSpec, SparseVoxelGrid,
};
use crate::local::{build_local_volume, local_volume_values};
use crate::nn::{Adam, Graph, NamedGradients, ParameterStore};
use crate::render::{render_batch, render_image};
use crate::scene::{psnr, SceneDataset, SceneSplit};

use super::loss::{rendered_rgb_loss, sample_pixel_batch, sample_pixel_batch_multi};
use super::{StageConfig, TrainConfig, TrainError, GRID_FEATURES};

/// One mid-stage evaluation.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EvalPoint {
    pub iteration: usize,
    pub psnr: f64,
}

/// What a stage did: every per-iteration loss, the evaluations, and whether
/// the PSNR target ended the stage early.
#[derive(Debug, Clone, Serialize)]
pub struct StageReport {
    pub stage: &'static str,
    pub iterations_run: usize,
    pub losses: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    pub stopped_early: bool,
    pub wall_seconds: f64,
}

impl StageReport {
    fn new(stage: &'static str) -> Self {
        Self {
            stage,
            iterations_run: 0,
            losses: Vec::new(),
            evals: Vec::new(),
            stopped_early: false,
            wall_seconds: 0.0,
        }
    }

    /// Highest PSNR any evaluation reached.
    pub fn best_psnr(&self) -> Option<f64> {
        self.evals.iter().map(|e| e.psnr).fold(None, |acc, p| {
            Some(acc.map_or(p, |a: f64| a.max(p)))
        })
    }

    /// Mean of the most recent `n` losses.
    pub fn recent_loss(&self, n: usize) -> Option<f64> {
        if self.losses.is_empty() {
            return None;
        }
        let tail = &self.losses[self.losses.len().saturating_sub(n)..];
        Some(tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

/// Per-dataset constants a stage loop reuses every iteration.
struct StageData {
    /// Dataset indices of the training frames, in capture order.
    train: Vec<usize>,
    /// For each training frame: its view first, then its neighbor views.
    frame_views: Vec<Vec<CameraView>>,
    gspec: GridSpec,
    clip: Option<(Vector3<f64>, Vector3<f64>)>,
}

/// Owns the parameters, optimizer and randomness of a training run and
/// drives the three stages. All stochastic choices flow through one
/// counter-based generator, so runs are bit-reproducible and resumable.
pub struct Trainer<T: Real> {
    pub cfg: TrainConfig,
    pub store: ParameterStore<T>,
    pub opt: Adam<T>,
    pub rng: ChaCha8Rng,
}

impl<T: Real> Trainer<T> {
    /// Fresh run: parameters initialized from the config seed.
    pub fn new(cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        cfg.model.register(&mut store, &mut rng)?;
        let opt = Adam::new(cfg.adam);
        Ok(Self { cfg, store, opt, rng })
    }

    /// Reassemble a trainer from checkpointed state.
    pub fn from_parts(
        cfg: TrainConfig,
        store: ParameterStore<T>,
        opt: Adam<T>,
        rng: ChaCha8Rng,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        Ok(Self { cfg, store, opt, rng })
    }

    /// Lattice the volumes for this dataset live on: anchored at the scene's
    /// lower bound, voxel size from the manifest, model feature width.
    pub fn grid_spec_for(&self, ds: &SceneDataset) -> Result<GridSpec, TrainError> {
        let (lo, _) = ds.bounds();
        Ok(GridSpec::new(lo, ds.manifest.voxel_size, self.cfg.model.channels())?)
    }

    fn stage_data(&self, ds: &SceneDataset) -> Result<StageData, TrainError> {
        let train = ds.indices_of(SceneSplit::Train);
        if train.is_empty() {
            return Err(TrainError::BadConfig("dataset has no training frames".into()));
        }
        let poses: Vec<CameraPose> = train.iter().map(|&i| ds.views[i].pose).collect();
        let mut frame_views = Vec::with_capacity(train.len());
        for pos in 0..train.len() {
            let sel = select_neighbor_views(
                &poses,
                pos,
                self.cfg.model.local.neighbor_views,
                NeighborOrder::Temporal,
            )?;
            frame_views.push(sel.into_iter().map(|p| ds.views[train[p]].clone()).collect());
        }
        Ok(StageData {
            train,
            frame_views,
            gspec: self.grid_spec_for(ds)?,
            clip: Some(ds.bounds()),
        })
    }

    /// Apply one optimizer step over a gradient map. Gradients whose name
    /// matches `extra` update that tensor instead of the parameter store.
    fn apply_updates(
        &mut self,
        grads: &NamedGradients<T>,
        lr: f64,
        mut extra: Option<(&str, &mut Tensor<T>)>,
    ) -> Result<(), TrainError> {
        if self.opt.config().lr != lr {
            self.opt.set_lr(lr);
        }
        self.opt.begin_step();
        for (name, grad) in grads.iter() {
            if let Some((xname, tensor)) = extra.as_mut() {
                if name == *xname {
                    self.opt.update(name, tensor, grad)?;
                    continue;
                }
            }
            let param = self.store.get_mut(name)?;
            self.opt.update(name, param, grad)?;
        }
        Ok(())
    }

    // ----- evaluation -----

    /// Mean PSNR over `frames`, rendering each frame from a grid.
    pub fn eval_grid_psnr(
        &self,
        grid: &SparseVoxelGrid<T>,
        ds: &SceneDataset,
        frames: &[usize],
    ) -> Result<f64, TrainError> {
        if frames.is_empty() {
            return Err(TrainError::BadConfig("evaluation needs at least one frame".into()));
        }
        let mut sum = 0.0;
        for &f in frames {
            let view = &ds.views[f];
            let gt = view
                .image
                .as_ref()
                .ok_or_else(|| TrainError::BadConfig(format!("frame {f} has no image")))?;
            let out = render_image(&self.store, &self.cfg.model.decoder, grid, view, &self.cfg.render)?;
            sum += psnr(out.image.mse(gt)?);
        }
        Ok(sum / frames.len() as f64)
    }

    /// Mean PSNR over the training frames, each rendered from its own local
    /// volume (no fusion involved).
    pub fn eval_local_psnr(&self, ds: &SceneDataset) -> Result<f64, TrainError> {
        let data = self.stage_data(ds)?;
        let mut sum = 0.0;
        for (pos, &f) in data.train.iter().enumerate() {
            let grid = local_volume_values(
                &self.store,
                &self.cfg.model.local,
                &data.gspec,
                &data.frame_views[pos],
                data.clip,
            )?;
            let view = &ds.views[f];
            let gt = view.image.as_ref().expect("training frames carry images");
            let out = render_image(&self.store, &self.cfg.model.decoder, &grid, view, &self.cfg.render)?;
            sum += psnr(out.image.mse(gt)?);
        }
        Ok(sum / data.train.len() as f64)
    }

    /// Render one frame from its own local volume.
    pub fn render_local_frame(
        &self,
        ds: &SceneDataset,
        frame: usize,
        view: &CameraView,
    ) -> Result<crate::render::RenderedImage, TrainError> {
        let data = self.stage_data(ds)?;
        let pos = data
            .train
            .iter()
            .position(|&f| f == frame)
            .ok_or_else(|| TrainError::BadConfig(format!("frame {frame} is not a training frame")))?;
        let grid = local_volume_values(
            &self.store,
            &self.cfg.model.local,
            &data.gspec,
            &data.frame_views[pos],
            data.clip,
        )?;
        Ok(render_image(&self.store, &self.cfg.model.decoder, &grid, view, &self.cfg.render)?)
    }

    // ----- inference -----

    /// Fuse all training frames in capture order into one global volume.
    pub fn reconstruct(&self, ds: &SceneDataset) -> Result<SparseVoxelGrid<T>, TrainError> {
        let data = self.stage_data(ds)?;
        let mut global: Option<SparseVoxelGrid<T>> = None;
        for pos in 0..data.train.len() {
            let local = local_volume_values(
                &self.store,
                &self.cfg.model.local,
                &data.gspec,
                &data.frame_views[pos],
                data.clip,
            )?;
            global = Some(fuse_values(
                &self.store,
                &self.cfg.model.fusion,
                global.as_ref(),
                &local,
            )?);
        }
        global.ok_or_else(|| TrainError::BadConfig("nothing to reconstruct".into()))
    }

    // ----- stage one: per-frame local volumes -----

    /// Train encoder, volume builder and decoder by rendering random rays of
    /// a random training frame from that frame's local volume. Evaluation is
    /// the mean train-view PSNR from local volumes.
    pub fn train_local(
        &mut self,
        ds: &SceneDataset,
        start_iter: usize,
    ) -> Result<StageReport, TrainError> {
        let stage = self.cfg.local.clone();
        let data = self.stage_data(ds)?;
        let start = Instant::now();
        let mut report = StageReport::new("local");
        for it in start_iter..stage.iterations {
            let pos = self.rng.gen_range(0..data.train.len());
            let frame = data.train[pos];
            let batch =
                sample_pixel_batch::<T>(&ds.views[frame], stage.rays_per_batch, &mut self.rng)?;
            let mut g = Graph::new(&self.store);
            let vol = build_local_volume(
                &mut g,
                &self.cfg.model.local,
                &data.gspec,
                &data.frame_views[pos],
                data.clip,
            )?;
            let rendered = render_batch(
                &mut g,
                &self.cfg.model.decoder,
                vol.features,
                &data.gspec,
                &vol.set,
                &batch.rays,
                &self.cfg.render,
                Some(&mut self.rng),
            )?;
            let loss = rendered_rgb_loss(&mut g, rendered, &batch.rgb)?;
            let loss_val = g.tape.value(loss).item().to_f64();
            if !loss_val.is_finite() {
                return Err(TrainError::NonFiniteLoss(it));
            }
            let grads = g.backward(loss)?;
            drop(g);
            self.apply_updates(&grads, stage.lr, None)?;
            report.losses.push(loss_val);
            report.iterations_run = it + 1 - start_iter;

            if due(it, &stage) {
                let p = self.eval_local_psnr(ds)?;
                report.evals.push(EvalPoint { iteration: it + 1, psnr: p });
                log::info!(
                    "local it {}: loss {:.5}, train-view psnr {p:.2} dB",
                    it + 1,
                    report.recent_loss(100).unwrap_or(loss_val)
                );
                if stage.psnr_target.is_some_and(|t| p >= t) {
                    report.stopped_early = true;
                    break;
                }
            }
        }
        report.wall_seconds = start.elapsed().as_secs_f64();
        Ok(report)
    }

    // ----- stage two: end-to-end recurrent fusion -----

    /// Train everything through the recurrence. Each iteration fuses a
    /// window of consecutive training frames on the tape (earlier frames are
    /// fused without gradients and enter as constants), renders rays from
    /// all frames fused so far against the final global volume, and adds a
    /// smaller per-frame local-render term. Evaluation reconstructs the full
    /// sequence and scores held-out views.
    pub fn train_fused(
        &mut self,
        ds: &SceneDataset,
        start_iter: usize,
    ) -> Result<StageReport, TrainError> {
        let stage = self.cfg.fuse.clone();
        let data = self.stage_data(ds)?;
        let heldout = ds.indices_of(SceneSplit::Heldout);
        let wlen = self.cfg.tbptt_window.min(data.train.len());
        let local_rays = (stage.rays_per_batch / (2 * wlen)).max(8);
        let global_rays = stage.rays_per_batch.div_ceil(2);
        let start = Instant::now();
        let mut report = StageReport::new("fuse");
        for it in start_iter..stage.iterations {
            let s = self.rng.gen_range(0..=data.train.len() - wlen);

            // Gradient-free warm-up: fuse frames before the window so the
            // window starts from a realistic global state.
            let mut prefix: Option<SparseVoxelGrid<T>> = None;
            for pos in 0..s {
                let local = local_volume_values(
                    &self.store,
                    &self.cfg.model.local,
                    &data.gspec,
                    &data.frame_views[pos],
                    data.clip,
                )?;
                prefix = Some(fuse_values(
                    &self.store,
                    &self.cfg.model.fusion,
                    prefix.as_ref(),
                    &local,
                )?);
            }

            let mut g = Graph::new(&self.store);
            let mut gstate = prefix.map(|p| {
                let (_, set, feats) = p.into_parts();
                (set, g.tape.constant(feats))
            });
            let mut local_losses = Vec::with_capacity(wlen);
            for pos in s..s + wlen {
                let frame = data.train[pos];
                let batch =
                    sample_pixel_batch::<T>(&ds.views[frame], local_rays, &mut self.rng)?;
                let vol = build_local_volume(
                    &mut g,
                    &self.cfg.model.local,
                    &data.gspec,
                    &data.frame_views[pos],
                    data.clip,
                )?;
                let rendered = render_batch(
                    &mut g,
                    &self.cfg.model.decoder,
                    vol.features,
                    &data.gspec,
                    &vol.set,
                    &batch.rays,
                    &self.cfg.render,
                    Some(&mut self.rng),
                )?;
                local_losses.push(rendered_rgb_loss(&mut g, rendered, &batch.rgb)?);
                let fused = crate::fusion::fuse_step(
                    &mut g,
                    &self.cfg.model.fusion,
                    gstate.as_ref().map(|(set, feats)| (set, *feats)),
                    (&vol.set, vol.features),
                )?;
                gstate = Some((fused.set, fused.features));
            }
            let (gset, gfeat) = gstate.expect("window is non-empty");

            // Rays from every frame fused so far, rendered from the final
            // global state: new content must appear, old content must stay.
            let fused_views: Vec<&CameraView> =
                data.train[..s + wlen].iter().map(|&f| &ds.views[f]).collect();
            let batch = sample_pixel_batch_multi::<T>(&fused_views, global_rays, &mut self.rng)?;
            let rendered = render_batch(
                &mut g,
                &self.cfg.model.decoder,
                gfeat,
                &data.gspec,
                &gset,
                &batch.rays,
                &self.cfg.render,
                Some(&mut self.rng),
            )?;
            let gloss = rendered_rgb_loss(&mut g, rendered, &batch.rgb)?;

            let mut lsum = local_losses[0];
            for &ll in &local_losses[1..] {
                lsum = g.tape.add(lsum, ll)?;
            }
            let lmean = g.tape.affine(lsum, 1.0 / wlen as f64, 0.0);
            let total = g.tape.add(gloss, lmean)?;
            let loss_val = g.tape.value(total).item().to_f64();
            if !loss_val.is_finite() {
                return Err(TrainError::NonFiniteLoss(it));
            }
            let grads = g.backward(total)?;
            drop(g);
            self.apply_updates(&grads, stage.lr, None)?;
            report.losses.push(loss_val);
            report.iterations_run = it + 1 - start_iter;

            if due(it, &stage) && !heldout.is_empty() {
                let grid = self.reconstruct(ds)?;
                let p = self.eval_grid_psnr(&grid, ds, &heldout)?;
                report.evals.push(EvalPoint { iteration: it + 1, psnr: p });
                log::info!(
                    "fuse it {}: loss {:.5}, held-out psnr {p:.2} dB",
                    it + 1,
                    report.recent_loss(100).unwrap_or(loss_val)
                );
                if stage.psnr_target.is_some_and(|t| p >= t) {
                    report.stopped_early = true;
                    break;
                }
            }
        }
        report.wall_seconds = start.elapsed().as_secs_f64();
        Ok(report)
    }

    // ----- stage three: per-scene fine-tuning -----

    /// Decode the density at the eight interior probe points of every voxel
    /// (canonical viewing direction), row-major `[V * 8]`.
    pub fn probe_densities(&self, grid: &SparseVoxelGrid<T>) -> Result<Vec<f64>, TrainError> {
        let coords = grid.set().coords();
        let mut out = Vec::with_capacity(coords.len() * 8);
        for chunk in coords.chunks(1024) {
            let mut rows = Vec::with_capacity(chunk.len() * 8);
            for &c in chunk {
                for p in interior_probe_points(grid.spec(), c) {
                    let taps = trilinear_taps(grid.spec(), grid.set(), &p);
                    rows.push(
                        taps.taps.iter().map(|&(r, w)| (r, T::from_f64(w))).collect::<Vec<_>>(),
                    );
                }
            }
            let n = rows.len();
            let mut g = Graph::new(&self.store);
            let feats = g.tape.input(grid.features().clone());
            let sampled = g.tape.gather(feats, Arc::new(GatherPlan::new(rows)))?;
            let mut dirs = Tensor::zeros(&[n, 3]);
            for r in 0..n {
                dirs.set(r, 2, T::one());
            }
            let dirs = g.tape.constant(dirs);
            let (sigma, _) = self.cfg.model.decoder.forward(&mut g, sampled, dirs)?;
            out.extend(g.tape.value(sigma).data().iter().map(|s| s.to_f64()));
        }
        Ok(out)
    }

    /// Prune transparent voxels, then split every survivor into eight
    /// children at half the voxel size. Optimizer moments follow the rows.
    pub fn refine_grid(&mut self, grid: &mut SparseVoxelGrid<T>) -> Result<(usize, usize), TrainError> {
        let probes = self.probe_densities(grid)?;
        let (pruned, reportp) =
            prune_grid(grid, &probes, self.cfg.finetune.prune_transparency)?;
        self.opt.remap_rows(GRID_FEATURES, &reportp.kept_rows);
        let removed = reportp.removed.len();
        let (next, parents) = subdivide_grid(&pruned)?;
        self.opt.remap_rows(GRID_FEATURES, &parents);
        let len = next.len();
        *grid = next;
        Ok((removed, len))
    }

    /// Optimize the grid's features and the decoder against training-frame
    /// rays. At the start of every iteration listed in `refine_at`, the grid
    /// is pruned and subdivided. Evaluation scores held-out views from the
    /// current grid.
    pub fn finetune(
        &mut self,
        grid: &mut SparseVoxelGrid<T>,
        ds: &SceneDataset,
        start_iter: usize,
    ) -> Result<StageReport, TrainError> {
        let stage = self.cfg.finetune.stage.clone();
        let refine_at = self.cfg.finetune.refine_at.clone();
        let data = self.stage_data(ds)?;
        let heldout = ds.indices_of(SceneSplit::Heldout);
        let train_views: Vec<&CameraView> =
            data.train.iter().map(|&f| &ds.views[f]).collect();
        let start = Instant::now();
        let mut report = StageReport::new("finetune");
        for it in start_iter..stage.iterations {
            if refine_at.contains(&it) {
                let (removed, voxels) = self.refine_grid(grid)?;
                log::info!(
                    "finetune it {it}: pruned {removed} voxels, subdivided to {voxels} at size {}",
                    grid.spec().voxel_size
                );
            }
            let batch =
                sample_pixel_batch_multi::<T>(&train_views, stage.rays_per_batch, &mut self.rng)?;
            let mut g = Graph::new(&self.store);
            let feats = g.variable(GRID_FEATURES, grid.features().clone())?;
            let rendered = render_batch(
                &mut g,
                &self.cfg.model.decoder,
                feats,
                grid.spec(),
                grid.set(),
                &batch.rays,
                &self.cfg.render,
                Some(&mut self.rng),
            )?;
            let loss = rendered_rgb_loss(&mut g, rendered, &batch.rgb)?;
            let loss_val = g.tape.value(loss).item().to_f64();
            if !loss_val.is_finite() {
                return Err(TrainError::NonFiniteLoss(it));
            }
            let grads = g.backward(loss)?;
            drop(g);
            self.apply_updates(&grads, stage.lr, Some((GRID_FEATURES, grid.features_mut())))?;
            report.losses.push(loss_val);
            report.iterations_run = it + 1 - start_iter;

            if due(it, &stage) && !heldout.is_empty() {
                let p = self.eval_grid_psnr(grid, ds, &heldout)?;
                report.evals.push(EvalPoint { iteration: it + 1, psnr: p });
                log::info!(
                    "finetune it {}: loss {:.5}, held-out psnr {p:.2} dB",
                    it + 1,
                    report.recent_loss(100).unwrap_or(loss_val)
                );
                if stage.psnr_target.is_some_and(|t| p >= t) {
                    report.stopped_early = true;
                    break;
                }
            }
        }
        report.wall_seconds = start.elapsed().as_secs_f64();
        Ok(report)
    }
}

fn due(it: usize, stage: &StageConfig) -> bool {
    stage.eval_every > 0 && (it + 1) % stage.eval_every == 0
}
