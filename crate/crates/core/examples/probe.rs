//! Scratch profiling harness (not part of the deliverable).

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use voxfusion::autodiff::Tensor;
use voxfusion::fusion::FusionSpec;
use voxfusion::grid::{GridSpec, SparseVoxelGrid, VoxelSet};
use voxfusion::local::LocalVolumeSpec;
use voxfusion::render::DecoderSpec;
use voxfusion::scene::{
    ring_cameras, CubeRoom, DatasetOptions, SceneDataset, SceneSplit, SphereRoom,
};
use voxfusion::train::{FinetuneConfig, ModelSpec, StageConfig, TrainConfig, Trainer};

fn dense_grid(ds: &SceneDataset, channels: usize, seed: u64) -> SparseVoxelGrid<f64> {
    let (lo, hi) = ds.bounds();
    let voxel = ds.manifest.voxel_size;
    let n = [
        ((hi.x - lo.x) / voxel).round() as i32,
        ((hi.y - lo.y) / voxel).round() as i32,
        ((hi.z - lo.z) / voxel).round() as i32,
    ];
    let mut coords = Vec::new();
    for x in 0..n[0] {
        for y in 0..n[1] {
            for z in 0..n[2] {
                coords.push([x, y, z]);
            }
        }
    }
    let set = VoxelSet::from_coords(coords).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let count = set.len() * channels;
    let features =
        Tensor::from_vec(&[set.len(), channels], (0..count).map(|_| r.gen_range(-0.1..0.1)).collect());
    let spec = GridSpec::new(lo, voxel, channels).unwrap();
    SparseVoxelGrid::new(spec, set, features).unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(5e-3);
    let iters: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let spv: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);
    let n_poses: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(8);
    let refine: Option<usize> = args.get(5).and_then(|s| s.parse().ok());

    let lo = Vector3::new(-0.75, -0.75, -0.75);
    let hi = Vector3::new(0.75, 0.75, 0.75);
    let scene = SphereRoom::new(CubeRoom::textbook(lo, hi), Vector3::zeros(), 0.25);
    let poses = if n_poses == 8 {
        ring_cameras(Vector3::zeros(), 0.5, 0.05, 8, true).unwrap()
    } else {
        // Spiral orbit: two azimuth turns while elevation sweeps ±40 deg.
        (0..n_poses)
            .map(|i| {
                let s = i as f64 / n_poses as f64;
                let az = s * 2.0 * std::f64::consts::TAU;
                let el = (-40.0 + 80.0 * s).to_radians();
                let eye = 0.5
                    * Vector3::new(el.cos() * az.cos(), el.sin(), el.cos() * az.sin());
                voxfusion::geometry::CameraPose::look_at(
                    eye,
                    Vector3::zeros(),
                    Vector3::new(0.0, -1.0, 0.0),
                )
                .unwrap()
            })
            .collect()
    };
    let intr = voxfusion::geometry::CameraIntrinsics::new(24.0, 24.0, 16.0, 16.0, 32, 32).unwrap();
    let opts = DatasetOptions { voxel_size: 0.1, ..DatasetOptions::default() };
    let ds = SceneDataset::generate("sphere", &scene, &poses, intr, (lo, hi), &opts).unwrap();
    let train = ds.indices_of(SceneSplit::Train);
    let heldout = ds.indices_of(SceneSplit::Heldout);

    let model = ModelSpec {
        local: LocalVolumeSpec {
            encoder_channels: vec![4],
            encoder_kernels: vec![3],
            encoder_strides: vec![2],
            depth_channels: vec![4],
            fuse_channels: vec![6, 6],
            fuse_kernels: vec![1, 3],
            max_depth: 3.0,
            neighbor_views: 2,
        },
        fusion: FusionSpec { channels: 6, gate_channels: vec![6], gate_kernels: vec![1, 3] },
        decoder: DecoderSpec { feature_channels: 6, pe_octaves: 2, hidden: vec![24, 24] },
    };
    let mut cfg = TrainConfig {
        model,
        seed: 71,
        finetune: FinetuneConfig {
            stage: StageConfig {
                iterations: iters,
                rays_per_batch: 128,
                lr,
                eval_every: 0,
                psnr_target: None,
            },
            refine_at: refine.map(|r| vec![r]).unwrap_or_default(),
            prune_transparency: 0.6,
        },
        ..TrainConfig::desk()
    };
    if spv > 0 {
        cfg.render.samples_per_voxel = spv;
    }
    println!(
        "lr={lr} iters={iters} spv={} near={} far={} bg={:?}",
        cfg.render.samples_per_voxel, cfg.render.near, cfg.render.far, cfg.render.background
    );
    let mut trainer = Trainer::<f64>::new(cfg).unwrap();
    let mut grid = dense_grid(&ds, 6, 72);

    let t0 = std::time::Instant::now();
    let report = trainer.finetune(&mut grid, &ds, 0).unwrap();
    let train_psnr = trainer.eval_grid_psnr(&grid, &ds, &train).unwrap();
    let heldout_psnr = trainer.eval_grid_psnr(&grid, &ds, &heldout).unwrap();
    println!(
        "iters {} loss(first 20) {:.4} loss(last 100) {:.4} train {train_psnr:.2} dB heldout {heldout_psnr:.2} dB {:.0}s",
        report.iterations_run,
        report.losses[..20].iter().sum::<f64>() / 20.0,
        report.recent_loss(100).unwrap(),
        t0.elapsed().as_secs_f64()
    );

    // Density statistics: how sharp is the field?
    let probes = trainer.probe_densities(&grid).unwrap();
    let mut s: Vec<f64> = probes;
    s.sort_by(f64::total_cmp);
    let q = |p: f64| s[((s.len() - 1) as f64 * p) as usize];
    println!(
        "sigma quantiles: p10 {:.3} p50 {:.3} p90 {:.3} p99 {:.3} max {:.3}",
        q(0.10),
        q(0.50),
        q(0.90),
        q(0.99),
        s[s.len() - 1]
    );

    for &f in &train[..2] {
        let view = &ds.views[f];
        let out = voxfusion::render::render_image(
            &trainer.store,
            &trainer.cfg.model.decoder,
            &grid,
            view,
            &trainer.cfg.render,
        )
        .unwrap();
        let stats =
            voxfusion::scene::depth_metrics(&out.depth, view.depth.as_ref().unwrap(), 0.1)
                .unwrap();
        println!(
            "frame {f}: depth median {:.4} m mean {:.4} m over {} px",
            stats.median_abs_err, stats.mean_abs_err, stats.count
        );
    }
}
