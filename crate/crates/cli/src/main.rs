//! Command-line frontend: generate synthetic scenes, train the feed-forward
//! model, reconstruct scenes incrementally, fine-tune per scene, render
//! views, and report image/depth quality.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;

use voxfusion::render::render_image;
use voxfusion::scene::{
    depth_metrics, psnr, ring_cameras, ssim, CubeRoom, DatasetOptions, GlossyRoom, SceneDataset,
    SceneModel, SceneSplit, SphereRoom,
};
use voxfusion::train::{Checkpoint, TrainConfig, Trainer};

#[derive(Parser)]
#[command(
    name = "voxfusion",
    about = "Incremental neural scene reconstruction on sparse voxel grids",
    version
)]
struct Cli {
    /// Worker threads for data generation and rendering (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Trace a synthetic scene into a dataset directory.
    GenScene(GenSceneArgs),
    /// Train the local and fusion stages on a scene.
    Train(TrainArgs),
    /// Fuse a scene into a global sparse volume with trained weights.
    Reconstruct(ReconstructArgs),
    /// Optimize a reconstructed volume against one scene.
    Finetune(FinetuneArgs),
    /// Render one frame's view from a reconstructed volume.
    Render(RenderArgs),
    /// Report image and depth quality over a dataset split.
    Eval(EvalArgs),
    /// Summarize a checkpoint file.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SceneKind {
    /// Textured room interior seen from a camera ring near its center.
    CubeRoom,
    /// Matte sphere inside a room, circled by inward-facing cameras.
    Sphere,
    /// Room with one glossy wall patch whose color shifts with view angle.
    Glossy,
}

#[derive(Args)]
struct GenSceneArgs {
    /// Dataset directory to create.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = SceneKind::CubeRoom)]
    kind: SceneKind,
    /// Number of camera poses on the ring.
    #[arg(long, default_value_t = 12)]
    frames: usize,
    /// Square image resolution in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Voxel edge length in meters, recorded in the manifest.
    #[arg(long, default_value_t = 0.1)]
    voxel: f64,
    /// Hold out every n-th frame for evaluation (0 = none).
    #[arg(long, default_value_t = 4)]
    heldout_stride: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory from gen-scene.
    #[arg(long)]
    scene: PathBuf,
    /// Checkpoint file to write.
    #[arg(long)]
    out: PathBuf,
    /// Training configuration JSON; defaults to the desk-scale preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the local stage's iteration count.
    #[arg(long)]
    local_iters: Option<usize>,
    /// Override the fusion stage's iteration count.
    #[arg(long)]
    fuse_iters: Option<usize>,
    /// Stop the local stage once train views reach this PSNR (dB).
    #[arg(long)]
    psnr_target: Option<f64>,
    /// Print the effective configuration and exit without training.
    #[arg(long)]
    dump_config: bool,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Trained checkpoint to read weights from.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Checkpoint file to write, now carrying the fused volume.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Checkpoint carrying a fused volume (from reconstruct or finetune).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Override the fine-tune stage's iteration count.
    #[arg(long)]
    iters: Option<usize>,
    /// Stop early once held-out views reach this PSNR (dB).
    #[arg(long)]
    psnr_target: Option<f64>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Frame index whose camera to render through.
    #[arg(long, default_value_t = 0)]
    frame: usize,
    /// Output PNG path.
    #[arg(long)]
    out: PathBuf,
    /// Also write the expected-depth map as a PFM file.
    #[arg(long)]
    depth: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Heldout,
    All,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Heldout)]
    split: SplitArg,
    /// Emit one JSON object instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct InspectArgs {
    checkpoint: PathBuf,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .context("initializing the worker pool")?;
    }
    match cli.command {
        Command::GenScene(args) => gen_scene(args),
        Command::Train(args) => train(args),
        Command::Reconstruct(args) => reconstruct(args),
        Command::Finetune(args) => finetune(args),
        Command::Render(args) => render(args),
        Command::Eval(args) => eval(args),
        Command::Inspect(args) => inspect(args),
    }
}

fn gen_scene(args: GenSceneArgs) -> Result<()> {
    if args.frames == 0 || args.size < 8 {
        bail!("need at least 1 frame and 8x8 images");
    }
    // Each kind pairs a room size with a camera ring that sees its content.
    let (model, lo, hi, ring_radius, inward, name): (Box<dyn SceneModel>, _, _, _, _, _) =
        match args.kind {
            SceneKind::CubeRoom => {
                let lo = Vector3::new(-1.0, -1.0, -1.0);
                let hi = Vector3::new(1.0, 1.0, 1.0);
                (Box::new(CubeRoom::textbook(lo, hi)), lo, hi, 0.4, false, "cube-room")
            }
            SceneKind::Sphere => {
                let lo = Vector3::new(-0.75, -0.75, -0.75);
                let hi = Vector3::new(0.75, 0.75, 0.75);
                let room = CubeRoom::textbook(lo, hi);
                (
                    Box::new(SphereRoom::new(room, Vector3::zeros(), 0.25)),
                    lo,
                    hi,
                    0.5,
                    true,
                    "sphere",
                )
            }
            SceneKind::Glossy => {
                let lo = Vector3::new(-0.75, -0.75, -0.75);
                let hi = Vector3::new(0.75, 0.75, 0.75);
                let room = CubeRoom::textbook(lo, hi);
                (Box::new(GlossyRoom::new(room)), lo, hi, 0.45, false, "glossy")
            }
        };
    let poses = ring_cameras(Vector3::zeros(), ring_radius, 0.05, args.frames, inward)?;
    let focal = 0.75 * args.size as f64;
    let c = args.size as f64 / 2.0;
    let intr =
        voxfusion::geometry::CameraIntrinsics::new(focal, focal, c, c, args.size, args.size)?;
    let opts = DatasetOptions {
        voxel_size: args.voxel,
        heldout_stride: args.heldout_stride,
        ..DatasetOptions::default()
    };
    let ds = SceneDataset::generate(name, model.as_ref(), &poses, intr, (lo, hi), &opts)?;
    ds.save(&args.out)?;
    println!(
        "wrote {} frames ({} train, {} held out) of {}x{} to {}",
        ds.len(),
        ds.indices_of(SceneSplit::Train).len(),
        ds.indices_of(SceneSplit::Heldout).len(),
        args.size,
        args.size,
        args.out.display()
    );
    Ok(())
}

fn load_scene(dir: &Path) -> Result<SceneDataset> {
    SceneDataset::load(dir).with_context(|| format!("loading scene from {}", dir.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint<f64>> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn report_stage(report: &voxfusion::train::StageReport) {
    let loss = report.recent_loss(50).unwrap_or(f64::NAN);
    match report.best_psnr() {
        Some(p) => log::info!(
            "{}: {} iterations{}, recent loss {loss:.3e}, best eval {p:.2} dB",
            report.stage,
            report.iterations_run,
            if report.stopped_early { " (target reached)" } else { "" },
        ),
        None => {
            log::info!("{}: {} iterations, recent loss {loss:.3e}", report.stage, report.iterations_run)
        }
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => serde_json::from_str(
            &fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?,
        )
        .context("parsing training config")?,
        None => TrainConfig::desk(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(n) = args.local_iters {
        cfg.local.iterations = n;
    }
    if let Some(n) = args.fuse_iters {
        cfg.fuse.iterations = n;
    }
    if let Some(p) = args.psnr_target {
        cfg.local.psnr_target = Some(p);
    }
    if args.dump_config {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    let ds = load_scene(&args.scene)?;
    let mut trainer = Trainer::<f64>::new(cfg)?;
    let local = trainer.train_local(&ds, 0)?;
    report_stage(&local);
    let fused = trainer.train_fused(&ds, 0)?;
    report_stage(&fused);
    let iteration = (local.iterations_run + fused.iterations_run) as u64;
    Checkpoint::capture(&trainer, "fuse", iteration, None).save(&args.out)?;
    println!("trained weights saved to {}", args.out.display());
    Ok(())
}

fn reconstruct(args: ReconstructArgs) -> Result<()> {
    let ds = load_scene(&args.scene)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let (trainer, _) = ckpt.resume()?;
    let grid = trainer.reconstruct(&ds)?;
    let heldout = ds.indices_of(SceneSplit::Heldout);
    if !heldout.is_empty() {
        let p = trainer.eval_grid_psnr(&grid, &ds, &heldout)?;
        log::info!("held-out PSNR after fusion: {p:.2} dB");
    }
    println!("fused {} voxels from {} frames", grid.len(), ds.len());
    Checkpoint::capture(&trainer, "reconstruct", 0, Some(&grid)).save(&args.out)?;
    println!("volume saved to {}", args.out.display());
    Ok(())
}

fn finetune(args: FinetuneArgs) -> Result<()> {
    let ds = load_scene(&args.scene)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let (mut trainer, grid) = ckpt.resume()?;
    let Some(mut grid) = grid else {
        bail!(
            "checkpoint {} carries no volume; run reconstruct first",
            args.checkpoint.display()
        );
    };
    if let Some(n) = args.iters {
        trainer.cfg.finetune.stage.iterations = n;
    }
    if let Some(p) = args.psnr_target {
        trainer.cfg.finetune.stage.psnr_target = Some(p);
    }
    let report = trainer.finetune(&mut grid, &ds, 0)?;
    report_stage(&report);
    Checkpoint::capture(&trainer, "finetune", report.iterations_run as u64, Some(&grid))
        .save(&args.out)?;
    println!("fine-tuned volume ({} voxels) saved to {}", grid.len(), args.out.display());
    Ok(())
}

fn render(args: RenderArgs) -> Result<()> {
    let ds = load_scene(&args.scene)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let Some(grid) = &ckpt.grid else {
        bail!("checkpoint {} carries no volume; run reconstruct first", args.checkpoint.display());
    };
    let Some(view) = ds.views.get(args.frame) else {
        bail!("frame {} out of range; scene has {} frames", args.frame, ds.len());
    };
    let out = render_image(&ckpt.params, &ckpt.config.model.decoder, grid, view, &ckpt.config.render)?;
    out.image.save_png(&args.out)?;
    println!("rendered frame {} to {}", args.frame, args.out.display());
    if let Some(path) = &args.depth {
        out.depth.save_pfm(path)?;
        println!("expected depth written to {}", path.display());
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let ds = load_scene(&args.scene)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let Some(grid) = &ckpt.grid else {
        bail!("checkpoint {} carries no volume; run reconstruct first", args.checkpoint.display());
    };
    let frames: Vec<usize> = match args.split {
        SplitArg::Train => ds.indices_of(SceneSplit::Train),
        SplitArg::Heldout => ds.indices_of(SceneSplit::Heldout),
        SplitArg::All => (0..ds.len()).collect(),
    };
    if frames.is_empty() {
        bail!("the requested split holds no frames");
    }

    #[derive(serde::Serialize)]
    struct FrameScore {
        frame: usize,
        psnr: f64,
        ssim: f64,
        depth_median_abs_err: Option<f64>,
    }
    let voxel = ds.manifest.voxel_size;
    let mut scores = Vec::with_capacity(frames.len());
    for &f in &frames {
        let view = &ds.views[f];
        let truth = view.image.as_ref().context("dataset frame without image")?;
        let out = render_image(&ckpt.params, &ckpt.config.model.decoder, grid, view, &ckpt.config.render)?;
        let p = psnr(out.image.mse(truth)?);
        let s = ssim(&out.image, truth)?;
        let d = view
            .depth
            .as_ref()
            .map(|gt| depth_metrics(&out.depth, gt, voxel).map(|r| r.median_abs_err))
            .transpose()?;
        scores.push(FrameScore { frame: f, psnr: p, ssim: s, depth_median_abs_err: d });
    }
    let mean_psnr = scores.iter().map(|s| s.psnr).sum::<f64>() / scores.len() as f64;
    let mean_ssim = scores.iter().map(|s| s.ssim).sum::<f64>() / scores.len() as f64;
    if args.json {
        #[derive(serde::Serialize)]
        struct Report {
            frames: Vec<FrameScore>,
            mean_psnr: f64,
            mean_ssim: f64,
        }
        println!(
            "{}",
            serde_json::to_string_pretty(&Report { frames: scores, mean_psnr, mean_ssim })?
        );
    } else {
        println!("frame   psnr(db)   ssim     depth err(m)");
        for s in &scores {
            match s.depth_median_abs_err {
                Some(d) => println!("{:>5}   {:>7.2}   {:.4}   {:.4}", s.frame, s.psnr, s.ssim, d),
                None => println!("{:>5}   {:>7.2}   {:.4}   -", s.frame, s.psnr, s.ssim),
            }
        }
        println!("mean    {mean_psnr:>7.2}   {mean_ssim:.4}");
    }
    Ok(())
}

fn inspect(args: InspectArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    #[derive(serde::Serialize)]
    struct GridInfo {
        voxels: usize,
        channels: usize,
        voxel_size: f64,
    }
    #[derive(serde::Serialize)]
    struct Info {
        stage: String,
        iteration: u64,
        parameters: usize,
        parameter_tensors: usize,
        optimizer_steps: u64,
        grid: Option<GridInfo>,
        seed: u64,
    }
    let info = Info {
        stage: ckpt.stage.clone(),
        iteration: ckpt.iteration,
        parameters: ckpt.params.element_count(),
        parameter_tensors: ckpt.params.len(),
        optimizer_steps: ckpt.opt.step_count(),
        grid: ckpt.grid.as_ref().map(|g| GridInfo {
            voxels: g.len(),
            channels: g.spec().channels,
            voxel_size: g.spec().voxel_size,
        }),
        seed: ckpt.config.seed,
    };
    println!("{}", serde_json::to_string_pretty(&info)?);
    Ok(())
}
