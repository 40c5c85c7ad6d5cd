use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use psfuse::camera::SceneBounds;
use psfuse::config::RunConfig;
use psfuse::field::Checkpoint;
use psfuse::mesh::{evaluate, read_mesh, write_mesh, ExclusionRegions};
use psfuse::pipeline::{extract_mesh, run_pipeline, MESH_FILE};
use psfuse::synth::{generate, write_dataset, SceneRegistry};
use psfuse::view::{load_scene, Scene};
use psfuse::{Error, ErrorKind, Result};

#[derive(Parser)]
#[command(name = "psfuse", version, about = "Fuse per-view normal and reflectance maps into a surface")]
struct Cli {
    /// Run configuration (JSON). Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Top-level seed; every stage seed derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "PSFUSE_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    Synth(SynthArgs),
    /// Run the full pipeline on a scene manifest.
    Fuse(FuseArgs),
    /// Extract a mesh from a checkpoint.
    Extract(ExtractArgs),
    /// Compare a mesh against ground truth.
    Eval(EvalArgs),
    /// Run the pipeline with individual features disabled.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    scene: Option<String>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    res: Option<usize>,
    /// Normal noise standard deviation in degrees.
    #[arg(long)]
    noise_deg: Option<f64>,
    /// Noisy estimates per pixel for the median.
    #[arg(long)]
    trials: Option<usize>,
    /// Per-view reflectance scales drawn from [MIN, MAX].
    #[arg(long, num_args = 2, value_names = ["MIN", "MAX"])]
    scale_range: Option<Vec<f64>>,
}

#[derive(Args, Clone)]
struct TrainFlags {
    #[arg(long)]
    iters: Option<usize>,
    /// Eikonal weight.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Uncertainty threshold in degrees.
    #[arg(long)]
    tau: Option<f64>,
    /// Grid points per axis for the extracted mesh.
    #[arg(long)]
    mesh_res: Option<usize>,
}

#[derive(Args)]
struct FuseArgs {
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
    /// Use r = 1 everywhere (normals only).
    #[arg(long)]
    no_reflectance: bool,
    /// One canonical lighting triplet per view instead of per pixel.
    #[arg(long)]
    no_optimal_lighting: bool,
    /// Keep every pixel regardless of uncertainty.
    #[arg(long)]
    no_uncertainty: bool,
}

#[derive(Args)]
struct ExtractArgs {
    checkpoint: PathBuf,
    /// Scene manifest supplying the world bounds (default: unit sphere).
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    res: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    estimate: PathBuf,
    ground_truth: PathBuf,
    /// Scene manifest whose cameras enable MAE and the visibility segment.
    #[arg(long)]
    cameras: Option<PathBuf>,
    /// JSON spheres/boxes; ground-truth vertices inside are dropped.
    #[arg(long)]
    exclude: Option<PathBuf>,
    /// Directory for metrics.csv and metrics.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
    /// Ground-truth mesh (default: the one named in the manifest).
    #[arg(long)]
    gt: Option<PathBuf>,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::read(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(threads) = cli.threads {
        config.threads = Some(threads);
    }
    Ok(config)
}

fn apply_train_flags(config: &mut RunConfig, flags: &TrainFlags) {
    if let Some(v) = flags.iters {
        config.trainer.iterations = v;
    }
    if let Some(v) = flags.lambda {
        config.trainer.eikonal_weight = v;
    }
    if let Some(v) = flags.batch {
        config.trainer.batch_size = v;
    }
    if let Some(v) = flags.tau {
        config.pipeline.uncertainty_threshold_deg = v;
    }
    if let Some(v) = flags.mesh_res {
        config.pipeline.mesh_resolution = v;
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn synth(mut config: RunConfig, args: &SynthArgs) -> Result<()> {
    let s = &mut config.scene;
    if let Some(v) = &args.scene {
        s.scene = v.clone();
    }
    if let Some(v) = args.views {
        s.views = v;
    }
    if let Some(v) = args.res {
        s.resolution = v;
    }
    if let Some(v) = args.noise_deg {
        s.noise.normal_sigma_deg = v;
    }
    if let Some(v) = args.trials {
        s.noise.trials = v;
    }
    if let Some(v) = &args.scale_range {
        s.scale_range = Some([v[0], v[1]]);
    }
    config.validate()?;
    let resolved = config.resolved_synth();
    let data = generate(&resolved, &SceneRegistry::default())?;
    let manifest = write_dataset(&args.out, &data)?;
    let config_path = args.out.join("run_config.json");
    std::fs::write(&config_path, serde_json::to_string_pretty(&config)?).map_err(|e| Error::io(&config_path, e))?;
    println!("seed {} (generator seed {})", config.seed, resolved.seed);
    println!("{}", manifest.display());
    Ok(())
}

fn fuse_config(mut config: RunConfig, args: &FuseArgs) -> Result<RunConfig> {
    apply_train_flags(&mut config, &args.train);
    if args.no_reflectance {
        config.pipeline.use_reflectance = false;
    }
    if args.no_optimal_lighting {
        config.pipeline.lighting = "view-canonical".into();
    }
    if args.no_uncertainty {
        config.pipeline.use_uncertainty = false;
    }
    config.validate()?;
    Ok(config)
}

/// Runs the pipeline into `out` and embeds the effective configuration.
fn fuse_scene(scene: &Scene, config: &RunConfig, out: &Path) -> Result<psfuse::pipeline::PipelineOutput> {
    create_dir(out)?;
    let mut output = run_pipeline(scene, &config.resolved_pipeline(), Some(out))?;
    output
        .report
        .embed_config(serde_json::to_value(config)?, Some(out))?;
    Ok(output)
}

fn fuse(config: RunConfig, args: &FuseArgs) -> Result<()> {
    let config = fuse_config(config, args)?;
    let scene = load_scene(&args.manifest)?;
    let out = fuse_scene(&scene, &config, &args.out)?;
    println!(
        "{} vertices, {} triangles -> {}",
        out.mesh.vertices.len(),
        out.mesh.triangles.len(),
        args.out.join(MESH_FILE).display()
    );
    Ok(())
}

fn extract(args: &ExtractArgs) -> Result<()> {
    let checkpoint = Checkpoint::read(&args.checkpoint)?;
    let scene = match &args.scene {
        Some(path) => load_scene(path)?,
        None => Scene::from_world_views(Vec::new(), SceneBounds::unit()),
    };
    if args.res < 2 {
        return Err(Error::Config("--res needs at least 2 grid points".into()));
    }
    let mesh = extract_mesh(&checkpoint.surface, args.res, &scene)?;
    write_mesh(&args.out, &mesh)?;
    println!("{} vertices, {} triangles", mesh.vertices.len(), mesh.triangles.len());
    Ok(())
}

fn eval(config: RunConfig, args: &EvalArgs) -> Result<()> {
    config.eval.validate()?;
    let estimate = read_mesh(&args.estimate)?;
    let gt = read_mesh(&args.ground_truth)?;
    let cameras = match &args.cameras {
        Some(path) => load_scene(path)?.world_cameras(),
        None => Vec::new(),
    };
    let exclusions = args.exclude.as_deref().map(ExclusionRegions::read).transpose()?;
    let report = evaluate(&estimate, &gt, &cameras, exclusions.as_ref(), &config.resolved_eval())?;
    create_dir(&args.out)?;
    report.write(&args.out.join("metrics.csv"), &args.out.join("metrics.json"))?;
    print!("{}", report.csv());
    Ok(())
}

const ABLATIONS: [&str; 4] = ["full", "no-reflectance", "no-optimal-lighting", "no-uncertainty"];

fn ablate(mut config: RunConfig, args: &AblateArgs) -> Result<()> {
    apply_train_flags(&mut config, &args.train);
    config.validate()?;
    let scene = load_scene(&args.manifest)?;
    let gt_path = args.gt.clone().or_else(|| scene.gt_mesh.clone());
    let gt = gt_path.as_deref().map(read_mesh).transpose()?;
    let cameras = scene.world_cameras();
    create_dir(&args.out)?;

    let mut csv = String::from("variant,status,chamfer,mae_deg,training_pixels,detail\n");
    for name in ABLATIONS {
        let mut variant = config.clone();
        match name {
            "no-reflectance" => variant.pipeline.use_reflectance = false,
            "no-optimal-lighting" => variant.pipeline.lighting = "view-canonical".into(),
            "no-uncertainty" => variant.pipeline.use_uncertainty = false,
            _ => {}
        }
        let t0 = Instant::now();
        let row = fuse_scene(&scene, &variant, &args.out.join(name)).and_then(|out| {
            let metrics = match &gt {
                Some(gt) => Some(evaluate(&out.mesh, gt, &cameras, None, &variant.resolved_eval())?),
                None => None,
            };
            Ok((out, metrics))
        });
        match row {
            Ok((out, metrics)) => {
                let chamfer = metrics.as_ref().map_or(String::new(), |m| format!("{}", m.chamfer.chamfer));
                let mae = metrics
                    .as_ref()
                    .and_then(|m| m.mae_deg)
                    .map_or(String::new(), |v| format!("{v}"));
                csv.push_str(&format!(
                    "{name},ok,{chamfer},{mae},{},\n",
                    out.report.pixels.training
                ));
                log::info!("{name}: done in {:.1} s", t0.elapsed().as_secs_f64());
            }
            Err(e) => {
                log::error!("{name}: {e}");
                let detail = e.to_string().replace(['"', '\n'], " ");
                csv.push_str(&format!("{name},failed,,,,\"{detail}\"\n"));
            }
        }
    }
    let path = args.out.join("ablation.csv");
    std::fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
    print!("{csv}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli)?;
    if let Some(n) = config.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Synth(args) => synth(config, args),
        Command::Fuse(args) => fuse(config, args),
        Command::Extract(args) => extract(args),
        Command::Eval(args) => eval(config, args),
        Command::Ablate(args) => ablate(config, args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numerical => 4,
            })
        }
    }
}
