//! The multi-view fusion pipeline: photometric-stereo inputs, uncertainty
//! filtering, reflectance scale alignment, radiance simulation, optimisation
//! and surface extraction.

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::camera::{Camera, Vec3};
use crate::config::stage_seed;
use crate::error::{Error, Result};
use crate::field::{Checkpoint, NeuralSurface};
use crate::image::FloatImage;
use crate::mesh::{marching_cubes, write_mesh, GridBounds, TriMesh};
use crate::reparam::{simulate_radiance, LightingRegistry, LightingStrategy};
use crate::sdf::{sphere_trace_batch, SignedDistance, TraceParams, TraceQuery};
use crate::synth::{generate, SceneRegistry, SynthConfig, SynthDataset};
use crate::trainer::{train, LogRow, TrainConfig, TrainOutputs, TrainPixel, TrainingSet};
use crate::view::{load_scene, PixelSample, Scene, ViewData};

/// Source of per-view normal, reflectance and uncertainty maps.
pub trait PsProvider: Send + Sync {
    fn name(&self) -> &'static str;
    fn provide(&self) -> Result<Scene>;
}

/// Maps produced by an external photometric-stereo method, read from disk.
pub struct DiskProvider {
    pub manifest: PathBuf,
}

impl PsProvider for DiskProvider {
    fn name(&self) -> &'static str {
        "disk"
    }

    fn provide(&self) -> Result<Scene> {
        load_scene(&self.manifest)
    }
}

/// Maps rendered from an analytic scene, optionally corrupted.
pub struct SyntheticProvider {
    pub config: SynthConfig,
}

impl SyntheticProvider {
    pub fn dataset(&self) -> Result<SynthDataset> {
        generate(&self.config, &SceneRegistry::default())
    }
}

impl PsProvider for SyntheticProvider {
    fn name(&self) -> &'static str {
        "synthetic"
    }

    fn provide(&self) -> Result<Scene> {
        let data = self.dataset()?;
        let mut scene = Scene::from_world_views(data.views, data.truth.scene.bounds);
        scene.reflectance_calibrated = data.truth.config.scale_range.is_none();
        Ok(scene)
    }
}

type ProviderCtor = fn(&serde_json::Value) -> Result<Box<dyn PsProvider>>;

/// Name-keyed providers built from JSON parameters.
pub struct ProviderRegistry {
    entries: BTreeMap<&'static str, ProviderCtor>,
}

impl Default for ProviderRegistry {
    fn default() -> Self {
        let mut r = Self {
            entries: BTreeMap::new(),
        };
        r.register("disk", |params| {
            let manifest = params
                .get("manifest")
                .and_then(|m| m.as_str())
                .ok_or_else(|| Error::Config("disk provider needs a `manifest` path".into()))?;
            Ok(Box::new(DiskProvider {
                manifest: manifest.into(),
            }))
        });
        r.register("synthetic", |params| {
            let config: SynthConfig =
                serde_json::from_value(params.clone()).map_err(|e| Error::Config(format!("synthetic provider: {e}")))?;
            Ok(Box::new(SyntheticProvider { config }))
        });
        r
    }
}

impl ProviderRegistry {
    pub fn register(&mut self, name: &'static str, ctor: ProviderCtor) {
        self.entries.insert(name, ctor);
    }

    pub fn create(&self, name: &str, params: &serde_json::Value) -> Result<Box<dyn PsProvider>> {
        let ctor = self.entries.get(name).ok_or_else(|| {
            Error::Config(format!(
                "unknown provider {name:?} (known: {})",
                self.entries.keys().copied().collect::<Vec<_>>().join(", ")
            ))
        })?;
        ctor(params)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Configured through the run's trainer section.
    #[serde(skip)]
    pub train: TrainConfig,
    /// Pixels whose uncertainty exceeds this (degrees) are not used.
    pub uncertainty_threshold_deg: f64,
    pub use_uncertainty: bool,
    /// When off, every reflectance is replaced by 1 (normals only).
    pub use_reflectance: bool,
    /// Lighting strategy name; see [`LightingRegistry`].
    pub lighting: String,
    /// Treat reflectance maps as sharing one scale even if the manifest
    /// does not say so.
    pub assume_calibrated: bool,
    /// Iterations of the geometry prepass as a fraction of the main run.
    pub prepass_fraction: f64,
    pub correspondence_rays: usize,
    pub occlusion_tolerance: f64,
    pub min_correspondences: usize,
    /// Grid points per axis for the final mesh.
    pub mesh_resolution: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            uncertainty_threshold_deg: 15.0,
            use_uncertainty: true,
            use_reflectance: true,
            lighting: "optimal".into(),
            assume_calibrated: false,
            prepass_fraction: 0.25,
            correspondence_rays: 2048,
            occlusion_tolerance: 1e-3,
            min_correspondences: 10,
            mesh_resolution: 128,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.uncertainty_threshold_deg >= 0.0) {
            return Err(Error::Config("uncertainty threshold must be >= 0".into()));
        }
        if !(self.prepass_fraction > 0.0 && self.prepass_fraction <= 1.0) {
            return Err(Error::Config("prepass_fraction must be in (0, 1]".into()));
        }
        if self.correspondence_rays == 0 || !(self.occlusion_tolerance > 0.0) {
            return Err(Error::Config("correspondence settings must be positive".into()));
        }
        if self.mesh_resolution < 2 {
            return Err(Error::Config("mesh_resolution must be >= 2".into()));
        }
        LightingRegistry::default().create(&self.lighting).map(|_| ())
    }

    fn threshold(&self) -> f64 {
        if self.use_uncertainty {
            self.uncertainty_threshold_deg
        } else {
            f64::INFINITY
        }
    }
}

/// Foreground pixels that survived filtering, plus what was removed.
#[derive(Debug, Clone)]
pub struct PixelPool {
    pub kept: Vec<Vec<PixelSample>>,
    /// Background pixels (mask supervision only).
    pub background: Vec<Vec<PixelSample>>,
    /// Per-view row-major exclusion flags.
    pub excluded: Vec<Vec<bool>>,
    pub excluded_count: usize,
}

impl PixelPool {
    pub fn kept_count(&self) -> usize {
        self.kept.iter().map(Vec::len).sum()
    }

    /// Exclusion flags as single-channel images (1 = excluded).
    pub fn exclusion_images(&self, views: &[ViewData]) -> Result<Vec<FloatImage>> {
        views
            .iter()
            .zip(&self.excluded)
            .map(|(v, ex)| {
                FloatImage::new(
                    v.width(),
                    v.height(),
                    1,
                    ex.iter().map(|&e| if e { 1.0 } else { 0.0 }).collect(),
                )
            })
            .collect()
    }
}

/// Splits pixels into the training pool and the excluded set: foreground
/// pixels with uncertainty strictly above `threshold_deg` are excluded.
/// Views without an uncertainty map pass through.
pub fn filter_uncertain(views: &[ViewData], threshold_deg: f64) -> PixelPool {
    let mut pool = PixelPool {
        kept: Vec::with_capacity(views.len()),
        background: Vec::with_capacity(views.len()),
        excluded: Vec::with_capacity(views.len()),
        excluded_count: 0,
    };
    for (vi, view) in views.iter().enumerate() {
        let mut kept = Vec::new();
        let mut background = Vec::new();
        let mut excluded = vec![false; view.width() * view.height()];
        for (i, px) in view.pixel_samples(vi).into_iter().enumerate() {
            if !px.mask {
                background.push(px);
            } else if px.uncertainty_deg > threshold_deg {
                excluded[i] = true;
                pool.excluded_count += 1;
            } else {
                kept.push(px);
            }
        }
        pool.kept.push(kept);
        pool.background.push(background);
        pool.excluded.push(excluded);
    }
    pool
}

/// Training pixels and how many inputs could not be turned into targets.
#[derive(Debug, Clone)]
pub struct Targets {
    pub set: TrainingSet,
    pub dropped: usize,
    pub missed_bounds: usize,
}

/// Builds per-pixel lighting triplets and simulated radiance targets.
/// `scales` multiply each view's reflectance; with `use_reflectance` off
/// every reflectance is 1. Background pixels only carry a mask label.
pub fn precompute_targets(
    scene: &Scene,
    pool: &PixelPool,
    lighting: &dyn LightingStrategy,
    use_reflectance: bool,
    scales: &[f64],
) -> Result<Targets> {
    let has_masks = scene.has_masks();
    let bounds = scene.bounds();
    let mut set = TrainingSet {
        views: Vec::with_capacity(scene.views.len()),
    };
    let mut dropped = 0;
    let mut missed = 0;
    for (vi, view) in scene.views.iter().enumerate() {
        let cam = &view.camera;
        let scale = scales.get(vi).copied().unwrap_or(1.0);
        let mut pixels = Vec::with_capacity(pool.kept[vi].len());
        for px in &pool.kept[vi] {
            let Some(ray) = cam.generate_ray(&px.pixel(), &bounds)? else {
                missed += 1;
                continue;
            };
            let r = if use_reflectance { px.reflectance * scale } else { 1.0 };
            let triplet = match lighting.triplet(&px.normal, cam) {
                Ok(t) if r > 0.0 && r.is_finite() => t,
                _ => {
                    dropped += 1;
                    continue;
                }
            };
            let v = simulate_radiance(r, &px.normal, &triplet).0;
            pixels.push(TrainPixel {
                view: vi,
                col: px.col,
                row: px.row,
                ray,
                lights: *triplet.matrix(),
                target: Some(v),
                mask: has_masks.then_some(true),
            });
        }
        if has_masks {
            for px in &pool.background[vi] {
                if let Some(ray) = cam.generate_ray(&px.pixel(), &bounds)? {
                    pixels.push(TrainPixel {
                        view: vi,
                        col: px.col,
                        row: px.row,
                        ray,
                        lights: nalgebra::Matrix3::identity(),
                        target: None,
                        mask: Some(false),
                    });
                }
            }
        }
        set.views.push(pixels);
    }
    if dropped > 0 {
        log::warn!("{dropped} pixels dropped: degenerate normal or non-positive reflectance");
    }
    Ok(Targets {
        set,
        dropped,
        missed_bounds: missed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRatio {
    pub pair: [usize; 2],
    /// Median of `r_first / r_second` over homologous points.
    pub ratio: f64,
    pub correspondences: usize,
    /// Too few correspondences; the ratio was set to 1.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSolution {
    /// Multipliers that bring every view to view 0's scale.
    pub scales: Vec<f64>,
    pub pairs: Vec<PairRatio>,
    /// Largest relative inconsistency along pairs not used for chaining
    /// (for a ring: the product of ratios around the loop, minus 1).
    pub loop_closure_error: f64,
}

/// Homologous reflectance ratios between the pairs of `pairs`.
///
/// Rays through foreground pixels of the first view (evenly strided over
/// the mask) are traced against `sdf`; each hit is projected into the
/// second view and kept when it lands on its foreground and the second
/// camera's own trace reaches it within `tolerance`.
pub fn pair_ratios(
    scene: &Scene,
    sdf: &dyn SignedDistance,
    pairs: &[[usize; 2]],
    rays_per_pair: usize,
    tolerance: f64,
    min_correspondences: usize,
) -> Result<Vec<PairRatio>> {
    let bounds = scene.bounds();
    let params = TraceParams {
        max_steps: 256,
        epsilon: 1e-6,
        relaxation: 0.9,
    };
    let mut out = Vec::with_capacity(pairs.len());
    for &[a, b] in pairs {
        let (va, vb) = (&scene.views[a], &scene.views[b]);
        let fg: Vec<(usize, usize)> = (0..va.height())
            .flat_map(|row| (0..va.width()).map(move |col| (col, row)))
            .filter(|&(c, r)| va.is_foreground(c, r))
            .collect();
        let stride = (fg.len() as f64 / rays_per_pair as f64).max(1.0);
        let picked: Vec<(usize, usize)> = (0..rays_per_pair.min(fg.len()))
            .map(|k| fg[((k as f64 * stride) as usize).min(fg.len() - 1)])
            .collect();
        let mut queries = Vec::with_capacity(picked.len());
        let mut origin_px = Vec::with_capacity(picked.len());
        for &(c, r) in &picked {
            if let Some(ray) = va.camera.generate_ray(&Camera::pixel_center(c, r), &bounds)? {
                queries.push(TraceQuery {
                    origin: ray.origin,
                    direction: ray.direction,
                    t_near: ray.t_near,
                    t_far: ray.t_far,
                });
                origin_px.push((c, r));
            }
        }
        let hits = sphere_trace_batch(sdf, &queries, &params);
        let mut points = Vec::new();
        let mut back = Vec::new();
        for ((q, h), &px) in queries.iter().zip(&hits).zip(&origin_px) {
            let Some(t) = h.hit() else { continue };
            let x = q.origin + q.direction * t;
            let Ok((p2, _)) = vb.camera.world_to_pixel(&x) else { continue };
            if !vb.camera.contains_pixel(&p2) {
                continue;
            }
            let (c2, r2) = (p2.x as usize, p2.y as usize);
            if !vb.is_foreground(c2, r2) {
                continue;
            }
            let o = vb.camera.center();
            let dist = (x - o).norm();
            let dir = (x - o) / dist;
            let Some((t_near, t_far)) = bounds.intersect(&o, &dir) else { continue };
            back.push(TraceQuery {
                origin: o,
                direction: dir,
                t_near: t_near.max(0.0),
                t_far,
            });
            points.push((px, (c2, r2), dist));
        }
        let seen = sphere_trace_batch(sdf, &back, &params);
        let mut ratios: Vec<f64> = Vec::new();
        for (&((c1, r1), (c2, r2), dist), s) in points.iter().zip(&seen) {
            let Some(t) = s.hit() else { continue };
            if t < dist - tolerance {
                continue;
            }
            let (ra, rb) = (va.reflectance_at(c1, r1), vb.reflectance_at(c2, r2));
            if ra > 0.0 && rb > 0.0 {
                ratios.push(ra / rb);
            }
        }
        let n = ratios.len();
        let (ratio, fallback) = if n < min_correspondences {
            log::warn!("views {a}-{b}: only {n} homologous points; assuming equal scales");
            (1.0, true)
        } else {
            ratios.sort_by(f64::total_cmp);
            let m = if n % 2 == 1 {
                ratios[n / 2]
            } else {
                0.5 * (ratios[n / 2 - 1] + ratios[n / 2])
            };
            (m, false)
        };
        out.push(PairRatio {
            pair: [a, b],
            ratio,
            correspondences: n,
            fallback,
        });
    }
    Ok(out)
}

/// Chains pair ratios multiplicatively from view 0 along a breadth-first
/// spanning tree; the remaining pairs measure loop closure.
pub fn chain_scales(view_count: usize, pairs: &[PairRatio]) -> ScaleSolution {
    let mut scales = vec![f64::NAN; view_count];
    let mut used = vec![false; pairs.len()];
    if view_count > 0 {
        scales[0] = 1.0;
    }
    let mut queue = VecDeque::from([0usize]);
    while let Some(v) = queue.pop_front() {
        for (k, p) in pairs.iter().enumerate() {
            let [a, b] = p.pair;
            // scale_b * r_b = scale_a * r_a  =>  scale_b = scale_a * (r_a / r_b).
            let next = if a == v && scales[b].is_nan() {
                Some((b, scales[a] * p.ratio))
            } else if b == v && scales[a].is_nan() {
                Some((a, scales[b] / p.ratio))
            } else {
                None
            };
            if let Some((w, s)) = next {
                scales[w] = s;
                used[k] = true;
                queue.push_back(w);
            }
        }
    }
    let unreachable = scales.iter().filter(|s| s.is_nan()).count();
    if unreachable > 0 {
        log::warn!("{unreachable} views are not connected to view 0; their scale is left at 1");
    }
    for s in &mut scales {
        if s.is_nan() {
            *s = 1.0;
        }
    }
    let loop_closure_error = pairs
        .iter()
        .zip(&used)
        .filter(|(_, &u)| !u)
        .map(|(p, _)| (scales[p.pair[0]] * p.ratio / scales[p.pair[1]] - 1.0).abs())
        .fold(0.0, f64::max);
    ScaleSolution {
        scales,
        pairs: pairs.to_vec(),
        loop_closure_error,
    }
}

/// Scale alignment from a geometry estimate: ratios over adjacent pairs,
/// then chaining from view 0.
pub fn scale_reflectances(scene: &Scene, sdf: &dyn SignedDistance, config: &PipelineConfig) -> Result<ScaleSolution> {
    let pairs = pair_ratios(
        scene,
        sdf,
        &scene.view_pairs(),
        config.correspondence_rays,
        config.occlusion_tolerance,
        config.min_correspondences,
    )?;
    Ok(chain_scales(scene.views.len(), &pairs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelCounts {
    pub foreground: usize,
    pub excluded_uncertain: usize,
    pub dropped_degenerate: usize,
    pub outside_bounds: usize,
    pub training: usize,
    pub background: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalLosses {
    pub data_per_pixel: f64,
    pub eikonal: f64,
    pub mask: f64,
    pub sharpness: f64,
}

impl FinalLosses {
    /// Averages of the last `window` logged iterations.
    fn from_history(history: &[LogRow], window: usize) -> Option<Self> {
        let tail = &history[history.len().saturating_sub(window)..];
        if tail.is_empty() {
            return None;
        }
        let n = tail.len() as f64;
        Some(Self {
            data_per_pixel: tail.iter().map(|r| r.data_loss).sum::<f64>() / n,
            eikonal: tail.iter().map(|r| r.eikonal).sum::<f64>() / n,
            mask: tail.iter().map(|r| r.mask_loss).sum::<f64>() / n,
            sharpness: tail.last().map_or(f64::NAN, |r| r.s),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    /// Stages in execution order.
    pub stages: Vec<String>,
    pub timings: Vec<StageTiming>,
    pub pixels: PixelCounts,
    pub scales: Option<ScaleSolution>,
    pub prepass_losses: Option<FinalLosses>,
    pub final_losses: Option<FinalLosses>,
    pub iterations: usize,
    pub mesh_vertices: usize,
    pub mesh_triangles: usize,
    pub config: PipelineConfig,
    pub train_config: TrainConfig,
    /// Configuration of the whole run, when the caller supplies it.
    pub effective_config: Option<serde_json::Value>,
    /// Hash of everything above except timings; equal across identical
    /// reruns.
    pub fingerprint: String,
}

impl PipelineReport {
    /// Embeds the full run configuration and rewrites the report if `dir`
    /// is given.
    pub fn embed_config(&mut self, config: serde_json::Value, dir: Option<&Path>) -> Result<()> {
        self.effective_config = Some(config);
        self.seal()?;
        if let Some(dir) = dir {
            self.write(&dir.join(REPORT_FILE))?;
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    fn seal(&mut self) -> Result<()> {
        let mut copy = self.clone();
        copy.timings.clear();
        copy.fingerprint.clear();
        let bytes = serde_json::to_vec(&copy)?;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        self.fingerprint = format!("{h:016x}");
        Ok(())
    }
}

pub struct PipelineOutput {
    pub surface: NeuralSurface,
    /// Extracted surface in world coordinates.
    pub mesh: TriMesh,
    pub report: PipelineReport,
    pub pool: PixelPool,
}

/// Output file names inside the run directory.
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const MESH_FILE: &str = "mesh.obj";
pub const REPORT_FILE: &str = "report.json";

struct StageClock {
    stages: Vec<String>,
    timings: Vec<StageTiming>,
}

impl StageClock {
    fn run<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        log::info!("stage {stage}");
        let start = Instant::now();
        let out = f().map_err(|e| e.in_stage(stage))?;
        self.stages.push(stage.to_string());
        self.timings.push(StageTiming {
            stage: stage.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(out)
    }
}

fn empty_pool_guard(targets: &Targets) -> Result<()> {
    if targets.set.views.iter().flatten().all(|p| p.target.is_none()) {
        return Err(Error::Data("no supervised pixel left after filtering".into()));
    }
    Ok(())
}

/// Extracts the zero level set of a surface (unit-sphere coordinates) and
/// maps it back to world coordinates.
pub fn extract_mesh(surface: &NeuralSurface, resolution: usize, scene: &Scene) -> Result<TriMesh> {
    let mesh = marching_cubes(&surface.sdf, resolution, &GridBounds::cube(Vec3::zeros(), 1.0))?;
    Ok(mesh.transformed(&scene.world_bounds.center(), scene.world_bounds.radius))
}

/// Runs every stage on `scene`. With `out_dir`, the checkpoint, mesh,
/// report, training logs and exclusion masks are written there.
pub fn run_pipeline(scene: &Scene, config: &PipelineConfig, out_dir: Option<&Path>) -> Result<PipelineOutput> {
    config.validate().map_err(|e| e.in_stage("config"))?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut clock = StageClock {
        stages: Vec::new(),
        timings: Vec::new(),
    };
    let lighting: Arc<dyn LightingStrategy> = LightingRegistry::default().create(&config.lighting)?;

    // Step 1 happened in the provider; step 2:
    let pool = clock.run("filter", || {
        let pool = filter_uncertain(&scene.views, config.threshold());
        if let Some(dir) = out_dir {
            let ex_dir = dir.join("exclusion");
            std::fs::create_dir_all(&ex_dir).map_err(|e| Error::io(&ex_dir, e))?;
            for (i, img) in pool.exclusion_images(&scene.views)?.iter().enumerate() {
                img.write_pfm(&ex_dir.join(format!("view_{i:03}.pfm")))?;
            }
        }
        log::info!("{} pixels kept, {} excluded as uncertain", pool.kept_count(), pool.excluded_count);
        Ok(pool)
    })?;

    // Step 3: reflectance scale alignment on a normals-only prepass.
    let needs_scaling = config.use_reflectance
        && scene.has_reflectance()
        && !scene.reflectance_calibrated
        && !config.assume_calibrated
        && scene.views.len() > 1;
    let mut prepass_losses = None;
    let scales = if needs_scaling {
        Some(clock.run("scale", || {
            let targets = precompute_targets(scene, &pool, lighting.as_ref(), false, &[])?;
            empty_pool_guard(&targets)?;
            let mut pre = config.train.clone();
            pre.iterations = ((config.train.iterations as f64 * config.prepass_fraction).ceil() as usize).max(1);
            pre.seed = stage_seed(config.train.seed, "prepass");
            let outputs = TrainOutputs {
                log_csv: out_dir.map(|d| d.join("prepass_log.csv")),
                checkpoint_dir: None,
            };
            let state = train(&targets.set, &pre, &outputs)?;
            prepass_losses = FinalLosses::from_history(&state.history, 100);
            let solution = scale_reflectances(scene, &state.surface.sdf, config)?;
            log::info!(
                "view scales {:?}, loop closure error {:.4}",
                solution.scales,
                solution.loop_closure_error
            );
            Ok(solution)
        })?)
    } else {
        None
    };

    // Step 4.
    let targets = clock.run("targets", || {
        let s = scales.as_ref().map(|s| s.scales.clone()).unwrap_or_default();
        let t = precompute_targets(scene, &pool, lighting.as_ref(), config.use_reflectance, &s)?;
        empty_pool_guard(&t)?;
        Ok(t)
    })?;

    // Step 5.
    let state = clock.run("train", || {
        let outputs = TrainOutputs {
            log_csv: out_dir.map(|d| d.join("train_log.csv")),
            checkpoint_dir: out_dir.map(Path::to_path_buf),
        };
        let state = train(&targets.set, &config.train, &outputs)?;
        if let Some(dir) = out_dir {
            Checkpoint {
                surface: state.surface.clone(),
                iteration: state.iteration as u64,
            }
            .write(&dir.join(CHECKPOINT_FILE))?;
        }
        Ok(state)
    })?;

    // Step 6.
    let mesh = clock.run("extract", || {
        let mesh = extract_mesh(&state.surface, config.mesh_resolution, scene)?;
        if let Some(dir) = out_dir {
            write_mesh(&dir.join(MESH_FILE), &mesh)?;
        }
        Ok(mesh)
    })?;

    let foreground: usize = scene
        .views
        .iter()
        .map(|v| {
            (0..v.height())
                .flat_map(|r| (0..v.width()).map(move |c| (c, r)))
                .filter(|&(c, r)| v.is_foreground(c, r))
                .count()
        })
        .sum();
    let training = targets.set.views.iter().flatten().filter(|p| p.target.is_some()).count();
    let mut report = PipelineReport {
        stages: clock.stages,
        timings: clock.timings,
        pixels: PixelCounts {
            foreground,
            excluded_uncertain: pool.excluded_count,
            dropped_degenerate: targets.dropped,
            outside_bounds: targets.missed_bounds,
            training,
            background: targets.set.pixel_count() - training,
        },
        scales,
        prepass_losses,
        final_losses: FinalLosses::from_history(&state.history, 100),
        iterations: state.iteration,
        mesh_vertices: mesh.vertices.len(),
        mesh_triangles: mesh.triangles.len(),
        config: config.clone(),
        train_config: config.train.clone(),
        effective_config: None,
        fingerprint: String::new(),
    };
    report.seal()?;
    if let Some(dir) = out_dir {
        report.write(&dir.join(REPORT_FILE))?;
    }
    Ok(PipelineOutput {
        surface: state.surface,
        mesh,
        report,
        pool,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::SceneBounds;
    use crate::reparam::{invert_radiance, LightingTriplet, OptimalLighting};
    use crate::sdf::Shape;
    use crate::synth::{make_ring_cameras, render_view_gt};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blob_scene(views: usize, res: usize, scales: &[f64]) -> Scene {
        let preset = SceneRegistry::default().scene("textured-blob").unwrap();
        let cams = make_ring_cameras(views, 3.0, 20.0, res, 30.0).unwrap();
        let views = cams
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let mut v = render_view_gt(&preset, c).unwrap().view;
                v.scale_reflectance(scales.get(i).copied().unwrap_or(1.0));
                v
            })
            .collect();
        Scene::from_world_views(views, SceneBounds::unit())
    }

    fn with_uncertainty(view: &mut ViewData, values: impl Fn(usize) -> f32) {
        let (w, h) = (view.width(), view.height());
        let data = (0..w * h).map(values).collect();
        view.uncertainty = Some(FloatImage::new(w, h, 1, data).unwrap());
    }

    #[test]
    fn filtering_thresholds_exactly() {
        let mut scene = blob_scene(2, 16, &[]);
        with_uncertainty(&mut scene.views[0], |_| 0.0);
        let pool = filter_uncertain(&scene.views, 15.0);
        assert_eq!(pool.excluded_count, 0);

        let target = 8 * 16 + 8;
        with_uncertainty(&mut scene.views[0], |i| if i == target { 20.0 } else { 3.0 });
        let pool = filter_uncertain(&scene.views, 15.0);
        assert_eq!(pool.excluded_count, 1);
        assert!(pool.excluded[0][target]);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let values: Vec<f32> = (0..256).map(|_| rng.gen_range(0.0..30.0)).collect();
        with_uncertainty(&mut scene.views[1], |i| values[i]);
        let pool = filter_uncertain(&scene.views, 15.0);
        let expected: Vec<bool> = (0..256)
            .map(|i| scene.views[1].is_foreground(i % 16, i / 16) && values[i] > 15.0)
            .collect();
        assert_eq!(pool.excluded[1], expected);
        // A larger threshold never shrinks the pool.
        let wider = filter_uncertain(&scene.views, 25.0);
        assert!(wider.kept_count() >= pool.kept_count());
    }

    #[test]
    fn targets_invert_to_the_inputs() {
        let scene = blob_scene(2, 16, &[]);
        let pool = filter_uncertain(&scene.views, 15.0);
        let t = precompute_targets(&scene, &pool, &OptimalLighting, true, &[]).unwrap();
        assert_eq!(t.dropped, 0);
        let mut checked = 0;
        for (px, tp) in pool.kept[0].iter().zip(t.set.views[0].iter().filter(|p| p.target.is_some())) {
            let l = LightingTriplet::new(tp.lights).unwrap();
            let (r, n) = invert_radiance(&crate::reparam::RadianceTriplet(tp.target.unwrap()), &l).unwrap();
            assert!((r - px.reflectance).abs() < 1e-9 * px.reflectance.max(1.0));
            assert!((n - px.normal).norm() < 1e-9);
            checked += 1;
        }
        assert!(checked > 20);
        // Normals-only mode: targets are pure shading.
        let t1 = precompute_targets(&scene, &pool, &OptimalLighting, false, &[]).unwrap();
        let p = t1.set.views[0][0];
        let l = LightingTriplet::new(p.lights).unwrap();
        let (r, _) = invert_radiance(&crate::reparam::RadianceTriplet(p.target.unwrap()), &l).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn chaining_and_loop_closure() {
        let pr = |a, b, ratio| PairRatio {
            pair: [a, b],
            ratio,
            correspondences: 100,
            fallback: false,
        };
        // True scales 1, 2, 0.5 applied to views: r_i / r_j = s_i / s_j.
        let pairs = vec![pr(0, 1, 0.5), pr(1, 2, 4.0), pr(2, 0, 0.5 * 1.02)];
        let sol = chain_scales(3, &pairs);
        assert!((sol.scales[1] - 0.5).abs() < 1e-12);
        // Breadth-first: view 2 is reached through the closing pair.
        assert!((sol.scales[2] - 1.0 / (0.5 * 1.02)).abs() < 1e-12);
        assert!((sol.loop_closure_error - 0.02).abs() < 1e-9);
    }

    #[test]
    fn exact_geometry_recovers_injected_scale() {
        let scene = blob_scene(4, 32, &[1.0, 2.0, 1.0, 1.0]);
        let shape = SceneRegistry::default().scene("textured-blob").unwrap().shape;
        let cfg = PipelineConfig::default();
        let sol = scale_reflectances(&scene, &shape, &cfg).unwrap();
        assert!(sol.pairs.iter().all(|p| !p.fallback));
        assert!((sol.scales[1] - 0.5).abs() < 0.01, "{:?}", sol.scales);
        assert!((sol.scales[2] - 1.0).abs() < 0.02, "{:?}", sol.scales);
        assert!(sol.loop_closure_error < 0.02);
        let unscaled = blob_scene(4, 32, &[]);
        let sol = scale_reflectances(&unscaled, &shape, &cfg).unwrap();
        assert!(sol.scales.iter().all(|s| (s - 1.0).abs() < 0.02));
    }

    #[test]
    fn too_few_correspondences_fall_back_to_one() {
        let scene = blob_scene(2, 16, &[1.0, 3.0]);
        // A far-away surface yields no hits at all.
        let nothing = Shape::Sphere {
            center: [50.0, 0.0, 0.0],
            radius: 0.1,
        };
        let ratios = pair_ratios(&scene, &nothing, &[[0, 1]], 256, 1e-3, 10).unwrap();
        assert!(ratios[0].fallback);
        assert_eq!(ratios[0].ratio, 1.0);
    }

    #[test]
    fn provider_registry() {
        let reg = ProviderRegistry::default();
        assert!(reg.create("sdm-unips", &serde_json::Value::Null).is_err());
        let p = reg
            .create(
                "synthetic",
                &serde_json::json!({"scene": "sphere", "views": 2, "resolution": 8, "gt_mesh_resolution": 8}),
            )
            .unwrap();
        assert_eq!(p.name(), "synthetic");
        assert_eq!(p.provide().unwrap().views.len(), 2);
        assert!(reg.create("disk", &serde_json::json!({})).is_err());
    }
}
