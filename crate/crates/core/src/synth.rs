//! Analytic scenes rendered into photometric-stereo style datasets.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, SceneBounds, Vec3};
use crate::config::stage_seed;
use crate::error::{Error, Result};
use crate::image::FloatImage;
use crate::mesh::{marching_cubes, write_mesh, GridBounds, TriMesh};
use crate::sdf::{sphere_trace_batch, Shape, SignedDistance, TraceOutcome, TraceParams, TraceQuery};
use crate::view::{write_scene_manifest, write_view, SceneManifest, ViewData};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Albedo {
    Constant { value: f64 },
    /// `base + amplitude * sin(frequency x) * sin(frequency y)`.
    Textured { base: f64, amplitude: f64, frequency: f64 },
}

impl Albedo {
    pub fn at(&self, p: &Vec3) -> f64 {
        match *self {
            Albedo::Constant { value } => value,
            Albedo::Textured {
                base,
                amplitude,
                frequency,
            } => base + amplitude * (frequency * p.x).sin() * (frequency * p.y).sin(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub name: String,
    pub shape: Shape,
    pub albedo: Albedo,
    pub bounds: SceneBounds,
    /// Upper bound on how far `shape` is from a true distance function.
    pub sdf_tolerance: f64,
}

pub trait ScenePreset: Send + Sync {
    fn name(&self) -> &'static str;
    fn scene(&self) -> AnalyticScene;
}

const BLOB_K: f64 = 0.05;

fn blob_shape() -> Shape {
    let s = |c: [f64; 3], r: f64| Shape::Sphere { center: c, radius: r };
    Shape::SmoothUnion {
        children: vec![
            s([0.0, 0.0, 0.0], 0.38),
            s([0.36, -0.12, 0.0], 0.22),
            s([-0.3, 0.16, 0.12], 0.22),
            s([0.02, -0.3, -0.2], 0.2),
            s([-0.08, 0.12, -0.38], 0.18),
        ],
        k: BLOB_K,
    }
}

fn unit_bounds() -> SceneBounds {
    SceneBounds::unit()
}

struct SpherePreset;
impl ScenePreset for SpherePreset {
    fn name(&self) -> &'static str {
        "sphere"
    }
    fn scene(&self) -> AnalyticScene {
        AnalyticScene {
            name: self.name().into(),
            shape: Shape::sphere(0.5),
            albedo: Albedo::Constant { value: 0.7 },
            bounds: unit_bounds(),
            sdf_tolerance: 0.0,
        }
    }
}

struct TorusPreset;
impl ScenePreset for TorusPreset {
    fn name(&self) -> &'static str {
        "torus"
    }
    fn scene(&self) -> AnalyticScene {
        AnalyticScene {
            name: self.name().into(),
            shape: Shape::Torus {
                center: [0.0; 3],
                major: 0.4,
                minor: 0.15,
            },
            albedo: Albedo::Constant { value: 0.7 },
            bounds: unit_bounds(),
            sdf_tolerance: 0.0,
        }
    }
}

struct BlobPreset;
impl ScenePreset for BlobPreset {
    fn name(&self) -> &'static str {
        "blob"
    }
    fn scene(&self) -> AnalyticScene {
        AnalyticScene {
            name: self.name().into(),
            shape: blob_shape(),
            albedo: Albedo::Constant { value: 0.7 },
            bounds: unit_bounds(),
            // The polynomial smooth minimum undershoots by at most k/4.
            sdf_tolerance: BLOB_K / 4.0,
        }
    }
}

struct TexturedBlobPreset;
impl ScenePreset for TexturedBlobPreset {
    fn name(&self) -> &'static str {
        "textured-blob"
    }
    fn scene(&self) -> AnalyticScene {
        AnalyticScene {
            name: self.name().into(),
            shape: blob_shape(),
            albedo: Albedo::Textured {
                base: 0.5,
                amplitude: 0.4,
                frequency: 8.0,
            },
            bounds: unit_bounds(),
            sdf_tolerance: BLOB_K / 4.0,
        }
    }
}

/// Name-keyed scene presets.
pub struct SceneRegistry {
    entries: BTreeMap<&'static str, Arc<dyn ScenePreset>>,
}

impl Default for SceneRegistry {
    fn default() -> Self {
        let mut r = Self {
            entries: BTreeMap::new(),
        };
        r.register(Arc::new(SpherePreset));
        r.register(Arc::new(TorusPreset));
        r.register(Arc::new(BlobPreset));
        r.register(Arc::new(TexturedBlobPreset));
        r
    }
}

impl SceneRegistry {
    pub fn register(&mut self, preset: Arc<dyn ScenePreset>) {
        self.entries.insert(preset.name(), preset);
    }

    pub fn scene(&self, name: &str) -> Result<AnalyticScene> {
        self.entries.get(name).map(|p| p.scene()).ok_or_else(|| {
            Error::Config(format!("unknown scene {name:?} (known: {})", self.names().join(", ")))
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}

/// `count` cameras evenly spaced in azimuth on a ring of the given radius,
/// raised by `elevation_deg` above the horizontal plane (world up is `-y`),
/// all looking at the origin. Azimuth 0 sits on the `-z` axis.
pub fn make_ring_cameras(
    count: usize,
    radius: f64,
    elevation_deg: f64,
    resolution: usize,
    fov_deg: f64,
) -> Result<Vec<Camera>> {
    if count < 2 {
        return Err(Error::Config(format!("a camera ring needs at least 2 views, got {count}")));
    }
    if !(radius > 0.0) || resolution == 0 || !(fov_deg > 0.0 && fov_deg < 180.0) {
        return Err(Error::Config("invalid ring radius, resolution or field of view".into()));
    }
    let focal = resolution as f64 / 2.0 / (fov_deg.to_radians() / 2.0).tan();
    let k = Camera::centered_intrinsics(focal, resolution, resolution);
    let el = elevation_deg.to_radians();
    (0..count)
        .map(|i| {
            let az = i as f64 * std::f64::consts::TAU / count as f64;
            let eye = Vec3::new(el.cos() * az.sin(), -el.sin(), -el.cos() * az.cos()) * radius;
            Camera::look_at(eye, Vec3::zeros(), -Vec3::y(), k, resolution, resolution)
        })
        .collect()
}

/// Noise-free render of one view plus per-pixel hit distances.
#[derive(Debug, Clone)]
pub struct GtView {
    pub view: ViewData,
    /// Ray parameter of the first hit; NaN for background pixels.
    pub hit_t: Vec<f64>,
    pub nonconverged: usize,
}

pub fn render_view_gt(scene: &AnalyticScene, camera: &Camera) -> Result<GtView> {
    let (w, h) = (camera.width(), camera.height());
    let mut queries = Vec::with_capacity(w * h);
    let mut pixel_of = Vec::with_capacity(w * h);
    for row in 0..h {
        for col in 0..w {
            if let Some(ray) = camera.generate_ray(&Camera::pixel_center(col, row), &scene.bounds)? {
                queries.push(TraceQuery {
                    origin: ray.origin,
                    direction: ray.direction,
                    t_near: ray.t_near,
                    t_far: ray.t_far,
                });
                pixel_of.push(row * w + col);
            }
        }
    }
    let params = TraceParams {
        max_steps: 512,
        epsilon: 1e-9,
        relaxation: 1.0,
    };
    let outcomes = sphere_trace_batch(&scene.shape, &queries, &params);
    let mut normals = vec![0f32; 3 * w * h];
    let mut reflectance = vec![0f32; w * h];
    let mut mask = vec![0f32; w * h];
    let mut hit_t = vec![f64::NAN; w * h];
    let mut nonconverged = 0;
    for ((q, outcome), &pix) in queries.iter().zip(&outcomes).zip(&pixel_of) {
        match outcome {
            TraceOutcome::Hit(t) => {
                let p = q.origin + q.direction * *t;
                let n = scene.shape.jet(&p).gradient.normalize();
                normals[3 * pix..3 * pix + 3].copy_from_slice(&[n.x as f32, n.y as f32, n.z as f32]);
                reflectance[pix] = scene.albedo.at(&p) as f32;
                mask[pix] = 1.0;
                hit_t[pix] = *t;
            }
            TraceOutcome::NoConvergence => nonconverged += 1,
            TraceOutcome::Miss => {}
        }
    }
    if nonconverged > 0 {
        log::warn!("{nonconverged} pixels did not converge and were masked out");
    }
    Ok(GtView {
        view: ViewData {
            camera: camera.clone(),
            normals: FloatImage::new(w, h, 3, normals)?,
            reflectance: Some(FloatImage::new(w, h, 1, reflectance)?),
            uncertainty: None,
            mask: Some(FloatImage::new(w, h, 1, mask)?),
        },
        hit_t,
        nonconverged,
    })
}

/// Emulated photometric-stereo error: `trials` noisy estimates per pixel
/// are reduced to their median.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseModel {
    /// Standard deviation of the normal rotation angle, degrees.
    pub normal_sigma_deg: f64,
    /// Standard deviation of the log reflectance.
    pub reflectance_sigma: f64,
    pub trials: usize,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            normal_sigma_deg: 0.0,
            reflectance_sigma: 0.0,
            trials: 100,
        }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.normal_sigma_deg >= 0.0) || !(self.reflectance_sigma >= 0.0) || self.trials == 0 {
            return Err(Error::Config("noise deviations must be >= 0 and trials > 0".into()));
        }
        Ok(())
    }

    pub fn is_noiseless(&self) -> bool {
        self.normal_sigma_deg == 0.0 && self.reflectance_sigma == 0.0
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Replaces foreground normals and reflectances by medians over noisy
/// trials and attaches the mean angular deviation from that median as the
/// uncertainty map. Each pixel draws from its own stream of `seed`, so the
/// result does not depend on scheduling.
pub fn corrupt(view: &ViewData, noise: &NoiseModel, seed: u64) -> Result<ViewData> {
    noise.validate()?;
    let (w, h) = (view.width(), view.height());
    let mut out = view.clone();
    if noise.is_noiseless() {
        out.uncertainty = Some(FloatImage::filled(w, h, 1, 0.0));
        return Ok(out);
    }
    let sigma = noise.normal_sigma_deg.to_radians();
    let results: Vec<Option<(Vec3, f64, f64)>> = (0..w * h)
        .into_par_iter()
        .map(|pix| {
            let (col, row) = (pix % w, pix / w);
            if !view.is_foreground(col, row) {
                return None;
            }
            let n0 = {
                let n = view.normals.pixel3(col, row);
                Vec3::new(n[0] as f64, n[1] as f64, n[2] as f64).normalize()
            };
            let r0 = view.reflectance_at(col, row);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(pix as u64);
            let helper = if n0.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
            let t1 = n0.cross(&helper).normalize();
            let t2 = n0.cross(&t1);
            let mut trials = Vec::with_capacity(noise.trials);
            let mut refl = Vec::with_capacity(noise.trials);
            for _ in 0..noise.trials {
                let angle: f64 = sigma * rng.sample::<f64, _>(StandardNormal);
                let phi: f64 = rng.gen::<f64>() * std::f64::consts::TAU;
                let axis = t1 * phi.cos() + t2 * phi.sin();
                // Rodrigues with axis ⟂ n.
                let n = n0 * angle.cos() + axis.cross(&n0) * angle.sin();
                trials.push(n);
                let z: f64 = StandardNormal.sample(&mut rng);
                refl.push(r0 * (noise.reflectance_sigma * z).exp());
            }
            let comp = |k: usize| median(&mut trials.iter().map(|n| n[k]).collect::<Vec<_>>());
            let med = Vec3::new(comp(0), comp(1), comp(2)).normalize();
            let unc = trials
                .iter()
                .map(|n| n.cross(&med).norm().atan2(n.dot(&med)).to_degrees())
                .sum::<f64>()
                / trials.len() as f64;
            Some((med, median(&mut refl), unc))
        })
        .collect();
    let mut uncertainty = FloatImage::filled(w, h, 1, 0.0);
    for (pix, r) in results.into_iter().enumerate() {
        let Some((n, refl, unc)) = r else { continue };
        let (col, row) = (pix % w, pix / w);
        for k in 0..3 {
            out.normals.set(col, row, k, n[k] as f32);
        }
        if let Some(map) = out.reflectance.as_mut() {
            map.set(col, row, 0, refl as f32);
        }
        uncertainty.set(col, row, 0, unc as f32);
    }
    out.uncertainty = Some(uncertainty);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub scene: String,
    pub views: usize,
    pub resolution: usize,
    pub distance: f64,
    pub elevation_deg: f64,
    pub fov_deg: f64,
    pub seed: u64,
    pub noise: NoiseModel,
    /// Per-view reflectance scale drawn log-uniformly from this range.
    pub scale_range: Option<[f64; 2]>,
    pub write_reflectance: bool,
    pub write_masks: bool,
    /// Grid points per axis for non-spherical ground-truth meshes.
    pub gt_mesh_resolution: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scene: "sphere".into(),
            views: 12,
            resolution: 64,
            distance: 3.0,
            elevation_deg: 20.0,
            fov_deg: 30.0,
            seed: 0,
            noise: NoiseModel::default(),
            scale_range: None,
            write_reflectance: true,
            write_masks: true,
            gt_mesh_resolution: 128,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        if let Some([lo, hi]) = self.scale_range {
            if !(lo > 0.0 && hi >= lo) {
                return Err(Error::Config(format!("invalid scale range [{lo}, {hi}]")));
            }
        }
        if self.gt_mesh_resolution < 2 {
            return Err(Error::Config("gt_mesh_resolution must be >= 2".into()));
        }
        Ok(())
    }
}

/// What the generator knows but a reconstruction must recover.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub scene: AnalyticScene,
    pub config: SynthConfig,
    /// Multiplier applied to each view's reflectance map.
    pub view_scales: Vec<f64>,
    pub nonconverged_pixels: usize,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub views: Vec<ViewData>,
    pub truth: SynthTruth,
    pub gt_mesh: TriMesh,
}

pub fn ground_truth_mesh(scene: &AnalyticScene, resolution: usize) -> Result<TriMesh> {
    if let Shape::Sphere { center, radius } = scene.shape {
        return Ok(TriMesh::icosphere(Vec3::from(center), radius, 6));
    }
    marching_cubes(&scene.shape, resolution, &GridBounds::around(&scene.bounds))
}

pub fn generate(config: &SynthConfig, registry: &SceneRegistry) -> Result<SynthDataset> {
    config.validate()?;
    let scene = registry.scene(&config.scene)?;
    let cameras = make_ring_cameras(
        config.views,
        config.distance,
        config.elevation_deg,
        config.resolution,
        config.fov_deg,
    )?;
    let mut scale_rng = ChaCha8Rng::seed_from_u64(stage_seed(config.seed, "synth/scales"));
    let noise_seed = stage_seed(config.seed, "synth/noise");
    let mut views = Vec::with_capacity(cameras.len());
    let mut scales = Vec::with_capacity(cameras.len());
    let mut nonconverged = 0;
    for (i, cam) in cameras.iter().enumerate() {
        let gt = render_view_gt(&scene, cam)?;
        nonconverged += gt.nonconverged;
        let mut view = corrupt(&gt.view, &config.noise, noise_seed.wrapping_add(i as u64))?;
        if config.noise.is_noiseless() {
            view.uncertainty = None;
        }
        let scale = match config.scale_range {
            Some([lo, hi]) => (lo.ln() + scale_rng.gen::<f64>() * (hi.ln() - lo.ln())).exp(),
            None => 1.0,
        };
        view.scale_reflectance(scale);
        scales.push(scale);
        if !config.write_reflectance {
            view.reflectance = None;
        }
        if !config.write_masks {
            view.mask = None;
        }
        views.push(view);
    }
    let gt_mesh = ground_truth_mesh(&scene, config.gt_mesh_resolution)?;
    Ok(SynthDataset {
        views,
        truth: SynthTruth {
            scene,
            config: config.clone(),
            view_scales: scales,
            nonconverged_pixels: nonconverged,
        },
        gt_mesh,
    })
}

/// Writes `scene.json`, one manifest plus maps per view, `gt_mesh.ply` and
/// `truth.json`; returns the scene manifest path.
pub fn write_dataset(dir: &Path, data: &SynthDataset) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::with_capacity(data.views.len());
    for (i, v) in data.views.iter().enumerate() {
        let stem = format!("view_{i:03}");
        write_view(dir, &stem, v)?;
        names.push(format!("{stem}.json"));
    }
    write_mesh(&dir.join("gt_mesh.ply"), &data.gt_mesh)?;
    let truth_path = dir.join("truth.json");
    std::fs::write(&truth_path, serde_json::to_string_pretty(&data.truth)?)
        .map_err(|e| Error::io(&truth_path, e))?;
    let manifest = SceneManifest {
        views: names,
        bounds: Some(data.truth.scene.bounds),
        reflectance_calibrated: data.truth.config.scale_range.is_none(),
        adjacency: None,
        gt_mesh: Some("gt_mesh.ply".into()),
    };
    let path = dir.join("scene.json");
    write_scene_manifest(&path, &manifest)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::view::load_scene;

    fn frontal(res: usize) -> Camera {
        make_ring_cameras(4, 3.0, 0.0, res, 30.0).unwrap().remove(0)
    }

    #[test]
    fn ring_azimuths_and_principal_rays() {
        let cams = make_ring_cameras(4, 3.0, 0.0, 32, 30.0).unwrap();
        let az: Vec<f64> = cams
            .iter()
            .map(|c| {
                let e = c.center();
                e.x.atan2(-e.z).to_degrees().rem_euclid(360.0)
            })
            .collect();
        for (a, expected) in az.iter().zip([0.0, 90.0, 180.0, 270.0]) {
            assert!((a - expected).abs() < 1e-9);
        }
        let ring = make_ring_cameras(7, 2.5, 20.0, 16, 40.0).unwrap();
        for c in &ring {
            let o = c.center();
            let d = c.forward();
            let closest = o - d * o.dot(&d);
            assert!(closest.norm() < 1e-9);
        }
        // Neighbouring baselines follow the chord of the (shrunken) ring.
        let planar = 2.5 * 20f64.to_radians().cos();
        let chord = 2.0 * planar * (std::f64::consts::PI / 7.0).sin();
        for i in 0..7 {
            let b = (ring[i].center() - ring[(i + 1) % 7].center()).norm();
            assert!((b - chord).abs() < 1e-12);
        }
        assert!(make_ring_cameras(1, 3.0, 0.0, 16, 30.0).is_err());
    }

    #[test]
    fn frontal_sphere_centre_pixel() {
        let scene = SceneRegistry::default().scene("sphere").unwrap();
        // Odd size: the centre pixel lies on the principal ray.
        let gt = render_view_gt(&scene, &frontal(33)).unwrap();
        let n = gt.view.normals.pixel3(16, 16);
        assert!(n[0].abs() < 1e-6 && n[1].abs() < 1e-6 && (n[2] + 1.0).abs() < 1e-6);
        assert_eq!(gt.view.reflectance.as_ref().unwrap().get(16, 16, 0), 0.7);
        assert_eq!(gt.view.mask.as_ref().unwrap().get(0, 0, 0), 0.0);
    }

    #[test]
    fn rendered_normals_are_unit_and_depths_match_the_quadratic() {
        let scene = SceneRegistry::default().scene("sphere").unwrap();
        let cam = make_ring_cameras(5, 3.0, 20.0, 48, 30.0).unwrap().remove(2);
        let gt = render_view_gt(&scene, &cam).unwrap();
        let mut hits = 0;
        for row in 0..48 {
            for col in 0..48 {
                let t = gt.hit_t[row * 48 + col];
                if t.is_nan() {
                    continue;
                }
                hits += 1;
                let n = gt.view.normals.pixel3(col, row);
                let norm = (n.iter().map(|&x| (x as f64).powi(2)).sum::<f64>()).sqrt();
                assert!((norm - 1.0).abs() < 1e-6);
                let o = cam.center();
                let d = cam.direction_through(&Camera::pixel_center(col, row));
                let b = o.dot(&d);
                let c = o.norm_squared() - 0.25;
                let exact = -b - (b * b - c).sqrt();
                assert!((t - exact).abs() < 1e-5);
            }
        }
        assert!(hits > 300);
    }

    #[test]
    fn noiseless_corruption_is_identity() {
        let scene = SceneRegistry::default().scene("textured-blob").unwrap();
        let gt = render_view_gt(&scene, &frontal(24)).unwrap();
        let out = corrupt(&gt.view, &NoiseModel::default(), 3).unwrap();
        assert_eq!(out.normals, gt.view.normals);
        assert_eq!(out.reflectance, gt.view.reflectance);
        assert!(out.uncertainty.unwrap().data().iter().all(|&u| u == 0.0));
    }

    #[test]
    fn uncertainty_calibration_and_masked_pixels() {
        let scene = SceneRegistry::default().scene("sphere").unwrap();
        let gt = render_view_gt(&scene, &frontal(24)).unwrap();
        let noise = |s: f64| NoiseModel {
            normal_sigma_deg: s,
            reflectance_sigma: 0.05,
            trials: 100,
        };
        let mean_unc = |v: &ViewData| {
            let u = v.uncertainty.as_ref().unwrap();
            let (mut s, mut n) = (0.0, 0);
            for row in 0..24 {
                for col in 0..24 {
                    if gt.view.is_foreground(col, row) {
                        s += u.get(col, row, 0) as f64;
                        n += 1;
                    }
                }
            }
            s / n as f64
        };
        let five = corrupt(&gt.view, &noise(5.0), 1).unwrap();
        let m5 = mean_unc(&five);
        assert!((3.0..=7.0).contains(&m5), "{m5}");
        let ten = corrupt(&gt.view, &noise(10.0), 1).unwrap();
        assert!(mean_unc(&ten) > m5);
        for row in 0..24 {
            for col in 0..24 {
                if !gt.view.is_foreground(col, row) {
                    assert_eq!(five.normals.pixel3(col, row), gt.view.normals.pixel3(col, row));
                    assert_eq!(five.uncertainty.as_ref().unwrap().get(col, row, 0), 0.0);
                }
            }
        }
        // Deterministic per seed.
        assert_eq!(corrupt(&gt.view, &noise(5.0), 1).unwrap().normals, five.normals);
    }

    #[test]
    fn dataset_roundtrip_records_scales() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            scene: "textured-blob".into(),
            views: 3,
            resolution: 16,
            scale_range: Some([0.5, 2.0]),
            gt_mesh_resolution: 24,
            ..SynthConfig::default()
        };
        let data = generate(&cfg, &SceneRegistry::default()).unwrap();
        assert!(data.truth.view_scales.iter().all(|s| (0.5..=2.0).contains(s)));
        let path = write_dataset(dir.path(), &data).unwrap();
        let scene = load_scene(&path).unwrap();
        assert_eq!(scene.views.len(), 3);
        assert!(!scene.reflectance_calibrated);
        assert!(scene.gt_mesh.unwrap().exists());
        let again = generate(&cfg, &SceneRegistry::default()).unwrap();
        assert_eq!(again.truth.view_scales, data.truth.view_scales);
    }

    #[test]
    fn unknown_scene_is_a_config_error() {
        let e = SceneRegistry::default().scene("teapot").unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }
}
