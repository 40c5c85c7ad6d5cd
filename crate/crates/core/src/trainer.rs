//! Stochastic optimisation of the fused objective
//! `sum ||v - v_rendered||_1 + lambda * eikonal (+ mu * mask BCE)`.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::PathBuf;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{Mat3, Ray, Vec3};
use crate::error::{Error, Result};
use crate::field::{Checkpoint, FieldConfig, NeuralSurface};
use crate::optim::Adam;
use crate::renderer::{mask_opacity, render_radiance, sample_rays, RaySeed, RecordedBatch, SamplingConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Pixels per batch, all drawn from one view.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_iterations: usize,
    /// Final learning rate as a fraction of the peak (cosine floor).
    pub lr_floor: f64,
    pub eikonal_weight: f64,
    /// Weight of the mask cross-entropy; only used when masks exist.
    pub mask_weight: f64,
    pub initial_sharpness: f64,
    pub seed: u64,
    pub sampling: SamplingConfig,
    pub field: FieldConfig,
    /// Rays per parallel work item.
    pub chunk_rays: usize,
    /// Write a checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            batch_size: 512,
            learning_rate: 5e-4,
            warmup_iterations: 500,
            lr_floor: 0.05,
            eikonal_weight: 0.1,
            mask_weight: 0.1,
            initial_sharpness: 100.0,
            seed: 0,
            sampling: SamplingConfig::default(),
            field: FieldConfig {
                init_fit_steps: 200,
                ..FieldConfig::default()
            },
            chunk_rays: 64,
            checkpoint_every: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eikonal_weight > 0.0) {
            return Err(Error::Config("eikonal_weight must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..=1.0).contains(&self.lr_floor) {
            return Err(Error::Config("learning rate must be positive with lr_floor in [0, 1]".into()));
        }
        if self.mask_weight < 0.0 {
            return Err(Error::Config("mask_weight must be non-negative".into()));
        }
        if !(self.initial_sharpness > 0.0) {
            return Err(Error::Config("initial_sharpness must be positive".into()));
        }
        if self.chunk_rays == 0 {
            return Err(Error::Config("chunk_rays must be at least 1".into()));
        }
        self.sampling.validate()?;
        self.field.validate()
    }

    /// Linear warmup, then cosine decay to `lr_floor * learning_rate`.
    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        if iteration < self.warmup_iterations {
            return self.learning_rate * (iteration + 1) as f64 / self.warmup_iterations as f64;
        }
        let span = self.iterations.saturating_sub(self.warmup_iterations).max(1);
        let progress = ((iteration - self.warmup_iterations) as f64 / span as f64).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.learning_rate * (self.lr_floor + (1.0 - self.lr_floor) * cosine)
    }
}

/// One supervised pixel: its ray, lighting triplet and simulated radiance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainPixel {
    pub view: usize,
    pub col: u32,
    pub row: u32,
    pub ray: Ray,
    /// Rows are the three light directions.
    pub lights: Mat3,
    /// `None` for background pixels, which only feed the mask term.
    pub target: Option<Vec3>,
    pub mask: Option<bool>,
}

/// Training pixels grouped by view.
#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    pub views: Vec<Vec<TrainPixel>>,
}

impl TrainingSet {
    pub fn pixel_count(&self) -> usize {
        self.views.iter().map(Vec::len).sum()
    }

    pub fn has_masks(&self) -> bool {
        self.views.iter().flatten().any(|p| p.mask.is_some())
    }
}

/// Draws one view uniformly among non-empty views, then `batch_size` pixels
/// uniformly with replacement from it.
pub fn make_batch<'a, R: Rng>(set: &'a TrainingSet, rng: &mut R, batch_size: usize) -> Result<Vec<&'a TrainPixel>> {
    let candidates: Vec<&Vec<TrainPixel>> = set.views.iter().filter(|v| !v.is_empty()).collect();
    if candidates.is_empty() {
        return Err(Error::Config("the training pixel pool is empty".into()));
    }
    let view = candidates[rng.gen_range(0..candidates.len())];
    Ok((0..batch_size).map(|_| &view[rng.gen_range(0..view.len())]).collect())
}

/// Every term of the objective. Nothing else enters the loss.
pub const LOSS_TERMS: [&str; 3] = ["data", "eikonal", "mask"];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    /// Sum over pixels of the L1 norm of the radiance residual.
    pub data: f64,
    /// Mean squared eikonal residual over all samples.
    pub eikonal: f64,
    /// Summed binary cross-entropy of accumulated opacity (0 without masks).
    pub mask: f64,
    pub total: f64,
    pub supervised_pixels: usize,
}

impl LossBreakdown {
    pub fn data_per_pixel(&self) -> f64 {
        self.data / self.supervised_pixels.max(1) as f64
    }
}

const OPACITY_CLAMP: f64 = 1e-3;

fn bce(opacity: f64, inside: bool) -> (f64, f64) {
    let o = opacity.clamp(OPACITY_CLAMP, 1.0 - OPACITY_CLAMP);
    let clamped = o != opacity;
    if inside {
        (-o.ln(), if clamped { 0.0 } else { -1.0 / o })
    } else {
        (-(1.0 - o).ln(), if clamped { 0.0 } else { 1.0 / (1.0 - o) })
    }
}

fn l1_subgradient(residual: f64) -> f64 {
    if residual > 0.0 {
        1.0
    } else if residual < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Loss and flat parameter gradient for one batch.
pub fn loss_batch<R: Rng>(
    batch: &[&TrainPixel],
    surface: &NeuralSurface,
    config: &TrainConfig,
    use_masks: bool,
    rng: &mut R,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let rays: Vec<Ray> = batch.iter().map(|p| p.ray).collect();
    let positions = sample_rays(&rays, &config.sampling, &surface.sdf, rng);
    let total_samples: usize = positions.iter().map(Vec::len).sum();
    let eikonal_scale = config.eikonal_weight / total_samples.max(1) as f64;
    let mask_weight = if use_masks { config.mask_weight } else { 0.0 };

    let chunks: Vec<(usize, usize)> = (0..batch.len())
        .step_by(config.chunk_rays)
        .map(|s| (s, (s + config.chunk_rays).min(batch.len())))
        .collect();
    let results: Vec<Result<(LossBreakdown, f64, Vec<f64>)>> = chunks
        .par_iter()
        .map(|&(start, end)| {
            let rec = RecordedBatch::render(surface, &rays[start..end], positions[start..end].to_vec());
            let mut terms = LossBreakdown::default();
            let mut seeds = Vec::with_capacity(end - start);
            for (k, set) in rec.sets.iter().enumerate() {
                let pixel = batch[start + k];
                let mut seed = RaySeed {
                    lights: pixel.lights,
                    d_radiance: Vec3::zeros(),
                    d_opacity: 0.0,
                };
                if let Some(target) = pixel.target {
                    let v = render_radiance(set, &pixel.lights);
                    let residual = v - target;
                    let l1 = residual.abs().sum();
                    if !l1.is_finite() {
                        return Err(Error::Diverged {
                            iteration: 0,
                            detail: format!(
                                "non-finite radiance for view {} pixel ({}, {})",
                                pixel.view, pixel.col, pixel.row
                            ),
                        });
                    }
                    terms.data += l1;
                    terms.supervised_pixels += 1;
                    seed.d_radiance = residual.map(l1_subgradient);
                }
                if let (Some(inside), true) = (pixel.mask, mask_weight > 0.0) {
                    let (l, d) = bce(mask_opacity(set), inside);
                    terms.mask += l;
                    seed.d_opacity = mask_weight * d;
                }
                seeds.push(seed);
            }
            let eik_sum = rec.eikonal_sum();
            let mut grad = vec![0.0; surface.param_count()];
            rec.backward(surface, &seeds, eikonal_scale, &mut grad)?;
            Ok((terms, eik_sum, grad))
        })
        .collect();

    // Reduce in chunk order so results do not depend on scheduling.
    let mut terms = LossBreakdown::default();
    let mut eik_sum = 0.0;
    let mut grad = vec![0.0; surface.param_count()];
    for r in results {
        let (t, e, g) = r?;
        terms.data += t.data;
        terms.mask += t.mask;
        terms.supervised_pixels += t.supervised_pixels;
        eik_sum += e;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    terms.eikonal = eik_sum / total_samples.max(1) as f64;
    terms.total = terms.data + config.eikonal_weight * terms.eikonal + mask_weight * terms.mask;
    Ok((terms, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogRow {
    pub iter: usize,
    pub data_loss: f64,
    pub eikonal: f64,
    pub mask_loss: f64,
    pub s: f64,
    pub lr: f64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("iter,data_loss,eikonal,mask_loss,s,lr\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.iter, r.data_loss, r.eikonal, r.mask_loss, r.s, r.lr);
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub surface: NeuralSurface,
    pub iteration: usize,
    pub optimizer: Adam,
    /// One row per iteration; data loss is per supervised pixel.
    pub history: Vec<LogRow>,
}

impl TrainState {
    pub fn new(surface: NeuralSurface) -> Self {
        let optimizer = Adam::new(surface.param_count());
        Self {
            surface,
            iteration: 0,
            optimizer,
            history: Vec::new(),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            surface: self.surface.clone(),
            iteration: self.iteration as u64,
        }
    }
}

/// Where training writes its side outputs.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub log_csv: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

pub fn initial_surface(config: &TrainConfig) -> Result<NeuralSurface> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    NeuralSurface::new(&config.field, config.initial_sharpness, &mut rng)
}

/// Runs `config.iterations` steps from a freshly initialised surface.
pub fn train(set: &TrainingSet, config: &TrainConfig, outputs: &TrainOutputs) -> Result<TrainState> {
    let state = TrainState::new(initial_surface(config)?);
    train_from(state, set, config, outputs)
}

/// Continues optimisation from `state` up to `config.iterations`.
pub fn train_from(
    mut state: TrainState,
    set: &TrainingSet,
    config: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<TrainState> {
    config.validate()?;
    if state.iteration >= config.iterations {
        return Ok(state);
    }
    if set.pixel_count() == 0 {
        return Err(Error::Config("the training pixel pool is empty".into()));
    }
    let use_masks = set.has_masks() && config.mask_weight > 0.0;
    let mut log_file = match &outputs.log_csv {
        Some(path) => {
            let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
            f.write_all(log_csv(&[]).as_bytes()).map_err(|e| Error::io(path, e))?;
            Some((f, path.clone()))
        }
        None => None,
    };
    while state.iteration < config.iterations {
        let it = state.iteration;
        // One stream per iteration, so resuming from a checkpoint is exact.
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7472_6169_6e00_0000);
        rng.set_stream(it as u64);
        let batch = make_batch(set, &mut rng, config.batch_size)?;
        let result = loss_batch(&batch, &state.surface, config, use_masks, &mut rng);
        let (terms, grad) = match result {
            Ok(ok) => ok,
            Err(Error::Diverged { detail, .. }) => return Err(diverged(&state, outputs, it, detail)),
            Err(e) => return Err(e),
        };
        if !terms.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            let detail = format!(
                "loss {} (data {}, eikonal {}, mask {}) or gradient non-finite",
                terms.total, terms.data, terms.eikonal, terms.mask
            );
            return Err(diverged(&state, outputs, it, detail));
        }
        let lr = config.learning_rate_at(it);
        let mut params = state.surface.flat_params();
        state.optimizer.step(&mut params, &grad, lr);
        state.surface.set_flat_params(&params)?;
        state.iteration += 1;
        let row = LogRow {
            iter: it,
            data_loss: terms.data_per_pixel(),
            eikonal: terms.eikonal,
            mask_loss: terms.mask,
            s: state.surface.sharpness(),
            lr,
        };
        state.history.push(row);
        if let Some((f, path)) = log_file.as_mut() {
            let line = log_csv(&[row]);
            let body = line.split_once('\n').map(|x| x.1).unwrap_or("");
            f.write_all(body.as_bytes()).map_err(|e| Error::io(&*path, e))?;
        }
        if config.log_every > 0 && (it % config.log_every == 0 || state.iteration == config.iterations) {
            log::info!(
                "iter {it}: data/px {:.5} eikonal {:.5} mask {:.4} s {:.1} lr {:.2e}",
                row.data_loss,
                row.eikonal,
                row.mask_loss,
                row.s,
                lr
            );
        }
        if let Some(dir) = &outputs.checkpoint_dir {
            if config.checkpoint_every > 0 && state.iteration % config.checkpoint_every == 0 {
                state
                    .checkpoint()
                    .write(&dir.join(format!("iter_{:06}.ckpt", state.iteration)))?;
            }
        }
    }
    Ok(state)
}

fn diverged(state: &TrainState, outputs: &TrainOutputs, iteration: usize, detail: String) -> Error {
    let mut detail = detail;
    if let Some(dir) = &outputs.checkpoint_dir {
        let path = dir.join("diverged.ckpt");
        match state.checkpoint().write(&path) {
            Ok(()) => detail.push_str(&format!("; state dumped to {}", path.display())),
            Err(e) => detail.push_str(&format!("; state dump failed: {e}")),
        }
    }
    Error::Diverged { iteration, detail }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reparam::canonical_triplet;

    fn pixel(view: usize, col: u32) -> TrainPixel {
        TrainPixel {
            view,
            col,
            row: 0,
            ray: Ray {
                origin: Vec3::new(0.01 * col as f64, 0.0, -3.0),
                direction: Vec3::z(),
                t_near: 2.0,
                t_far: 4.0,
            },
            lights: *canonical_triplet().matrix(),
            target: Some(Vec3::new(0.2, 0.3, -0.1)),
            mask: None,
        }
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            iterations: 3,
            batch_size: 4,
            warmup_iterations: 1,
            sampling: SamplingConfig {
                coarse: 8,
                importance_rounds: 1,
                importance_per_round: 4,
                ..SamplingConfig::default()
            },
            field: FieldConfig {
                sdf_hidden: vec![8, 8],
                albedo_hidden: vec![8],
                ..FieldConfig::default()
            },
            chunk_rays: 2,
            log_every: 0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_warms_up_then_decays_to_the_floor() {
        let c = TrainConfig {
            iterations: 1000,
            warmup_iterations: 100,
            ..TrainConfig::default()
        };
        assert!((c.learning_rate_at(0) - 5e-6).abs() < 1e-12);
        assert!((c.learning_rate_at(99) - 5e-4).abs() < 1e-12);
        assert!((c.learning_rate_at(100) - 5e-4).abs() < 1e-12);
        assert!((c.learning_rate_at(1000) - 0.05 * 5e-4).abs() < 1e-12);
        assert!(c.learning_rate_at(500) < c.learning_rate_at(300));
    }

    #[test]
    fn batches_come_from_one_view_and_are_reproducible() {
        let set = TrainingSet {
            views: vec![(0..10).map(|c| pixel(0, c)).collect(), (0..10).map(|c| pixel(1, c)).collect()],
        };
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let ba = make_batch(&set, &mut a, 32).unwrap();
            let bb = make_batch(&set, &mut b, 32).unwrap();
            assert_eq!(ba.len(), 32);
            assert!(ba.iter().all(|p| p.view == ba[0].view));
            assert_eq!(ba, bb);
        }
    }

    #[test]
    fn empty_pool_is_a_configuration_error() {
        let set = TrainingSet { views: vec![vec![]] };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(make_batch(&set, &mut rng, 4), Err(Error::Config(_))));
    }

    #[test]
    fn duplicated_pixels_double_the_data_term() {
        let c = tiny_config();
        let surface = initial_surface(&c).unwrap();
        let p: Vec<TrainPixel> = (0..3).map(|i| pixel(0, i)).collect();
        let single: Vec<&TrainPixel> = p.iter().collect();
        let double: Vec<&TrainPixel> = p.iter().chain(p.iter()).collect();
        let no_jitter = TrainConfig {
            sampling: SamplingConfig {
                jitter: false,
                ..c.sampling.clone()
            },
            ..c
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, _) = loss_batch(&single, &surface, &no_jitter, false, &mut rng).unwrap();
        let (b, _) = loss_batch(&double, &surface, &no_jitter, false, &mut rng).unwrap();
        assert_eq!(b.data, 2.0 * a.data);
    }

    #[test]
    fn zero_iterations_return_the_initial_state() {
        let c = TrainConfig {
            iterations: 0,
            ..tiny_config()
        };
        let set = TrainingSet {
            views: vec![vec![pixel(0, 0)]],
        };
        let state = train(&set, &c, &TrainOutputs::default()).unwrap();
        assert_eq!(state.iteration, 0);
        assert_eq!(state.surface, initial_surface(&c).unwrap());
    }

    #[test]
    fn training_is_deterministic_and_logs_every_iteration() {
        let c = tiny_config();
        let set = TrainingSet {
            views: vec![(0..6).map(|i| pixel(0, i)).collect()],
        };
        let dir = tempfile::tempdir().unwrap();
        let outputs = TrainOutputs {
            log_csv: Some(dir.path().join("log.csv")),
            checkpoint_dir: None,
        };
        let a = train(&set, &c, &outputs).unwrap();
        let b = train(&set, &c, &TrainOutputs::default()).unwrap();
        assert_eq!(a.surface, b.surface);
        let log = std::fs::read_to_string(dir.path().join("log.csv")).unwrap();
        assert_eq!(log.lines().count(), 4);
        assert!(log.starts_with("iter,data_loss,eikonal,mask_loss,s,lr"));
    }

    #[test]
    fn resuming_matches_an_uninterrupted_run() {
        let c = tiny_config();
        let set = TrainingSet {
            views: vec![(0..6).map(|i| pixel(0, i)).collect()],
        };
        let full = train(&set, &c, &TrainOutputs::default()).unwrap();
        let half = train(
            &set,
            &TrainConfig {
                iterations: 2,
                ..c.clone()
            },
            &TrainOutputs::default(),
        )
        .unwrap();
        let resumed = train_from(half, &set, &c, &TrainOutputs::default()).unwrap();
        assert_eq!(full.surface, resumed.surface);
    }

    #[test]
    fn non_finite_targets_abort_with_a_state_dump() {
        let c = tiny_config();
        let mut bad = pixel(0, 0);
        bad.target = Some(Vec3::new(f64::NAN, 0.0, 0.0));
        let set = TrainingSet { views: vec![vec![bad]] };
        let dir = tempfile::tempdir().unwrap();
        let outputs = TrainOutputs {
            log_csv: None,
            checkpoint_dir: Some(dir.path().to_path_buf()),
        };
        match train(&set, &c, &outputs) {
            Err(Error::Diverged { iteration, detail }) => {
                assert_eq!(iteration, 0);
                assert!(detail.contains("view 0"));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
        assert!(dir.path().join("diverged.ckpt").exists());
    }
}
