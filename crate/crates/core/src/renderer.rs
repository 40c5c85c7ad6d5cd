//! Volume rendering of simulated radiance triplets.
//!
//! Each ray accumulates `w_i * albedo_i * (L grad f_i)` over its samples, with
//! opacities derived from logistic-CDF ratios of consecutive SDF values. The
//! recorded batch keeps the field tapes so losses on radiance, opacity and the
//! eikonal residual can be differentiated back to every field parameter.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{Mat3, Ray, Vec3};
use crate::error::{Error, Result};
use crate::field::{AlbedoTape, NeuralSurface, SdfTape, SHARPNESS_GAIN};
use crate::sdf::{Jet, SignedDistance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub coarse: usize,
    pub importance_rounds: usize,
    pub importance_per_round: usize,
    /// Fixed sharpness used by the first resampling round; doubled each round.
    pub importance_sharpness: f64,
    /// Jitter coarse samples within their strata (off: stratum midpoints).
    pub jitter: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            coarse: 64,
            importance_rounds: 2,
            importance_per_round: 16,
            importance_sharpness: 64.0,
            jitter: true,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.coarse < 2 {
            return Err(Error::Config("at least two coarse samples per ray are needed".into()));
        }
        if self.importance_rounds > 0 && self.importance_per_round == 0 {
            return Err(Error::Config("importance rounds need a positive sample count".into()));
        }
        if !(self.importance_sharpness > 0.0) {
            return Err(Error::Config("importance_sharpness must be positive".into()));
        }
        Ok(())
    }

    pub fn samples_per_ray(&self) -> usize {
        self.coarse + self.importance_rounds * self.importance_per_round
    }
}

#[inline]
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-sample opacity, transmittance and weight along one ray.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Weights {
    pub alpha: Vec<f64>,
    pub transmittance: Vec<f64>,
    pub weights: Vec<f64>,
}

/// `alpha_i = max(1 - Phi(s f_{i+1}) / Phi(s f_i), 0)`; the final sample
/// has no successor and gets zero opacity.
pub fn compute_weights(sdf: &[f64], sharpness: f64) -> Weights {
    let n = sdf.len();
    let mut out = Weights {
        alpha: vec![0.0; n],
        transmittance: vec![0.0; n],
        weights: vec![0.0; n],
    };
    let mut t = 1.0;
    for i in 0..n {
        let a = if i + 1 < n {
            let log_ratio = log_sigmoid(sharpness * sdf[i + 1]) - log_sigmoid(sharpness * sdf[i]);
            (-log_ratio.exp_m1()).max(0.0)
        } else {
            0.0
        };
        out.alpha[i] = a;
        out.transmittance[i] = t;
        out.weights[i] = t * a;
        t *= 1.0 - a;
    }
    out
}

/// Gradients of the weights with respect to SDF values and sharpness, given
/// upstream sensitivities `d_weights`. Returns `(d_sdf, d_sharpness)`.
pub fn weights_backward(sdf: &[f64], sharpness: f64, w: &Weights, d_weights: &[f64]) -> (Vec<f64>, f64) {
    let n = sdf.len();
    let mut d_sdf = vec![0.0; n];
    let mut d_s = 0.0;
    let mut g_t_next = 0.0;
    for i in (0..n).rev() {
        let (a, t) = (w.alpha[i], w.transmittance[i]);
        let g_alpha = d_weights[i] * t - g_t_next * t;
        g_t_next = d_weights[i] * a + g_t_next * (1.0 - a);
        if i + 1 == n || a <= 0.0 {
            continue;
        }
        let (za, zb) = (sharpness * sdf[i], sharpness * sdf[i + 1]);
        let q = 1.0 - a;
        let da = q * sigmoid(-za);
        let db = -q * sigmoid(-zb);
        d_sdf[i] += g_alpha * da * sharpness;
        d_sdf[i + 1] += g_alpha * db * sharpness;
        d_s += g_alpha * (da * sdf[i] + db * sdf[i + 1]);
    }
    (d_sdf, d_s)
}

/// Samples along one ray with everything the renderer needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySampleSet {
    pub ray: Ray,
    pub t: Vec<f64>,
    /// Section lengths `t_{i+1} - t_i`, the last one running to `t_far`.
    pub deltas: Vec<f64>,
    pub jets: Vec<Jet>,
    pub albedo: Vec<f64>,
    pub weights: Weights,
}

impl RaySampleSet {
    pub fn new(ray: Ray, t: Vec<f64>, jets: Vec<Jet>, albedo: Vec<f64>, sharpness: f64) -> Self {
        assert_eq!(t.len(), jets.len());
        assert_eq!(t.len(), albedo.len());
        let deltas = section_lengths(&ray, &t);
        let values: Vec<f64> = jets.iter().map(|j| j.value).collect();
        let weights = compute_weights(&values, sharpness);
        Self {
            ray,
            t,
            deltas,
            jets,
            albedo,
            weights,
        }
    }

    /// Evaluates an arbitrary SDF and albedo function at the given positions.
    pub fn evaluate(
        ray: Ray,
        t: Vec<f64>,
        sdf: &dyn SignedDistance,
        albedo: &dyn Fn(&Vec3) -> f64,
        sharpness: f64,
    ) -> Self {
        let pts: Vec<Vec3> = t.iter().map(|&t| ray.at(t)).collect();
        let jets = sdf.jets(&pts);
        let rho = pts.iter().map(albedo).collect();
        Self::new(ray, t, jets, rho, sharpness)
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn recompute_weights(&mut self, sharpness: f64) {
        let values: Vec<f64> = self.jets.iter().map(|j| j.value).collect();
        self.weights = compute_weights(&values, sharpness);
    }

    /// Debug dump: one row per sample.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,f,grad_norm,albedo,weight\n");
        for i in 0..self.len() {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                self.t[i],
                self.jets[i].value,
                self.jets[i].gradient.norm(),
                self.albedo[i],
                self.weights.weights[i]
            );
        }
        s
    }
}

fn section_lengths(ray: &Ray, t: &[f64]) -> Vec<f64> {
    (0..t.len())
        .map(|i| t.get(i + 1).copied().unwrap_or(ray.t_far.max(t[i])) - t[i])
        .collect()
}

/// `sum_i w_i rho_i (L grad f_i)`; rows of `lights` are light directions.
pub fn render_radiance(samples: &RaySampleSet, lights: &Mat3) -> Vec3 {
    let mut acc = Vec3::zeros();
    for i in 0..samples.len() {
        acc += samples.jets[i].gradient * (samples.weights.weights[i] * samples.albedo[i]);
    }
    lights * acc
}

pub fn mask_opacity(samples: &RaySampleSet) -> f64 {
    samples.weights.weights.iter().sum()
}

/// Mean of `(|grad f|^2 - 1)^2` over every sample of every set.
pub fn eikonal_term(sets: &[RaySampleSet]) -> f64 {
    let (sum, count) = sets.iter().fold((0.0, 0usize), |(s, c), set| {
        (s + set.jets.iter().map(eikonal_residual).sum::<f64>(), c + set.len())
    });
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

#[inline]
pub fn eikonal_residual(jet: &Jet) -> f64 {
    let r = jet.gradient.norm_squared() - 1.0;
    r * r
}

/// Stratified coarse samples followed by rounds of inverse-CDF resampling
/// against weights computed at a fixed, increasing sharpness. Samples carry
/// no gradient. SDF queries are batched over all rays.
pub fn sample_rays<R: Rng>(
    rays: &[Ray],
    config: &SamplingConfig,
    sdf: &dyn SignedDistance,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    let m = config.coarse;
    let mut ts: Vec<Vec<f64>> = rays
        .iter()
        .map(|ray| {
            let step = (ray.t_far - ray.t_near) / m as f64;
            (0..m)
                .map(|i| {
                    let u = if config.jitter { rng.gen::<f64>() } else { 0.5 };
                    ray.t_near + (i as f64 + u) * step
                })
                .collect()
        })
        .collect();
    if config.importance_rounds == 0 {
        return ts;
    }
    let pts: Vec<Vec3> = rays
        .iter()
        .zip(&ts)
        .flat_map(|(ray, t)| t.iter().map(move |&t| ray.at(t)))
        .collect();
    let flat = sdf.distances(&pts);
    let mut values: Vec<Vec<f64>> = flat.chunks(m).map(|c| c.to_vec()).collect();

    for round in 0..config.importance_rounds {
        let s = config.importance_sharpness * 2f64.powi(round as i32);
        let new_t: Vec<Vec<f64>> = ts
            .iter()
            .zip(&values)
            .map(|(t, f)| importance_positions(t, f, s, config.importance_per_round))
            .collect();
        let pts: Vec<Vec3> = rays
            .iter()
            .zip(&new_t)
            .flat_map(|(ray, t)| t.iter().map(move |&t| ray.at(t)))
            .collect();
        let flat = sdf.distances(&pts);
        let mut offset = 0;
        for ((t, f), nt) in ts.iter_mut().zip(values.iter_mut()).zip(&new_t) {
            let nf = &flat[offset..offset + nt.len()];
            offset += nt.len();
            let (mt, mf) = merge_sorted(t, f, nt, nf);
            *t = mt;
            *f = mf;
        }
    }
    ts
}

/// Deterministic inverse-CDF placement of `count` samples over the intervals
/// between consecutive existing samples.
fn importance_positions(t: &[f64], f: &[f64], sharpness: f64, count: usize) -> Vec<f64> {
    let w = compute_weights(f, sharpness);
    let intervals = t.len() - 1;
    let pdf: Vec<f64> = (0..intervals).map(|i| w.weights[i] + 1e-5).collect();
    let total: f64 = pdf.iter().sum();
    let mut out = Vec::with_capacity(count);
    let mut cdf = 0.0;
    let mut j = 0;
    for k in 0..count {
        let u = (k as f64 + 0.5) / count as f64 * total;
        while j + 1 < intervals && cdf + pdf[j] < u {
            cdf += pdf[j];
            j += 1;
        }
        let frac = ((u - cdf) / pdf[j]).clamp(0.0, 1.0);
        out.push(t[j] + frac * (t[j + 1] - t[j]));
    }
    out
}

/// Merges two sorted sample lists, dropping exact duplicates so positions
/// stay strictly increasing.
fn merge_sorted(ta: &[f64], fa: &[f64], tb: &[f64], fb: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut t = Vec::with_capacity(ta.len() + tb.len());
    let mut f = Vec::with_capacity(ta.len() + tb.len());
    let (mut i, mut j) = (0, 0);
    while i < ta.len() || j < tb.len() {
        let take_a = j >= tb.len() || (i < ta.len() && ta[i] <= tb[j]);
        let (tv, fv) = if take_a {
            i += 1;
            (ta[i - 1], fa[i - 1])
        } else {
            j += 1;
            (tb[j - 1], fb[j - 1])
        };
        if t.last().is_some_and(|&last| tv <= last) {
            continue;
        }
        t.push(tv);
        f.push(fv);
    }
    (t, f)
}

/// Upstream sensitivities for one rendered ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaySeed {
    pub lights: Mat3,
    pub d_radiance: Vec3,
    pub d_opacity: f64,
}

/// Neural-field rendering of a batch of rays with tapes kept for backprop.
pub struct RecordedBatch {
    pub sets: Vec<RaySampleSet>,
    sharpness: f64,
    sdf_tape: SdfTape,
    albedo_tape: AlbedoTape,
}

impl RecordedBatch {
    pub fn render(surface: &NeuralSurface, rays: &[Ray], positions: Vec<Vec<f64>>) -> Self {
        assert_eq!(rays.len(), positions.len());
        let pts: Vec<Vec3> = rays
            .iter()
            .zip(&positions)
            .flat_map(|(ray, t)| t.iter().map(move |&t| ray.at(t)))
            .collect();
        let (jets, sdf_tape) = surface.sdf.forward(&pts, true);
        let (albedo, albedo_tape) = surface.albedo.forward(&pts, true);
        let sharpness = surface.sharpness();
        let mut offset = 0;
        let sets = rays
            .iter()
            .zip(positions)
            .map(|(ray, t)| {
                let n = t.len();
                let set = RaySampleSet::new(
                    *ray,
                    t,
                    jets[offset..offset + n].to_vec(),
                    albedo[offset..offset + n].to_vec(),
                    sharpness,
                );
                offset += n;
                set
            })
            .collect();
        Self {
            sets,
            sharpness,
            sdf_tape: sdf_tape.expect("recording requested"),
            albedo_tape: albedo_tape.expect("recording requested"),
        }
    }

    pub fn sample_count(&self) -> usize {
        self.sets.iter().map(|s| s.len()).sum()
    }

    pub fn eikonal_sum(&self) -> f64 {
        self.sets.iter().flat_map(|s| s.jets.iter()).map(eikonal_residual).sum()
    }

    /// Accumulates into `grad` (laid out as [`NeuralSurface::flat_params`])
    /// the gradient of
    /// `sum_r <d_radiance_r, radiance_r> + d_opacity_r * opacity_r
    ///  + eikonal_scale * sum_samples (|grad f|^2 - 1)^2`.
    pub fn backward(
        &self,
        surface: &NeuralSurface,
        seeds: &[RaySeed],
        eikonal_scale: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        if seeds.len() != self.sets.len() {
            return Err(Error::Contract(format!(
                "{} seeds for {} rendered rays",
                seeds.len(),
                self.sets.len()
            )));
        }
        if grad.len() != surface.param_count() {
            return Err(Error::Contract("gradient buffer does not match the surface".into()));
        }
        let total = self.sample_count();
        let mut d_value = Vec::with_capacity(total);
        let mut d_gradient = Vec::with_capacity(total);
        let mut d_albedo = Vec::with_capacity(total);
        let mut d_sharpness = 0.0;
        for (set, seed) in self.sets.iter().zip(seeds) {
            // u . (L g) = (L^T u) . g
            let lu = seed.lights.transpose() * seed.d_radiance;
            let n = set.len();
            let mut d_w = vec![seed.d_opacity; n];
            for i in 0..n {
                let jet = &set.jets[i];
                let shade = lu.dot(&jet.gradient);
                let w = set.weights.weights[i];
                d_w[i] += set.albedo[i] * shade;
                d_albedo.push(w * shade);
                let r = jet.gradient.norm_squared() - 1.0;
                d_gradient.push(lu * (w * set.albedo[i]) + jet.gradient * (4.0 * eikonal_scale * r));
            }
            let values: Vec<f64> = set.jets.iter().map(|j| j.value).collect();
            let (d_f, d_s) = weights_backward(&values, self.sharpness, &set.weights, &d_w);
            d_value.extend(d_f);
            d_sharpness += d_s;
        }
        let (g_sdf, rest) = grad.split_at_mut(surface.sdf.param_count());
        let (g_albedo, g_sharp) = rest.split_at_mut(surface.albedo.param_count());
        surface.sdf.backprop(&self.sdf_tape, &d_value, &d_gradient, g_sdf)?;
        surface.albedo.backprop(&self.albedo_tape, &d_albedo, g_albedo)?;
        g_sharp[0] += d_sharpness * SHARPNESS_GAIN * self.sharpness;
        Ok(())
    }
}
