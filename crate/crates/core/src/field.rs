//! Neural signed-distance and albedo fields.
//!
//! Both fields are frequency-encoded MLPs over world position. The SDF field
//! evaluates value and spatial gradient jointly (forward mode through the
//! encoding and every layer); parameter gradients flow back through both the
//! value and the gradient channels.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Vec3;
use crate::error::{Error, Result};
use crate::mlp::{Mlp, MlpTape};
use crate::optim::Adam;
use crate::sdf::{Jet, SignedDistance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodingConfig {
    pub num_frequencies: usize,
    pub include_input: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            num_frequencies: 6,
            include_input: true,
        }
    }
}

impl EncodingConfig {
    pub fn dim(&self) -> usize {
        3 * (usize::from(self.include_input) + 2 * self.num_frequencies)
    }

    /// Encodes `points`. With `derivatives`, appends three blocks holding the
    /// encoding's derivative along each world axis (4·n rows in total).
    pub fn encode(&self, points: &[Vec3], derivatives: bool) -> Vec<f64> {
        let n = points.len();
        let dim = self.dim();
        let channels = if derivatives { 4 } else { 1 };
        let mut out = vec![0.0; channels * n * dim];
        for (p, x) in points.iter().enumerate() {
            let mut col = 0;
            if self.include_input {
                for j in 0..3 {
                    out[p * dim + j] = x[j];
                    if derivatives {
                        out[((1 + j) * n + p) * dim + j] = 1.0;
                    }
                }
                col = 3;
            }
            let mut freq = 1.0;
            for _ in 0..self.num_frequencies {
                for j in 0..3 {
                    let (s, c) = (freq * x[j]).sin_cos();
                    out[p * dim + col + j] = s;
                    out[p * dim + col + 3 + j] = c;
                    if derivatives {
                        let row = ((1 + j) * n + p) * dim;
                        out[row + col + j] = freq * c;
                        out[row + col + 3 + j] = -freq * s;
                    }
                }
                col += 6;
                freq *= 2.0;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    pub encoding: EncodingConfig,
    pub sdf_hidden: Vec<usize>,
    pub albedo_hidden: Vec<usize>,
    /// Sharpness of the hidden-layer softplus.
    pub softplus_beta: f64,
    pub geometric_init: bool,
    /// Radius of the sphere the SDF starts as.
    pub init_radius: f64,
    /// Adam steps fitting the initial SDF to the init sphere (0 = analytic
    /// initialisation only).
    pub init_fit_steps: usize,
    /// Debug fallback: spatial gradients by central differences with this step.
    pub finite_difference_step: Option<f64>,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            encoding: EncodingConfig::default(),
            sdf_hidden: vec![64; 4],
            albedo_hidden: vec![64; 3],
            softplus_beta: 100.0,
            geometric_init: true,
            init_radius: 0.5,
            init_fit_steps: 0,
            finite_difference_step: None,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sdf_hidden.is_empty() || self.albedo_hidden.is_empty() {
            return Err(Error::Config("field MLPs need at least one hidden layer".into()));
        }
        if self.sdf_hidden.iter().chain(&self.albedo_hidden).any(|&w| w == 0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if !(self.softplus_beta > 0.0) {
            return Err(Error::Config("softplus_beta must be positive".into()));
        }
        if !(self.init_radius > 0.0 && self.init_radius < 1.0) {
            return Err(Error::Config("init_radius must lie in (0, 1)".into()));
        }
        if let Some(h) = self.finite_difference_step {
            if !(h > 0.0) {
                return Err(Error::Config("finite_difference_step must be positive".into()));
            }
        }
        Ok(())
    }

    fn sdf_mlp(&self) -> Mlp {
        let mut sizes = vec![self.encoding.dim()];
        sizes.extend(&self.sdf_hidden);
        sizes.push(1);
        Mlp::new(sizes, self.softplus_beta)
    }

    fn albedo_mlp(&self) -> Mlp {
        let mut sizes = vec![self.encoding.dim()];
        sizes.extend(&self.albedo_hidden);
        sizes.push(1);
        Mlp::new(sizes, self.softplus_beta)
    }
}

/// Recorded SDF evaluation for reverse mode.
#[derive(Debug, Clone)]
pub struct SdfTape {
    points: usize,
    mlp: MlpTape,
}

impl SdfTape {
    pub fn len(&self) -> usize {
        self.points
    }

    pub fn is_empty(&self) -> bool {
        self.points == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdfField {
    encoding: EncodingConfig,
    mlp: Mlp,
    params: Vec<f64>,
    geometric_init: bool,
    fd_step: Option<f64>,
}

impl SdfField {
    pub fn new<R: Rng>(config: &FieldConfig, rng: &mut R) -> Self {
        let mlp = config.sdf_mlp();
        let layers = mlp.num_layers();
        let params = if config.geometric_init {
            // Initialisation of Atzmon & Lipman as adapted for encoded inputs:
            // the network starts close to |x| - r.
            let mut p = mlp.init_params(rng, |l, _fan_in, fan_out| {
                if l + 1 == layers {
                    0.0
                } else {
                    2f64.sqrt() / (fan_out as f64).sqrt()
                }
            });
            let fan_in0 = mlp.sizes()[0];
            if config.encoding.include_input {
                for row in 0..mlp.sizes()[1] {
                    for col in 3..fan_in0 {
                        p[row * fan_in0 + col] = 0.0;
                    }
                }
            }
            let off = mlp.layer_offset(layers - 1);
            let fan_in = mlp.sizes()[layers - 1];
            let mean = std::f64::consts::PI.sqrt() / (fan_in as f64).sqrt();
            let normal = rand_distr::Normal::new(mean, 1e-4).unwrap();
            for w in &mut p[off..off + fan_in] {
                *w = rand_distr::Distribution::sample(&normal, rng);
            }
            p[off + fan_in] = -config.init_radius;
            p
        } else {
            mlp.init_params(rng, |_, fan_in, _| (2.0 / fan_in as f64).sqrt())
        };
        let mut field = Self {
            encoding: config.encoding,
            mlp,
            params,
            geometric_init: config.geometric_init,
            fd_step: config.finite_difference_step,
        };
        if config.init_fit_steps > 0 {
            field.fit_sphere(config.init_radius, config.init_fit_steps, rng);
        }
        field
    }

    pub fn geometric_init(&self) -> bool {
        self.geometric_init
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn layer_widths(&self) -> &[usize] {
        self.mlp.sizes()
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "SDF expects {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    pub fn eval_jet(&self, x: &Vec3) -> Jet {
        self.forward(std::slice::from_ref(x), false).0[0]
    }

    pub fn eval_value(&self, x: &Vec3) -> f64 {
        self.values(std::slice::from_ref(x))[0]
    }

    /// Values only, without derivative channels.
    pub fn values(&self, points: &[Vec3]) -> Vec<f64> {
        let input = self.encoding.encode(points, false);
        self.mlp.forward(&self.params, &input, points.len(), 1, None)
    }

    /// Jets for all `points`, optionally recording a tape for [`Self::backprop`].
    pub fn forward(&self, points: &[Vec3], record: bool) -> (Vec<Jet>, Option<SdfTape>) {
        let n = points.len();
        let mut tape = record.then(MlpTape::default);
        let jets = match self.fd_step {
            None => {
                let input = self.encoding.encode(points, true);
                let out = self.mlp.forward(&self.params, &input, n, 4, tape.as_mut());
                (0..n)
                    .map(|p| Jet {
                        value: out[p],
                        gradient: Vec3::new(out[n + p], out[2 * n + p], out[3 * n + p]),
                    })
                    .collect()
            }
            Some(h) => {
                let expanded = fd_stencil(points, h);
                let input = self.encoding.encode(&expanded, false);
                let out = self.mlp.forward(&self.params, &input, expanded.len(), 1, tape.as_mut());
                (0..n)
                    .map(|p| Jet {
                        value: out[p],
                        gradient: Vec3::from_fn(|c, _| {
                            (out[(1 + 2 * c) * n + p] - out[(2 + 2 * c) * n + p]) / (2.0 * h)
                        }),
                    })
                    .collect()
            }
        };
        (jets, tape.map(|mlp| SdfTape { points: n, mlp }))
    }

    /// Accumulates into `grad` the parameter gradient of a loss whose
    /// sensitivities to each recorded value and spatial gradient are given.
    pub fn backprop(
        &self,
        tape: &SdfTape,
        d_value: &[f64],
        d_gradient: &[Vec3],
        grad: &mut [f64],
    ) -> Result<()> {
        let n = tape.points;
        if d_value.len() != n || d_gradient.len() != n {
            return Err(Error::Contract(format!(
                "SDF backprop seeded with {}/{} sensitivities for {} recorded points",
                d_value.len(),
                d_gradient.len(),
                n
            )));
        }
        if grad.len() != self.params.len() {
            return Err(Error::Contract("SDF gradient buffer has the wrong length".into()));
        }
        let mut seed = vec![0.0; tape.mlp.rows()];
        match self.fd_step {
            None => {
                for p in 0..n {
                    seed[p] = d_value[p];
                    for c in 0..3 {
                        seed[(1 + c) * n + p] = d_gradient[p][c];
                    }
                }
            }
            Some(h) => {
                for p in 0..n {
                    seed[p] = d_value[p];
                    for c in 0..3 {
                        seed[(1 + 2 * c) * n + p] = d_gradient[p][c] / (2.0 * h);
                        seed[(2 + 2 * c) * n + p] = -d_gradient[p][c] / (2.0 * h);
                    }
                }
            }
        }
        self.mlp.backward(&self.params, &tape.mlp, &seed, grad);
        Ok(())
    }

    /// Least-squares fit of value and gradient to the sphere `|x| - radius`.
    fn fit_sphere<R: Rng>(&mut self, radius: f64, steps: usize, rng: &mut R) {
        let mut adam = Adam::new(self.params.len());
        for _ in 0..steps {
            let pts: Vec<Vec3> = (0..256)
                .map(|_| {
                    Vec3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect();
            let (jets, tape) = self.forward(&pts, true);
            let scale = 1.0 / pts.len() as f64;
            let mut dv = Vec::with_capacity(pts.len());
            let mut dg = Vec::with_capacity(pts.len());
            for (p, j) in pts.iter().zip(&jets) {
                let norm = p.norm().max(1e-9);
                dv.push(2.0 * scale * (j.value - (norm - radius)));
                dg.push(2.0 * scale * (j.gradient - p / norm));
            }
            let mut grad = vec![0.0; self.params.len()];
            self.backprop(tape.as_ref().unwrap(), &dv, &dg, &mut grad)
                .expect("tape matches its own forward pass");
            adam.step(&mut self.params, &grad, 1e-3);
        }
    }
}

fn fd_stencil(points: &[Vec3], h: f64) -> Vec<Vec3> {
    let n = points.len();
    let mut out = Vec::with_capacity(7 * n);
    out.extend_from_slice(points);
    for c in 0..3 {
        for sign in [1.0, -1.0] {
            out.extend(points.iter().map(|p| {
                let mut q = *p;
                q[c] += sign * h;
                q
            }));
        }
    }
    out
}

const PAR_CHUNK: usize = 2048;

impl SignedDistance for SdfField {
    fn distance(&self, p: &Vec3) -> f64 {
        self.eval_value(p)
    }

    fn jet(&self, p: &Vec3) -> Jet {
        self.eval_jet(p)
    }

    fn distances(&self, points: &[Vec3]) -> Vec<f64> {
        points.par_chunks(PAR_CHUNK).flat_map_iter(|c| self.values(c)).collect()
    }

    fn jets(&self, points: &[Vec3]) -> Vec<Jet> {
        points
            .par_chunks(PAR_CHUNK)
            .flat_map_iter(|c| self.forward(c, false).0)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct AlbedoTape {
    mlp: MlpTape,
    /// Pre-positivity outputs.
    raw: Vec<f64>,
}

impl AlbedoTape {
    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlbedoField {
    encoding: EncodingConfig,
    mlp: Mlp,
    params: Vec<f64>,
}

fn positive(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

impl AlbedoField {
    /// Output layer starts near zero so every point begins at softplus(0) = ln 2.
    pub fn new<R: Rng>(config: &FieldConfig, rng: &mut R) -> Self {
        let mlp = config.albedo_mlp();
        let layers = mlp.num_layers();
        let params = mlp.init_params(rng, |l, fan_in, _| {
            if l + 1 == layers {
                1e-3
            } else {
                (2.0 / fan_in as f64).sqrt()
            }
        });
        Self {
            encoding: config.encoding,
            mlp,
            params,
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn layer_widths(&self) -> &[usize] {
        self.mlp.sizes()
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "albedo expects {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    pub fn eval(&self, x: &Vec3) -> f64 {
        self.forward(std::slice::from_ref(x), false).0[0]
    }

    pub fn forward(&self, points: &[Vec3], record: bool) -> (Vec<f64>, Option<AlbedoTape>) {
        let input = self.encoding.encode(points, false);
        let mut tape = record.then(MlpTape::default);
        let raw = self.mlp.forward(&self.params, &input, points.len(), 1, tape.as_mut());
        let values = raw.iter().map(|&z| positive(z)).collect();
        (values, tape.map(|mlp| AlbedoTape { mlp, raw }))
    }

    pub fn backprop(&self, tape: &AlbedoTape, d_albedo: &[f64], grad: &mut [f64]) -> Result<()> {
        if d_albedo.len() != tape.raw.len() {
            return Err(Error::Contract(format!(
                "albedo backprop seeded with {} sensitivities for {} recorded points",
                d_albedo.len(),
                tape.raw.len()
            )));
        }
        if grad.len() != self.params.len() {
            return Err(Error::Contract("albedo gradient buffer has the wrong length".into()));
        }
        let seed: Vec<f64> = d_albedo
            .iter()
            .zip(&tape.raw)
            .map(|(g, &z)| g / (1.0 + (-z).exp()))
            .collect();
        self.mlp.backward(&self.params, &tape.mlp, &seed, grad);
        Ok(())
    }
}

/// Both fields plus the free parameter behind the rendering sharpness.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralSurface {
    pub config: FieldConfig,
    pub sdf: SdfField,
    pub albedo: AlbedoField,
    /// Sharpness is `exp(SHARPNESS_GAIN * sharpness_param)`.
    pub sharpness_param: f64,
}

pub const SHARPNESS_GAIN: f64 = 10.0;

impl NeuralSurface {
    pub fn new<R: Rng>(config: &FieldConfig, initial_sharpness: f64, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if !(initial_sharpness > 0.0) {
            return Err(Error::Config("initial sharpness must be positive".into()));
        }
        let sdf = SdfField::new(config, rng);
        let albedo = AlbedoField::new(config, rng);
        Ok(Self {
            config: config.clone(),
            sdf,
            albedo,
            sharpness_param: initial_sharpness.ln() / SHARPNESS_GAIN,
        })
    }

    pub fn sharpness(&self) -> f64 {
        (SHARPNESS_GAIN * self.sharpness_param).exp()
    }

    /// Flat layout used by the optimiser: SDF, albedo, sharpness.
    pub fn param_count(&self) -> usize {
        self.sdf.param_count() + self.albedo.param_count() + 1
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        v.extend_from_slice(self.sdf.params());
        v.extend_from_slice(self.albedo.params());
        v.push(self.sharpness_param);
        v
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Contract("flat parameter vector has the wrong length".into()));
        }
        let (s, rest) = flat.split_at(self.sdf.param_count());
        let (a, k) = rest.split_at(self.albedo.param_count());
        self.sdf.params_mut().copy_from_slice(s);
        self.albedo.params_mut().copy_from_slice(a);
        self.sharpness_param = k[0];
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.sdf.params().iter().chain(self.albedo.params()).all(|v| v.is_finite())
            && self.sharpness_param.is_finite()
    }
}

const MAGIC: &[u8; 8] = b"PSFCKPT\0";
const FORMAT_VERSION: u32 = 1;

/// Checkpoint payload: architecture, parameters and the iteration reached.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub surface: NeuralSurface,
    pub iteration: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let arch = serde_json::to_vec(&self.surface.config)?;
        out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
        out.extend_from_slice(&arch);
        out.extend_from_slice(&self.iteration.to_le_bytes());
        for block in [self.surface.sdf.params(), self.surface.albedo.params()] {
            out.extend_from_slice(&(block.len() as u64).to_le_bytes());
            for v in block {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.surface.sharpness_param.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = bytes;
        let bad = |msg: &str| Error::format(path, msg.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = read_u32(&mut r).ok_or_else(|| bad("truncated header"))?;
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let arch_len = read_u32(&mut r).ok_or_else(|| bad("truncated header"))? as usize;
        if r.len() < arch_len {
            return Err(bad("truncated architecture descriptor"));
        }
        let config: FieldConfig = serde_json::from_slice(&r[..arch_len])
            .map_err(|e| bad(&format!("architecture descriptor: {e}")))?;
        config.validate()?;
        r = &r[arch_len..];
        let iteration = read_u64(&mut r).ok_or_else(|| bad("truncated iteration counter"))?;
        let mut blocks = Vec::new();
        for _ in 0..2 {
            let len = read_u64(&mut r).ok_or_else(|| bad("truncated parameter block"))? as usize;
            if r.len() < len.saturating_mul(8) {
                return Err(bad("truncated parameter block"));
            }
            let block: Vec<f64> = (0..len).map(|_| read_f64(&mut r).unwrap()).collect();
            blocks.push(block);
        }
        let sharpness_param = read_f64(&mut r).ok_or_else(|| bad("truncated sharpness"))?;
        if !r.is_empty() {
            return Err(bad("trailing bytes after payload"));
        }
        // Rebuild the architecture, then overwrite its parameters.
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut plain = config.clone();
        plain.init_fit_steps = 0;
        let mut surface = NeuralSurface::new(&plain, 1.0, &mut rng)?;
        surface.config = config;
        let albedo = blocks.pop().unwrap();
        let sdf = blocks.pop().unwrap();
        surface.sdf.set_params(sdf).map_err(|_| bad("SDF parameter count does not match architecture"))?;
        surface
            .albedo
            .set_params(albedo)
            .map_err(|_| bad("albedo parameter count does not match architecture"))?;
        surface.sharpness_param = sharpness_param;
        if !surface.is_finite() {
            return Err(bad("non-finite parameters"));
        }
        Ok(Self { surface, iteration })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn read_u32(r: &mut &[u8]) -> Option<u32> {
    let (head, tail) = r.split_first_chunk::<4>()?;
    *r = tail;
    Some(u32::from_le_bytes(*head))
}

fn read_u64(r: &mut &[u8]) -> Option<u64> {
    let (head, tail) = r.split_first_chunk::<8>()?;
    *r = tail;
    Some(u64::from_le_bytes(*head))
}

fn read_f64(r: &mut &[u8]) -> Option<f64> {
    read_u64(r).map(f64::from_bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> FieldConfig {
        FieldConfig {
            sdf_hidden: vec![16, 16],
            albedo_hidden: vec![16],
            encoding: EncodingConfig {
                num_frequencies: 3,
                include_input: true,
            },
            ..FieldConfig::default()
        }
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| Vec3::new(rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9)))
            .collect()
    }

    #[test]
    fn encoding_derivative_rows_match_finite_differences() {
        let enc = EncodingConfig::default();
        let x = Vec3::new(0.3, -0.7, 0.1);
        let full = enc.encode(&[x], true);
        let dim = enc.dim();
        assert_eq!(dim, 39);
        for c in 0..3 {
            let mut a = x;
            let mut b = x;
            a[c] += 1e-6;
            b[c] -= 1e-6;
            let (ea, eb) = (enc.encode(&[a], false), enc.encode(&[b], false));
            for k in 0..dim {
                let fd = (ea[k] - eb[k]) / 2e-6;
                assert!((full[(1 + c) * dim + k] - fd).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn geometric_init_resembles_the_init_sphere() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let field = SdfField::new(&FieldConfig::default(), &mut rng);
        assert!(field.eval_value(&Vec3::zeros()) < 0.0);
        let far = field.eval_value(&Vec3::new(0.0, 0.0, 0.95));
        assert!(far > 0.0);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let field = SdfField::new(&small_config(), &mut rng);
        let x = Vec3::new(0.1, 0.2, 0.3);
        let (a, b) = (field.eval_jet(&x), field.eval_jet(&x));
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        assert_eq!(a.gradient, b.gradient);
    }

    #[test]
    fn batched_jets_agree_with_single_point_jets() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let field = SdfField::new(&small_config(), &mut rng);
        let pts = random_points(&mut rng, 9);
        let batch = field.forward(&pts, false).0;
        for (p, j) in pts.iter().zip(&batch) {
            let single = field.eval_jet(p);
            assert!((single.value - j.value).abs() < 1e-12);
            assert!((single.gradient - j.gradient).norm() < 1e-12);
        }
        let values = field.values(&pts);
        for (v, j) in values.iter().zip(&batch) {
            assert!((v - j.value).abs() < 1e-12);
        }
    }

    #[test]
    fn finite_difference_mode_tracks_exact_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let exact = SdfField::new(&small_config(), &mut rng);
        let mut fd = exact.clone();
        fd.fd_step = Some(1e-5);
        let pts = random_points(&mut rng, 5);
        let (je, te) = exact.forward(&pts, true);
        let (jf, tf) = fd.forward(&pts, true);
        for (a, b) in je.iter().zip(&jf) {
            assert!((a.gradient - b.gradient).norm() < 1e-6);
        }
        let dv = vec![0.3; 5];
        let dg = vec![Vec3::new(0.1, -0.2, 0.5); 5];
        let mut ge = vec![0.0; exact.param_count()];
        let mut gf = vec![0.0; exact.param_count()];
        exact.backprop(te.as_ref().unwrap(), &dv, &dg, &mut ge).unwrap();
        fd.backprop(tf.as_ref().unwrap(), &dv, &dg, &mut gf).unwrap();
        for (a, b) in ge.iter().zip(&gf) {
            assert!((a - b).abs() < 1e-4 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn backprop_rejects_mismatched_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let field = SdfField::new(&small_config(), &mut rng);
        let (_, tape) = field.forward(&random_points(&mut rng, 3), true);
        let mut g = vec![0.0; field.param_count()];
        let err = field.backprop(tape.as_ref().unwrap(), &[1.0], &[Vec3::zeros()], &mut g);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn zero_output_layer_blocks_upstream_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut field = SdfField::new(&small_config(), &mut rng);
        let last = field.mlp.num_layers() - 1;
        let off = field.mlp.layer_offset(last);
        let fan_in = field.mlp.sizes()[last];
        for w in &mut field.params[off..off + fan_in] {
            *w = 0.0;
        }
        let pts = random_points(&mut rng, 4);
        let (_, tape) = field.forward(&pts, true);
        let mut g = vec![0.0; field.param_count()];
        field
            .backprop(tape.as_ref().unwrap(), &[1.0; 4], &[Vec3::zeros(); 4], &mut g)
            .unwrap();
        assert!(g[..off].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn albedo_backprop_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut field = AlbedoField::new(&small_config(), &mut rng);
        for (k, p) in field.params.iter_mut().enumerate() {
            *p += 0.05 * ((k * 7) as f64).sin();
        }
        let pts = random_points(&mut rng, 3);
        let loss = |f: &AlbedoField| f.forward(&pts, false).0.iter().map(|v| v * v).sum::<f64>();
        let (vals, tape) = field.forward(&pts, true);
        let seed: Vec<f64> = vals.iter().map(|v| 2.0 * v).collect();
        let mut g = vec![0.0; field.param_count()];
        field.backprop(tape.as_ref().unwrap(), &seed, &mut g).unwrap();
        for k in (0..field.param_count()).step_by(7) {
            let mut a = field.clone();
            let mut b = field.clone();
            a.params[k] += 1e-6;
            b.params[k] -= 1e-6;
            let fd = (loss(&a) - loss(&b)) / 2e-6;
            assert!((g[k] - fd).abs() < 1e-6 * (1.0 + fd.abs()), "{k}: {} vs {fd}", g[k]);
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let surface = NeuralSurface::new(&small_config(), 20.0, &mut rng).unwrap();
        assert!((surface.sharpness() - 20.0).abs() < 1e-9);
        let ckpt = Checkpoint { surface, iteration: 42 };
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, ckpt);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], Path::new("x")).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong, Path::new("x")).is_err());
    }

    #[test]
    fn flat_params_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut s = NeuralSurface::new(&small_config(), 20.0, &mut rng).unwrap();
        let mut flat = s.flat_params();
        flat[0] += 1.0;
        *flat.last_mut().unwrap() = 0.5;
        s.set_flat_params(&flat).unwrap();
        assert_eq!(s.flat_params(), flat);
    }
}
