//! Dense softplus MLP evaluated on batches that carry forward-mode
//! derivative channels, with a recorded tape for reverse-mode gradients.
//!
//! Batch layout: `channels * n` rows, row-major. Rows `0..n` hold values;
//! rows `c*n..(c+1)*n` for `c >= 1` hold the derivative of the values along
//! one input direction. Biases only touch the value rows.

use rand::Rng;
use rand_distr::{Distribution, Normal};

pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], usize, usize),
    b: (&[f64], usize, usize),
    beta: f64,
    c: (&mut [f64], usize, usize),
) {
    debug_assert!(m == 0 || k == 0 || a.0.len() > (m - 1) * a.1 + (k - 1) * a.2);
    debug_assert!(k == 0 || n == 0 || b.0.len() > (k - 1) * b.1 + (n - 1) * b.2);
    debug_assert!(m == 0 || n == 0 || c.0.len() > (m - 1) * c.1 + (n - 1) * c.2);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: strides and extents are checked against the slice lengths above
    // (debug builds) and every caller derives them from the same shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.0.as_mut_ptr(),
            c.1 as isize,
            c.2 as isize,
        );
    }
}

/// Per-layer intermediates needed by the backward pass.
#[derive(Debug, Clone, Default)]
pub struct LayerRecord {
    input: Vec<f64>,
    /// Pre-activations (all channels) and activation slopes (value rows).
    pre: Vec<f64>,
    slope: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct MlpTape {
    pub(crate) n: usize,
    pub(crate) channels: usize,
    layers: Vec<LayerRecord>,
}

impl MlpTape {
    pub fn rows(&self) -> usize {
        self.n * self.channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    beta: f64,
}

impl Mlp {
    /// `sizes = [input, hidden.., output]`; hidden layers use softplus with
    /// sharpness `beta`, the output layer is linear.
    pub fn new(sizes: Vec<usize>, beta: f64) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        assert!(beta > 0.0);
        Self { sizes, beta }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Offset of layer `l`'s weight block; its bias follows the weights.
    pub fn layer_offset(&self, l: usize) -> usize {
        (0..l)
            .map(|i| self.sizes[i + 1] * self.sizes[i] + self.sizes[i + 1])
            .sum()
    }

    pub fn param_count(&self) -> usize {
        self.layer_offset(self.num_layers())
    }

    /// Weights `N(0, std)` for hidden layers, zero biases; the caller fixes
    /// up special layers.
    pub fn init_params<R: Rng>(&self, rng: &mut R, std_for: impl Fn(usize, usize, usize) -> f64) -> Vec<f64> {
        let mut p = vec![0.0; self.param_count()];
        for l in 0..self.num_layers() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let std = std_for(l, fan_in, fan_out);
            let off = self.layer_offset(l);
            if std > 0.0 {
                let normal = Normal::new(0.0, std).unwrap();
                for w in &mut p[off..off + fan_in * fan_out] {
                    *w = normal.sample(rng);
                }
            }
        }
        p
    }

    /// Runs the network; returns `channels * n` rows of outputs.
    pub fn forward(
        &self,
        params: &[f64],
        input: &[f64],
        n: usize,
        channels: usize,
        mut tape: Option<&mut MlpTape>,
    ) -> Vec<f64> {
        assert_eq!(params.len(), self.param_count());
        assert_eq!(input.len(), n * channels * self.input_dim());
        let rows = n * channels;
        if let Some(t) = tape.as_deref_mut() {
            t.n = n;
            t.channels = channels;
            t.layers.clear();
        }
        let mut x = input.to_vec();
        for l in 0..self.num_layers() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = self.layer_offset(l);
            let w = &params[off..off + fan_in * fan_out];
            let b = &params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            let mut z = vec![0.0; rows * fan_out];
            // Z = X W^T, W stored (out x in) row-major.
            gemm(rows, fan_in, fan_out, (&x, fan_in, 1), (w, 1, fan_in), 0.0, (&mut z, fan_out, 1));
            for row in z[..n * fan_out].chunks_exact_mut(fan_out) {
                for (v, bias) in row.iter_mut().zip(b) {
                    *v += bias;
                }
            }
            if l + 1 == self.num_layers() {
                if let Some(t) = tape.as_deref_mut() {
                    t.layers.push(LayerRecord {
                        input: x,
                        ..LayerRecord::default()
                    });
                }
                return z;
            }
            let (h, slope) = self.activate(&z, n, channels, fan_out);
            if let Some(t) = tape.as_deref_mut() {
                t.layers.push(LayerRecord {
                    input: std::mem::replace(&mut x, h),
                    pre: z,
                    slope,
                });
            } else {
                x = h;
            }
        }
        unreachable!("loop returns at the output layer")
    }

    /// Returns activations and the softplus slope at each value row.
    fn activate(&self, z: &[f64], n: usize, channels: usize, width: usize) -> (Vec<f64>, Vec<f64>) {
        let beta = self.beta;
        let mut h = vec![0.0; z.len()];
        let mut slope = vec![0.0; n * width];
        let (zv, zd) = z.split_at(n * width);
        let (hv, hd) = h.split_at_mut(n * width);
        for ((o, s), &v) in hv.iter_mut().zip(slope.iter_mut()).zip(zv) {
            let bz = beta * v;
            if bz > 30.0 {
                *o = v;
                *s = 1.0;
            } else {
                let e = bz.exp();
                *o = e.ln_1p() / beta;
                *s = e / (1.0 + e);
            }
        }
        if channels > 1 {
            for c in 0..channels - 1 {
                let src = &zd[c * n * width..(c + 1) * n * width];
                let dst = &mut hd[c * n * width..(c + 1) * n * width];
                for ((o, &d), &s) in dst.iter_mut().zip(src).zip(&slope) {
                    *o = s * d;
                }
            }
        }
        (h, slope)
    }

    /// Accumulates `d loss / d params` into `grad` given `d loss / d output`
    /// for every row of the recorded batch.
    pub fn backward(&self, params: &[f64], tape: &MlpTape, g_out: &[f64], grad: &mut [f64]) {
        let (n, channels) = (tape.n, tape.channels);
        let rows = n * channels;
        assert_eq!(tape.layers.len(), self.num_layers());
        assert_eq!(g_out.len(), rows * self.output_dim());
        assert_eq!(grad.len(), self.param_count());
        let beta = self.beta;
        let mut gz = g_out.to_vec();
        for l in (0..self.num_layers()).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = self.layer_offset(l);
            let rec = &tape.layers[l];
            {
                let (gw, gb) = grad[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
                // dW += gZ^T X over all channels.
                gemm(fan_out, rows, fan_in, (&gz, 1, fan_out), (&rec.input, fan_in, 1), 1.0, (gw, fan_in, 1));
                for row in gz[..n * fan_out].chunks_exact(fan_out) {
                    for (g, v) in gb.iter_mut().zip(row) {
                        *g += v;
                    }
                }
            }
            if l == 0 {
                break;
            }
            let w = &params[off..off + fan_in * fan_out];
            let mut gh = vec![0.0; rows * fan_in];
            gemm(rows, fan_out, fan_in, (&gz, fan_out, 1), (w, fan_in, 1), 0.0, (&mut gh, fan_in, 1));
            // Back through the activation of layer l-1 (width fan_in).
            let below = &tape.layers[l - 1];
            let width = fan_in;
            let mut g_pre = vec![0.0; rows * width];
            let zd = &below.pre[n * width..];
            let s1 = &below.slope;
            let (ghv, ghd) = gh.split_at(n * width);
            let (gpv, gpd) = g_pre.split_at_mut(n * width);
            for i in 0..n * width {
                gpv[i] = ghv[i] * s1[i];
            }
            if channels > 1 {
                for c in 0..channels - 1 {
                    let range = c * n * width..(c + 1) * n * width;
                    let (dz, gdh) = (&zd[range.clone()], &ghd[range.clone()]);
                    let gdz = &mut gpd[range];
                    for i in 0..n * width {
                        let s2 = beta * s1[i] * (1.0 - s1[i]);
                        gpv[i] += gdh[i] * dz[i] * s2;
                        gdz[i] = gdh[i] * s1[i];
                    }
                }
            }
            gz = g_pre;
        }
    }
}
