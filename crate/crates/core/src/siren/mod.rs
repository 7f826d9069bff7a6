//! Sinusoidal-activation MLP representing the global SDF, with exact
//! value, input-gradient and parameter-gradient evaluation.
//!
//! Every hidden layer computes `h = sin(ω₀·(W·x + b))`; the output layer is
//! linear. Weights are drawn from `U(-√(6/n)/ω₀, √(6/n)/ω₀)` with `n` the
//! layer fan-in, biases start at zero.
//!
//! Parameter gradients of the Eikonal term are obtained by differentiating
//! the reverse-mode input-gradient computation itself, so one training
//! step costs six matrix products per hidden layer.

mod adam;
mod checkpoint;
pub mod real;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;
use crate::local_sdf::SdfSample;
pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
use real::{MatRef, Real};

pub const DEFAULT_LAYER_DIMS: [usize; 6] = [3, 256, 256, 256, 256, 1];
pub const DEFAULT_OMEGA0: f64 = 10.0;

/// Rows evaluated together; also the unit of parallel work.
const CHUNK_ROWS: usize = 256;

#[derive(Error, Debug)]
pub enum SirenError {
    #[error("invalid layer dimensions: {0}")]
    InvalidDims(String),
    #[error("non-finite network input")]
    NonFiniteInput,
    #[error("empty batch")]
    EmptyBatch,
    #[error("parameter shape mismatch: expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("checkpoint {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {reason}")]
    BadCheckpoint { path: std::path::PathBuf, reason: String },
}

/// Loss term weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub sdf: f64,
    pub eikonal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { sdf: 5.0, eikonal: 2.0 }
    }
}

/// Batch-mean loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Mean `|f(x) − s|`.
    pub sdf: f64,
    /// Mean `|‖∇f(x)‖ − 1|`.
    pub eikonal: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct LayerLayout {
    n_in: usize,
    n_out: usize,
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SirenNetwork<T: Real> {
    layer_dims: Vec<usize>,
    omega0: T,
    params: Vec<T>,
    layout: Vec<LayerLayout>,
}

fn layout_for(dims: &[usize]) -> Vec<LayerLayout> {
    let mut offset = 0;
    dims.windows(2)
        .map(|w| {
            let l = LayerLayout { n_in: w[0], n_out: w[1], weight: offset, bias: offset + w[0] * w[1] };
            offset = l.bias + w[1];
            l
        })
        .collect()
}

fn validate_dims(dims: &[usize]) -> Result<(), SirenError> {
    if dims.len() < 3 {
        return Err(SirenError::InvalidDims("need input, at least one hidden and an output layer".into()));
    }
    if dims[0] != 3 || *dims.last().unwrap() != 1 {
        return Err(SirenError::InvalidDims("input dimension must be 3 and output dimension 1".into()));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(SirenError::InvalidDims("layer widths must be positive".into()));
    }
    Ok(())
}

impl<T: Real> SirenNetwork<T> {
    /// Uniform fan-in scaled initialization, deterministic under `seed`.
    pub fn init(layer_dims: &[usize], omega0: f64, seed: u64) -> Result<Self, SirenError> {
        validate_dims(layer_dims)?;
        if !(omega0 > 0.0) || !omega0.is_finite() {
            return Err(SirenError::InvalidDims("omega0 must be positive".into()));
        }
        let layout = layout_for(layer_dims);
        let n_params = layout.last().map(|l| l.bias + l.n_out).unwrap_or(0);
        let mut params = vec![T::zero(); n_params];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &layout {
            let bound = init_bound(l.n_in, omega0);
            for w in &mut params[l.weight..l.bias] {
                *w = T::from_f64_lossy(rng.random_range(-bound..bound));
            }
        }
        Ok(Self { layer_dims: layer_dims.to_vec(), omega0: T::from_f64_lossy(omega0), params, layout })
    }

    /// Wraps an explicit parameter vector (weights row-major `out × in`
    /// followed by biases, layer by layer).
    pub fn from_params(layer_dims: &[usize], omega0: f64, params: Vec<T>) -> Result<Self, SirenError> {
        validate_dims(layer_dims)?;
        let layout = layout_for(layer_dims);
        let expected = layout.last().map(|l| l.bias + l.n_out).unwrap_or(0);
        if params.len() != expected {
            return Err(SirenError::ShapeMismatch { expected, got: params.len() });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(SirenError::InvalidDims("non-finite parameter".into()));
        }
        Ok(Self { layer_dims: layer_dims.to_vec(), omega0: T::from_f64_lossy(omega0), params, layout })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn omega0(&self) -> f64 {
        self.omega0.to_f64_lossy()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// Row-major weights of linear layer `layer` (0-based).
    pub fn weights(&self, layer: usize) -> &[T] {
        let l = self.layout[layer];
        &self.params[l.weight..l.bias]
    }

    pub fn bias(&self, layer: usize) -> &[T] {
        let l = self.layout[layer];
        &self.params[l.bias..l.bias + l.n_out]
    }

    /// Same network in another precision.
    pub fn cast<U: Real>(&self) -> SirenNetwork<U> {
        SirenNetwork {
            layer_dims: self.layer_dims.clone(),
            omega0: U::from_f64_lossy(self.omega0()),
            params: self.params.iter().map(|p| U::from_f64_lossy(p.to_f64_lossy())).collect(),
            layout: self.layout.clone(),
        }
    }

    fn hidden_layers(&self) -> usize {
        self.layout.len() - 1
    }

    pub fn forward(&self, x: Vec3) -> Result<f64, SirenError> {
        Ok(self.forward_batch(&[x])?[0])
    }

    pub fn input_gradient(&self, x: Vec3) -> Result<Vec3, SirenError> {
        Ok(self.value_and_gradient_batch(&[x])?[0].1)
    }

    /// Network output for every point, order preserving.
    pub fn forward_batch(&self, xs: &[Vec3]) -> Result<Vec<f64>, SirenError> {
        check_inputs(xs)?;
        Ok(xs
            .par_chunks(CHUNK_ROWS)
            .map_init(
                || Workspace::new(self, CHUNK_ROWS),
                |ws, chunk| {
                    ws.load_positions(chunk.iter().copied());
                    self.forward_chunk(ws, chunk.len());
                    ws.f[..chunk.len()].iter().map(|v| v.to_f64_lossy()).collect::<Vec<_>>()
                },
            )
            .flatten()
            .collect())
    }

    /// Output and exact input gradient for every point.
    pub fn value_and_gradient_batch(&self, xs: &[Vec3]) -> Result<Vec<(f64, Vec3)>, SirenError> {
        check_inputs(xs)?;
        Ok(xs
            .par_chunks(CHUNK_ROWS)
            .map_init(
                || Workspace::new(self, CHUNK_ROWS),
                |ws, chunk| {
                    let rows = chunk.len();
                    ws.load_positions(chunk.iter().copied());
                    self.forward_chunk(ws, rows);
                    self.input_gradient_chunk(ws, rows);
                    (0..rows).map(|r| (ws.f[r].to_f64_lossy(), ws.gradient_row(r))).collect::<Vec<_>>()
                },
            )
            .flatten()
            .collect())
    }

    /// Batch-mean loss without parameter gradients.
    pub fn loss(&self, batch: &[SdfSample], weights: LossWeights) -> Result<LossBreakdown, SirenError> {
        self.loss_impl(batch, weights, false).map(|(l, _)| l)
    }

    /// Batch-mean loss and its exact gradient with respect to every
    /// parameter, including the second-order path through the Eikonal term.
    pub fn loss_and_gradient(
        &self,
        batch: &[SdfSample],
        weights: LossWeights,
    ) -> Result<(LossBreakdown, Vec<T>), SirenError> {
        let (loss, grad) = self.loss_impl(batch, weights, true)?;
        Ok((loss, grad.expect("gradient requested")))
    }

    fn loss_impl(
        &self,
        batch: &[SdfSample],
        weights: LossWeights,
        want_grad: bool,
    ) -> Result<(LossBreakdown, Option<Vec<T>>), SirenError> {
        if batch.is_empty() {
            return Err(SirenError::EmptyBatch);
        }
        if batch.iter().any(|s| !s.position.is_finite() || !s.sdf.is_finite()) {
            return Err(SirenError::NonFiniteInput);
        }
        let n = batch.len() as f64;
        let scale = Scale { sdf: weights.sdf / n, eikonal: weights.eikonal / n };
        let parts: Vec<(f64, f64, Option<Vec<T>>)> = batch
            .par_chunks(CHUNK_ROWS)
            .map_init(
                || Workspace::new(self, CHUNK_ROWS),
                |ws, chunk| {
                    let rows = chunk.len();
                    ws.load_positions(chunk.iter().map(|s| s.position));
                    self.forward_chunk(ws, rows);
                    self.input_gradient_chunk(ws, rows);
                    let (sdf_sum, eik_sum) = ws.loss_adjoints(chunk, scale);
                    let grad = want_grad.then(|| {
                        let mut g = vec![T::zero(); self.params.len()];
                        self.backward_chunk(ws, rows, weights.eikonal != 0.0, &mut g);
                        g
                    });
                    (sdf_sum, eik_sum, grad)
                },
            )
            .collect();

        let mut sdf_sum = 0.0;
        let mut eik_sum = 0.0;
        let mut grad = want_grad.then(|| vec![T::zero(); self.params.len()]);
        for (s, e, g) in parts {
            sdf_sum += s;
            eik_sum += e;
            if let (Some(total), Some(g)) = (grad.as_mut(), g) {
                for (t, v) in total.iter_mut().zip(g) {
                    *t += v;
                }
            }
        }
        let sdf = sdf_sum / n;
        let eikonal = eik_sum / n;
        let loss = LossBreakdown { total: weights.sdf * sdf + weights.eikonal * eikonal, sdf, eikonal };
        Ok((loss, grad))
    }

    fn forward_chunk(&self, ws: &mut Workspace<T>, rows: usize) {
        let hidden = self.hidden_layers();
        for li in 0..hidden {
            let l = self.layout[li];
            let w = &self.params[l.weight..l.bias];
            let b = &self.params[l.bias..l.bias + l.n_out];
            let (h_in, h_out) = pair(&mut ws.h, li);
            let z = &mut h_out[..rows * l.n_out];
            T::gemm(
                T::one(),
                MatRef::new(&h_in[..rows * l.n_in], rows, l.n_in),
                MatRef::transposed(w, l.n_in, l.n_out),
                T::zero(),
                z,
            );
            for row in z.chunks_exact_mut(l.n_out) {
                for (zi, bi) in row.iter_mut().zip(b) {
                    *zi += *bi;
                }
            }
            T::sin_cos_scaled(z, self.omega0, &mut ws.cos[li][..rows * l.n_out]);
        }
        let out = self.layout[hidden];
        let w = &self.params[out.weight..out.bias];
        let b = self.params[out.bias];
        let h = &ws.h[hidden];
        for r in 0..rows {
            let row = &h[r * out.n_in..(r + 1) * out.n_in];
            ws.f[r] = row.iter().zip(w).map(|(a, b)| *a * *b).sum::<T>() + b;
        }
    }

    fn input_gradient_chunk(&self, ws: &mut Workspace<T>, rows: usize) {
        let hidden = self.hidden_layers();
        let out = self.layout[hidden];
        let w_out = &self.params[out.weight..out.bias];
        for row in ws.g[hidden][..rows * out.n_in].chunks_exact_mut(out.n_in) {
            row.copy_from_slice(w_out);
        }
        let omega = self.omega0;
        for li in (0..hidden).rev() {
            let l = self.layout[li];
            let n = rows * l.n_out;
            let d = &mut ws.d[li][..n];
            for ((di, gi), ci) in d.iter_mut().zip(&ws.g[li + 1][..n]).zip(&ws.cos[li][..n]) {
                *di = omega * *gi * *ci;
            }
            T::gemm(
                T::one(),
                MatRef::new(d, rows, l.n_out),
                MatRef::new(&self.params[l.weight..l.bias], l.n_out, l.n_in),
                T::zero(),
                &mut ws.g[li][..rows * l.n_in],
            );
        }
    }

    /// Accumulates parameter gradients for a chunk whose output and
    /// input-gradient adjoints are already in the workspace.
    fn backward_chunk(&self, ws: &mut Workspace<T>, rows: usize, eikonal_path: bool, grad: &mut [T]) {
        let hidden = self.hidden_layers();
        let omega = self.omega0;
        let out = self.layout[hidden];

        // Through the input-gradient computation, from the input upwards.
        if eikonal_path {
            for li in 0..hidden {
                let l = self.layout[li];
                let w = &self.params[l.weight..l.bias];
                let n = rows * l.n_out;
                T::gemm(
                    T::one(),
                    MatRef::transposed(&ws.d[li][..n], l.n_out, rows),
                    MatRef::new(&ws.gbar[li][..rows * l.n_in], rows, l.n_in),
                    T::one(),
                    &mut grad[l.weight..l.bias],
                );
                let dbar = &mut ws.scratch[..n];
                T::gemm(
                    T::one(),
                    MatRef::new(&ws.gbar[li][..rows * l.n_in], rows, l.n_in),
                    MatRef::transposed(w, l.n_in, l.n_out),
                    T::zero(),
                    dbar,
                );
                let omega_sq = omega * omega;
                let (_, gbar_next) = pair(&mut ws.gbar, li);
                let zbar = &mut ws.zbar[li][..n];
                let it = dbar
                    .iter()
                    .zip(&ws.cos[li][..n])
                    .zip(&ws.g[li + 1][..n])
                    .zip(&ws.h[li + 1][..n])
                    .zip(gbar_next[..n].iter_mut().zip(zbar.iter_mut()));
                for ((((db, c), g), s), (gb, zb)) in it {
                    *gb = omega * *db * *c;
                    *zb = -omega_sq * *db * *g * *s;
                }
            }
            let gw = &mut grad[out.weight..out.bias];
            for row in ws.gbar[hidden][..rows * out.n_in].chunks_exact(out.n_in) {
                for (g, v) in gw.iter_mut().zip(row) {
                    *g += *v;
                }
            }
        } else {
            for li in 0..hidden {
                let n = rows * self.layout[li].n_out;
                ws.zbar[li][..n].iter_mut().for_each(|v| *v = T::zero());
            }
        }

        // Through the forward pass, from the output downwards.
        let w_out = &self.params[out.weight..out.bias];
        {
            let h = &ws.h[hidden];
            let gw = &mut grad[out.weight..out.bias];
            let mut gb = T::zero();
            for r in 0..rows {
                let fb = ws.fbar[r];
                gb += fb;
                for (g, v) in gw.iter_mut().zip(&h[r * out.n_in..(r + 1) * out.n_in]) {
                    *g += fb * *v;
                }
            }
            grad[out.bias] += gb;
            let hbar = &mut ws.scratch[..rows * out.n_in];
            for (r, row) in hbar.chunks_exact_mut(out.n_in).enumerate() {
                let fb = ws.fbar[r];
                for (hb, w) in row.iter_mut().zip(w_out) {
                    *hb = fb * *w;
                }
            }
        }
        for li in (0..hidden).rev() {
            let l = self.layout[li];
            let n = rows * l.n_out;
            let zbar = &mut ws.zbar[li][..n];
            for ((zb, hb), c) in zbar.iter_mut().zip(&ws.scratch[..n]).zip(&ws.cos[li][..n]) {
                *zb += omega * *hb * *c;
            }
            T::gemm(
                T::one(),
                MatRef::transposed(zbar, l.n_out, rows),
                MatRef::new(&ws.h[li][..rows * l.n_in], rows, l.n_in),
                T::one(),
                &mut grad[l.weight..l.bias],
            );
            let gb = &mut grad[l.bias..l.bias + l.n_out];
            for row in zbar.chunks_exact(l.n_out) {
                for (g, v) in gb.iter_mut().zip(row) {
                    *g += *v;
                }
            }
            if li > 0 {
                T::gemm(
                    T::one(),
                    MatRef::new(zbar, rows, l.n_out),
                    MatRef::new(&self.params[l.weight..l.bias], l.n_out, l.n_in),
                    T::zero(),
                    &mut ws.scratch[..rows * l.n_in],
                );
            }
        }
    }
}

pub(crate) fn init_bound(fan_in: usize, omega0: f64) -> f64 {
    (6.0 / fan_in as f64).sqrt() / omega0
}

fn check_inputs(xs: &[Vec3]) -> Result<(), SirenError> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(SirenError::NonFiniteInput)
    }
}

fn pair<T>(v: &mut [Vec<T>], i: usize) -> (&mut Vec<T>, &mut Vec<T>) {
    let (a, b) = v.split_at_mut(i + 1);
    (&mut a[i], &mut b[0])
}

#[derive(Clone, Copy)]
struct Scale {
    sdf: f64,
    eikonal: f64,
}

/// Per-chunk activations and adjoints, reused across chunks.
struct Workspace<T> {
    /// `h[0]` holds inputs; `h[l]` the sine outputs of hidden layer `l`.
    h: Vec<Vec<T>>,
    cos: Vec<Vec<T>>,
    /// `g[l] = ∂f/∂h[l]`.
    g: Vec<Vec<T>>,
    d: Vec<Vec<T>>,
    f: Vec<T>,
    fbar: Vec<T>,
    gbar: Vec<Vec<T>>,
    zbar: Vec<Vec<T>>,
    scratch: Vec<T>,
}

impl<T: Real> Workspace<T> {
    fn new(net: &SirenNetwork<T>, rows: usize) -> Self {
        let dims = &net.layer_dims;
        let hidden = net.hidden_layers();
        let buf = |n: usize| vec![T::zero(); rows * n];
        let widest = dims.iter().copied().max().unwrap_or(1);
        Self {
            h: (0..=hidden).map(|l| buf(dims[l])).collect(),
            cos: (1..=hidden).map(|l| buf(dims[l])).collect(),
            g: (0..=hidden).map(|l| buf(dims[l])).collect(),
            d: (1..=hidden).map(|l| buf(dims[l])).collect(),
            f: vec![T::zero(); rows],
            fbar: vec![T::zero(); rows],
            gbar: (0..=hidden).map(|l| buf(dims[l])).collect(),
            zbar: (1..=hidden).map(|l| buf(dims[l])).collect(),
            scratch: buf(widest),
        }
    }

    fn load_positions(&mut self, xs: impl Iterator<Item = Vec3>) {
        for (r, x) in xs.enumerate() {
            self.h[0][3 * r] = T::from_f64_lossy(x.x);
            self.h[0][3 * r + 1] = T::from_f64_lossy(x.y);
            self.h[0][3 * r + 2] = T::from_f64_lossy(x.z);
        }
    }

    fn gradient_row(&self, r: usize) -> Vec3 {
        let g = &self.g[0];
        Vec3::new(g[3 * r].to_f64_lossy(), g[3 * r + 1].to_f64_lossy(), g[3 * r + 2].to_f64_lossy())
    }

    /// Fills output and input-gradient adjoints; returns the chunk sums of
    /// the SDF and Eikonal residuals.
    fn loss_adjoints(&mut self, chunk: &[SdfSample], scale: Scale) -> (f64, f64) {
        let mut sdf_sum = 0.0;
        let mut eik_sum = 0.0;
        for (r, s) in chunk.iter().enumerate() {
            let residual = self.f[r].to_f64_lossy() - s.sdf;
            sdf_sum += residual.abs();
            self.fbar[r] = T::from_f64_lossy(scale.sdf * sign(residual));

            let g = self.gradient_row(r);
            let norm = g.norm();
            eik_sum += (norm - 1.0).abs();
            let coef = if norm > 0.0 { scale.eikonal * sign(norm - 1.0) / norm } else { 0.0 };
            for a in 0..3 {
                self.gbar[0][3 * r + a] = T::from_f64_lossy(coef * g[a]);
            }
        }
        (sdf_sum, eik_sum)
    }
}

/// Sign with `sign(0) = 0`.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
