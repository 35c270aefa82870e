use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DiffusionError, NoiseSchedule, Result};

/// Anything that predicts the noise in `x_t` at step `t`.
pub trait Denoiser: Sync {
    fn dim(&self) -> usize;
    fn predict_noise(&self, x_t: &[f64], t: usize) -> Vec<f64>;
}

/// Layer sizes of the reference MLP denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpArch {
    pub input_dim: usize,
    pub hidden: [usize; 2],
    /// Width of the sinusoidal time embedding (even).
    pub time_embed: usize,
}

impl MlpArch {
    pub fn new(input_dim: usize, width: usize, time_embed: usize) -> Self {
        Self {
            input_dim,
            hidden: [width, width],
            time_embed,
        }
    }

    fn layer_dims(&self) -> [(usize, usize); 3] {
        [
            (self.hidden[0], self.input_dim + self.time_embed),
            (self.hidden[1], self.hidden[0]),
            (self.input_dim, self.hidden[1]),
        ]
    }

    /// `(weight offset, bias offset)` of each layer in the flat vector.
    fn offsets(&self) -> [(usize, usize); 3] {
        let mut off = 0;
        let mut out = [(0, 0); 3];
        for (i, (rows, cols)) in self.layer_dims().into_iter().enumerate() {
            out[i] = (off, off + rows * cols);
            off += rows * cols + rows;
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(r, c)| r * c + r).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.contains(&0) || self.time_embed % 2 != 0 {
            return Err(DiffusionError::Model(format!("invalid architecture {self:?}")));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of an integer timestep: `[sin(tω_i)…, cos(tω_i)…]`
/// with `ω_i = 10000^(−i/half)`.
pub fn time_embedding(t: usize, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// One training example: clean signal, timestep, and the noise draw.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub x0: &'a [f64],
    pub t: usize,
    pub eps: &'a [f64],
}

/// Two-hidden-layer SiLU MLP over `[x_t, emb(t)]` with a linear output head.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpDenoiser {
    arch: MlpArch,
    params: Vec<f64>,
}

struct Activations {
    input: Array2<f64>,
    z1: Array2<f64>,
    h1: Array2<f64>,
    z2: Array2<f64>,
    h2: Array2<f64>,
    out: Array2<f64>,
}

impl MlpDenoiser {
    /// Uniform `±1/√fan_in` initialization for weights and biases.
    pub fn init(arch: MlpArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(arch.param_count());
        for (rows, cols) in arch.layer_dims() {
            let bound = 1.0 / (cols as f64).sqrt();
            for _ in 0..rows * cols + rows {
                params.push(rng.random_range(-bound..bound));
            }
        }
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: MlpArch, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(DiffusionError::Model(format!(
                "expected {} parameters, got {}",
                arch.param_count(),
                params.len()
            )));
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> MlpArch {
        self.arch
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

    fn weight(&self, layer: usize) -> ArrayView2<'_, f64> {
        let (rows, cols) = self.arch.layer_dims()[layer];
        let (w, _) = self.arch.offsets()[layer];
        ArrayView2::from_shape((rows, cols), &self.params[w..w + rows * cols]).expect("layout")
    }

    fn bias(&self, layer: usize) -> ArrayView1<'_, f64> {
        let (rows, _) = self.arch.layer_dims()[layer];
        let (_, b) = self.arch.offsets()[layer];
        ArrayView1::from(&self.params[b..b + rows])
    }

    fn build_input(&self, rows: &[(&[f64], usize)]) -> Array2<f64> {
        let (d, e) = (self.arch.input_dim, self.arch.time_embed);
        let mut input = Array2::zeros((rows.len(), d + e));
        for (i, (x, t)) in rows.iter().enumerate() {
            let mut row = input.row_mut(i);
            for (j, v) in x.iter().enumerate() {
                row[j] = *v;
            }
            for (j, v) in time_embedding(*t, e).into_iter().enumerate() {
                row[d + j] = v;
            }
        }
        input
    }

    fn forward_batch(&self, input: Array2<f64>) -> Activations {
        let z1 = input.dot(&self.weight(0).t()) + &self.bias(0);
        let h1 = z1.mapv(silu);
        let z2 = h1.dot(&self.weight(1).t()) + &self.bias(1);
        let h2 = z2.mapv(silu);
        let out = h2.dot(&self.weight(2).t()) + &self.bias(2);
        Activations {
            input,
            z1,
            h1,
            z2,
            h2,
            out,
        }
    }

    /// Noise predictions for several `(x_t, t)` pairs at once.
    pub fn predict_batch(&self, rows: &[(&[f64], usize)]) -> Vec<Vec<f64>> {
        let acts = self.forward_batch(self.build_input(rows));
        acts.out.outer_iter().map(|r| r.to_vec()).collect()
    }

    /// Mean over the batch of `‖ε − Z(√ᾱ_t x0 + √(1−ᾱ_t) ε, t)‖²` and its exact
    /// gradient with respect to the flat parameter vector.
    pub fn loss_and_gradient(
        &self,
        batch: &[Example<'_>],
        schedule: &NoiseSchedule,
    ) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(DiffusionError::EmptyBatch);
        }
        let d = self.arch.input_dim;
        let mut noisy = Vec::with_capacity(batch.len());
        let mut target = Array2::zeros((batch.len(), d));
        for (i, ex) in batch.iter().enumerate() {
            if ex.x0.len() != d || ex.eps.len() != d {
                return Err(DiffusionError::Shape(d, ex.x0.len().max(ex.eps.len())));
            }
            noisy.push(super::forward_sample(ex.x0, ex.t, ex.eps, schedule)?);
            for (j, v) in ex.eps.iter().enumerate() {
                target[[i, j]] = *v;
            }
        }
        let rows: Vec<(&[f64], usize)> = noisy.iter().zip(batch).map(|(x, ex)| (x.as_slice(), ex.t)).collect();
        let acts = self.forward_batch(self.build_input(&rows));

        let scale = 1.0 / batch.len() as f64;
        let resid = &acts.out - &target;
        let loss = resid.iter().map(|v| v * v).sum::<f64>() * scale;
        if !loss.is_finite() {
            return Err(DiffusionError::NonFinite("loss".into()));
        }

        let mut grad = vec![0.0; self.params.len()];
        let offsets = self.arch.offsets();
        let dims = self.arch.layer_dims();
        let d_out = resid * (2.0 * scale);

        let write = |layer: usize, delta: &Array2<f64>, inputs: &Array2<f64>, grad: &mut [f64]| {
            let (rows, cols) = dims[layer];
            let (w, b) = offsets[layer];
            let mut gw = ArrayViewMut2::from_shape((rows, cols), &mut grad[w..w + rows * cols]).expect("layout");
            general_mat_mul(1.0, &delta.t(), inputs, 0.0, &mut gw);
            for (g, v) in grad[b..b + rows].iter_mut().zip(delta.sum_axis(Axis(0))) {
                *g = v;
            }
        };

        write(2, &d_out, &acts.h2, &mut grad);
        let mut d_z2 = d_out.dot(&self.weight(2));
        d_z2.zip_mut_with(&acts.z2, |g, &z| *g *= silu_grad(z));
        write(1, &d_z2, &acts.h1, &mut grad);
        let mut d_z1 = d_z2.dot(&self.weight(1));
        d_z1.zip_mut_with(&acts.z1, |g, &z| *g *= silu_grad(z));
        write(0, &d_z1, &acts.input, &mut grad);

        if grad.iter().any(|g| !g.is_finite()) {
            return Err(DiffusionError::NonFinite("gradient".into()));
        }
        Ok((loss, grad))
    }
}

impl Denoiser for MlpDenoiser {
    fn dim(&self) -> usize {
        self.arch.input_dim
    }

    fn predict_noise(&self, x_t: &[f64], t: usize) -> Vec<f64> {
        self.predict_batch(&[(x_t, t)]).pop().expect("one row")
    }
}

/// `‖ε − Z(√ᾱ_t x0 + √(1−ᾱ_t) ε, t)‖²` for a single example.
pub fn training_loss<D: Denoiser + ?Sized>(
    model: &D,
    x0: &[f64],
    t: usize,
    eps: &[f64],
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let x_t = super::forward_sample(x0, t, eps, schedule)?;
    let pred = model.predict_noise(&x_t, t);
    if pred.len() != eps.len() {
        return Err(DiffusionError::Shape(eps.len(), pred.len()));
    }
    Ok(eps.iter().zip(&pred).map(|(e, p)| (e - p) * (e - p)).sum())
}
