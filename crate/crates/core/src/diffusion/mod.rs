//! Denoising diffusion probabilistic model built from scratch: linear noise
//! schedule, forward marginal, ε-prediction MLP with exact gradients, Adam
//! training, and ancestral sampling.

mod model;
mod schedule;
mod train;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

pub use model::{time_embedding, training_loss, Denoiser, Example, MlpArch, MlpDenoiser};
pub use schedule::NoiseSchedule;
pub use train::{train, train_with, Adam, Checkpoint, TrainConfig, TrainState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("timestep {0} outside 1..={1}")]
    TimestepOutOfRange(usize, usize),
    #[error("shape mismatch: expected {0}, got {1}")]
    Shape(usize, usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("training diverged at {0}")]
    Diverged(String),
    #[error("invalid model: {0}")]
    Model(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = DiffusionError> = std::result::Result<T, E>;

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn forward_sample(x0: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    if x0.len() != eps.len() {
        return Err(DiffusionError::Shape(x0.len(), eps.len()));
    }
    let a = schedule.alpha_bar(t).sqrt();
    let b = (1.0 - schedule.alpha_bar(t)).sqrt();
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// How the clean-signal estimate is recovered from the predicted noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum X0Formula {
    /// `(x_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t`, the exact inverse of the forward marginal.
    #[default]
    Corrected,
    /// `(x_t − ε̂) / √ᾱ_t`, without the noise scale.
    Literal,
}

/// `x_{0|t}` from `x_t` and a noise estimate.
pub fn x0_from_noise(x_t: &[f64], eps: &[f64], t: usize, schedule: &NoiseSchedule, formula: X0Formula) -> Vec<f64> {
    let inv = 1.0 / schedule.alpha_bar(t).sqrt();
    let k = match formula {
        X0Formula::Corrected => (1.0 - schedule.alpha_bar(t)).sqrt(),
        X0Formula::Literal => 1.0,
    };
    x_t.iter().zip(eps).map(|(x, e)| (x - k * e) * inv).collect()
}

/// `x_{0|t}` using the model's noise prediction.
pub fn predict_x0<D: Denoiser + ?Sized>(
    model: &D,
    x_t: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
    formula: X0Formula,
) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    let eps = model.predict_noise(x_t, t);
    if eps.len() != x_t.len() {
        return Err(DiffusionError::Shape(x_t.len(), eps.len()));
    }
    Ok(x0_from_noise(x_t, &eps, t, schedule, formula))
}

/// Posterior mean in its `x0` form:
/// `√ᾱ_{t−1}β_t/(1−ᾱ_t)·x0 + √α_t(1−ᾱ_{t−1})/(1−ᾱ_t)·x_t`.
pub fn posterior_mean(x_t: &[f64], x0: &[f64], t: usize, schedule: &NoiseSchedule) -> Vec<f64> {
    let (c0, ct) = (schedule.x0_coef(t), schedule.xt_coef(t));
    x_t.iter().zip(x0).map(|(xt, x0)| c0 * x0 + ct * xt).collect()
}

/// Posterior mean in its ε form: `(x_t − ε·β_t/√(1−ᾱ_t)) / √α_t`.
pub fn posterior_mean_from_noise(x_t: &[f64], eps: &[f64], t: usize, schedule: &NoiseSchedule) -> Vec<f64> {
    let k = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let inv = 1.0 / schedule.alpha(t).sqrt();
    x_t.iter().zip(eps).map(|(x, e)| (x - k * e) * inv).collect()
}

/// Options shared by the unconditional and null-space samplers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    pub x0_formula: X0Formula,
    /// Clamp `x_{0|t}` to `[-1, 1]` before it is used.
    pub clip_x0: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            x0_formula: X0Formula::Corrected,
            clip_x0: true,
        }
    }
}

pub fn standard_normal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn clip_unit(x: &mut [f64]) {
    for v in x {
        *v = v.clamp(-1.0, 1.0);
    }
}

/// Draws `x_T ~ N(0, I)` and runs `t = T..1` through the posterior
/// `N(μ_t(x_t, x_{0|t}), σ_t²)`. No noise is added at the last step.
pub fn ancestral_sample<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    rng: &mut R,
    options: SampleOptions,
) -> Result<Vec<f64>> {
    let mut x = standard_normal(model.dim(), rng);
    for t in (1..=schedule.steps()).rev() {
        let mut x0 = predict_x0(model, &x, t, schedule, options.x0_formula)?;
        if options.clip_x0 {
            clip_unit(&mut x0);
        }
        let mut next = posterior_mean(&x, &x0, t, schedule);
        if t > 1 {
            let s = schedule.sigma(t);
            for v in next.iter_mut() {
                *v += s * rng.sample::<f64, _>(StandardNormal);
            }
        }
        x = next;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Zero(usize);

    impl Denoiser for Zero {
        fn dim(&self) -> usize {
            self.0
        }
        fn predict_noise(&self, x_t: &[f64], _t: usize) -> Vec<f64> {
            vec![0.0; x_t.len()]
        }
    }

    /// Returns a fixed noise vector regardless of input.
    struct Fixed(Vec<f64>);

    impl Denoiser for Fixed {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn predict_noise(&self, _x_t: &[f64], _t: usize) -> Vec<f64> {
            self.0.clone()
        }
    }

    #[test]
    fn forward_without_noise_scales() {
        let s = NoiseSchedule::default_linear();
        let x0 = [0.5, -1.0];
        let xt = forward_sample(&x0, 300, &[0.0, 0.0], &s).unwrap();
        assert_eq!(xt, vec![s.alpha_bar(300).sqrt() * 0.5, -s.alpha_bar(300).sqrt()]);
        assert!(forward_sample(&x0, 0, &[0.0, 0.0], &s).is_err());
        assert!(forward_sample(&x0, 1001, &[0.0, 0.0], &s).is_err());
    }

    #[test]
    fn forward_at_final_step_is_mostly_noise() {
        let s = NoiseSchedule::default_linear();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0: Vec<f64> = (0..256).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let eps = standard_normal(256, &mut rng);
        let xt = forward_sample(&x0, 1000, &eps, &s).unwrap();
        let num: f64 = xt.iter().zip(&eps).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = eps.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(num / den < 0.02, "{}", num / den);
    }

    #[test]
    fn forward_marginal_statistics() {
        let s = NoiseSchedule::default_linear();
        let t = 500;
        let x0 = [0.8, -0.3];
        let n = 20_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let eps = standard_normal(2, &mut rng);
            let xt = forward_sample(&x0, t, &eps, &s).unwrap();
            for j in 0..2 {
                sum[j] += xt[j];
                sq[j] += xt[j] * xt[j];
            }
        }
        let var_true = 1.0 - s.alpha_bar(t);
        for j in 0..2 {
            let mean = sum[j] / n as f64;
            let var = sq[j] / n as f64 - mean * mean;
            assert!((mean - s.alpha_bar(t).sqrt() * x0[j]).abs() < 4.0 * (var_true / n as f64).sqrt());
            assert!((var / var_true - 1.0).abs() < 0.03);
        }
    }

    #[test]
    fn oracle_noise_inverts_forward() {
        let s = NoiseSchedule::default_linear();
        let x0 = [0.3, -0.7, 0.9];
        let eps = vec![0.4, 1.3, -0.8];
        for t in [1, 10, 500, 999] {
            let xt = forward_sample(&x0, t, &eps, &s).unwrap();
            let est = predict_x0(&Fixed(eps.clone()), &xt, t, &s, X0Formula::Corrected).unwrap();
            for (a, b) in est.iter().zip(&x0) {
                assert!((a - b).abs() < 1e-10, "t={t}");
            }
        }
    }

    #[test]
    fn zero_model_and_literal_formula() {
        let s = NoiseSchedule::default_linear();
        let xt = [0.2, -0.4];
        let est = predict_x0(&Zero(2), &xt, 400, &s, X0Formula::Corrected).unwrap();
        let k = 1.0 / s.alpha_bar(400).sqrt();
        assert_eq!(est, vec![0.2 * k, -0.4 * k]);
        let lit = predict_x0(&Fixed(vec![1.0, 1.0]), &xt, 400, &s, X0Formula::Literal).unwrap();
        assert!((lit[0] - (0.2 - 1.0) * k).abs() < 1e-12);
    }

    #[test]
    fn first_step_continuity() {
        let s = NoiseSchedule::default_linear();
        let xt = [0.25];
        let e = [0.6];
        let est = x0_from_noise(&xt, &e, 1, &s, X0Formula::Corrected)[0];
        let ab = s.alpha_bar(1);
        let closed = xt[0] / ab.sqrt() - e[0] * (1.0 - ab).sqrt() / ab.sqrt();
        assert!((est - closed).abs() < 1e-14);
        // ᾱ_1 ≈ 1 so the estimate stays close to x_t
        assert!((est - xt[0]).abs() < 0.01);
    }

    #[test]
    fn posterior_mean_forms_agree() {
        let s = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in [2, 50, 100, 199, 200] {
            let x0: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let eps = standard_normal(8, &mut rng);
            let xt = forward_sample(&x0, t, &eps, &s).unwrap();
            let inverted = x0_from_noise(&xt, &eps, t, &s, X0Formula::Corrected);
            let a = posterior_mean(&xt, &inverted, t, &s);
            let b = posterior_mean_from_noise(&xt, &eps, t, &s);
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-10, "t={t}");
            }
        }
    }

    #[test]
    fn single_step_sampler_returns_mean() {
        let s = NoiseSchedule::linear(1, 0.1, 0.1).unwrap();
        let model = Fixed(vec![0.5, -0.5]);
        let opts = SampleOptions { clip_x0: false, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = ancestral_sample(&model, &s, &mut rng, opts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xt = standard_normal(2, &mut rng);
        let x0 = x0_from_noise(&xt, &[0.5, -0.5], 1, &s, X0Formula::Corrected);
        assert_eq!(out, posterior_mean(&xt, &x0, 1, &s));
    }

    #[test]
    fn sampler_is_seed_deterministic() {
        let s = NoiseSchedule::linear(30, 1e-3, 0.05).unwrap();
        let m = MlpDenoiser::init(MlpArch::new(6, 16, 4), 2).unwrap();
        let run = |seed| ancestral_sample(&m, &s, &mut ChaCha8Rng::seed_from_u64(seed), SampleOptions::default()).unwrap();
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }
}
