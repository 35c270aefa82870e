//! Null-space diffusion sampling for linear inverse problems.
//!
//! Each reverse step predicts `x_{0|t}`, replaces its range-space component
//! with what the measurement dictates, and keeps the model's null-space
//! component. With measurement noise the replacement is softened by `λ_t` and
//! the injected noise shrunk to `√γ_t` so the per-step variance still matches
//! the schedule.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{
    clip_unit, posterior_mean, predict_x0, standard_normal, DiffusionError, Denoiser, NoiseSchedule, SampleOptions,
};
use crate::linop::{ComplexVector, LinopError, MaskedChannelOp};

#[derive(Debug, Error)]
pub enum NullspaceError {
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Linop(#[from] LinopError),
    #[error("measurement noise std must be finite and non-negative, got {0}")]
    InvalidSigma(f64),
    #[error("empty observation")]
    EmptyObservation,
    #[error("pseudo-inverse of the measurement is not real (imaginary part {0:e})")]
    ComplexObservation(f64),
    #[error("model dimension {model} does not match signal length {signal}")]
    ModelShape { model: usize, signal: usize },
    #[error("trace output: {0}")]
    Trace(String),
}

pub type Result<T, E = NullspaceError> = std::result::Result<T, E>;

/// A masked-diagonal measurement `r = A x + n` of a real signal.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseProblem {
    op: MaskedChannelOp,
    measurement: ComplexVector,
    // A†r, real
    observation: Vec<f64>,
    sigma_r: f64,
}

impl InverseProblem {
    /// From a raw subcarrier-domain measurement. `A†r` must be real up to
    /// rounding since the signals are real.
    pub fn new(op: MaskedChannelOp, measurement: ComplexVector, sigma_r: f64) -> Result<Self> {
        check_sigma(sigma_r)?;
        let back = op.pinv_apply(&measurement)?;
        let scale = back.re.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let imag = back.max_abs_imag();
        if imag > 1e-9 * scale {
            return Err(NullspaceError::ComplexObservation(imag));
        }
        Ok(Self {
            op,
            measurement,
            observation: back.re,
            sigma_r,
        })
    }

    /// From a pixel-domain observation (values in uncarried slots are
    /// ignored). This is the natural form after power control, where `A` is a
    /// pure mask.
    pub fn from_observation(op: MaskedChannelOp, observation: &[f64], sigma_r: f64) -> Result<Self> {
        let measurement = op.apply_real(observation)?;
        Self::new(op, measurement, sigma_r)
    }

    pub fn op(&self) -> &MaskedChannelOp {
        &self.op
    }

    pub fn measurement(&self) -> &ComplexVector {
        &self.measurement
    }

    /// `A†r`: the observation in signal space, zero in uncarried slots.
    pub fn observation(&self) -> &[f64] {
        &self.observation
    }

    pub fn sigma_r(&self) -> f64 {
        self.sigma_r
    }

    /// Observed values in the carried slots only.
    pub fn carried_values(&self) -> Vec<f64> {
        self.op.slot_of().iter().map(|&j| self.observation[j]).collect()
    }

    /// Noiseless mode applies the exact range-space replacement. An empty
    /// operator carries nothing, so noise handling is moot there too.
    pub fn is_noiseless(&self) -> bool {
        self.sigma_r == 0.0 || self.op.rank() == 0
    }

    /// `‖A x − r‖∞`.
    pub fn residual(&self, x: &[f64]) -> Result<f64> {
        let ax = self.op.apply_real(x)?;
        let mut worst = 0.0f64;
        for i in 0..ax.len() {
            let (a, b) = (ax.get(i), self.measurement.get(i));
            worst = worst.max((a.0 - b.0).abs()).max((a.1 - b.1).abs());
        }
        Ok(worst)
    }
}

fn check_sigma(sigma_r: f64) -> Result<()> {
    if !(sigma_r.is_finite() && sigma_r >= 0.0) {
        return Err(NullspaceError::InvalidSigma(sigma_r));
    }
    Ok(())
}

/// Which small-noise branch of `λ_t` to use when `σ_t < a_t·σ_r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaRule {
    /// `λ_t = σ_t / (a_t·σ_r)`, which makes `a_t·λ_t·σ_r = σ_t` and `γ_t = 0`.
    #[default]
    Saturating,
    /// `λ_t = σ_t / σ_r`; `γ_t` is clamped at zero when it would go negative.
    Unscaled,
}

/// Per-step range-correction weights `λ_t` and noise variances `γ_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionParams {
    lambda: Vec<f64>,
    gamma: Vec<f64>,
}

impl CorrectionParams {
    pub fn lambda(&self, t: usize) -> f64 {
        self.lambda[t - 1]
    }

    pub fn gamma(&self, t: usize) -> f64 {
        self.gamma[t - 1]
    }

    pub fn steps(&self) -> usize {
        self.lambda.len()
    }
}

/// `λ_t = 1` when `σ_t ≥ a_t·σ_r`, otherwise the rule's small-noise value;
/// `γ_t = max(0, σ_t² − (a_t·λ_t·σ_r)²)` with `a_t = √ᾱ_{t−1}β_t/(1−ᾱ_t)`.
pub fn correction_params(schedule: &NoiseSchedule, sigma_r: f64, rule: LambdaRule) -> Result<CorrectionParams> {
    check_sigma(sigma_r)?;
    let steps = schedule.steps();
    let mut lambda = Vec::with_capacity(steps);
    let mut gamma = Vec::with_capacity(steps);
    for t in 1..=steps {
        let a = schedule.x0_coef(t);
        let s = schedule.sigma(t);
        let l = if s >= a * sigma_r {
            1.0
        } else {
            match rule {
                LambdaRule::Saturating => s / (a * sigma_r),
                LambdaRule::Unscaled => (s / sigma_r).min(1.0),
            }
        };
        lambda.push(l);
        gamma.push((s * s - (a * l * sigma_r).powi(2)).max(0.0));
    }
    Ok(CorrectionParams { lambda, gamma })
}

fn check_len(problem: &InverseProblem, x: &[f64]) -> Result<()> {
    if x.len() != problem.op.signal_len() {
        return Err(LinopError::DimensionMismatch {
            expected: problem.op.signal_len(),
            got: x.len(),
        }
        .into());
    }
    Ok(())
}

/// `A†r + (I − A†A)·x0t`.
pub fn rectify_x0(x0t: &[f64], problem: &InverseProblem) -> Result<Vec<f64>> {
    check_len(problem, x0t)?;
    let mut out = x0t.to_vec();
    for &j in problem.op.slot_of() {
        out[j] = problem.observation[j];
    }
    Ok(out)
}

/// `x0t − λ·A†(A·x0t − r)`. `λ = 1` coincides with [`rectify_x0`].
pub fn rectify_x0_noisy(x0t: &[f64], problem: &InverseProblem, lambda: f64) -> Result<Vec<f64>> {
    if lambda == 1.0 {
        return rectify_x0(x0t, problem);
    }
    check_len(problem, x0t)?;
    let mut out = x0t.to_vec();
    for &j in problem.op.slot_of() {
        out[j] -= lambda * (x0t[j] - problem.observation[j]);
    }
    Ok(out)
}

/// Sampler switches on top of the unconditional [`SampleOptions`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SamplerOptions {
    pub base: SampleOptions,
    pub lambda_rule: LambdaRule,
}

/// One step's diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub t: usize,
    /// `‖A x̂_{0|t} − r‖∞` after rectification.
    pub residual: f64,
    pub lambda: f64,
    pub gamma: f64,
}

/// A reverse step `x_t → x_{t−1}`. Returns the new sample and the rectified
/// `x̂_{0|t}`.
#[allow(clippy::too_many_arguments)]
pub fn step<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    x_t: &[f64],
    t: usize,
    model: &D,
    problem: &InverseProblem,
    params: &CorrectionParams,
    schedule: &NoiseSchedule,
    options: SamplerOptions,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut x0 = predict_x0(model, x_t, t, schedule, options.base.x0_formula)?;
    if options.base.clip_x0 {
        clip_unit(&mut x0);
    }
    let noiseless = problem.is_noiseless();
    let rectified = if noiseless {
        rectify_x0(&x0, problem)?
    } else {
        rectify_x0_noisy(&x0, problem, params.lambda(t))?
    };
    let mut next = posterior_mean(x_t, &rectified, t, schedule);
    if t > 1 {
        let s = if noiseless { schedule.sigma(t) } else { params.gamma(t).sqrt() };
        for v in next.iter_mut() {
            *v += s * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok((next, rectified))
}

/// Runs `t = T..1` from `x_T ~ N(0, I)` and returns `x_0`.
pub fn sample<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    problem: &InverseProblem,
    options: SamplerOptions,
    rng: &mut R,
) -> Result<Vec<f64>> {
    run(model, schedule, problem, options, rng, None)
}

/// [`sample`] that also records one [`TraceRow`] per step.
pub fn sample_with_trace<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    problem: &InverseProblem,
    options: SamplerOptions,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<TraceRow>)> {
    let mut trace = Vec::with_capacity(schedule.steps());
    let out = run(model, schedule, problem, options, rng, Some(&mut trace))?;
    Ok((out, trace))
}

fn run<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    problem: &InverseProblem,
    options: SamplerOptions,
    rng: &mut R,
    mut trace: Option<&mut Vec<TraceRow>>,
) -> Result<Vec<f64>> {
    let dim = problem.op.signal_len();
    if model.dim() != dim {
        return Err(NullspaceError::ModelShape {
            model: model.dim(),
            signal: dim,
        });
    }
    let params = if problem.is_noiseless() {
        correction_params(schedule, 0.0, options.lambda_rule)?
    } else {
        correction_params(schedule, problem.sigma_r, options.lambda_rule)?
    };
    let mut x = standard_normal(dim, rng);
    for t in (1..=schedule.steps()).rev() {
        let (next, rectified) = step(&x, t, model, problem, &params, schedule, options, rng)?;
        if let Some(rows) = trace.as_deref_mut() {
            rows.push(TraceRow {
                t,
                residual: problem.residual(&rectified)?,
                lambda: params.lambda(t),
                gamma: params.gamma(t),
            });
        }
        x = next;
    }
    Ok(x)
}

/// Writes a sampler trace as CSV with header `t,residual,lambda,gamma`.
pub fn write_trace<W: Write>(rows: &[TraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| NullspaceError::Trace(e.to_string()))?;
    }
    w.flush().map_err(|e| NullspaceError::Trace(e.to_string()))
}

/// `σ_r* = (max r − min r)·σ`, the dynamic range of the observation scaled by
/// the normalized channel-noise std.
pub fn estimate_sigma_r(observed: &[f64], sigma_channel: f64) -> Result<f64> {
    if observed.is_empty() {
        return Err(NullspaceError::EmptyObservation);
    }
    check_sigma(sigma_channel)?;
    let (lo, hi) = observed
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    Ok((hi - lo) * sigma_channel)
}
