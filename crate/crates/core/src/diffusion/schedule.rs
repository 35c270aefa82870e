use super::{DiffusionError, Result};

/// Linear β schedule and the derived tables. Timesteps are 1-based:
/// `t ∈ 1..=T`, with `ᾱ_0 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta_start: f64,
    beta_end: f64,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// `β_t` linearly interpolated from `beta_start` (t = 1) to `beta_end`
    /// (t = T), endpoints included.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(DiffusionError::Schedule("T must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(DiffusionError::Schedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let sigma = (0..steps)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                ((1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]).sqrt()
            })
            .collect();
        Ok(Self {
            beta_start,
            beta_end,
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    /// `T = 1000`, `β ∈ [1e-4, 0.02]`.
    pub fn default_linear() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_start, self.beta_end)
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::TimestepOutOfRange(t, self.steps()));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Posterior std `σ_t = √((1−ᾱ_{t−1})/(1−ᾱ_t)·β_t)`; `σ_1 = 0`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    /// Coefficient of `x_0` in the posterior mean, `√ᾱ_{t−1}·β_t / (1−ᾱ_t)`.
    /// Exactly 1 at `t = 1`, where `1−ᾱ_1 = β_1` would otherwise round.
    pub fn x0_coef(&self, t: usize) -> f64 {
        if t == 1 {
            return 1.0;
        }
        self.alpha_bar(t - 1).sqrt() * self.beta(t) / (1.0 - self.alpha_bar(t))
    }

    /// Coefficient of `x_t` in the posterior mean, `√α_t·(1−ᾱ_{t−1}) / (1−ᾱ_t)`.
    pub fn xt_coef(&self, t: usize) -> f64 {
        self.alpha(t).sqrt() * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }
}
