use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::datasets::ToyClass;
use crate::diffusion::{MlpArch, NoiseSchedule, TrainConfig, X0Formula};
use crate::nullspace::LambdaRule;

/// Where the sampler's measurement-noise level comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaSource {
    /// `(max r − min r)·σ_channel` from each received image.
    #[default]
    Formula,
    /// RMS pixel error of the modem link measured on a calibration block.
    Calibrated,
    /// The configured `sigma_r` value.
    Explicit,
}

impl SigmaSource {
    pub fn as_str(self) -> &'static str {
        match self {
            SigmaSource::Formula => "formula",
            SigmaSource::Calibrated => "calibrated",
            SigmaSource::Explicit => "explicit",
        }
    }
}

/// How image pixels are grouped into the `M` transmitted chunks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mapping {
    /// Square patches on a regular grid (`M` must be a square that tiles the image).
    #[default]
    Patches,
    /// Runs of consecutive pixels in raster order.
    Contiguous,
}

/// A complete experiment description. Every field has a default, so a config
/// file only needs the keys it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Users sharing the downlink (`K`).
    pub users: usize,
    /// Chunks per image (`M`).
    pub chunks: usize,
    pub mapping: Mapping,
    /// Transmitted fractions `N/M`; `N = round(ratio·M)`.
    pub ratios: Vec<f64>,
    /// Channel Es/N0 grid in dB; `inf` is a noiseless channel.
    pub snrs_db: Vec<f64>,

    pub image_height: usize,
    pub image_width: usize,
    pub classes: Vec<ToyClass>,
    /// Directory of PGM test images; the toy generator is used when unset.
    pub test_dir: Option<PathBuf>,
    pub test_count: usize,
    pub test_seed: u64,
    pub train_count: usize,
    pub train_seed: u64,

    /// Diffusion steps `T` and the linear β range. The default range is
    /// widened for `T = 200` so that ᾱ_T ends near 3e-5.
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub width: usize,
    pub time_embed: usize,
    /// Model checkpoint; `<out_dir>/model.ckpt` when unset.
    pub checkpoint: Option<PathBuf>,

    pub train_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub cosine_decay: bool,
    pub ema_decay: f64,
    pub target_loss: Option<f64>,

    /// Master seed; every cell and image derives its own stream from it.
    pub seed: u64,
    pub x0_formula: X0Formula,
    pub lambda_rule: LambdaRule,
    pub clip_x0: bool,
    pub sigma_source: SigmaSource,
    /// Explicit measurement noise; when set it overrides `sigma_source`.
    pub sigma_r: Option<f64>,

    pub out_dir: PathBuf,
    /// Triptychs are written for the first this many images of every cell.
    pub triptychs: usize,
    /// Fill the wall-clock column; disable for byte-reproducible CSVs.
    pub timing: bool,
    /// Worker threads; 0 uses `GENOFDMA_WORKERS` or all cores.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            users: 2,
            chunks: 64,
            mapping: Mapping::Patches,
            ratios: vec![1.0, 0.8, 0.6, 0.4],
            snrs_db: vec![f64::INFINITY],
            image_height: 16,
            image_width: 16,
            classes: ToyClass::ALL.to_vec(),
            test_dir: None,
            test_count: 20,
            test_seed: 1,
            train_count: 2048,
            train_seed: 0,
            steps: 200,
            beta_start: 5e-4,
            beta_end: 0.1,
            width: 1024,
            time_embed: 32,
            checkpoint: None,
            train_steps: 36_000,
            batch_size: 64,
            lr: 1e-3,
            cosine_decay: true,
            ema_decay: 0.999,
            target_loss: None,
            seed: 0,
            x0_formula: X0Formula::Corrected,
            lambda_rule: LambdaRule::Saturating,
            clip_x0: true,
            sigma_source: SigmaSource::Formula,
            sigma_r: None,
            out_dir: PathBuf::from("out"),
            triptychs: 1,
            timing: true,
            workers: 0,
        }
    }
}

/// Environment variable consulted when `workers = 0`.
pub const WORKERS_ENV: &str = "GENOFDMA_WORKERS";

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            HarnessError::Config(msg) => HarnessError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.users == 0 {
            return bad("users must be at least 1".into());
        }
        if self.chunks == 0 {
            return bad("chunks must be at least 1".into());
        }
        if let Some(r) = self.ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return bad(format!("ratio {r} outside (0, 1]"));
        }
        if let Some(s) = self.snrs_db.iter().find(|s| s.is_nan() || **s == f64::NEG_INFINITY) {
            return bad(format!("invalid SNR {s}"));
        }
        match self.sigma_r {
            Some(v) if !(v.is_finite() && v >= 0.0) => return bad(format!("sigma_r {v} must be finite and non-negative")),
            None if self.sigma_source == SigmaSource::Explicit => {
                return bad("sigma_source = \"explicit\" needs sigma_r".into())
            }
            _ => {}
        }
        if self.test_count == 0 && self.test_dir.is_none() {
            return bad("test_count must be at least 1".into());
        }
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    /// The σ_r source actually used: an explicit `sigma_r` wins, otherwise
    /// `sigma_source`.
    pub fn effective_sigma_source(&self) -> SigmaSource {
        if self.sigma_r.is_some() {
            SigmaSource::Explicit
        } else {
            self.sigma_source
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("model.ckpt"))
    }

    /// `N` for a transmitted fraction.
    pub fn n_for(&self, ratio: f64) -> usize {
        (ratio * self.chunks as f64).round() as usize
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn arch(&self) -> MlpArch {
        MlpArch::new(self.image_height * self.image_width, self.width, self.time_embed)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train_steps,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            target_loss: self.target_loss,
            cosine_decay: self.cosine_decay,
            ema_decay: self.ema_decay,
        }
    }

    /// Configured worker count, falling back to the environment, then to
    /// rayon's default.
    pub fn worker_count(&self) -> usize {
        if self.workers > 0 {
            return self.workers;
        }
        std::env::var(WORKERS_ENV)
            .ok()
            .and_then(|v| v.parse().ok())
            .filter(|n: &usize| *n > 0)
            .unwrap_or(0)
    }
}
