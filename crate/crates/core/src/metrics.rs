//! Image quality metrics: MSE, PSNR, windowed SSIM and the Fréchet distance
//! between Gaussian feature statistics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::linop::SignalShape;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error("image {height}x{width} is smaller than the {window}x{window} window")]
    TooSmall { height: usize, width: usize, window: usize },
    #[error("peak must be positive, got {0}")]
    InvalidPeak(f64),
    #[error("covariance is not symmetric (asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("only single-channel images are supported")]
    Channels,
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// Peak-to-peak range of signals normalized to `[-1, 1]`.
pub const UNIT_PEAK: f64 = 2.0;

fn same_len(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(MetricsError::ShapeMismatch(x.len(), y.len()));
    }
    Ok(())
}

pub fn mse(x: &[f64], y: &[f64]) -> Result<f64> {
    same_len(x, y)?;
    if x.is_empty() {
        return Ok(0.0);
    }
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

/// `10·log10(peak²/mse)`; `+∞` for identical inputs.
pub fn psnr(x: &[f64], y: &[f64], peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(MetricsError::InvalidPeak(peak));
    }
    let e = mse(x, y)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / e).log10())
}

/// Window size and stabilizers for [`ssim`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConfig {
    /// Side of the square, uniformly weighted sliding window (stride 1).
    pub window: usize,
    pub peak: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 8,
            peak: UNIT_PEAK,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

impl SsimConfig {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.peak).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.peak).powi(2)
    }
}

/// Summed-area table with a zero first row and column.
fn integral(values: impl Iterator<Item = f64>, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; (h + 1) * (w + 1)];
    let mut it = values;
    for i in 0..h {
        let mut row = 0.0;
        for j in 0..w {
            row += it.next().expect("h*w values");
            out[(i + 1) * (w + 1) + j + 1] = out[i * (w + 1) + j + 1] + row;
        }
    }
    out
}

/// Mean local SSIM over every window position, with population (biased)
/// local variances and covariance.
pub fn ssim(x: &[f64], y: &[f64], shape: SignalShape, config: &SsimConfig) -> Result<f64> {
    same_len(x, y)?;
    if shape.channels != 1 {
        return Err(MetricsError::Channels);
    }
    if x.len() != shape.len() {
        return Err(MetricsError::ShapeMismatch(shape.len(), x.len()));
    }
    if !(config.peak > 0.0) {
        return Err(MetricsError::InvalidPeak(config.peak));
    }
    let (h, w, win) = (shape.height, shape.width, config.window);
    if win == 0 || h < win || w < win {
        return Err(MetricsError::TooSmall { height: h, width: w, window: win });
    }
    let pairs = || x.iter().zip(y);
    let sx = integral(x.iter().copied(), h, w);
    let sy = integral(y.iter().copied(), h, w);
    let sxx = integral(x.iter().map(|v| v * v), h, w);
    let syy = integral(y.iter().map(|v| v * v), h, w);
    let sxy = integral(pairs().map(|(a, b)| a * b), h, w);
    let box_sum = |s: &[f64], i: usize, j: usize| {
        let w1 = w + 1;
        s[(i + win) * w1 + j + win] - s[i * w1 + j + win] - s[(i + win) * w1 + j] + s[i * w1 + j]
    };
    let n = (win * win) as f64;
    let (c1, c2) = (config.c1(), config.c2());
    let mut total = 0.0;
    for i in 0..=h - win {
        for j in 0..=w - win {
            let mx = box_sum(&sx, i, j) / n;
            let my = box_sum(&sy, i, j) / n;
            let vx = box_sum(&sxx, i, j) / n - mx * mx;
            let vy = box_sum(&syy, i, j) / n - my * my;
            let cxy = box_sum(&sxy, i, j) / n - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / ((h - win + 1) * (w - win + 1)) as f64)
}

/// MSE, PSNR and SSIM of one image pair, plus an optional set-level
/// Fréchet distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub mse: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub frechet: Option<f64>,
}

impl MetricReport {
    /// Compares two `[-1, 1]` grayscale images with the default SSIM setup.
    pub fn compare(reference: &[f64], test: &[f64], shape: SignalShape) -> Result<Self> {
        Ok(Self {
            mse: mse(reference, test)?,
            psnr_db: psnr(reference, test, UNIT_PEAK)?,
            ssim: ssim(reference, test, shape, &SsimConfig::default())?,
            frechet: None,
        })
    }
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    let asym = (m - m.transpose()).abs().max();
    if asym > 1e-8 {
        return Err(MetricsError::NotSymmetric(asym));
    }
    Ok(())
}

/// Square root of a symmetric PSD matrix, negative eigenvalues clipped to 0.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ_r−μ_g‖² + Tr(Σ_r + Σ_g − 2(Σ_r Σ_g)^{1/2})`.
///
/// The trace of the cross term is taken as `Tr((Σ_r^{1/2} Σ_g Σ_r^{1/2})^{1/2})`,
/// which has the same eigenvalues but stays symmetric.
pub fn frechet_gaussian(
    mu_r: &DVector<f64>,
    cov_r: &DMatrix<f64>,
    mu_g: &DVector<f64>,
    cov_g: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu_r.len();
    if mu_g.len() != d {
        return Err(MetricsError::ShapeMismatch(d, mu_g.len()));
    }
    for c in [cov_r, cov_g] {
        if c.nrows() != d || c.ncols() != d {
            return Err(MetricsError::ShapeMismatch(d, c.nrows()));
        }
        check_symmetric(c)?;
    }
    let root = psd_sqrt(cov_r);
    let inner = &root * cov_g * &root;
    let cross = SymmetricEigen::new((&inner + inner.transpose()) * 0.5)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum::<f64>();
    let mean_term = (mu_r - mu_g).norm_squared();
    Ok((mean_term + cov_r.trace() + cov_g.trace() - 2.0 * cross).max(0.0))
}

/// Maps an image to the feature vector used for Fréchet statistics.
pub trait FeatureMap: Sync {
    fn name(&self) -> String;
    fn features(&self, image: &[f64]) -> Vec<f64>;
}

/// The pixels themselves.
#[derive(Debug, Clone, Copy, Default)]
pub struct RawPixels;

impl FeatureMap for RawPixels {
    fn name(&self) -> String {
        "raw_pixels".into()
    }

    fn features(&self, image: &[f64]) -> Vec<f64> {
        image.to_vec()
    }
}

/// Means of non-overlapping `patch × patch` tiles (edge tiles may be smaller).
#[derive(Debug, Clone, Copy)]
pub struct PatchMeans {
    pub shape: SignalShape,
    pub patch: usize,
}

impl PatchMeans {
    pub fn new(shape: SignalShape) -> Self {
        Self { shape, patch: 4 }
    }
}

impl FeatureMap for PatchMeans {
    fn name(&self) -> String {
        format!("patch_means_{0}x{0}", self.patch)
    }

    fn features(&self, image: &[f64]) -> Vec<f64> {
        let (h, w, p) = (self.shape.height, self.shape.width, self.patch.max(1));
        let mut out = Vec::new();
        for bi in (0..h).step_by(p) {
            for bj in (0..w).step_by(p) {
                let (mut s, mut n) = (0.0, 0usize);
                for i in bi..(bi + p).min(h) {
                    for j in bj..(bj + p).min(w) {
                        s += image[i * w + j];
                        n += 1;
                    }
                }
                out.push(s / n as f64);
            }
        }
        out
    }
}

/// Sample mean and unbiased covariance of the mapped features.
pub fn feature_stats<F: FeatureMap + ?Sized>(samples: &[Vec<f64>], map: &F) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if samples.len() < 2 {
        return Err(MetricsError::TooFewSamples(samples.len()));
    }
    let feats: Vec<Vec<f64>> = samples.iter().map(|s| map.features(s)).collect();
    let d = feats[0].len();
    if let Some(f) = feats.iter().find(|f| f.len() != d) {
        return Err(MetricsError::ShapeMismatch(d, f.len()));
    }
    let n = feats.len();
    let data = DMatrix::from_fn(n, d, |i, j| feats[i][j]);
    let mu = data.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| data[(i, j)] - mu[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mu, cov))
}

/// Fréchet distance between the feature statistics of two image sets.
pub fn frechet_between<F: FeatureMap + ?Sized>(real: &[Vec<f64>], generated: &[Vec<f64>], map: &F) -> Result<f64> {
    let (mu_r, cov_r) = feature_stats(real, map)?;
    let (mu_g, cov_g) = feature_stats(generated, map)?;
    frechet_gaussian(&mu_r, &cov_r, &mu_g, &cov_g)
}
