//! Physical layer: 8-bit pixel quantization, Gray-coded 16QAM, AWGN at a
//! per-symbol Es/N0, and bit error counting.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::linop::ComplexVector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModemError {
    #[error("bit count {0} is not a multiple of {1}")]
    BitCount(usize, usize),
    #[error("bit streams differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("bits per sample must be in 1..=16, got {0}")]
    Depth(u32),
    #[error("empty calibration block")]
    EmptyBlock,
}

pub type Result<T, E = ModemError> = std::result::Result<T, E>;

/// Per-axis Gray labels of the 4-PAM levels `-3, -1, +1, +3`.
const PAM4_GRAY: [(u8, u8); 4] = [(0, 0), (0, 1), (1, 1), (1, 0)];
const PAM4_LEVELS: [f64; 4] = [-3.0, -1.0, 1.0, 3.0];

/// Square Gray-coded 16QAM with unit average energy.
///
/// A 4-bit group `b0 b1 b2 b3` (stream order) maps `b0 b1` to the in-phase
/// level and `b2 b3` to the quadrature level, so neighbouring points along
/// either axis differ in exactly one bit.
#[derive(Debug, Clone, PartialEq)]
pub struct QamConfig {
    pub order: usize,
    pub bits_per_symbol: usize,
    /// `constellation[label]` where `label = b0<<3 | b1<<2 | b2<<1 | b3`.
    pub constellation: [(f64, f64); 16],
    scale: f64,
}

impl Default for QamConfig {
    fn default() -> Self {
        Self::qam16()
    }
}

fn pam_index(msb: u8, lsb: u8) -> usize {
    PAM4_GRAY
        .iter()
        .position(|&g| g == (msb, lsb))
        .expect("two bits always label a level")
}

impl QamConfig {
    pub fn qam16() -> Self {
        // mean of |a|^2 + |b|^2 over the ±1, ±3 grid is 10
        let scale = 1.0 / 10f64.sqrt();
        let mut constellation = [(0.0, 0.0); 16];
        for (label, point) in constellation.iter_mut().enumerate() {
            let b = |i: usize| ((label >> (3 - i)) & 1) as u8;
            *point = (
                PAM4_LEVELS[pam_index(b(0), b(1))] * scale,
                PAM4_LEVELS[pam_index(b(2), b(3))] * scale,
            );
        }
        Self {
            order: 16,
            bits_per_symbol: 4,
            constellation,
            scale,
        }
    }

    /// Maps bits (0/1 values) to symbols, four bits per symbol.
    pub fn modulate(&self, bits: &[u8]) -> Result<ComplexVector> {
        if bits.len() % 4 != 0 {
            return Err(ModemError::BitCount(bits.len(), 4));
        }
        let mut out = ComplexVector::zeros(bits.len() / 4);
        for (i, group) in bits.chunks_exact(4).enumerate() {
            let label = group.iter().fold(0usize, |acc, &b| (acc << 1) | (b & 1) as usize);
            out.set(i, self.constellation[label]);
        }
        Ok(out)
    }

    /// Minimum-distance hard decisions. For the separable square grid this is
    /// the nearest level on each axis independently.
    pub fn demodulate(&self, symbols: &ComplexVector) -> Vec<u8> {
        let mut bits = Vec::with_capacity(symbols.len() * 4);
        for i in 0..symbols.len() {
            let (re, im) = symbols.get(i);
            for v in [re, im] {
                let (msb, lsb) = PAM4_GRAY[self.nearest_level(v)];
                bits.push(msb);
                bits.push(lsb);
            }
        }
        bits
    }

    fn nearest_level(&self, v: f64) -> usize {
        let u = v / self.scale;
        if u < -2.0 {
            0
        } else if u < 0.0 {
            1
        } else if u < 2.0 {
            2
        } else {
            3
        }
    }

    /// Mean energy of the 16 points.
    pub fn average_energy(&self) -> f64 {
        self.constellation
            .iter()
            .map(|(a, b)| a * a + b * b)
            .sum::<f64>()
            / 16.0
    }
}

/// Channel SNR as per-symbol Es/N0 in dB. `+∞` means a noiseless channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnrSpec {
    pub snr_db: f64,
}

impl SnrSpec {
    pub fn db(snr_db: f64) -> Self {
        Self { snr_db }
    }

    pub fn noiseless() -> Self {
        Self {
            snr_db: f64::INFINITY,
        }
    }

    pub fn is_noiseless(&self) -> bool {
        self.snr_db == f64::INFINITY
    }

    /// `N0 / Es = 10^(-snr/10)`.
    pub fn noise_to_signal(&self) -> f64 {
        if self.is_noiseless() {
            0.0
        } else {
            10f64.powf(-self.snr_db / 10.0)
        }
    }
}

/// Result of [`quantize`]: the bit stream and how many samples were clamped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Quantized {
    pub bits: Vec<u8>,
    pub saturated: usize,
}

/// Uniform mid-rise quantizer on `[-1, 1]` with `2^bits_per_sample` levels,
/// emitted MSB first. Out-of-range samples are clamped and counted.
pub fn quantize(signal: &[f64], bits_per_sample: u32) -> Result<Quantized> {
    if !(1..=16).contains(&bits_per_sample) {
        return Err(ModemError::Depth(bits_per_sample));
    }
    let levels = 1usize << bits_per_sample;
    let step = 2.0 / levels as f64;
    let mut bits = Vec::with_capacity(signal.len() * bits_per_sample as usize);
    let mut saturated = 0;
    for &x in signal {
        if !(-1.0..=1.0).contains(&x) {
            saturated += 1;
        }
        let level = ((x + 1.0) / step).floor().clamp(0.0, (levels - 1) as f64) as usize;
        for b in (0..bits_per_sample).rev() {
            bits.push(((level >> b) & 1) as u8);
        }
    }
    Ok(Quantized { bits, saturated })
}

/// Inverse of [`quantize`]: each level maps to the centre of its cell,
/// `-1 + (level + ½)·step`.
pub fn dequantize(bits: &[u8], bits_per_sample: u32) -> Result<Vec<f64>> {
    if !(1..=16).contains(&bits_per_sample) {
        return Err(ModemError::Depth(bits_per_sample));
    }
    let b = bits_per_sample as usize;
    if bits.len() % b != 0 {
        return Err(ModemError::BitCount(bits.len(), b));
    }
    let step = 2.0 / (1usize << b) as f64;
    Ok(bits
        .chunks_exact(b)
        .map(|word| {
            let level = word.iter().fold(0usize, |acc, &v| (acc << 1) | (v & 1) as usize);
            -1.0 + (level as f64 + 0.5) * step
        })
        .collect())
}

/// Adds complex Gaussian noise with `N0 = Es / 10^(snr/10)`, `Es` measured on
/// the input block; per-axis std `√(N0/2)`.
pub fn awgn<R: Rng + ?Sized>(symbols: &ComplexVector, snr: SnrSpec, rng: &mut R) -> ComplexVector {
    let mut out = symbols.clone();
    if snr.is_noiseless() || symbols.is_empty() {
        return out;
    }
    let es = (0..symbols.len()).map(|i| symbols.norm_sqr(i)).sum::<f64>() / symbols.len() as f64;
    let axis = (es * snr.noise_to_signal() / 2.0).sqrt();
    for i in 0..out.len() {
        out.re[i] += axis * rng.sample::<f64, _>(StandardNormal);
        out.im[i] += axis * rng.sample::<f64, _>(StandardNormal);
    }
    out
}

/// Fraction of differing bits.
pub fn ber(tx: &[u8], rx: &[u8]) -> Result<f64> {
    if tx.len() != rx.len() {
        return Err(ModemError::LengthMismatch(tx.len(), rx.len()));
    }
    if tx.is_empty() {
        return Ok(0.0);
    }
    let errors = tx.iter().zip(rx).filter(|(a, b)| a != b).count();
    Ok(errors as f64 / tx.len() as f64)
}

/// Pixels through quantize → 16QAM → AWGN → hard decision → dequantize.
/// Returns the received pixels and the bit error rate.
pub fn pixel_link<R: Rng + ?Sized>(pixels: &[f64], snr: SnrSpec, rng: &mut R) -> (Vec<f64>, f64) {
    let qam = QamConfig::qam16();
    let q = quantize(pixels, 8).expect("8-bit depth is valid");
    let symbols = qam.modulate(&q.bits).expect("8-bit samples fill whole symbols");
    let rx_bits = qam.demodulate(&awgn(&symbols, snr, rng));
    let rx = dequantize(&rx_bits, 8).expect("whole samples");
    let rate = ber(&q.bits, &rx_bits).expect("equal lengths");
    (rx, rate)
}

/// Effective Gaussian pixel-noise level of the QAM link: RMS of
/// `dequantized received − transmitted` over a calibration block.
///
/// QAM hard-decision errors are impulsive rather than Gaussian; this gives the
/// null-space sampler a single σ that matches the observed error energy.
pub fn channel_sigma_to_pixel_sigma<R: Rng + ?Sized>(
    snr: SnrSpec,
    block: &[f64],
    rng: &mut R,
) -> Result<f64> {
    if block.is_empty() {
        return Err(ModemError::EmptyBlock);
    }
    let (rx, _) = pixel_link(block, snr, rng);
    let mse = rx
        .iter()
        .zip(block)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / block.len() as f64;
    Ok(mse.sqrt())
}
