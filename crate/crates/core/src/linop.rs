//! Structured degradation operators `A = H·B`.
//!
//! In OFDMA the channel matrix is diagonal and the allocation matrix is a 0/1
//! selection, so the per-user operator reduces to "pick N of the M signal
//! chunks, place each on one subcarrier, and scale it by that subcarrier's
//! gain". Everything here (pseudo-inverse, range/null projectors) is computed
//! analytically from that structure in O(N).
//!
//! Complex values are stored as parallel `re`/`im` arrays.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinopError {
    #[error("dimension mismatch: expected length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("singular operator: gain on selected entry {index} is zero")]
    SingularOperator { index: usize },
    #[error("index {index} out of range 0..{bound}")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("duplicate index {0}")]
    DuplicateIndex(usize),
    #[error("invalid operator shape: {0}")]
    InvalidShape(String),
    #[error("non-finite value at position {0}")]
    NonFinite(usize),
    #[error("malformed operator record: {0}")]
    Parse(String),
}

pub type Result<T, E = LinopError> = std::result::Result<T, E>;

/// A complex vector with separate real and imaginary arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ComplexVector {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexVector {
    pub fn new(re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        if re.len() != im.len() {
            return Err(LinopError::DimensionMismatch {
                expected: re.len(),
                got: im.len(),
            });
        }
        if let Some(i) = re.iter().chain(im.iter()).position(|v| !v.is_finite()) {
            return Err(LinopError::NonFinite(i % re.len().max(1)));
        }
        Ok(Self { re, im })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            re: vec![0.0; len],
            im: vec![0.0; len],
        }
    }

    /// Embeds a real vector (zero imaginary part).
    pub fn from_real(re: &[f64]) -> Self {
        Self {
            re: re.to_vec(),
            im: vec![0.0; re.len()],
        }
    }

    pub fn from_pairs(pairs: &[(f64, f64)]) -> Self {
        Self {
            re: pairs.iter().map(|p| p.0).collect(),
            im: pairs.iter().map(|p| p.1).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn get(&self, i: usize) -> (f64, f64) {
        (self.re[i], self.im[i])
    }

    pub fn set(&mut self, i: usize, value: (f64, f64)) {
        self.re[i] = value.0;
        self.im[i] = value.1;
    }

    pub fn norm_sqr(&self, i: usize) -> f64 {
        self.re[i] * self.re[i] + self.im[i] * self.im[i]
    }

    /// Largest `|im|` entry; used to check that a result lies in the real subspace.
    pub fn max_abs_imag(&self) -> f64 {
        self.im.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Nominal value interval of a signal; pixel data defaults to `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueRange {
    pub min: f64,
    pub max: f64,
}

impl Default for ValueRange {
    fn default() -> Self {
        Self { min: -1.0, max: 1.0 }
    }
}

/// `(height, width, channels)` metadata of a flattened signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SignalShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl SignalShape {
    pub fn gray(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            channels: 1,
        }
    }

    /// A 1-D signal of `len` samples.
    pub fn flat(len: usize) -> Self {
        Self::gray(1, len)
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A real-valued signal (usually a row-major grayscale image).
#[derive(Debug, Clone, PartialEq)]
pub struct RealSignal {
    pub values: Vec<f64>,
    pub shape: SignalShape,
    pub range: ValueRange,
}

impl RealSignal {
    pub fn new(values: Vec<f64>, shape: SignalShape) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(LinopError::DimensionMismatch {
                expected: shape.len(),
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(LinopError::NonFinite(i));
        }
        Ok(Self {
            values,
            shape,
            range: ValueRange::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// True when every sample lies inside the declared range.
    pub fn in_range(&self) -> bool {
        self.values
            .iter()
            .all(|&v| v >= self.range.min && v <= self.range.max)
    }
}

/// Per-subcarrier frequency-domain channel coefficients of one user.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalChannel {
    pub gains: ComplexVector,
}

impl DiagonalChannel {
    pub fn new(gains: ComplexVector) -> Result<Self> {
        if let Some(i) = (0..gains.len())
            .find(|&i| !gains.re[i].is_finite() || !gains.im[i].is_finite())
        {
            return Err(LinopError::NonFinite(i));
        }
        Ok(Self { gains })
    }

    pub fn unit(len: usize) -> Self {
        Self {
            gains: ComplexVector {
                re: vec![1.0; len],
                im: vec![0.0; len],
            },
        }
    }

    pub fn len(&self) -> usize {
        self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gains.is_empty()
    }

    pub fn magnitude(&self, i: usize) -> f64 {
        self.gains.norm_sqr(i).sqrt()
    }
}

/// The per-user operator `A = H·B`: row selection onto `selected` subcarriers
/// followed by a diagonal channel gain.
///
/// Row `selected[i]` of `A` has a single nonzero entry `gains[i]` in column
/// `slot_of[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedChannelOp {
    subcarriers: usize,
    signal_len: usize,
    selected: Vec<usize>,
    slot_of: Vec<usize>,
    gains: ComplexVector,
    // true for signal slots that are carried by some subcarrier
    carried: Vec<bool>,
}

impl MaskedChannelOp {
    /// Builds an operator mapping length-`signal_len` signals onto
    /// `subcarriers` subcarriers.
    ///
    /// Both index lists must be duplicate-free and every gain must be
    /// nonzero: a zero gain would silently turn the pseudo-inverse into a
    /// mask, which hides allocation bugs.
    pub fn new(
        subcarriers: usize,
        signal_len: usize,
        selected: Vec<usize>,
        slot_of: Vec<usize>,
        gains: ComplexVector,
    ) -> Result<Self> {
        let n = selected.len();
        if slot_of.len() != n {
            return Err(LinopError::DimensionMismatch {
                expected: n,
                got: slot_of.len(),
            });
        }
        if gains.len() != n {
            return Err(LinopError::DimensionMismatch {
                expected: n,
                got: gains.len(),
            });
        }
        if n > signal_len || n > subcarriers {
            return Err(LinopError::InvalidShape(format!(
                "{n} selected entries exceed min(L={subcarriers}, M={signal_len})"
            )));
        }
        let mut used_sc = vec![false; subcarriers];
        for &s in &selected {
            if s >= subcarriers {
                return Err(LinopError::IndexOutOfRange {
                    index: s,
                    bound: subcarriers,
                });
            }
            if std::mem::replace(&mut used_sc[s], true) {
                return Err(LinopError::DuplicateIndex(s));
            }
        }
        let mut carried = vec![false; signal_len];
        for &j in &slot_of {
            if j >= signal_len {
                return Err(LinopError::IndexOutOfRange {
                    index: j,
                    bound: signal_len,
                });
            }
            if std::mem::replace(&mut carried[j], true) {
                return Err(LinopError::DuplicateIndex(j));
            }
        }
        for i in 0..n {
            let (re, im) = gains.get(i);
            if !re.is_finite() || !im.is_finite() {
                return Err(LinopError::NonFinite(i));
            }
            if re == 0.0 && im == 0.0 {
                return Err(LinopError::SingularOperator { index: i });
            }
        }
        Ok(Self {
            subcarriers,
            signal_len,
            selected,
            slot_of,
            gains,
            carried,
        })
    }

    /// A pure selection mask (unit gains) with `L = M`, keeping the listed
    /// signal slots in place.
    pub fn mask(signal_len: usize, kept: &[usize]) -> Result<Self> {
        let n = kept.len();
        Self::new(
            signal_len,
            signal_len,
            kept.to_vec(),
            kept.to_vec(),
            ComplexVector {
                re: vec![1.0; n],
                im: vec![0.0; n],
            },
        )
    }

    pub fn identity(len: usize) -> Self {
        let all: Vec<usize> = (0..len).collect();
        Self::mask(len, &all).expect("identity operator is well formed")
    }

    /// Number of subcarriers `L` (output length of [`apply`](Self::apply)).
    pub fn subcarriers(&self) -> usize {
        self.subcarriers
    }

    /// Signal length `M` (input length of [`apply`](Self::apply)).
    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    /// Number of carried chunks `N`.
    pub fn rank(&self) -> usize {
        self.selected.len()
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn slot_of(&self) -> &[usize] {
        &self.slot_of
    }

    pub fn gains(&self) -> &ComplexVector {
        &self.gains
    }

    /// Whether signal slot `j` is in the range space of `A†A`.
    pub fn is_carried(&self, j: usize) -> bool {
        self.carried[j]
    }

    fn check_len(expected: usize, got: usize) -> Result<()> {
        if expected != got {
            return Err(LinopError::DimensionMismatch { expected, got });
        }
        Ok(())
    }

    /// `A x` for a complex signal of length `M`.
    pub fn apply(&self, x: &ComplexVector) -> Result<ComplexVector> {
        Self::check_len(self.signal_len, x.len())?;
        let mut out = ComplexVector::zeros(self.subcarriers);
        for (i, (&sc, &slot)) in self.selected.iter().zip(&self.slot_of).enumerate() {
            let (gr, gi) = self.gains.get(i);
            let (xr, xi) = x.get(slot);
            out.set(sc, (gr * xr - gi * xi, gr * xi + gi * xr));
        }
        Ok(out)
    }

    /// `A x` for a real signal of length `M`.
    pub fn apply_real(&self, x: &[f64]) -> Result<ComplexVector> {
        Self::check_len(self.signal_len, x.len())?;
        let mut out = ComplexVector::zeros(self.subcarriers);
        for (i, (&sc, &slot)) in self.selected.iter().zip(&self.slot_of).enumerate() {
            let (gr, gi) = self.gains.get(i);
            out.set(sc, (gr * x[slot], gi * x[slot]));
        }
        Ok(out)
    }

    /// `A† r`: divides each selected subcarrier by its gain and puts it back in
    /// its signal slot. Uncarried slots are zero.
    pub fn pinv_apply(&self, r: &ComplexVector) -> Result<ComplexVector> {
        Self::check_len(self.subcarriers, r.len())?;
        let mut out = ComplexVector::zeros(self.signal_len);
        for (i, (&sc, &slot)) in self.selected.iter().zip(&self.slot_of).enumerate() {
            let (gr, gi) = self.gains.get(i);
            let (rr, ri) = r.get(sc);
            let den = gr * gr + gi * gi;
            if den == 0.0 {
                return Err(LinopError::SingularOperator { index: i });
            }
            out.set(slot, ((rr * gr + ri * gi) / den, (ri * gr - rr * gi) / den));
        }
        Ok(out)
    }

    /// `A†A x`: keeps the carried slots.
    pub fn range_project(&self, x: &[f64]) -> Result<Vec<f64>> {
        Self::check_len(self.signal_len, x.len())?;
        Ok(x.iter()
            .zip(&self.carried)
            .map(|(&v, &c)| if c { v } else { 0.0 })
            .collect())
    }

    /// `(I − A†A) x`: keeps the uncarried slots.
    pub fn null_project(&self, x: &[f64]) -> Result<Vec<f64>> {
        Self::check_len(self.signal_len, x.len())?;
        Ok(x.iter()
            .zip(&self.carried)
            .map(|(&v, &c)| if c { 0.0 } else { v })
            .collect())
    }

    /// `(A†A x, (I − A†A) x)`; the two parts sum to `x` exactly.
    pub fn decompose(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((self.range_project(x)?, self.null_project(x)?))
    }

    /// Serializes to a one-line text record, e.g.
    /// `L=4;M=3;selected=0,2;slots=1,0;gains=1:0,0.5:-2`.
    ///
    /// Floats use Rust's shortest round-trip formatting, so parsing the record
    /// reproduces the operator bit-exactly.
    pub fn to_record(&self) -> String {
        self.to_string()
    }

    pub fn from_record(record: &str) -> Result<Self> {
        record.parse()
    }
}

fn join<T: fmt::Display>(items: impl Iterator<Item = T>) -> String {
    items.map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl fmt::Display for MaskedChannelOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "L={};M={};selected={};slots={};gains={}",
            self.subcarriers,
            self.signal_len,
            join(self.selected.iter()),
            join(self.slot_of.iter()),
            join((0..self.gains.len()).map(|i| format!("{}:{}", self.gains.re[i], self.gains.im[i]))),
        )
    }
}

impl FromStr for MaskedChannelOp {
    type Err = LinopError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |what: &str| LinopError::Parse(what.to_string());
        let mut l = None;
        let mut m = None;
        let mut selected = None;
        let mut slots = None;
        let mut gains = None;
        for field in s.trim().split(';') {
            let (key, value) = field.split_once('=').ok_or_else(|| bad(field))?;
            let list = |v: &str| -> Result<Vec<usize>> {
                if v.is_empty() {
                    return Ok(Vec::new());
                }
                v.split(',')
                    .map(|t| t.trim().parse::<usize>().map_err(|_| bad(t)))
                    .collect()
            };
            match key.trim() {
                "L" => l = Some(value.trim().parse::<usize>().map_err(|_| bad(value))?),
                "M" => m = Some(value.trim().parse::<usize>().map_err(|_| bad(value))?),
                "selected" => selected = Some(list(value)?),
                "slots" => slots = Some(list(value)?),
                "gains" => {
                    let mut g = ComplexVector::default();
                    if !value.is_empty() {
                        for pair in value.split(',') {
                            let (re, im) = pair.split_once(':').ok_or_else(|| bad(pair))?;
                            g.re.push(re.trim().parse().map_err(|_| bad(re))?);
                            g.im.push(im.trim().parse().map_err(|_| bad(im))?);
                        }
                    }
                    gains = Some(g);
                }
                other => return Err(bad(other)),
            }
        }
        MaskedChannelOp::new(
            l.ok_or_else(|| bad("missing L"))?,
            m.ok_or_else(|| bad("missing M"))?,
            selected.ok_or_else(|| bad("missing selected"))?,
            slots.ok_or_else(|| bad("missing slots"))?,
            gains.ok_or_else(|| bad("missing gains"))?,
        )
    }
}
