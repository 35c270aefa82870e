//! Toy image generator and binary PGM (P5) reading and writing.
//!
//! Images are grayscale, normalized to `[-1, 1]`; byte values map linearly
//! with `v = p/127.5 − 1`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linop::{RealSignal, SignalShape};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("image {height}x{width} is too small; shapes need at least {min} pixels per side")]
    TooSmall { height: usize, width: usize, min: usize },
    #[error("dataset must contain at least one image")]
    Empty,
    #[error("at least one shape class is required")]
    NoClasses,
    #[error("malformed PGM: {0}")]
    Malformed(String),
    #[error("unsupported PGM max value {0} (8-bit only)")]
    UnsupportedDepth(u32),
    #[error("grid images must share one shape")]
    MixedShapes,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Smallest supported image side.
pub const MIN_SIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyClass {
    /// A thin horizontal or vertical bar.
    Bars,
    /// A filled axis-aligned rectangle.
    Boxes,
    /// A filled disc.
    Discs,
    /// A linear ramp at a random angle.
    Gradients,
}

impl ToyClass {
    pub const ALL: [ToyClass; 4] = [ToyClass::Bars, ToyClass::Boxes, ToyClass::Discs, ToyClass::Gradients];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyDatasetSpec {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<ToyClass>,
    pub count: usize,
    pub seed: u64,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            classes: ToyClass::ALL.to_vec(),
            count: 256,
            seed: 0,
        }
    }
}

impl ToyDatasetSpec {
    pub fn shape(&self) -> SignalShape {
        SignalShape::gray(self.height, self.width)
    }

    /// Class of image `i`: classes are cycled so counts differ by at most one.
    pub fn class_of(&self, i: usize) -> ToyClass {
        self.classes[i % self.classes.len()]
    }
}

/// Generates `spec.count` images, one shape each. Image `i` uses its own RNG
/// stream, so a prefix of a larger dataset equals the smaller dataset.
pub fn generate(spec: &ToyDatasetSpec) -> Result<Vec<RealSignal>> {
    if spec.count == 0 {
        return Err(DatasetError::Empty);
    }
    if spec.classes.is_empty() {
        return Err(DatasetError::NoClasses);
    }
    if spec.height < MIN_SIDE || spec.width < MIN_SIDE {
        return Err(DatasetError::TooSmall {
            height: spec.height,
            width: spec.width,
            min: MIN_SIDE,
        });
    }
    Ok((0..spec.count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let values = draw(spec.class_of(i), spec.height, spec.width, &mut rng);
            RealSignal::new(values, spec.shape()).expect("generated shape matches")
        })
        .collect())
}

fn draw(class: ToyClass, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut img = vec![-1.0; h * w];
    let mut fill = |r0: usize, r1: usize, c0: usize, c1: usize| {
        for r in r0..r1 {
            for c in c0..c1 {
                img[r * w + c] = 1.0;
            }
        }
    };
    match class {
        ToyClass::Bars => {
            let vertical = rng.random_bool(0.5);
            let (along, across) = if vertical { (h, w) } else { (w, h) };
            let thick = rng.random_range(2..=(across / 4).max(2));
            let len = rng.random_range(along / 2..=along);
            let a0 = rng.random_range(0..=along - len);
            let b0 = rng.random_range(0..=across - thick);
            if vertical {
                fill(a0, a0 + len, b0, b0 + thick);
            } else {
                fill(b0, b0 + thick, a0, a0 + len);
            }
        }
        ToyClass::Boxes => {
            let bh = rng.random_range(h / 4 + 1..=3 * h / 4);
            let bw = rng.random_range(w / 4 + 1..=3 * w / 4);
            let r0 = rng.random_range(0..=h - bh);
            let c0 = rng.random_range(0..=w - bw);
            fill(r0, r0 + bh, c0, c0 + bw);
        }
        ToyClass::Discs => {
            let side = h.min(w) as f64;
            let radius = rng.random_range(side / 6.0..=side / 3.0);
            let cy = rng.random_range(radius..=h as f64 - radius);
            let cx = rng.random_range(radius..=w as f64 - radius);
            for r in 0..h {
                for c in 0..w {
                    let (dy, dx) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
                    if dy * dy + dx * dx <= radius * radius {
                        img[r * w + c] = 1.0;
                    }
                }
            }
        }
        ToyClass::Gradients => {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let (s, c) = theta.sin_cos();
            let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
            // the ramp reaches ±1 at the image border along its direction
            let half = (cy * s.abs() + cx * c.abs()).max(1.0);
            for r in 0..h {
                for col in 0..w {
                    let p = (r as f64 + 0.5 - cy) * s + (col as f64 + 0.5 - cx) * c;
                    img[r * w + col] = (p / half).clamp(-1.0, 1.0);
                }
            }
        }
    }
    img
}

/// Normalized value of an 8-bit pixel.
pub fn byte_to_unit(p: u8) -> f64 {
    p as f64 / 127.5 - 1.0
}

/// Nearest 8-bit pixel for a normalized value; out-of-range values saturate.
pub fn unit_to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Parses a binary PGM (P5) with max value ≤ 255. Header comments are allowed.
pub fn parse_pgm(bytes: &[u8]) -> Result<RealSignal> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(DatasetError::Malformed("truncated header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(DatasetError::Malformed("missing P5 magic".into()));
    }
    let mut number = |what: &str| -> Result<u32> {
        let t = token()?;
        t.parse().map_err(|_| DatasetError::Malformed(format!("bad {what} {t:?}")))
    };
    let width = number("width")? as usize;
    let height = number("height")? as usize;
    let maxval = number("max value")?;
    drop(number);
    if maxval == 0 || maxval > 255 {
        return Err(DatasetError::UnsupportedDepth(maxval));
    }
    if width == 0 || height == 0 {
        return Err(DatasetError::Malformed("zero dimension".into()));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(DatasetError::Malformed("missing raster".into()));
    }
    let data = &bytes[pos + 1..];
    if data.len() < width * height {
        return Err(DatasetError::Malformed(format!(
            "expected {} raster bytes, found {}",
            width * height,
            data.len()
        )));
    }
    let values = data[..width * height]
        .iter()
        .map(|&p| {
            if maxval == 255 {
                byte_to_unit(p)
            } else {
                2.0 * p.min(maxval as u8) as f64 / maxval as f64 - 1.0
            }
        })
        .collect();
    Ok(RealSignal::new(values, SignalShape::gray(height, width)).expect("raster matches shape"))
}

/// Serializes a grayscale image as P5 with max value 255.
pub fn encode_pgm(signal: &RealSignal) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", signal.shape.width, signal.shape.height).into_bytes();
    out.extend(signal.values.iter().map(|&v| unit_to_byte(v)));
    out
}

pub fn load_pgm(path: &Path) -> Result<RealSignal> {
    parse_pgm(&fs::read(path).map_err(io(path))?)
}

/// Writes via a temporary file and rename so readers never see a partial file.
pub fn save_pgm(signal: &RealSignal, path: &Path) -> Result<()> {
    let tmp = path.with_extension("pgm.tmp");
    let mut f = fs::File::create(&tmp).map_err(io(&tmp))?;
    f.write_all(&encode_pgm(signal)).map_err(io(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io(path))
}

/// All `*.pgm` files in a directory, in file-name order.
pub fn load_pgm_dir(dir: &Path) -> Result<Vec<RealSignal>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(DatasetError::Empty);
    }
    paths.iter().map(|p| load_pgm(p)).collect()
}

/// Tiles same-shaped images into rows of `columns`, separated by a 1-pixel
/// mid-gray gutter.
pub fn grid(images: &[&RealSignal], columns: usize) -> Result<RealSignal> {
    let first = images.first().ok_or(DatasetError::Empty)?;
    let shape = first.shape;
    if images.iter().any(|im| im.shape != shape) {
        return Err(DatasetError::MixedShapes);
    }
    let columns = columns.clamp(1, images.len());
    let rows = images.len().div_ceil(columns);
    let (h, w) = (shape.height, shape.width);
    let out_h = rows * h + rows - 1;
    let out_w = columns * w + columns - 1;
    let mut values = vec![0.0; out_h * out_w];
    for (k, im) in images.iter().enumerate() {
        let (gr, gc) = (k / columns, k % columns);
        for r in 0..h {
            let dst = (gr * (h + 1) + r) * out_w + gc * (w + 1);
            values[dst..dst + w].copy_from_slice(&im.values[r * w..(r + 1) * w]);
        }
    }
    Ok(RealSignal::new(values, SignalShape::gray(out_h, out_w)).expect("grid shape"))
}

/// Side-by-side original, zero-filled observation and regenerated image.
pub fn save_triptych(original: &RealSignal, observed: &RealSignal, regenerated: &RealSignal, path: &Path) -> Result<()> {
    save_pgm(&grid(&[original, observed, regenerated], 3)?, path)
}
