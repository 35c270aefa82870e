//! The end-to-end pipeline for one cell (a transmitted fraction and an SNR)
//! and the sweep over the whole grid.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{ExperimentConfig, Mapping, SigmaSource};
use super::record::{write_csv, ResultRecord};
use super::{HarnessError, Result};
use crate::datasets::{self, ToyDatasetSpec};
use crate::diffusion::{self, Checkpoint, Denoiser, MlpDenoiser, NoiseSchedule, SampleOptions, TrainState};
use crate::linop::{ComplexVector, MaskedChannelOp, RealSignal, SignalShape};
use crate::metrics::{frechet_between, MetricReport, PatchMeans};
use crate::modem::{self, QamConfig, SnrSpec};
use crate::nullspace::{self, InverseProblem, SamplerOptions};
use crate::ofdma::{self, ChunkMapping, ChunkSelection};

/// Bits per pixel on the link.
pub const PIXEL_BITS: u32 = 8;

/// One point of the experiment grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub ratio: f64,
    pub n: usize,
    pub snr_db: f64,
}

/// Cartesian product of the ratio and SNR grids, ratio-major.
pub fn cells(config: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for &ratio in &config.ratios {
        for &snr_db in &config.snrs_db {
            out.push(Cell {
                index: out.len(),
                ratio,
                n: config.n_for(ratio),
                snr_db,
            });
        }
    }
    out
}

const STREAM_LINK: u64 = 1;
const STREAM_SAMPLER: u64 = 2;
const STREAM_CALIBRATION: u64 = 3;

/// RNG for one purpose within one cell: the master seed picks the key, the
/// hashed `(purpose, cell, item)` triple picks the stream, so results do not
/// depend on execution order.
pub fn stream_rng(master: u64, purpose: u64, cell: usize, item: usize) -> ChaCha8Rng {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for v in [purpose, cell as u64, item as u64] {
        h ^= v;
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
        h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 29;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(h);
    rng
}

pub fn toy_spec(config: &ExperimentConfig, count: usize, seed: u64) -> ToyDatasetSpec {
    ToyDatasetSpec {
        height: config.image_height,
        width: config.image_width,
        classes: config.classes.clone(),
        count,
        seed,
    }
}

/// Test images: the PGM directory when configured, otherwise toy images.
pub fn test_images(config: &ExperimentConfig) -> Result<Vec<RealSignal>> {
    let images = match &config.test_dir {
        Some(dir) => {
            let mut imgs = datasets::load_pgm_dir(dir)?;
            if config.test_count > 0 {
                imgs.truncate(config.test_count);
            }
            imgs
        }
        None => datasets::generate(&toy_spec(config, config.test_count, config.test_seed))?,
    };
    let shape = SignalShape::gray(config.image_height, config.image_width);
    if let Some(im) = images.iter().find(|im| im.shape != shape) {
        return Err(HarnessError::Config(format!(
            "test image is {}x{}, config expects {}x{}",
            im.shape.height, im.shape.width, shape.height, shape.width
        )));
    }
    Ok(images)
}

pub fn train_images(config: &ExperimentConfig) -> Result<Vec<Vec<f64>>> {
    Ok(datasets::generate(&toy_spec(config, config.train_count, config.train_seed))?
        .into_iter()
        .map(|s| s.values)
        .collect())
}

/// Trains a fresh denoiser on the configured training images.
pub fn train_model(config: &ExperimentConfig, progress: impl FnMut(&TrainState)) -> Result<TrainState> {
    let data = train_images(config)?;
    let schedule = config.schedule()?;
    let model = MlpDenoiser::init(config.arch(), config.seed)?;
    Ok(diffusion::train_with(model, &data, &schedule, &config.train_config(), progress)?)
}

pub fn chunk_mapping(config: &ExperimentConfig) -> Result<ChunkMapping> {
    let shape = SignalShape::gray(config.image_height, config.image_width);
    let mapping = match config.mapping {
        Mapping::Patches => ChunkMapping::square_patches(shape, config.chunks)?,
        Mapping::Contiguous => ChunkMapping::contiguous(shape, config.chunks)?,
    };
    if mapping.chunk_len().is_none() {
        return Err(HarnessError::Config(format!(
            "{} pixels do not split into {} equal chunks",
            shape.len(),
            config.chunks
        )));
    }
    Ok(mapping)
}

/// Loads the checkpoint named in the config and checks it fits the images
/// and the configured schedule.
pub fn load_model(config: &ExperimentConfig) -> Result<(MlpDenoiser, NoiseSchedule)> {
    let path = config.checkpoint_path();
    if !path.exists() {
        return Err(HarnessError::MissingCheckpoint(path));
    }
    let ckpt = Checkpoint::load(&path)?;
    let dim = config.image_height * config.image_width;
    if ckpt.model.dim() != dim {
        return Err(HarnessError::Config(format!(
            "checkpoint models {}-pixel images, config has {dim}",
            ckpt.model.dim()
        )));
    }
    let schedule = ckpt.schedule()?;
    if schedule != config.schedule()? {
        return Err(HarnessError::Config(format!(
            "checkpoint was trained with T={} beta=[{}, {}], config has T={} beta=[{}, {}]",
            ckpt.steps, ckpt.beta_start, ckpt.beta_end, config.steps, config.beta_start, config.beta_end
        )));
    }
    Ok((ckpt.model, schedule))
}

/// What one user receives for its image.
#[derive(Debug, Clone)]
pub struct Reception {
    /// Pixel-domain selection operator of the transmitted chunks.
    pub op: MaskedChannelOp,
    /// Received pixels in carried positions, zero elsewhere.
    pub observation: Vec<f64>,
    pub ber: f64,
}

/// OFDM symbols per chunk: 16QAM carries 4 of the 8 bits of a pixel.
pub fn time_slots(mapping: &ChunkMapping) -> usize {
    let bits = mapping.chunk_len().unwrap_or(0) * PIXEL_BITS as usize;
    bits.div_ceil(QamConfig::qam16().bits_per_symbol as usize)
}

/// Sends one image per user through the downlink: greedy allocation over
/// Rayleigh channels, `n` random chunks per user, quantize → 16QAM → one OFDM
/// symbol per time slot → power-controlled channel with AWGN → pseudo-inverse →
/// hard decision → dequantize.
pub fn transmit_group<R: Rng + ?Sized>(
    images: &[&RealSignal],
    mapping: &ChunkMapping,
    n: usize,
    snr: SnrSpec,
    rng: &mut R,
) -> Result<Vec<Reception>> {
    let users = images.len();
    let m = mapping.chunks();
    let qam = QamConfig::qam16();
    let slots = time_slots(mapping);
    let channels: Vec<_> = (0..users).map(|_| ofdma::rayleigh_channel(users * n, rng)).collect();
    let plan = ofdma::allocate(&channels, n)?;
    let chunks = ChunkSelection::random(users, m, n, rng);

    // symbols[k][j]: chunk j of user k as a slot sequence
    let mut tx_bits = Vec::with_capacity(users);
    let mut symbols = Vec::with_capacity(users);
    for im in images {
        let mut bits_k = Vec::with_capacity(m);
        let mut syms_k = Vec::with_capacity(m);
        for j in 0..m {
            let pixels: Vec<f64> = mapping.group(j).iter().map(|&p| im.values[p]).collect();
            let q = modem::quantize(&pixels, PIXEL_BITS)?;
            syms_k.push(qam.modulate(&q.bits)?);
            bits_k.push(q.bits);
        }
        tx_bits.push(bits_k);
        symbols.push(syms_k);
    }

    let sigma_n = snr.noise_to_signal().sqrt();
    let effective: Vec<_> = (0..users)
        .map(|k| ofdma::power_control(&channels[k], plan.user(k)))
        .collect::<std::result::Result<_, _>>()?;
    let ops: Vec<_> = (0..users)
        .map(|k| ofdma::build_operator(&plan, &chunks, k, &effective[k]))
        .collect::<std::result::Result<_, _>>()?;
    let mut rx_symbols = vec![vec![ComplexVector::zeros(slots); m]; users];
    for s in 0..slots {
        let signals: Vec<ComplexVector> = symbols
            .iter()
            .map(|per_chunk| {
                let pairs: Vec<(f64, f64)> = per_chunk.iter().map(|c| c.get(s)).collect();
                ComplexVector::from_pairs(&pairs)
            })
            .collect();
        let y = ofdma::compose_downlink(&plan, &chunks, &signals)?;
        for k in 0..users {
            let r = ofdma::receive(&y, &effective[k], sigma_n, rng)?;
            let xhat = ops[k].pinv_apply(&r)?;
            for &j in &chunks.per_user[k] {
                rx_symbols[k][j].set(s, xhat.get(j));
            }
        }
    }

    let mut out = Vec::with_capacity(users);
    for k in 0..users {
        let mut observation = vec![0.0; mapping.shape().len()];
        let (mut sent, mut got) = (Vec::new(), Vec::new());
        for &j in &chunks.per_user[k] {
            let bits = qam.demodulate(&rx_symbols[k][j]);
            let pixels = modem::dequantize(&bits, PIXEL_BITS)?;
            for (&p, v) in mapping.group(j).iter().zip(pixels) {
                observation[p] = v;
            }
            sent.extend_from_slice(&tx_bits[k][j]);
            got.extend(bits);
        }
        out.push(Reception {
            op: mapping.pixel_operator(&chunks.per_user[k])?,
            observation,
            ber: modem::ber(&sent, &got)?,
        });
    }
    Ok(out)
}

/// Pixel-domain measurement noise for the sampler, from the configured source.
pub fn sigma_r_for(config: &ExperimentConfig, reception: &Reception, snr: SnrSpec, calibrated: Option<f64>) -> Result<f64> {
    if snr.is_noiseless() {
        return Ok(0.0);
    }
    Ok(match config.effective_sigma_source() {
        SigmaSource::Explicit => config.sigma_r.unwrap_or(0.0),
        SigmaSource::Calibrated => calibrated.unwrap_or(0.0),
        SigmaSource::Formula => {
            let carried: Vec<f64> = reception.op.slot_of().iter().map(|&p| reception.observation[p]).collect();
            if carried.is_empty() {
                0.0
            } else {
                nullspace::estimate_sigma_r(&carried, snr.noise_to_signal().sqrt())?
            }
        }
    })
}

fn calibrate(config: &ExperimentConfig, cell: &Cell, snr: SnrSpec) -> Result<Option<f64>> {
    if config.effective_sigma_source() != SigmaSource::Calibrated || snr.is_noiseless() {
        return Ok(None);
    }
    let mut rng = stream_rng(config.seed, STREAM_CALIBRATION, cell.index, 0);
    let block: Vec<f64> = (0..4096).map(|_| rng.random_range(-1.0..=1.0)).collect();
    Ok(Some(modem::channel_sigma_to_pixel_sigma(snr, &block, &mut rng)?))
}

/// One test image's result with the images behind it.
#[derive(Debug, Clone)]
pub struct ImageOutcome {
    pub record: ResultRecord,
    pub original: RealSignal,
    /// Zero-filled `A†r`.
    pub observed: Option<RealSignal>,
    pub regenerated: Option<RealSignal>,
}

fn base_record(config: &ExperimentConfig, cell: &Cell, image: usize, users: usize, slots: usize) -> ResultRecord {
    ResultRecord {
        cell: cell.index,
        image,
        users,
        n: cell.n,
        m: config.chunks,
        ratio: cell.ratio,
        snr_db: cell.snr_db,
        seed: config.seed,
        x0_formula: enum_name(&config.x0_formula),
        lambda_rule: enum_name(&config.lambda_rule),
        sigma_source: config.effective_sigma_source().as_str().into(),
        sigma_r: None,
        time_slots: slots,
        mse: None,
        psnr_db: None,
        ssim: None,
        baseline_psnr_db: None,
        baseline_ssim: None,
        frechet: None,
        ber: None,
        status: "ok".into(),
        wall_seconds: None,
    }
}

fn enum_name<T: serde::Serialize>(v: &T) -> String {
    toml::Value::try_from(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn sampler_options(config: &ExperimentConfig) -> SamplerOptions {
    SamplerOptions {
        base: SampleOptions {
            x0_formula: config.x0_formula,
            clip_x0: config.clip_x0,
        },
        lambda_rule: config.lambda_rule,
    }
}

/// Runs the images `first..first+images.len()` of a cell as one user group.
#[allow(clippy::too_many_arguments)]
fn run_group(
    config: &ExperimentConfig,
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    mapping: &ChunkMapping,
    cell: &Cell,
    group: usize,
    first: usize,
    images: &[RealSignal],
    calibrated: Option<f64>,
) -> Vec<ImageOutcome> {
    let snr = SnrSpec::db(cell.snr_db);
    let slots = time_slots(mapping);
    let users = images.len();
    let refs: Vec<&RealSignal> = images.iter().collect();
    let mut link_rng = stream_rng(config.seed, STREAM_LINK, cell.index, group);
    let receptions = transmit_group(&refs, mapping, cell.n, snr, &mut link_rng);
    images
        .iter()
        .enumerate()
        .map(|(k, original)| {
            let index = first + k;
            let mut record = base_record(config, cell, index, users, slots);
            let mut outcome = ImageOutcome {
                record: record.clone(),
                original: original.clone(),
                observed: None,
                regenerated: None,
            };
            let result = (|| -> Result<(RealSignal, RealSignal)> {
                let rx = receptions.as_ref().map_err(|e| HarnessError::Cell(e.to_string()))?[k].clone();
                record.ber = Some(rx.ber);
                let sigma_r = sigma_r_for(config, &rx, snr, calibrated)?;
                record.sigma_r = Some(sigma_r);
                let problem = InverseProblem::from_observation(rx.op, &rx.observation, sigma_r)?;
                let mut rng = stream_rng(config.seed, STREAM_SAMPLER, cell.index, index);
                let start = Instant::now();
                let out = nullspace::sample(model, schedule, &problem, sampler_options(config), &mut rng)?;
                if config.timing {
                    record.wall_seconds = Some(start.elapsed().as_secs_f64());
                }
                let shape = original.shape;
                let regen = MetricReport::compare(&original.values, &out, shape)?;
                let base = MetricReport::compare(&original.values, &rx.observation, shape)?;
                record.mse = Some(regen.mse);
                record.psnr_db = Some(regen.psnr_db);
                record.ssim = Some(regen.ssim);
                record.baseline_psnr_db = Some(base.psnr_db);
                record.baseline_ssim = Some(base.ssim);
                Ok((
                    RealSignal::new(rx.observation, shape)?,
                    RealSignal::new(out, shape)?,
                ))
            })();
            match result {
                Ok((observed, regenerated)) => {
                    outcome.observed = Some(observed);
                    outcome.regenerated = Some(regenerated);
                }
                Err(e) => record.status = format!("error: {e}"),
            }
            outcome.record = record;
            outcome
        })
        .collect()
}

/// Fills the cell-level Fréchet column over the cell's successful images.
fn attach_frechet(outcomes: &mut [ImageOutcome]) {
    let (real, generated): (Vec<Vec<f64>>, Vec<Vec<f64>>) = outcomes
        .iter()
        .filter_map(|o| o.regenerated.as_ref().map(|g| (o.original.values.clone(), g.values.clone())))
        .unzip();
    let Some(first) = outcomes.first() else {
        return;
    };
    let features = PatchMeans::new(first.original.shape);
    let value = frechet_between(&real, &generated, &features).ok();
    for o in outcomes.iter_mut().filter(|o| o.record.is_ok()) {
        o.record.frechet = value;
    }
}

/// Runs every test image through one cell. Users are formed from consecutive
/// images, `config.users` at a time (the last group may be smaller).
pub fn run_cell(
    config: &ExperimentConfig,
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cell: &Cell,
    images: &[RealSignal],
) -> Result<Vec<ImageOutcome>> {
    let mapping = chunk_mapping(config)?;
    let calibrated = calibrate(config, cell, SnrSpec::db(cell.snr_db))?;
    let mut outcomes: Vec<ImageOutcome> = images
        .par_chunks(config.users)
        .enumerate()
        .flat_map_iter(|(g, group)| {
            run_group(config, model, schedule, &mapping, cell, g, g * config.users, group, calibrated)
        })
        .collect();
    attach_frechet(&mut outcomes);
    Ok(outcomes)
}

/// Results of a whole sweep, in cell order then image order.
#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub cells: Vec<Cell>,
    pub outcomes: Vec<ImageOutcome>,
}

impl SweepOutput {
    pub fn records(&self) -> Vec<ResultRecord> {
        self.outcomes.iter().map(|o| o.record.clone()).collect()
    }
}

/// Runs the full grid on a worker pool sized by the config.
pub fn sweep(
    config: &ExperimentConfig,
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    images: &[RealSignal],
) -> Result<SweepOutput> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.worker_count())
        .build()
        .map_err(|e| HarnessError::Cell(e.to_string()))?;
    let grid = cells(config);
    let outcomes = pool.install(|| -> Result<Vec<ImageOutcome>> {
        let per_cell: Vec<Vec<ImageOutcome>> = grid
            .par_iter()
            .map(|cell| run_cell(config, model, schedule, cell, images))
            .collect::<Result<_>>()?;
        Ok(per_cell.into_iter().flatten().collect())
    })?;
    Ok(SweepOutput { cells: grid, outcomes })
}

/// Writes `results.csv` and the triptychs under `dir`; returns the CSV path.
pub fn write_outputs(config: &ExperimentConfig, output: &SweepOutput, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let csv = dir.join("results.csv");
    write_csv(&output.records(), &csv)?;
    for o in &output.outcomes {
        if o.record.image >= config.triptychs {
            continue;
        }
        if let (Some(obs), Some(regen)) = (&o.observed, &o.regenerated) {
            let name = format!("cell{:03}_img{:03}.pgm", o.record.cell, o.record.image);
            datasets::save_triptych(&o.original, obs, regen, &dir.join(name))?;
        }
    }
    Ok(csv)
}
