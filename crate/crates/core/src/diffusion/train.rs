use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{DiffusionError, Example, MlpArch, MlpDenoiser, NoiseSchedule, Result};

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; params],
            v: vec![0.0; params],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Stop early once the running loss falls below this value.
    pub target_loss: Option<f64>,
    /// Cosine-anneal the learning rate to zero over `steps`.
    pub cosine_decay: bool,
    /// Exponential moving average of the weights; `0` disables it.
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
            target_loss: None,
            cosine_decay: false,
            ema_decay: 0.0,
        }
    }
}

/// Model, optimizer moments, step counter and running loss.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: MlpDenoiser,
    pub ema: Option<Vec<f64>>,
    pub optimizer: Adam,
    pub step: usize,
    /// Loss of the first batch.
    pub initial_loss: f64,
    /// Exponential average of the batch loss (factor 0.98).
    pub running_loss: f64,
}

impl TrainState {
    /// The EMA weights when enabled, otherwise the raw weights.
    pub fn final_model(&self) -> MlpDenoiser {
        match &self.ema {
            Some(p) => MlpDenoiser::from_params(self.model.arch(), p.clone()).expect("same arch"),
            None => self.model.clone(),
        }
    }
}

/// ε-prediction training on uniformly sampled `(image, t, ε)` triples.
/// Fully deterministic given `config.seed`.
pub fn train(
    model: MlpDenoiser,
    dataset: &[Vec<f64>],
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<TrainState> {
    train_with(model, dataset, schedule, config, |_| {})
}

/// [`train`] with a progress callback invoked after every step.
pub fn train_with(
    model: MlpDenoiser,
    dataset: &[Vec<f64>],
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    mut progress: impl FnMut(&TrainState),
) -> Result<TrainState> {
    if dataset.is_empty() {
        return Err(DiffusionError::EmptyDataset);
    }
    if config.batch_size == 0 {
        return Err(DiffusionError::EmptyBatch);
    }
    let d = model.arch().input_dim;
    if let Some(x) = dataset.iter().find(|x| x.len() != d) {
        return Err(DiffusionError::Shape(d, x.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = TrainState {
        optimizer: Adam::new(model.param_count(), config.lr),
        ema: (config.ema_decay > 0.0).then(|| model.params().to_vec()),
        model,
        step: 0,
        initial_loss: f64::NAN,
        running_loss: f64::NAN,
    };
    let mut eps_buf = vec![vec![0.0; d]; config.batch_size];
    while state.step < config.steps {
        let picks: Vec<(usize, usize)> = (0..config.batch_size)
            .map(|_| (rng.random_range(0..dataset.len()), rng.random_range(1..=schedule.steps())))
            .collect();
        for e in eps_buf.iter_mut() {
            for v in e.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
        }
        let batch: Vec<Example> = picks
            .iter()
            .zip(&eps_buf)
            .map(|(&(i, t), eps)| Example { x0: &dataset[i], t, eps })
            .collect();
        let (loss, grad) = state.model.loss_and_gradient(&batch, schedule).map_err(|e| {
            DiffusionError::Diverged(format!("step {}: {e}", state.step))
        })?;

        let lr = if config.cosine_decay {
            let progress = state.step as f64 / config.steps as f64;
            config.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        } else {
            config.lr
        };
        state.optimizer.update(state.model.params_mut(), &grad, lr);
        if let Some(ema) = state.ema.as_mut() {
            let k = config.ema_decay;
            for (e, p) in ema.iter_mut().zip(state.model.params()) {
                *e = k * *e + (1.0 - k) * p;
            }
        }
        if state.step == 0 {
            state.initial_loss = loss;
            state.running_loss = loss;
        } else {
            state.running_loss = 0.98 * state.running_loss + 0.02 * loss;
        }
        state.step += 1;
        progress(&state);
        if config.target_loss.is_some_and(|t| state.running_loss < t) {
            break;
        }
    }
    Ok(state)
}

const MAGIC: &str = "genofdma-checkpoint";
const VERSION: u32 = 1;

/// A trained denoiser with the schedule it was trained against.
///
/// On disk: one ASCII header line
/// `genofdma-checkpoint v1 input=D hidden=H1,H2 embed=E T=T beta_start=B0 beta_end=B1 seed=S params=P`
/// followed by `P` little-endian `f64` parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: MlpDenoiser,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub seed: u64,
}

impl Checkpoint {
    pub fn new(model: MlpDenoiser, schedule: &NoiseSchedule, seed: u64) -> Self {
        let (beta_start, beta_end) = schedule.beta_range();
        Self {
            model,
            steps: schedule.steps(),
            beta_start,
            beta_end,
            seed,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        let a = self.model.arch();
        writeln!(
            w,
            "{MAGIC} v{VERSION} input={} hidden={},{} embed={} T={} beta_start={} beta_end={} seed={} params={}",
            a.input_dim,
            a.hidden[0],
            a.hidden[1],
            a.time_embed,
            self.steps,
            self.beta_start,
            self.beta_end,
            self.seed,
            self.model.param_count()
        )?;
        for p in self.model.params() {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let bad = |m: &str| DiffusionError::Checkpoint(m.to_string());
        let mut reader = BufReader::new(r);
        let mut header = String::new();
        reader.read_line(&mut header).map_err(|e| bad(&e.to_string()))?;
        let mut tokens = header.split_whitespace();
        if tokens.next() != Some(MAGIC) {
            return Err(bad("not a checkpoint file"));
        }
        if tokens.next() != Some("v1") {
            return Err(bad("unsupported checkpoint version"));
        }
        let mut fields = std::collections::HashMap::new();
        for tok in tokens {
            let (k, v) = tok.split_once('=').ok_or_else(|| bad(tok))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| fields.get(k).ok_or_else(|| bad(&format!("missing {k}")));
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(k)) };
        let float = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(k)) };
        let hidden: Vec<usize> = get("hidden")?
            .split(',')
            .map(|s| s.parse().map_err(|_| bad("hidden")))
            .collect::<Result<_>>()?;
        if hidden.len() != 2 {
            return Err(bad("hidden must list two widths"));
        }
        let arch = MlpArch {
            input_dim: num("input")?,
            hidden: [hidden[0], hidden[1]],
            time_embed: num("embed")?,
        };
        let count = num("params")?;
        if count != arch.param_count() {
            return Err(bad("parameter count does not match architecture"));
        }
        let mut bytes = vec![0u8; count * 8];
        reader.read_exact(&mut bytes).map_err(|e| bad(&e.to_string()))?;
        let params = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self {
            model: MlpDenoiser::from_params(arch, params)?,
            steps: num("T")?,
            beta_start: float("beta_start")?,
            beta_end: float("beta_end")?,
            seed: get("seed")?.parse().map_err(|_| bad("seed"))?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = std::io::BufWriter::new(File::create(&tmp).map_err(|e| io(path, e))?);
        self.write_to(&mut f).map_err(|e| io(path, e))?;
        f.flush().map_err(|e| io(path, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(File::open(path).map_err(|e| io(path, e))?)
    }
}

fn io(path: &Path, e: std::io::Error) -> DiffusionError {
    DiffusionError::Checkpoint(format!("{}: {e}", path.display()))
}
