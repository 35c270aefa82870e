//! Helpers shared by the integration tests and the acceptance target.
#![allow(dead_code)]

use genofdma::linop::{ComplexVector, DiagonalChannel, MaskedChannelOp};
use genofdma::ofdma::{self, AllocationPlan, ChunkSelection};
use nalgebra::{Complex, DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type CMatrix = DMatrix<Complex<f64>>;

/// A random multi-user downlink: plan, chunk selection, channels, and the
/// per-user operators built from them.
pub struct Downlink {
    pub plan: AllocationPlan,
    pub chunks: ChunkSelection,
    pub channels: Vec<DiagonalChannel>,
    pub ops: Vec<MaskedChannelOp>,
}

/// Draws `K ≤ 4` users on `L ≤ 16` subcarriers with `N ≤ M` chunks each.
pub fn random_downlink(rng: &mut ChaCha8Rng) -> Downlink {
    let k = rng.random_range(1..=4);
    let l = rng.random_range(k..=16);
    let n = rng.random_range(0..=l / k);
    let m = rng.random_range(n.max(1)..=16);
    let channels: Vec<DiagonalChannel> = (0..k).map(|_| ofdma::rayleigh_channel(l, rng)).collect();
    let plan = ofdma::allocate(&channels, n).unwrap();
    let chunks = ChunkSelection::random(k, m, n, rng);
    let ops = (0..k)
        .map(|u| ofdma::build_operator(&plan, &chunks, u, &channels[u]).unwrap())
        .collect();
    Downlink {
        plan,
        chunks,
        channels,
        ops,
    }
}

/// Dense `L × M` matrix of an operator.
pub fn dense(op: &MaskedChannelOp) -> CMatrix {
    let mut a = CMatrix::zeros(op.subcarriers(), op.signal_len());
    for (i, (&row, &col)) in op.selected().iter().zip(op.slot_of()).enumerate() {
        let (re, im) = op.gains().get(i);
        a[(row, col)] = Complex::new(re, im);
    }
    a
}

/// Moore–Penrose inverse through the SVD.
pub fn dense_pinv(a: &CMatrix) -> CMatrix {
    if a.nrows() == 0 || a.ncols() == 0 {
        return CMatrix::zeros(a.ncols(), a.nrows());
    }
    a.clone().pseudo_inverse(1e-12).unwrap()
}

/// Dense `L × M` 0/1 selection matrix `B_k` of one user.
pub fn selection_matrix(plan: &AllocationPlan, chunks: &ChunkSelection, k: usize) -> CMatrix {
    let mut b = CMatrix::zeros(plan.subcarriers(), chunks.signal_len);
    for (&sc, &j) in plan.user(k).iter().zip(&chunks.per_user[k]) {
        b[(sc, j)] = Complex::new(1.0, 0.0);
    }
    b
}

pub fn to_dense_vec(v: &ComplexVector) -> DVector<Complex<f64>> {
    DVector::from_iterator(v.len(), (0..v.len()).map(|i| Complex::new(v.re[i], v.im[i])))
}

pub fn real_vec(x: &[f64]) -> DVector<Complex<f64>> {
    DVector::from_iterator(x.len(), x.iter().map(|&v| Complex::new(v, 0.0)))
}

pub fn max_abs_diff(a: &CMatrix, b: &CMatrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

pub fn random_signal(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn random_complex(rng: &mut ChaCha8Rng, len: usize) -> ComplexVector {
    ComplexVector {
        re: random_signal(rng, len),
        im: random_signal(rng, len),
    }
}

/// Exact Gray-coded square 16QAM bit error rate on AWGN at linear `Es/N0`:
/// `(3Q(d) + 2Q(3d) − Q(5d)) / 4`, `d` the half-spacing over the per-axis
/// noise std.
pub fn qam16_gray_ber(es_n0: f64) -> f64 {
    use statrs::function::erf::erfc;
    let q = |x: f64| 0.5 * erfc(x / std::f64::consts::SQRT_2);
    // unit-energy points ±1/√10, ±3/√10; per-axis noise std √(N0/2)
    let d = (1.0 / 10f64).sqrt() / (1.0 / (2.0 * es_n0)).sqrt();
    (3.0 * q(d) + 2.0 * q(3.0 * d) - q(5.0 * d)) / 4.0
}

/// A trained toy model and the wall-clock seconds its training took.
pub struct ToyModel {
    pub model: genofdma::diffusion::MlpDenoiser,
    pub schedule: genofdma::diffusion::NoiseSchedule,
    pub train_seconds: f64,
    pub from_cache: bool,
    pub final_loss: Option<f64>,
}

/// Trains the toy denoiser described by `cfg`, reusing a checkpoint cached
/// under the target directory when the training settings are unchanged.
pub fn cached_model(cfg: &genofdma::harness::ExperimentConfig) -> ToyModel {
    use std::hash::{Hash, Hasher};
    use genofdma::diffusion::Checkpoint;

    let key = format!(
        "{}x{} {:?} {} {} | T={} beta={}..{} | w={} e={} | steps={} batch={} lr={} cos={} ema={} target={:?} seed={} | v{}",
        cfg.image_height,
        cfg.image_width,
        cfg.classes,
        cfg.train_count,
        cfg.train_seed,
        cfg.steps,
        cfg.beta_start,
        cfg.beta_end,
        cfg.width,
        cfg.time_embed,
        cfg.train_steps,
        cfg.batch_size,
        cfg.lr,
        cfg.cosine_decay,
        cfg.ema_decay,
        cfg.target_loss,
        cfg.seed,
        env!("CARGO_PKG_VERSION"),
    );
    let mut h = std::collections::hash_map::DefaultHasher::new();
    key.hash(&mut h);
    let path = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("toy-{:016x}.ckpt", h.finish()));
    let secs_path = path.with_extension("secs");
    if let (Ok(ck), Ok(secs)) = (Checkpoint::load(&path), std::fs::read_to_string(&secs_path)) {
        return ToyModel {
            schedule: ck.schedule().unwrap(),
            model: ck.model,
            train_seconds: secs.trim().parse().unwrap_or(f64::NAN),
            from_cache: true,
            final_loss: None,
        };
    }
    let start = std::time::Instant::now();
    let state = genofdma::harness::run::train_model(cfg, |_| {}).unwrap();
    let train_seconds = start.elapsed().as_secs_f64();
    let schedule = cfg.schedule().unwrap();
    let model = state.final_model();
    Checkpoint::new(model.clone(), &schedule, cfg.seed).save(&path).unwrap();
    std::fs::write(&secs_path, format!("{train_seconds}\n")).unwrap();
    ToyModel {
        model,
        schedule,
        train_seconds,
        from_cache: false,
        final_loss: Some(state.running_loss),
    }
}
