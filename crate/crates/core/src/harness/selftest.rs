//! A quick invariant suite that runs without a trained model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{forward_sample, Example, MlpArch, MlpDenoiser, NoiseSchedule};
use crate::linop::{ComplexVector, MaskedChannelOp, RealSignal, SignalShape};
use crate::metrics::{frechet_gaussian, ssim, SsimConfig};
use crate::modem::{self, SnrSpec};
use crate::nullspace::{self, correction_params, InverseProblem, LambdaRule, SamplerOptions};
use crate::{datasets, ofdma};

type Check = fn() -> Result<(), String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random_op(rng: &mut ChaCha8Rng) -> MaskedChannelOp {
    let m = rng.random_range(1..=16);
    let n = rng.random_range(0..=m);
    let l = rng.random_range(n.max(1)..=16);
    let slots = rand::seq::index::sample(rng, m, n).into_vec();
    let sc = rand::seq::index::sample(rng, l, n).into_vec();
    let gains: Vec<(f64, f64)> = (0..n).map(|_| (rng.random_range(0.1..2.0), rng.random_range(-2.0..2.0))).collect();
    MaskedChannelOp::new(l, m, sc, slots, ComplexVector::from_pairs(&gains)).expect("valid random operator")
}

fn projectors() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let op = random_op(&mut rng);
        let x: Vec<f64> = (0..op.signal_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (range, null) = op.decompose(&x).map_err(|e| e.to_string())?;
        ensure(range.iter().zip(&null).zip(&x).all(|((a, b), v)| a + b == *v), "decompose sum")?;
        let an = op.apply_real(&null).map_err(|e| e.to_string())?;
        ensure(an.re.iter().chain(&an.im).all(|v| *v == 0.0), "A applied to null part is nonzero")?;
        let back = op.pinv_apply(&op.apply_real(&x).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        ensure(back.re.iter().zip(&range).all(|(a, b)| (a - b).abs() < 1e-10), "A†A x ≠ range part")?;
    }
    Ok(())
}

fn allocation() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for k in 1..=4 {
        let n = 3;
        let chans: Vec<_> = (0..k).map(|_| ofdma::rayleigh_channel(k * n, &mut rng)).collect();
        let plan = ofdma::allocate(&chans, n).map_err(|e| e.to_string())?;
        let mut seen = vec![false; k * n];
        for u in 0..k {
            ensure(plan.user(u).len() == n, "per-user count")?;
            for &s in plan.user(u) {
                ensure(!std::mem::replace(&mut seen[s], true), "subcarrier assigned twice")?;
            }
        }
    }
    Ok(())
}

fn modem_round_trip() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pixels: Vec<f64> = (0..512).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let (rx, ber) = modem::pixel_link(&pixels, SnrSpec::noiseless(), &mut rng);
    ensure(ber == 0.0, "noiseless BER")?;
    ensure(rx.iter().zip(&pixels).all(|(a, b)| (a - b).abs() <= 2.0 / 256.0), "pixel error above 2/256")
}

fn schedule() -> Result<(), String> {
    let s = NoiseSchedule::default_linear();
    ensure(s.alpha_bar(1000) < 1e-4, "ᾱ_T too large")?;
    let x0 = [0.5, -0.5];
    let xt = forward_sample(&x0, 400, &[0.0, 0.0], &s).map_err(|e| e.to_string())?;
    ensure((xt[0] - s.alpha_bar(400).sqrt() * 0.5).abs() < 1e-15, "forward mean")
}

fn gradient() -> Result<(), String> {
    let m = MlpDenoiser::init(MlpArch::new(4, 6, 2), 5).map_err(|e| e.to_string())?;
    let s = NoiseSchedule::linear(20, 1e-3, 0.05).map_err(|e| e.to_string())?;
    let x0 = [0.1, -0.3, 0.8, 0.0];
    let eps = [0.5, 1.0, -1.5, 0.2];
    let batch = [Example { x0: &x0, t: 7, eps: &eps }];
    let (_, grad) = m.loss_and_gradient(&batch, &s).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let i = rng.random_range(0..m.param_count());
        let mut p = m.clone();
        p.params_mut()[i] += 1e-5;
        let up = p.loss_and_gradient(&batch, &s).map_err(|e| e.to_string())?.0;
        p.params_mut()[i] -= 2e-5;
        let down = p.loss_and_gradient(&batch, &s).map_err(|e| e.to_string())?.0;
        let fd = (up - down) / 2e-5;
        let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
        ensure(rel < 1e-4, format!("param {i}: relative error {rel:e}"))?;
    }
    Ok(())
}

fn constraint_identity() -> Result<(), String> {
    let s = NoiseSchedule::default_linear();
    for sigma_r in [0.0, 0.05, 0.2, 1.0] {
        let p = correction_params(&s, sigma_r, LambdaRule::Saturating).map_err(|e| e.to_string())?;
        for t in 1..=s.steps() {
            let lhs = (s.x0_coef(t) * p.lambda(t) * sigma_r).powi(2) + p.gamma(t);
            ensure((lhs - s.sigma(t).powi(2)).abs() < 1e-12 && p.gamma(t) >= 0.0, format!("t={t}"))?;
        }
    }
    Ok(())
}

fn consistency() -> Result<(), String> {
    let s = NoiseSchedule::linear(20, 1e-3, 0.1).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..5 {
        let op = random_op(&mut rng);
        let x: Vec<f64> = (0..op.signal_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = op.apply_real(&x).map_err(|e| e.to_string())?;
        let model = MlpDenoiser::init(MlpArch::new(op.signal_len(), 8, 2), 0).map_err(|e| e.to_string())?;
        let p = InverseProblem::new(op, r, 0.0).map_err(|e| e.to_string())?;
        let out = nullspace::sample(&model, &s, &p, SamplerOptions::default(), &mut rng).map_err(|e| e.to_string())?;
        ensure(p.residual(&out).map_err(|e| e.to_string())? < 1e-6, "‖A x̂ − r‖∞ ≥ 1e-6")?;
    }
    Ok(())
}

fn metric_oracles() -> Result<(), String> {
    use nalgebra::{DMatrix, DVector};
    let d = frechet_gaussian(
        &DVector::from_vec(vec![0.0]),
        &DMatrix::from_element(1, 1, 1.0),
        &DVector::from_vec(vec![1.0]),
        &DMatrix::from_element(1, 1, 4.0),
    )
    .map_err(|e| e.to_string())?;
    ensure((d - 2.0).abs() < 1e-9, format!("1-D Fréchet {d}"))?;
    let x: Vec<f64> = (0..256).map(|i| ((i * 37) % 17) as f64 / 8.0 - 1.0).collect();
    let v = ssim(&x, &x, SignalShape::gray(16, 16), &SsimConfig::default()).map_err(|e| e.to_string())?;
    ensure((v - 1.0).abs() < 1e-12, "ssim(x, x) ≠ 1")
}

fn pgm() -> Result<(), String> {
    let im = RealSignal::new(vec![-1.0, 0.0, 0.5, 1.0], SignalShape::gray(2, 2)).map_err(|e| e.to_string())?;
    let back = datasets::parse_pgm(&datasets::encode_pgm(&im)).map_err(|e| e.to_string())?;
    ensure(
        back.values.iter().zip(&im.values).all(|(a, b)| (a - b).abs() <= 1.0 / 255.0),
        "PGM round trip",
    )
}

/// `(name, check)` pairs in run order.
pub const CHECKS: [(&str, Check); 9] = [
    ("projectors", projectors),
    ("allocation", allocation),
    ("modem_round_trip", modem_round_trip),
    ("schedule", schedule),
    ("gradient", gradient),
    ("constraint_identity", constraint_identity),
    ("noiseless_consistency", consistency),
    ("metric_oracles", metric_oracles),
    ("pgm_round_trip", pgm),
];

/// Runs every check and returns `(name, outcome)` pairs.
pub fn run_all() -> Vec<(&'static str, Result<(), String>)> {
    CHECKS.iter().map(|(name, f)| (*name, f())).collect()
}
