//! Multi-user OFDMA downlink: subcarrier allocation, composition of the
//! transmitted vector, the per-user channel, power control, and the receiver
//! estimate `x̂ = A†r + (I − A†A) x̃`.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::linop::{ComplexVector, DiagonalChannel, LinopError, MaskedChannelOp, SignalShape};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OfdmaError {
    #[error("infeasible allocation: {users} users x {per_user} subcarriers exceeds {available} available")]
    Infeasible {
        users: usize,
        per_user: usize,
        available: usize,
    },
    #[error("channels disagree on subcarrier count ({0} vs {1})")]
    ChannelShape(usize, usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("plan violates orthogonality: subcarrier {0} assigned twice")]
    Overlap(usize),
    #[error("zero channel gain on assigned subcarrier {0}")]
    Singular(usize),
    #[error("chunk mapping is not a bijection: {0}")]
    NonBijective(String),
    #[error("malformed plan text: {0}")]
    Parse(String),
    #[error(transparent)]
    Linop(#[from] LinopError),
}

pub type Result<T, E = OfdmaError> = std::result::Result<T, E>;

/// Disjoint per-user subcarrier index lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllocationPlan {
    subcarriers: usize,
    per_user: Vec<Vec<usize>>,
}

impl AllocationPlan {
    pub fn new(subcarriers: usize, per_user: Vec<Vec<usize>>) -> Result<Self> {
        let n = per_user.first().map_or(0, Vec::len);
        let mut used = vec![false; subcarriers];
        for list in &per_user {
            if list.len() != n {
                return Err(OfdmaError::Shape(format!(
                    "user lists have unequal lengths ({} vs {n})",
                    list.len()
                )));
            }
            for &s in list {
                if s >= subcarriers {
                    return Err(LinopError::IndexOutOfRange {
                        index: s,
                        bound: subcarriers,
                    }
                    .into());
                }
                if std::mem::replace(&mut used[s], true) {
                    return Err(OfdmaError::Overlap(s));
                }
            }
        }
        Ok(Self {
            subcarriers,
            per_user,
        })
    }

    pub fn users(&self) -> usize {
        self.per_user.len()
    }

    /// Total subcarrier count `L`.
    pub fn subcarriers(&self) -> usize {
        self.subcarriers
    }

    /// Subcarriers per user `N`.
    pub fn per_user_count(&self) -> usize {
        self.per_user.first().map_or(0, Vec::len)
    }

    pub fn user(&self, k: usize) -> &[usize] {
        &self.per_user[k]
    }

    pub fn per_user(&self) -> &[Vec<usize>] {
        &self.per_user
    }

    /// `L = K·N`: every subcarrier is assigned.
    pub fn is_saturated(&self) -> bool {
        self.subcarriers == self.users() * self.per_user_count()
    }

    /// One line per user with comma-separated subcarrier indices.
    pub fn to_text(&self) -> String {
        self.to_string()
    }

    pub fn from_text(subcarriers: usize, text: &str) -> Result<Self> {
        let per_user = text
            .lines()
            .map(|line| {
                let line = line.trim();
                if line.is_empty() {
                    return Ok(Vec::new());
                }
                line.split(',')
                    .map(|t| {
                        t.trim()
                            .parse::<usize>()
                            .map_err(|_| OfdmaError::Parse(t.to_string()))
                    })
                    .collect()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(subcarriers, per_user)
    }
}

impl fmt::Display for AllocationPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for list in &self.per_user {
            let line: Vec<String> = list.iter().map(|s| s.to_string()).collect();
            writeln!(f, "{}", line.join(","))?;
        }
        Ok(())
    }
}

/// Greedy rotating-priority allocation with multi-user diversity.
///
/// Runs `n` rounds; in round `r` users pick in the order `r, r+1, …` (mod K)
/// and each takes its highest-|gain| unclaimed subcarrier, ties going to the
/// lowest subcarrier index. Each user's list is in pick order.
pub fn allocate(channels: &[DiagonalChannel], n: usize) -> Result<AllocationPlan> {
    let k = channels.len();
    let l = channels.first().map_or(0, DiagonalChannel::len);
    if let Some(c) = channels.iter().find(|c| c.len() != l) {
        return Err(OfdmaError::ChannelShape(l, c.len()));
    }
    if k * n > l {
        return Err(OfdmaError::Infeasible {
            users: k,
            per_user: n,
            available: l,
        });
    }
    let mags: Vec<Vec<f64>> = channels
        .iter()
        .map(|c| (0..l).map(|i| c.magnitude(i)).collect())
        .collect();
    if mags.iter().flatten().any(|m| !m.is_finite()) {
        return Err(LinopError::NonFinite(0).into());
    }
    let mut claimed = vec![false; l];
    let mut per_user = vec![Vec::with_capacity(n); k];
    for round in 0..n {
        for offset in 0..k {
            let user = (round + offset) % k;
            let mut best: Option<usize> = None;
            for s in (0..l).filter(|&s| !claimed[s]) {
                if best.is_none_or(|b| mags[user][s] > mags[user][b]) {
                    best = Some(s);
                }
            }
            let s = best.expect("k*n <= l leaves a free subcarrier");
            claimed[s] = true;
            per_user[user].push(s);
        }
    }
    AllocationPlan::new(l, per_user)
}

/// Which `N` of each user's `M` signal chunks are transmitted, in the order
/// they are placed on the user's allocated subcarriers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkSelection {
    pub signal_len: usize,
    pub per_user: Vec<Vec<usize>>,
}

impl ChunkSelection {
    /// Uniformly random `n`-subsets of `0..m`, sorted, one per user.
    pub fn random<R: Rng + ?Sized>(users: usize, m: usize, n: usize, rng: &mut R) -> Self {
        let per_user = (0..users)
            .map(|_| {
                let mut v = rand::seq::index::sample(rng, m, n.min(m)).into_vec();
                v.sort_unstable();
                v
            })
            .collect();
        Self {
            signal_len: m,
            per_user,
        }
    }

    /// The first `n` chunks for every user.
    pub fn leading(users: usize, m: usize, n: usize) -> Self {
        Self {
            signal_len: m,
            per_user: vec![(0..n.min(m)).collect(); users],
        }
    }
}

/// Builds user `k`'s operator `A_k = H_k B_k` from the plan, the chunk
/// selection, and the user's channel.
pub fn build_operator(
    plan: &AllocationPlan,
    chunks: &ChunkSelection,
    k: usize,
    channel: &DiagonalChannel,
) -> Result<MaskedChannelOp> {
    if channel.len() != plan.subcarriers() {
        return Err(OfdmaError::ChannelShape(plan.subcarriers(), channel.len()));
    }
    let selected = plan.user(k).to_vec();
    let slots = chunks.per_user[k].clone();
    if slots.len() != selected.len() {
        return Err(OfdmaError::Shape(format!(
            "user {k}: {} chunks for {} subcarriers",
            slots.len(),
            selected.len()
        )));
    }
    let gains = ComplexVector {
        re: selected.iter().map(|&s| channel.gains.re[s]).collect(),
        im: selected.iter().map(|&s| channel.gains.im[s]).collect(),
    };
    Ok(MaskedChannelOp::new(
        plan.subcarriers(),
        chunks.signal_len,
        selected,
        slots,
        gains,
    )?)
}

/// `y = Σ_k B_k x_k`: subcarrier `plan.user(k)[i]` carries `x_k[chunks[k][i]]`.
pub fn compose_downlink(
    plan: &AllocationPlan,
    chunks: &ChunkSelection,
    signals: &[ComplexVector],
) -> Result<ComplexVector> {
    if signals.len() != plan.users() || chunks.per_user.len() != plan.users() {
        return Err(OfdmaError::Shape(format!(
            "{} signals / {} chunk lists for {} users",
            signals.len(),
            chunks.per_user.len(),
            plan.users()
        )));
    }
    let mut y = ComplexVector::zeros(plan.subcarriers());
    for (k, x) in signals.iter().enumerate() {
        if x.len() != chunks.signal_len {
            return Err(LinopError::DimensionMismatch {
                expected: chunks.signal_len,
                got: x.len(),
            }
            .into());
        }
        let slots = &chunks.per_user[k];
        if slots.len() != plan.user(k).len() {
            return Err(OfdmaError::Shape(format!("user {k} chunk count")));
        }
        for (&sc, &j) in plan.user(k).iter().zip(slots) {
            y.set(sc, x.get(j));
        }
    }
    Ok(y)
}

/// `r = diag(H) y + n` with circularly-symmetric Gaussian noise of total
/// variance `sigma_n²` (per-axis std `sigma_n/√2`).
pub fn receive<R: Rng + ?Sized>(
    y: &ComplexVector,
    channel: &DiagonalChannel,
    sigma_n: f64,
    rng: &mut R,
) -> Result<ComplexVector> {
    if channel.len() != y.len() {
        return Err(LinopError::DimensionMismatch {
            expected: channel.len(),
            got: y.len(),
        }
        .into());
    }
    let axis = sigma_n / std::f64::consts::SQRT_2;
    let mut r = ComplexVector::zeros(y.len());
    for i in 0..y.len() {
        let (gr, gi) = channel.gains.get(i);
        let (yr, yi) = y.get(i);
        let mut v = (gr * yr - gi * yi, gr * yi + gi * yr);
        if sigma_n > 0.0 {
            v.0 += axis * rng.sample::<f64, _>(StandardNormal);
            v.1 += axis * rng.sample::<f64, _>(StandardNormal);
        }
        r.set(i, v);
    }
    Ok(r)
}

/// Effective channel after transmit-side power control: assigned subcarriers
/// are equalized to unit gain, so the resulting operator is a pure mask.
pub fn power_control(channel: &DiagonalChannel, assigned: &[usize]) -> Result<DiagonalChannel> {
    let mut out = channel.clone();
    for &s in assigned {
        if s >= channel.len() {
            return Err(LinopError::IndexOutOfRange {
                index: s,
                bound: channel.len(),
            }
            .into());
        }
        if channel.gains.norm_sqr(s) == 0.0 {
            return Err(OfdmaError::Singular(s));
        }
        out.gains.set(s, (1.0, 0.0));
    }
    Ok(out)
}

/// i.i.d. Rayleigh-fading gains `CN(0, 1)` for `len` subcarriers.
pub fn rayleigh_channel<R: Rng + ?Sized>(len: usize, rng: &mut R) -> DiagonalChannel {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut gains = ComplexVector::zeros(len);
    for i in 0..len {
        gains.set(
            i,
            (
                s * rng.sample::<f64, _>(StandardNormal),
                s * rng.sample::<f64, _>(StandardNormal),
            ),
        );
    }
    DiagonalChannel { gains }
}

/// `x̂ = A†r + (I − A†A) x̃` restricted to real signals.
///
/// Signals are real (real/imaginary stacking), so the imaginary part of `A†r`
/// carries only noise and is discarded.
pub fn assemble_estimate(op: &MaskedChannelOp, r: &ComplexVector, x_tilde: &[f64]) -> Result<Vec<f64>> {
    let recovered = op.pinv_apply(r)?;
    let null = op.null_project(x_tilde)?;
    Ok(recovered.re.iter().zip(&null).map(|(a, b)| a + b).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MappingMode {
    /// Chunk `j` is samples `j·P .. (j+1)·P` of the flattened signal.
    Contiguous,
    /// Chunk `j` is the square patch in grid cell `(j / cols, j % cols)`.
    PatchGrid { rows: usize, cols: usize },
    Custom,
}

/// Bijection between the `M` signal chunks and disjoint pixel groups covering
/// the image.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkMapping {
    shape: SignalShape,
    mode: MappingMode,
    groups: Vec<Vec<usize>>,
}

impl ChunkMapping {
    pub fn contiguous(shape: SignalShape, m: usize) -> Result<Self> {
        let len = shape.len();
        if m == 0 || len % m != 0 {
            return Err(OfdmaError::NonBijective(format!(
                "{len} samples do not split into {m} equal chunks"
            )));
        }
        let p = len / m;
        let groups = (0..m).map(|j| (j * p..(j + 1) * p).collect()).collect();
        Ok(Self {
            shape,
            mode: MappingMode::Contiguous,
            groups,
        })
    }

    /// `rows × cols` grid of equal patches over a grayscale image.
    pub fn patch_grid(shape: SignalShape, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || shape.height % rows != 0 || shape.width % cols != 0 {
            return Err(OfdmaError::NonBijective(format!(
                "{}x{} image does not tile into {rows}x{cols} patches",
                shape.height, shape.width
            )));
        }
        let (ph, pw) = (shape.height / rows, shape.width / cols);
        let c = shape.channels;
        let mut groups = Vec::with_capacity(rows * cols);
        for gr in 0..rows {
            for gc in 0..cols {
                let mut g = Vec::with_capacity(ph * pw * c);
                for y in gr * ph..(gr + 1) * ph {
                    for x in gc * pw..(gc + 1) * pw {
                        for ch in 0..c {
                            g.push((y * shape.width + x) * c + ch);
                        }
                    }
                }
                groups.push(g);
            }
        }
        Ok(Self {
            shape,
            mode: MappingMode::PatchGrid { rows, cols },
            groups,
        })
    }

    /// Square patch grid with `m` chunks (`m` must be a perfect square).
    pub fn square_patches(shape: SignalShape, m: usize) -> Result<Self> {
        let side = (m as f64).sqrt().round() as usize;
        if side * side != m {
            return Err(OfdmaError::NonBijective(format!("{m} is not a square grid")));
        }
        Self::patch_grid(shape, side, side)
    }

    /// Arbitrary grouping; validated to cover every pixel exactly once.
    pub fn from_groups(shape: SignalShape, groups: Vec<Vec<usize>>) -> Result<Self> {
        let mapping = Self {
            shape,
            mode: MappingMode::Custom,
            groups,
        };
        mapping.validate()?;
        Ok(mapping)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.shape.len()];
        for g in &self.groups {
            for &p in g {
                if p >= seen.len() {
                    return Err(OfdmaError::NonBijective(format!("pixel {p} outside image")));
                }
                if std::mem::replace(&mut seen[p], true) {
                    return Err(OfdmaError::NonBijective(format!("pixel {p} in two chunks")));
                }
            }
        }
        if let Some(p) = seen.iter().position(|s| !s) {
            return Err(OfdmaError::NonBijective(format!("pixel {p} not covered")));
        }
        Ok(())
    }

    pub fn chunks(&self) -> usize {
        self.groups.len()
    }

    pub fn shape(&self) -> SignalShape {
        self.shape
    }

    pub fn mode(&self) -> MappingMode {
        self.mode
    }

    pub fn group(&self, j: usize) -> &[usize] {
        &self.groups[j]
    }

    /// Pixels per chunk when all chunks are equal-sized.
    pub fn chunk_len(&self) -> Option<usize> {
        let p = self.groups.first()?.len();
        self.groups.iter().all(|g| g.len() == p).then_some(p)
    }

    /// Pixel-space selection operator keeping the pixels of `chunks`.
    pub fn pixel_operator(&self, chunks: &[usize]) -> Result<MaskedChannelOp> {
        let mut kept: Vec<usize> = Vec::new();
        for &j in chunks {
            let g = self.groups.get(j).ok_or(LinopError::IndexOutOfRange {
                index: j,
                bound: self.groups.len(),
            })?;
            kept.extend_from_slice(g);
        }
        kept.sort_unstable();
        Ok(MaskedChannelOp::mask(self.shape.len(), &kept)?)
    }
}

/// Binary mask over the image: 1 on pixels of transmitted chunks, 0 elsewhere.
pub fn pixel_mask(transmitted: &[usize], mapping: &ChunkMapping) -> Result<Vec<u8>> {
    mapping.validate()?;
    let mut mask = vec![0u8; mapping.shape.len()];
    for &j in transmitted {
        let g = mapping.groups.get(j).ok_or(LinopError::IndexOutOfRange {
            index: j,
            bound: mapping.chunks(),
        })?;
        for &p in g {
            mask[p] = 1;
        }
    }
    Ok(mask)
}
