//! Finite-state Markov chains driving the oracle noise.
//!
//! A [`MarkovNoiseChain`] pairs a row-stochastic transition matrix with one
//! scalar noise law per state. Construction checks that the chain is
//! primitive (irreducible and aperiodic) and caches its stationary
//! distribution.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const ROW_SUM_TOL: f64 = 1e-12;
const STATIONARY_TOL: f64 = 1e-13;
const STATIONARY_MAX_ITERS: usize = 10_000_000;
/// Iteration cap for mixing-time powering.
pub const MIXING_MAX_STEPS: u64 = 10_000_000;
/// Absolute slack when comparing a deviation against `epsilon`.
///
/// Decimal transition probabilities are not representable exactly, so exact
/// ties such as `p = 0.55, ε = 0.05` land a few ulps on either side.
pub const MIXING_TIE_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum MarkovError {
    #[error("invalid chain: {0}")]
    Invalid(String),
    #[error("chain is not ergodic: {0}")]
    NotErgodic(String),
    #[error("stationary distribution did not converge after {0} iterations")]
    NoConvergence(usize),
    #[error("mixing time exceeds {0} steps; chain is effectively non-ergodic")]
    MixingCap(u64),
    #[error("invalid noise law: {0}")]
    InvalidNoise(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Constant,
    Gaussian,
    TruncatedGaussian,
}

/// Scalar law of the per-coordinate noise emitted in one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseDistribution {
    Constant { mean: f64 },
    Gaussian { mean: f64, sigma: f64 },
    /// Gaussian conditioned on `|x − mean| ≤ bound`.
    TruncatedGaussian { mean: f64, sigma: f64, bound: f64 },
}

impl NoiseDistribution {
    pub fn constant(mean: f64) -> Self {
        Self::Constant { mean }
    }

    pub fn gaussian(mean: f64, sigma: f64) -> Result<Self, MarkovError> {
        check_sigma(sigma)?;
        Ok(Self::Gaussian { mean, sigma })
    }

    pub fn truncated_gaussian(mean: f64, sigma: f64, bound: f64) -> Result<Self, MarkovError> {
        check_sigma(sigma)?;
        if !(bound > 0.0 && bound.is_finite()) {
            return Err(MarkovError::InvalidNoise(format!("bound must be positive, got {bound}")));
        }
        Ok(Self::TruncatedGaussian { mean, sigma, bound })
    }

    /// Build a law from config-style fields.
    pub fn from_kind(kind: NoiseKind, mean: f64, sigma: f64, bound: Option<f64>) -> Result<Self, MarkovError> {
        match kind {
            NoiseKind::Constant => Ok(Self::constant(mean)),
            NoiseKind::Gaussian => Self::gaussian(mean, sigma),
            NoiseKind::TruncatedGaussian => {
                let bound = bound.ok_or_else(|| {
                    MarkovError::InvalidNoise("truncated_gaussian requires noise_bound".into())
                })?;
                Self::truncated_gaussian(mean, sigma, bound)
            }
        }
    }

    pub fn kind(&self) -> NoiseKind {
        match self {
            Self::Constant { .. } => NoiseKind::Constant,
            Self::Gaussian { .. } => NoiseKind::Gaussian,
            Self::TruncatedGaussian { .. } => NoiseKind::TruncatedGaussian,
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Self::Constant { mean } | Self::Gaussian { mean, .. } | Self::TruncatedGaussian { mean, .. } => mean,
        }
    }

    pub fn sigma(&self) -> f64 {
        match *self {
            Self::Constant { .. } => 0.0,
            Self::Gaussian { sigma, .. } | Self::TruncatedGaussian { sigma, .. } => sigma,
        }
    }

    /// Half-width of the support around the mean, `None` if unbounded.
    pub fn support_half_width(&self) -> Option<f64> {
        match *self {
            Self::Constant { .. } => Some(0.0),
            Self::Gaussian { sigma, .. } => (sigma == 0.0).then_some(0.0),
            Self::TruncatedGaussian { sigma, bound, .. } => Some(if sigma == 0.0 { 0.0 } else { bound }),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Self::Constant { mean } => mean,
            Self::Gaussian { mean, sigma } => {
                if sigma == 0.0 {
                    mean
                } else {
                    mean + sigma * rng.sample::<f64, _>(StandardNormal)
                }
            }
            Self::TruncatedGaussian { mean, sigma, bound } => {
                if sigma == 0.0 {
                    return mean;
                }
                loop {
                    let x = sigma * rng.sample::<f64, _>(StandardNormal);
                    if x.abs() <= bound {
                        return mean + x;
                    }
                }
            }
        }
    }

    /// Fill `out` with independent draws, one per coordinate.
    pub fn fill<R: Rng + ?Sized>(&self, out: &mut [f64], rng: &mut R) {
        for x in out {
            *x = self.sample(rng);
        }
    }
}

fn check_sigma(sigma: f64) -> Result<(), MarkovError> {
    if sigma >= 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(MarkovError::InvalidNoise(format!("sigma must be non-negative, got {sigma}")))
    }
}

/// `dim` independent draws from `dist`.
pub fn sample_noise<R: Rng + ?Sized>(dist: &NoiseDistribution, dim: usize, rng: &mut R) -> DVector<f64> {
    let mut v = DVector::zeros(dim);
    dist.fill(v.as_mut_slice(), rng);
    v
}

/// How the state at time zero is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitialState {
    /// Draw `ξ₀ ~ π`, making the chain stationary.
    #[default]
    Stationary,
    /// Start from a fixed state, for burn-in studies.
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkovNoiseChain {
    transition: DMatrix<f64>,
    state_noise: Vec<NoiseDistribution>,
    initial: InitialState,
    stationary: DVector<f64>,
}

impl MarkovNoiseChain {
    pub fn new(transition: DMatrix<f64>, state_noise: Vec<NoiseDistribution>) -> Result<Self, MarkovError> {
        let n = transition.nrows();
        if n == 0 || !transition.is_square() {
            return Err(MarkovError::Invalid("transition matrix must be square and non-empty".into()));
        }
        if state_noise.len() != n {
            return Err(MarkovError::Invalid(format!(
                "{} noise laws for {n} states",
                state_noise.len()
            )));
        }
        for (i, row) in transition.row_iter().enumerate() {
            if row.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                return Err(MarkovError::Invalid(format!("row {i} has a negative or non-finite entry")));
            }
            let s: f64 = row.sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(MarkovError::Invalid(format!("row {i} sums to {s}")));
            }
        }
        if !is_primitive(&transition) {
            return Err(MarkovError::NotErgodic(
                "no power T^k with k <= n^2 is entrywise positive".into(),
            ));
        }
        let stationary = stationary_distribution(&transition)?;
        Ok(Self { transition, state_noise, initial: InitialState::Stationary, stationary })
    }

    pub fn with_initial_state(mut self, initial: InitialState) -> Result<Self, MarkovError> {
        if let InitialState::Fixed(s) = initial {
            if s >= self.n_states() {
                return Err(MarkovError::Invalid(format!("initial state {s} out of range")));
            }
        }
        self.initial = initial;
        Ok(self)
    }

    pub fn n_states(&self) -> usize {
        self.transition.nrows()
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    pub fn state_noise(&self) -> &[NoiseDistribution] {
        &self.state_noise
    }

    pub fn initial_state(&self) -> InitialState {
        self.initial
    }

    /// The cached stationary distribution `π`.
    pub fn stationary(&self) -> &DVector<f64> {
        &self.stationary
    }

    /// `Σ_m π_m · mean_m`, the bias of the additive noise under `π`.
    pub fn stationary_mean_noise(&self) -> f64 {
        self.stationary.iter().zip(&self.state_noise).map(|(p, n)| p * n.mean()).sum()
    }

    pub(crate) fn draw_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match self.initial {
            InitialState::Stationary => draw_from(self.stationary.as_slice(), rng),
            InitialState::Fixed(s) => s,
        }
    }

    pub(crate) fn draw_stationary<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        draw_from(self.stationary.as_slice(), rng)
    }

    pub(crate) fn draw_next<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> usize {
        let row = self.transition.row(state);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (j, &w) in row.iter().enumerate() {
            acc += w;
            if u < acc {
                return j;
            }
        }
        // Rounding in the cumulative sum: fall back to the last reachable state.
        row.iter().rposition(|&w| w > 0.0).unwrap_or(state)
    }
}

fn draw_from<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, &w) in probs.iter().enumerate() {
        acc += w;
        if u < acc {
            return j;
        }
    }
    probs.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// The symmetric two-state chain `T = [[p, 1−p], [1−p, p]]`.
///
/// State 0 is `A`, state 1 is `B`.
pub fn two_state_chain(
    p: f64,
    noise_a: NoiseDistribution,
    noise_b: NoiseDistribution,
) -> Result<MarkovNoiseChain, MarkovError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(MarkovError::Invalid(format!("p must lie in [0, 1], got {p}")));
    }
    if p == 0.0 || p == 1.0 {
        return Err(MarkovError::NotErgodic(format!("p = {p} gives a periodic or reducible chain")));
    }
    let t = DMatrix::from_row_slice(2, 2, &[p, 1.0 - p, 1.0 - p, p]);
    MarkovNoiseChain::new(t, vec![noise_a, noise_b])
}

/// Whether some power `T^k`, `k ≤ n²`, has every entry positive.
pub fn is_primitive(t: &DMatrix<f64>) -> bool {
    let n = t.nrows();
    let pattern: Vec<Vec<bool>> = (0..n).map(|i| (0..n).map(|j| t[(i, j)] > 0.0).collect()).collect();
    let mut power = pattern.clone();
    for _ in 1..=n * n {
        if power.iter().all(|row| row.iter().all(|&x| x)) {
            return true;
        }
        let mut next = vec![vec![false; n]; n];
        for i in 0..n {
            for k in 0..n {
                if power[i][k] {
                    for j in 0..n {
                        next[i][j] |= pattern[k][j];
                    }
                }
            }
        }
        power = next;
    }
    false
}

/// Left fixed point of `t` by power iteration from the uniform vector.
///
/// Iterates `π ← πT` until `‖πT − π‖₁ ≤ 1e-13`.
pub fn stationary_distribution(t: &DMatrix<f64>) -> Result<DVector<f64>, MarkovError> {
    let n = t.nrows();
    let mut pi = DVector::from_element(n, 1.0 / n as f64);
    let mut next = DVector::zeros(n);
    for _ in 0..STATIONARY_MAX_ITERS {
        next.gemv_tr(1.0, t, &pi, 0.0);
        let s = next.sum();
        next /= s;
        let delta: f64 = (&next - &pi).lp_norm(1);
        std::mem::swap(&mut pi, &mut next);
        if delta <= STATIONARY_TOL {
            return Ok(pi);
        }
    }
    Err(MarkovError::NoConvergence(STATIONARY_MAX_ITERS))
}

/// How `|P(ξ_t = m | ξ₀ = m₀) − π_m|` is compared against `ε`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviationMode {
    /// `|P − π_m| ≤ ε`.
    #[default]
    Absolute,
    /// `|P − π_m| ≤ ε·π_m`.
    Relative,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixingProfile {
    pub epsilon: f64,
    pub tau_mix: u64,
    /// Largest deviation at `tau_mix`, in the units of `mode`.
    pub max_deviation_at_tau: f64,
    pub mode: DeviationMode,
}

fn max_deviation(power: &DMatrix<f64>, pi: &DVector<f64>, mode: DeviationMode) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..power.nrows() {
        for j in 0..power.ncols() {
            let dev = (power[(i, j)] - pi[j]).abs();
            let dev = match mode {
                DeviationMode::Absolute => dev,
                DeviationMode::Relative => dev / pi[j],
            };
            worst = worst.max(dev);
        }
    }
    worst
}

/// Worst-case deviation of `T^t` from `π` over all `(m₀, m)`.
pub fn deviation_at(chain: &MarkovNoiseChain, t: u64, mode: DeviationMode) -> f64 {
    let mut power = DMatrix::identity(chain.n_states(), chain.n_states());
    for _ in 0..t {
        power = &power * chain.transition();
    }
    max_deviation(&power, chain.stationary(), mode)
}

pub fn mixing_time(chain: &MarkovNoiseChain, epsilon: f64) -> Result<MixingProfile, MarkovError> {
    mixing_time_with(chain, epsilon, DeviationMode::Absolute)
}

/// Smallest `t ≥ 1` with every entry of `T^t` within `ε` of `π`.
pub fn mixing_time_with(
    chain: &MarkovNoiseChain,
    epsilon: f64,
    mode: DeviationMode,
) -> Result<MixingProfile, MarkovError> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(MarkovError::Invalid(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    let t = chain.transition();
    let pi = chain.stationary();
    let mut power = t.clone();
    let mut step = 1u64;
    loop {
        let dev = max_deviation(&power, pi, mode);
        if dev <= epsilon + MIXING_TIE_TOL {
            return Ok(MixingProfile { epsilon, tau_mix: step, max_deviation_at_tau: dev, mode });
        }
        if step >= MIXING_MAX_STEPS {
            return Err(MarkovError::MixingCap(MIXING_MAX_STEPS));
        }
        power = &power * t;
        step += 1;
    }
}

/// Closed-form absolute mixing time of the symmetric two-state chain.
///
/// The deviation is `½|2p − 1|^t`, so `τ = ⌈ln(2ε) / ln|2p − 1|⌉`, clamped to
/// at least one. The result is nudged to honour the same tie slack as
/// [`mixing_time`].
pub fn two_state_mixing_time(p: f64, epsilon: f64) -> u64 {
    let r = (2.0 * p - 1.0).abs();
    let mixed = |t: u64| 0.5 * r.powi(t as i32) <= epsilon + MIXING_TIE_TOL;
    if r == 0.0 || mixed(1) {
        return 1;
    }
    let mut t = ((2.0 * epsilon).ln() / r.ln()).ceil().max(1.0) as u64;
    while t > 1 && mixed(t - 1) {
        t -= 1;
    }
    while !mixed(t) {
        t += 1;
    }
    t
}

/// A `p` whose two-state chain has absolute mixing time `tau` at `epsilon`.
///
/// Inverts the closed form at the geometric middle of the admissible
/// interval; `tau = 1` maps to the i.i.d. chain `p = 0.5`.
pub fn two_state_p_for_mixing_time(tau: u64, epsilon: f64) -> f64 {
    if tau <= 1 {
        return 0.5;
    }
    let r = (2.0 * epsilon).powf(1.0 / (tau as f64 - 0.5));
    0.5 * (1.0 + r)
}

/// Walks a chain with a private RNG.
#[derive(Debug, Clone)]
pub struct ChainWalker<'a> {
    chain: &'a MarkovNoiseChain,
    rng: ChaCha8Rng,
    state: Option<usize>,
}

impl<'a> ChainWalker<'a> {
    pub fn new(chain: &'a MarkovNoiseChain, seed: u64) -> Self {
        Self { chain, rng: ChaCha8Rng::seed_from_u64(seed), state: None }
    }

    /// The next state: `ξ₀` on the first call, then one transition per call.
    pub fn step(&mut self) -> usize {
        let next = match self.state {
            None => self.chain.draw_initial(&mut self.rng),
            Some(s) => self.chain.draw_next(s, &mut self.rng),
        };
        self.state = Some(next);
        next
    }

    /// An independent draw from `π`; leaves the walk position untouched.
    pub fn draw_stationary(&mut self) -> usize {
        self.chain.draw_stationary(&mut self.rng)
    }
}

/// `ξ₀, …, ξ_{length−1}` with `ξ₀` drawn per the chain's initial-state rule.
pub fn sample_trajectory(chain: &MarkovNoiseChain, length: usize, seed: u64) -> Vec<usize> {
    let mut walker = ChainWalker::new(chain, seed);
    (0..length).map(|_| walker.step()).collect()
}
