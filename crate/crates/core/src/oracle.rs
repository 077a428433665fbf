//! The stochastic oracle `F(z, ξ) = F(z) + ξ`.
//!
//! Each call to [`StochasticOracle::advance`] moves the noise process one
//! step and draws one noise vector. Every evaluation for that step must use
//! the returned [`StepSample`]; samples from earlier steps or from another
//! oracle are rejected.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::markov::{ChainWalker, MarkovNoiseChain};
use crate::problem::AffineVIOperator;
use crate::seed::{derive_seed, purpose};

/// Draws used to estimate `σ*` for unbounded noise.
pub const SIGMA_STAR_DRAWS: usize = 100_000;
/// Default quantile for the `σ*` estimate under Gaussian noise.
pub const SIGMA_STAR_QUANTILE: f64 = 0.999;

static NEXT_ORACLE_ID: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("stale sample: step {sample} used at oracle step {current}")]
    StaleSample { sample: u64, current: u64 },
    #[error("sample belongs to a different oracle")]
    ForeignSample,
    #[error("no step drawn yet; call advance() first")]
    NotAdvanced,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid quantile {0}; must lie in (0, 1]")]
    InvalidQuantile(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    /// Consecutive states follow the transition matrix.
    #[default]
    Markov,
    /// Each step's state is an independent draw from `π`.
    Iid,
}

/// The noise realised for one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSample {
    pub step_index: u64,
    pub state: usize,
    pub noise: DVector<f64>,
    oracle_id: u64,
}

#[derive(Debug, Clone)]
pub struct StochasticOracle<'a> {
    operator: &'a AffineVIOperator,
    chain: &'a MarkovNoiseChain,
    mode: OracleMode,
    walker: ChainWalker<'a>,
    noise_rng: ChaCha8Rng,
    current_state: Option<usize>,
    step_count: u64,
    id: u64,
    seed: u64,
}

impl<'a> StochasticOracle<'a> {
    /// Chain transitions and noise draws use separate streams derived from
    /// `seed`, so a Markov run and an i.i.d. run with equal seeds share their
    /// noise stream.
    pub fn new(
        operator: &'a AffineVIOperator,
        chain: &'a MarkovNoiseChain,
        mode: OracleMode,
        seed: u64,
    ) -> Self {
        Self {
            operator,
            chain,
            mode,
            walker: ChainWalker::new(chain, derive_seed(seed, &[purpose::CHAIN])),
            noise_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, &[purpose::NOISE])),
            current_state: None,
            step_count: 0,
            id: NEXT_ORACLE_ID.fetch_add(1, Ordering::Relaxed),
            seed,
        }
    }

    pub fn operator(&self) -> &'a AffineVIOperator {
        self.operator
    }

    pub fn chain(&self) -> &'a MarkovNoiseChain {
        self.chain
    }

    pub fn mode(&self) -> OracleMode {
        self.mode
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn current_state(&self) -> Option<usize> {
        self.current_state
    }

    pub fn dim(&self) -> usize {
        self.operator.dim()
    }

    /// Move to the next step and draw its noise vector.
    pub fn advance(&mut self) -> StepSample {
        let mut noise = DVector::zeros(self.dim());
        let state = self.advance_into(&mut noise);
        StepSample { step_index: self.step_count - 1, state, noise, oracle_id: self.id }
    }

    /// As [`advance`](Self::advance) but writes into a reused sample.
    pub fn advance_reuse(&mut self, sample: &mut StepSample) {
        if sample.noise.len() != self.dim() {
            sample.noise = DVector::zeros(self.dim());
        }
        sample.state = self.advance_into(&mut sample.noise);
        sample.step_index = self.step_count - 1;
        sample.oracle_id = self.id;
    }

    /// An empty sample owned by this oracle, to be filled by `advance_reuse`.
    pub fn blank_sample(&self) -> StepSample {
        StepSample { step_index: u64::MAX, state: 0, noise: DVector::zeros(self.dim()), oracle_id: self.id }
    }

    fn advance_into(&mut self, noise: &mut DVector<f64>) -> usize {
        let state = match self.mode {
            OracleMode::Markov => self.walker.step(),
            OracleMode::Iid => self.walker.draw_stationary(),
        };
        self.chain.state_noise()[state].fill(noise.as_mut_slice(), &mut self.noise_rng);
        self.current_state = Some(state);
        self.step_count += 1;
        state
    }

    fn check(&self, sample: &StepSample) -> Result<(), OracleError> {
        if sample.oracle_id != self.id {
            return Err(OracleError::ForeignSample);
        }
        if self.step_count == 0 {
            return Err(OracleError::NotAdvanced);
        }
        if sample.step_index != self.step_count - 1 {
            return Err(OracleError::StaleSample { sample: sample.step_index, current: self.step_count - 1 });
        }
        Ok(())
    }

    /// `F(z) + ξ` for the current step.
    pub fn evaluate_noisy(&self, sample: &StepSample, z: &DVector<f64>) -> Result<DVector<f64>, OracleError> {
        let mut out = DVector::zeros(self.dim());
        self.evaluate_noisy_into(sample, z, &mut out)?;
        Ok(out)
    }

    pub fn evaluate_noisy_into(
        &self,
        sample: &StepSample,
        z: &DVector<f64>,
        out: &mut DVector<f64>,
    ) -> Result<(), OracleError> {
        self.check(sample)?;
        if z.len() != self.dim() {
            return Err(OracleError::DimensionMismatch { expected: self.dim(), got: z.len() });
        }
        if out.len() != self.dim() {
            return Err(OracleError::DimensionMismatch { expected: self.dim(), got: out.len() });
        }
        self.operator.evaluate_into(z, out);
        *out += &sample.noise;
        Ok(())
    }

    /// π-weighted mean of the per-coordinate noise; zero iff the oracle is
    /// unbiased.
    pub fn stationary_mean_noise(&self) -> f64 {
        self.chain.stationary_mean_noise()
    }

    /// Bound on `‖F(z*, ξ)‖` over all noise realisations.
    ///
    /// Exact when every state has bounded noise: coordinate-wise the worst
    /// case is an endpoint of `[mean − b, mean + b]`. Otherwise the
    /// `quantile` of `‖F(z*, ξ)‖` over [`SIGMA_STAR_DRAWS`] stationary draws,
    /// flagged as an estimate. Does not disturb the oracle's own streams.
    pub fn sigma_star(&self, z_star: &DVector<f64>, quantile: f64) -> Result<SigmaStar, OracleError> {
        if !(quantile > 0.0 && quantile <= 1.0) {
            return Err(OracleError::InvalidQuantile(quantile));
        }
        if z_star.len() != self.dim() {
            return Err(OracleError::DimensionMismatch { expected: self.dim(), got: z_star.len() });
        }
        let f_star = self.operator.evaluate(z_star).expect("dimension checked");
        let laws = self.chain.state_noise();
        let bounded: Option<Vec<(f64, f64)>> =
            laws.iter().map(|n| n.support_half_width().map(|w| (n.mean(), w))).collect();
        if let Some(bounds) = bounded {
            let value = bounds
                .iter()
                .zip(self.chain.stationary().iter())
                .filter(|(_, &p)| p > 0.0)
                .map(|(&(mean, w), _)| {
                    f_star
                        .iter()
                        .map(|&r| {
                            let lo = (r + mean - w).abs();
                            let hi = (r + mean + w).abs();
                            let m = lo.max(hi);
                            m * m
                        })
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(0.0, f64::max);
            return Ok(SigmaStar { value, estimate: false });
        }

        let mut walker = ChainWalker::new(self.chain, derive_seed(self.seed, &[purpose::SIGMA_STAR, 0]));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[purpose::SIGMA_STAR, 1]));
        let mut noise = vec![0.0; self.dim()];
        let mut norms: Vec<f64> = (0..SIGMA_STAR_DRAWS)
            .map(|_| {
                let state = walker.draw_stationary();
                laws[state].fill(&mut noise, &mut rng);
                f_star.iter().zip(&noise).map(|(r, x)| (r + x) * (r + x)).sum::<f64>().sqrt()
            })
            .collect();
        norms.sort_by(f64::total_cmp);
        let idx = ((quantile * SIGMA_STAR_DRAWS as f64).ceil() as usize).clamp(1, SIGMA_STAR_DRAWS) - 1;
        Ok(SigmaStar { value: norms[idx], estimate: true })
    }
}

/// Noise level at the optimum; `estimate` marks an empirical quantile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaStar {
    pub value: f64,
    pub estimate: bool,
}
