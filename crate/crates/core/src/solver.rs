//! The extragradient iteration under Markovian noise.
//!
//! Each iteration draws one noise sample `ξᵗ` and uses it twice:
//!
//! ```text
//! z^{t+½} = zᵗ − γ F(zᵗ, ξᵗ)
//! z^{t+1} = zᵗ − γ F(z^{t+½}, ξᵗ)
//! ```

use nalgebra::DVector;
use thiserror::Error;

use crate::markov::MarkovNoiseChain;
use crate::oracle::{OracleError, OracleMode, StepSample, StochasticOracle};
use crate::problem::{exact_solution, AffineVIOperator, ProblemError, Solution};

/// Runs whose `dim·(T+1)` exceeds this keep only distances and states.
pub const MAX_STORED_ENTRIES: usize = 10_000_000;
/// A squared distance above this multiple of `max(initial, 1)` is a blow-up.
pub const DIVERGENCE_FACTOR: f64 = 1e12;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

/// What a run keeps besides distances and states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TraceStorage {
    /// Full iterates when `dim·(T+1) ≤ 1e7`, or when lemma data is requested.
    #[default]
    Auto,
    Full,
    DistancesOnly,
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub gamma: f64,
    pub iterations: usize,
    pub z0: DVector<f64>,
    pub seed: u64,
    /// Also store `F(z*, ξᵗ)` per step, needed by the descent-lemma check.
    pub record_lemma_data: bool,
    pub storage: TraceStorage,
}

impl SolverConfig {
    pub fn new(gamma: f64, iterations: usize, z0: DVector<f64>, seed: u64) -> Self {
        Self { gamma, iterations, z0, seed, record_lemma_data: false, storage: TraceStorage::Auto }
    }

    pub fn with_lemma_data(mut self) -> Self {
        self.record_lemma_data = true;
        self
    }

    pub fn with_storage(mut self, storage: TraceStorage) -> Self {
        self.storage = storage;
        self
    }

    fn stores_iterates(&self) -> bool {
        match self.storage {
            TraceStorage::Full => true,
            TraceStorage::DistancesOnly => self.record_lemma_data,
            TraceStorage::Auto => {
                self.record_lemma_data
                    || self.z0.len().saturating_mul(self.iterations + 1) <= MAX_STORED_ENTRIES
            }
        }
    }
}

/// Everything recorded during one run.
///
/// `sq_distances[t] = ‖zᵗ − z*‖²` for `t = 0..=T`; `states[t]` and
/// `half_iterates[t]` belong to iteration `t = 0..T`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub gamma: f64,
    pub z_star: DVector<f64>,
    pub iterates: Option<Vec<DVector<f64>>>,
    pub half_iterates: Option<Vec<DVector<f64>>>,
    pub states: Vec<usize>,
    pub sq_distances: Vec<f64>,
    pub optimum_noise: Option<Vec<DVector<f64>>>,
}

impl RunTrace {
    /// Number of iterations `T`.
    pub fn iterations(&self) -> usize {
        self.states.len()
    }

    pub fn initial_sq_distance(&self) -> f64 {
        self.sq_distances[0]
    }

    pub fn final_sq_distance(&self) -> f64 {
        *self.sq_distances.last().expect("trace holds z0")
    }
}

/// One extragradient iteration with a single shared noise sample.
pub fn extragradient_step(
    z: &DVector<f64>,
    oracle: &StochasticOracle<'_>,
    sample: &StepSample,
    gamma: f64,
) -> Result<(DVector<f64>, DVector<f64>), OracleError> {
    let mut half = DVector::zeros(z.len());
    let mut next = DVector::zeros(z.len());
    let mut scratch = DVector::zeros(z.len());
    extragradient_step_into(z, oracle, sample, gamma, &mut half, &mut next, &mut scratch)?;
    Ok((half, next))
}

fn extragradient_step_into(
    z: &DVector<f64>,
    oracle: &StochasticOracle<'_>,
    sample: &StepSample,
    gamma: f64,
    half: &mut DVector<f64>,
    next: &mut DVector<f64>,
    scratch: &mut DVector<f64>,
) -> Result<(), OracleError> {
    oracle.evaluate_noisy_into(sample, z, scratch)?;
    half.copy_from(z);
    half.axpy(-gamma, scratch, 1.0);
    oracle.evaluate_noisy_into(sample, half, scratch)?;
    next.copy_from(z);
    next.axpy(-gamma, scratch, 1.0);
    Ok(())
}

/// Run `T` iterations from `config.z0` with a fresh oracle.
pub fn run(
    operator: &AffineVIOperator,
    chain: &MarkovNoiseChain,
    config: &SolverConfig,
    mode: OracleMode,
) -> Result<RunTrace, SolverError> {
    let solution = exact_solution(operator)?;
    run_with_solution(operator, &solution, chain, config, mode)
}

/// [`run`] with a precomputed solution, for sweeps sharing one instance.
pub fn run_with_solution(
    operator: &AffineVIOperator,
    solution: &Solution,
    chain: &MarkovNoiseChain,
    config: &SolverConfig,
    mode: OracleMode,
) -> Result<RunTrace, SolverError> {
    let dim = operator.dim();
    if !(config.gamma >= 0.0 && config.gamma.is_finite()) {
        return Err(SolverError::InvalidConfig(format!("gamma must be non-negative, got {}", config.gamma)));
    }
    if config.iterations == 0 {
        return Err(SolverError::InvalidConfig("T must be at least 1".into()));
    }
    if config.z0.len() != dim {
        return Err(SolverError::InvalidConfig(format!("z0 has length {}, expected {dim}", config.z0.len())));
    }
    let t_max = config.iterations;
    let z_star = &solution.z_star;
    let store = config.stores_iterates();

    let mut oracle = StochasticOracle::new(operator, chain, mode, config.seed);
    let mut sample = oracle.blank_sample();
    let mut z = config.z0.clone();
    let mut half = DVector::zeros(dim);
    let mut next = DVector::zeros(dim);
    let mut scratch = DVector::zeros(dim);

    let f_star = operator.evaluate(z_star)?;
    let initial = (&z - z_star).norm_squared();
    let limit = DIVERGENCE_FACTOR * initial.max(1.0);

    let mut sq_distances = Vec::with_capacity(t_max + 1);
    let mut states = Vec::with_capacity(t_max);
    let mut iterates = store.then(|| Vec::with_capacity(t_max + 1));
    let mut half_iterates = store.then(|| Vec::with_capacity(t_max));
    let mut optimum_noise = config.record_lemma_data.then(|| Vec::with_capacity(t_max));

    sq_distances.push(initial);
    if let Some(it) = iterates.as_mut() {
        it.push(z.clone());
    }
    for step in 0..t_max {
        oracle.advance_reuse(&mut sample);
        extragradient_step_into(&z, &oracle, &sample, config.gamma, &mut half, &mut next, &mut scratch)?;
        let dist = next.iter().zip(z_star.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        if !dist.is_finite() || half.iter().any(|x| !x.is_finite()) {
            return Err(SolverError::Diverged { step, reason: "non-finite iterate".into() });
        }
        if dist > limit {
            return Err(SolverError::Diverged {
                step,
                reason: format!("squared distance {dist:e} exceeds {limit:e}"),
            });
        }
        states.push(sample.state);
        sq_distances.push(dist);
        if let Some(h) = half_iterates.as_mut() {
            h.push(half.clone());
        }
        if let Some(it) = iterates.as_mut() {
            it.push(next.clone());
        }
        if let Some(on) = optimum_noise.as_mut() {
            on.push(&f_star + &sample.noise);
        }
        std::mem::swap(&mut z, &mut next);
    }

    Ok(RunTrace {
        gamma: config.gamma,
        z_star: z_star.clone(),
        iterates,
        half_iterates,
        states,
        sq_distances,
        optimum_noise,
    })
}

/// Which bound caps the step size alongside `1/(2L)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StepBound {
    /// `1/(4μτ)`, the condition the convergence proof actually uses.
    #[default]
    MixingAware,
    /// `1/(4μ)`, without the mixing-time factor.
    Statement,
}

/// Inputs of the tuned step-size rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSizeInputs {
    pub lipschitz: f64,
    pub mu: f64,
    pub tau: u64,
    pub horizon: usize,
    /// Initial-error radius `r_τ`, by default `‖z⁰ − z*‖²`.
    pub r_tau: f64,
    pub sigma_star: f64,
}

/// `min{1/(2L), 1/(4μτ) or 1/(4μ), 2·ln(max{2, μ²r_τT²/(112τ²σ*²)})/(μT)}`.
///
/// The log argument is capped at `f64::MAX`, so `σ* = 0` yields a finite
/// third term of `2·ln(f64::MAX)/(μT)`.
pub fn tune_step_size(inputs: &StepSizeInputs, bound: StepBound) -> f64 {
    let StepSizeInputs { lipschitz, mu, tau, horizon, r_tau, sigma_star } = *inputs;
    let tau = tau.max(1) as f64;
    let horizon = horizon.max(1) as f64;
    let first = 1.0 / (2.0 * lipschitz);
    let second = match bound {
        StepBound::MixingAware => 1.0 / (4.0 * mu * tau),
        StepBound::Statement => 1.0 / (4.0 * mu),
    };
    let ratio = if sigma_star == 0.0 {
        f64::MAX
    } else {
        (mu * mu * r_tau * horizon * horizon / (112.0 * tau * tau * sigma_star * sigma_star)).min(f64::MAX)
    };
    let ratio = if ratio.is_nan() { f64::MAX } else { ratio };
    let third = 2.0 * ratio.max(2.0).ln() / (mu * horizon);
    first.min(second).min(third)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov::{two_state_chain, NoiseDistribution};
    use crate::problem::{assemble_operator, build_saddle_instance, SaddleInstance};
    use nalgebra::DMatrix;

    fn quiet_chain(p: f64) -> MarkovNoiseChain {
        two_state_chain(p, NoiseDistribution::constant(0.0), NoiseDistribution::constant(0.0)).unwrap()
    }

    fn unit_operator() -> AffineVIOperator {
        let inst = SaddleInstance {
            d: 1,
            p: DMatrix::from_element(1, 1, 1.0),
            b: DVector::zeros(1),
            c: DVector::zeros(1),
            lambda: 1.0,
            nu: 1.0,
            seed: 0,
        };
        assemble_operator(&inst).unwrap()
    }

    #[test]
    fn hand_checked_step() {
        let op = unit_operator();
        let chain = quiet_chain(0.5);
        let mut oracle = StochasticOracle::new(&op, &chain, OracleMode::Markov, 0);
        let s = oracle.advance();
        let z = DVector::from_vec(vec![1.0, 0.0]);
        let (half, next) = extragradient_step(&z, &oracle, &s, 0.25).unwrap();
        assert_eq!(half, DVector::from_vec(vec![0.75, 0.25]));
        assert_eq!(next, DVector::from_vec(vec![0.75, 0.125]));
    }

    #[test]
    fn zero_step_and_fixed_point() {
        let inst = build_saddle_instance(4, 0.5, 0.5, 8).unwrap();
        let op = assemble_operator(&inst).unwrap();
        let sol = exact_solution(&op).unwrap();
        let chain = quiet_chain(0.7);
        let mut oracle = StochasticOracle::new(&op, &chain, OracleMode::Markov, 0);
        let s = oracle.advance();
        let z = DVector::from_fn(8, |i, _| i as f64 * 0.1);
        let (h, n) = extragradient_step(&z, &oracle, &s, 0.0).unwrap();
        assert_eq!((h, n), (z.clone(), z));
        let gamma = 1.0 / (2.0 * op.lipschitz());
        let (h, n) = extragradient_step(&sol.z_star, &oracle, &s, gamma).unwrap();
        assert!((h - &sol.z_star).norm() <= 2.0 * gamma * sol.residual + 1e-15);
        assert!((n - &sol.z_star).norm() <= 2.0 * gamma * sol.residual + 1e-15);
    }

    #[test]
    fn stale_sample_propagates() {
        let op = unit_operator();
        let chain = quiet_chain(0.5);
        let mut oracle = StochasticOracle::new(&op, &chain, OracleMode::Markov, 0);
        let s = oracle.advance();
        oracle.advance();
        assert!(extragradient_step(&DVector::zeros(2), &oracle, &s, 0.1).is_err());
    }

    #[test]
    fn trace_shapes_and_storage() {
        let inst = build_saddle_instance(3, 0.5, 0.5, 8).unwrap();
        let op = assemble_operator(&inst).unwrap();
        let chain = quiet_chain(0.7);
        let cfg = SolverConfig::new(0.05, 25, DVector::zeros(6), 1);
        let tr = run(&op, &chain, &cfg, OracleMode::Markov).unwrap();
        assert_eq!(tr.iterations(), 25);
        assert_eq!(tr.sq_distances.len(), 26);
        assert_eq!(tr.iterates.as_ref().unwrap().len(), 26);
        assert_eq!(tr.half_iterates.as_ref().unwrap().len(), 25);
        assert!(tr.optimum_noise.is_none());
        for (it, d) in tr.iterates.as_ref().unwrap().iter().zip(&tr.sq_distances) {
            assert!(((it - &tr.z_star).norm_squared() - d).abs() <= 1e-12 * d.max(1.0));
        }
        let lean = run(&op, &chain, &cfg.clone().with_storage(TraceStorage::DistancesOnly), OracleMode::Markov)
            .unwrap();
        assert!(lean.iterates.is_none());
        assert_eq!(lean.sq_distances, tr.sq_distances);
        let lemma = run(&op, &chain, &cfg.clone().with_lemma_data(), OracleMode::Markov).unwrap();
        assert_eq!(lemma.optimum_noise.unwrap().len(), 25);
    }

    #[test]
    fn invalid_configs() {
        let op = unit_operator();
        let chain = quiet_chain(0.5);
        let bad_len = SolverConfig::new(0.1, 5, DVector::zeros(3), 0);
        assert!(matches!(run(&op, &chain, &bad_len, OracleMode::Markov), Err(SolverError::InvalidConfig(_))));
        let no_steps = SolverConfig::new(0.1, 0, DVector::zeros(2), 0);
        assert!(run(&op, &chain, &no_steps, OracleMode::Markov).is_err());
        let neg = SolverConfig::new(-0.1, 5, DVector::zeros(2), 0);
        assert!(run(&op, &chain, &neg, OracleMode::Markov).is_err());
    }

    #[test]
    fn huge_step_diverges() {
        let inst = build_saddle_instance(5, 0.1, 0.1, 4).unwrap();
        let op = assemble_operator(&inst).unwrap();
        let chain = quiet_chain(0.5);
        let cfg = SolverConfig::new(100.0 / op.mu(), 1000, DVector::zeros(10), 0);
        match run(&op, &chain, &cfg, OracleMode::Markov) {
            Err(SolverError::Diverged { step, .. }) => assert!(step < 1000),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn seeded_runs_repeat() {
        let inst = build_saddle_instance(4, 0.3, 0.3, 2).unwrap();
        let op = assemble_operator(&inst).unwrap();
        let a = NoiseDistribution::gaussian(0.1, 0.1).unwrap();
        let b = NoiseDistribution::gaussian(-0.1, 0.1).unwrap();
        let chain = two_state_chain(0.9, a, b).unwrap();
        let cfg = SolverConfig::new(1.0 / (2.0 * op.lipschitz()), 500, DVector::zeros(8), 77);
        let t1 = run(&op, &chain, &cfg, OracleMode::Markov).unwrap();
        let t2 = run(&op, &chain, &cfg, OracleMode::Markov).unwrap();
        assert_eq!(t1, t2);
        let other = SolverConfig { seed: 78, ..cfg };
        assert_ne!(t1, run(&op, &chain, &other, OracleMode::Markov).unwrap());
    }

    #[test]
    fn step_size_rule() {
        let big = StepSizeInputs { lipschitz: 10.0, mu: 1.0, tau: 1, horizon: 100, r_tau: 1.0, sigma_star: 1.0 };
        assert_eq!(tune_step_size(&big, StepBound::Statement), 0.05);

        let noiseless = StepSizeInputs { lipschitz: 1.0, mu: 1.0, tau: 1, horizon: 1_000_000, r_tau: 1.0, sigma_star: 0.0 };
        let g = tune_step_size(&noiseless, StepBound::Statement);
        assert!(g.is_finite() && g > 0.0);
        assert_eq!(g, 2.0 * f64::MAX.ln() / 1e6);

        // Reference value from an independent re-evaluation of the rule.
        let mid = StepSizeInputs { lipschitz: 2.0, mu: 1.0, tau: 5, horizon: 10_000, r_tau: 1.0, sigma_star: 0.5 };
        assert!((tune_step_size(&mid, StepBound::MixingAware) - 0.002373920081781792).abs() < 1e-15);
        assert!((tune_step_size(&mid, StepBound::Statement) - 0.002373920081781792).abs() < 1e-15);

        let short = StepSizeInputs { horizon: 10, ..mid };
        assert_eq!(tune_step_size(&short, StepBound::MixingAware), 1.0 / 20.0);
        assert_eq!(tune_step_size(&short, StepBound::Statement), 2.0 * 2f64.ln() / 10.0);
    }
}
