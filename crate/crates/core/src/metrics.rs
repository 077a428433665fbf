//! Trace analytics.
//!
//! Besides plateau and variance read-outs, this module re-evaluates two
//! per-iteration inequalities that every extragradient run must satisfy:
//!
//! - the descent inequality
//!   `‖z^{t+1}−z*‖² ≤ ‖zᵗ−z*‖² − 2γμ‖z^{t+½}−z*‖² − 2γ⟨F(z*,ξᵗ), z^{t+½}−z*⟩
//!    + γ²L²‖zᵗ−z^{t+½}‖² − ‖zᵗ−z^{t+½}‖²`;
//! - the step-back bound
//!   `‖z^{t+½} − z^{t+½−τ}‖ ≤ Σ_{k=0}^{τ} (1+γL)‖z^{t+½−k} − z^{t−k}‖` for `t ≥ τ`.

use std::fmt;

use thiserror::Error;

use crate::solver::RunTrace;

/// Relative tolerance of both inequality checks.
pub const LEMMA_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("window {window} is invalid for a trace of {iterations} iterations (need 1 <= window <= T/2)")]
    WindowTooLarge { window: usize, iterations: usize },
    #[error("trace does not store iterates")]
    MissingIterates,
    #[error("trace does not store F(z*, xi) per step")]
    MissingLemmaData,
    #[error("no traces given")]
    NoTraces,
    #[error("traces have unequal lengths")]
    LengthMismatch,
    #[error("burn-in {burn_in} leaves no samples in a trace of {iterations} iterations")]
    BurnInTooLong { burn_in: usize, iterations: usize },
    #[error("trace of {iterations} iterations is too short for tau = {tau}")]
    TraceTooShort { iterations: usize, tau: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateauEstimate {
    pub window: usize,
    pub value: f64,
    pub stderr: f64,
}

/// Mean and standard error of the last `window` squared distances.
pub fn plateau(trace: &RunTrace, window: usize) -> Result<PlateauEstimate, MetricsError> {
    let iterations = trace.iterations();
    if window == 0 || window > iterations / 2 {
        return Err(MetricsError::WindowTooLarge { window, iterations });
    }
    let tail = &trace.sq_distances[trace.sq_distances.len() - window..];
    let (value, stderr) = mean_and_stderr(tail);
    Ok(PlateauEstimate { window, value, stderr })
}

/// Sample mean and `s/√n`; the stderr of a single value is zero.
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceStatistic {
    pub k: usize,
    pub per_run_variance: Vec<f64>,
    pub mean_variance: f64,
    /// Standard error of `mean_variance` across runs.
    pub stderr: f64,
    /// Ratio to a baseline cell, filled in by the harness.
    pub normalized: Option<f64>,
}

impl VarianceStatistic {
    pub fn from_per_run(per_run_variance: Vec<f64>) -> Result<Self, MetricsError> {
        if per_run_variance.is_empty() {
            return Err(MetricsError::NoTraces);
        }
        let (mean_variance, stderr) = mean_and_stderr(&per_run_variance);
        Ok(Self { k: per_run_variance.len(), per_run_variance, mean_variance, stderr, normalized: None })
    }
}

/// `(1/n) Σ_t ‖zᵗ − z̄‖²` over `t = burn_in+1 ..= T`, with `z̄` the mean of
/// the same iterates.
pub fn run_variance(trace: &RunTrace, burn_in: usize) -> Result<f64, MetricsError> {
    let iterates = trace.iterates.as_ref().ok_or(MetricsError::MissingIterates)?;
    let iterations = trace.iterations();
    if burn_in >= iterations {
        return Err(MetricsError::BurnInTooLong { burn_in, iterations });
    }
    let window = &iterates[burn_in + 1..];
    let n = window.len() as f64;
    let mut mean = nalgebra::DVector::<f64>::zeros(trace.z_star.len());
    for z in window {
        mean += z;
    }
    mean /= n;
    let total: f64 = window.iter().map(|z| (z - &mean).norm_squared()).sum();
    Ok(total / n)
}

/// Per-run variances and their mean over `K` equally long traces.
pub fn sample_variance(traces: &[RunTrace], burn_in: usize) -> Result<VarianceStatistic, MetricsError> {
    let first = traces.first().ok_or(MetricsError::NoTraces)?;
    if traces.iter().any(|t| t.iterations() != first.iterations()) {
        return Err(MetricsError::LengthMismatch);
    }
    let per_run = traces.iter().map(|t| run_variance(t, burn_in)).collect::<Result<Vec<_>, _>>()?;
    VarianceStatistic::from_per_run(per_run)
}

/// One step where an inequality failed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Violation {
    pub step: usize,
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs − lhs`; negative for a violation.
    pub slack: f64,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step={} lhs={:e} rhs={:e} slack={:e}", self.step, self.lhs, self.rhs, self.slack)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ViolationReport {
    pub checked: usize,
    pub violations: Vec<Violation>,
    /// Smallest `rhs − lhs` seen over all checked steps.
    pub min_slack: f64,
}

impl ViolationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ViolationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

fn dist2(a: &nalgebra::DVector<f64>, b: &nalgebra::DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Check the descent inequality at every iteration of `trace`.
///
/// A step violates it when `lhs > rhs + 1e-9·max(1, ‖zᵗ − z*‖²)`.
pub fn check_lemma1(trace: &RunTrace, lipschitz: f64, mu: f64) -> Result<ViolationReport, MetricsError> {
    let iterates = trace.iterates.as_ref().ok_or(MetricsError::MissingIterates)?;
    let halves = trace.half_iterates.as_ref().ok_or(MetricsError::MissingIterates)?;
    let f_star = trace.optimum_noise.as_ref().ok_or(MetricsError::MissingLemmaData)?;
    let gamma = trace.gamma;
    let z_star = &trace.z_star;
    let mut report = ViolationReport { min_slack: f64::INFINITY, ..Default::default() };
    for t in 0..trace.iterations() {
        let z = &iterates[t];
        let half = &halves[t];
        let lhs = dist2(&iterates[t + 1], z_star);
        let d_t = dist2(z, z_star);
        let d_half = dist2(half, z_star);
        let step = dist2(z, half);
        let cross: f64 = f_star[t].iter().zip(half.iter().zip(z_star.iter())).map(|(f, (h, s))| f * (h - s)).sum();
        let rhs = d_t - 2.0 * gamma * mu * d_half - 2.0 * gamma * cross
            + gamma * gamma * lipschitz * lipschitz * step
            - step;
        record(&mut report, t, lhs, rhs, d_t.max(1.0));
    }
    Ok(report)
}

/// Check the step-back bound for every `t ∈ [τ, T)`.
///
/// A step violates it when `lhs > rhs + 1e-9·max(1, rhs)`.
pub fn check_lemma2(
    trace: &RunTrace,
    lipschitz: f64,
    gamma: f64,
    tau: usize,
) -> Result<ViolationReport, MetricsError> {
    let iterates = trace.iterates.as_ref().ok_or(MetricsError::MissingIterates)?;
    let halves = trace.half_iterates.as_ref().ok_or(MetricsError::MissingIterates)?;
    let iterations = trace.iterations();
    if tau >= iterations {
        return Err(MetricsError::TraceTooShort { iterations, tau });
    }
    let weight = 1.0 + gamma * lipschitz;
    let gaps: Vec<f64> = (0..iterations).map(|s| dist2(&halves[s], &iterates[s]).sqrt()).collect();
    let mut report = ViolationReport { min_slack: f64::INFINITY, ..Default::default() };
    let mut window: f64 = gaps[..=tau].iter().sum();
    for t in tau..iterations {
        if t > tau {
            window += gaps[t] - gaps[t - tau - 1];
        }
        let lhs = dist2(&halves[t], &halves[t - tau]).sqrt();
        // Re-sum occasionally so the running window cannot drift.
        if t % 1024 == 0 {
            window = gaps[t - tau..=t].iter().sum();
        }
        let rhs = weight * window;
        record(&mut report, t, lhs, rhs, rhs.max(1.0));
    }
    Ok(report)
}

fn record(report: &mut ViolationReport, step: usize, lhs: f64, rhs: f64, scale: f64) {
    report.checked += 1;
    let slack = rhs - lhs;
    report.min_slack = report.min_slack.min(slack / scale);
    if lhs > rhs + LEMMA_TOL * scale {
        report.violations.push(Violation { step, lhs, rhs, slack });
    }
}
