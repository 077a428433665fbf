//! Command-line surface of the `markov-vi` binary.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 invalid parameters, 3 divergence
//! (or every sweep cell failed), 4 a `verify` property failed.
//! `MARKOV_VI_THREADS` caps the worker pool.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::harness::{
    cell_gamma, run_seed, write_atomic, ExperimentConfig, GammaRule, HarnessError, Problem, TrajectoryRow,
    TrajectoryTable, CONFIG_KEYS,
};
use crate::markov::{
    mixing_time, mixing_time_with, stationary_distribution, two_state_chain, two_state_mixing_time, DeviationMode,
    MarkovError, NoiseDistribution,
};
use crate::metrics::{self, check_lemma1, check_lemma2};
use crate::oracle::OracleMode;
use crate::problem::{assemble_map, build_saddle_instance, AffineVIOperator, ProblemError, SaddleInstance, SecondBlockSign};
use crate::solver::{run_with_solution, SolverConfig, SolverError};

pub const EXIT_OK: u8 = 0;
pub const EXIT_IO: u8 = 1;
pub const EXIT_PARAMS: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;
pub const EXIT_VERIFY: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "markov-vi", version, about = "Extragradient under Markovian noise")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a saddle instance and write it as TOML.
    Generate {
        #[arg(long)]
        d: usize,
        #[arg(long, default_value_t = 0.1)]
        lambda: f64,
        #[arg(long, default_value_t = 0.1)]
        nu: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run extragradient on one instance and write its trajectory.
    Solve {
        #[arg(long)]
        instance: PathBuf,
        /// Experiment config supplying noise and step defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config key, e.g. `--set T=5000`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        p: Option<f64>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        iterations: Option<usize>,
        /// `half_inv_L`, `corollary1` or a number.
        #[arg(long)]
        gamma: Option<GammaRule>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iid: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a `(p, σ)` sweep and write `report.csv` and `report.json`.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Mixing time of the symmetric two-state chain.
    MixingTime {
        #[arg(long)]
        p: f64,
        #[arg(long, default_value_t = 0.05)]
        epsilon: f64,
        /// Compare deviations relative to the stationary mass.
        #[arg(long)]
        relative: bool,
    },
    /// Check structural properties on generated instances.
    Verify {
        #[arg(long)]
        quick: bool,
        /// Build the operator with the flipped second block.
        #[arg(long)]
        paper_sign: bool,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn params(message: impl Into<String>) -> Self {
        Self { code: EXIT_PARAMS, message: message.into() }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        let code = match &e {
            HarnessError::Io { .. } | HarnessError::Problem(ProblemError::Io(_)) => EXIT_IO,
            HarnessError::Solver(SolverError::Diverged { .. }) => EXIT_DIVERGED,
            _ => EXIT_PARAMS,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<ProblemError> for Failure {
    fn from(e: ProblemError) -> Self {
        HarnessError::from(e).into()
    }
}

impl From<MarkovError> for Failure {
    fn from(e: MarkovError) -> Self {
        HarnessError::from(e).into()
    }
}

impl From<SolverError> for Failure {
    fn from(e: SolverError) -> Self {
        HarnessError::from(e).into()
    }
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn main_with_args<I: IntoIterator<Item = OsString>>(args: I) -> u8 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_PARAMS } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match thread_cap() {
        Ok(Some(n)) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(cli.command)),
            Err(e) => Err(Failure::params(e.to_string())),
        },
        Ok(None) => dispatch(cli.command),
        Err(f) => Err(f),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn thread_cap() -> Result<Option<usize>, Failure> {
    match std::env::var("MARKOV_VI_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Failure::params(format!("MARKOV_VI_THREADS must be a positive integer, got '{v}'"))),
        },
        Err(_) => Ok(None),
    }
}

fn dispatch(command: Command) -> Result<u8, Failure> {
    match command {
        Command::Generate { d, lambda, nu, seed, out } => generate(d, lambda, nu, seed, &out),
        Command::Solve { instance, config, overrides, p, sigma, epsilon, iterations, gamma, seed, iid, out } => {
            let mut cfg = load_config(config.as_deref(), &overrides)?;
            if let Some(e) = epsilon {
                cfg.epsilon_mix = e;
            }
            if let Some(t) = iterations {
                cfg.t = t;
            }
            if let Some(g) = gamma {
                cfg.gamma_rule = g;
            }
            if let Some(s) = seed {
                cfg.master_seed = s;
            }
            if iid {
                cfg.mode = OracleMode::Iid;
            }
            let p = p.unwrap_or(cfg.p_grid[0]);
            let sigma = sigma.unwrap_or(*cfg.sigma_grid.last().expect("validated grid"));
            solve(&instance, &cfg, p, sigma, &out)
        }
        Command::Sweep { config, out_dir, overrides } => {
            let cfg = load_config(config.as_deref(), &overrides)?;
            let report = crate::harness::run_sweep(&cfg)?;
            report.write_to(&out_dir)?;
            print!("{}", report.to_csv());
            let failed = report.cells.iter().filter(|c| c.is_failed()).count();
            if failed > 0 {
                eprintln!("{failed} of {} cells failed", report.cells.len());
            }
            Ok(if report.all_failed() { EXIT_DIVERGED } else { EXIT_OK })
        }
        Command::MixingTime { p, epsilon, relative } => {
            if !(epsilon > 0.0 && epsilon < 1.0) {
                return Err(Failure::params("epsilon must lie in (0, 1)"));
            }
            let chain = two_state_chain(p, NoiseDistribution::constant(0.0), NoiseDistribution::constant(0.0))?;
            let mode = if relative { DeviationMode::Relative } else { DeviationMode::Absolute };
            let profile = mixing_time_with(&chain, epsilon, mode)?;
            println!("tau_mix = {}", profile.tau_mix);
            println!("max_deviation = {:e}", profile.max_deviation_at_tau);
            if !relative {
                println!("closed_form = {}", two_state_mixing_time(p, epsilon));
            }
            Ok(EXIT_OK)
        }
        Command::Verify { quick, paper_sign, seed } => verify(quick, paper_sign, seed),
    }
}

/// Config file (or defaults) with `KEY=VALUE` overrides applied.
fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig, Failure> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| Failure { code: EXIT_IO, message: format!("cannot read {}: {e}", p.display()) })?,
        None => ExperimentConfig::default().to_toml(),
    };
    let mut table: toml::Table = toml::from_str(&text).map_err(|e| Failure::params(e.to_string()))?;
    for item in overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Failure::params(format!("override '{item}' is not KEY=VALUE")))?;
        let key = key.trim();
        if !CONFIG_KEYS.contains(&key) {
            return Err(Failure::params(format!("unknown config key '{key}'")));
        }
        table.insert(key.to_string(), parse_value(value.trim()));
    }
    let text = toml::to_string(&table).map_err(|e| Failure::params(e.to_string()))?;
    Ok(ExperimentConfig::from_toml(&text)?)
}

/// A TOML value, or the raw text as a string when it does not parse.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn generate(d: usize, lambda: f64, nu: f64, seed: u64, out: &Path) -> Result<u8, Failure> {
    let instance = build_saddle_instance(d, lambda, nu, seed)?;
    let problem = Problem::generate(d, lambda, nu, seed)?;
    write_atomic(out, instance.to_toml().as_bytes())?;
    println!("L = {:e}", problem.operator.lipschitz());
    println!("mu = {:e}", problem.operator.mu());
    println!("norm_z_star = {:e}", problem.solution.z_star.norm());
    Ok(EXIT_OK)
}

fn solve(instance: &Path, cfg: &ExperimentConfig, p: f64, sigma: f64, out: &Path) -> Result<u8, Failure> {
    cfg.validate()?;
    let inst = SaddleInstance::read(instance)?;
    let operator = crate::problem::assemble_operator(&inst)?;
    let solution = crate::problem::exact_solution(&operator)?;
    let problem = Problem { operator, solution };
    let chain = cfg.chain(p, sigma)?;
    let tau = mixing_time(&chain, cfg.epsilon_mix)?.tau_mix;
    let z0 = DVector::zeros(problem.operator.dim());
    let gamma = cell_gamma(cfg, &problem, &chain, tau, &z0, p, sigma)?;
    let run_cfg = SolverConfig::new(gamma, cfg.t, z0, run_seed(cfg.master_seed, p, sigma, 0))
        .with_storage(crate::solver::TraceStorage::DistancesOnly);
    let trace = run_with_solution(&problem.operator, &problem.solution, &chain, &run_cfg, cfg.mode)?;
    let table = TrajectoryTable {
        p,
        sigma,
        rows: (0..trace.iterations())
            .step_by(cfg.trajectory_stride())
            .map(|t| TrajectoryRow { run: 0, t, sq_distance: trace.sq_distances[t], state: trace.states[t] })
            .collect(),
        failed_runs: Vec::new(),
    };
    write_atomic(out, table.to_csv().as_bytes())?;
    let window = cfg.plateau_window();
    let plateau = metrics::plateau(&trace, window).map_err(|e| Failure::params(e.to_string()))?;
    println!("gamma = {gamma:e}");
    println!("tau_mix = {tau}");
    println!("final_sq_distance = {:e}", trace.final_sq_distance());
    println!("plateau = {:e} (stderr {:e}, window {window})", plateau.value, plateau.stderr);
    Ok(EXIT_OK)
}

struct Checks {
    lines: String,
    failed: usize,
}

impl Checks {
    fn record(&mut self, name: &str, ok: bool, detail: String) {
        let _ = writeln!(self.lines, "{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failed += 1;
        }
    }
}

fn verify(quick: bool, paper_sign: bool, seed: u64) -> Result<u8, Failure> {
    let (instances, pairs, t_run) = if quick { (2, 100, 200) } else { (5, 1000, 2000) };
    let sign = if paper_sign { SecondBlockSign::Flipped } else { SecondBlockSign::NegativeGradient };
    let mut checks = Checks { lines: String::new(), failed: 0 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for i in 0..instances {
        let d = 2 + i;
        let instance = build_saddle_instance(d, 0.5, 0.3, crate::seed::derive_seed(seed, &[i as u64]))?;
        let op = match AffineVIOperator::certify(assemble_map(&instance, sign)) {
            Ok(op) => op,
            Err(e) => {
                checks.record(&format!("instance {i} (d={d}) certifies"), false, e.to_string());
                continue;
            }
        };
        let (l, mu) = (op.lipschitz(), op.mu());
        let (mut worst_lip, mut worst_mono) = (f64::NEG_INFINITY, f64::INFINITY);
        for _ in 0..pairs {
            let z1 = DVector::from_fn(op.dim(), |_, _| rng.random_range(-10.0..10.0));
            let z2 = DVector::from_fn(op.dim(), |_, _| rng.random_range(-10.0..10.0));
            let diff = &z1 - &z2;
            let n2 = diff.norm_squared();
            let df = op.evaluate(&z1)? - op.evaluate(&z2)?;
            worst_lip = worst_lip.max(df.norm() / diff.norm() - l);
            worst_mono = worst_mono.min(df.dot(&diff) / n2 - mu);
        }
        checks.record(
            &format!("instance {i} (d={d}) Lipschitz"),
            worst_lip <= 1e-9 * l,
            format!("L = {l:.6e}, worst excess {worst_lip:.3e}"),
        );
        checks.record(
            &format!("instance {i} (d={d}) strong monotonicity"),
            worst_mono >= -1e-9 * l,
            format!("mu = {mu:.6e}, worst slack {worst_mono:.3e}"),
        );

        let solution = crate::problem::exact_solution(&op)?;
        let chain = two_state_chain(0.8, NoiseDistribution::gaussian(0.1, 0.05)?, NoiseDistribution::gaussian(-0.1, 0.05)?)?;
        let tau = mixing_time(&chain, 0.05)?.tau_mix;
        let gamma = 1.0 / (2.0 * l);
        let cfg = SolverConfig::new(gamma, t_run, DVector::zeros(op.dim()), seed + i as u64).with_lemma_data();
        let trace = run_with_solution(&op, &solution, &chain, &cfg, OracleMode::Markov)?;
        let r1 = check_lemma1(&trace, l, mu).map_err(|e| Failure::params(e.to_string()))?;
        let r2 = check_lemma2(&trace, l, gamma, tau as usize).map_err(|e| Failure::params(e.to_string()))?;
        checks.record(&format!("instance {i} one-step descent"), r1.is_clean(), format!("{} steps, {} violations", r1.checked, r1.violations.len()));
        checks.record(&format!("instance {i} step-back bound"), r2.is_clean(), format!("{} steps, {} violations", r2.checked, r2.violations.len()));
    }

    for &p in &[0.55, 0.7, 0.9, 0.95] {
        for &eps in &[0.1, 0.05, 0.01] {
            let chain = two_state_chain(p, NoiseDistribution::constant(0.0), NoiseDistribution::constant(0.0))?;
            let powered = mixing_time(&chain, eps)?.tau_mix;
            let closed = two_state_mixing_time(p, eps);
            checks.record(&format!("mixing p={p} eps={eps}"), powered == closed, format!("powering {powered}, closed form {closed}"));
        }
    }
    let pi = stationary_distribution(&nalgebra::DMatrix::from_row_slice(2, 2, &[0.7, 0.3, 0.2, 0.8]))?;
    let ok = (pi[0] - 0.4).abs() < 1e-12 && (pi[1] - 0.6).abs() < 1e-12;
    checks.record("stationary distribution", ok, format!("pi = ({:.15}, {:.15})", pi[0], pi[1]));

    print!("{}", checks.lines);
    println!("{} checks failed", checks.failed);
    Ok(if checks.failed == 0 { EXIT_OK } else { EXIT_VERIFY })
}
