//! The saddle-point test family and its affine VI operator.
//!
//! For `f(x, y) = xᵀPy + bᵀx + cᵀy + (λ/2)‖x‖² − (ν/2)‖y‖²` the operator
//! `F(z) = (∇ₓf; −∇ᵧf)` is affine, `F(z) = Mz + q` with
//!
//! ```text
//! M = [[ λI,  P ],      q = (  b )
//!      [ −Pᵀ, νI ]]          ( −c )
//! ```
//!
//! Its symmetric part is `diag(λI, νI)`, so the strong monotonicity constant
//! is `min(λ, ν)` and the unique solution solves `Mz = −q`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Deserialize;
use thiserror::Error;

/// Lower end of the singular-value range of `P`.
pub const SINGULAR_MIN: f64 = 0.1;
/// Upper end of the singular-value range of `P`.
pub const SINGULAR_MAX: f64 = 10.0;

const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 100_000;
const CROSS_CHECK_MAX_DIM: usize = 64;
const POWER_START_SEED: u64 = 0x4C49_5053;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("operator is not strongly monotone: smallest eigenvalue of the symmetric part is {0}")]
    NotStronglyMonotone(f64),
    #[error("linear system is singular")]
    Singular,
    #[error("power iteration did not converge after {0} iterations")]
    NoConvergence(usize),
    #[error("power iteration gave L = {power}, dense SVD gave {dense}")]
    CrossCheck { power: f64, dense: f64 },
    #[error("solution residual {residual:e} exceeds bound {bound:e}")]
    Residual { residual: f64, bound: f64 },
    #[error("malformed instance file: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Parameters of one saddle-point problem.
#[derive(Debug, Clone, PartialEq)]
pub struct SaddleInstance {
    pub d: usize,
    pub p: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: DVector<f64>,
    pub lambda: f64,
    pub nu: f64,
    pub seed: u64,
}

/// Generate an instance deterministically from `seed`.
///
/// `P = U Σ Vᵀ` with Haar-distributed orthogonal `U`, `V` and singular values
/// drawn uniformly from `[0.1, 10]`; `b`, `c` are uniform on `[−1, 1]`.
pub fn build_saddle_instance(
    d: usize,
    lambda: f64,
    nu: f64,
    seed: u64,
) -> Result<SaddleInstance, ProblemError> {
    validate_params(d, lambda, nu)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = random_orthogonal(d, &mut rng);
    let v = random_orthogonal(d, &mut rng);
    let sigma = DVector::from_fn(d, |_, _| rng.random_range(SINGULAR_MIN..=SINGULAR_MAX));
    let b = DVector::from_fn(d, |_, _| rng.random_range(-1.0..=1.0));
    let c = DVector::from_fn(d, |_, _| rng.random_range(-1.0..=1.0));
    let p = &u * DMatrix::from_diagonal(&sigma) * v.transpose();
    Ok(SaddleInstance { d, p, b, c, lambda, nu, seed })
}

fn validate_params(d: usize, lambda: f64, nu: f64) -> Result<(), ProblemError> {
    if d == 0 {
        return Err(ProblemError::InvalidParameter("d must be at least 1".into()));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(ProblemError::InvalidParameter(format!("lambda must be positive, got {lambda}")));
    }
    if !(nu > 0.0 && nu.is_finite()) {
        return Err(ProblemError::InvalidParameter(format!("nu must be positive, got {nu}")));
    }
    Ok(())
}

fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::<f64>::from_fn(n, n, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    // Sign fix makes the distribution Haar rather than QR-biased.
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Sign convention of the `ν y` term in the second operator block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SecondBlockSign {
    /// `−Pᵀx − c + νy`, the true `−∇ᵧf`.
    #[default]
    NegativeGradient,
    /// `−Pᵀx − c − νy`. Not monotone for `ν > 0`; kept for diagnostics.
    Flipped,
}

/// An uncertified affine map `z ↦ Mz + q`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub m: DMatrix<f64>,
    pub q: DVector<f64>,
}

impl AffineMap {
    pub fn new(m: DMatrix<f64>, q: DVector<f64>) -> Result<Self, ProblemError> {
        if !m.is_square() {
            return Err(ProblemError::InvalidParameter(format!(
                "operator matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if q.len() != m.nrows() {
            return Err(ProblemError::DimensionMismatch { expected: m.nrows(), got: q.len() });
        }
        Ok(Self { m, q })
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn evaluate(&self, z: &DVector<f64>) -> Result<DVector<f64>, ProblemError> {
        if z.len() != self.dim() {
            return Err(ProblemError::DimensionMismatch { expected: self.dim(), got: z.len() });
        }
        let mut out = self.q.clone();
        out.gemv(1.0, &self.m, z, 1.0);
        Ok(out)
    }

    /// `out ← Mz + q` without allocating. Dimensions are the caller's problem.
    #[inline]
    pub fn evaluate_into(&self, z: &DVector<f64>, out: &mut DVector<f64>) {
        out.copy_from(&self.q);
        out.gemv(1.0, &self.m, z, 1.0);
    }
}

/// Assemble the affine map of an instance under the given sign convention.
pub fn assemble_map(instance: &SaddleInstance, sign: SecondBlockSign) -> AffineMap {
    let d = instance.d;
    let mut m = DMatrix::<f64>::zeros(2 * d, 2 * d);
    let nu_term = match sign {
        SecondBlockSign::NegativeGradient => instance.nu,
        SecondBlockSign::Flipped => -instance.nu,
    };
    for i in 0..d {
        m[(i, i)] = instance.lambda;
        m[(d + i, d + i)] = nu_term;
    }
    m.view_mut((0, d), (d, d)).copy_from(&instance.p);
    m.view_mut((d, 0), (d, d)).copy_from(&(-instance.p.transpose()));
    let mut q = DVector::<f64>::zeros(2 * d);
    q.rows_mut(0, d).copy_from(&instance.b);
    q.rows_mut(d, d).copy_from(&(-&instance.c));
    AffineMap { m, q }
}

/// An affine operator with computed Lipschitz and strong monotonicity
/// constants. Construction fails unless `mu > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineVIOperator {
    map: AffineMap,
    lipschitz: f64,
    mu: f64,
}

impl AffineVIOperator {
    pub fn certify(map: AffineMap) -> Result<Self, ProblemError> {
        let lipschitz = lipschitz_constant(&map.m)?;
        let mu = strong_monotonicity_constant(&map.m)?;
        Ok(Self { map, lipschitz, mu })
    }

    pub fn from_parts(m: DMatrix<f64>, q: DVector<f64>) -> Result<Self, ProblemError> {
        Self::certify(AffineMap::new(m, q)?)
    }

    pub fn dim(&self) -> usize {
        self.map.dim()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.map.m
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.map.q
    }

    pub fn map(&self) -> &AffineMap {
        &self.map
    }

    /// Lipschitz constant `L`, the largest singular value of `M`.
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    /// Strong monotonicity constant, the smallest eigenvalue of `(M + Mᵀ)/2`.
    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn evaluate(&self, z: &DVector<f64>) -> Result<DVector<f64>, ProblemError> {
        self.map.evaluate(z)
    }

    #[inline]
    pub fn evaluate_into(&self, z: &DVector<f64>, out: &mut DVector<f64>) {
        self.map.evaluate_into(z, out)
    }
}

pub fn assemble_operator(instance: &SaddleInstance) -> Result<AffineVIOperator, ProblemError> {
    AffineVIOperator::certify(assemble_map(instance, SecondBlockSign::NegativeGradient))
}

/// Largest singular value of `m` by power iteration on `MᵀM`.
///
/// Stops once the eigen-residual `‖MᵀMv − θv‖` drops below `1e-10·θ`. For
/// matrices up to 64×64 the result is checked against a dense SVD.
pub fn lipschitz_constant(m: &DMatrix<f64>) -> Result<f64, ProblemError> {
    let n = m.ncols();
    if n == 0 {
        return Err(ProblemError::InvalidParameter("empty matrix".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_START_SEED);
    let mut v = DVector::<f64>::from_fn(n, |_, _| rng.random_range(0.5..1.5));
    v.normalize_mut();
    let mut w = DVector::<f64>::zeros(m.nrows());
    let mut u = DVector::<f64>::zeros(n);
    let mut estimate = None;
    for _ in 0..POWER_MAX_ITERS {
        w.gemv(1.0, m, &v, 0.0);
        u.gemv_tr(1.0, m, &w, 0.0);
        let theta = v.dot(&u);
        let u_norm = u.norm();
        if u_norm == 0.0 {
            estimate = Some(0.0);
            break;
        }
        let residual = (&u - theta * &v).norm();
        if residual <= POWER_TOL * theta {
            estimate = Some(theta.sqrt());
            break;
        }
        v.copy_from(&u);
        v /= u_norm;
    }
    let lipschitz = estimate.ok_or(ProblemError::NoConvergence(POWER_MAX_ITERS))?;
    if lipschitz <= 0.0 {
        return Err(ProblemError::InvalidParameter("operator matrix is zero".into()));
    }
    if n <= CROSS_CHECK_MAX_DIM {
        let dense = m.singular_values().max();
        if (lipschitz - dense).abs() > POWER_TOL * dense {
            return Err(ProblemError::CrossCheck { power: lipschitz, dense });
        }
    }
    Ok(lipschitz)
}

/// Smallest eigenvalue of the symmetric part `(M + Mᵀ)/2`, any sign.
pub fn symmetric_part_min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().min()
}

/// Strong monotonicity constant of `z ↦ Mz + q`; errors unless positive.
pub fn strong_monotonicity_constant(m: &DMatrix<f64>) -> Result<f64, ProblemError> {
    if !m.is_square() || m.nrows() == 0 {
        return Err(ProblemError::InvalidParameter("operator matrix must be square and non-empty".into()));
    }
    let mu = symmetric_part_min_eigenvalue(m);
    if mu > 0.0 {
        Ok(mu)
    } else {
        Err(ProblemError::NotStronglyMonotone(mu))
    }
}

/// The unique zero of a strongly monotone affine operator.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub z_star: DVector<f64>,
    /// `‖F(z*)‖` as evaluated in floating point.
    pub residual: f64,
}

/// Solve `Mz = −q` by LU with one round of iterative refinement.
pub fn exact_solution(op: &AffineVIOperator) -> Result<Solution, ProblemError> {
    let lu = op.matrix().clone().lu();
    let rhs = -op.offset();
    let mut z = lu.solve(&rhs).ok_or(ProblemError::Singular)?;
    let r = op.evaluate(&z)?;
    if let Some(correction) = lu.solve(&r) {
        z -= correction;
    }
    let residual = op.evaluate(&z)?.norm();
    let bound = 1e-9 * (1.0 + op.offset().norm());
    if !(residual <= bound) {
        return Err(ProblemError::Residual { residual, bound });
    }
    Ok(Solution { z_star: z, residual })
}

// ---------------------------------------------------------------------------
// Instance files
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceFile {
    d: usize,
    lambda: f64,
    nu: f64,
    #[serde(with = "crate::seed::serde_u64")]
    seed: u64,
    #[serde(rename = "P")]
    p: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
}

fn fmt_f64(x: f64) -> String {
    // 17 significant digits round-trip every finite f64.
    format!("{x:.16e}")
}

fn write_array(out: &mut String, key: &str, values: impl Iterator<Item = f64>) {
    let body: Vec<String> = values.map(fmt_f64).collect();
    let _ = writeln!(out, "{key} = [{}]", body.join(", "));
}

impl SaddleInstance {
    /// Serialise as TOML with `P` stored row-major.
    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "d = {}", self.d);
        let _ = writeln!(out, "lambda = {}", fmt_f64(self.lambda));
        let _ = writeln!(out, "nu = {}", fmt_f64(self.nu));
        match i64::try_from(self.seed) {
            Ok(s) => { let _ = writeln!(out, "seed = {s}"); }
            Err(_) => { let _ = writeln!(out, "seed = \"{}\"", self.seed); }
        }
        let d = self.d;
        write_array(&mut out, "P", (0..d * d).map(|k| self.p[(k / d, k % d)]));
        write_array(&mut out, "b", self.b.iter().copied());
        write_array(&mut out, "c", self.c.iter().copied());
        out
    }

    pub fn from_toml(text: &str) -> Result<Self, ProblemError> {
        let raw: InstanceFile = toml::from_str(text).map_err(|e| ProblemError::Parse(e.to_string()))?;
        validate_params(raw.d, raw.lambda, raw.nu)?;
        let d = raw.d;
        if raw.p.len() != d * d {
            return Err(ProblemError::Parse(format!("P has {} entries, expected {}", raw.p.len(), d * d)));
        }
        if raw.b.len() != d || raw.c.len() != d {
            return Err(ProblemError::Parse(format!("b and c must have {d} entries")));
        }
        Ok(Self {
            d,
            p: DMatrix::from_row_slice(d, d, &raw.p),
            b: DVector::from_vec(raw.b),
            c: DVector::from_vec(raw.c),
            lambda: raw.lambda,
            nu: raw.nu,
            seed: raw.seed,
        })
    }

    pub fn read(path: &Path) -> Result<Self, ProblemError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_instance(b: f64, c: f64) -> SaddleInstance {
        SaddleInstance {
            d: 1,
            p: DMatrix::from_element(1, 1, 1.0),
            b: DVector::from_element(1, b),
            c: DVector::from_element(1, c),
            lambda: 1.0,
            nu: 1.0,
            seed: 0,
        }
    }

    #[test]
    fn scalar_instance_ranges() {
        let inst = build_saddle_instance(1, 1.0, 1.0, 42).unwrap();
        let p = inst.p[(0, 0)].abs();
        assert!((SINGULAR_MIN..=SINGULAR_MAX).contains(&p), "{p}");
        assert!(inst.b[0].abs() <= 1.0 && inst.c[0].abs() <= 1.0);
    }

    #[test]
    fn instance_is_deterministic() {
        let a = build_saddle_instance(6, 0.5, 0.7, 9).unwrap();
        let b = build_saddle_instance(6, 0.5, 0.7, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_toml(), b.to_toml());
        assert_ne!(a, build_saddle_instance(6, 0.5, 0.7, 10).unwrap());
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(matches!(build_saddle_instance(0, 1.0, 1.0, 1), Err(ProblemError::InvalidParameter(_))));
        assert!(build_saddle_instance(2, 0.0, 1.0, 1).is_err());
        assert!(build_saddle_instance(2, 1.0, -1.0, 1).is_err());
        assert!(build_saddle_instance(2, f64::NAN, 1.0, 1).is_err());
    }

    #[test]
    fn unit_operator_blocks() {
        let op = assemble_operator(&unit_instance(0.0, 0.0)).unwrap();
        assert_eq!(op.matrix(), &DMatrix::from_row_slice(2, 2, &[1.0, 1.0, -1.0, 1.0]));
        assert_eq!(op.offset(), &DVector::from_vec(vec![0.0, 0.0]));
        assert_eq!(op.mu(), 1.0);
        assert!((op.lipschitz() - 2f64.sqrt()).abs() <= 1e-10 * 2f64.sqrt());
    }

    #[test]
    fn evaluate_examples() {
        let op = assemble_operator(&unit_instance(0.0, 0.0)).unwrap();
        let f = op.evaluate(&DVector::from_vec(vec![1.0, 0.0])).unwrap();
        assert_eq!(f, DVector::from_vec(vec![1.0, -1.0]));

        let op = assemble_operator(&unit_instance(1.0, 0.0)).unwrap();
        let f = op.evaluate(&DVector::zeros(2)).unwrap();
        assert_eq!(f, DVector::from_vec(vec![1.0, 0.0]));

        assert!(matches!(
            op.evaluate(&DVector::zeros(3)),
            Err(ProblemError::DimensionMismatch { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn exact_solution_unit() {
        let op = assemble_operator(&unit_instance(1.0, 0.0)).unwrap();
        let sol = exact_solution(&op).unwrap();
        assert!((sol.z_star[0] + 0.5).abs() < 1e-15);
        assert!((sol.z_star[1] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn homogeneous_solution_is_zero() {
        let op = assemble_operator(&unit_instance(0.0, 0.0)).unwrap();
        let sol = exact_solution(&op).unwrap();
        assert_eq!(sol.z_star.norm(), 0.0);
        assert_eq!(sol.residual, 0.0);
    }

    #[test]
    fn lipschitz_of_scaled_identity() {
        assert!((lipschitz_constant(&DMatrix::identity(5, 5)).unwrap() - 1.0).abs() < 1e-12);
        assert!((lipschitz_constant(&(DMatrix::identity(4, 4) * 3.0)).unwrap() - 3.0).abs() < 1e-12);
        assert!(lipschitz_constant(&DMatrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn mu_is_min_of_regularisers() {
        let mut inst = build_saddle_instance(4, 0.3, 0.7, 3).unwrap();
        let op = assemble_operator(&inst).unwrap();
        assert_eq!(op.mu(), 0.3);
        inst.lambda = 0.9;
        assert_eq!(assemble_operator(&inst).unwrap().mu(), 0.7);
        assert_eq!(strong_monotonicity_constant(&DMatrix::identity(3, 3)).unwrap(), 1.0);
    }

    #[test]
    fn flipped_sign_is_not_monotone() {
        let inst = build_saddle_instance(3, 0.5, 0.4, 1).unwrap();
        let map = assemble_map(&inst, SecondBlockSign::Flipped);
        assert!((symmetric_part_min_eigenvalue(&map.m) + 0.4).abs() < 1e-12);
        assert!(matches!(AffineVIOperator::certify(map), Err(ProblemError::NotStronglyMonotone(_))));
    }

    #[test]
    fn instance_file_round_trip() {
        let inst = build_saddle_instance(5, 0.1, 0.25, 77).unwrap();
        let text = inst.to_toml();
        assert!(text.contains("lambda = 1.0000000000000001e-1"));
        assert_eq!(SaddleInstance::from_toml(&text).unwrap(), inst);

        let mut big = inst.clone();
        big.seed = u64::MAX;
        assert_eq!(SaddleInstance::from_toml(&big.to_toml()).unwrap().seed, u64::MAX);
    }

    #[test]
    fn instance_file_rejects_garbage() {
        assert!(SaddleInstance::from_toml("d = 1").is_err());
        let inst = build_saddle_instance(2, 1.0, 1.0, 1).unwrap();
        let extra = format!("{}bogus = 1\n", inst.to_toml());
        assert!(SaddleInstance::from_toml(&extra).is_err());
        let short = inst.to_toml().replace("d = 2", "d = 3");
        assert!(SaddleInstance::from_toml(&short).is_err());
    }
}
