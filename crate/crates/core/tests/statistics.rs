use markov_vi::markov::{sample_trajectory, two_state_chain, NoiseDistribution};
use markov_vi::oracle::{OracleMode, StochasticOracle};
use markov_vi::problem::{assemble_operator, build_saddle_instance};
use nalgebra::DVector;

/// Critical value of χ² with 3 degrees of freedom at the 1% level.
const CHI2_3_CRIT: f64 = 11.34;

fn quiet(p: f64) -> markov_vi::MarkovNoiseChain {
    two_state_chain(p, NoiseDistribution::constant(0.1), NoiseDistribution::constant(-0.1)).unwrap()
}

fn pair_chi_square(states: &[usize]) -> f64 {
    let mut counts = [0.0f64; 4];
    for w in states.windows(2) {
        counts[w[0] * 2 + w[1]] += 1.0;
    }
    let expected = (states.len() - 1) as f64 / 4.0;
    counts.iter().map(|c| (c - expected).powi(2) / expected).sum()
}

fn oracle_states(mode: OracleMode, p: f64, n: usize, seed: u64) -> Vec<usize> {
    let op = assemble_operator(&build_saddle_instance(2, 1.0, 1.0, 0).unwrap()).unwrap();
    let chain = quiet(p);
    let mut oracle = StochasticOracle::new(&op, &chain, mode, seed);
    (0..n).map(|_| oracle.advance().state).collect()
}

#[test]
fn half_chain_is_indistinguishable_from_iid() {
    let markov = oracle_states(OracleMode::Markov, 0.5, 200_000, 1);
    let iid = oracle_states(OracleMode::Iid, 0.5, 200_000, 2);
    let (a, b) = (pair_chi_square(&markov), pair_chi_square(&iid));
    assert!(a < CHI2_3_CRIT, "markov chi2 {a}");
    assert!(b < CHI2_3_CRIT, "iid chi2 {b}");
}

#[test]
fn sticky_chain_is_strongly_correlated() {
    let states = oracle_states(OracleMode::Markov, 0.99, 200_000, 3);
    assert!(pair_chi_square(&states) > 1e4);
    let x: Vec<f64> = states.iter().map(|&s| if s == 0 { 1.0 } else { -1.0 }).collect();
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64;
    let cov = x.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>() / (x.len() - 1) as f64;
    let rho = cov / var;
    // Lag-one correlation of the ±1 encoding is 2p − 1.
    assert!((rho - 0.98).abs() < 0.01, "rho {rho}");
    let iid = oracle_states(OracleMode::Iid, 0.99, 200_000, 4);
    assert!(pair_chi_square(&iid) < CHI2_3_CRIT);
}

#[test]
fn state_frequencies_match_stationary() {
    for (p, seed) in [(0.3, 5), (0.7, 6), (0.95, 7)] {
        let n = 400_000;
        let states = sample_trajectory(&quiet(p), n, seed);
        let freq = states.iter().filter(|&&s| s == 0).count() as f64 / n as f64;
        let rho = 2.0 * p - 1.0;
        let se = (0.25 * (1.0 + rho) / (1.0 - rho) / n as f64).sqrt();
        assert!((freq - 0.5).abs() < 4.0 * se, "p={p} freq={freq} se={se}");
    }
}

#[test]
fn iid_average_recovers_the_operator() {
    let op = assemble_operator(&build_saddle_instance(3, 0.5, 0.5, 9).unwrap()).unwrap();
    let chain = two_state_chain(
        0.9,
        NoiseDistribution::gaussian(0.1, 0.1).unwrap(),
        NoiseDistribution::gaussian(-0.1, 0.1).unwrap(),
    )
    .unwrap();
    let mut oracle = StochasticOracle::new(&op, &chain, OracleMode::Iid, 10);
    let z = DVector::from_fn(6, |i, _| i as f64 * 0.3 - 1.0);
    let n = 100_000;
    let mut sum = DVector::zeros(6);
    for _ in 0..n {
        let s = oracle.advance();
        sum += oracle.evaluate_noisy(&s, &z).unwrap();
    }
    let mean = sum / n as f64;
    // Per coordinate the noise has variance 0.1² + 0.1².
    let se = (0.02f64 / n as f64).sqrt();
    assert!((mean - op.evaluate(&z).unwrap()).amax() < 4.0 * se);
    assert_eq!(oracle.stationary_mean_noise(), 0.0);
}
