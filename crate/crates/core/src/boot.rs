//! Multiplier-bootstrap calibration of a single function-class statistic.
//!
//! The observed statistic is compared against `B` replicates in which the
//! centered scores are reweighted by i.i.d. mean-zero unit-variance
//! multipliers. Each replicate draws its multipliers from a counter-keyed
//! stream derived from `(seed, b)`, so results are bit-reproducible and
//! independent of evaluation order or worker count.
//!
//! Two p-value conventions are reported: the strict-exceedance count over `B`
//! (`count/B`), and the add-one variant `(1 + count)/(B + 1)` used for
//! finite-sample validity. Rejection at a level is left to the caller.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::funclass::{ArgmaxInfo, ClassEngine, ClassError, FunctionClassSpec};
use crate::scores::{center_scores, ScoreSet};

/// Multiplier distribution; both have mean zero and unit variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiplierKind {
    Rademacher,
    StandardNormal,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MultiplierConfig {
    pub kind: MultiplierKind,
    /// Number of bootstrap replicates (B >= 1).
    pub replicates: usize,
    pub seed: u64,
}

impl MultiplierConfig {
    pub fn new(kind: MultiplierKind, replicates: usize, seed: u64) -> Self {
        MultiplierConfig {
            kind,
            replicates,
            seed,
        }
    }
}

/// splitmix64 step; used to expand a seed into an RNG key.
pub(crate) fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Deterministic stream RNG keyed on `(seed, stream)`.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut state = seed;
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng
}

/// Draw the multiplier vector for replicate `b`.
///
/// Deterministic given `(seed, b, n)`; replicates use disjoint streams.
pub fn draw_multipliers(n: usize, config: &MultiplierConfig, b: usize) -> Vec<f64> {
    let mut rng = stream_rng(config.seed, b as u64 + 1);
    match config.kind {
        MultiplierKind::Rademacher => (0..n)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect(),
        MultiplierKind::StandardNormal => (0..n)
            .map(|_| rng.sample(rand_distr::StandardNormal))
            .collect(),
    }
}

/// Exceedance count to p-value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PValueConvention {
    /// `count / B`.
    Alg1,
    /// `(1 + count) / (B + 1)`.
    PlusOne,
}

pub fn p_value_convention(count_exceed: usize, b: usize, convention: PValueConvention) -> f64 {
    match convention {
        PValueConvention::Alg1 => count_exceed as f64 / b as f64,
        PValueConvention::PlusOne => (1 + count_exceed) as f64 / (b + 1) as f64,
    }
}

/// Result of a single-class bootstrap test.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestResult {
    pub class_spec: FunctionClassSpec,
    pub statistic: f64,
    pub boot_stats: Vec<f64>,
    /// Strict-exceedance p-value `count / B`.
    pub p_alg1: f64,
    /// Add-one p-value `(1 + count) / (B + 1)`; the default for reports.
    pub p_plus_one: f64,
    pub seed: u64,
    pub argmax: ArgmaxInfo,
    /// All scores are exactly zero: every statistic is 0 and p-values are
    /// meaningless.
    pub degenerate_scores: bool,
}

impl TestResult {
    pub fn p_value(&self, convention: PValueConvention) -> f64 {
        match convention {
            PValueConvention::Alg1 => self.p_alg1,
            PValueConvention::PlusOne => self.p_plus_one,
        }
    }
}

/// Run the bootstrap test for one function class.
///
/// Scores are centered, the observed statistic is computed, and each
/// replicate reuses the prepared engine (sorted order, factorizations).
/// Replicate `b` writes into slot `b`, so the output is order-independent.
pub fn run_test(
    scores: &ScoreSet,
    class_spec: &FunctionClassSpec,
    config: &MultiplierConfig,
) -> Result<TestResult, ClassError> {
    if config.replicates == 0 {
        return Err(ClassError::InvalidSpec(
            "bootstrap needs at least one replicate".into(),
        ));
    }
    let centered = center_scores(scores.clone());
    let degenerate = centered.phi.iter().all(|&p| p == 0.0);
    let engine = ClassEngine::new(&centered, class_spec)?;
    let (statistic, argmax) = engine.observed();
    let n = centered.n();
    let b_total = config.replicates;
    let mut boot_stats = vec![0.0; b_total];
    boot_stats
        .par_iter_mut()
        .enumerate()
        .try_for_each(|(b, slot)| {
            let xi = draw_multipliers(n, config, b);
            *slot = engine.bootstrap(&xi)?;
            Ok::<(), ClassError>(())
        })?;
    let count = boot_stats.iter().filter(|&&t| t > statistic).count();
    Ok(TestResult {
        class_spec: class_spec.clone(),
        statistic,
        boot_stats,
        p_alg1: p_value_convention(count, b_total, PValueConvention::Alg1),
        p_plus_one: p_value_convention(count, b_total, PValueConvention::PlusOne),
        seed: config.seed,
        argmax,
        degenerate_scores: degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn scores(n: usize, seed: u64) -> ScoreSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ScoreSet {
            v: (0..n).map(|_| rng.random::<f64>()).collect(),
            phi: (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
            psi_v: vec![0.0; n],
            theta_hat: 0.0,
        }
    }

    #[test]
    fn multipliers_deterministic_and_stream_separated() {
        let cfg = MultiplierConfig::new(MultiplierKind::Rademacher, 10, 99);
        let a = draw_multipliers(32, &cfg, 3);
        let b = draw_multipliers(32, &cfg, 3);
        assert_eq!(a, b);
        let c = draw_multipliers(32, &cfg, 4);
        assert_ne!(a, c);
        assert!(a.iter().all(|&x| x == 1.0 || x == -1.0));
    }

    #[test]
    fn rademacher_mean_close_to_zero() {
        let cfg = MultiplierConfig::new(MultiplierKind::Rademacher, 1, 7);
        let draws = draw_multipliers(1_000_000, &cfg, 0);
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!(mean.abs() < 0.005, "{mean}");
    }

    #[test]
    fn normal_multipliers_standardized() {
        let cfg = MultiplierConfig::new(MultiplierKind::StandardNormal, 1, 7);
        let draws = draw_multipliers(200_000, &cfg, 0);
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
            / (draws.len() - 1) as f64;
        assert!(mean.abs() < 0.01, "{mean}");
        assert!((var - 1.0).abs() < 0.02, "{var}");
    }

    #[test]
    fn p_value_conventions() {
        assert_eq!(p_value_convention(0, 800, PValueConvention::Alg1), 0.0);
        assert_eq!(
            p_value_convention(0, 800, PValueConvention::PlusOne),
            1.0 / 801.0
        );
        assert_eq!(p_value_convention(800, 800, PValueConvention::Alg1), 1.0);
        assert_eq!(
            p_value_convention(800, 800, PValueConvention::PlusOne),
            1.0
        );
    }

    #[test]
    fn degenerate_scores_flagged() {
        let s = ScoreSet {
            v: vec![0.1, 0.5, 0.9],
            phi: vec![0.0; 3],
            psi_v: vec![0.0; 3],
            theta_hat: 0.0,
        };
        let cfg = MultiplierConfig::new(MultiplierKind::Rademacher, 50, 1);
        let result = run_test(&s, &FunctionClassSpec::Indicator, &cfg).unwrap();
        assert!(result.degenerate_scores);
        assert_eq!(result.statistic, 0.0);
        assert!(result.boot_stats.iter().all(|&t| t == 0.0));
        // Strict inequality: no replicate exceeds, p_alg1 = 0.
        assert_eq!(result.p_alg1, 0.0);
    }

    #[test]
    fn run_test_reproducible() {
        let s = scores(60, 5);
        let cfg = MultiplierConfig::new(MultiplierKind::Rademacher, 100, 12345);
        let spec = FunctionClassSpec::rkhs(8, 1e-4, 1.0).unwrap();
        let r1 = run_test(&s, &spec, &cfg).unwrap();
        let r2 = run_test(&s, &spec, &cfg).unwrap();
        assert_eq!(r1.statistic, r2.statistic);
        assert_eq!(r1.boot_stats, r2.boot_stats);
        assert_eq!(r1.p_plus_one, r2.p_plus_one);
    }

    #[test]
    fn run_test_identical_across_worker_counts() {
        let s = scores(70, 21);
        let cfg = MultiplierConfig::new(MultiplierKind::StandardNormal, 80, 9);
        let spec = FunctionClassSpec::rkhs(10, 1e-3, 1.0).unwrap();
        let results: Vec<TestResult> = [1usize, 4]
            .iter()
            .map(|&threads| {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .unwrap();
                pool.install(|| run_test(&s, &spec, &cfg).unwrap())
            })
            .collect();
        assert_eq!(results[0].boot_stats, results[1].boot_stats);
        assert_eq!(results[0].p_plus_one, results[1].p_plus_one);
    }

    #[test]
    fn p_value_invariant_to_positive_scaling() {
        let s = scores(80, 9);
        let scaled = ScoreSet {
            phi: s.phi.iter().map(|p| 3.0 * p).collect(),
            ..s.clone()
        };
        let cfg = MultiplierConfig::new(MultiplierKind::Rademacher, 200, 777);
        for spec in [
            FunctionClassSpec::Indicator,
            FunctionClassSpec::rkhs(10, 1e-3, 1.0).unwrap(),
        ] {
            let r1 = run_test(&s, &spec, &cfg).unwrap();
            let r2 = run_test(&scaled, &spec, &cfg).unwrap();
            assert_eq!(r1.p_alg1, r2.p_alg1, "{}", spec.label());
            assert_eq!(r1.p_plus_one, r2.p_plus_one);
        }
    }

    // Size validity of the add-one p-value on exchangeable null scores.
    #[test]
    fn plus_one_p_value_valid_under_null() {
        let mut data_rng = ChaCha8Rng::seed_from_u64(4242);
        let reps = 500;
        let n = 120;
        let mut p_values = Vec::with_capacity(reps);
        for rep in 0..reps {
            let s = ScoreSet {
                v: (0..n).map(|_| data_rng.random::<f64>()).collect(),
                phi: (0..n)
                    .map(|_| data_rng.sample::<f64, _>(StandardNormal))
                    .collect(),
                psi_v: vec![0.0; n],
                theta_hat: 0.0,
            };
            let cfg = MultiplierConfig::new(MultiplierKind::Rademacher, 150, 10_000 + rep as u64);
            let result = run_test(&s, &FunctionClassSpec::Indicator, &cfg).unwrap();
            p_values.push(result.p_plus_one);
        }
        for alpha in [0.01, 0.05, 0.10] {
            let rate =
                p_values.iter().filter(|&&p| p <= alpha).count() as f64 / reps as f64;
            assert!(rate <= alpha + 0.03, "alpha {alpha}: rejection rate {rate}");
        }
    }

    #[test]
    fn eta_leaves_p_value_unchanged() {
        let s = scores(50, 13);
        let cfg = MultiplierConfig::new(MultiplierKind::Rademacher, 150, 3);
        let r1 = run_test(&s, &FunctionClassSpec::rkhs(8, 0.5, 1.0).unwrap(), &cfg).unwrap();
        let r7 = run_test(&s, &FunctionClassSpec::rkhs(8, 0.5, 7.0).unwrap(), &cfg).unwrap();
        assert_eq!(r1.p_alg1, r7.p_alg1);
        assert_eq!(r1.p_plus_one, r7.p_plus_one);
    }
}
