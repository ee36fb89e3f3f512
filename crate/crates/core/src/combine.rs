//! Exchangeability-based aggregation of statistics across function classes,
//! plus the Cauchy combination comparator.
//!
//! A [`StatMatrix`] holds the observed statistic vector (row 0) and `B`
//! bootstrap vectors, with every class in a row computed from the *same*
//! multiplier draw — that joint-draw requirement is enforced by constructing
//! the matrix through [`stat_matrix`]. Each row is standardized per class by
//! leave-one-row-out moments and summarized by a mean of squares; under the
//! null the rows are exchangeable, so the add-one rank p-value is valid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boot::{draw_multipliers, MultiplierConfig};
use crate::funclass::{
    build_workspace, ArgmaxInfo, ClassEngine, ClassError, FunctionClassSpec, RkhsGridEngine,
};
use crate::scores::{center_scores, ScoreSet};

#[derive(Debug, Error)]
pub enum CombineError {
    #[error("aggregation requires at least 2 bootstrap rows, got {0}")]
    InsufficientBootstrap(usize),
    #[error("empty input")]
    EmptyInput,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Class(#[from] ClassError),
}

/// Observed and bootstrap statistics for `L` classes under shared draws.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatMatrix {
    /// `(B+1) x L`; row 0 is the observed vector.
    pub t: Vec<Vec<f64>>,
    pub class_specs: Vec<FunctionClassSpec>,
    /// Observed argmax diagnostics, one per class.
    pub argmax: Vec<ArgmaxInfo>,
    pub seed: u64,
}

impl StatMatrix {
    pub fn replicates(&self) -> usize {
        self.t.len().saturating_sub(1)
    }

    pub fn classes(&self) -> usize {
        self.class_specs.len()
    }
}

enum Evaluator {
    Single(Box<ClassEngine>),
    /// Index into the grid-engine list plus position of this class's gamma.
    Grid {
        group: usize,
        pos: usize,
        eta: f64,
    },
}

/// Compute the full statistic matrix for a set of classes.
///
/// All classes in a bootstrap row share one multiplier vector, drawn exactly
/// as in the single-class test for the same `(seed, b)`. Basis-class columns
/// sharing one dimension reuse a single workspace and spectral factorization.
pub fn stat_matrix(
    scores: &ScoreSet,
    class_specs: &[FunctionClassSpec],
    config: &MultiplierConfig,
) -> Result<StatMatrix, CombineError> {
    if class_specs.is_empty() {
        return Err(CombineError::EmptyInput);
    }
    if config.replicates == 0 {
        return Err(CombineError::InsufficientBootstrap(0));
    }
    let centered = center_scores(scores.clone());
    let n = centered.n();

    // Group positive-gamma basis classes by dimension for the spectral path.
    let mut grid_specs: Vec<(usize, Vec<(usize, f64)>)> = Vec::new(); // (d, [(class idx, gamma)])
    let mut evaluators: Vec<Option<Evaluator>> = (0..class_specs.len()).map(|_| None).collect();
    for (idx, spec) in class_specs.iter().enumerate() {
        match spec {
            FunctionClassSpec::Rkhs { d, gamma, eta } if *gamma > 0.0 => {
                let group = match grid_specs.iter().position(|(dim, _)| dim == d) {
                    Some(found) => found,
                    None => {
                        grid_specs.push((*d, Vec::new()));
                        grid_specs.len() - 1
                    }
                };
                grid_specs[group].1.push((idx, *gamma));
                evaluators[idx] = Some(Evaluator::Grid {
                    group,
                    pos: grid_specs[group].1.len() - 1,
                    eta: *eta,
                });
            }
            _ => {
                evaluators[idx] =
                    Some(Evaluator::Single(Box::new(ClassEngine::new(&centered, spec)?)));
            }
        }
    }
    let grids: Vec<RkhsGridEngine> = grid_specs
        .iter()
        .map(|(d, members)| {
            let ws = build_workspace(&centered, *d)?;
            let gammas = members.iter().map(|&(_, g)| g).collect();
            RkhsGridEngine::new(ws, gammas, 1.0)
        })
        .collect::<Result<_, ClassError>>()?;
    let evaluators: Vec<Evaluator> = evaluators.into_iter().map(Option::unwrap).collect();

    let b_total = config.replicates;
    let mut t = Vec::with_capacity(b_total + 1);
    let phi = &centered.phi;
    let grid_stats: Vec<Vec<f64>> = grids.iter().map(|g| g.stats(phi)).collect();
    let mut observed_row = Vec::with_capacity(class_specs.len());
    let mut argmax = Vec::with_capacity(class_specs.len());
    for (idx, ev) in evaluators.iter().enumerate() {
        match ev {
            Evaluator::Single(engine) => {
                let (stat, info) = engine.observed();
                observed_row.push(stat);
                argmax.push(info);
            }
            Evaluator::Grid { group, pos, eta } => {
                observed_row.push(grid_stats[*group][*pos] / eta);
                let gamma = match &class_specs[idx] {
                    FunctionClassSpec::Rkhs { gamma, .. } => *gamma,
                    _ => unreachable!(),
                };
                argmax.push(ArgmaxInfo::Coefficients(
                    grids[*group].coefficients(phi, gamma, *eta),
                ));
            }
        }
    }
    t.push(observed_row);

    // Replicate b writes row b; results are independent of worker count.
    let boot_rows: Vec<Vec<f64>> = (0..b_total)
        .into_par_iter()
        .map(|b| {
            let xi = draw_multipliers(n, config, b);
            let weights: Vec<f64> = phi.iter().zip(&xi).map(|(p, x)| p * x).collect();
            let grid_stats: Vec<Vec<f64>> = grids.iter().map(|g| g.stats(&weights)).collect();
            evaluators
                .iter()
                .map(|ev| match ev {
                    Evaluator::Single(engine) => engine.bootstrap(&xi).expect("length checked"),
                    Evaluator::Grid { group, pos, eta } => grid_stats[*group][*pos] / eta,
                })
                .collect()
        })
        .collect();
    t.extend(boot_rows);

    Ok(StatMatrix {
        t,
        class_specs: class_specs.to_vec(),
        argmax,
        seed: config.seed,
    })
}

/// Leave-one-row-out mean and standard deviation per class.
///
/// For each class `l`: the mean over the `B` rows other than `b` (row 0
/// included), and the standard deviation with divisor `B - 1`, floored at
/// `1e-12 * (1 + |mean|)` to guard degenerate columns.
pub fn leave_one_out_moments(
    matrix: &StatMatrix,
    b: usize,
) -> Result<(Vec<f64>, Vec<f64>), CombineError> {
    let rows = matrix.t.len();
    let b_total = rows - 1;
    if b_total < 2 {
        return Err(CombineError::InsufficientBootstrap(b_total));
    }
    let l = matrix.classes();
    let mut mu = vec![0.0; l];
    let mut sigma = vec![0.0; l];
    for class in 0..l {
        let mut sum = 0.0;
        for (row, values) in matrix.t.iter().enumerate() {
            if row != b {
                sum += values[class];
            }
        }
        let mean = sum / b_total as f64;
        let mut ss = 0.0;
        for (row, values) in matrix.t.iter().enumerate() {
            if row != b {
                let d = values[class] - mean;
                ss += d * d;
            }
        }
        let sd = (ss / (b_total - 1) as f64).sqrt();
        mu[class] = mean;
        sigma[class] = sd.max(1e-12 * (1.0 + mean.abs()));
    }
    Ok((mu, sigma))
}

/// Aggregate test outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateResult {
    /// Standardized observed summary.
    pub q0: f64,
    /// Standardized bootstrap summaries, one per replicate.
    pub qb: Vec<f64>,
    /// `(1 + #{b : qb >= q0}) / (B + 1)`.
    pub p_aggregate: f64,
    /// Per-class add-one p-values (strict exceedance).
    pub per_class_p: Vec<f64>,
    /// Cauchy combination of the per-class p-values.
    pub p_cauchy: f64,
}

/// Run the aggregate test on a statistic matrix.
///
/// Every row (observed included) is standardized by its leave-one-out
/// moments and summarized by the mean of squared z-scores; ties between a
/// bootstrap summary and the observed one count toward exceedance.
pub fn aggregate_test(matrix: &StatMatrix) -> Result<AggregateResult, CombineError> {
    let rows = matrix.t.len();
    let b_total = rows - 1;
    if b_total < 2 {
        return Err(CombineError::InsufficientBootstrap(b_total));
    }
    let l = matrix.classes();
    let mut q = Vec::with_capacity(rows);
    for b in 0..rows {
        let (mu, sigma) = leave_one_out_moments(matrix, b)?;
        let mut acc = 0.0;
        for class in 0..l {
            let z = (matrix.t[b][class] - mu[class]) / sigma[class];
            acc += z * z;
        }
        q.push(acc / l as f64);
    }
    let q0 = q[0];
    let qb = q[1..].to_vec();
    let exceed = qb.iter().filter(|&&v| v >= q0).count();
    let p_aggregate = (1 + exceed) as f64 / (b_total + 1) as f64;

    let per_class_p: Vec<f64> = (0..l)
        .map(|class| {
            let observed = matrix.t[0][class];
            let count = matrix.t[1..]
                .iter()
                .filter(|row| row[class] > observed)
                .count();
            (1 + count) as f64 / (b_total + 1) as f64
        })
        .collect();
    let p_cauchy = cauchy_combine(&per_class_p, None)?;

    Ok(AggregateResult {
        q0,
        qb,
        p_aggregate,
        per_class_p,
        p_cauchy,
    })
}

/// Cauchy combination of p-values: `S = sum_i w_i tan((0.5 - p_i) pi)`,
/// combined p = `0.5 - atan(S)/pi`. Inputs are clipped to
/// `[1e-10, 1 - 1e-10]`; weights default to `1/L` and are normalized to sum
/// to one otherwise.
pub fn cauchy_combine(p: &[f64], weights: Option<&[f64]>) -> Result<f64, CombineError> {
    if p.is_empty() {
        return Err(CombineError::EmptyInput);
    }
    let l = p.len();
    let w: Vec<f64> = match weights {
        None => vec![1.0 / l as f64; l],
        Some(w) => {
            if w.len() != l {
                return Err(CombineError::LengthMismatch(w.len(), l));
            }
            let total: f64 = w.iter().sum();
            if total.is_nan() || total <= 0.0 || w.iter().any(|&x| x < 0.0) {
                return Err(CombineError::EmptyInput);
            }
            w.iter().map(|x| x / total).collect()
        }
    };
    let s: f64 = p
        .iter()
        .zip(&w)
        .map(|(&pi, &wi)| {
            let clipped = pi.clamp(1e-10, 1.0 - 1e-10);
            wi * ((0.5 - clipped) * std::f64::consts::PI).tan()
        })
        .sum();
    Ok(0.5 - s.atan() / std::f64::consts::PI)
}
