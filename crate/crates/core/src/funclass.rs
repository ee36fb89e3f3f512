//! Function classes and their supremum statistics.
//!
//! Two classes are implemented over the scaled conditioning variable:
//!
//! * thresholded indicators `v -> 1{v <= v0}`, whose empirical supremum only
//!   changes at observed values, so the exact statistic is a maximum over
//!   sorted prefix sums (O(n log n));
//! * a truncated trigonometric basis class with a blended smoothness /
//!   variance quadratic constraint, whose supremum has the closed form
//!   `T = eta^{-1} (sqrt(n) U)^T M^{-1} (sqrt(n) U)` with
//!   `M = gamma * Gamma + (1 - gamma) * V`, solved by a symmetric
//!   positive-definite factorization (never an explicit inverse).
//!
//! Basis functions: `psi_{2j-1}(x) = sqrt(2) cos(2 j pi x)`,
//! `psi_{2j}(x) = sqrt(2) sin(2 j pi x)`, with smoothness weights
//! `Gamma_{jj} = 1/lambda_j`, `lambda_{2j-1} = lambda_{2j} = (2 j pi)^{-4}`.
//! Conditioning values are min-max scaled onto `[0, 1]` before evaluation.
//!
//! Bootstrap evaluations replace the centered scores by multiplier-weighted
//! scores; the factorization of `M` is computed once and reused across all
//! replicates. For a grid of `gamma` values sharing one basis dimension, a
//! spectral decomposition of the pencil `(Gamma, V)` evaluates every class
//! in O(D) per replicate after one O(D^2) transform.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scores::ScoreSet;

#[derive(Debug, Error)]
pub enum ClassError {
    #[error("basis input {0} outside [0,1]")]
    Domain(f64),
    #[error("conditioning variable is constant")]
    DegenerateConditioning,
    #[error("penalty matrix is singular (gamma = 0 with rank-deficient covariance)")]
    SingularPenalty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid function class: {0}")]
    InvalidSpec(String),
    #[error("need at least {need} observations, got {got}")]
    TooFewObservations { need: usize, got: usize },
}

/// A function class over which the supremum statistic is taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "class")]
pub enum FunctionClassSpec {
    Indicator,
    Rkhs { d: usize, gamma: f64, eta: f64 },
}

impl FunctionClassSpec {
    /// Basis-class constructor; odd dimensions round up to keep sin/cos pairs.
    pub fn rkhs(d: usize, gamma: f64, eta: f64) -> Result<Self, ClassError> {
        let d = normalize_dim(d);
        if !(0.0..=1.0).contains(&gamma) {
            return Err(ClassError::InvalidSpec(format!(
                "gamma {gamma} outside [0,1]"
            )));
        }
        if !eta.is_finite() || eta <= 0.0 {
            return Err(ClassError::InvalidSpec(format!("eta {eta} must be > 0")));
        }
        Ok(FunctionClassSpec::Rkhs { d, gamma, eta })
    }

    pub fn label(&self) -> String {
        match self {
            FunctionClassSpec::Indicator => "indicator".into(),
            FunctionClassSpec::Rkhs { d, gamma, eta } => {
                format!("rkhs(d={d},gamma={gamma:.3e},eta={eta})")
            }
        }
    }
}

fn normalize_dim(d: usize) -> usize {
    let d = d.max(2);
    if d % 2 == 1 {
        d + 1
    } else {
        d
    }
}

/// Evaluate the first `d` basis functions at `x` in `[0,1]`.
pub fn rkhs_basis(x: f64, d: usize) -> Result<Vec<f64>, ClassError> {
    if !(-1e-12..=1.0 + 1e-12).contains(&x) {
        return Err(ClassError::Domain(x));
    }
    let d = normalize_dim(d);
    let mut row = vec![0.0; d];
    basis_into(x, &mut row);
    Ok(row)
}

fn basis_into(x: f64, row: &mut [f64]) {
    let sqrt2 = std::f64::consts::SQRT_2;
    for pair in 1..=row.len() / 2 {
        let (s, c) = (2.0 * pair as f64 * std::f64::consts::PI * x).sin_cos();
        row[2 * pair - 2] = sqrt2 * c;
        row[2 * pair - 1] = sqrt2 * s;
    }
}

/// Smoothness weights `1/lambda_j` for the first `d` basis functions.
pub fn rkhs_gamma_diag(d: usize) -> DVector<f64> {
    let d = normalize_dim(d);
    DVector::from_fn(d, |j, _| {
        let pair = j / 2 + 1;
        (2.0 * pair as f64 * std::f64::consts::PI).powi(4)
    })
}

/// Affine min-max map onto `[0,1]`.
pub fn scale_to_unit(v: &[f64]) -> Result<Vec<f64>, ClassError> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &x in v {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    if hi.is_nan() || lo.is_nan() || hi <= lo {
        return Err(ClassError::DegenerateConditioning);
    }
    Ok(v.iter().map(|&x| ((x - lo) / (hi - lo)).clamp(0.0, 1.0)).collect())
}

/// Centered basis matrix and derived quantities for one basis dimension.
#[derive(Debug, Clone)]
pub struct RkhsWorkspace {
    /// n x D centered basis evaluations.
    pub phi_mat: DMatrix<f64>,
    /// Diagonal of the smoothness penalty (1/lambda_j).
    pub gamma_diag: DVector<f64>,
    /// Empirical covariance of the centered basis columns (1/n scaling).
    pub vmat: DMatrix<f64>,
    /// Score projection `U = n^{-1} Phi^T phi`.
    pub u: DVector<f64>,
    /// Conditioning values scaled onto [0,1].
    pub v_scaled: Vec<f64>,
}

impl RkhsWorkspace {
    pub fn n(&self) -> usize {
        self.phi_mat.nrows()
    }

    pub fn dim(&self) -> usize {
        self.phi_mat.ncols()
    }

    /// `n^{-1} Phi^T w` for an arbitrary per-observation weight vector.
    pub fn project(&self, weights: &[f64]) -> DVector<f64> {
        let w = DVector::from_column_slice(weights);
        (self.phi_mat.transpose() * w) / self.n() as f64
    }
}

/// Build the workspace for `scores` with basis dimension `d`.
pub fn build_workspace(scores: &ScoreSet, d: usize) -> Result<RkhsWorkspace, ClassError> {
    let n = scores.n();
    if n < 3 {
        return Err(ClassError::TooFewObservations { need: 3, got: n });
    }
    let d = normalize_dim(d);
    let v_scaled = scale_to_unit(&scores.v)?;
    let mut phi_mat = DMatrix::zeros(n, d);
    let mut row = vec![0.0; d];
    for (i, &vi) in v_scaled.iter().enumerate() {
        basis_into(vi, &mut row);
        for (j, &b) in row.iter().enumerate() {
            phi_mat[(i, j)] = b;
        }
    }
    // Center each column.
    for j in 0..d {
        let mean = phi_mat.column(j).sum() / n as f64;
        for i in 0..n {
            phi_mat[(i, j)] -= mean;
        }
    }
    let vmat = (phi_mat.transpose() * &phi_mat) / n as f64;
    let u = (phi_mat.transpose() * DVector::from_column_slice(&scores.phi)) / n as f64;
    Ok(RkhsWorkspace {
        phi_mat,
        gamma_diag: rkhs_gamma_diag(d),
        vmat,
        u,
        v_scaled,
    })
}

/// Cholesky factorization of `M = gamma*Gamma + (1-gamma)*V` with a ridge
/// fallback of `1e-10 * tr(M)/D` on the diagonal if the direct factorization
/// fails.
#[derive(Debug, Clone)]
pub struct BlendFactor {
    chol: Cholesky<f64, nalgebra::Dyn>,
    /// Ridge added to the diagonal (0.0 when the plain factorization worked).
    pub ridge: f64,
}

impl BlendFactor {
    pub fn new(ws: &RkhsWorkspace, gamma: f64) -> Result<Self, ClassError> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(ClassError::InvalidSpec(format!(
                "gamma {gamma} outside [0,1]"
            )));
        }
        let d = ws.dim();
        let mut m = &ws.vmat * (1.0 - gamma);
        for j in 0..d {
            m[(j, j)] += gamma * ws.gamma_diag[j];
        }
        if let Some(chol) = Cholesky::new(m.clone()) {
            return Ok(BlendFactor { chol, ridge: 0.0 });
        }
        let ridge = 1e-10 * m.trace() / d as f64;
        for j in 0..d {
            m[(j, j)] += ridge;
        }
        match Cholesky::new(m) {
            Some(chol) => Ok(BlendFactor { chol, ridge }),
            None => Err(ClassError::SingularPenalty),
        }
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }
}

/// Closed-form class statistic and maximizing coefficients.
///
/// `T = eta^{-1} (sqrt(n) U)^T M^{-1} (sqrt(n) U)` and
/// `a_hat = sqrt(n) eta^{-1} M^{-1} U`; the quadratic objective evaluated at
/// `a_hat` equals `T/2`.
pub fn rkhs_stat(
    ws: &RkhsWorkspace,
    gamma: f64,
    eta: f64,
) -> Result<(f64, Vec<f64>), ClassError> {
    if !eta.is_finite() || eta <= 0.0 {
        return Err(ClassError::InvalidSpec(format!("eta {eta} must be > 0")));
    }
    let factor = BlendFactor::new(ws, gamma)?;
    let s = &ws.u * (ws.n() as f64).sqrt();
    let z = factor.solve(&s);
    let t = s.dot(&z) / eta;
    let a_hat = z / eta;
    Ok((t.max(0.0), a_hat.as_slice().to_vec()))
}

fn rkhs_boot_stat(ws: &RkhsWorkspace, factor: &BlendFactor, eta: f64, weights: &[f64]) -> f64 {
    let u_b = ws.project(weights);
    let s = u_b * (ws.n() as f64).sqrt();
    let z = factor.solve(&s);
    (s.dot(&z) / eta).max(0.0)
}

/// Sorted-order view of the conditioning values for indicator suprema.
#[derive(Debug, Clone)]
pub struct IndicatorWorkspace {
    /// Observation indices sorted by conditioning value.
    order: Vec<usize>,
    /// Positions (in sorted order) where a run of tied values ends.
    group_ends: Vec<usize>,
    /// Distinct threshold values, one per group.
    thresholds: Vec<f64>,
    n: usize,
}

impl IndicatorWorkspace {
    pub fn new(v: &[f64]) -> Self {
        let n = v.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut group_ends = Vec::new();
        let mut thresholds = Vec::new();
        for pos in 0..n {
            let last_of_group = pos + 1 == n || v[order[pos + 1]] != v[order[pos]];
            if last_of_group {
                group_ends.push(pos);
                thresholds.push(v[order[pos]]);
            }
        }
        IndicatorWorkspace {
            order,
            group_ends,
            thresholds,
            n,
        }
    }

    /// `max_{v0} |n^{-1/2} sum_i w_i (1{v_i <= v0} - F_n(v0))|` over distinct
    /// thresholds, returning the smallest maximizing threshold.
    pub fn sup(&self, weights: &[f64]) -> (f64, f64) {
        debug_assert_eq!(weights.len(), self.n);
        let total: f64 = weights.iter().sum();
        let n = self.n as f64;
        let mut acc = 0.0;
        let mut best = f64::NEG_INFINITY;
        let mut best_threshold = self.thresholds[0];
        let mut group = 0;
        for (pos, &idx) in self.order.iter().enumerate() {
            acc += weights[idx];
            if group < self.group_ends.len() && self.group_ends[group] == pos {
                let frac = (pos + 1) as f64 / n;
                let value = (acc - frac * total).abs();
                if value > best {
                    best = value;
                    best_threshold = self.thresholds[group];
                }
                group += 1;
            }
        }
        (best / n.sqrt(), best_threshold)
    }
}

fn centered_phi(scores: &ScoreSet) -> Vec<f64> {
    let mean = scores.phi.iter().sum::<f64>() / scores.n() as f64;
    if mean == 0.0 {
        scores.phi.clone()
    } else {
        scores.phi.iter().map(|p| p - mean).collect()
    }
}

/// Indicator-class statistic over thresholds at the observed values.
pub fn indicator_stat(scores: &ScoreSet) -> Result<(f64, f64), ClassError> {
    if scores.n() < 2 {
        return Err(ClassError::TooFewObservations {
            need: 2,
            got: scores.n(),
        });
    }
    let ws = IndicatorWorkspace::new(&scores.v);
    Ok(ws.sup(&centered_phi(scores)))
}

/// Argmax diagnostics attached to a test result.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum ArgmaxInfo {
    /// Maximizing threshold of the indicator class.
    Threshold(f64),
    /// Maximizing basis coefficients of the quadratic class.
    Coefficients(Vec<f64>),
}

/// Prepared evaluator for one function class over a fixed (centered) score
/// set: observed statistic once, bootstrap statistics many times while
/// reusing all factorizations.
pub struct ClassEngine {
    phi_centered: Vec<f64>,
    kind: EngineKind,
}

enum EngineKind {
    Indicator(IndicatorWorkspace),
    Rkhs {
        ws: RkhsWorkspace,
        factor: BlendFactor,
        eta: f64,
    },
}

impl ClassEngine {
    pub fn new(scores: &ScoreSet, spec: &FunctionClassSpec) -> Result<Self, ClassError> {
        if scores.n() < 2 {
            return Err(ClassError::TooFewObservations {
                need: 2,
                got: scores.n(),
            });
        }
        let phi_centered = centered_phi(scores);
        let kind = match spec {
            FunctionClassSpec::Indicator => {
                EngineKind::Indicator(IndicatorWorkspace::new(&scores.v))
            }
            FunctionClassSpec::Rkhs { d, gamma, eta } => {
                if !eta.is_finite() || *eta <= 0.0 {
                    return Err(ClassError::InvalidSpec(format!("eta {eta} must be > 0")));
                }
                let ws = build_workspace(scores, *d)?;
                let factor = BlendFactor::new(&ws, *gamma)?;
                EngineKind::Rkhs {
                    ws,
                    factor,
                    eta: *eta,
                }
            }
        };
        Ok(ClassEngine { phi_centered, kind })
    }

    pub fn n(&self) -> usize {
        self.phi_centered.len()
    }

    /// Observed statistic and its argmax diagnostics.
    pub fn observed(&self) -> (f64, ArgmaxInfo) {
        match &self.kind {
            EngineKind::Indicator(ws) => {
                let (t, threshold) = ws.sup(&self.phi_centered);
                (t, ArgmaxInfo::Threshold(threshold))
            }
            EngineKind::Rkhs { ws, factor, eta } => {
                let u = ws.project(&self.phi_centered);
                let s = u * (ws.n() as f64).sqrt();
                let z = factor.solve(&s);
                let t = (s.dot(&z) / eta).max(0.0);
                let a_hat = &z / *eta;
                (t, ArgmaxInfo::Coefficients(a_hat.as_slice().to_vec()))
            }
        }
    }

    /// Bootstrap statistic for one multiplier vector.
    pub fn bootstrap(&self, xi: &[f64]) -> Result<f64, ClassError> {
        if xi.len() != self.phi_centered.len() {
            return Err(ClassError::LengthMismatch(xi.len(), self.phi_centered.len()));
        }
        let weights: Vec<f64> = self
            .phi_centered
            .iter()
            .zip(xi)
            .map(|(p, x)| x * p)
            .collect();
        Ok(match &self.kind {
            EngineKind::Indicator(ws) => ws.sup(&weights).0,
            EngineKind::Rkhs { ws, factor, eta } => rkhs_boot_stat(ws, factor, *eta, &weights),
        })
    }
}

/// One bootstrap (or observed, with unit multipliers) statistic for a class.
///
/// Centered scores are weighted by `xi` before the supremum; the factorization
/// is rebuilt per call, so prefer [`ClassEngine`] inside loops.
pub fn bootstrap_linear_form(
    scores: &ScoreSet,
    spec: &FunctionClassSpec,
    xi: &[f64],
) -> Result<f64, ClassError> {
    ClassEngine::new(scores, spec)?.bootstrap(xi)
}

/// Geometric grid of `k` blend weights, descending from `gamma_max` to
/// `gamma_min`.
pub fn gamma_grid(k: usize, gamma_min: f64, gamma_max: f64) -> Result<Vec<f64>, ClassError> {
    if k == 0 {
        return Err(ClassError::InvalidSpec("grid size must be >= 1".into()));
    }
    let grid_ok = gamma_min > 0.0 && gamma_min <= gamma_max && gamma_max <= 1.0;
    if !grid_ok {
        return Err(ClassError::InvalidSpec(format!(
            "need 0 < gamma_min <= gamma_max <= 1, got [{gamma_min}, {gamma_max}]"
        )));
    }
    if k == 1 {
        return Ok(vec![gamma_max]);
    }
    let ratio = gamma_min / gamma_max;
    Ok((0..k)
        .map(|i| gamma_max * ratio.powf(i as f64 / (k - 1) as f64))
        .collect())
}

/// Spectral evaluator for a family of blend weights sharing one workspace.
///
/// With `S = Gamma^{-1/2} V Gamma^{-1/2} = Q diag(mu) Q^T`, the statistic for
/// any `gamma` is `eta^{-1} sum_j c_j^2 / (gamma + (1-gamma) mu_j)` where
/// `c = Q^T Gamma^{-1/2} (sqrt(n) U)`. One O(D^2) transform per score vector
/// serves every `gamma`.
pub struct RkhsGridEngine {
    ws: RkhsWorkspace,
    /// Gamma^{-1/2} diagonal.
    inv_sqrt_gamma: DVector<f64>,
    q_t: DMatrix<f64>,
    mu: DVector<f64>,
    pub gammas: Vec<f64>,
    pub eta: f64,
}

impl RkhsGridEngine {
    pub fn new(ws: RkhsWorkspace, gammas: Vec<f64>, eta: f64) -> Result<Self, ClassError> {
        if !eta.is_finite() || eta <= 0.0 {
            return Err(ClassError::InvalidSpec(format!("eta {eta} must be > 0")));
        }
        for &g in &gammas {
            if !(g > 0.0 && g <= 1.0) {
                return Err(ClassError::InvalidSpec(format!(
                    "grid gamma {g} outside (0,1]"
                )));
            }
        }
        let d = ws.dim();
        let inv_sqrt_gamma = ws.gamma_diag.map(|g| 1.0 / g.sqrt());
        let mut s = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                s[(i, j)] = inv_sqrt_gamma[i] * ws.vmat[(i, j)] * inv_sqrt_gamma[j];
            }
        }
        let eig = SymmetricEigen::new(s);
        let mu = eig.eigenvalues.map(|m| m.max(0.0));
        Ok(RkhsGridEngine {
            ws,
            inv_sqrt_gamma,
            q_t: eig.eigenvectors.transpose(),
            mu,
            gammas,
            eta,
        })
    }

    pub fn workspace(&self) -> &RkhsWorkspace {
        &self.ws
    }

    /// Statistics for every grid gamma, given per-observation weights
    /// (centered scores, optionally multiplier-weighted).
    pub fn stats(&self, weights: &[f64]) -> Vec<f64> {
        let u = self.ws.project(weights);
        let s = u * (self.ws.n() as f64).sqrt();
        let scaled = DVector::from_fn(s.len(), |j, _| s[j] * self.inv_sqrt_gamma[j]);
        let c = &self.q_t * scaled;
        self.gammas
            .iter()
            .map(|&g| {
                let mut acc = 0.0;
                for j in 0..c.len() {
                    acc += c[j] * c[j] / (g + (1.0 - g) * self.mu[j]);
                }
                (acc / self.eta).max(0.0)
            })
            .collect()
    }

    /// Maximizing coefficients `sqrt(n) eta^{-1} M^{-1} U` for one gamma.
    pub fn coefficients(&self, weights: &[f64], gamma: f64, eta: f64) -> Vec<f64> {
        let u = self.ws.project(weights);
        let s = u * (self.ws.n() as f64).sqrt();
        let scaled = DVector::from_fn(s.len(), |j, _| s[j] * self.inv_sqrt_gamma[j]);
        let mut c = &self.q_t * scaled;
        for j in 0..c.len() {
            c[j] /= gamma + (1.0 - gamma) * self.mu[j];
        }
        let back = self.q_t.transpose() * c;
        (0..back.len())
            .map(|j| back[j] * self.inv_sqrt_gamma[j] / eta)
            .collect()
    }
}
