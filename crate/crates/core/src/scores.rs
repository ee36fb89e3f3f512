//! Per-observation influence scores for each supported estimand.
//!
//! A [`ScoreSet`] carries the conditioning values `v_i`, the uncentered
//! influence components `phi_i`, a smoothed diagnostic curve `psi_v`, and the
//! marginal estimate `theta_hat`. Downstream statistics only ever combine
//! `phi` with mean-centered weights, so adding any constant to all `phi_i`
//! leaves every test statistic unchanged; `theta_hat` records the marginal
//! level separately.
//!
//! Score definitions per estimand:
//! - conditional mean: `phi_i = y_i - mean(y)` (no nuisance enters the score);
//! - treatment effect: the augmented inverse-propensity contrast
//!   `mu1(x_i) - mu0(x_i) + a(t_i, x_i) * (y_i - mu_{t_i}(x_i))` with the
//!   inverse-propensity weight `a(t, x) = t/p(x) - (1-t)/(1-p(x))`;
//! - conditional covariance: the residual product
//!   `(y_i - mu_y(z_i)) * (x_i - mu_x(z_i))`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, EstimandTag};
use crate::smooth::{
    default_num_knots, default_penalty_grid, fit_additive, fit_propensity, fit_spline,
    select_penalty_gcv, NuisanceError, PropensityKind, PropensityModel, RegressionFit,
};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("estimand mismatch: expected {expected}, dataset is {actual}")]
    EstimandMismatch { expected: String, actual: String },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("conditioning index {index} out of range (dimension {dim})")]
    BadConditioningIndex { index: usize, dim: usize },
    #[error(transparent)]
    Nuisance(#[from] NuisanceError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

/// Influence components and fitted diagnostics for one dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreSet {
    /// Conditioning values (univariate after projection).
    pub v: Vec<f64>,
    /// Uncentered influence components.
    pub phi: Vec<f64>,
    /// Smoothed estimate of the function-valued parameter at each `v_i`
    /// (diagnostic only; never enters the statistics).
    pub psi_v: Vec<f64>,
    /// Estimate of the marginal parameter.
    pub theta_hat: f64,
}

impl ScoreSet {
    pub fn n(&self) -> usize {
        self.phi.len()
    }

    pub fn validate(&self) -> Result<(), ScoreError> {
        if self.v.len() != self.phi.len() {
            return Err(ScoreError::LengthMismatch(self.v.len(), self.phi.len()));
        }
        if self.psi_v.len() != self.phi.len() {
            return Err(ScoreError::LengthMismatch(self.psi_v.len(), self.phi.len()));
        }
        Ok(())
    }
}

/// Settings controlling nuisance estimation and the conditioning projection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimandConfig {
    pub estimand: EstimandTag,
    /// Knot count for spline fits; `None` uses `min(10, n/10 + 2)`.
    pub num_knots: Option<usize>,
    /// Penalty grid for GCV selection.
    pub penalty_grid: Vec<f64>,
    pub propensity: PropensityKind,
    /// Which component of the conditioning vector indexes the test.
    pub conditioning_index: usize,
}

impl EstimandConfig {
    pub fn new(estimand: EstimandTag) -> Self {
        EstimandConfig {
            estimand,
            num_knots: None,
            penalty_grid: default_penalty_grid(),
            propensity: PropensityKind::KnownConstant(0.5),
            conditioning_index: 0,
        }
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn projected_conditioning(dataset: &Dataset, index: usize) -> Result<Vec<f64>, ScoreError> {
    let dim = dataset.conditioning_dim();
    if index >= dim {
        return Err(ScoreError::BadConditioningIndex { index, dim });
    }
    Ok(dataset.conditioning_component(index))
}

/// Smooth `y` on `x` for the diagnostic curve; falls back to the mean if the
/// design is degenerate (e.g. constant conditioning).
fn smooth_or_mean(x: &[f64], y: &[f64], config: &EstimandConfig) -> Vec<f64> {
    let k = config.num_knots.unwrap_or_else(|| default_num_knots(x.len()));
    let fitted = select_penalty_gcv(x, y, k, &config.penalty_grid)
        .and_then(|lambda| fit_spline(x, y, k, lambda))
        .map(|fit| fit.predict(x));
    fitted.unwrap_or_else(|_| vec![mean(y); y.len()])
}

/// Scores for the conditional-mean estimand: `phi_i = y_i - mean(y)`.
///
/// The influence component collapses so no nuisance estimate enters `phi`;
/// `psi_v` is a smoothed regression of the outcome on `v`, kept for reports.
pub fn scores_condmean(dataset: &Dataset, config: &EstimandConfig) -> Result<ScoreSet, ScoreError> {
    if dataset.estimand != EstimandTag::CondMean {
        return Err(ScoreError::EstimandMismatch {
            expected: "cond_mean".into(),
            actual: dataset.estimand.to_string(),
        });
    }
    dataset.validate()?;
    let v = projected_conditioning(dataset, config.conditioning_index)?;
    let y = dataset.outcomes();
    let y_bar = mean(&y);
    let phi: Vec<f64> = y.iter().map(|yi| yi - y_bar).collect();
    let psi_v = smooth_or_mean(&v, &y, config);
    Ok(ScoreSet {
        v,
        phi,
        psi_v,
        theta_hat: y_bar,
    })
}

/// Scores for the treatment-effect estimand from arm-specific outcome fits
/// and a propensity model.
pub fn scores_cate(
    dataset: &Dataset,
    mu_treated: &RegressionFit,
    mu_control: &RegressionFit,
    propensity: &PropensityModel,
    config: &EstimandConfig,
) -> Result<ScoreSet, ScoreError> {
    if dataset.estimand != EstimandTag::Cate {
        return Err(ScoreError::EstimandMismatch {
            expected: "cate".into(),
            actual: dataset.estimand.to_string(),
        });
    }
    dataset.validate()?;
    let v = projected_conditioning(dataset, config.conditioning_index)?;
    let y = dataset.outcomes();
    let t = dataset.treatments().expect("validated cate dataset");
    let columns = dataset.covariate_columns();
    let mu1 = mu_treated.predict_columns(&columns);
    let mu0 = mu_control.predict_columns(&columns);
    let pi = propensity.predict_columns(&columns);

    let n = y.len();
    let mut phi = Vec::with_capacity(n);
    let mut contrast = Vec::with_capacity(n);
    for i in 0..n {
        let ti = t[i] as f64;
        let alpha = ti / pi[i] - (1.0 - ti) / (1.0 - pi[i]);
        let mu_own = if t[i] == 1 { mu1[i] } else { mu0[i] };
        let plugin = mu1[i] - mu0[i];
        contrast.push(plugin);
        phi.push(plugin + alpha * (y[i] - mu_own));
    }
    let theta_hat = mean(&phi);
    let psi_v = smooth_or_mean(&v, &contrast, config);
    Ok(ScoreSet {
        v,
        phi,
        psi_v,
        theta_hat,
    })
}

/// Scores for the conditional-covariance estimand from the two conditional
/// mean fits: `phi_i = (y_i - mu_y(z_i)) * (x_i - mu_x(z_i))`.
pub fn scores_condcov(
    dataset: &Dataset,
    mu_y: &RegressionFit,
    mu_x: &RegressionFit,
    config: &EstimandConfig,
) -> Result<ScoreSet, ScoreError> {
    if dataset.estimand != EstimandTag::CondCov {
        return Err(ScoreError::EstimandMismatch {
            expected: "cond_cov".into(),
            actual: dataset.estimand.to_string(),
        });
    }
    dataset.validate()?;
    let v = projected_conditioning(dataset, config.conditioning_index)?;
    let y = dataset.outcomes();
    let x = dataset
        .secondary_outcomes()
        .expect("validated cond_cov dataset");
    let z_columns: Vec<Vec<f64>> = (0..dataset.conditioning_dim())
        .map(|j| dataset.conditioning_component(j))
        .collect();
    let my = mu_y.predict_columns(&z_columns);
    let mx = mu_x.predict_columns(&z_columns);

    let phi: Vec<f64> = (0..y.len())
        .map(|i| (y[i] - my[i]) * (x[i] - mx[i]))
        .collect();
    let theta_hat = mean(&phi);
    let psi_v = smooth_or_mean(&v, &phi, config);
    Ok(ScoreSet {
        v,
        phi,
        psi_v,
        theta_hat,
    })
}

/// Replace `phi` by `phi - mean(phi)`.
///
/// The subtraction repeats (at most a few times) until the residual mean is
/// below `1e-13 * max|phi|`; an already-centered input is returned bitwise
/// unchanged, so centering is idempotent.
pub fn center_scores(mut scores: ScoreSet) -> ScoreSet {
    for _ in 0..4 {
        let m = mean(&scores.phi);
        let scale = scores.phi.iter().fold(0.0_f64, |acc, p| acc.max(p.abs()));
        if m == 0.0 || m.abs() <= 1e-13 * scale {
            break;
        }
        for p in &mut scores.phi {
            *p -= m;
        }
    }
    scores
}

/// One-step estimate of the weighted mean contrast for a fixed weight
/// function evaluated at the conditioning values:
/// `n^{-1} sum_i phi_i * (h_i - mean(h))`.
pub fn one_step_contrast(scores: &ScoreSet, h: &[f64]) -> Result<f64, ScoreError> {
    if h.len() != scores.phi.len() {
        return Err(ScoreError::LengthMismatch(h.len(), scores.phi.len()));
    }
    let h_bar = mean(h);
    let n = h.len() as f64;
    Ok(scores
        .phi
        .iter()
        .zip(h)
        .map(|(p, hi)| p * (hi - h_bar))
        .sum::<f64>()
        / n)
}

/// Fit all nuisances dictated by the config and produce scores.
pub fn compute_scores(dataset: &Dataset, config: &EstimandConfig) -> Result<ScoreSet, ScoreError> {
    dataset.validate()?;
    match config.estimand {
        EstimandTag::CondMean => scores_condmean(dataset, config),
        EstimandTag::Cate => {
            let t = dataset.treatments().ok_or_else(|| ScoreError::EstimandMismatch {
                expected: "cate".into(),
                actual: "dataset without treatment".into(),
            })?;
            let y = dataset.outcomes();
            let columns = dataset.covariate_columns();
            let split = |keep: u8| -> (Vec<Vec<f64>>, Vec<f64>) {
                let idx: Vec<usize> = (0..y.len()).filter(|&i| t[i] == keep).collect();
                let cols = columns
                    .iter()
                    .map(|c| idx.iter().map(|&i| c[i]).collect())
                    .collect();
                let ys = idx.iter().map(|&i| y[i]).collect();
                (cols, ys)
            };
            let (c1, y1) = split(1);
            let (c0, y0) = split(0);
            let knots = config.num_knots;
            let mu1 = fit_additive(&c1, &y1, knots, &config.penalty_grid)?;
            let mu0 = fit_additive(&c0, &y0, knots, &config.penalty_grid)?;
            let pi = fit_propensity(dataset, config.propensity)?;
            scores_cate(dataset, &mu1, &mu0, &pi, config)
        }
        EstimandTag::CondCov => {
            let z_columns: Vec<Vec<f64>> = (0..dataset.conditioning_dim())
                .map(|j| dataset.conditioning_component(j))
                .collect();
            let y = dataset.outcomes();
            let x = dataset
                .secondary_outcomes()
                .ok_or_else(|| ScoreError::EstimandMismatch {
                    expected: "cond_cov".into(),
                    actual: "dataset without secondary_outcome".into(),
                })?;
            let knots = config.num_knots;
            let mu_y = fit_additive(&z_columns, &y, knots, &config.penalty_grid)?;
            let mu_x = fit_additive(&z_columns, &x, knots, &config.penalty_grid)?;
            scores_condcov(dataset, &mu_y, &mu_x, config)
        }
    }
}
