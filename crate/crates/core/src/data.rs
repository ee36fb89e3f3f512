//! Canonical data representation, CSV ingestion, and estimand-role validation.
//!
//! Every downstream stage consumes a [`Dataset`]: a list of observations with
//! a tagged estimand. Columns are mapped onto roles (outcome, conditioning,
//! treatment, covariate, secondary outcome) by a [`ColumnSchema`], so the same
//! CSV loader serves all three supported estimands.
//!
//! Values are immutable after construction and safe to share across parallel
//! workers. Missing values are not supported: estimation assumes complete
//! data, so any empty or non-numeric cell is a hard parse error.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use thiserror::Error;

/// Which function-valued parameter a dataset is meant for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimandTag {
    /// Conditional mean of the outcome given the conditioning variable.
    CondMean,
    /// Conditional average treatment effect; requires a binary treatment.
    Cate,
    /// Conditional covariance of outcome and secondary outcome; requires the
    /// secondary outcome column.
    CondCov,
}

impl fmt::Display for EstimandTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EstimandTag::CondMean => write!(f, "cond_mean"),
            EstimandTag::Cate => write!(f, "cate"),
            EstimandTag::CondCov => write!(f, "cond_cov"),
        }
    }
}

/// Role a CSV column plays for a given estimand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Outcome,
    Conditioning,
    Treatment,
    Covariate,
    SecondaryOutcome,
    Ignore,
}

fn role_name(role: Role) -> &'static str {
    match role {
        Role::Outcome => "outcome",
        Role::Conditioning => "conditioning",
        Role::Treatment => "treatment",
        Role::Covariate => "covariate",
        Role::SecondaryOutcome => "secondary_outcome",
        Role::Ignore => "ignore",
    }
}

impl Role {
    pub fn parse(s: &str) -> Option<Role> {
        match s {
            "outcome" => Some(Role::Outcome),
            "conditioning" => Some(Role::Conditioning),
            "treatment" => Some(Role::Treatment),
            "covariate" => Some(Role::Covariate),
            "secondary_outcome" | "secondary" => Some(Role::SecondaryOutcome),
            "ignore" => Some(Role::Ignore),
            _ => None,
        }
    }
}

/// Ordered name → role mapping for CSV ingestion.
///
/// Order matters only for serialization; lookups go by name. Exactly one
/// outcome column and at least one conditioning column are required.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub columns: Vec<(String, Role)>,
}

impl ColumnSchema {
    pub fn new(columns: Vec<(String, Role)>) -> Result<Self, DataError> {
        let schema = ColumnSchema { columns };
        schema.check_roles()?;
        Ok(schema)
    }

    fn check_roles(&self) -> Result<(), DataError> {
        // One column may serve several roles (e.g. conditioning and
        // covariate), but the same (column, role) pair must not repeat.
        let entries: BTreeSet<(&str, &str)> = self
            .columns
            .iter()
            .map(|(n, r)| (n.as_str(), role_name(*r)))
            .collect();
        if entries.len() != self.columns.len() {
            return Err(DataError::RoleMismatch(
                "duplicate column/role pairs in schema".into(),
            ));
        }
        let count = |r: Role| self.columns.iter().filter(|(_, role)| *role == r).count();
        if count(Role::Outcome) != 1 {
            return Err(DataError::RoleMismatch(
                "schema must map exactly one outcome column".into(),
            ));
        }
        if count(Role::Conditioning) == 0 {
            return Err(DataError::RoleMismatch(
                "schema must map at least one conditioning column".into(),
            ));
        }
        if count(Role::Treatment) > 1 || count(Role::SecondaryOutcome) > 1 {
            return Err(DataError::RoleMismatch(
                "at most one treatment and one secondary_outcome column".into(),
            ));
        }
        Ok(())
    }

    fn has(&self, role: Role) -> bool {
        self.columns.iter().any(|(_, r)| *r == role)
    }

    /// Roles required by `tag` beyond outcome + conditioning.
    pub fn check_estimand(&self, tag: EstimandTag) -> Result<(), DataError> {
        match tag {
            EstimandTag::CondMean => Ok(()),
            EstimandTag::Cate if self.has(Role::Treatment) => Ok(()),
            EstimandTag::Cate => Err(DataError::RoleMismatch(
                "estimand cate requires a treatment column".into(),
            )),
            EstimandTag::CondCov if self.has(Role::SecondaryOutcome) => Ok(()),
            EstimandTag::CondCov => Err(DataError::RoleMismatch(
                "estimand cond_cov requires a secondary_outcome column".into(),
            )),
        }
    }
}

/// One data row. Optional fields must have the same shape across a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub outcome: f64,
    pub conditioning: Vec<f64>,
    pub treatment: Option<u8>,
    pub covariates: Option<Vec<f64>>,
    pub secondary_outcome: Option<f64>,
}

/// Immutable sample of observations tagged with its estimand.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub observations: Vec<Observation>,
    pub estimand: EstimandTag,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing column '{0}' in CSV header")]
    MissingColumn(String),
    #[error("row {row}, column '{column}': cannot parse '{value}' as a number")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: treatment value {value} is not 0 or 1")]
    NonBinaryTreatment { row: usize, value: f64 },
    #[error("dataset has {n} rows; at least 2 are required")]
    EmptyData { n: usize },
    #[error("role mismatch: {0}")]
    RoleMismatch(String),
    #[error("row {row}: {field} is not finite")]
    NonFinite { row: usize, field: String },
    #[error("row {row}: optional-field shape differs from row 0")]
    InconsistentShape { row: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.observations.len()
    }

    /// Outcome column as a vector.
    pub fn outcomes(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.outcome).collect()
    }

    /// One component of the conditioning vector across observations.
    pub fn conditioning_component(&self, index: usize) -> Vec<f64> {
        self.observations
            .iter()
            .map(|o| o.conditioning[index])
            .collect()
    }

    pub fn conditioning_dim(&self) -> usize {
        self.observations
            .first()
            .map_or(0, |o| o.conditioning.len())
    }

    /// Covariate columns (one inner vector per column). Falls back to the
    /// conditioning columns when no covariate role was mapped, since the
    /// conditioning variable is then the full adjustment set.
    pub fn covariate_columns(&self) -> Vec<Vec<f64>> {
        let use_covariates = self
            .observations
            .first()
            .is_some_and(|o| o.covariates.is_some());
        let dim = if use_covariates {
            self.observations[0].covariates.as_ref().unwrap().len()
        } else {
            self.conditioning_dim()
        };
        (0..dim)
            .map(|j| {
                self.observations
                    .iter()
                    .map(|o| {
                        if use_covariates {
                            o.covariates.as_ref().unwrap()[j]
                        } else {
                            o.conditioning[j]
                        }
                    })
                    .collect()
            })
            .collect()
    }

    pub fn treatments(&self) -> Option<Vec<u8>> {
        self.observations.iter().map(|o| o.treatment).collect()
    }

    pub fn secondary_outcomes(&self) -> Option<Vec<f64>> {
        self.observations.iter().map(|o| o.secondary_outcome).collect()
    }

    /// Check every type invariant, naming the first offending row.
    ///
    /// Idempotent and side-effect free; a valid dataset passes unchanged.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n() < 2 {
            return Err(DataError::EmptyData { n: self.n() });
        }
        let first = &self.observations[0];
        let shape = (
            first.treatment.is_some(),
            first.covariates.is_some(),
            first.covariates.as_ref().map_or(0, |c| c.len()),
            first.secondary_outcome.is_some(),
            first.conditioning.len(),
        );
        for (row, obs) in self.observations.iter().enumerate() {
            if !obs.outcome.is_finite() {
                return Err(DataError::NonFinite {
                    row,
                    field: "outcome".into(),
                });
            }
            if obs.conditioning.is_empty() {
                return Err(DataError::RoleMismatch(format!(
                    "row {row}: empty conditioning vector"
                )));
            }
            if obs.conditioning.iter().any(|v| !v.is_finite()) {
                return Err(DataError::NonFinite {
                    row,
                    field: "conditioning".into(),
                });
            }
            if let Some(t) = obs.treatment {
                if t > 1 {
                    return Err(DataError::NonBinaryTreatment {
                        row,
                        value: t as f64,
                    });
                }
            }
            if let Some(c) = &obs.covariates {
                if c.iter().any(|v| !v.is_finite()) {
                    return Err(DataError::NonFinite {
                        row,
                        field: "covariates".into(),
                    });
                }
            }
            if let Some(s) = obs.secondary_outcome {
                if !s.is_finite() {
                    return Err(DataError::NonFinite {
                        row,
                        field: "secondary_outcome".into(),
                    });
                }
            }
            let obs_shape = (
                obs.treatment.is_some(),
                obs.covariates.is_some(),
                obs.covariates.as_ref().map_or(0, |c| c.len()),
                obs.secondary_outcome.is_some(),
                obs.conditioning.len(),
            );
            if obs_shape != shape {
                return Err(DataError::InconsistentShape { row });
            }
        }
        // Shape consistent with the estimand tag.
        match self.estimand {
            EstimandTag::CondMean => {}
            EstimandTag::Cate => {
                if first.treatment.is_none() {
                    return Err(DataError::RoleMismatch(
                        "estimand cate requires treatment values".into(),
                    ));
                }
            }
            EstimandTag::CondCov => {
                if first.secondary_outcome.is_none() {
                    return Err(DataError::RoleMismatch(
                        "estimand cond_cov requires secondary_outcome values".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Load a UTF-8, comma-delimited, RFC-4180 CSV with a header row.
///
/// Column order is irrelevant; the header must contain every schema name.
/// Values parse as decimal reals (decimal point, no locale). Treatment cells
/// must be exactly 0 or 1.
pub fn load_csv<P: AsRef<Path>>(
    path: P,
    schema: &ColumnSchema,
    estimand: EstimandTag,
) -> Result<Dataset, DataError> {
    schema.check_roles()?;
    schema.check_estimand(estimand)?;

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())?;
    let header = reader.headers()?.clone();
    let mut col_index = Vec::with_capacity(schema.columns.len());
    for (name, role) in &schema.columns {
        if *role == Role::Ignore {
            continue;
        }
        let idx = header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.clone()))?;
        col_index.push((idx, name.clone(), *role));
    }

    let mut observations = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let mut outcome = f64::NAN;
        let mut conditioning = Vec::new();
        let mut treatment = None;
        let mut covariates: Vec<f64> = Vec::new();
        let mut secondary = None;
        let mut have_covariates = false;
        for (idx, name, role) in &col_index {
            let raw = record.get(*idx).unwrap_or("");
            let value: f64 = raw.trim().parse().map_err(|_| DataError::Parse {
                row,
                column: name.clone(),
                value: raw.to_string(),
            })?;
            match role {
                Role::Outcome => outcome = value,
                Role::Conditioning => conditioning.push(value),
                Role::Treatment => {
                    if value == 0.0 {
                        treatment = Some(0);
                    } else if value == 1.0 {
                        treatment = Some(1);
                    } else {
                        return Err(DataError::NonBinaryTreatment { row, value });
                    }
                }
                Role::Covariate => {
                    have_covariates = true;
                    covariates.push(value);
                }
                Role::SecondaryOutcome => secondary = Some(value),
                Role::Ignore => {}
            }
        }
        observations.push(Observation {
            outcome,
            conditioning,
            treatment,
            covariates: if have_covariates { Some(covariates) } else { None },
            secondary_outcome: secondary,
        });
    }

    if observations.len() < 2 {
        return Err(DataError::EmptyData {
            n: observations.len(),
        });
    }
    let dataset = Dataset {
        observations,
        estimand,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Serialize a dataset back to CSV in schema column order.
///
/// Floats are written with Rust's shortest round-trip formatting, so
/// load → write → load is a fixed point on the parsed values.
pub fn write_csv<W: std::io::Write>(
    dataset: &Dataset,
    schema: &ColumnSchema,
    writer: W,
) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    let names: Vec<&str> = schema
        .columns
        .iter()
        .filter(|(_, r)| *r != Role::Ignore)
        .map(|(n, _)| n.as_str())
        .collect();
    w.write_record(&names)?;
    for obs in &dataset.observations {
        let mut cond_i = 0;
        let mut cov_i = 0;
        let mut record: Vec<String> = Vec::with_capacity(names.len());
        for (_, role) in schema.columns.iter().filter(|(_, r)| *r != Role::Ignore) {
            let v = match role {
                Role::Outcome => obs.outcome,
                Role::Conditioning => {
                    cond_i += 1;
                    obs.conditioning[cond_i - 1]
                }
                Role::Treatment => obs.treatment.map_or(f64::NAN, f64::from),
                Role::Covariate => {
                    cov_i += 1;
                    obs.covariates.as_ref().map_or(f64::NAN, |c| c[cov_i - 1])
                }
                Role::SecondaryOutcome => obs.secondary_outcome.unwrap_or(f64::NAN),
                Role::Ignore => unreachable!(),
            };
            record.push(format!("{v}"));
        }
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}
