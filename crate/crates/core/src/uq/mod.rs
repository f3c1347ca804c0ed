//! Ensemble uncertainty decomposition and uncertainty-quality metrics.

mod calibration;
mod confidence;
mod io;
mod normal;
mod rank;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::nll_value;

pub use calibration::{
    calibrated_nll, calibration_curve, miscalibration_area, recalibrate, CalibrationCurve,
    CalibrationParams, RecalibrationResult, LEVELS,
};
pub use confidence::{confidence_curve, ConfidenceCurve};
pub use io::{
    read_predictions_csv, write_calibration_csv, write_confidence_csv, write_predictions_csv,
    write_summary_csv,
};
pub use normal::{inverse_normal_cdf, normal_cdf};
pub use rank::{average_ranks, spearman};

#[derive(Debug, Error)]
pub enum UqError {
    #[error("prediction set has no members")]
    NoMembers,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("variance must be positive")]
    NonPositiveVariance,
    #[error("validation split is empty")]
    EmptyValidation,
    #[error("input is constant; the statistic is undefined")]
    DegenerateInput,
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One model's predictions over a split, in target units.
#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub name: String,
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
}

/// Predictions of K models over one split.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    /// Row identifiers (dataset indices).
    pub ids: Vec<usize>,
    pub y: Vec<f64>,
    pub members: Vec<Member>,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn validate(&self) -> Result<(), UqError> {
        if self.members.is_empty() {
            return Err(UqError::NoMembers);
        }
        let n = self.ids.len();
        if self.y.len() != n {
            return Err(UqError::LengthMismatch(format!("{n} ids, {} targets", self.y.len())));
        }
        for m in &self.members {
            if m.mu.len() != n || m.var.len() != n {
                return Err(UqError::LengthMismatch(format!(
                    "member {} has {} means and {} variances for {n} rows",
                    m.name,
                    m.mu.len(),
                    m.var.len()
                )));
            }
            if m.var.iter().any(|&v| !(v > 0.0)) {
                return Err(UqError::NonPositiveVariance);
            }
        }
        Ok(())
    }
}

/// Per-sample ensemble mean and variance split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub mu: Vec<f64>,
    pub aleatoric: Vec<f64>,
    pub epistemic: Vec<f64>,
    pub total: Vec<f64>,
}

impl EnsembleSummary {
    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    /// Scales standard deviations by `a` (variances by `a^2`).
    pub fn scaled(&self, a: f64) -> EnsembleSummary {
        let a2 = a * a;
        let aleatoric: Vec<f64> = self.aleatoric.iter().map(|v| v * a2).collect();
        let epistemic: Vec<f64> = self.epistemic.iter().map(|v| v * a2).collect();
        let total = aleatoric.iter().zip(&epistemic).map(|(x, y)| x + y).collect();
        EnsembleSummary {
            mu: self.mu.clone(),
            aleatoric,
            epistemic,
            total,
        }
    }

    pub fn std(&self) -> Vec<f64> {
        self.total.iter().map(|v| v.sqrt()).collect()
    }
}

/// Mixture mean, mean predicted variance (aleatoric) and the unbiased
/// variance of member means (epistemic, zero for a single member).
pub fn ensemble_summary(preds: &PredictionSet) -> Result<EnsembleSummary, UqError> {
    preds.validate()?;
    let k = preds.members.len();
    let n = preds.len();
    // Offsets from the first member keep identical members exact.
    let first = &preds.members[0];
    let mut mu = vec![0.0; n];
    let mut aleatoric = vec![0.0; n];
    for m in &preds.members[1..] {
        for i in 0..n {
            mu[i] += m.mu[i] - first.mu[i];
            aleatoric[i] += m.var[i] - first.var[i];
        }
    }
    let kf = k as f64;
    for i in 0..n {
        mu[i] = first.mu[i] + mu[i] / kf;
        aleatoric[i] = first.var[i] + aleatoric[i] / kf;
    }
    let mut epistemic = vec![0.0; n];
    if k > 1 {
        for m in &preds.members {
            for i in 0..n {
                epistemic[i] += (m.mu[i] - mu[i]).powi(2);
            }
        }
        epistemic.iter_mut().for_each(|v| *v /= kf - 1.0);
    }
    let total = aleatoric.iter().zip(&epistemic).map(|(a, e)| a + e).collect();
    Ok(EnsembleSummary {
        mu,
        aleatoric,
        epistemic,
        total,
    })
}

fn check_lengths(mu: &[f64], var: &[f64], y: &[f64]) -> Result<(), UqError> {
    if mu.len() != y.len() || var.len() != y.len() {
        return Err(UqError::LengthMismatch(format!(
            "{} means, {} variances, {} targets",
            mu.len(),
            var.len(),
            y.len()
        )));
    }
    Ok(())
}

fn check_variance(var: &[f64]) -> Result<(), UqError> {
    if var.iter().any(|&v| !(v > 0.0)) {
        Err(UqError::NonPositiveVariance)
    } else {
        Ok(())
    }
}

/// Gaussian NLL of ensemble predictions; the same formula as the training loss.
pub fn metric_nll(mu: &[f64], var: &[f64], y: &[f64]) -> Result<f64, UqError> {
    check_lengths(mu, var, y)?;
    if y.is_empty() {
        return Err(UqError::LengthMismatch("no samples".into()));
    }
    check_variance(var)?;
    Ok(nll_value(mu, var, y))
}

/// Fractions of samples with `|mu - y|` within one and two standard deviations.
pub fn coverage(mu: &[f64], var: &[f64], y: &[f64]) -> Result<(f64, f64), UqError> {
    check_lengths(mu, var, y)?;
    let n = y.len() as f64;
    let (mut c1, mut c2) = (0usize, 0usize);
    for i in 0..y.len() {
        let e = (mu[i] - y[i]).abs();
        let s = var[i].sqrt();
        c1 += (e <= s) as usize;
        c2 += (e <= 2.0 * s) as usize;
    }
    Ok((c1 as f64 / n, c2 as f64 / n))
}

pub fn mae(mu: &[f64], y: &[f64]) -> f64 {
    mu.iter().zip(y).map(|(m, t)| (m - t).abs()).sum::<f64>() / y.len() as f64
}

pub fn rmse(mu: &[f64], y: &[f64]) -> f64 {
    (mu.iter().zip(y).map(|(m, t)| (m - t).powi(2)).sum::<f64>() / y.len() as f64).sqrt()
}

/// Metrics for one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub n: usize,
    pub members: usize,
    pub mae: f64,
    pub rmse: f64,
    pub nll: f64,
    pub cnll: Option<f64>,
    pub a: Option<f64>,
    pub b: Option<f64>,
    /// `None` when errors or uncertainties are constant.
    pub spearman: Option<f64>,
    pub mca: f64,
    pub ece: f64,
    pub mce: f64,
    pub auco: f64,
    pub cov1: f64,
    pub cov2: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub recal_a: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub recal_mca: Option<f64>,
}

/// Everything but the calibration-dependent fields.
pub fn split_metrics(s: &EnsembleSummary, y: &[f64], members: usize) -> Result<SplitReport, UqError> {
    let nll = metric_nll(&s.mu, &s.total, y)?;
    let curve = calibration_curve(&s.mu, &s.total, y)?;
    let conf = confidence_curve(&s.mu, &s.total, y)?;
    let (cov1, cov2) = coverage(&s.mu, &s.total, y)?;
    let errors: Vec<f64> = s.mu.iter().zip(y).map(|(m, t)| (m - t).abs()).collect();
    let spearman = match spearman(&errors, &s.total) {
        Ok(r) => Some(r),
        Err(UqError::DegenerateInput) => None,
        Err(e) => return Err(e),
    };
    Ok(SplitReport {
        n: y.len(),
        members,
        mae: mae(&s.mu, y),
        rmse: rmse(&s.mu, y),
        nll,
        cnll: None,
        a: None,
        b: None,
        spearman,
        mca: curve.mca,
        ece: curve.ece,
        mce: curve.mce,
        auco: conf.auco,
        cov1,
        cov2,
        recal_a: None,
        recal_mca: None,
    })
}

#[cfg(test)]
mod tests;
