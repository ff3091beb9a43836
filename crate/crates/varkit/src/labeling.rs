//! Violation-anchored risk labeling: the threshold c is the least-negative
//! return among VaR violations over a horizon, and days with r_t <= c are
//! labeled high-risk.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("no VaR violations in the horizon; widen H or raise alpha")]
    NoViolations,
    #[error("only one class present in labels")]
    SingleClass,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("horizon {horizon} exceeds available history {len}")]
    HorizonTooLong { horizon: usize, len: usize },
}

/// Horizon and VaR level for threshold selection.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ThresholdConfig {
    pub horizon: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiskLabelSeries {
    pub labels: Vec<u8>,
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ClassRatio {
    pub rho: f64,
}

/// c = max{ r_t | r_t < VaR_t } over the trailing `horizon` observations.
pub fn select_threshold(
    returns: &[f64],
    var: &[f64],
    config: &ThresholdConfig,
) -> Result<f64, LabelError> {
    if returns.len() != var.len() {
        return Err(LabelError::LengthMismatch {
            left: returns.len(),
            right: var.len(),
        });
    }
    if config.horizon > returns.len() {
        return Err(LabelError::HorizonTooLong {
            horizon: config.horizon,
            len: returns.len(),
        });
    }
    let start = returns.len() - config.horizon;
    returns[start..]
        .iter()
        .zip(&var[start..])
        .filter(|(r, v)| r < v)
        .map(|(r, _)| *r)
        .fold(None, |acc: Option<f64>, r| {
            Some(acc.map_or(r, |a| a.max(r)))
        })
        .ok_or(LabelError::NoViolations)
}

/// y_t = 1{r_t <= c}; ties at the threshold are high-risk.
pub fn label_returns(returns: &[f64], threshold: f64) -> RiskLabelSeries {
    RiskLabelSeries {
        labels: returns.iter().map(|&r| u8::from(r <= threshold)).collect(),
        threshold,
    }
}

/// rho = minority count / majority count, in (0, 1].
pub fn class_ratio(labels: &[u8]) -> Result<ClassRatio, LabelError> {
    let ones = labels.iter().filter(|&&y| y == 1).count();
    let zeros = labels.len() - ones;
    if ones == 0 || zeros == 0 {
        return Err(LabelError::SingleClass);
    }
    Ok(ClassRatio {
        rho: ones.min(zeros) as f64 / ones.max(zeros) as f64,
    })
}
