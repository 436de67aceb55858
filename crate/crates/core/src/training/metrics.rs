use serde::{Deserialize, Serialize};

use crate::{Error, Result};

fn check_pair(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::InvalidArgument("metrics need at least one prediction".into()));
    }
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    Ok(())
}

/// Mean absolute error in years.
pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// Root-mean-square error in years.
pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    let ms = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64;
    Ok(ms.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub n: usize,
    /// `prediction − target` per sample, in evaluation order.
    pub residuals: Vec<f64>,
}

impl Metrics {
    pub fn compute(pred: &[f64], target: &[f64]) -> Result<Self> {
        Ok(Self {
            mae: mae(pred, target)?,
            rmse: rmse(pred, target)?,
            n: pred.len(),
            residuals: pred.iter().zip(target).map(|(p, t)| p - t).collect(),
        })
    }

    /// `key=value` lines.
    pub fn to_kv(&self) -> String {
        format!("n={}\nmae={:.4}\nrmse={:.4}\n", self.n, self.mae, self.rmse)
    }
}
