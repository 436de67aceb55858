use crate::{Error, Result, Tensor};

/// Global z-score: zero mean, unit (population) standard deviation.
pub fn zscore_normalize(volume: &Tensor<f32>) -> Result<Tensor<f32>> {
    let n = volume.len() as f64;
    let mean = volume.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = volume
        .data()
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let sd = var.sqrt();
    if !(sd > 1e-12 * mean.abs().max(1.0)) {
        return Err(Error::InvalidArgument(format!(
            "cannot z-score a constant volume (value {mean})"
        )));
    }
    Ok(volume.map(|v| ((v as f64 - mean) / sd) as f32))
}
