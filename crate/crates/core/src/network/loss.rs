use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean cross-entropy of softmax(logits) against integer labels, and its
/// gradient with respect to the logits.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    let (batch, classes) = logits.dims2()?;
    if labels.len() != batch {
        return Err(Error::Dimension(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Parameter(format!(
            "label {bad} outside [0, {classes})"
        )));
    }
    let mut grad = vec![0.0f32; batch * classes];
    let mut total = 0.0f64;
    let inv_batch = 1.0 / batch as f32;
    for (b, &label) in labels.iter().enumerate() {
        let row = &logits.data()[b * classes..(b + 1) * classes];
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f32 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_sum = sum.ln();
        total += f64::from(log_sum - (row[label] - max));
        let g = &mut grad[b * classes..(b + 1) * classes];
        for (gi, &v) in g.iter_mut().zip(row) {
            *gi = (v - max).exp() / sum * inv_batch;
        }
        g[label] -= inv_batch;
    }
    let loss = (total / batch as f64) as f32;
    if !loss.is_finite() {
        return Err(Error::Numerical("non-finite cross-entropy loss".into()));
    }
    Ok((loss, Tensor::new(vec![batch, classes], grad)?))
}
