use crate::error::{Error, Result};

/// Max-subtracted log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of `softmax(logits)` against `label`, with its gradient
/// `softmax(logits) - onehot(label)`.
pub fn softmax_xent(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::Label {
            label,
            classes: logits.len(),
        });
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numeric("non-finite logit".into()));
    }
    let logp = log_softmax(logits);
    let loss = (-logp[label]).max(0.0);
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok((loss, grad))
}
