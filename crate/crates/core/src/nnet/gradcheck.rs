use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::stack::{backprop_window, DropoutSpec, LayerStack, Mode};
use crate::batching::{CarryMask, CarryStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, 1e-12)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-12);
    (analytic - numeric).abs() / denom
}

/// Compares analytic window gradients with central differences.
///
/// `max_coords` caps the coordinates checked per tensor (sampled with
/// `sample_seed`); `None` checks every coordinate.
#[allow(clippy::too_many_arguments)]
pub fn grad_check(
    stack: &LayerStack,
    inputs: &[&[f64]],
    labels: &[usize],
    loss_mask: &[bool],
    carry: Option<(&CarryMask, &CarryStore)>,
    dropout: &DropoutSpec,
    epsilon: f64,
    tolerance: f64,
    max_coords: Option<usize>,
    sample_seed: u64,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::Config(format!("epsilon {epsilon} outside [1e-7, 1e-3]")));
    }
    let analytic = backprop_window(stack, inputs, labels, loss_mask, carry, dropout, Mode::Train)?;
    let loss_at = |s: &LayerStack| -> Result<f64> {
        Ok(backprop_window(s, inputs, labels, loss_mask, carry, dropout, Mode::Train)?.loss)
    };
    let grad_tensors = analytic.grads.tensors();
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let mut probe = stack.clone();
    let mut tensors = Vec::with_capacity(grad_tensors.len());
    for (idx, (name, _, grad)) in grad_tensors.iter().enumerate() {
        let coords: Vec<usize> = match max_coords {
            Some(cap) if cap < grad.len() => sample(&mut rng, grad.len(), cap).into_vec(),
            _ => (0..grad.len()).collect(),
        };
        let mut worst: f64 = 0.0;
        for &c in &coords {
            let orig = probe.tensors_mut()[idx].1[c];
            probe.tensors_mut()[idx].1[c] = orig + epsilon;
            let up = loss_at(&probe)?;
            probe.tensors_mut()[idx].1[c] = orig - epsilon;
            let down = loss_at(&probe)?;
            probe.tensors_mut()[idx].1[c] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            worst = worst.max(relative_error(grad[c], numeric));
        }
        tensors.push(TensorCheck {
            name: name.clone(),
            coords_checked: coords.len(),
            max_rel_error: worst,
        });
    }
    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        epsilon,
        tolerance,
        passed: max_rel_error < tolerance,
        tensors,
        max_rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{DenseLayer, StackShape};

    #[test]
    fn zero_gradient_has_zero_error() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(1.0, 1.0 + 1e-9) < 1e-8);
    }

    #[test]
    fn dense_softmax_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stack = LayerStack::init(
            StackShape {
                input: 3,
                embed: None,
                hidden: None,
                classes: 2,
            },
            &mut rng,
        )
        .unwrap();
        let x = [[0.3, -1.2, 0.8], [1.1, 0.4, -0.5]];
        let rows: Vec<&[f64]> = x.iter().map(|r| &r[..]).collect();
        let report = grad_check(
            &stack,
            &rows,
            &[0, 1],
            &[true, true],
            None,
            &DropoutSpec::none(),
            1e-5,
            1e-7,
            None,
            0,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn unused_parameters_report_zero() {
        // input column 1 is always zero, so W[.,1] has exactly zero gradient
        let mut head = DenseLayer::zeros(2, 2);
        head.w.set(0, 0, 0.4);
        let stack = LayerStack {
            embed: None,
            lstm: None,
            head,
        };
        let x = [[1.0, 0.0]];
        let rows: Vec<&[f64]> = x.iter().map(|r| &r[..]).collect();
        let report = grad_check(
            &stack,
            &rows,
            &[1],
            &[true],
            None,
            &DropoutSpec::none(),
            1e-5,
            1e-7,
            None,
            0,
        )
        .unwrap();
        assert!(report.passed);
        assert_eq!(report.tensors.len(), 2);
    }
}
