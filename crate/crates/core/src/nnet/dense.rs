use rand::Rng;

use super::matrix::{glorot_bound, Matrix};
use crate::error::{Error, Result};

/// Affine map `W x + b` with `W` of shape `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl DenseLayer {
    pub fn new(w: Matrix, b: Vec<f64>) -> Result<Self> {
        if b.len() != w.rows() {
            return Err(Error::Shape(format!(
                "bias of length {} for {} outputs",
                b.len(),
                w.rows()
            )));
        }
        Ok(DenseLayer { w, b })
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        DenseLayer {
            w: Matrix::zeros(outputs, inputs),
            b: vec![0.0; outputs],
        }
    }

    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        DenseLayer {
            w: Matrix::uniform(outputs, inputs, glorot_bound(inputs, outputs), rng),
            b: vec![0.0; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.w.cols()
    }

    pub fn outputs(&self) -> usize {
        self.w.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.inputs() {
            return Err(Error::Shape(format!(
                "dense layer expects {} inputs, got {}",
                self.inputs(),
                x.len()
            )));
        }
        let mut out = self.b.clone();
        self.w.matvec_acc(x, &mut out);
        Ok(out)
    }

    /// Accumulates parameter gradients for upstream gradient `dy` at input `x`
    /// and optionally the input gradient.
    pub(crate) fn backward_acc(
        &self,
        x: &[f64],
        dy: &[f64],
        grad: &mut DenseLayer,
        dx: Option<&mut [f64]>,
    ) {
        grad.w.outer_acc(dy, x);
        for (gb, &d) in grad.b.iter_mut().zip(dy) {
            *gb += d;
        }
        if let Some(dx) = dx {
            self.w.matvec_t_acc(dy, dx);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_passes_through() {
        let l = DenseLayer::new(Matrix::identity(2), vec![0.0, 0.0]).unwrap();
        assert_eq!(l.forward(&[3.0, -1.0]).unwrap(), vec![3.0, -1.0]);
    }

    #[test]
    fn hand_arithmetic() {
        let l = DenseLayer::new(Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap(), vec![0.5]).unwrap();
        assert_eq!(l.forward(&[1.0, 1.0]).unwrap(), vec![3.5]);
    }

    #[test]
    fn wrong_width_is_shape_error() {
        let l = DenseLayer::zeros(2, 2);
        assert!(matches!(l.forward(&[1.0, 2.0, 3.0]), Err(Error::Shape(_))));
    }
}
