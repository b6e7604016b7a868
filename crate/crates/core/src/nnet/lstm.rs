use rand::Rng;

use super::matrix::{glorot_bound, Matrix};
use crate::error::{Error, Result};

/// Gate order used for every per-gate array in [`LstmLayer`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Input = 0,
    Forget = 1,
    Output = 2,
    Candidate = 3,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::Input, Gate::Forget, Gate::Output, Gate::Candidate];

    pub fn suffix(self) -> &'static str {
        match self {
            Gate::Input => "i",
            Gate::Forget => "f",
            Gate::Output => "o",
            Gate::Candidate => "c",
        }
    }
}

/// Standard LSTM cell without peepholes:
///
/// ```text
/// i = σ(W_i x + U_i h + b_i)    f = σ(W_f x + U_f h + b_f)
/// o = σ(W_o x + U_o h + b_o)    g = tanh(W_c x + U_c h + b_c)
/// c' = f ⊙ c + i ⊙ g            h' = o ⊙ tanh(c')
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    /// Input matrices, `H x D_in`, indexed by [`Gate`].
    pub w: [Matrix; 4],
    /// Recurrent matrices, `H x H`.
    pub u: [Matrix; 4],
    pub b: [Vec<f64>; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

/// Activations of one step, kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct StepCache {
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub o: Vec<f64>,
    pub g: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl LstmLayer {
    pub fn zeros(inputs: usize, hidden: usize) -> Self {
        LstmLayer {
            w: std::array::from_fn(|_| Matrix::zeros(hidden, inputs)),
            u: std::array::from_fn(|_| Matrix::zeros(hidden, hidden)),
            b: std::array::from_fn(|_| vec![0.0; hidden]),
        }
    }

    /// Glorot-uniform matrices, zero biases except the forget gate at 1.
    pub fn init<R: Rng + ?Sized>(inputs: usize, hidden: usize, rng: &mut R) -> Self {
        let wb = glorot_bound(inputs, hidden);
        let ub = glorot_bound(hidden, hidden);
        let w = std::array::from_fn(|_| Matrix::uniform(hidden, inputs, wb, rng));
        let u = std::array::from_fn(|_| Matrix::uniform(hidden, hidden, ub, rng));
        let mut b: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; hidden]);
        b[Gate::Forget as usize].fill(1.0);
        LstmLayer { w, u, b }
    }

    pub fn hidden(&self) -> usize {
        self.b[0].len()
    }

    pub fn inputs(&self) -> usize {
        self.w[0].cols()
    }

    pub(crate) fn check(&self) -> Result<()> {
        let h = self.hidden();
        let d = self.inputs();
        for g in 0..4 {
            if self.w[g].rows() != h
                || self.w[g].cols() != d
                || self.u[g].rows() != h
                || self.u[g].cols() != h
                || self.b[g].len() != h
            {
                return Err(Error::Shape(format!(
                    "LSTM gate {} disagrees with H={h}, D_in={d}",
                    Gate::ALL[g].suffix()
                )));
            }
        }
        Ok(())
    }

    pub fn step(&self, x: &[f64], state: &LstmState) -> Result<LstmState> {
        self.step_cached(x, state).map(|(s, _)| s)
    }

    pub(crate) fn step_cached(&self, x: &[f64], state: &LstmState) -> Result<(LstmState, StepCache)> {
        let h = self.hidden();
        if x.len() != self.inputs() || state.h.len() != h || state.c.len() != h {
            return Err(Error::Shape(format!(
                "LSTM step: input {} (want {}), state {}/{} (want {h})",
                x.len(),
                self.inputs(),
                state.h.len(),
                state.c.len()
            )));
        }
        let mut pre: [Vec<f64>; 4] = self.b.clone();
        for g in 0..4 {
            self.w[g].matvec_acc(x, &mut pre[g]);
            self.u[g].matvec_acc(&state.h, &mut pre[g]);
        }
        let [pi, pf, po, pg] = pre;
        let i: Vec<f64> = pi.into_iter().map(sigmoid).collect();
        let f: Vec<f64> = pf.into_iter().map(sigmoid).collect();
        let o: Vec<f64> = po.into_iter().map(sigmoid).collect();
        let g: Vec<f64> = pg.into_iter().map(f64::tanh).collect();
        let c: Vec<f64> = (0..h).map(|j| f[j] * state.c[j] + i[j] * g[j]).collect();
        let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
        let hn: Vec<f64> = (0..h).map(|j| o[j] * tanh_c[j]).collect();
        if c.iter().chain(&hn).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite LSTM activation".into()));
        }
        Ok((
            LstmState { h: hn, c },
            StepCache {
                i,
                f,
                o,
                g,
                tanh_c,
            },
        ))
    }
}
