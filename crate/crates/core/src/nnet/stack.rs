use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dense::DenseLayer;
use super::loss::softmax_xent;
use super::lstm::{Gate, LstmLayer, LstmState, StepCache};
use crate::batching::{apply_carry, CarryMask, CarryStore};
use crate::error::{Error, Result};

/// Widths of an `[embed] -> [lstm] -> head` stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackShape {
    pub input: usize,
    pub embed: Option<usize>,
    pub hidden: Option<usize>,
    pub classes: usize,
}

/// Optional dense embedding, optional LSTM, then a dense head producing logits.
///
/// The same container doubles as the gradient and momentum buffer: those are
/// stacks of identical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    pub embed: Option<DenseLayer>,
    pub lstm: Option<LstmLayer>,
    pub head: DenseLayer,
}

impl LayerStack {
    pub fn init<R: Rng + ?Sized>(shape: StackShape, rng: &mut R) -> Result<Self> {
        if shape.input == 0 || shape.classes < 2 {
            return Err(Error::Config(format!("invalid stack shape {shape:?}")));
        }
        let embed = shape.embed.map(|e| DenseLayer::init(shape.input, e, rng));
        let lstm_in = shape.embed.unwrap_or(shape.input);
        let lstm = shape.hidden.map(|h| LstmLayer::init(lstm_in, h, rng));
        let head_in = shape.hidden.unwrap_or(lstm_in);
        let head = DenseLayer::init(head_in, shape.classes, rng);
        let stack = LayerStack { embed, lstm, head };
        stack.check()?;
        Ok(stack)
    }

    pub fn zeros(shape: StackShape) -> Self {
        let embed = shape.embed.map(|e| DenseLayer::zeros(shape.input, e));
        let lstm_in = shape.embed.unwrap_or(shape.input);
        let lstm = shape.hidden.map(|h| LstmLayer::zeros(lstm_in, h));
        let head_in = shape.hidden.unwrap_or(lstm_in);
        LayerStack {
            embed,
            lstm,
            head: DenseLayer::zeros(head_in, shape.classes),
        }
    }

    pub fn zeros_like(&self) -> Self {
        LayerStack::zeros(self.shape())
    }

    pub fn shape(&self) -> StackShape {
        let input = match (&self.embed, &self.lstm) {
            (Some(e), _) => e.inputs(),
            (None, Some(l)) => l.inputs(),
            (None, None) => self.head.inputs(),
        };
        StackShape {
            input,
            embed: self.embed.as_ref().map(DenseLayer::outputs),
            hidden: self.lstm.as_ref().map(LstmLayer::hidden),
            classes: self.head.outputs(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.shape().input
    }

    pub fn classes(&self) -> usize {
        self.head.outputs()
    }

    pub fn check(&self) -> Result<()> {
        let mut width = self.input_dim();
        if let Some(e) = &self.embed {
            if e.b.len() != e.outputs() {
                return Err(Error::Shape("embed bias length".into()));
            }
            width = e.outputs();
        }
        if let Some(l) = &self.lstm {
            l.check()?;
            if l.inputs() != width {
                return Err(Error::Architecture(format!(
                    "LSTM input width {} does not match upstream width {width}",
                    l.inputs()
                )));
            }
            width = l.hidden();
        }
        if self.head.inputs() != width || self.head.b.len() != self.head.outputs() {
            return Err(Error::Architecture(format!(
                "head input width {} does not match upstream width {width}",
                self.head.inputs()
            )));
        }
        Ok(())
    }

    /// Every parameter tensor as `(name, dims, values)` in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        if let Some(e) = &self.embed {
            out.push(("embed.W".into(), vec![e.w.rows(), e.w.cols()], e.w.as_slice()));
            out.push(("embed.b".into(), vec![e.b.len()], &e.b[..]));
        }
        if let Some(l) = &self.lstm {
            for g in Gate::ALL {
                let w = &l.w[g as usize];
                out.push((format!("lstm.W_{}", g.suffix()), vec![w.rows(), w.cols()], w.as_slice()));
            }
            for g in Gate::ALL {
                let u = &l.u[g as usize];
                out.push((format!("lstm.U_{}", g.suffix()), vec![u.rows(), u.cols()], u.as_slice()));
            }
            for g in Gate::ALL {
                out.push((format!("lstm.b_{}", g.suffix()), vec![l.hidden()], &l.b[g as usize][..]));
            }
        }
        let h = &self.head;
        out.push(("head.W".into(), vec![h.w.rows(), h.w.cols()], h.w.as_slice()));
        out.push(("head.b".into(), vec![h.b.len()], &h.b[..]));
        out
    }

    /// Mutable views in the same order as [`LayerStack::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        if let Some(e) = &mut self.embed {
            out.push(("embed.W".into(), e.w.as_mut_slice()));
            out.push(("embed.b".into(), &mut e.b[..]));
        }
        if let Some(l) = &mut self.lstm {
            for (g, w) in Gate::ALL.iter().zip(l.w.iter_mut()) {
                out.push((format!("lstm.W_{}", g.suffix()), w.as_mut_slice()));
            }
            for (g, u) in Gate::ALL.iter().zip(l.u.iter_mut()) {
                out.push((format!("lstm.U_{}", g.suffix()), u.as_mut_slice()));
            }
            for (g, b) in Gate::ALL.iter().zip(l.b.iter_mut()) {
                out.push((format!("lstm.b_{}", g.suffix()), &mut b[..]));
            }
        }
        out.push(("head.W".into(), self.head.w.as_mut_slice()));
        out.push(("head.b".into(), &mut self.head.b[..]));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, v)| v.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, _, v)| v.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted dropout on the LSTM output. The mask is drawn from `seed`, so a
/// given spec always produces the same mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutSpec {
    pub rate: f64,
    pub seed: u64,
}

impl DropoutSpec {
    pub fn none() -> Self {
        DropoutSpec { rate: 0.0, seed: 0 }
    }

    pub fn new(rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
        }
        Ok(DropoutSpec { rate, seed })
    }

    /// Per-unit multipliers: 0 for dropped units, `1/(1-r)` for kept ones.
    pub fn masks(&self, steps: usize, width: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let keep = 1.0 / (1.0 - self.rate);
        (0..steps)
            .map(|_| {
                (0..width)
                    .map(|_| {
                        if rng.random::<f64>() < self.rate {
                            0.0
                        } else {
                            keep
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowOutput {
    pub logits: Vec<Vec<f64>>,
    /// LSTM outputs `h_t` per step; empty for stacks without an LSTM.
    pub hidden: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct WindowGrad {
    /// Mean cross-entropy over loss-masked steps.
    pub loss: f64,
    pub grads: LayerStack,
    pub output: WindowOutput,
}

struct Cache<'a> {
    inputs: &'a [&'a [f64]],
    lstm_in: Vec<Vec<f64>>,
    carried: Vec<bool>,
    states: Vec<LstmState>,
    steps: Vec<StepCache>,
    drop: Vec<Vec<f64>>,
    head_in: Vec<Vec<f64>>,
    logits: Vec<Vec<f64>>,
}

fn forward_cached<'a>(
    stack: &LayerStack,
    inputs: &'a [&'a [f64]],
    carry: Option<(&CarryMask, &CarryStore)>,
    dropout: &DropoutSpec,
    mode: Mode,
) -> Result<Cache<'a>> {
    let t_len = inputs.len();
    if t_len == 0 {
        return Err(Error::Shape("empty window".into()));
    }
    let d = stack.input_dim();
    if let Some(x) = inputs.iter().find(|x| x.len() != d) {
        return Err(Error::Shape(format!(
            "window row of width {}, model expects {d}",
            x.len()
        )));
    }
    let embedded: Vec<Vec<f64>> = match &stack.embed {
        Some(e) => inputs.iter().map(|x| e.forward(x)).collect::<Result<_>>()?,
        None => inputs.iter().map(|x| x.to_vec()).collect(),
    };
    let (lstm_in, carried) = match carry {
        Some((mask, store)) => {
            if mask.len() != t_len {
                return Err(Error::Shape(format!(
                    "carry mask of length {} for a window of {t_len}",
                    mask.len()
                )));
            }
            (apply_carry(&embedded, store, mask)?, mask.as_slice().to_vec())
        }
        None => (embedded, vec![false; t_len]),
    };

    let mut states = Vec::new();
    let mut steps = Vec::new();
    let mut drop = Vec::new();
    let head_in: Vec<Vec<f64>> = match &stack.lstm {
        Some(lstm) => {
            let h = lstm.hidden();
            states.reserve(t_len + 1);
            states.push(LstmState::zeros(h));
            for x in &lstm_in {
                let (next, cache) = lstm.step_cached(x, states.last().unwrap())?;
                states.push(next);
                steps.push(cache);
            }
            drop = if mode == Mode::Train && dropout.rate > 0.0 {
                dropout.masks(t_len, h)
            } else {
                vec![vec![1.0; h]; t_len]
            };
            states[1..]
                .iter()
                .zip(&drop)
                .map(|(s, m)| s.h.iter().zip(m).map(|(a, b)| a * b).collect())
                .collect()
        }
        None => lstm_in.clone(),
    };
    let logits = head_in
        .iter()
        .map(|x| stack.head.forward(x))
        .collect::<Result<Vec<_>>>()?;
    Ok(Cache {
        inputs,
        lstm_in,
        carried,
        states,
        steps,
        drop,
        head_in,
        logits,
    })
}

fn output_of(cache: &Cache<'_>) -> WindowOutput {
    WindowOutput {
        logits: cache.logits.clone(),
        hidden: cache.states.iter().skip(1).map(|s| s.h.clone()).collect(),
    }
}

/// Forward pass over one window, LSTM state starting from zero.
///
/// With `carry`, LSTM inputs at masked positions are replaced by the stored
/// outputs of the previous batch.
pub fn forward_window(
    stack: &LayerStack,
    inputs: &[&[f64]],
    carry: Option<(&CarryMask, &CarryStore)>,
    dropout: &DropoutSpec,
    mode: Mode,
) -> Result<WindowOutput> {
    let cache = forward_cached(stack, inputs, carry, dropout, mode)?;
    Ok(output_of(&cache))
}

/// Loss and exact gradients of the mean masked per-step cross-entropy,
/// backpropagated through time over the window. Carried inputs are constants.
pub fn backprop_window(
    stack: &LayerStack,
    inputs: &[&[f64]],
    labels: &[usize],
    loss_mask: &[bool],
    carry: Option<(&CarryMask, &CarryStore)>,
    dropout: &DropoutSpec,
    mode: Mode,
) -> Result<WindowGrad> {
    let t_len = inputs.len();
    if labels.len() != t_len || loss_mask.len() != t_len {
        return Err(Error::Shape(format!(
            "window of {t_len} steps with {} labels and {} mask entries",
            labels.len(),
            loss_mask.len()
        )));
    }
    let active = loss_mask.iter().filter(|&&m| m).count();
    if active == 0 && mode == Mode::Train {
        return Err(Error::DegenerateBatch(
            "loss mask excludes every step".into(),
        ));
    }
    let cache = forward_cached(stack, inputs, carry, dropout, mode)?;
    let mut grads = stack.zeros_like();
    let scale = if active > 0 { 1.0 / active as f64 } else { 0.0 };

    // head
    let mut loss = 0.0;
    let head_width = stack.head.inputs();
    let mut d_head_in = vec![vec![0.0; head_width]; t_len];
    for t in 0..t_len {
        if !loss_mask[t] {
            continue;
        }
        let (l, mut dl) = softmax_xent(&cache.logits[t], labels[t])?;
        loss += l;
        dl.iter_mut().for_each(|v| *v *= scale);
        stack
            .head
            .backward_acc(&cache.head_in[t], &dl, &mut grads.head, Some(&mut d_head_in[t]));
    }
    loss *= scale;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("window loss is {loss}")));
    }

    // gradient w.r.t. the LSTM inputs (or head inputs when there is no LSTM)
    let d_lstm_in: Vec<Vec<f64>> = match (&stack.lstm, &mut grads.lstm) {
        (Some(lstm), Some(gl)) => {
            let h = lstm.hidden();
            let mut d_in = vec![vec![0.0; lstm.inputs()]; t_len];
            let mut dh_next = vec![0.0; h];
            let mut dc_next = vec![0.0; h];
            let mut da: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; h]);
            for t in (0..t_len).rev() {
                let sc = &cache.steps[t];
                let prev = &cache.states[t];
                for j in 0..h {
                    let dh = d_head_in[t][j] * cache.drop[t][j] + dh_next[j];
                    let tc = sc.tanh_c[j];
                    let dout = dh * tc;
                    let dc = dh * sc.o[j] * (1.0 - tc * tc) + dc_next[j];
                    let di = dc * sc.g[j];
                    let dg = dc * sc.i[j];
                    let df = dc * prev.c[j];
                    dc_next[j] = dc * sc.f[j];
                    da[Gate::Input as usize][j] = di * sc.i[j] * (1.0 - sc.i[j]);
                    da[Gate::Forget as usize][j] = df * sc.f[j] * (1.0 - sc.f[j]);
                    da[Gate::Output as usize][j] = dout * sc.o[j] * (1.0 - sc.o[j]);
                    da[Gate::Candidate as usize][j] = dg * (1.0 - sc.g[j] * sc.g[j]);
                }
                dh_next.fill(0.0);
                for g in 0..4 {
                    gl.w[g].outer_acc(&da[g], &cache.lstm_in[t]);
                    gl.u[g].outer_acc(&da[g], &prev.h);
                    for (b, &a) in gl.b[g].iter_mut().zip(&da[g]) {
                        *b += a;
                    }
                    lstm.u[g].matvec_t_acc(&da[g], &mut dh_next);
                    if !cache.carried[t] {
                        lstm.w[g].matvec_t_acc(&da[g], &mut d_in[t]);
                    }
                }
            }
            d_in
        }
        _ => d_head_in,
    };

    if let (Some(embed), Some(ge)) = (&stack.embed, &mut grads.embed) {
        for t in 0..t_len {
            if !cache.carried[t] {
                embed.backward_acc(cache.inputs[t], &d_lstm_in[t], ge, None);
            }
        }
    }

    Ok(WindowGrad {
        loss,
        grads,
        output: output_of(&cache),
    })
}
