//! Batch tilings over a day sequence and the piggyback carry-over buffers.
//!
//! A sliding window advances one frame at a time. A piggyback plan tiles the
//! sequence with batches of `n` frames whose first `m` frames repeat the last
//! `m` frames of the previous batch; at those positions the LSTM input is the
//! stored LSTM output of the previous batch instead of the embedding.

use crate::error::{Error, Result};

/// One training window. Short sequences are left-padded with frame 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub len: usize,
    pub pad_count: usize,
}

impl Window {
    /// Source frame of every window position.
    pub fn frame_indices(&self) -> Vec<usize> {
        (0..self.len)
            .map(|p| (self.start + p).saturating_sub(self.pad_count))
            .collect()
    }

    /// `false` at padded positions.
    pub fn loss_mask(&self) -> Vec<bool> {
        (0..self.len).map(|p| p >= self.pad_count).collect()
    }
}

/// Stride-1 windows of length `timestep` over a sequence of `len` frames.
pub fn sliding_starts(len: usize, timestep: usize) -> Vec<Window> {
    let timestep = timestep.max(1);
    if len >= timestep {
        (0..=len - timestep)
            .map(|start| Window {
                start,
                len: timestep,
                pad_count: 0,
            })
            .collect()
    } else {
        vec![Window {
            start: 0,
            len: timestep,
            pad_count: timestep - len,
        }]
    }
}

/// Batch tiling with overlap. `overlap == 0` gives consecutive,
/// non-overlapping batches; the tail is right-padded with the last frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PiggybackPlan {
    pub len: usize,
    pub batch_size: usize,
    pub overlap: usize,
    pub starts: Vec<usize>,
    pub pad_count: usize,
}

fn tile(len: usize, batch_size: usize, overlap: usize) -> PiggybackPlan {
    let stride = batch_size - overlap;
    let batches = if len <= batch_size {
        1
    } else {
        (len - batch_size).div_ceil(stride) + 1
    };
    let padded = batch_size + (batches - 1) * stride;
    PiggybackPlan {
        len,
        batch_size,
        overlap,
        starts: (0..batches).map(|b| b * stride).collect(),
        pad_count: padded - len,
    }
}

/// Overlapping plan with batch size `n` and overlap `m`, `0 < m < n`.
pub fn piggyback_plan(len: usize, n: usize, m: usize) -> Result<PiggybackPlan> {
    if m == 0 || m >= n {
        return Err(Error::Config(format!(
            "overlap must satisfy 0 < m < n, got n={n}, m={m}"
        )));
    }
    if len == 0 {
        return Err(Error::Precondition("empty sequence".into()));
    }
    Ok(tile(len, n, m))
}

/// Non-overlapping tiling with batches of `n` frames.
pub fn consecutive_plan(len: usize, n: usize) -> Result<PiggybackPlan> {
    if n == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if len == 0 {
        return Err(Error::Precondition("empty sequence".into()));
    }
    Ok(tile(len, n, 0))
}

impl PiggybackPlan {
    pub fn num_batches(&self) -> usize {
        self.starts.len()
    }

    /// Source frame of every position of batch `b` (padding repeats the last frame).
    pub fn frame_indices(&self, b: usize) -> Vec<usize> {
        let s = self.starts[b];
        (0..self.batch_size)
            .map(|p| (s + p).min(self.len - 1))
            .collect()
    }

    /// `false` at padded positions.
    pub fn loss_mask(&self, b: usize) -> Vec<bool> {
        let s = self.starts[b];
        (0..self.batch_size).map(|p| s + p < self.len).collect()
    }

    pub fn carry_mask(&self, b: usize) -> CarryMask {
        CarryMask::for_batch(self.batch_size, self.overlap, b)
    }

    /// Positions of batch `b` that are the first occurrence of a real frame.
    pub fn primary_positions(&self, b: usize) -> Vec<usize> {
        let first = if b == 0 { 0 } else { self.overlap };
        let s = self.starts[b];
        (first..self.batch_size)
            .filter(|&p| s + p < self.len)
            .collect()
    }
}

/// Marks batch positions whose LSTM input is a carried output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CarryMask(Vec<bool>);

impl CarryMask {
    /// All false for the first batch, first `m` positions true afterwards.
    pub fn for_batch(n: usize, m: usize, batch_index: usize) -> Self {
        let carried = if batch_index == 0 { 0 } else { m };
        CarryMask((0..n).map(|p| p < carried).collect())
    }

    pub fn none(n: usize) -> Self {
        CarryMask(vec![false; n])
    }

    pub fn from_bools(mask: Vec<bool>) -> Self {
        CarryMask(mask)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn carried(&self) -> usize {
        self.0.iter().filter(|&&c| c).count()
    }
}

/// The last `m` LSTM outputs of the most recent batch of one sequence.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CarryStore {
    overlap: usize,
    rows: Vec<Vec<f64>>,
}

impl CarryStore {
    pub fn new(overlap: usize) -> Self {
        CarryStore {
            overlap,
            rows: Vec::new(),
        }
    }

    pub fn overlap(&self) -> usize {
        self.overlap
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Replaces the buffer with the last `m` outputs of a processed batch.
    pub fn store(&mut self, batch_outputs: &[Vec<f64>]) -> Result<()> {
        if batch_outputs.len() < self.overlap {
            return Err(Error::Sequencing(format!(
                "batch of {} outputs cannot fill an overlap of {}",
                batch_outputs.len(),
                self.overlap
            )));
        }
        if let Some(bad) = batch_outputs.iter().flatten().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite carried output {bad}")));
        }
        self.rows = batch_outputs[batch_outputs.len() - self.overlap..].to_vec();
        Ok(())
    }

    pub fn clear(&mut self) {
        self.rows.clear();
    }
}

/// LSTM inputs for one batch: carried rows at masked positions, in temporal
/// order; every other row passes through.
pub fn apply_carry(
    batch_inputs: &[Vec<f64>],
    store: &CarryStore,
    mask: &CarryMask,
) -> Result<Vec<Vec<f64>>> {
    if mask.len() != batch_inputs.len() {
        return Err(Error::Shape(format!(
            "carry mask of length {} for {} rows",
            mask.len(),
            batch_inputs.len()
        )));
    }
    let wanted = mask.carried();
    if wanted == 0 {
        return Ok(batch_inputs.to_vec());
    }
    if store.is_empty() {
        return Err(Error::Sequencing(
            "carry requested before any batch was stored".into(),
        ));
    }
    if wanted != store.rows.len() {
        return Err(Error::Sequencing(format!(
            "mask carries {wanted} rows, store holds {}",
            store.rows.len()
        )));
    }
    let width = batch_inputs.first().map_or(0, Vec::len);
    if let Some(r) = store.rows.iter().find(|r| r.len() != width) {
        return Err(Error::Architecture(format!(
            "carried output width {} differs from LSTM input width {width}",
            r.len()
        )));
    }
    let mut carried = store.rows.iter();
    Ok(batch_inputs
        .iter()
        .zip(mask.as_slice())
        .map(|(row, &c)| {
            if c {
                carried.next().unwrap().clone()
            } else {
                row.clone()
            }
        })
        .collect())
}
