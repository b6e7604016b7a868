//! `.egomdl` checkpoints (little-endian):
//!
//! ```text
//! magic "EGOMDL01"; u32 tensor count;
//! per tensor, sorted by name: u16 name length, UTF-8 name, u8 rank,
//!   rank x u32 dims, f64 data row-major
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::dense::DenseLayer;
use super::lstm::{Gate, LstmLayer};
use super::matrix::Matrix;
use super::stack::{LayerStack, StackShape};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EGOMDL01";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn encode_checkpoint(stack: &LayerStack) -> Result<Vec<u8>> {
    let mut tensors = stack.tensors();
    tensors.sort_by(|a, b| a.0.cmp(&b.0));
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, dims, data) in tensors {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dims.len() as u8);
        for d in &dims {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    match pos.checked_add(n).filter(|&e| e <= bytes.len()) {
        Some(end) => {
            let s = &bytes[*pos..end];
            *pos = end;
            Ok(s)
        }
        None => Err(Error::Truncated(format!(
            "checkpoint needs {n} bytes at offset {pos}, has {}",
            bytes.len()
        ))),
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not an EGOMDL01 checkpoint".into()));
    }
    let mut pos = 8;
    let count = u32::from_le_bytes(take(bytes, &mut pos, 4)?.try_into().unwrap());
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(take(bytes, &mut pos, 2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(bytes, &mut pos, len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = take(bytes, &mut pos, 1)?[0] as usize;
        let dims: Vec<usize> = take(bytes, &mut pos, 4 * rank)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let numel: usize = dims.iter().product();
        let data: Vec<f64> = take(bytes, &mut pos, 8 * numel)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(prev) = out.last().map(|t: &NamedTensor| &t.name) {
            if *prev >= name {
                return Err(Error::Format(format!(
                    "tensors out of order: {prev} before {name}"
                )));
            }
        }
        out.push(NamedTensor { name, dims, data });
    }
    if pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(out)
}

/// Rebuilds a stack from decoded tensors. The architecture is inferred from
/// the tensor names; `expected`, when given, must match it exactly.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<StackShape>) -> Result<LayerStack> {
    let mut by_name: BTreeMap<String, NamedTensor> = decode_tensors(bytes)?
        .into_iter()
        .map(|t| (t.name.clone(), t))
        .collect();
    let has_embed = by_name.contains_key("embed.W");
    let has_lstm = by_name.contains_key("lstm.W_i");
    let mut matrix = |name: &str| -> Result<Matrix> {
        let t = by_name
            .remove(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
        if t.dims.len() != 2 {
            return Err(Error::Shape(format!("{name} has rank {}", t.dims.len())));
        }
        Matrix::from_vec(t.dims[0], t.dims[1], t.data)
    };
    let embed_w = has_embed.then(|| matrix("embed.W")).transpose()?;
    let lstm_mats = if has_lstm {
        let w: Vec<Matrix> = Gate::ALL
            .iter()
            .map(|g| matrix(&format!("lstm.W_{}", g.suffix())))
            .collect::<Result<_>>()?;
        let u: Vec<Matrix> = Gate::ALL
            .iter()
            .map(|g| matrix(&format!("lstm.U_{}", g.suffix())))
            .collect::<Result<_>>()?;
        Some((w, u))
    } else {
        None
    };
    let head_w = matrix("head.W")?;
    let mut vector = |name: &str| -> Result<Vec<f64>> {
        let t = by_name
            .remove(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
        if t.dims.len() != 1 {
            return Err(Error::Shape(format!("{name} has rank {}", t.dims.len())));
        }
        Ok(t.data)
    };
    let embed = match embed_w {
        Some(w) => Some(DenseLayer::new(w, vector("embed.b")?)?),
        None => None,
    };
    let lstm = match lstm_mats {
        Some((w, u)) => {
            let b: Vec<Vec<f64>> = Gate::ALL
                .iter()
                .map(|g| vector(&format!("lstm.b_{}", g.suffix())))
                .collect::<Result<_>>()?;
            Some(LstmLayer {
                w: w.try_into().unwrap(),
                u: u.try_into().unwrap(),
                b: b.try_into().unwrap(),
            })
        }
        None => None,
    };
    let head = DenseLayer::new(head_w, vector("head.b")?)?;
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {extra}")));
    }
    let stack = LayerStack { embed, lstm, head };
    stack.check()?;
    if !stack.is_finite() {
        return Err(Error::Data("checkpoint holds non-finite parameters".into()));
    }
    if let Some(want) = expected {
        if stack.shape() != want {
            return Err(Error::Architecture(format!(
                "checkpoint shape {:?} does not match declared {want:?}",
                stack.shape()
            )));
        }
    }
    Ok(stack)
}

pub fn write_checkpoint(stack: &LayerStack, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(stack)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>, expected: Option<StackShape>) -> Result<LayerStack> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, expected)
}
