//! Blockwise symmetric 4-bit weight quantization.
//!
//! Weights are split into blocks of `block_size` values. Each block stores one
//! `f32` scale `s ~= max|w| / 7` and signed codes `round(w / s)` in `[-7, 7]`,
//! rounded half away from zero. Reconstruction is `s * code`, so the error of
//! every element is at most `s / 2`.
//!
//! The scale is truncated to 21 significant bits so that `7 * s` (and every other
//! `s * code`) is exact in `f32`. This makes quantize -> dequantize ->
//! quantize reproduce the same scales and codes bit for bit.

pub mod format;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BLOCK_SIZE: usize = 32;
pub const MAX_CODE: i8 = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    pub name: String,
    pub values: Vec<f32>,
}

impl WeightTensor {
    pub fn new(name: impl Into<String>, values: Vec<f32>) -> Self {
        Self { name: name.into(), values }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantBlock {
    pub scale: f32,
    pub codes: Vec<i8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub name: String,
    pub block_size: usize,
    pub blocks: Vec<QuantBlock>,
    pub original_len: usize,
}

impl QuantizedTensor {
    /// Checks block count, block lengths, code range and scale sign.
    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(Error::InvalidInput("block size must be positive".into()));
        }
        if self.blocks.len() != self.original_len.div_ceil(self.block_size) {
            return Err(Error::InvalidInput(format!(
                "{} blocks for {} values at block size {}",
                self.blocks.len(),
                self.original_len,
                self.block_size
            )));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let expected = self.block_size.min(self.original_len - i * self.block_size);
            if b.codes.len() != expected {
                return Err(Error::InvalidInput(format!("block {i} has {} codes, expected {expected}", b.codes.len())));
            }
            if !(b.scale.is_finite() && b.scale >= 0.0) {
                return Err(Error::InvalidInput(format!("block {i} has invalid scale {}", b.scale)));
            }
            if b.codes.iter().any(|c| !(-MAX_CODE..=MAX_CODE).contains(c)) {
                return Err(Error::InvalidInput(format!("block {i} has a code outside [-7, 7]")));
            }
            if b.scale == 0.0 && b.codes.iter().any(|&c| c != 0) {
                return Err(Error::InvalidInput(format!("block {i} has zero scale but non-zero codes")));
            }
        }
        Ok(())
    }

    pub fn max_scale(&self) -> f32 {
        self.blocks.iter().map(|b| b.scale).fold(0.0, f32::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantError {
    pub max_abs: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantScheme {
    Fp16,
    Q4Block(usize),
}

/// Block scale for a block whose largest magnitude is `max_abs`.
fn block_scale(max_abs: f32) -> f32 {
    if max_abs == 0.0 {
        return 0.0;
    }
    let s = (f64::from(max_abs) / f64::from(MAX_CODE)) as f32;
    // truncate to 20 stored mantissa bits so 7 * s stays exact and never exceeds max_abs
    f32::from_bits(s.to_bits() & !7)
}

pub fn quantize(t: &WeightTensor, block_size: usize) -> Result<QuantizedTensor> {
    if block_size == 0 {
        return Err(Error::InvalidInput("block size must be positive".into()));
    }
    if let Some(index) = t.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteWeight { index });
    }
    let blocks = t
        .values
        .chunks(block_size)
        .map(|chunk| {
            let max_abs = chunk.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            let scale = block_scale(max_abs);
            let codes = if scale == 0.0 {
                vec![0; chunk.len()]
            } else {
                let s = f64::from(scale);
                chunk
                    .iter()
                    .map(|&w| (f64::from(w) / s).round().clamp(-7.0, 7.0) as i8)
                    .collect()
            };
            QuantBlock { scale, codes }
        })
        .collect();
    Ok(QuantizedTensor {
        name: t.name.clone(),
        block_size,
        blocks,
        original_len: t.values.len(),
    })
}

pub fn dequantize(q: &QuantizedTensor) -> WeightTensor {
    let values = q
        .blocks
        .iter()
        .flat_map(|b| b.codes.iter().map(move |&c| b.scale * f32::from(c)))
        .collect();
    WeightTensor::new(q.name.clone(), values)
}

pub fn quant_error(t: &WeightTensor, q: &QuantizedTensor) -> Result<QuantError> {
    if t.values.len() != q.original_len {
        return Err(Error::ShapeError(format!(
            "tensor has {} values, quantized tensor {}",
            t.values.len(),
            q.original_len
        )));
    }
    let restored = dequantize(q);
    let mut max_abs = 0.0f64;
    let mut sq = 0.0f64;
    for (w, r) in t.values.iter().zip(&restored.values) {
        let e = (f64::from(*w) - f64::from(*r)).abs();
        max_abs = max_abs.max(e);
        sq += e * e;
    }
    let rmse = if t.values.is_empty() { 0.0 } else { (sq / t.values.len() as f64).sqrt() };
    Ok(QuantError { max_abs, rmse })
}

/// Bytes needed to hold `param_count` weights: two per weight for fp16; half
/// a byte per weight plus a 4-byte scale per block for 4-bit blocks.
pub fn memory_footprint(param_count: u64, scheme: QuantScheme) -> u64 {
    match scheme {
        QuantScheme::Fp16 => 2 * param_count,
        QuantScheme::Q4Block(b) => param_count.div_ceil(2) + param_count.div_ceil(b.max(1) as u64) * 4,
    }
}
