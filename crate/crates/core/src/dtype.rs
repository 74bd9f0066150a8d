//! Element types stored in checkpoints and dumps, and exact conversions
//! between them and the 64-bit working precision.

use half::{bf16, f16};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    F32,
    F16,
    BF16,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 | DType::BF16 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::BF16 => "BF16",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "F32" => Ok(DType::F32),
            "F16" => Ok(DType::F16),
            "BF16" => Ok(DType::BF16),
            other => Err(Error::UnsupportedDtype(other.to_string())),
        }
    }

    /// Widen element `i` of a little-endian buffer. Widening is exact for
    /// every supported dtype.
    #[inline]
    pub fn decode(self, bytes: &[u8], i: usize) -> f64 {
        match self {
            DType::F32 => {
                let o = i * 4;
                f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as f64
            }
            DType::F16 => {
                let o = i * 2;
                f16::from_bits(u16::from_le_bytes([bytes[o], bytes[o + 1]])).to_f64()
            }
            DType::BF16 => {
                let o = i * 2;
                bf16::from_bits(u16::from_le_bytes([bytes[o], bytes[o + 1]])).to_f64()
            }
        }
    }

    pub fn decode_into(self, bytes: &[u8], out: &mut [f64]) {
        debug_assert_eq!(bytes.len(), out.len() * self.size());
        match self {
            DType::F32 => {
                for (o, b) in out.iter_mut().zip(bytes.chunks_exact(4)) {
                    *o = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
                }
            }
            DType::F16 => {
                for (o, b) in out.iter_mut().zip(bytes.chunks_exact(2)) {
                    *o = f16::from_bits(u16::from_le_bytes([b[0], b[1]])).to_f64();
                }
            }
            DType::BF16 => {
                for (o, b) in out.iter_mut().zip(bytes.chunks_exact(2)) {
                    *o = bf16::from_bits(u16::from_le_bytes([b[0], b[1]])).to_f64();
                }
            }
        }
    }

    /// Narrow `v` with a single round-to-nearest-even and write it at
    /// element `i`.
    #[inline]
    pub fn encode(self, v: f64, bytes: &mut [u8], i: usize) {
        match self {
            DType::F32 => {
                let o = i * 4;
                bytes[o..o + 4].copy_from_slice(&(v as f32).to_le_bytes());
            }
            DType::F16 => {
                let o = i * 2;
                let h = f16::from_f32(round_to_odd_f32(v));
                bytes[o..o + 2].copy_from_slice(&h.to_bits().to_le_bytes());
            }
            DType::BF16 => {
                let o = i * 2;
                let h = bf16::from_f32(round_to_odd_f32(v));
                bytes[o..o + 2].copy_from_slice(&h.to_bits().to_le_bytes());
            }
        }
    }
}

/// f64 -> f32 with round-to-odd. A following round-to-nearest-even into any
/// format with at most 22 significand bits is then correctly rounded
/// (f32 keeps at least two extra bits over both f16 and bf16).
pub fn round_to_odd_f32(v: f64) -> f32 {
    let r = v as f32;
    if !r.is_finite() || r as f64 == v {
        return r;
    }
    let mut bits = r.to_bits();
    if (r as f64).abs() > v.abs() {
        // rounded away from zero; step back toward zero
        bits -= 1;
    }
    f32::from_bits(bits | 1)
}

/// Largest relative error introduced by storing a normal-range value in
/// `dtype` (half an ulp at the format's precision).
pub fn max_relative_error(dtype: DType) -> f64 {
    match dtype {
        DType::F32 => 2f64.powi(-24),
        DType::F16 => 2f64.powi(-11),
        DType::BF16 => 2f64.powi(-8),
    }
}
