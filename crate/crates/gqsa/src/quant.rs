//! Per-group affine quantization and code packing.
//!
//! A group of G weights shares one (scale, zero) pair:
//!
//! ```text
//!   s = (max - min) / (2^n - 1)        z = -round(min / s)
//!   code = clamp(round(w / s) + round(z), 0, 2^n - 1)
//!   w_hat = (code - z) * s
//! ```
//!
//! Rounding is half-away-from-zero throughout (`f32::round`). The zero-point
//! stays continuous in memory; only `quantize_group` rounds it, so a tuned
//! fractional zero still dequantizes exactly as stored.
//!
//! Packed layout is a little-endian bit stream: code `i` occupies stream bits
//! `[i*n, (i+1)*n)`, bit `k` of the stream lands in byte `k/8` at position
//! `k%8`. For n = 4 that is the usual nibble layout, low nibble first.

use crate::error::{Error, Result};

/// Degenerate-group floor for the scale (all-constant groups).
pub const SCALE_EPS: f32 = 1e-8;

/// Bit widths the packer and the container format accept.
pub const SUPPORTED_BITS: [u8; 4] = [2, 3, 4, 8];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f32,
    pub zero: f32,
    pub bits: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedGroup {
    pub codes: Vec<u8>,
    pub params: QuantParams,
}

pub fn validate_bits(bits: u8) -> Result<()> {
    if SUPPORTED_BITS.contains(&bits) {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "unsupported bit width {bits}, expected one of {SUPPORTED_BITS:?}"
        )))
    }
}

#[inline]
pub fn max_code(bits: u8) -> u8 {
    ((1u16 << bits) - 1) as u8
}

/// Min/max affine parameters for one group.
pub fn compute_qparams(group: &[f32], bits: u8) -> Result<QuantParams> {
    validate_bits(bits)?;
    if group.is_empty() {
        return Err(Error::Domain("cannot quantize an empty group".into()));
    }
    if group.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("group contains non-finite weights".into()));
    }
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    for &v in group {
        min = min.min(v);
        max = max.max(v);
    }
    let levels = max_code(bits) as f32;
    if max > min {
        let scale = (max - min) / levels;
        let zero = -(min / scale).round();
        Ok(QuantParams { scale, zero, bits })
    } else {
        // All-constant group: clamp the scale and pin the zero-point into
        // the representable code range.
        let zero = (-(min / SCALE_EPS).round()).clamp(0.0, levels);
        Ok(QuantParams {
            scale: SCALE_EPS,
            zero,
            bits,
        })
    }
}

/// Quantize one group with the given parameters.
pub fn quantize_group(group: &[f32], params: &QuantParams) -> Result<QuantizedGroup> {
    validate_bits(params.bits)?;
    if !(params.scale > 0.0) || !params.scale.is_finite() {
        return Err(Error::Domain(format!(
            "scale must be positive and finite, got {}",
            params.scale
        )));
    }
    if group.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("group contains non-finite weights".into()));
    }
    let hi = max_code(params.bits) as f32;
    let z = params.zero.round();
    let codes = group
        .iter()
        .map(|&w| ((w / params.scale).round() + z).clamp(0.0, hi) as u8)
        .collect();
    Ok(QuantizedGroup {
        codes,
        params: *params,
    })
}

/// Reconstruct FP32 weights from codes: (code - zero) * scale.
pub fn dequantize_group(q: &QuantizedGroup) -> Vec<f32> {
    q.codes
        .iter()
        .map(|&c| (c as f32 - q.params.zero) * q.params.scale)
        .collect()
}

/// 4-bit codes packed two per byte, low nibble first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedNibbles {
    pub bytes: Vec<u8>,
    pub count: usize,
}

pub fn pack_nibbles(codes: &[u8]) -> Result<PackedNibbles> {
    if let Some(&bad) = codes.iter().find(|&&c| c > 0xF) {
        return Err(Error::Domain(format!("code {bad} does not fit in 4 bits")));
    }
    let mut bytes = vec![0u8; codes.len().div_ceil(2)];
    for (i, &c) in codes.iter().enumerate() {
        bytes[i / 2] |= c << ((i % 2) * 4);
    }
    Ok(PackedNibbles {
        bytes,
        count: codes.len(),
    })
}

pub fn unpack_nibbles(p: &PackedNibbles, count: usize) -> Result<Vec<u8>> {
    if count > p.count {
        return Err(Error::Domain(format!(
            "asked for {count} codes but only {} are packed",
            p.count
        )));
    }
    Ok((0..count)
        .map(|i| (p.bytes[i / 2] >> ((i % 2) * 4)) & 0xF)
        .collect())
}

/// Pack codes of any supported width into a little-endian bit stream.
pub fn pack_codes(codes: &[u8], bits: u8) -> Result<Vec<u8>> {
    validate_bits(bits)?;
    let hi = max_code(bits);
    if let Some(&bad) = codes.iter().find(|&&c| c > hi) {
        return Err(Error::Domain(format!(
            "code {bad} does not fit in {bits} bits"
        )));
    }
    let total_bits = codes.len() * bits as usize;
    let mut bytes = vec![0u8; total_bits.div_ceil(8)];
    for (i, &c) in codes.iter().enumerate() {
        let base = i * bits as usize;
        for j in 0..bits as usize {
            if (c >> j) & 1 != 0 {
                let bit = base + j;
                bytes[bit / 8] |= 1 << (bit % 8);
            }
        }
    }
    Ok(bytes)
}

/// Inverse of [`pack_codes`]: read `count` codes back out of the stream.
pub fn unpack_codes(bytes: &[u8], count: usize, bits: u8) -> Result<Vec<u8>> {
    validate_bits(bits)?;
    let needed = (count * bits as usize).div_ceil(8);
    if bytes.len() < needed {
        return Err(Error::Domain(format!(
            "need {needed} bytes for {count} codes at {bits} bits, got {}",
            bytes.len()
        )));
    }
    Ok((0..count).map(|i| read_code(bytes, i, bits)).collect())
}

/// Read the i-th code out of a packed stream. Hot path for the engine.
#[inline(always)]
pub fn read_code(bytes: &[u8], i: usize, bits: u8) -> u8 {
    match bits {
        4 => (bytes[i / 2] >> ((i % 2) * 4)) & 0xF,
        8 => bytes[i],
        _ => {
            let base = i * bits as usize;
            let mut c = 0u8;
            for j in 0..bits as usize {
                let bit = base + j;
                c |= ((bytes[bit / 8] >> (bit % 8)) & 1) << j;
            }
            c
        }
    }
}
