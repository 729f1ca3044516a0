//! The group-quantized sparse layer: kept 1 x G groups stored CSR-style by
//! row, each with packed codes and an f32 (scale, zero) pair.
//!
//! ```text
//!   row_index[r] .. row_index[r+1]   -> kept-group slots of row r
//!   group_cols[slot]                 -> which group (column / G)
//!   scales[slot], zeros[slot]        -> affine params of that group
//!   packed codes                     -> slot * G codes, bit-packed
//! ```
//!
//! Pruned groups are simply absent; decompression writes zeros there.

use crate::dense::{DenseMatrix, DenseVector};
use crate::error::{Error, Result};
use crate::quant::{compute_qparams, pack_codes, quantize_group, read_code, validate_bits};

#[derive(Debug, Clone, PartialEq)]
pub struct GqsLayer {
    pub rows: usize,
    pub cols: usize,
    pub group_size: usize,
    pub bits: u8,
    /// Length rows + 1; row r owns group slots row_index[r]..row_index[r+1].
    pub row_index: Vec<u32>,
    /// Group column (column offset / group_size) per kept slot, ascending per row.
    pub group_cols: Vec<u16>,
    pub scales: Vec<f32>,
    pub zeros: Vec<f32>,
    /// Bit-packed codes, group_cols.len() * group_size codes total.
    pub packed_codes: Vec<u8>,
    pub bias: Option<DenseVector>,
}

impl GqsLayer {
    /// Number of kept (non-zero) groups.
    #[inline]
    pub fn nnzg(&self) -> usize {
        self.group_cols.len()
    }

    #[inline]
    pub fn groups_per_row(&self) -> usize {
        self.cols / self.group_size
    }

    #[inline]
    pub fn total_groups(&self) -> usize {
        self.rows * self.groups_per_row()
    }

    /// Fraction of groups pruned.
    pub fn realized_sparsity(&self) -> f64 {
        if self.total_groups() == 0 {
            return 0.0;
        }
        1.0 - self.nnzg() as f64 / self.total_groups() as f64
    }

    /// Structural checks; every constructor and the deserializer go through this.
    pub fn validate(&self) -> Result<()> {
        validate_bits(self.bits).map_err(|e| Error::Validation(e.to_string()))?;
        if self.group_size == 0 {
            return Err(Error::Validation("group size must be positive".into()));
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Validation("layer dimensions must be positive".into()));
        }
        if self.cols % self.group_size != 0 {
            return Err(Error::Validation(format!(
                "{} columns do not divide into groups of {}",
                self.cols, self.group_size
            )));
        }
        if self.groups_per_row() > u16::MAX as usize + 1 {
            return Err(Error::Validation(format!(
                "{} groups per row exceeds the u16 column index",
                self.groups_per_row()
            )));
        }
        if self.rows > u32::MAX as usize || self.nnzg() > u32::MAX as usize {
            return Err(Error::Validation("layer too large for u32 indices".into()));
        }
        if self.row_index.len() != self.rows + 1 {
            return Err(Error::Validation(format!(
                "row_index has {} entries, expected rows + 1 = {}",
                self.row_index.len(),
                self.rows + 1
            )));
        }
        if self.row_index[0] != 0 {
            return Err(Error::Validation("row_index must start at 0".into()));
        }
        for (r, pair) in self.row_index.windows(2).enumerate() {
            if pair[1] < pair[0] {
                return Err(Error::Validation(format!(
                    "row_index not monotone at row {r}: {} > {}",
                    pair[0], pair[1]
                )));
            }
        }
        let nnzg = self.nnzg();
        if *self.row_index.last().unwrap() as usize != nnzg {
            return Err(Error::Validation(format!(
                "row_index ends at {} but {} groups are stored",
                self.row_index.last().unwrap(),
                nnzg
            )));
        }
        if self.scales.len() != nnzg || self.zeros.len() != nnzg {
            return Err(Error::Validation(format!(
                "expected {nnzg} scales and zeros, found {} and {}",
                self.scales.len(),
                self.zeros.len()
            )));
        }
        let gpr = self.groups_per_row();
        for r in 0..self.rows {
            let lo = self.row_index[r] as usize;
            let hi = self.row_index[r + 1] as usize;
            let mut prev: Option<u16> = None;
            for slot in lo..hi {
                let gc = self.group_cols[slot];
                if (gc as usize) >= gpr {
                    return Err(Error::Validation(format!(
                        "row {r} references group column {gc}, but only {gpr} exist"
                    )));
                }
                if let Some(p) = prev {
                    if gc <= p {
                        return Err(Error::Validation(format!(
                            "row {r} group columns not strictly increasing ({p} then {gc})"
                        )));
                    }
                }
                prev = Some(gc);
            }
        }
        for (i, &s) in self.scales.iter().enumerate() {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::Validation(format!(
                    "scale {s} at slot {i} must be positive and finite"
                )));
            }
        }
        if let Some(&z) = self.zeros.iter().find(|z| !z.is_finite()) {
            return Err(Error::Validation(format!("non-finite zero-point {z}")));
        }
        // Codes need no range scan: read_code masks to the declared width, so
        // an out-of-range code is unrepresentable in the packed stream.
        let code_bytes = (nnzg * self.group_size * self.bits as usize).div_ceil(8);
        if self.packed_codes.len() != code_bytes {
            return Err(Error::Validation(format!(
                "expected {code_bytes} packed code bytes, found {}",
                self.packed_codes.len()
            )));
        }
        if let Some(b) = &self.bias {
            if b.len() != self.rows {
                return Err(Error::Validation(format!(
                    "bias has length {}, expected {}",
                    b.len(),
                    self.rows
                )));
            }
        }
        Ok(())
    }
}

/// Quantize the kept groups of a dense matrix into a sparse layer.
///
/// `keep_mask` is row-major over rows x (cols / group_size); `false` prunes
/// the group. The bias starts empty; attach one afterwards if the layer has it.
pub fn build_gqs(
    w: &DenseMatrix,
    keep_mask: &[bool],
    group_size: usize,
    bits: u8,
) -> Result<GqsLayer> {
    validate_bits(bits)?;
    if group_size == 0 {
        return Err(Error::Domain("group size must be positive".into()));
    }
    if w.cols % group_size != 0 {
        return Err(Error::Shape(format!(
            "{} columns do not divide into groups of {group_size}",
            w.cols
        )));
    }
    let gpr = w.cols / group_size;
    if keep_mask.len() != w.rows * gpr {
        return Err(Error::Shape(format!(
            "keep mask has {} entries, expected {} ({} rows x {gpr} groups)",
            keep_mask.len(),
            w.rows * gpr,
            w.rows
        )));
    }
    if gpr > u16::MAX as usize + 1 {
        return Err(Error::Domain(format!(
            "{gpr} groups per row exceeds the u16 column index"
        )));
    }

    let mut row_index = Vec::with_capacity(w.rows + 1);
    row_index.push(0u32);
    let mut group_cols = Vec::new();
    let mut scales = Vec::new();
    let mut zeros = Vec::new();
    let mut codes = Vec::new();
    for r in 0..w.rows {
        let row = w.row(r);
        for g in 0..gpr {
            if !keep_mask[r * gpr + g] {
                continue;
            }
            let group = &row[g * group_size..][..group_size];
            let params = compute_qparams(group, bits)?;
            let q = quantize_group(group, &params)?;
            group_cols.push(g as u16);
            scales.push(params.scale);
            zeros.push(params.zero);
            codes.extend_from_slice(&q.codes);
        }
        row_index.push(group_cols.len() as u32);
    }
    let packed_codes = pack_codes(&codes, bits)?;
    let layer = GqsLayer {
        rows: w.rows,
        cols: w.cols,
        group_size,
        bits,
        row_index,
        group_cols,
        scales,
        zeros,
        packed_codes,
        bias: None,
    };
    layer.validate()?;
    Ok(layer)
}

/// Expand a sparse layer back into a dense matrix; pruned groups become zeros.
pub fn decompress(layer: &GqsLayer) -> Result<DenseMatrix> {
    layer.validate()?;
    let g = layer.group_size;
    let mut w = DenseMatrix::zeros(layer.rows, layer.cols);
    for r in 0..layer.rows {
        let lo = layer.row_index[r] as usize;
        let hi = layer.row_index[r + 1] as usize;
        for slot in lo..hi {
            let col0 = layer.group_cols[slot] as usize * g;
            let scale = layer.scales[slot];
            let zero = layer.zeros[slot];
            for i in 0..g {
                let code = read_code(&layer.packed_codes, slot * g + i, layer.bits);
                w.set(r, col0 + i, (code as f32 - zero) * scale);
            }
        }
    }
    Ok(w)
}

/// Storage cost report; every count mirrors the serialized encoding, so
/// `payload_bits` equals eight times the payload's byte length exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FootprintReport {
    pub codes_bits: u64,
    pub scales_bits: u64,
    pub zeros_bits: u64,
    pub group_cols_bits: u64,
    pub row_index_bits: u64,
    pub bias_bits: u64,
    pub payload_bits: u64,
    pub total_weights: u64,
}

impl FootprintReport {
    pub fn bits_per_weight(&self) -> f64 {
        self.payload_bits as f64 / self.total_weights as f64
    }

    /// Compression ratio against a dense FP16 baseline of the same shape.
    pub fn ratio_vs_fp16(&self) -> f64 {
        16.0 * self.total_weights as f64 / self.payload_bits as f64
    }

    fn add(&mut self, other: &FootprintReport) {
        self.codes_bits += other.codes_bits;
        self.scales_bits += other.scales_bits;
        self.zeros_bits += other.zeros_bits;
        self.group_cols_bits += other.group_cols_bits;
        self.row_index_bits += other.row_index_bits;
        self.bias_bits += other.bias_bits;
        self.payload_bits += other.payload_bits;
        self.total_weights += other.total_weights;
    }
}

/// Bits of one serialized section including its 4-byte alignment padding.
fn section_bits(bytes: usize) -> u64 {
    8 * bytes.next_multiple_of(4) as u64
}

/// Analytic storage cost of one layer, matching the on-disk encoding:
/// codes at `bits` each, scales/zeros/group columns 16 bits, row index 32,
/// bias 32, with each section padded to a 4-byte boundary.
pub fn footprint(layer: &GqsLayer) -> Result<FootprintReport> {
    layer.validate()?;
    let nnzg = layer.nnzg();
    let codes_bits = section_bits((nnzg * layer.group_size * layer.bits as usize).div_ceil(8));
    let scales_bits = section_bits(2 * nnzg);
    let zeros_bits = section_bits(2 * nnzg);
    let group_cols_bits = section_bits(2 * nnzg);
    let row_index_bits = section_bits(4 * (layer.rows + 1));
    let bias_bits = match &layer.bias {
        Some(_) => section_bits(4 * layer.rows),
        None => 0,
    };
    let payload_bits =
        codes_bits + scales_bits + zeros_bits + group_cols_bits + row_index_bits + bias_bits;
    Ok(FootprintReport {
        codes_bits,
        scales_bits,
        zeros_bits,
        group_cols_bits,
        row_index_bits,
        bias_bits,
        payload_bits,
        total_weights: (layer.rows * layer.cols) as u64,
    })
}

/// Aggregate footprint over a whole model.
pub fn footprint_model(layers: &[GqsLayer]) -> Result<FootprintReport> {
    let mut total = FootprintReport {
        codes_bits: 0,
        scales_bits: 0,
        zeros_bits: 0,
        group_cols_bits: 0,
        row_index_bits: 0,
        bias_bits: 0,
        payload_bits: 0,
        total_weights: 0,
    };
    for layer in layers {
        total.add(&footprint(layer)?);
    }
    Ok(total)
}
