//! The `.gqs` container: a little-endian, CRC-checked serialization of a
//! sequence of sparse layers.
//!
//! ```text
//!   offset  size        field
//!   0       4           magic "GQS1"
//!   4       4           version (u32, currently 1)
//!   8       4           layer count (u32)
//!   12      ...         layers, back to back
//!   end-4   4           CRC32 over bytes [4, end-4)
//!
//!   per layer:
//!   +0      4           rows (u32)
//!   +4      4           cols (u32)
//!   +8      4           group size (u32)
//!   +12     4           bits (u32)
//!   +16     1 + 3       has_bias (u8) + padding
//!   +20     4*(rows+1)  row_index (u32 each)
//!           2*nnzg      group_cols (u16 each), padded to 4 bytes
//!           2*nnzg      scales (IEEE binary16), padded to 4 bytes
//!           2*nnzg      zeros (IEEE binary16), padded to 4 bytes
//!           ...         packed codes, ceil(nnzg*G*bits/8), padded to 4 bytes
//!           4*rows      bias (f32 each), only when has_bias = 1
//! ```
//!
//! The CRC polynomial is the reflected 0xEDB88320 (same as zlib). Scales and
//! zeros are stored as binary16 with round-to-nearest-even; in memory they
//! stay f32, so the narrowing is part of the serialization error budget.

use std::path::Path;

use half::f16;

use crate::dense::DenseVector;
use crate::error::{Error, FormatError, Result};
use crate::gqs::GqsLayer;

pub const MAGIC: [u8; 4] = *b"GQS1";
pub const VERSION: u32 = 1;

// ── CRC32 ───────────────────────────────────────────────────────────────

/// Reflected CRC32 table for polynomial 0xEDB88320.
fn crc_table() -> &'static [u32; 256] {
    use std::sync::OnceLock;
    static TABLE: OnceLock<[u32; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = [0u32; 256];
        for (i, slot) in table.iter_mut().enumerate() {
            let mut c = i as u32;
            for _ in 0..8 {
                c = if c & 1 != 0 { 0xEDB88320 ^ (c >> 1) } else { c >> 1 };
            }
            *slot = c;
        }
        table
    })
}

/// CRC32 of a byte slice (init 0xFFFFFFFF, final xor 0xFFFFFFFF).
pub fn crc32(bytes: &[u8]) -> u32 {
    let table = crc_table();
    let mut c = 0xFFFF_FFFFu32;
    for &b in bytes {
        c = table[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    c ^ 0xFFFF_FFFF
}

// ── f16 helpers ─────────────────────────────────────────────────────────

/// Round an f32 through IEEE binary16 (round-to-nearest-even), as the
/// serializer does. Exposed so tests can build f16-exact fixtures.
pub fn f16_round(v: f32) -> f32 {
    f16::from_f32(v).to_f32()
}

// ── writing ─────────────────────────────────────────────────────────────

fn pad4(buf: &mut Vec<u8>) {
    while buf.len() % 4 != 0 {
        buf.push(0);
    }
}

fn write_layer(buf: &mut Vec<u8>, layer: &GqsLayer) {
    buf.extend_from_slice(&(layer.rows as u32).to_le_bytes());
    buf.extend_from_slice(&(layer.cols as u32).to_le_bytes());
    buf.extend_from_slice(&(layer.group_size as u32).to_le_bytes());
    buf.extend_from_slice(&(layer.bits as u32).to_le_bytes());
    buf.push(layer.bias.is_some() as u8);
    buf.extend_from_slice(&[0u8; 3]);
    for &v in &layer.row_index {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &v in &layer.group_cols {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    pad4(buf);
    for &v in &layer.scales {
        buf.extend_from_slice(&f16::from_f32(v).to_bits().to_le_bytes());
    }
    pad4(buf);
    for &v in &layer.zeros {
        buf.extend_from_slice(&f16::from_f32(v).to_bits().to_le_bytes());
    }
    pad4(buf);
    buf.extend_from_slice(&layer.packed_codes);
    pad4(buf);
    if let Some(bias) = &layer.bias {
        for &v in &bias.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Serialize a model (a layer sequence) into the container format.
pub fn serialize(layers: &[GqsLayer]) -> Result<Vec<u8>> {
    for layer in layers {
        layer.validate()?;
    }
    if layers.len() > u32::MAX as usize {
        return Err(Error::Domain("too many layers for the container".into()));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for layer in layers {
        write_layer(&mut buf, layer);
    }
    let crc = crc32(&buf[4..]);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

// ── reading ─────────────────────────────────────────────────────────────

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        if self.pos + n > self.bytes.len() {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n,
                available: self.bytes.len() - self.pos,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u16(&mut self) -> std::result::Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn align4(&mut self) -> std::result::Result<(), FormatError> {
        let rem = self.pos % 4;
        if rem != 0 {
            self.take(4 - rem)?;
        }
        Ok(())
    }
}

fn read_layer(r: &mut Reader) -> std::result::Result<GqsLayer, FormatError> {
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let group_size = r.u32()? as usize;
    let bits_raw = r.u32()?;
    if bits_raw > u8::MAX as u32 {
        return Err(FormatError::Invalid(format!("bit width {bits_raw}")));
    }
    let bits = bits_raw as u8;
    let has_bias = r.take(4)?[0];
    if has_bias > 1 {
        return Err(FormatError::Invalid(format!("has_bias byte {has_bias}")));
    }

    if group_size == 0 || cols % group_size != 0 {
        return Err(FormatError::Invalid(format!(
            "group size {group_size} does not divide {cols} columns"
        )));
    }
    // Cap pre-allocations by what the stream can actually hold, so a crafted
    // count cannot demand gigabytes before the truncation check fires.
    let remaining = r.bytes.len() - r.pos;
    let mut row_index = Vec::with_capacity((rows + 1).min(remaining / 4 + 1));
    for _ in 0..rows + 1 {
        row_index.push(r.u32()?);
    }
    let nnzg = *row_index.last().unwrap_or(&0) as usize;
    let cap = nnzg.min(remaining / 2 + 1);

    let mut group_cols = Vec::with_capacity(cap);
    for _ in 0..nnzg {
        group_cols.push(r.u16()?);
    }
    r.align4()?;
    let mut scales = Vec::with_capacity(cap);
    for _ in 0..nnzg {
        scales.push(f16::from_bits(r.u16()?).to_f32());
    }
    r.align4()?;
    let mut zeros = Vec::with_capacity(cap);
    for _ in 0..nnzg {
        zeros.push(f16::from_bits(r.u16()?).to_f32());
    }
    r.align4()?;
    let code_bytes = (nnzg * group_size * bits as usize).div_ceil(8);
    let packed_codes = r.take(code_bytes)?.to_vec();
    r.align4()?;
    let bias = if has_bias == 1 {
        let mut b = Vec::with_capacity(rows.min(remaining / 4 + 1));
        for _ in 0..rows {
            b.push(f32::from_le_bytes(r.take(4)?.try_into().unwrap()));
        }
        Some(DenseVector::from_vec(b))
    } else {
        None
    };

    Ok(GqsLayer {
        rows,
        cols,
        group_size,
        bits,
        row_index,
        group_cols,
        scales,
        zeros,
        packed_codes,
        bias,
    })
}

/// Parse a container. The CRC is checked before any field is trusted, so a
/// single flipped bit anywhere after the magic surfaces as `CrcMismatch`.
pub fn deserialize(bytes: &[u8]) -> Result<Vec<GqsLayer>> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated {
            offset: 0,
            needed: 4,
            available: bytes.len(),
        }
        .into());
    }
    if bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic {
            found: bytes[..4].try_into().unwrap(),
        }
        .into());
    }
    if bytes.len() < 16 {
        return Err(FormatError::Truncated {
            offset: 4,
            needed: 12,
            available: bytes.len() - 4,
        }
        .into());
    }
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32(&bytes[4..bytes.len() - 4]);
    if stored != computed {
        return Err(FormatError::CrcMismatch { stored, computed }.into());
    }

    let mut r = Reader {
        bytes: &bytes[..bytes.len() - 4],
        pos: 4,
    };
    let version = r.u32().map_err(Error::Format)?;
    if version != VERSION {
        return Err(FormatError::VersionMismatch {
            found: version,
            expected: VERSION,
        }
        .into());
    }
    let layer_count = r.u32().map_err(Error::Format)?;
    let mut layers = Vec::with_capacity(layer_count.min(1024) as usize);
    for _ in 0..layer_count {
        layers.push(read_layer(&mut r).map_err(Error::Format)?);
    }
    if r.pos != r.bytes.len() {
        return Err(FormatError::Invalid(format!(
            "{} trailing bytes after the last layer",
            r.bytes.len() - r.pos
        ))
        .into());
    }
    for layer in &layers {
        layer.validate()?;
    }
    Ok(layers)
}

/// Write a model to disk in the container format.
pub fn write_gqs_file<P: AsRef<Path>>(path: P, layers: &[GqsLayer]) -> Result<()> {
    let bytes = serialize(layers)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Read a model back from disk.
pub fn read_gqs_file<P: AsRef<Path>>(path: P) -> Result<Vec<GqsLayer>> {
    let bytes = std::fs::read(path)?;
    deserialize(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::{make_synthetic, Distribution};
    use crate::gqs::build_gqs;

    /// Layers straight from `deserialize` have f16-exact params, so further
    /// round trips are field-identical.
    fn canonical_layer(seed: u64, bias: bool) -> GqsLayer {
        let w = make_synthetic(4, 16, seed, Distribution::Gaussian).unwrap();
        let keep: Vec<bool> = (0..16).map(|i| i % 3 != 0).collect();
        let mut layer = build_gqs(&w, &keep, 4, 4).unwrap();
        if bias {
            layer.bias = Some(DenseVector::from_vec(vec![0.5, -1.0, 0.0, 2.5]));
        }
        let bytes = serialize(&[layer]).unwrap();
        deserialize(&bytes).unwrap().pop().unwrap()
    }

    #[test]
    fn crc_matches_reference_vector() {
        assert_eq!(crc32(b"123456789"), 0xCBF43926);
        assert_eq!(crc32(b""), 0);
    }

    #[test]
    fn f16_rounds_to_nearest_even() {
        // midpoint between 1.0 and the next f16 (1 + 2^-10) rounds down to even
        assert_eq!(f16_round(1.0 + 2f32.powi(-11)), 1.0);
        // midpoint between 1 + 2^-10 and 1 + 2^-9 rounds up to even
        assert_eq!(f16_round(1.0 + 3.0 * 2f32.powi(-11)), 1.0 + 2f32.powi(-9));
        assert_eq!(f16_round(0.5), 0.5);
        assert_eq!(f16_round(-2.0), -2.0);
    }

    #[test]
    fn empty_model_is_a_minimal_stream() {
        let bytes = serialize(&[]).unwrap();
        assert_eq!(bytes.len(), 16); // magic + version + count + crc
        assert_eq!(&bytes[..4], b"GQS1");
        let layers = deserialize(&bytes).unwrap();
        assert!(layers.is_empty());
    }

    #[test]
    fn round_trip_is_field_identical() {
        for bias in [false, true] {
            let layer = canonical_layer(7, bias);
            let bytes = serialize(std::slice::from_ref(&layer)).unwrap();
            let back = deserialize(&bytes).unwrap();
            assert_eq!(back.len(), 1);
            assert_eq!(back[0], layer);
        }
    }

    #[test]
    fn serialization_is_deterministic() {
        let layer = canonical_layer(3, true);
        let a = serialize(std::slice::from_ref(&layer)).unwrap();
        let b = serialize(std::slice::from_ref(&layer)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn multi_layer_models_round_trip() {
        let layers = vec![canonical_layer(1, true), canonical_layer(2, false)];
        let bytes = serialize(&layers).unwrap();
        let back = deserialize(&bytes).unwrap();
        assert_eq!(back, layers);
    }

    #[test]
    fn payload_length_matches_footprint() {
        for bias in [false, true] {
            let layer = canonical_layer(11, bias);
            let bytes = serialize(std::slice::from_ref(&layer)).unwrap();
            let fp = crate::gqs::footprint(&layer).unwrap();
            // total = magic(4) + version(4) + count(4) + header(20) + payload + crc(4)
            let payload = bytes.len() - 4 - 4 - 4 - 20 - 4;
            assert_eq!(fp.payload_bits, 8 * payload as u64);
        }
    }

    #[test]
    fn bad_magic_is_detected() {
        let layer = canonical_layer(5, false);
        let mut bytes = serialize(&[layer]).unwrap();
        bytes[0] ^= 0x01;
        match deserialize(&bytes) {
            Err(Error::Format(FormatError::BadMagic { .. })) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn every_post_magic_bit_flip_is_caught_by_crc() {
        let layer = canonical_layer(9, true);
        let bytes = serialize(&[layer]).unwrap();
        for byte in 4..bytes.len() {
            let mut corrupted = bytes.clone();
            corrupted[byte] ^= 1 << (byte % 8);
            match deserialize(&corrupted) {
                Err(Error::Format(FormatError::CrcMismatch { .. })) => {}
                other => panic!("flip at byte {byte} not caught: {other:?}"),
            }
        }
    }

    #[test]
    fn version_mismatch_is_distinct() {
        let layer = canonical_layer(5, false);
        let mut bytes = serialize(&[layer]).unwrap();
        bytes[4] = 2; // version 2
        let crc = crc32(&bytes[4..bytes.len() - 4]);
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        match deserialize(&bytes) {
            Err(Error::Format(FormatError::VersionMismatch {
                found: 2,
                expected: 1,
            })) => {}
            other => panic!("expected VersionMismatch, got {other:?}"),
        }
    }

    #[test]
    fn truncation_is_distinct() {
        let layer = canonical_layer(5, false);
        let bytes = serialize(&[layer]).unwrap();
        // chopping the tail breaks the CRC first; a too-short header truncates
        match deserialize(&bytes[..10]) {
            Err(Error::Format(FormatError::Truncated { .. })) => {}
            other => panic!("expected Truncated, got {other:?}"),
        }
        match deserialize(&bytes[..2]) {
            Err(Error::Format(FormatError::Truncated { .. })) => {}
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_with_valid_crc_is_caught() {
        // re-sign a chopped stream so the CRC passes, then the reader must
        // still notice the missing bytes
        let layer = canonical_layer(5, false);
        let bytes = serialize(&[layer]).unwrap();
        let mut chopped = bytes[..bytes.len() - 24].to_vec();
        let crc = crc32(&chopped[4..]);
        chopped.extend_from_slice(&crc.to_le_bytes());
        match deserialize(&chopped) {
            Err(Error::Format(FormatError::Truncated { .. })) => {}
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn trailing_garbage_with_valid_crc_is_caught() {
        let layer = canonical_layer(5, false);
        let bytes = serialize(&[layer]).unwrap();
        let mut padded = bytes[..bytes.len() - 4].to_vec();
        padded.extend_from_slice(&[0u8; 8]);
        let crc = crc32(&padded[4..]);
        padded.extend_from_slice(&crc.to_le_bytes());
        match deserialize(&padded) {
            Err(Error::Format(FormatError::Invalid(_))) => {}
            other => panic!("expected Invalid, got {other:?}"),
        }
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.gqs");
        let layers = vec![canonical_layer(1, true)];
        write_gqs_file(&path, &layers).unwrap();
        let back = read_gqs_file(&path).unwrap();
        assert_eq!(back, layers);
    }
}
