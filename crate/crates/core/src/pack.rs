//! Bit-packed storage form of a quantized weight matrix.
//!
//! A stored tensor keeps b-bit interval indices (LSB-first within bytes,
//! row-major element order, each block padded to a byte boundary) plus one
//! `(mu, sigma)` pair per block, both rounded to f32 at pack time. The
//! same f32 values feed every later reconstruction, so reconstruct is a
//! pure function of the stored fields. Three payload kinds exist:
//!
//! * `Quantized`  — indices against the shared Gaussian codebook,
//! * `Raw`        — plain f32 values (full-precision tensors and biases),
//! * `Empirical`  — indices against per-block stored codes (the PTQ path).
//!
//! A quantized block whose f32 sigma is at or below [`SIGMA_EPS`] is
//! degenerate and stores its values raw; reconstruction returns them
//! verbatim.

use crate::codebook::{interval_index, Codebook};
use crate::error::{Error, Result};
use crate::quant::{block_ranges, standardize, SIGMA_EPS};

/// One block of a `Quantized` or `Empirical` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantBlock {
    pub mu: f32,
    pub sigma: f32,
    /// Empirical codes (PTQ); empty for Gaussian-codebook blocks.
    pub codes: Vec<f32>,
    pub payload: BlockPayload,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockPayload {
    /// `ceil(len * b / 8)` bytes of packed indices.
    Packed(Vec<u8>),
    /// Degenerate block: values stored as raw f32.
    Raw(Vec<f32>),
}

impl QuantBlock {
    pub fn is_degenerate(&self) -> bool {
        matches!(self.payload, BlockPayload::Raw(_))
    }
}

/// Payload of a stored tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorPayload {
    Quantized(Vec<QuantBlock>),
    Raw(Vec<f32>),
    Empirical(Vec<QuantBlock>),
}

/// A weight matrix in storage form.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub rows: u32,
    pub cols: u32,
    pub bit_width: u8,
    pub payload: TensorPayload,
}

impl QuantizedTensor {
    pub fn elements(&self) -> usize {
        self.rows as usize * self.cols as usize
    }

    pub fn block_count(&self) -> usize {
        match &self.payload {
            TensorPayload::Quantized(b) | TensorPayload::Empirical(b) => b.len(),
            TensorPayload::Raw(_) => 1,
        }
    }

    /// Storage kind byte as written to the wire.
    pub fn kind_byte(&self) -> u8 {
        match &self.payload {
            TensorPayload::Quantized(_) => 0,
            TensorPayload::Raw(_) => 1,
            TensorPayload::Empirical(_) => 2,
        }
    }

    /// Payload size in bytes: block statistics plus packed or raw data.
    /// Tensor name and shape fields are excluded, matching the
    /// parameters-only accounting of the size model.
    pub fn payload_bytes(&self) -> usize {
        match &self.payload {
            TensorPayload::Raw(values) => values.len() * 4,
            TensorPayload::Quantized(blocks) | TensorPayload::Empirical(blocks) => blocks
                .iter()
                .map(|b| {
                    // Empirical blocks carry a u16 code count plus codes.
                    let stats =
                        8 + if b.codes.is_empty() { 0 } else { 2 + b.codes.len() * 4 };
                    let data = match &b.payload {
                        BlockPayload::Packed(bytes) => bytes.len(),
                        BlockPayload::Raw(values) => values.len() * 4,
                    };
                    stats + data
                })
                .sum(),
        }
    }

    /// Builds a raw full-precision tensor.
    pub fn raw(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::LengthMismatch { expected: rows * cols, got: values.len() });
        }
        Ok(QuantizedTensor {
            rows: rows as u32,
            cols: cols as u32,
            bit_width: 32,
            payload: TensorPayload::Raw(values.iter().map(|&v| v as f32).collect()),
        })
    }
}

/// Packs b-bit indices LSB-first into bytes.
pub fn pack_indices(indices: &[u8], bit_width: u8) -> Vec<u8> {
    let total_bits = indices.len() * bit_width as usize;
    let mut bytes = vec![0u8; total_bits.div_ceil(8)];
    let mut bit = 0usize;
    for &idx in indices {
        let byte = bit / 8;
        let offset = bit % 8;
        let val = (idx as u16) << offset;
        bytes[byte] |= (val & 0xff) as u8;
        if offset + bit_width as usize > 8 {
            bytes[byte + 1] |= (val >> 8) as u8;
        }
        bit += bit_width as usize;
    }
    bytes
}

/// Unpacks `count` b-bit indices; rejects short buffers and nonzero
/// padding bits.
pub fn unpack_indices(bytes: &[u8], bit_width: u8, count: usize) -> Result<Vec<u8>> {
    let total_bits = count * bit_width as usize;
    let needed = total_bits.div_ceil(8);
    if bytes.len() < needed {
        return Err(Error::Truncated { needed, available: bytes.len() });
    }
    let mask = ((1u16 << bit_width) - 1) as u16;
    let mut out = Vec::with_capacity(count);
    let mut bit = 0usize;
    for _ in 0..count {
        let byte = bit / 8;
        let offset = bit % 8;
        let mut val = (bytes[byte] as u16) >> offset;
        if offset + bit_width as usize > 8 {
            val |= (bytes[byte + 1] as u16) << (8 - offset);
        }
        out.push((val & mask) as u8);
        bit += bit_width as usize;
    }
    // Padding bits above the last index must be zero.
    if total_bits % 8 != 0 {
        let last = bytes[needed - 1];
        if (last >> (total_bits % 8)) != 0 {
            return Err(Error::Corrupt("nonzero padding bits in packed indices".into()));
        }
    }
    Ok(out)
}

/// Quantizes a weight matrix into storage form against the Gaussian
/// codebook.
///
/// Indices come from the same f64 standardization the training forward
/// uses; mu and sigma are then rounded to f32. A block whose f32 sigma
/// falls at or below [`SIGMA_EPS`] stores its values raw.
pub fn quantize_tensor(
    weights: &[f64],
    rows: usize,
    cols: usize,
    cb: &Codebook,
    block_count: usize,
) -> Result<QuantizedTensor> {
    if weights.len() != rows * cols {
        return Err(Error::LengthMismatch { expected: rows * cols, got: weights.len() });
    }
    let ranges = block_ranges(weights.len(), block_count)?;
    let mut blocks = Vec::with_capacity(ranges.len());
    for range in ranges {
        let chunk = &weights[range];
        let std = standardize(chunk)?;
        let mu = std.mu as f32;
        let sigma = std.sigma as f32;
        let payload = match &std.std_weights {
            Some(std_w) if f64::from(sigma) > SIGMA_EPS => {
                let indices: Vec<u8> = std_w.iter().map(|&w| cb.index_of(w) as u8).collect();
                BlockPayload::Packed(pack_indices(&indices, cb.bit_width))
            }
            _ => BlockPayload::Raw(chunk.iter().map(|&v| v as f32).collect()),
        };
        blocks.push(QuantBlock { mu, sigma, codes: Vec::new(), payload });
    }
    Ok(QuantizedTensor {
        rows: rows as u32,
        cols: cols as u32,
        bit_width: cb.bit_width,
        payload: TensorPayload::Quantized(blocks),
    })
}

/// Quantizes a weight matrix against per-block empirical codes obtained
/// by clustering its own standardized values (the PTQ storage form).
///
/// `codes_per_block[i]` must be sorted ascending; indices use the same
/// midpoint/right-closed rule as the Gaussian path.
pub fn quantize_tensor_empirical(
    weights: &[f64],
    rows: usize,
    cols: usize,
    bit_width: u8,
    codes_per_block: &[Vec<f64>],
    block_count: usize,
) -> Result<QuantizedTensor> {
    if weights.len() != rows * cols {
        return Err(Error::LengthMismatch { expected: rows * cols, got: weights.len() });
    }
    let ranges = block_ranges(weights.len(), block_count)?;
    if codes_per_block.len() != ranges.len() {
        return Err(Error::LengthMismatch { expected: ranges.len(), got: codes_per_block.len() });
    }
    let capacity = 1usize << bit_width;
    let mut blocks = Vec::with_capacity(ranges.len());
    for (range, codes) in ranges.into_iter().zip(codes_per_block) {
        if codes.is_empty() || codes.len() > capacity {
            return Err(Error::Corrupt(format!(
                "{} empirical codes do not fit {bit_width} bits",
                codes.len()
            )));
        }
        let chunk = &weights[range];
        let std = standardize(chunk)?;
        let mu = std.mu as f32;
        let sigma = std.sigma as f32;
        let payload = match &std.std_weights {
            Some(std_w) if f64::from(sigma) > SIGMA_EPS => {
                let boundaries: Vec<f64> =
                    codes.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
                let indices: Vec<u8> =
                    std_w.iter().map(|&w| interval_index(&boundaries, w) as u8).collect();
                BlockPayload::Packed(pack_indices(&indices, bit_width))
            }
            _ => BlockPayload::Raw(chunk.iter().map(|&v| v as f32).collect()),
        };
        blocks.push(QuantBlock {
            mu,
            sigma,
            codes: codes.iter().map(|&c| c as f32).collect(),
            payload,
        });
    }
    Ok(QuantizedTensor {
        rows: rows as u32,
        cols: cols as u32,
        bit_width,
        payload: TensorPayload::Empirical(blocks),
    })
}

/// Reconstructs the weight values: `c_j * sigma + mu` per element, from
/// stored fields only. Raw payloads (full-precision tensors and
/// degenerate blocks) are returned verbatim.
pub fn reconstruct(qt: &QuantizedTensor, cb: &Codebook) -> Result<Vec<f64>> {
    let elements = qt.elements();
    match &qt.payload {
        TensorPayload::Raw(values) => {
            if values.len() != elements {
                return Err(Error::LengthMismatch { expected: elements, got: values.len() });
            }
            Ok(values.iter().map(|&v| f64::from(v)).collect())
        }
        TensorPayload::Quantized(blocks) => {
            if qt.bit_width != cb.bit_width {
                return Err(Error::BitWidthMismatch {
                    tensor: qt.bit_width,
                    codebook: cb.bit_width,
                });
            }
            reconstruct_blocks(blocks, elements, qt.bit_width, Some(&cb.codes))
        }
        TensorPayload::Empirical(blocks) => {
            reconstruct_blocks(blocks, elements, qt.bit_width, None)
        }
    }
}

fn reconstruct_blocks(
    blocks: &[QuantBlock],
    elements: usize,
    bit_width: u8,
    shared_codes: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let ranges = block_ranges(elements, blocks.len().max(1))?;
    if ranges.len() != blocks.len() {
        return Err(Error::Corrupt("block count does not divide tensor".into()));
    }
    let mut out = Vec::with_capacity(elements);
    for (block, range) in blocks.iter().zip(ranges) {
        match &block.payload {
            BlockPayload::Raw(values) => {
                if values.len() != range.len() {
                    return Err(Error::LengthMismatch {
                        expected: range.len(),
                        got: values.len(),
                    });
                }
                out.extend(values.iter().map(|&v| f64::from(v)));
            }
            BlockPayload::Packed(bytes) => {
                let own_codes: Vec<f64>;
                let codes: &[f64] = match shared_codes {
                    Some(codes) => codes,
                    None => {
                        own_codes = block.codes.iter().map(|&c| f64::from(c)).collect();
                        &own_codes
                    }
                };
                let indices = unpack_indices(bytes, bit_width, range.len())?;
                let mu = f64::from(block.mu);
                let sigma = f64::from(block.sigma);
                for idx in indices {
                    let code = *codes.get(idx as usize).ok_or(Error::Corrupt(format!(
                        "index {idx} exceeds {} codes",
                        codes.len()
                    )))?;
                    out.push(code * sigma + mu);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::Metric;

    fn cb(b: u8) -> Codebook {
        Codebook::standard(b, Metric::L1).unwrap()
    }

    #[test]
    fn pack_unpack_roundtrip_odd_widths() {
        for b in 1..=8u8 {
            let indices: Vec<u8> = (0..23usize).map(|i| ((i * 7 + 3) % (1usize << b)) as u8).collect();
            let bytes = pack_indices(&indices, b);
            assert_eq!(bytes.len(), (indices.len() * b as usize).div_ceil(8));
            let back = unpack_indices(&bytes, b, indices.len()).unwrap();
            assert_eq!(back, indices);
        }
    }

    #[test]
    fn unpack_rejects_truncation_and_padding() {
        let bytes = pack_indices(&[1, 0, 1, 1, 0], 1);
        assert!(unpack_indices(&bytes[..0], 1, 5).is_err());
        let mut bad = bytes.clone();
        bad[0] |= 0b1000_0000; // bit above the 5 stored indices
        assert!(unpack_indices(&bad, 1, 5).is_err());
    }

    #[test]
    fn quantize_2x2_payload_size() {
        let qt = quantize_tensor(&[0.1, -0.2, 0.3, -0.4], 2, 2, &cb(1), 1).unwrap();
        // 8 bytes of (mu, sigma) + 1 byte of four packed 1-bit indices.
        assert_eq!(qt.payload_bytes(), 9);
    }

    #[test]
    fn reconstruct_constant_indices() {
        let cb = cb(2);
        let indices = vec![3u8; 6];
        let qt = QuantizedTensor {
            rows: 2,
            cols: 3,
            bit_width: 2,
            payload: TensorPayload::Quantized(vec![QuantBlock {
                mu: 0.0,
                sigma: 1.0,
                codes: Vec::new(),
                payload: BlockPayload::Packed(pack_indices(&indices, 2)),
            }]),
        };
        let values = reconstruct(&qt, &cb).unwrap();
        assert!(values.iter().all(|&v| (v - cb.codes[3]).abs() < 1e-12));
    }

    #[test]
    fn reconstruct_matches_forward_on_exact_stats() {
        // mu = 1, sigma = 1 are exactly representable in f32, so the
        // f32-rounded reconstruction reproduces the forward bit for bit.
        let cb = cb(1);
        let (fwd, _) = crate::quant::fake_quant_forward(&[2.0, 0.0], &cb, 1).unwrap();
        let qt = quantize_tensor(&[2.0, 0.0], 1, 2, &cb, 1).unwrap();
        let rec = reconstruct(&qt, &cb).unwrap();
        assert_eq!(rec, fwd);
        assert!((rec[0] - 1.674_489_750_196_081_7).abs() < 1e-12);
        assert!((rec[1] - 0.325_510_249_803_918_3).abs() < 1e-12);
    }

    #[test]
    fn reconstruct_tracks_forward_within_f32_rounding() {
        let cb = cb(2);
        let weights: Vec<f64> = (0..37).map(|i| ((i * i) as f64 * 0.01).sin() * 0.3 + 0.05).collect();
        let (fwd, _) = crate::quant::fake_quant_forward(&weights, &cb, 1).unwrap();
        let qt = quantize_tensor(&weights, 1, 37, &cb, 1).unwrap();
        let rec = reconstruct(&qt, &cb).unwrap();
        for (f, r) in fwd.iter().zip(&rec) {
            assert!((f - r).abs() <= 1e-6 * f.abs().max(1.0));
        }
    }

    #[test]
    fn degenerate_block_stores_and_restores_raw() {
        let cb = cb(1);
        let qt = quantize_tensor(&[3.0, 3.0, 3.0, 3.0], 2, 2, &cb, 1).unwrap();
        let TensorPayload::Quantized(blocks) = &qt.payload else { panic!() };
        assert!(blocks[0].is_degenerate());
        assert_eq!(blocks[0].mu, 3.0);
        assert_eq!(blocks[0].sigma, 0.0);
        assert_eq!(reconstruct(&qt, &cb).unwrap(), vec![3.0; 4]);
    }

    #[test]
    fn reconstruct_rejects_bit_width_mismatch() {
        let qt = quantize_tensor(&[0.1, -0.2], 1, 2, &cb(1), 1).unwrap();
        assert!(reconstruct(&qt, &cb(2)).is_err());
    }

    #[test]
    fn empirical_tensor_roundtrip() {
        let weights = [0.4, 0.4, -0.6, -0.6, 0.4, -0.6];
        let codes = vec![vec![-1.0, 1.0]];
        let qt = quantize_tensor_empirical(&weights, 2, 3, 1, &codes, 1).unwrap();
        let rec = reconstruct(&qt, &cb(1)).unwrap();
        // sigma ~ 0.4899, mu ~ -0.1 (computed in f32): codes map back to
        // the two distinct levels.
        assert!((rec[0] - rec[4]).abs() < 1e-12);
        assert!((rec[2] - rec[3]).abs() < 1e-12);
        assert!(rec[0] > rec[2]);
    }

    #[test]
    fn raw_tensor_roundtrip() {
        let qt = QuantizedTensor::raw(2, 2, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(qt.payload_bytes(), 16);
        assert_eq!(reconstruct(&qt, &cb(1)).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
    }
}
