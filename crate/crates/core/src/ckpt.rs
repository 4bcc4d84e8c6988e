//! Binary checkpoint container for quantized adapters (`.badp`).
//!
//! Layout, all multi-byte integers little-endian:
//!
//! ```text
//! header   magic "BADP" | version u16 | bit_width u8 | metric u8 | tensor_count u32
//! tensor   name_len u16 | name utf-8 | rows u32 | cols u32 | block_count u32 | kind u8
//!          kind 0 (quantized):  per block mu f32, sigma f32
//!          kind 1 (raw):        nothing extra
//!          kind 2 (empirical):  per block mu f32, sigma f32,
//!                               code_count u16, codes f32 (at most 2^b)
//!          then per block: packed indices, or len*4 raw f32 bytes when the
//!          block is degenerate (sigma <= 1e-12) or the tensor is raw
//! ```
//!
//! Index bytes are LSB-first, blocks padded to byte boundaries. The
//! payload accounting (`payload_bytes`) excludes headers and names so it
//! matches the parameters-only size model: `2dbh/8 + 16` bytes per
//! AdaptFormer layer, twice that for LoRA, and plain `4` bytes per value
//! at full precision.

use crate::codebook::Metric;
use crate::error::{Error, Result};
use crate::pack::{
    pack_indices, BlockPayload, QuantBlock, QuantizedTensor, TensorPayload,
};
use crate::quant::{block_ranges, SIGMA_EPS};

pub const MAGIC: [u8; 4] = *b"BADP";
pub const FORMAT_VERSION: u16 = 1;
/// Header size in bytes: magic + version + bit_width + metric + count.
pub const HEADER_BYTES: usize = 12;

/// Adapter family, used by the analytic size model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    /// Two matrices per layer: d×h down, h×d up.
    AdaptFormer,
    /// Four matrices per layer: A/B pairs for the query and value paths.
    Lora,
}

impl AdapterKind {
    pub fn matrices_per_layer(self) -> u64 {
        match self {
            AdapterKind::AdaptFormer => 2,
            AdapterKind::Lora => 4,
        }
    }
}

/// An in-memory checkpoint: ordered named tensors plus header metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub bit_width: u8,
    pub metric: Metric,
    pub tensors: Vec<(String, QuantizedTensor)>,
}

impl Checkpoint {
    pub fn new(bit_width: u8, metric: Metric) -> Self {
        Checkpoint { bit_width, metric, tensors: Vec::new() }
    }

    /// Appends a named tensor, rejecting duplicate names and bit-width
    /// mismatches with the header.
    pub fn push(&mut self, name: impl Into<String>, tensor: QuantizedTensor) -> Result<()> {
        let name = name.into();
        if self.tensors.iter().any(|(n, _)| *n == name) {
            return Err(Error::NameCollision(name));
        }
        match tensor.payload {
            TensorPayload::Raw(_) => {}
            _ => {
                if tensor.bit_width != self.bit_width {
                    return Err(Error::BitWidthMismatch {
                        tensor: tensor.bit_width,
                        codebook: self.bit_width,
                    });
                }
            }
        }
        self.tensors.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&QuantizedTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Total payload bytes over all tensors (headers and names excluded).
    pub fn payload_bytes(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.payload_bytes()).sum()
    }

    /// Payload bytes of tensors selected by name.
    pub fn payload_bytes_where(&self, keep: impl Fn(&str) -> bool) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| keep(n))
            .map(|(_, t)| t.payload_bytes())
            .sum()
    }

    /// Serializes the checkpoint; identical input produces identical
    /// bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + 64 * self.tensors.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.bit_width);
        out.push(self.metric.as_byte());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &self.tensors {
            write_tensor(&mut out, name, tensor);
        }
        out
    }

    /// Parses a checkpoint, validating magic, version, bounds, index
    /// ranges, and padding. Never reads past the buffer.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = Cursor { bytes, pos: 0 };
        let magic = cursor.take(4)?;
        if magic != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = cursor.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let bit_width = cursor.u8()?;
        let metric = Metric::from_byte(cursor.u8()?)?;
        let count = cursor.u32()? as usize;
        let mut ckpt = Checkpoint::new(bit_width, metric);
        for _ in 0..count {
            let (name, tensor) = read_tensor(&mut cursor, bit_width)?;
            ckpt.push(name, tensor)?;
        }
        if cursor.pos != bytes.len() {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - cursor.pos
            )));
        }
        Ok(ckpt)
    }
}

fn write_tensor(out: &mut Vec<u8>, name: &str, tensor: &QuantizedTensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&tensor.rows.to_le_bytes());
    out.extend_from_slice(&tensor.cols.to_le_bytes());
    out.extend_from_slice(&(tensor.block_count() as u32).to_le_bytes());
    out.push(tensor.kind_byte());
    match &tensor.payload {
        TensorPayload::Raw(values) => {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        TensorPayload::Quantized(blocks) | TensorPayload::Empirical(blocks) => {
            let empirical = matches!(tensor.payload, TensorPayload::Empirical(_));
            for block in blocks {
                out.extend_from_slice(&block.mu.to_le_bytes());
                out.extend_from_slice(&block.sigma.to_le_bytes());
                if empirical {
                    out.extend_from_slice(&(block.codes.len() as u16).to_le_bytes());
                    for c in &block.codes {
                        out.extend_from_slice(&c.to_le_bytes());
                    }
                }
            }
            for block in blocks {
                match &block.payload {
                    BlockPayload::Packed(bytes) => out.extend_from_slice(bytes),
                    BlockPayload::Raw(values) => {
                        for v in values {
                            out.extend_from_slice(&v.to_le_bytes());
                        }
                    }
                }
            }
        }
    }
}

fn read_tensor(cursor: &mut Cursor<'_>, bit_width: u8) -> Result<(String, QuantizedTensor)> {
    let name_len = cursor.u16()? as usize;
    let name = std::str::from_utf8(cursor.take(name_len)?)
        .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
        .to_owned();
    let rows = cursor.u32()?;
    let cols = cursor.u32()?;
    let block_count = cursor.u32()? as usize;
    let kind = cursor.u8()?;
    let elements = (rows as u64)
        .checked_mul(cols as u64)
        .filter(|&e| e <= u32::MAX as u64)
        .ok_or_else(|| Error::Corrupt("tensor shape overflows".into()))? as usize;

    let payload = match kind {
        1 => {
            let values = cursor.f32_vec(elements)?;
            TensorPayload::Raw(values)
        }
        0 | 2 => {
            if elements == 0 {
                return Err(Error::Corrupt("quantized tensor with zero elements".into()));
            }
            if !(1..=8).contains(&bit_width) {
                return Err(Error::InvalidBitWidth(bit_width));
            }
            let ranges = block_ranges(elements, block_count.max(1)).map_err(|_| {
                Error::Corrupt(format!("block count {block_count} invalid for {elements} elements"))
            })?;
            if ranges.len() != block_count {
                return Err(Error::Corrupt("zero block count".into()));
            }
            let capacity = 1usize << bit_width;
            let mut blocks = Vec::with_capacity(block_count);
            for _ in 0..block_count {
                let mu = cursor.f32()?;
                let sigma = cursor.f32()?;
                let codes = if kind == 2 {
                    let count = cursor.u16()? as usize;
                    if count == 0 || count > capacity {
                        return Err(Error::Corrupt(format!(
                            "{count} empirical codes exceed {bit_width}-bit capacity"
                        )));
                    }
                    cursor.f32_vec(count)?
                } else {
                    Vec::new()
                };
                blocks.push(QuantBlock {
                    mu,
                    sigma,
                    codes,
                    payload: BlockPayload::Packed(Vec::new()),
                });
            }
            for (block, range) in blocks.iter_mut().zip(&ranges) {
                block.payload = if f64::from(block.sigma) <= SIGMA_EPS {
                    BlockPayload::Raw(cursor.f32_vec(range.len())?)
                } else {
                    let byte_len = (range.len() * bit_width as usize).div_ceil(8);
                    let bytes = cursor.take(byte_len)?.to_vec();
                    // Validate index range and padding up front.
                    let indices = crate::pack::unpack_indices(&bytes, bit_width, range.len())?;
                    if kind == 2 {
                        let limit = block.codes.len();
                        if indices.iter().any(|&i| i as usize >= limit) {
                            return Err(Error::Corrupt(format!(
                                "index exceeds {limit} empirical codes"
                            )));
                        }
                    }
                    BlockPayload::Packed(bytes)
                };
            }
            if kind == 0 {
                TensorPayload::Quantized(blocks)
            } else {
                TensorPayload::Empirical(blocks)
            }
        }
        other => return Err(Error::Corrupt(format!("unknown tensor kind {other}"))),
    };
    let bit_width = if kind == 1 { 32 } else { bit_width };
    Ok((name, QuantizedTensor { rows, cols, bit_width, payload }))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(Error::Truncated { needed: n, available });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32_vec(&mut self, count: usize) -> Result<Vec<f32>> {
        let raw = self.take(count * 4)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Analytic adapter payload size in bytes for `layers` identical layers
/// of feature dim `d` and hidden dim `h` at bit width `b`.
///
/// Quantized widths (1..=8) store `b` bits per parameter plus one
/// `(mu, sigma)` f32 pair per matrix; `b = 32` stores plain f32 values
/// with no statistics. Matches the measured packed payload of the same
/// configuration with one block per matrix.
pub fn size_estimate(d: u64, layers: u64, h: u64, b: u8, kind: AdapterKind) -> Result<u64> {
    let mats = kind.matrices_per_layer();
    let params_per_layer = mats * d * h;
    match b {
        32 => Ok(layers * params_per_layer * 4),
        1..=8 => {
            let index_bytes = (params_per_layer * b as u64).div_ceil(8);
            Ok(layers * (index_bytes + 8 * mats))
        }
        other => Err(Error::InvalidBitWidth(other)),
    }
}

/// Quantizes the classification head for storage: the weight goes through
/// the per-matrix pipeline at `bits` (or stays raw when `None`), the bias
/// always stays full precision.
pub fn pack_head(
    weight: &[f64],
    rows: usize,
    cols: usize,
    bias: &[f64],
    bits: Option<&crate::codebook::Codebook>,
) -> Result<Vec<(String, QuantizedTensor)>> {
    if bias.len() != rows {
        return Err(Error::LengthMismatch { expected: rows, got: bias.len() });
    }
    let weight_tensor = match bits {
        Some(cb) => crate::pack::quantize_tensor(weight, rows, cols, cb, 1)?,
        None => QuantizedTensor::raw(rows, cols, weight)?,
    };
    let bias_tensor = QuantizedTensor::raw(bias.len(), 1, bias)?;
    Ok(vec![
        ("head.weight".to_owned(), weight_tensor),
        ("head.bias".to_owned(), bias_tensor),
    ])
}

/// Summary of a parsed checkpoint for the `inspect` subcommand.
#[derive(Debug, serde::Serialize)]
pub struct InspectReport {
    pub version: u16,
    pub bit_width: u8,
    pub metric: Metric,
    pub tensor_count: usize,
    pub total_payload_bytes: usize,
    pub tensors: Vec<TensorSummary>,
}

#[derive(Debug, serde::Serialize)]
pub struct TensorSummary {
    pub name: String,
    pub rows: u32,
    pub cols: u32,
    pub block_count: usize,
    pub kind: String,
    pub payload_bytes: usize,
}

impl InspectReport {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Self {
        let tensors = ckpt
            .tensors
            .iter()
            .map(|(name, t)| TensorSummary {
                name: name.clone(),
                rows: t.rows,
                cols: t.cols,
                block_count: t.block_count(),
                kind: match t.payload {
                    TensorPayload::Quantized(_) => "quantized".to_owned(),
                    TensorPayload::Raw(_) => "raw".to_owned(),
                    TensorPayload::Empirical(_) => "empirical".to_owned(),
                },
                payload_bytes: t.payload_bytes(),
            })
            .collect();
        InspectReport {
            version: FORMAT_VERSION,
            bit_width: ckpt.bit_width,
            metric: ckpt.metric,
            tensor_count: ckpt.tensors.len(),
            total_payload_bytes: ckpt.payload_bytes(),
            tensors,
        }
    }
}

/// Packs indices for a full tensor worth of blocks; test and harness
/// helper for building quantized tensors from explicit indices.
pub fn tensor_from_indices(
    rows: usize,
    cols: usize,
    bit_width: u8,
    stats: &[(f32, f32)],
    indices: &[u8],
) -> Result<QuantizedTensor> {
    let elements = rows * cols;
    if indices.len() != elements {
        return Err(Error::LengthMismatch { expected: elements, got: indices.len() });
    }
    let ranges = block_ranges(elements, stats.len())?;
    let blocks = stats
        .iter()
        .zip(ranges)
        .map(|(&(mu, sigma), range)| QuantBlock {
            mu,
            sigma,
            codes: Vec::new(),
            payload: BlockPayload::Packed(pack_indices(&indices[range], bit_width)),
        })
        .collect();
    Ok(QuantizedTensor {
        rows: rows as u32,
        cols: cols as u32,
        bit_width,
        payload: TensorPayload::Quantized(blocks),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::{Codebook, Metric};
    use crate::pack::quantize_tensor;

    #[test]
    fn empty_checkpoint_is_header_only() {
        let ckpt = Checkpoint::new(1, Metric::L1);
        let bytes = ckpt.to_bytes();
        assert_eq!(bytes.len(), HEADER_BYTES);
        assert_eq!(&bytes[..4], b"BADP");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn roundtrip_single_tensor() {
        let cb = Codebook::standard(1, Metric::L1).unwrap();
        let mut ckpt = Checkpoint::new(1, Metric::L1);
        let qt = quantize_tensor(&[0.1, -0.2, 0.3, -0.4], 2, 2, &cb, 1).unwrap();
        ckpt.push("w", qt).unwrap();
        assert_eq!(ckpt.payload_bytes(), 9);
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_corrupted_magic() {
        let mut bytes = Checkpoint::new(1, Metric::L1).to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::BadMagic)));
    }

    #[test]
    fn rejects_truncation() {
        let cb = Codebook::standard(2, Metric::L2).unwrap();
        let mut ckpt = Checkpoint::new(2, Metric::L2);
        ckpt.push("w", quantize_tensor(&[0.5, -0.5, 1.5, -1.5], 2, 2, &cb, 1).unwrap()).unwrap();
        let bytes = ckpt.to_bytes();
        for cut in [bytes.len() - 1, HEADER_BYTES + 3, 5] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
    }

    #[test]
    fn rejects_name_collision() {
        let mut ckpt = Checkpoint::new(1, Metric::L1);
        ckpt.push("w", QuantizedTensor::raw(1, 1, &[1.0]).unwrap()).unwrap();
        assert!(matches!(
            ckpt.push("w", QuantizedTensor::raw(1, 1, &[2.0]).unwrap()),
            Err(Error::NameCollision(_))
        ));
    }

    #[test]
    fn rejects_bit_width_mismatch() {
        let cb = Codebook::standard(2, Metric::L1).unwrap();
        let mut ckpt = Checkpoint::new(1, Metric::L1);
        let qt = quantize_tensor(&[0.1, -0.2], 1, 2, &cb, 1).unwrap();
        assert!(ckpt.push("w", qt).is_err());
    }

    #[test]
    fn size_estimate_table_values() {
        let af = size_estimate(768, 12, 8, 1, AdapterKind::AdaptFormer).unwrap();
        assert_eq!(af, 18_624);
        let lora = size_estimate(768, 12, 8, 1, AdapterKind::Lora).unwrap();
        assert_eq!(lora, 37_248);
        let full = size_estimate(768, 12, 8, 32, AdapterKind::AdaptFormer).unwrap();
        assert_eq!(full, 589_824);
        assert!(size_estimate(768, 12, 8, 16, AdapterKind::Lora).is_err());
    }

    #[test]
    fn pack_head_layout_arithmetic() {
        let cb = Codebook::standard(1, Metric::L1).unwrap();
        let rows = 100;
        let cols = 768;
        let weight: Vec<f64> = (0..rows * cols).map(|i| ((i as f64) * 0.37).sin()).collect();
        let bias = vec![0.01; rows];
        let tensors = pack_head(&weight, rows, cols, &bias, Some(&cb)).unwrap();
        assert_eq!(tensors[0].1.payload_bytes(), 9_600 + 8);
        assert_eq!(tensors[1].1.payload_bytes(), 400);
        let raw = pack_head(&weight, rows, cols, &bias, None).unwrap();
        assert_eq!(
            raw[0].1.payload_bytes() + raw[1].1.payload_bytes(),
            4 * (rows * cols + rows)
        );
    }

    #[test]
    fn inspect_summary_fields() {
        let cb = Codebook::standard(1, Metric::L1).unwrap();
        let mut ckpt = Checkpoint::new(1, Metric::L1);
        ckpt.push("a", quantize_tensor(&[0.3, -0.7, 0.2, 0.9], 2, 2, &cb, 2).unwrap()).unwrap();
        ckpt.push("b", QuantizedTensor::raw(1, 3, &[1.0, 2.0, 3.0]).unwrap()).unwrap();
        let report = InspectReport::from_checkpoint(&ckpt);
        assert_eq!(report.tensor_count, 2);
        assert_eq!(report.tensors[0].block_count, 2);
        assert_eq!(report.tensors[0].kind, "quantized");
        assert_eq!(report.tensors[1].kind, "raw");
        assert_eq!(
            report.total_payload_bytes,
            report.tensors.iter().map(|t| t.payload_bytes).sum::<usize>()
        );
        let json = serde_json::to_string_pretty(&report).unwrap();
        assert!(json.contains("\"bit_width\": 1"));
    }
}
