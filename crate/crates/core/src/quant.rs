//! Fake quantization for training: standardize, snap to a Gaussian
//! codebook, de-standardize, and the exact straight-through backward.
//!
//! The forward keeps full-precision containers; only the values become
//! codebook-valued. Standardization uses the population convention
//! (denominator m) — the backward contraction below is only exact under
//! that convention. The backward applies the O(m) form of the STE
//! Jacobian:
//!
//! ```text
//! grad_k = g_k + (w'_k / m) * Σ_i g_i (ŵ'_i - w'_i)
//! ```
//!
//! Blocks whose standard deviation underflows [`SIGMA_EPS`] pass through
//! unquantized in the forward and act as the identity in the backward.

use crate::codebook::Codebook;
use crate::error::{Error, Result};

/// Below this population std a block is treated as constant and passed
/// through. Zero-initialized adapter matrices take this path until their
/// first nonzero update.
pub const SIGMA_EPS: f64 = 1e-12;

/// Standardization of one weight block.
#[derive(Debug, Clone)]
pub struct Standardized {
    pub mu: f64,
    pub sigma: f64,
    /// `(w - mu) / sigma`, present unless the block is degenerate.
    pub std_weights: Option<Vec<f64>>,
}

impl Standardized {
    pub fn is_degenerate(&self) -> bool {
        self.std_weights.is_none()
    }
}

/// Mean and population standard deviation of `weights`, plus the
/// standardized values when `sigma > SIGMA_EPS`.
pub fn standardize(weights: &[f64]) -> Result<Standardized> {
    if weights.is_empty() {
        return Err(Error::EmptyInput);
    }
    let m = weights.len() as f64;
    let mu = weights.iter().sum::<f64>() / m;
    let var = weights.iter().map(|w| (w - mu) * (w - mu)).sum::<f64>() / m;
    let sigma = var.sqrt();
    let std_weights = if sigma > SIGMA_EPS {
        Some(weights.iter().map(|w| (w - mu) / sigma).collect())
    } else {
        None
    };
    Ok(Standardized { mu, sigma, std_weights })
}

/// Snaps standardized weights to the codebook, returning the quantized
/// values and their interval indices.
pub fn quantize_std(std_weights: &[f64], cb: &Codebook) -> (Vec<f64>, Vec<u8>) {
    let mut values = Vec::with_capacity(std_weights.len());
    let mut indices = Vec::with_capacity(std_weights.len());
    for &w in std_weights {
        let j = cb.index_of(w);
        values.push(cb.codes[j]);
        indices.push(j as u8);
    }
    (values, indices)
}

/// Contiguous equal spans of a flattened weight; remainder elements join
/// the last block.
pub fn block_ranges(elements: usize, block_count: usize) -> Result<Vec<std::ops::Range<usize>>> {
    if block_count == 0 || block_count > elements {
        return Err(Error::InvalidBlockCount { block_count, elements });
    }
    let base = elements / block_count;
    let mut ranges = Vec::with_capacity(block_count);
    for i in 0..block_count {
        let start = i * base;
        let end = if i + 1 == block_count { elements } else { start + base };
        ranges.push(start..end);
    }
    Ok(ranges)
}

/// Per-block forward cache consumed by [`fake_quant_backward`].
#[derive(Debug, Clone)]
pub struct BlockState {
    pub range: std::ops::Range<usize>,
    pub mu: f64,
    pub sigma: f64,
    /// `None` marks a degenerate (passed-through) block.
    pub standardized: Option<Vec<f64>>,
    pub quantized_std: Option<Vec<f64>>,
}

/// Forward cache of one fake-quantized weight tensor.
#[derive(Debug, Clone)]
pub struct QuantState {
    pub elements: usize,
    pub blocks: Vec<BlockState>,
}

/// Standardize → quantize → de-standardize, block-wise.
///
/// Returns the quantized-valued weights and the cache needed for the
/// exact STE backward. Degenerate blocks are returned unchanged.
pub fn fake_quant_forward(
    weights: &[f64],
    cb: &Codebook,
    block_count: usize,
) -> Result<(Vec<f64>, QuantState)> {
    let ranges = block_ranges(weights.len(), block_count)?;
    let mut out = weights.to_vec();
    let mut blocks = Vec::with_capacity(ranges.len());
    for range in ranges {
        let chunk = &weights[range.clone()];
        let std = standardize(chunk)?;
        match std.std_weights {
            None => blocks.push(BlockState {
                range,
                mu: std.mu,
                sigma: std.sigma,
                standardized: None,
                quantized_std: None,
            }),
            Some(std_weights) => {
                let (quantized_std, _) = quantize_std(&std_weights, cb);
                for (slot, q) in out[range.clone()].iter_mut().zip(&quantized_std) {
                    *slot = q * std.sigma + std.mu;
                }
                blocks.push(BlockState {
                    range,
                    mu: std.mu,
                    sigma: std.sigma,
                    standardized: Some(std_weights),
                    quantized_std: Some(quantized_std),
                });
            }
        }
    }
    Ok((out, QuantState { elements: weights.len(), blocks }))
}

/// Exact STE gradient: contracts the full Jacobian against `upstream` in
/// O(m) per block. Degenerate blocks return their upstream slice
/// unchanged.
pub fn fake_quant_backward(state: &QuantState, upstream: &[f64]) -> Result<Vec<f64>> {
    if upstream.len() != state.elements {
        return Err(Error::LengthMismatch { expected: state.elements, got: upstream.len() });
    }
    let mut grad = upstream.to_vec();
    for block in &state.blocks {
        let (Some(std_w), Some(q_std)) = (&block.standardized, &block.quantized_std) else {
            continue;
        };
        let g = &upstream[block.range.clone()];
        let m = std_w.len() as f64;
        let contraction: f64 = g
            .iter()
            .zip(q_std.iter().zip(std_w))
            .map(|(gi, (qi, wi))| gi * (qi - wi))
            .sum();
        for (slot, wk) in grad[block.range.clone()].iter_mut().zip(std_w) {
            *slot += wk / m * contraction;
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::Metric;

    const C1: f64 = 0.674_489_750_196_081_7;

    fn cb1() -> Codebook {
        Codebook::standard(1, Metric::L1).unwrap()
    }

    #[test]
    fn standardize_two_values() {
        let s = standardize(&[2.0, 0.0]).unwrap();
        assert_eq!(s.mu, 1.0);
        assert_eq!(s.sigma, 1.0);
        assert_eq!(s.std_weights.unwrap(), vec![1.0, -1.0]);
    }

    #[test]
    fn standardize_constant_vector_is_degenerate() {
        let s = standardize(&[5.0, 5.0, 5.0]).unwrap();
        assert!(s.is_degenerate());
        assert_eq!(s.mu, 5.0);
        assert_eq!(s.sigma, 0.0);
    }

    #[test]
    fn standardize_single_element_is_degenerate() {
        let s = standardize(&[3.25]).unwrap();
        assert!(s.is_degenerate());
        assert_eq!(s.mu, 3.25);
    }

    #[test]
    fn standardize_rejects_empty() {
        assert!(standardize(&[]).is_err());
    }

    #[test]
    fn standardized_moments_are_population() {
        let weights: Vec<f64> = (0..257).map(|i| (i as f64).sin() * 3.0 + 0.7).collect();
        let s = standardize(&weights).unwrap();
        let std = s.std_weights.unwrap();
        let sum: f64 = std.iter().sum();
        let sq: f64 = std.iter().map(|x| x * x).sum::<f64>() / std.len() as f64;
        assert!(sum.abs() < 1e-6);
        assert!((sq - 1.0).abs() < 1e-6);
    }

    #[test]
    fn quantize_zero_takes_lower_interval() {
        let (values, indices) = quantize_std(&[0.0], &cb1());
        assert_eq!(indices, vec![0]);
        assert!((values[0] + C1).abs() < 1e-8);
    }

    #[test]
    fn quantize_unit_values() {
        let (values, _) = quantize_std(&[1.0, -1.0], &cb1());
        assert!((values[0] - C1).abs() < 1e-8);
        assert!((values[1] + C1).abs() < 1e-8);
    }

    #[test]
    fn quantize_is_idempotent_on_codes() {
        let cb = Codebook::standard(3, Metric::L2).unwrap();
        let (values, _) = quantize_std(&cb.codes.clone(), &cb);
        assert_eq!(values, cb.codes);
    }

    #[test]
    fn forward_two_values() {
        let (q, state) = fake_quant_forward(&[2.0, 0.0], &cb1(), 1).unwrap();
        assert!((q[0] - (1.0 + C1)).abs() < 1e-9);
        assert!((q[1] - (1.0 - C1)).abs() < 1e-9);
        assert_eq!(state.blocks.len(), 1);
    }

    #[test]
    fn forward_constant_vector_passes_through() {
        let w = [0.5, 0.5, 0.5, 0.5];
        let (q, state) = fake_quant_forward(&w, &cb1(), 1).unwrap();
        assert_eq!(q, w);
        assert!(state.blocks[0].standardized.is_none());
    }

    #[test]
    fn forward_block_remainder_joins_last() {
        let ranges = block_ranges(10, 3).unwrap();
        assert_eq!(ranges, vec![0..3, 3..6, 6..10]);
        assert!(block_ranges(2, 3).is_err());
        assert!(block_ranges(2, 0).is_err());
    }

    #[test]
    fn backward_hand_jacobian() {
        let (_, state) = fake_quant_forward(&[2.0, 0.0], &cb1(), 1).unwrap();
        // Row 0 of the Jacobian via a basis upstream vector.
        let row0 = fake_quant_backward(&state, &[1.0, 0.0]).unwrap();
        let e0 = C1 - 1.0; // ŵ'_0 - w'_0
        assert!((row0[0] - (1.0 + 1.0 * e0 / 2.0)).abs() < 1e-9);
        assert!((row0[1] - (-1.0 * e0 / 2.0)).abs() < 1e-9);
        assert!((row0[0] - 0.837_244_875_098_04).abs() < 1e-6);
        assert!((row0[1] - 0.162_755_124_901_96).abs() < 1e-6);
    }

    #[test]
    fn backward_rows_sum_to_one() {
        let weights: Vec<f64> = (0..17).map(|i| (i as f64 * 0.77).cos() * 2.0 + 0.3).collect();
        let cb = Codebook::standard(2, Metric::L1).unwrap();
        let (_, state) = fake_quant_forward(&weights, &cb, 1).unwrap();
        for i in 0..weights.len() {
            let mut basis = vec![0.0; weights.len()];
            basis[i] = 1.0;
            let row = fake_quant_backward(&state, &basis).unwrap();
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-6, "row {i} sums to {sum}");
        }
    }

    #[test]
    fn backward_degenerate_is_identity() {
        let (_, state) = fake_quant_forward(&[4.0, 4.0, 4.0], &cb1(), 1).unwrap();
        let upstream = [0.3, -0.2, 0.9];
        assert_eq!(fake_quant_backward(&state, &upstream).unwrap(), upstream);
    }

    #[test]
    fn backward_rejects_length_mismatch() {
        let (_, state) = fake_quant_forward(&[2.0, 0.0], &cb1(), 1).unwrap();
        assert!(fake_quant_backward(&state, &[1.0]).is_err());
    }
}
