//! Per-matrix weight histograms with Gaussian fits, for inspecting
//! whether trained adapter weights look bell-shaped.

use serde::Serialize;

use bitadapt_core::tape::Tensor;

#[derive(Debug, Clone, Serialize)]
pub struct HistogramEntry {
    pub tensor: String,
    pub elements: usize,
    pub degenerate: bool,
    pub mu: f64,
    pub sigma: f64,
    /// Excess kurtosis (0 for an exact Gaussian); `None` when degenerate.
    pub excess_kurtosis: Option<f64>,
    pub bins: Vec<HistBin>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct HistBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Histograms plus fitted (mu, sigma) and a normality score per matrix.
/// Constant tensors carry the degenerate flag with no fit or bins.
pub fn dump_histograms(tensors: &[(String, &Tensor)], bin_count: usize) -> Vec<HistogramEntry> {
    tensors
        .iter()
        .map(|(name, t)| {
            let (mu, sigma) = t.mean_std();
            if sigma <= 1e-12 {
                return HistogramEntry {
                    tensor: name.clone(),
                    elements: t.len(),
                    degenerate: true,
                    mu,
                    sigma: 0.0,
                    excess_kurtosis: None,
                    bins: Vec::new(),
                };
            }
            let m4 = t.data.iter().map(|v| (v - mu).powi(4)).sum::<f64>() / t.len() as f64;
            let excess_kurtosis = m4 / (sigma * sigma * sigma * sigma) - 3.0;

            let min = t.data.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = t.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let width = (max - min) / bin_count as f64;
            let mut counts = vec![0usize; bin_count];
            for &v in &t.data {
                let idx = (((v - min) / width) as usize).min(bin_count - 1);
                counts[idx] += 1;
            }
            let bins = counts
                .into_iter()
                .enumerate()
                .map(|(i, count)| HistBin {
                    lo: min + i as f64 * width,
                    hi: min + (i + 1) as f64 * width,
                    count,
                })
                .collect();
            HistogramEntry {
                tensor: name.clone(),
                elements: t.len(),
                degenerate: false,
                mu,
                sigma,
                excess_kurtosis: Some(excess_kurtosis),
                bins,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn gaussian_tensor_fit_within_two_percent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..40_000)
            .map(|_| {
                <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) * 0.05
                    + 0.2
            })
            .collect();
        let t = Tensor::from_vec(200, 200, data);
        let entries = dump_histograms(&[("w".into(), &t)], 32);
        let e = &entries[0];
        assert!(!e.degenerate);
        assert!((e.mu - 0.2).abs() / 0.2 < 0.02, "mu {}", e.mu);
        assert!((e.sigma - 0.05).abs() / 0.05 < 0.02, "sigma {}", e.sigma);
        assert!(e.excess_kurtosis.unwrap().abs() < 0.2);
        let total: usize = e.bins.iter().map(|b| b.count).sum();
        assert_eq!(total, 40_000);
    }

    #[test]
    fn constant_tensor_is_degenerate() {
        let t = Tensor::from_vec(2, 3, vec![1.5; 6]);
        let entries = dump_histograms(&[("c".into(), &t)], 16);
        assert!(entries[0].degenerate);
        assert!(entries[0].bins.is_empty());
        assert!(entries[0].excess_kurtosis.is_none());
    }

    #[test]
    fn bin_edges_cover_range() {
        let t = Tensor::from_vec(1, 5, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        let entries = dump_histograms(&[("r".into(), &t)], 4);
        let bins = &entries[0].bins;
        assert_eq!(bins.first().unwrap().lo, 0.0);
        assert_eq!(bins.last().unwrap().hi, 4.0);
        assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), 5);
    }
}
