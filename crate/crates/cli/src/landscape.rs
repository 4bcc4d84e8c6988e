//! Loss-landscape scans along two random filter-normalized directions.
//!
//! Directions are drawn per tuned tensor and rescaled so each row matches
//! the corresponding parameter row's norm, which makes slices comparable
//! across models of different scales. The grid point (0, 0) evaluates the
//! unperturbed model, so the center cell equals the plain evaluation loss
//! exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use bitadapt_core::codebook::Codebook;
use bitadapt_core::model::TrainedModel;
use bitadapt_core::tape::Tensor;

use crate::config::derive_seed;
use crate::task::Dataset;
use crate::train::evaluate;

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct LandscapeCell {
    pub alpha: f64,
    pub beta: f64,
    pub loss: f64,
}

/// One random direction per tuned tensor, filter-normalized row-wise
/// against the parameter values.
fn directions(model: &TrainedModel, seed: u64) -> Vec<(String, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for name in &model.tuned {
        let param = model.tensor(name).expect("tuned tensor exists");
        let mut dir = Tensor::zeros(param.rows, param.cols);
        for v in dir.data.iter_mut() {
            *v = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        }
        for r in 0..param.rows {
            let target = param.row_norm(r);
            let current = dir.row_norm(r);
            let scale = if current > 0.0 { target / current } else { 0.0 };
            for v in dir.row_mut(r) {
                *v *= scale;
            }
        }
        out.push((name.clone(), dir));
    }
    out
}

/// Scans the training loss over θ + α·u + β·v restricted to the tuned
/// parameters. `quant` mirrors the training-time quantization context so
/// a QAT model's surface is the loss it actually optimized.
pub fn scan_landscape(
    model: &TrainedModel,
    data: &Dataset,
    quant: Option<(&Codebook, usize)>,
    grid_half_width: usize,
    step: f64,
    seed: u64,
) -> Vec<LandscapeCell> {
    let u = directions(model, derive_seed(seed, "landscape-u"));
    let v = directions(model, derive_seed(seed, "landscape-v"));
    let n = grid_half_width as i64;
    let mut cells = Vec::with_capacity(((2 * n + 1) * (2 * n + 1)) as usize);
    for i in -n..=n {
        for j in -n..=n {
            let alpha = i as f64 * step;
            let beta = j as f64 * step;
            let probe = if i == 0 && j == 0 {
                model.clone()
            } else {
                let mut perturbed = model.clone();
                for ((name, du), (_, dv)) in u.iter().zip(&v) {
                    let tensor = perturbed.tensor_mut(name).expect("tuned tensor exists");
                    tensor.add_assign_scaled(du, alpha);
                    tensor.add_assign_scaled(dv, beta);
                }
                perturbed
            };
            let eval = evaluate(
                &probe.backbone,
                probe.adapters.as_ref().map(|a| (a, probe.scale)),
                quant,
                data,
                64,
            );
            cells.push(LandscapeCell { alpha, beta, loss: eval.loss });
        }
    }
    cells
}
