//! Sweeps over bit widths, fixed storage budgets, and parameter-noise
//! intensities. Every sweep cell is an independent deterministic run.

use anyhow::bail;
use serde::Serialize;

use bitadapt_core::model::{ToyBackbone, TrainedModel};

use crate::config::{derive_seed, RunConfig, FULL_BITS};
use crate::report::RunReport;
use crate::train::{evaluate_model, run_full_ft, run_qat, target_task};

#[derive(Debug, Clone, Serialize)]
pub struct BitSweepRow {
    pub bits: u8,
    pub hidden: usize,
    pub accuracy: f64,
    pub payload_bytes: u64,
    pub payload_estimate: u64,
    pub selected_scale: f64,
}

/// One QAT (or full-precision) run per bit width at fixed hidden dim.
pub fn sweep_bitwidth(
    cfg: &RunConfig,
    backbone: &ToyBackbone,
    bits: &[u8],
) -> anyhow::Result<Vec<(BitSweepRow, RunReport)>> {
    let mut rows = Vec::new();
    for &b in bits {
        let mut cell = cfg.clone();
        cell.adapter.bits = b;
        if cell.adapter.head_bits != FULL_BITS {
            cell.adapter.head_bits = b;
        }
        let outcome = run_qat(&cell, backbone)?;
        rows.push((
            BitSweepRow {
                bits: b,
                hidden: cell.adapter.hidden,
                accuracy: outcome.report.final_accuracy,
                payload_bytes: outcome.report.adapter_payload_bytes,
                payload_estimate: outcome.report.adapter_payload_estimate,
                selected_scale: outcome.report.selected_scale,
            },
            outcome.report,
        ));
    }
    Ok(rows)
}

/// Fixed-budget sweep: every (b, h) with b·h equal to the budget, from
/// full precision down to 1 bit.
pub fn sweep_budget(
    cfg: &RunConfig,
    backbone: &ToyBackbone,
    budget: u64,
) -> anyhow::Result<Vec<(BitSweepRow, RunReport)>> {
    if budget == 0 {
        bail!("budget must be positive");
    }
    let mut rows = Vec::new();
    for b in [32u8, 8, 4, 2, 1] {
        if budget % b as u64 != 0 {
            continue;
        }
        let hidden = (budget / b as u64) as usize;
        let mut cell = cfg.clone();
        cell.adapter.bits = b;
        cell.adapter.hidden = hidden;
        if cell.adapter.head_bits != FULL_BITS {
            cell.adapter.head_bits = b;
        }
        let outcome = run_qat(&cell, backbone)?;
        rows.push((
            BitSweepRow {
                bits: b,
                hidden,
                accuracy: outcome.report.final_accuracy,
                payload_bytes: outcome.report.adapter_payload_bytes,
                payload_estimate: outcome.report.adapter_payload_estimate,
                selected_scale: outcome.report.selected_scale,
            },
            outcome.report,
        ));
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct NoiseSweepRow {
    pub regime: String,
    pub sigma_ratio: f64,
    pub trials: usize,
    pub mean_accuracy: f64,
}

/// Trained models for the two regimes compared by the noise probe:
/// full-precision adapter tuning and full fine-tuning.
pub struct NoiseModels {
    pub adapter: TrainedModel,
    pub full: TrainedModel,
}

pub fn train_noise_models(cfg: &RunConfig, backbone: &ToyBackbone) -> anyhow::Result<NoiseModels> {
    let mut fp_cfg = cfg.clone();
    fp_cfg.adapter.bits = FULL_BITS;
    fp_cfg.adapter.head_bits = FULL_BITS;
    let adapter = run_qat(&fp_cfg, backbone)?.model;
    let full = run_full_ft(cfg, backbone)?.0;
    Ok(NoiseModels { adapter, full })
}

/// Mean test accuracy per (regime, sigma_ratio) over `trials` noise
/// draws. Each tensor is perturbed with noise scaled by its own std.
pub fn sweep_noise(
    cfg: &RunConfig,
    models: &NoiseModels,
    ratios: &[f64],
    trials: usize,
) -> anyhow::Result<Vec<NoiseSweepRow>> {
    if trials == 0 {
        bail!("need at least one noise trial");
    }
    let data = target_task(cfg);
    let mut rows = Vec::new();
    for (regime, model) in [("adapter", &models.adapter), ("full_ft", &models.full)] {
        for (ri, &ratio) in ratios.iter().enumerate() {
            let mut total = 0.0;
            for trial in 0..trials {
                let seed = derive_seed(cfg.seed, &format!("noise-{regime}-{ri}-{trial}"));
                let noisy = model.add_parameter_noise(ratio, seed);
                total += evaluate_model(&noisy, &data.test).accuracy;
            }
            rows.push(NoiseSweepRow {
                regime: regime.into(),
                sigma_ratio: ratio,
                trials,
                mean_accuracy: total / trials as f64,
            });
        }
    }
    Ok(rows)
}
