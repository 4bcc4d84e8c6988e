//! Post-training quantization baseline: k-means (L2 Lloyd) on each
//! trained full-precision adapter matrix's own standardized values, no
//! retraining. The comparison target for quantization-aware training.

use std::time::Instant;

use anyhow::Context;

use bitadapt_core::ckpt::Checkpoint;
use bitadapt_core::codebook::{cluster_1d, Metric};
use bitadapt_core::model::{ToyBackbone, TrainedModel};
use bitadapt_core::pack::{quantize_tensor_empirical, QuantizedTensor};
use bitadapt_core::quant::standardize;
use bitadapt_core::tape::Tensor;

use crate::config::{RunConfig, FULL_BITS};
use crate::io::SCALE_TENSOR;
use crate::report::RunReport;
use crate::train::{evaluate, target_task, RunOutcome};

/// Quantizes the trained adapters of `fp_model` to `bits` with per-matrix
/// k-means and evaluates without retraining. `bits = 32` is the no-op
/// path (accuracy equals the full-precision model's).
pub fn run_ptq(
    cfg: &RunConfig,
    _backbone: &ToyBackbone,
    fp_model: &TrainedModel,
    bits: u8,
) -> anyhow::Result<RunOutcome> {
    let started = Instant::now();
    let data = target_task(cfg);
    let adapters = fp_model.adapters.as_ref().context("PTQ needs trained adapters")?;

    let mut model = fp_model.clone();
    let mut checkpoint = Checkpoint::new(bits.min(FULL_BITS), Metric::L2);

    if bits == FULL_BITS {
        for (name, tensor) in adapters.named() {
            checkpoint.push(name, QuantizedTensor::raw(tensor.rows, tensor.cols, &tensor.data)?)?;
        }
    } else {
        let clusters = 1usize << bits;
        let quantized_adapters = model.adapters.as_mut().unwrap();
        for ((name, source), (_, dest)) in adapters.named().iter().zip(quantized_adapters.named_mut())
        {
            let std = standardize(&source.data)?;
            let (values, codes) = match &std.std_weights {
                None => (source.data.clone(), vec![0.0]),
                Some(std_w) => {
                    let cb = cluster_1d(std_w, clusters, Metric::L2, 1e-9, 10_000)?;
                    let values = std_w
                        .iter()
                        .map(|&w| cb.quantize(w) * std.sigma + std.mu)
                        .collect();
                    (values, cb.codes.clone())
                }
            };
            *dest = Tensor::from_vec(source.rows, source.cols, values);
            let qt = quantize_tensor_empirical(
                &source.data,
                source.rows,
                source.cols,
                bits,
                &[codes],
                1,
            )?;
            checkpoint.push(name.clone(), qt)?;
        }
    }

    // Head stays as trained, stored raw.
    let head_t = model.backbone.head_w.transposed();
    checkpoint.push("head.weight", QuantizedTensor::raw(head_t.rows, head_t.cols, &head_t.data)?)?;
    checkpoint.push(
        "head.bias",
        QuantizedTensor::raw(model.backbone.head_b.len(), 1, &model.backbone.head_b.data)?,
    )?;
    checkpoint.push(SCALE_TENSOR, QuantizedTensor::raw(1, 1, &[model.scale])?)?;

    let test = evaluate(
        &model.backbone,
        model.adapters.as_ref().map(|a| (a, model.scale)),
        None,
        &data.test,
        64,
    );
    let val = evaluate(
        &model.backbone,
        model.adapters.as_ref().map(|a| (a, model.scale)),
        None,
        &data.val,
        64,
    );
    let adapter_payload = checkpoint
        .payload_bytes_where(|n| n.contains(".adapter.") || n.contains(".lora."))
        as u64;
    let report = RunReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        method: "ptq".into(),
        bits,
        hidden: cfg.adapter.hidden,
        selected_scale: model.scale,
        final_accuracy: test.accuracy,
        best_val_accuracy: val.accuracy,
        loss_curve: Vec::new(),
        adapter_payload_bytes: adapter_payload,
        adapter_payload_estimate: 0,
        total_payload_bytes: checkpoint.payload_bytes() as u64,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok(RunOutcome { model, report, checkpoint })
}
