//! Conversions between in-memory models and `.badp` checkpoints, plus
//! the JSON dump format used by the `pack` / `unpack` subcommands.
//!
//! The frozen backbone is stored as a raw 32-bit sidecar (header bit
//! width 32, every tensor kind raw). Adapter checkpoints store the
//! quantized adapter matrices, the head (raw or quantized per
//! `head_bits`), and the selected adapter scale as a 1×1 raw tensor named
//! `adapter.scale`.

use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use bitadapt_core::ckpt::{pack_head, AdapterKind, Checkpoint};
use bitadapt_core::codebook::{Codebook, Metric};
use bitadapt_core::model::{Adapters, BackboneConfig, ToyBackbone, TrainedModel};
use bitadapt_core::pack::{
    quantize_tensor, reconstruct, BlockPayload, QuantBlock, QuantizedTensor, TensorPayload,
};
use bitadapt_core::tape::Tensor;

use crate::config::{RunConfig, FULL_BITS};

pub const SCALE_TENSOR: &str = "adapter.scale";

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> anyhow::Result<()> {
    std::fs::write(path, ckpt.to_bytes())
        .with_context(|| format!("writing checkpoint {}", path.display()))
}

pub fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    let bytes =
        std::fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    Checkpoint::from_bytes(&bytes)
        .with_context(|| format!("decoding checkpoint {}", path.display()))
}

/// Raw 32-bit sidecar of every backbone tensor (head included).
pub fn backbone_to_checkpoint(backbone: &ToyBackbone) -> Checkpoint {
    let mut ckpt = Checkpoint::new(FULL_BITS, Metric::L1);
    for (name, tensor) in backbone.named() {
        let qt = QuantizedTensor::raw(tensor.rows, tensor.cols, &tensor.data)
            .expect("backbone tensor shapes are consistent");
        ckpt.push(name, qt).expect("backbone names are unique");
    }
    ckpt
}

/// Rebuilds a backbone from a raw sidecar, validating shapes against the
/// configuration.
pub fn load_backbone(ckpt: &Checkpoint, cfg: BackboneConfig) -> anyhow::Result<ToyBackbone> {
    let placeholder = Codebook::standard(1, Metric::L1).expect("codebook builds");
    let mut backbone = ToyBackbone::init(cfg, 0)?;
    for (name, slot) in backbone.named_mut() {
        let stored = ckpt
            .get(&name)
            .with_context(|| format!("backbone checkpoint is missing tensor {name:?}"))?;
        if (stored.rows as usize, stored.cols as usize) != (slot.rows, slot.cols) {
            bail!(
                "tensor {name:?} has shape {}x{}, expected {}x{}",
                stored.rows,
                stored.cols,
                slot.rows,
                slot.cols
            );
        }
        slot.data = reconstruct(stored, &placeholder)?;
    }
    Ok(backbone)
}

/// Packs a trained adapter model: adapter matrices at `bits`, the head
/// per `head_bits`, and the adapter scale.
pub fn adapters_to_checkpoint(model: &TrainedModel, cfg: &RunConfig) -> anyhow::Result<Checkpoint> {
    let adapters =
        model.adapters.as_ref().context("model carries no adapters to pack")?;
    let bits = cfg.adapter.bits;
    let mut ckpt = Checkpoint::new(bits, cfg.adapter.metric);
    let cb = if bits == FULL_BITS {
        None
    } else {
        Some(Codebook::standard(bits, cfg.adapter.metric)?)
    };
    for (name, tensor) in adapters.named() {
        let qt = match &cb {
            Some(cb) => {
                quantize_tensor(&tensor.data, tensor.rows, tensor.cols, cb, cfg.adapter.block_count)?
            }
            None => QuantizedTensor::raw(tensor.rows, tensor.cols, &tensor.data)?,
        };
        ckpt.push(name, qt)?;
    }

    // The head packs classes-major (one bias entry per output row); the
    // model stores it features-major, so transpose on the way out.
    let head_cb = if cfg.adapter.head_bits == FULL_BITS { None } else { cb.as_ref() };
    let head_t = model.backbone.head_w.transposed();
    let head = pack_head(
        &head_t.data,
        head_t.rows,
        head_t.cols,
        &model.backbone.head_b.data,
        head_cb,
    )?;
    for (name, qt) in head {
        ckpt.push(name, qt)?;
    }
    ckpt.push(SCALE_TENSOR, QuantizedTensor::raw(1, 1, &[model.scale])?)?;
    Ok(ckpt)
}

/// Reconstructs adapters (and the stored head) from a checkpoint into a
/// backbone copy, returning the ready-to-evaluate model.
pub fn apply_adapter_checkpoint(
    backbone: &ToyBackbone,
    ckpt: &Checkpoint,
) -> anyhow::Result<TrainedModel> {
    let cb = if (1..=8).contains(&ckpt.bit_width) {
        Codebook::standard(ckpt.bit_width, ckpt.metric)?
    } else {
        Codebook::standard(1, Metric::L1)?
    };
    let mut backbone = backbone.clone();
    let kind = if ckpt.get("block0.adapter.down").is_some() {
        AdapterKind::AdaptFormer
    } else if ckpt.get("block0.lora.a_q").is_some() {
        AdapterKind::Lora
    } else {
        bail!("checkpoint holds no recognizable adapter tensors");
    };
    let probe = match kind {
        AdapterKind::AdaptFormer => ckpt.get("block0.adapter.down").unwrap(),
        AdapterKind::Lora => ckpt.get("block0.lora.a_q").unwrap(),
    };
    let hidden = probe.cols as usize;
    let mut adapters =
        Adapters::init(kind, backbone.cfg.dim, hidden, backbone.cfg.depth, 0);
    for (name, slot) in adapters.named_mut() {
        let stored = ckpt
            .get(&name)
            .with_context(|| format!("adapter checkpoint is missing tensor {name:?}"))?;
        if (stored.rows as usize, stored.cols as usize) != (slot.rows, slot.cols) {
            bail!("tensor {name:?} shape mismatch");
        }
        slot.data = reconstruct(stored, &cb)?;
    }
    let mut tuned: Vec<String> = adapters.named().into_iter().map(|(n, _)| n).collect();

    if let Some(stored) = ckpt.get("head.weight") {
        let values = reconstruct(stored, &cb)?;
        let classes_major =
            Tensor::from_vec(stored.rows as usize, stored.cols as usize, values).transposed();
        if (classes_major.rows, classes_major.cols)
            != (backbone.head_w.rows, backbone.head_w.cols)
        {
            bail!("head.weight shape mismatch");
        }
        backbone.head_w = classes_major;
        tuned.push("head.weight".to_owned());
    }
    if let Some(stored) = ckpt.get("head.bias") {
        let values = reconstruct(stored, &cb)?;
        if values.len() != backbone.head_b.len() {
            bail!("head.bias length mismatch");
        }
        backbone.head_b.data = values;
        tuned.push("head.bias".to_owned());
    }
    let scale = match ckpt.get(SCALE_TENSOR) {
        Some(t) => reconstruct(t, &cb)?[0],
        None => 1.0,
    };
    Ok(TrainedModel { backbone, adapters: Some(adapters), scale, tuned })
}

/// JSON mirror of a checkpoint for `unpack`/`pack`. Packed index bytes
/// are hex-encoded; all floats round-trip exactly.
#[derive(Debug, Serialize, Deserialize)]
pub struct CkptDump {
    pub bit_width: u8,
    pub metric: Metric,
    pub tensors: Vec<TensorDump>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TensorDump {
    pub name: String,
    pub rows: u32,
    pub cols: u32,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw: Option<Vec<f32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blocks: Option<Vec<BlockDump>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BlockDump {
    pub mu: f32,
    pub sigma: f32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub codes: Vec<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub packed_hex: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw: Option<Vec<f32>>,
}

pub fn dump_checkpoint(ckpt: &Checkpoint) -> CkptDump {
    let tensors = ckpt
        .tensors
        .iter()
        .map(|(name, t)| {
            let (kind, raw, blocks) = match &t.payload {
                TensorPayload::Raw(values) => ("raw", Some(values.clone()), None),
                TensorPayload::Quantized(blocks) => {
                    ("quantized", None, Some(blocks.iter().map(dump_block).collect()))
                }
                TensorPayload::Empirical(blocks) => {
                    ("empirical", None, Some(blocks.iter().map(dump_block).collect()))
                }
            };
            TensorDump {
                name: name.clone(),
                rows: t.rows,
                cols: t.cols,
                kind: kind.to_owned(),
                raw,
                blocks,
            }
        })
        .collect();
    CkptDump { bit_width: ckpt.bit_width, metric: ckpt.metric, tensors }
}

fn dump_block(block: &QuantBlock) -> BlockDump {
    let (packed_hex, raw) = match &block.payload {
        BlockPayload::Packed(bytes) => (Some(hex::encode(bytes)), None),
        BlockPayload::Raw(values) => (None, Some(values.clone())),
    };
    BlockDump { mu: block.mu, sigma: block.sigma, codes: block.codes.clone(), packed_hex, raw }
}

pub fn undump_checkpoint(dump: &CkptDump) -> anyhow::Result<Checkpoint> {
    let mut ckpt = Checkpoint::new(dump.bit_width, dump.metric);
    for t in &dump.tensors {
        let payload = match t.kind.as_str() {
            "raw" => TensorPayload::Raw(t.raw.clone().context("raw tensor needs values")?),
            "quantized" | "empirical" => {
                let blocks = t
                    .blocks
                    .as_ref()
                    .context("quantized tensor needs blocks")?
                    .iter()
                    .map(undump_block)
                    .collect::<anyhow::Result<Vec<_>>>()?;
                if t.kind == "quantized" {
                    TensorPayload::Quantized(blocks)
                } else {
                    TensorPayload::Empirical(blocks)
                }
            }
            other => bail!("unknown tensor kind {other:?}"),
        };
        let bit_width = if t.kind == "raw" { FULL_BITS } else { dump.bit_width };
        ckpt.push(
            t.name.clone(),
            QuantizedTensor { rows: t.rows, cols: t.cols, bit_width, payload },
        )?;
    }
    Ok(ckpt)
}

fn undump_block(b: &BlockDump) -> anyhow::Result<QuantBlock> {
    let payload = match (&b.packed_hex, &b.raw) {
        (Some(hex_str), None) => BlockPayload::Packed(hex::decode(hex_str)?),
        (None, Some(values)) => BlockPayload::Raw(values.clone()),
        _ => bail!("block must have exactly one of packed_hex or raw"),
    };
    Ok(QuantBlock { mu: b.mu, sigma: b.sigma, codes: b.codes.clone(), payload })
}

/// Trained-model tensors as plain (name, Tensor) pairs, adapter scale
/// included, for landscape/noise tooling.
pub fn model_tensor(model: &TrainedModel, name: &str) -> Option<Tensor> {
    model.tensor(name).cloned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backbone_sidecar_roundtrip() {
        let cfg = BackboneConfig::default();
        let backbone = ToyBackbone::init(cfg, 5).unwrap();
        let ckpt = backbone_to_checkpoint(&backbone);
        let loaded = load_backbone(&ckpt, cfg).unwrap();
        // f64 -> f32 -> f64: compare at f32 resolution.
        for ((name, a), (_, b)) in backbone.named().iter().zip(loaded.named().iter()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(*x as f32, *y as f32, "{name}");
            }
        }
    }

    #[test]
    fn adapter_checkpoint_roundtrip_quantized() {
        let mut cfg = RunConfig::default();
        cfg.adapter.bits = 1;
        let backbone = ToyBackbone::init(cfg.backbone, 5).unwrap();
        let mut adapters = Adapters::init(
            cfg.adapter.kind,
            cfg.backbone.dim,
            cfg.adapter.hidden,
            cfg.backbone.depth,
            9,
        );
        for (_, t) in adapters.named_mut() {
            for (i, v) in t.data.iter_mut().enumerate() {
                *v = ((i * 31) as f64 * 0.01).sin() * 0.04 + 0.001;
            }
        }
        let model = TrainedModel {
            backbone: backbone.clone(),
            adapters: Some(adapters),
            scale: 0.1,
            tuned: vec![],
        };
        let ckpt = adapters_to_checkpoint(&model, &cfg).unwrap();
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        let restored = apply_adapter_checkpoint(&backbone, &back).unwrap();
        assert_eq!(restored.scale as f32, 0.1f32);
        // Reconstructed adapters are codebook-valued, two levels per
        // matrix at 1 bit.
        let Some(Adapters::AdaptFormer(pairs)) = &restored.adapters else { panic!() };
        let mut distinct: Vec<f64> = pairs[0].down.data.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        assert!(distinct.len() <= 2);
    }

    #[test]
    fn dump_undump_is_byte_exact() {
        let mut cfg = RunConfig::default();
        cfg.adapter.bits = 2;
        cfg.adapter.metric = Metric::L2;
        let backbone = ToyBackbone::init(cfg.backbone, 3).unwrap();
        let mut adapters = Adapters::init(
            cfg.adapter.kind,
            cfg.backbone.dim,
            cfg.adapter.hidden,
            cfg.backbone.depth,
            4,
        );
        for (_, t) in adapters.named_mut() {
            for (i, v) in t.data.iter_mut().enumerate() {
                *v = ((i * 7) as f64 * 0.13).cos() * 0.02;
            }
        }
        let model =
            TrainedModel { backbone, adapters: Some(adapters), scale: 1.0, tuned: vec![] };
        let ckpt = adapters_to_checkpoint(&model, &cfg).unwrap();
        let bytes = ckpt.to_bytes();

        let dump = dump_checkpoint(&ckpt);
        let json = serde_json::to_string_pretty(&dump).unwrap();
        let parsed: CkptDump = serde_json::from_str(&json).unwrap();
        let rebuilt = undump_checkpoint(&parsed).unwrap();
        assert_eq!(rebuilt.to_bytes(), bytes);
    }
}
