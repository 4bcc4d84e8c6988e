//! Run configuration: one JSON document fully determines a run.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use bitadapt_core::ckpt::AdapterKind;
use bitadapt_core::codebook::Metric;
use bitadapt_core::model::BackboneConfig;

/// Full-precision sentinel for `bits` fields.
pub const FULL_BITS: u8 = 32;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
    pub task: TaskConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            seed: 42,
            backbone: BackboneConfig::default(),
            adapter: AdapterConfig::default(),
            task: TaskConfig::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            sweep: SweepConfig::default(),
        };
        cfg.normalize();
        cfg
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub kind: AdapterKind,
    pub hidden: usize,
    /// 1..=8 for quantized training, 32 for full precision.
    pub bits: u8,
    pub block_count: usize,
    pub metric: Metric,
    /// Fixed adapter scale; `None` searches `s_candidates` on the
    /// validation split.
    pub scale: Option<f64>,
    pub s_candidates: Vec<f64>,
    /// Head storage width: 32 keeps the head full precision, otherwise
    /// must equal `bits`.
    pub head_bits: u8,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            kind: AdapterKind::AdaptFormer,
            hidden: 8,
            bits: 1,
            block_count: 1,
            metric: Metric::L1,
            scale: None,
            s_candidates: vec![0.01, 0.1, 1.0, 10.0, 100.0],
            head_bits: FULL_BITS,
        }
    }
}

/// Synthetic classification tasks: Gaussian class prototypes in pixel
/// space plus i.i.d. pixel noise. The target side draws fresh prototypes
/// from its own seed and passes inputs through a seeded pixel scramble
/// blended by `shift`, giving a controllable source/target gap.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub classes: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
    /// Std of class prototype pixels.
    pub signal: f64,
    /// Std of per-sample additive noise.
    pub noise: f64,
    pub source_seed: u64,
    pub target_seed: u64,
    /// 0 = target distribution matches source geometry, 1 = fully
    /// scrambled input space.
    pub shift: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            classes: 6,
            train_samples: 512,
            val_samples: 256,
            test_samples: 512,
            signal: 1.0,
            noise: 1.0,
            source_seed: 7,
            target_seed: 8,
            shift: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch: usize,
    /// Fraction of total steps spent in linear warm-up.
    pub warmup_frac: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch: 16,
            warmup_frac: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    /// Adaptation epochs for the selected scale.
    pub epochs: usize,
    /// Shorter screening epochs per scale candidate.
    pub s_search_epochs: usize,
    /// Samples drawn from the train split when scanning loss landscapes.
    pub landscape_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { pretrain_epochs: 10, epochs: 4, s_search_epochs: 1, landscape_samples: 128 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub bits: Vec<u8>,
    /// Storage budget b·h for the fixed-budget sweep.
    pub budget: u64,
    pub sigma_ratios: Vec<f64>,
    pub block_counts: Vec<usize>,
    pub noise_trials: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            bits: vec![1, 2, 4, 8, 32],
            budget: 32,
            sigma_ratios: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            block_counts: vec![1, 8, 32],
            noise_trials: 3,
        }
    }
}

impl RunConfig {
    pub fn from_json(json: &str) -> anyhow::Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(json)?;
        cfg.normalize();
        Ok(cfg)
    }

    /// The task owns the class count; the head is sized to match.
    pub fn normalize(&mut self) {
        self.backbone.classes = self.task.classes;
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Stable short hash of the effective configuration; embedded in
    /// every artifact this run writes.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.backbone.validate()?;
        if self.adapter.hidden == 0 {
            anyhow::bail!("adapter hidden dim must be at least 1");
        }
        if !(1..=8).contains(&self.adapter.bits) && self.adapter.bits != FULL_BITS {
            anyhow::bail!("adapter bits must be 1..=8 or 32, got {}", self.adapter.bits);
        }
        if self.adapter.head_bits != FULL_BITS && self.adapter.head_bits != self.adapter.bits {
            anyhow::bail!(
                "head bits must be 32 or match adapter bits ({})",
                self.adapter.bits
            );
        }
        if let Some(s) = self.adapter.scale {
            if s <= 0.0 {
                anyhow::bail!("adapter scale must be positive, got {s}");
            }
        }
        if self.adapter.block_count == 0 {
            anyhow::bail!("block count must be at least 1");
        }
        if self.optim.batch == 0 || self.task.train_samples == 0 {
            anyhow::bail!("batch and train sample counts must be positive");
        }
        Ok(())
    }
}

/// Deterministic stream seed derived from the run seed and a role tag.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}
