//! Run reports and artifact writers. Every artifact embeds the config
//! hash; CSV files carry it as a leading comment line.

use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub seed: u64,
    /// "pretrain", "qat", "adapter_fp", "ptq", "full_ft", ...
    pub method: String,
    pub bits: u8,
    pub hidden: usize,
    pub selected_scale: f64,
    pub final_accuracy: f64,
    pub best_val_accuracy: f64,
    pub loss_curve: Vec<f64>,
    /// Measured payload of the adapter tensors in the written checkpoint.
    pub adapter_payload_bytes: u64,
    /// Analytic size model for the same configuration (matches the
    /// measurement exactly for single-block quantization).
    pub adapter_payload_estimate: u64,
    /// Measured payload including head and metadata tensors.
    pub total_payload_bytes: u64,
    /// Informational only; excluded from determinism comparisons.
    pub wall_time_secs: f64,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))
}

/// CSV with `# config_hash: <hash>` as the first line, then a header row.
pub fn write_csv(
    path: &Path,
    config_hash: &str,
    header: &[&str],
    rows: &[Vec<String>],
) -> anyhow::Result<()> {
    let mut out = String::new();
    out.push_str(&format!("# config_hash: {config_hash}\n"));
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}
