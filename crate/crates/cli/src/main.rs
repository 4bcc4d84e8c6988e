//! `bitadapt` — train, quantize, store, and probe low-bit adapters on the
//! toy benchmark.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use bitadapt_cli::config::RunConfig;
use bitadapt_cli::io::{
    apply_adapter_checkpoint, backbone_to_checkpoint, dump_checkpoint, load_backbone,
    load_checkpoint, save_checkpoint, undump_checkpoint,
};
use bitadapt_cli::landscape::scan_landscape;
use bitadapt_cli::ptq::run_ptq;
use bitadapt_cli::report::{write_csv, write_json};
use bitadapt_cli::sweep::{sweep_bitwidth, sweep_budget, sweep_noise, train_noise_models};
use bitadapt_cli::task::{make_task, TaskSide};
use bitadapt_cli::train::{evaluate, pretrain_source, quant_context, run_qat};
use bitadapt_core::ckpt::{AdapterKind, InspectReport};
use bitadapt_core::model::merged_backbone;
use bitadapt_core::model::Adapters;

#[derive(Parser)]
#[command(name = "bitadapt", about = "Low-bit adapter training toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AdapterArg {
    Adaptformer,
    Lora,
}

/// Flags shared by every run-style subcommand; each one overrides the
/// corresponding config field.
#[derive(Args)]
struct CommonArgs {
    /// Run configuration JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Adapter bit width (1..=8, or 32 for full precision).
    #[arg(long)]
    bits: Option<u8>,
    /// Adapter hidden dimension.
    #[arg(long)]
    hidden: Option<usize>,
    /// Quantization block count per matrix.
    #[arg(long)]
    blocks: Option<usize>,
    /// Head storage width (32 or equal to --bits).
    #[arg(long)]
    head_bits: Option<u8>,
    #[arg(long, value_enum)]
    adapter: Option<AdapterArg>,
}

impl CommonArgs {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                RunConfig::from_json(&text)?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(bits) = self.bits {
            cfg.adapter.bits = bits;
        }
        if let Some(hidden) = self.hidden {
            cfg.adapter.hidden = hidden;
        }
        if let Some(blocks) = self.blocks {
            cfg.adapter.block_count = blocks;
        }
        if let Some(head_bits) = self.head_bits {
            cfg.adapter.head_bits = head_bits;
        }
        if let Some(kind) = self.adapter {
            cfg.adapter.kind = match kind {
                AdapterArg::Adaptformer => AdapterKind::AdaptFormer,
                AdapterArg::Lora => AdapterKind::Lora,
            };
        }
        cfg.validate()?;
        std::fs::create_dir_all(&self.out)
            .with_context(|| format!("creating {}", self.out.display()))?;
        Ok(cfg)
    }

    fn out(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the frozen backbone on the source task.
    Pretrain(CommonArgs),
    /// Adapter tuning on the target task (QAT when bits < 32).
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Pre-trained backbone checkpoint.
        #[arg(long)]
        backbone: PathBuf,
    },
    /// Post-training quantization of trained full-precision adapters.
    Ptq {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        backbone: PathBuf,
        /// Checkpoint of the full-precision adapter run to quantize.
        #[arg(long)]
        from: PathBuf,
    },
    /// Evaluate an adapter checkpoint on a task split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Merge LoRA adapters into the backbone before evaluating.
        #[arg(long)]
        merge: bool,
        /// Split to evaluate: train, val, or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Rebuild a .badp checkpoint from a JSON dump.
    Pack {
        /// JSON dump produced by `unpack`.
        #[arg(long)]
        from: PathBuf,
        /// Checkpoint path to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump a .badp checkpoint to JSON (bit-exact round trip with `pack`).
    Unpack {
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print header and per-tensor layout of a checkpoint as JSON.
    Inspect { ckpt: PathBuf },
    /// One adaptation run per bit width.
    SweepBits {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        backbone: PathBuf,
        /// Comma-separated bit widths.
        #[arg(long, value_delimiter = ',')]
        bits: Option<Vec<u8>>,
    },
    /// Fixed-budget sweep holding bits × hidden constant.
    SweepBudget {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        budget: Option<u64>,
    },
    /// Accuracy under parameter noise for adapter tuning vs full
    /// fine-tuning.
    SweepNoise {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Loss grid over two random filter-normalized directions.
    Landscape {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Grid half-width n; the grid has (2n+1)² cells.
        #[arg(long, default_value_t = 10)]
        grid: usize,
        #[arg(long, default_value_t = 0.1)]
        step: f64,
    },
    /// Per-matrix weight histograms with Gaussian fits.
    Hist {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 64)]
        bins: usize,
    },
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Pretrain(common) => {
            let cfg = common.load()?;
            let (backbone, report) = pretrain_source(&cfg)?;
            save_checkpoint(&common.out("backbone.badp"), &backbone_to_checkpoint(&backbone))?;
            write_json(&common.out("pretrain_report.json"), &report)?;
            std::fs::write(common.out("config.json"), cfg.to_json())?;
            println!(
                "pretrained backbone: source accuracy {:.4}, hash {}",
                report.final_accuracy,
                cfg.hash()
            );
        }
        Command::Train { common, backbone } => {
            let cfg = common.load()?;
            let backbone = load_backbone(&load_checkpoint(&backbone)?, cfg.backbone)?;
            let outcome = run_qat(&cfg, &backbone)?;
            save_checkpoint(&common.out("adapters.badp"), &outcome.checkpoint)?;
            write_json(&common.out("report.json"), &outcome.report)?;
            std::fs::write(common.out("config.json"), cfg.to_json())?;
            println!(
                "{}: test accuracy {:.4}, scale {}, adapter payload {} B",
                outcome.report.method,
                outcome.report.final_accuracy,
                outcome.report.selected_scale,
                outcome.report.adapter_payload_bytes
            );
        }
        Command::Ptq { common, backbone, from } => {
            let cfg = common.load()?;
            let backbone = load_backbone(&load_checkpoint(&backbone)?, cfg.backbone)?;
            let fp_model = apply_adapter_checkpoint(&backbone, &load_checkpoint(&from)?)?;
            let outcome = run_ptq(&cfg, &backbone, &fp_model, cfg.adapter.bits)?;
            save_checkpoint(&common.out("ptq.badp"), &outcome.checkpoint)?;
            write_json(&common.out("ptq_report.json"), &outcome.report)?;
            println!("ptq @{} bits: test accuracy {:.4}", cfg.adapter.bits, outcome.report.final_accuracy);
        }
        Command::Eval { common, backbone, ckpt, merge, split } => {
            let cfg = common.load()?;
            let backbone = load_backbone(&load_checkpoint(&backbone)?, cfg.backbone)?;
            let model = apply_adapter_checkpoint(&backbone, &load_checkpoint(&ckpt)?)?;
            let data = make_task(&cfg.task, &cfg.backbone, TaskSide::Target);
            let split_data = match split.as_str() {
                "train" => &data.train,
                "val" => &data.val,
                "test" => &data.test,
                other => anyhow::bail!("unknown split {other:?}"),
            };
            let result = if merge {
                let Some(Adapters::Lora(pairs)) = &model.adapters else {
                    anyhow::bail!("--merge applies to LoRA checkpoints only");
                };
                let merged = merged_backbone(&model.backbone, pairs, model.scale);
                evaluate(&merged, None, None, split_data, 64)
            } else {
                evaluate(
                    &model.backbone,
                    model.adapters.as_ref().map(|a| (a, model.scale)),
                    None,
                    split_data,
                    64,
                )
            };
            let summary = serde_json::json!({
                "config_hash": cfg.hash(),
                "split": split,
                "merged": merge,
                "loss": result.loss,
                "accuracy": result.accuracy,
            });
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Pack { from, out } => {
            let text = std::fs::read_to_string(&from)
                .with_context(|| format!("reading dump {}", from.display()))?;
            let dump = serde_json::from_str(&text)?;
            let ckpt = undump_checkpoint(&dump)?;
            save_checkpoint(&out, &ckpt)?;
            println!("packed {} tensors into {}", ckpt.tensors.len(), out.display());
        }
        Command::Unpack { ckpt, out } => {
            let parsed = load_checkpoint(&ckpt)?;
            let dump = dump_checkpoint(&parsed);
            write_json(&out, &dump)?;
            println!("unpacked {} tensors to {}", parsed.tensors.len(), out.display());
        }
        Command::Inspect { ckpt } => {
            let parsed = load_checkpoint(&ckpt)?;
            let report = InspectReport::from_checkpoint(&parsed);
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::SweepBits { common, backbone, bits } => {
            let cfg = common.load()?;
            let backbone = load_backbone(&load_checkpoint(&backbone)?, cfg.backbone)?;
            let bits = bits.unwrap_or_else(|| cfg.sweep.bits.clone());
            let rows = sweep_bitwidth(&cfg, &backbone, &bits)?;
            write_rows(
                &common.out("sweep_bits.csv"),
                &cfg,
                &rows.iter().map(|(r, _)| r.clone()).collect::<Vec<_>>(),
            )?;
            write_json(
                &common.out("sweep_bits_reports.json"),
                &rows.iter().map(|(_, rep)| rep.clone()).collect::<Vec<_>>(),
            )?;
            println!("wrote {} sweep rows", rows.len());
        }
        Command::SweepBudget { common, backbone, budget } => {
            let cfg = common.load()?;
            let backbone = load_backbone(&load_checkpoint(&backbone)?, cfg.backbone)?;
            let budget = budget.unwrap_or(cfg.sweep.budget);
            let rows = sweep_budget(&cfg, &backbone, budget)?;
            write_rows(
                &common.out("sweep_budget.csv"),
                &cfg,
                &rows.iter().map(|(r, _)| r.clone()).collect::<Vec<_>>(),
            )?;
            write_json(
                &common.out("sweep_budget_reports.json"),
                &rows.iter().map(|(_, rep)| rep.clone()).collect::<Vec<_>>(),
            )?;
            println!("wrote {} budget rows (b·h = {budget})", rows.len());
        }
        Command::SweepNoise { common, backbone, ratios, trials } => {
            let cfg = common.load()?;
            let backbone = load_backbone(&load_checkpoint(&backbone)?, cfg.backbone)?;
            let ratios = ratios.unwrap_or_else(|| cfg.sweep.sigma_ratios.clone());
            let trials = trials.unwrap_or(cfg.sweep.noise_trials);
            let models = train_noise_models(&cfg, &backbone)?;
            let rows = sweep_noise(&cfg, &models, &ratios, trials)?;
            let csv_rows: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![
                        r.regime.clone(),
                        format!("{}", r.sigma_ratio),
                        r.trials.to_string(),
                        format!("{:.6}", r.mean_accuracy),
                    ]
                })
                .collect();
            write_csv(
                &common.out("sweep_noise.csv"),
                &cfg.hash(),
                &["regime", "sigma_ratio", "trials", "mean_accuracy"],
                &csv_rows,
            )?;
            println!("wrote {} noise rows", rows.len());
        }
        Command::Landscape { common, backbone, ckpt, grid, step } => {
            let cfg = common.load()?;
            let backbone = load_backbone(&load_checkpoint(&backbone)?, cfg.backbone)?;
            let model = apply_adapter_checkpoint(&backbone, &load_checkpoint(&ckpt)?)?;
            let data = make_task(&cfg.task, &cfg.backbone, TaskSide::Target);
            let subset = bitadapt_cli::task::Dataset {
                images: data.train.images[..cfg.train.landscape_samples.min(data.train.len())]
                    .to_vec(),
                labels: data.train.labels[..cfg.train.landscape_samples.min(data.train.len())]
                    .to_vec(),
            };
            let quant = quant_context(&cfg)?;
            let cells = scan_landscape(
                &model,
                &subset,
                quant.as_ref().map(|(cb, blocks)| (cb, *blocks)),
                grid,
                step,
                cfg.seed,
            );
            let rows: Vec<Vec<String>> = cells
                .iter()
                .map(|c| {
                    vec![format!("{}", c.alpha), format!("{}", c.beta), format!("{:.8}", c.loss)]
                })
                .collect();
            write_csv(
                &common.out("landscape.csv"),
                &cfg.hash(),
                &["alpha", "beta", "loss"],
                &rows,
            )?;
            println!("wrote {} landscape cells", cells.len());
        }
        Command::Hist { common, ckpt, bins } => {
            let cfg = common.load()?;
            let parsed = load_checkpoint(&ckpt)?;
            let cb = bitadapt_core::codebook::Codebook::standard(
                if (1..=8).contains(&parsed.bit_width) { parsed.bit_width } else { 1 },
                parsed.metric,
            )?;
            let tensors: Vec<(String, bitadapt_core::tape::Tensor)> = parsed
                .tensors
                .iter()
                .map(|(name, qt)| {
                    let values = bitadapt_core::pack::reconstruct(qt, &cb)?;
                    Ok((
                        name.clone(),
                        bitadapt_core::tape::Tensor::from_vec(
                            qt.rows as usize,
                            qt.cols as usize,
                            values,
                        ),
                    ))
                })
                .collect::<anyhow::Result<_>>()?;
            let refs: Vec<(String, &bitadapt_core::tape::Tensor)> =
                tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
            let entries = bitadapt_cli::hist::dump_histograms(&refs, bins);
            let mut rows = Vec::new();
            for e in &entries {
                for b in &e.bins {
                    rows.push(vec![
                        e.tensor.clone(),
                        format!("{}", b.lo),
                        format!("{}", b.hi),
                        b.count.to_string(),
                    ]);
                }
            }
            write_csv(
                &common.out("hist.csv"),
                &cfg.hash(),
                &["tensor", "bin_lo", "bin_hi", "count"],
                &rows,
            )?;
            write_json(&common.out("hist_summary.json"), &entries)?;
            println!("wrote histograms for {} tensors", entries.len());
        }
    }
    Ok(())
}

fn write_rows(
    path: &Path,
    cfg: &RunConfig,
    rows: &[bitadapt_cli::sweep::BitSweepRow],
) -> anyhow::Result<()> {
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.bits.to_string(),
                r.hidden.to_string(),
                format!("{:.6}", r.accuracy),
                r.payload_bytes.to_string(),
                r.payload_estimate.to_string(),
                format!("{}", r.selected_scale),
            ]
        })
        .collect();
    write_csv(
        path,
        &cfg.hash(),
        &["bits", "hidden", "accuracy", "payload_bytes", "payload_estimate", "selected_scale"],
        &csv_rows,
    )
}
