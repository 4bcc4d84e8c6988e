//! Training loops: source pre-training, adapter tuning (quantization-aware
//! or full precision), the full fine-tuning baseline, and evaluation.

use std::time::Instant;

use anyhow::{bail, Context};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use bitadapt_core::ckpt::{size_estimate, Checkpoint};
use bitadapt_core::codebook::Codebook;
use bitadapt_core::model::{
    accuracy, build_forward, param_mut, patchify, Adapters, Regime, ToyBackbone, TrainedModel,
};
use bitadapt_core::optim::{AdamW, AdamWConfig, LrSchedule};
use bitadapt_core::tape::{Tape, Tensor};

use crate::config::{derive_seed, RunConfig, FULL_BITS};
use crate::io::adapters_to_checkpoint;
use crate::report::RunReport;
use crate::task::{make_task, Dataset, TaskData, TaskSide};

#[derive(Debug, Clone, Copy)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
}

/// Batched evaluation; quantization applies to adapter weights exactly as
/// in training when `quant` is set.
pub fn evaluate(
    backbone: &ToyBackbone,
    adapters: Option<(&Adapters, f64)>,
    quant: Option<(&Codebook, usize)>,
    data: &Dataset,
    batch: usize,
) -> EvalResult {
    let cfg = &backbone.cfg;
    let mut total_loss = 0.0;
    let mut correct = 0.0;
    let mut seen = 0usize;
    let mut start = 0usize;
    while start < data.len() {
        let end = (start + batch).min(data.len());
        let images = &data.images[start..end];
        let labels = &data.labels[start..end];
        let mut tape = Tape::new();
        let g = build_forward(
            &mut tape,
            backbone,
            adapters,
            quant,
            Regime::HeadOnly,
            patchify(images, cfg),
            Some(labels),
        )
        .expect("forward succeeds");
        let n = labels.len() as f64;
        total_loss += tape.value(g.loss.unwrap()).data[0] * n;
        correct += accuracy(tape.value(g.logits), labels) * n;
        seen += labels.len();
        start = end;
    }
    EvalResult { loss: total_loss / seen as f64, accuracy: correct / seen as f64 }
}

/// The quantization context of a run: none at full precision.
pub fn quant_context(cfg: &RunConfig) -> anyhow::Result<Option<(Codebook, usize)>> {
    if cfg.adapter.bits == FULL_BITS {
        Ok(None)
    } else {
        let cb = Codebook::standard(cfg.adapter.bits, cfg.adapter.metric)?;
        Ok(Some((cb, cfg.adapter.block_count)))
    }
}

/// Core optimization loop. Mutates `backbone` (and `adapters` when
/// present) in place and returns the per-step training loss curve.
#[allow(clippy::too_many_arguments)]
pub fn train_loop(
    cfg: &RunConfig,
    backbone: &mut ToyBackbone,
    mut adapters: Option<&mut Adapters>,
    regime: Regime,
    quant: Option<(&Codebook, usize)>,
    scale: f64,
    train: &Dataset,
    epochs: usize,
    seed_tag: &str,
) -> anyhow::Result<Vec<f64>> {
    let opt_cfg = AdamWConfig {
        lr: cfg.optim.lr,
        beta1: cfg.optim.beta1,
        beta2: cfg.optim.beta2,
        eps: cfg.optim.eps,
        weight_decay: cfg.optim.weight_decay,
    };
    let mut opt = AdamW::new(opt_cfg)?;
    let batch = cfg.optim.batch;
    let steps_per_epoch = train.len().div_ceil(batch);
    let total_steps = (epochs * steps_per_epoch) as u64;
    let schedule = LrSchedule {
        warmup_steps: ((total_steps as f64 * cfg.optim.warmup_frac).round() as u64).max(1),
        total_steps,
    };
    let mut shuffle_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("shuffle-{seed_tag}")));
    let mut losses = Vec::with_capacity(total_steps as usize);
    let mut step = 0u64;
    for _epoch in 0..epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(batch) {
            let images: Vec<Vec<f64>> = chunk.iter().map(|&i| train.images[i].clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let mut tape = Tape::new();
            let g = build_forward(
                &mut tape,
                backbone,
                adapters.as_deref().map(|a| (a as &Adapters, scale)),
                quant,
                regime,
                patchify(&images, &backbone.cfg),
                Some(&labels),
            )?;
            let loss_id = g.loss.unwrap();
            tape.backward(loss_id);
            losses.push(tape.value(loss_id).data[0]);

            let lr_scale = schedule.factor(step);
            opt.begin_step();
            for (name, id) in &g.leaves {
                let grad = tape.grad(*id).clone();
                let slot = param_mut(backbone, adapters.as_deref_mut(), name)
                    .with_context(|| format!("unknown parameter {name}"))?;
                opt.update(name, slot, &grad, lr_scale)?;
            }
            step += 1;
        }
    }
    Ok(losses)
}

/// Re-initializes the classification head for a fresh adaptation run.
pub fn reset_head(backbone: &mut ToyBackbone, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in backbone.head_w.data.iter_mut() {
        *v = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) * 0.02;
    }
    backbone.head_b = Tensor::zeros(1, backbone.cfg.classes);
}

/// Trains the backbone on the source task until it clears the accuracy
/// gate; the artifact this produces is what every adaptation run freezes.
pub fn pretrain_source(cfg: &RunConfig) -> anyhow::Result<(ToyBackbone, RunReport)> {
    const SOURCE_GATE: f64 = 0.90;
    let started = Instant::now();
    let data = make_task(&cfg.task, &cfg.backbone, TaskSide::Source);
    let mut backbone = ToyBackbone::init(cfg.backbone, derive_seed(cfg.seed, "backbone-init"))?;
    let losses = train_loop(
        cfg,
        &mut backbone,
        None,
        Regime::Full,
        None,
        1.0,
        &data.train,
        cfg.train.pretrain_epochs,
        "pretrain",
    )?;
    let val = evaluate(&backbone, None, None, &data.val, 64);
    let test = evaluate(&backbone, None, None, &data.test, 64);
    if test.accuracy < SOURCE_GATE {
        bail!(
            "pre-training reached only {:.3} source accuracy (gate {SOURCE_GATE}); \
             final loss {:.4} over {} steps — consider more epochs or an easier task",
            test.accuracy,
            losses.last().copied().unwrap_or(f64::NAN),
            losses.len()
        );
    }
    let report = RunReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        method: "pretrain".into(),
        bits: FULL_BITS,
        hidden: 0,
        selected_scale: 1.0,
        final_accuracy: test.accuracy,
        best_val_accuracy: val.accuracy,
        loss_curve: losses,
        adapter_payload_bytes: 0,
        adapter_payload_estimate: 0,
        total_payload_bytes: 0,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok((backbone, report))
}

pub struct RunOutcome {
    pub model: TrainedModel,
    pub report: RunReport,
    pub checkpoint: Checkpoint,
}

/// Adapter tuning on the target task: quantization-aware when
/// `cfg.adapter.bits < 32`, plain full-precision adapter tuning otherwise.
/// The adapter scale comes from the config or from a validation-split
/// search over `s_candidates` (short screening runs, ties to the smaller
/// scale).
pub fn run_qat(cfg: &RunConfig, backbone: &ToyBackbone) -> anyhow::Result<RunOutcome> {
    let started = Instant::now();
    cfg.validate()?;
    let data = make_task(&cfg.task, &cfg.backbone, TaskSide::Target);
    let quant = quant_context(cfg)?;
    let quant_ref = quant.as_ref().map(|(cb, blocks)| (cb, *blocks));

    let train_with_scale = |scale: f64, epochs: usize| -> anyhow::Result<(TrainedModel, Vec<f64>, f64)> {
        let mut bb = backbone.clone();
        reset_head(&mut bb, derive_seed(cfg.seed, "head-init"));
        let mut adapters = Adapters::init(
            cfg.adapter.kind,
            cfg.backbone.dim,
            cfg.adapter.hidden,
            cfg.backbone.depth,
            derive_seed(cfg.seed, "adapter-init"),
        );
        let losses = train_loop(
            cfg,
            &mut bb,
            Some(&mut adapters),
            Regime::Adapter,
            quant_ref,
            scale,
            &data.train,
            epochs,
            "adapt",
        )?;
        let val = evaluate(&bb, Some((&adapters, scale)), quant_ref, &data.val, 64);
        let mut tuned: Vec<String> = adapters.named().into_iter().map(|(n, _)| n).collect();
        tuned.push("head.weight".into());
        tuned.push("head.bias".into());
        let model = TrainedModel { backbone: bb, adapters: Some(adapters), scale, tuned };
        Ok((model, losses, val.accuracy))
    };

    let (selected_scale, best_val_from_search) = match cfg.adapter.scale {
        Some(s) => (s, None),
        None => {
            let mut candidates = cfg.adapter.s_candidates.clone();
            candidates.sort_by(f64::total_cmp);
            if candidates.is_empty() {
                bail!("scale search requires at least one candidate");
            }
            let mut best = (candidates[0], f64::NEG_INFINITY);
            for &s in &candidates {
                let (_, _, val_acc) = train_with_scale(s, cfg.train.s_search_epochs)?;
                if val_acc > best.1 {
                    best = (s, val_acc);
                }
            }
            (best.0, Some(best.1))
        }
    };

    let (model, losses, val_acc) = train_with_scale(selected_scale, cfg.train.epochs)?;
    let test = evaluate(
        &model.backbone,
        model.adapters.as_ref().map(|a| (a, model.scale)),
        quant_ref,
        &data.test,
        64,
    );
    let checkpoint = adapters_to_checkpoint(&model, cfg)?;
    let adapter_payload = checkpoint
        .payload_bytes_where(|n| n.contains(".adapter.") || n.contains(".lora."))
        as u64;
    let estimate = size_estimate(
        cfg.backbone.dim as u64,
        cfg.backbone.depth as u64,
        cfg.adapter.hidden as u64,
        cfg.adapter.bits,
        cfg.adapter.kind,
    )?;
    let method = if cfg.adapter.bits == FULL_BITS { "adapter_fp" } else { "qat" };
    let report = RunReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        method: method.into(),
        bits: cfg.adapter.bits,
        hidden: cfg.adapter.hidden,
        selected_scale,
        final_accuracy: test.accuracy,
        best_val_accuracy: best_val_from_search.unwrap_or(val_acc).max(val_acc),
        loss_curve: losses,
        adapter_payload_bytes: adapter_payload,
        adapter_payload_estimate: estimate,
        total_payload_bytes: checkpoint.payload_bytes() as u64,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok(RunOutcome { model, report, checkpoint })
}

/// Full fine-tuning baseline on the target task (no adapters).
pub fn run_full_ft(cfg: &RunConfig, backbone: &ToyBackbone) -> anyhow::Result<(TrainedModel, RunReport)> {
    let started = Instant::now();
    let data = make_task(&cfg.task, &cfg.backbone, TaskSide::Target);
    let mut bb = backbone.clone();
    reset_head(&mut bb, derive_seed(cfg.seed, "head-init"));
    let losses = train_loop(
        cfg,
        &mut bb,
        None,
        Regime::Full,
        None,
        1.0,
        &data.train,
        cfg.train.epochs,
        "full-ft",
    )?;
    let val = evaluate(&bb, None, None, &data.val, 64);
    let test = evaluate(&bb, None, None, &data.test, 64);
    let tuned: Vec<String> = bb.named().into_iter().map(|(n, _)| n).collect();
    let model = TrainedModel { backbone: bb, adapters: None, scale: 1.0, tuned };
    let report = RunReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        method: "full_ft".into(),
        bits: FULL_BITS,
        hidden: 0,
        selected_scale: 1.0,
        final_accuracy: test.accuracy,
        best_val_accuracy: val.accuracy,
        loss_curve: losses,
        adapter_payload_bytes: 0,
        adapter_payload_estimate: 0,
        total_payload_bytes: 0,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

/// Evaluates a trained model bundle on a dataset split.
pub fn evaluate_model(model: &TrainedModel, data: &Dataset) -> EvalResult {
    evaluate(
        &model.backbone,
        model.adapters.as_ref().map(|a| (a, model.scale)),
        None,
        data,
        64,
    )
}

/// Target-task data for a config.
pub fn target_task(cfg: &RunConfig) -> TaskData {
    make_task(&cfg.task, &cfg.backbone, TaskSide::Target)
}
