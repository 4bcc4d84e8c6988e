//! Calibration harness: measures accuracies and wall time for every
//! training regime across seeds, to pin default task and schedule
//! constants.

use std::time::Instant;

use bitadapt_cli::config::{RunConfig, FULL_BITS};
use bitadapt_cli::ptq::run_ptq;
use bitadapt_cli::sweep::{sweep_noise, NoiseModels};
use bitadapt_cli::train::{evaluate, pretrain_source, run_full_ft, run_qat, target_task, train_loop};
use bitadapt_core::model::Regime;

fn main() -> anyhow::Result<()> {
    let mut cfg = RunConfig::default();
    // Knobs under calibration:
    let args: Vec<String> = std::env::args().collect();
    for pair in args.iter().skip(1) {
        let (k, v) = pair.split_once('=').expect("key=value");
        match k {
            "noise" => cfg.task.noise = v.parse()?,
            "signal" => cfg.task.signal = v.parse()?,
            "classes" => {
                cfg.task.classes = v.parse()?;
                cfg.normalize();
            }
            "shift" => cfg.task.shift = v.parse()?,
            "epochs" => cfg.train.epochs = v.parse()?,
            "pretrain" => cfg.train.pretrain_epochs = v.parse()?,
            "search" => cfg.train.s_search_epochs = v.parse()?,
            "batch" => cfg.optim.batch = v.parse()?,
            "lr" => cfg.optim.lr = v.parse()?,
            "hidden" => cfg.adapter.hidden = v.parse()?,
            "train_samples" => cfg.task.train_samples = v.parse()?,
            "seeds" => {}
            other => panic!("unknown knob {other}"),
        }
    }
    let seeds: u64 = args
        .iter()
        .find_map(|p| p.strip_prefix("seeds=").map(|v| v.parse().unwrap()))
        .unwrap_or(3);

    let t0 = Instant::now();
    let (backbone, pre_report) = pretrain_source(&cfg)?;
    println!(
        "pretrain: acc {:.3} in {:.1}s ({} steps)",
        pre_report.final_accuracy,
        t0.elapsed().as_secs_f64(),
        pre_report.loss_curve.len()
    );

    // Head-only probe as a reference point.
    let data = target_task(&cfg);
    let mut probe_bb = backbone.clone();
    bitadapt_cli::train::reset_head(&mut probe_bb, 1234);
    train_loop(&cfg, &mut probe_bb, None, Regime::HeadOnly, None, 1.0, &data.train, cfg.train.epochs, "probe")?;
    let probe_acc = evaluate(&probe_bb, None, None, &data.test, 64).accuracy;
    println!("head-only probe: acc {probe_acc:.3}");

    let mut fp_accs = Vec::new();
    let mut qat_accs = Vec::new();
    let mut ptq_accs = Vec::new();
    let mut noise_gaps = Vec::new();
    for seed in 0..seeds {
        let mut c = cfg.clone();
        c.seed = 100 + seed;

        let mut fp_cfg = c.clone();
        fp_cfg.adapter.bits = FULL_BITS;
        let t = Instant::now();
        let fp = run_qat(&fp_cfg, &backbone)?;
        let fp_time = t.elapsed().as_secs_f64();

        let mut q_cfg = c.clone();
        q_cfg.adapter.bits = 1;
        let t = Instant::now();
        let qat = run_qat(&q_cfg, &backbone)?;
        let qat_time = t.elapsed().as_secs_f64();

        let ptq = run_ptq(&c, &backbone, &fp.model, 1)?;

        let t = Instant::now();
        let (full_model, full_rep) = run_full_ft(&c, &backbone)?;
        let full_time = t.elapsed().as_secs_f64();

        let models = NoiseModels { adapter: fp.model.clone(), full: full_model };
        let rows = sweep_noise(&c, &models, &[0.0, 1.0], 3)?;
        let acc = |regime: &str, ratio: f64| {
            rows.iter()
                .find(|r| r.regime == regime && r.sigma_ratio == ratio)
                .unwrap()
                .mean_accuracy
        };
        let adapter_drop = acc("adapter", 0.0) - acc("adapter", 1.0);
        let full_drop = acc("full_ft", 0.0) - acc("full_ft", 1.0);

        println!(
            "seed {seed}: fp {:.3} ({:.1}s, s={}) qat1 {:.3} ({:.1}s, s={}) ptq1 {:.3} full {:.3} ({:.1}s) | drops: adapter {:.3} full {:.3}",
            fp.report.final_accuracy, fp_time, fp.report.selected_scale,
            qat.report.final_accuracy, qat_time, qat.report.selected_scale,
            ptq.report.final_accuracy,
            full_rep.final_accuracy, full_time,
            adapter_drop, full_drop,
        );
        fp_accs.push(fp.report.final_accuracy);
        qat_accs.push(qat.report.final_accuracy);
        ptq_accs.push(ptq.report.final_accuracy);
        noise_gaps.push(full_drop - adapter_drop);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!(
        "MEANS: fp {:.3} qat1 {:.3} ptq1 {:.3} | qat-ptq {:.3} fp-qat {:.3} | noise gap (full-adapter drops) {:.3}",
        mean(&fp_accs),
        mean(&qat_accs),
        mean(&ptq_accs),
        mean(&qat_accs) - mean(&ptq_accs),
        mean(&fp_accs) - mean(&qat_accs),
        mean(&noise_gaps),
    );
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
