//! Synthetic classification tasks.
//!
//! Each class owns a Gaussian prototype image; samples add i.i.d. pixel
//! noise. The source and target tasks draw prototypes from independent
//! seeds, and target inputs additionally pass through a seeded pixel
//! scramble (permutation with sign flips) blended by `shift`, so the
//! frozen source-trained backbone sees a genuinely shifted input
//! distribution and adaptation has something to do.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{derive_seed, TaskConfig};
use bitadapt_core::model::BackboneConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskSide {
    Source,
    Target,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct TaskData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Generates the three splits of one task side, deterministically.
pub fn make_task(task: &TaskConfig, backbone: &BackboneConfig, side: TaskSide) -> TaskData {
    let pixels = backbone.image * backbone.image;
    let seed = match side {
        TaskSide::Source => task.source_seed,
        TaskSide::Target => task.target_seed,
    };
    let mut proto_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "prototypes"));
    let prototypes: Vec<Vec<f64>> = (0..task.classes)
        .map(|_| {
            (0..pixels)
                .map(|_| {
                    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut proto_rng)
                        * task.signal
                })
                .collect()
        })
        .collect();

    let scramble = match side {
        TaskSide::Source => None,
        TaskSide::Target => Some(Scramble::new(pixels, derive_seed(seed, "scramble"), task.shift)),
    };

    let split = |name: &str, count: usize| -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, name));
        let mut images = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let label = i % task.classes;
            let mut img: Vec<f64> = prototypes[label]
                .iter()
                .map(|&p| {
                    p + task.noise
                        * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                })
                .collect();
            if let Some(s) = &scramble {
                img = s.apply(&img);
            }
            images.push(img);
            labels.push(label);
        }
        // Interleave deterministically so batches mix classes.
        let mut order: Vec<usize> = (0..count).collect();
        order.shuffle(&mut rng);
        Dataset {
            images: order.iter().map(|&i| images[i].clone()).collect(),
            labels: order.iter().map(|&i| labels[i]).collect(),
        }
    };

    TaskData {
        train: split("train", task.train_samples),
        val: split("val", task.val_samples),
        test: split("test", task.test_samples),
    }
}

/// Orthogonal pixel scramble: permutation combined with sign flips,
/// blended with the identity by `shift` in [0, 1].
struct Scramble {
    perm: Vec<usize>,
    sign: Vec<f64>,
    shift: f64,
}

impl Scramble {
    fn new(pixels: usize, seed: u64, shift: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..pixels).collect();
        perm.shuffle(&mut rng);
        let sign = (0..pixels).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        Scramble { perm, sign, shift }
    }

    fn apply(&self, img: &[f64]) -> Vec<f64> {
        (0..img.len())
            .map(|i| {
                let scrambled = self.sign[i] * img[self.perm[i]];
                (1.0 - self.shift) * img[i] + self.shift * scrambled
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    #[test]
    fn generation_is_deterministic() {
        let cfg = RunConfig::default();
        let a = make_task(&cfg.task, &cfg.backbone, TaskSide::Target);
        let b = make_task(&cfg.task, &cfg.backbone, TaskSide::Target);
        assert_eq!(a.train.images, b.train.images);
        assert_eq!(a.train.labels, b.train.labels);
    }

    #[test]
    fn sides_differ() {
        let cfg = RunConfig::default();
        let src = make_task(&cfg.task, &cfg.backbone, TaskSide::Source);
        let tgt = make_task(&cfg.task, &cfg.backbone, TaskSide::Target);
        assert_ne!(src.train.images[0], tgt.train.images[0]);
    }

    #[test]
    fn splits_have_requested_sizes_and_all_classes() {
        let cfg = RunConfig::default();
        let data = make_task(&cfg.task, &cfg.backbone, TaskSide::Source);
        assert_eq!(data.train.len(), cfg.task.train_samples);
        assert_eq!(data.val.len(), cfg.task.val_samples);
        assert_eq!(data.test.len(), cfg.task.test_samples);
        for k in 0..cfg.task.classes {
            assert!(data.train.labels.contains(&k));
        }
    }

    #[test]
    fn zero_shift_means_no_scramble_blend() {
        let mut cfg = RunConfig::default();
        cfg.task.shift = 0.0;
        cfg.task.target_seed = cfg.task.source_seed;
        let src = make_task(&cfg.task, &cfg.backbone, TaskSide::Source);
        let tgt = make_task(&cfg.task, &cfg.backbone, TaskSide::Target);
        assert_eq!(src.train.images, tgt.train.images);
    }
}
