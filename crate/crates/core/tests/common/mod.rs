//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use egl_core::diffcore::{grad_check, Grid};
use egl_core::harness::{batch_objective, Example};
use egl_core::losses::{AttentionTarget, DiceFpConfig};
use egl_core::model::{ModelConfig, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One random model/batch configuration for a finite-difference check.
pub struct GradCase {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub images: Vec<Grid>,
    pub labels: Vec<Vec<bool>>,
    pub targets: Vec<Vec<Option<AttentionTarget>>>,
    pub dice: DiceFpConfig,
}

pub fn grad_case(seed: u64, image_size: usize) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patch = if image_size == 8 { 2 } else { [2, 4][rng.random_range(0..2)] };
    let config = ModelConfig {
        image_size,
        patch_size: patch,
        embed_dim: rng.random_range(2..=6),
        num_classes: rng.random_range(1..=3),
    };
    let mut params = ModelParams::init(config, seed).unwrap();
    // move the aligner away from its initial identity so its gradient is generic
    params.aligner.set(0, 0, rng.random_range(0.5..2.0));
    params.aligner.set(0, 1, rng.random_range(-1.0..1.0));
    let side = config.grid_side();
    let n = rng.random_range(1..=3);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..n {
        let px = (0..image_size * image_size).map(|_| rng.random_range(0.0..1.0)).collect();
        images.push(Grid::from_vec(image_size, image_size, px).unwrap());
        let y: Vec<bool> = (0..config.num_classes).map(|_| rng.random_bool(0.6)).collect();
        let t = y
            .iter()
            .map(|&pos| {
                (pos && rng.random_bool(0.8)).then(|| {
                    let mut bits: Vec<bool> = (0..side * side).map(|_| rng.random_bool(0.3)).collect();
                    let k = rng.random_range(0..side * side);
                    bits[k] = true;
                    AttentionTarget::from_bits(side, side, &bits).unwrap()
                })
            })
            .collect();
        labels.push(y);
        targets.push(t);
    }
    let dice = DiceFpConfig {
        w_fp: rng.random_range(1.0..4.0),
        ..Default::default()
    };
    GradCase {
        config,
        params,
        images,
        labels,
        targets,
        dice,
    }
}

impl GradCase {
    pub fn batch(&self) -> Vec<Example<'_>> {
        self.images
            .iter()
            .zip(&self.labels)
            .zip(&self.targets)
            .map(|((image, labels), align)| Example { image, labels, align })
            .collect()
    }

    /// Worst relative error between the analytic gradient of the total loss
    /// and central differences.
    pub fn max_rel_error(&self) -> f64 {
        let batch = self.batch();
        let mut grads = self.params.zeros_like();
        batch_objective(&self.params, &batch, &self.dice, &mut grads).unwrap();
        let f = |theta: &[f64]| {
            let mut p = self.params.clone();
            p.set_flat(theta).unwrap();
            let mut scratch = p.zeros_like();
            batch_objective(&p, &batch, &self.dice, &mut scratch).unwrap().total
        };
        grad_check(f, &grads.to_flat(), &self.params.to_flat(), 1e-5).unwrap()
    }
}

/// O(n²) AUC: fraction of (positive, negative) pairs ranked correctly,
/// ties counting one half. Counted in half-units to stay exact.
pub fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut halves: u64 = 0;
    let mut pairs: u64 = 0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1;
            halves += if si > sj {
                2
            } else if si == sj {
                1
            } else {
                0
            };
        }
    }
    (halves as f64 * 0.5) / pairs as f64
}

use egl_core::metrics::EvalRecord;
use egl_core::synthdata::{AgeGroup, Demographics, Sex};

pub const CELLS: [Demographics; 4] = [
    Demographics { sex: Sex::Female, age_group: AgeGroup::Young },
    Demographics { sex: Sex::Female, age_group: AgeGroup::Old },
    Demographics { sex: Sex::Male, age_group: AgeGroup::Young },
    Demographics { sex: Sex::Male, age_group: AgeGroup::Old },
];

/// Random scored samples in which every demographic cell has at least one
/// positive and one negative per class. Scores are quantized so ties occur.
pub fn random_records(seed: u64, per_cell: usize, classes: usize) -> Vec<EvalRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for cell in CELLS {
        for i in 0..per_cell.max(2) {
            let labels: Vec<bool> = (0..classes)
                .map(|_| match i {
                    0 => true,
                    1 => false,
                    _ => rng.random_bool(0.4),
                })
                .collect();
            let scores = (0..classes).map(|_| rng.random_range(0..=20) as f64 / 20.0).collect();
            out.push(EvalRecord {
                scores,
                labels,
                maps: Vec::new(),
                masks: Vec::new(),
                demographics: cell,
            });
        }
    }
    out
}
