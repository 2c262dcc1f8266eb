//! Training loop with alignment schedule and early stopping, plus
//! evaluation of a trained model on a split.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{AlignmentMode, TrainConfig};
use super::objective::{batch_objective, BatchLoss, Example};
use super::optim::{adamw_step_params, AdamWState};
use crate::error::{Error, Result};
use crate::losses::AttentionTarget;
use crate::metrics::{auc, fairness_report, metric_set, EvalRecord, FairnessReport, Grouping, MetricSet, DEFAULT_THRESHOLD};
use crate::model::{forward_all, ModelConfig, ModelParams};
use crate::synthdata::{random_attention, Dataset, Sample};

// ChaCha stream ids, one per independent random decision in a run
const STREAM_SUBSET: u64 = 1;
const STREAM_ELIGIBLE: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// SplitMix64 finalizer, used to derive per-(sample, class) seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn random_target_seed(run_seed: u64, sample: usize, class: usize) -> u64 {
    mix(mix(mix(run_seed) ^ sample as u64) ^ class as u64)
}

/// Sorted indices of the first `⌊ratio%·n⌋` entries of a seeded
/// permutation of `0..n`. Subsets are nested across ratios.
pub fn ratio_subset(n: usize, ratio: u8, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut stream(seed, STREAM_SUBSET));
    let keep = n * ratio as usize / 100;
    let mut out = perm[..keep].to_vec();
    out.sort_unstable();
    out
}

/// Marks `⌊level%⌋` of `candidates` as eligible via a seeded permutation
/// prefix. Subsets are nested across levels.
pub fn eligible_subset(candidates: &[usize], level: u8, seed: u64) -> Vec<usize> {
    let mut perm = candidates.to_vec();
    perm.shuffle(&mut stream(seed, STREAM_ELIGIBLE));
    let keep = candidates.len() * level as usize / 100;
    let mut out = perm[..keep].to_vec();
    out.sort_unstable();
    out
}

/// Expert masks of a sample, pooled to the attention grid.
pub fn grid_masks(sample: &Sample, patch_size: usize) -> Result<Vec<Option<AttentionTarget>>> {
    sample
        .masks
        .iter()
        .map(|m| m.as_ref().map(|m| m.max_pool(patch_size)).transpose())
        .collect()
}

pub fn eval_records(params: &ModelParams, samples: &[Sample]) -> Result<Vec<EvalRecord>> {
    samples
        .iter()
        .map(|s| {
            let preds = forward_all(params, &s.image)?;
            Ok(EvalRecord {
                scores: preds.iter().map(|p| p.prob).collect(),
                labels: s.labels.clone(),
                maps: preds.into_iter().map(|p| p.aligned_map).collect(),
                masks: grid_masks(s, params.config.patch_size)?,
                demographics: s.demographics,
            })
        })
        .collect()
}

/// Mean over classes of per-class AUC.
pub fn macro_auc(params: &ModelParams, samples: &[Sample]) -> Result<f64> {
    let classes = params.config.num_classes;
    let mut scores = vec![Vec::with_capacity(samples.len()); classes];
    for s in samples {
        for p in forward_all(params, &s.image)? {
            scores[p.class_id].push(p.prob);
        }
    }
    let mut total = 0.0;
    for (c, sc) in scores.iter().enumerate() {
        let labels: Vec<bool> = samples.iter().map(|s| s.labels[c]).collect();
        total += auc(sc, &labels)?;
    }
    Ok(total / classes as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEvaluation {
    pub overall: MetricSet,
    pub by_sex: FairnessReport,
    pub by_age: FairnessReport,
}

impl SplitEvaluation {
    pub fn report(&self, g: Grouping) -> &FairnessReport {
        match g {
            Grouping::Sex => &self.by_sex,
            Grouping::Age => &self.by_age,
        }
    }

    /// `overall.*`, `sex.gap.*`, `age.gap.*` and per-subgroup fields.
    pub fn flatten(&self) -> BTreeMap<String, f64> {
        use crate::metrics::Flatten;
        let mut out = BTreeMap::new();
        for (k, v) in self.overall.flatten() {
            out.insert(format!("overall.{k}"), v);
        }
        for (g, r) in [("sex", &self.by_sex), ("age", &self.by_age)] {
            for (k, v) in r.flatten() {
                out.insert(format!("{g}.{k}"), v);
            }
        }
        out
    }
}

pub fn evaluate_split(params: &ModelParams, samples: &[Sample]) -> Result<SplitEvaluation> {
    let records = eval_records(params, samples)?;
    let refs: Vec<&EvalRecord> = records.iter().collect();
    Ok(SplitEvaluation {
        overall: metric_set(&refs, DEFAULT_THRESHOLD)?,
        by_sex: fairness_report(&records, Grouping::Sex, DEFAULT_THRESHOLD)?,
        by_age: fairness_report(&records, Grouping::Age, DEFAULT_THRESHOLD)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub best_val_auc: f64,
    /// 1-based epoch whose parameters were kept
    pub best_epoch: usize,
    pub epochs_trained: usize,
    pub val_auc_history: Vec<f64>,
    pub n_train_used: usize,
    pub n_align_eligible: usize,
    pub final_train_loss: f64,
    pub test_id: SplitEvaluation,
    pub test_ood: SplitEvaluation,
}

impl RunResult {
    pub fn hit_rate_id(&self) -> Option<f64> {
        self.test_id.overall.hit_rate
    }

    pub fn hit_rate_ood(&self) -> Option<f64> {
        self.test_ood.overall.hit_rate
    }

    /// Scalar summary used by sweep aggregation.
    pub fn summary(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        out.insert("val.best_auc".to_string(), self.best_val_auc);
        out.insert("epochs_trained".to_string(), self.epochs_trained as f64);
        for (split, ev) in [("id", &self.test_id), ("ood", &self.test_ood)] {
            for (k, v) in ev.overall_and_gaps() {
                out.insert(format!("{split}.{k}"), v);
            }
        }
        out
    }
}

impl SplitEvaluation {
    fn overall_and_gaps(&self) -> BTreeMap<String, f64> {
        use crate::metrics::Flatten;
        let mut out = BTreeMap::new();
        for (k, v) in self.overall.flatten() {
            out.insert(k, v);
        }
        for (g, r) in [("sex", &self.by_sex), ("age", &self.by_age)] {
            for (m, v) in &r.gaps {
                out.insert(format!("{g}_gap.{m}"), *v);
            }
        }
        out
    }
}

/// Alignment targets of training sample `idx` for this epoch.
fn epoch_targets(
    sample: &Sample,
    idx: usize,
    eligible: bool,
    human: &[Option<AttentionTarget>],
    cfg: &TrainConfig,
    side: usize,
    epoch: usize,
) -> Result<Vec<Option<AttentionTarget>>> {
    if !eligible {
        return Ok(vec![None; sample.labels.len()]);
    }
    match cfg.alignment_mode {
        AlignmentMode::None => Ok(vec![None; sample.labels.len()]),
        AlignmentMode::Human => Ok(human.to_vec()),
        AlignmentMode::Random => sample
            .labels
            .iter()
            .enumerate()
            .map(|(c, &y)| {
                if y {
                    random_attention(random_target_seed(cfg.seed, idx, c), epoch as u64, side, side).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect(),
    }
}

/// Trains one model and evaluates the best-validation-AUC parameters on
/// both test splits.
pub fn train(model_cfg: &ModelConfig, cfg: &TrainConfig, data: &Dataset) -> Result<(ModelParams, RunResult)> {
    cfg.validate()?;
    model_cfg.validate()?;
    if model_cfg.image_size != data.config.image_size || model_cfg.num_classes != data.config.classes {
        return Err(Error::Config(format!(
            "model expects {}px / {} classes, data has {}px / {} classes",
            model_cfg.image_size, model_cfg.num_classes, data.config.image_size, data.config.classes
        )));
    }
    let classes = model_cfg.num_classes;
    let side = model_cfg.grid_side();

    let subset = ratio_subset(data.train.len(), cfg.data_ratio, cfg.seed);
    let train: Vec<&Sample> = subset.iter().map(|&i| &data.train[i]).collect();
    for c in 0..classes {
        if !train.iter().any(|s| s.labels[c]) {
            return Err(Error::Training(format!(
                "class {c} has no positive sample in the {}% training subset",
                cfg.data_ratio
            )));
        }
    }
    let positives: Vec<usize> = (0..train.len()).filter(|&i| train[i].is_positive()).collect();
    let mut eligible = vec![false; train.len()];
    if cfg.alignment_mode != AlignmentMode::None {
        for i in eligible_subset(&positives, cfg.alignment_level, cfg.seed) {
            eligible[i] = true;
        }
    }
    let n_align_eligible = eligible.iter().filter(|&&e| e).count();
    if cfg.alignment_mode == AlignmentMode::Human {
        for (i, s) in train.iter().enumerate() {
            if eligible[i] && s.labels.iter().zip(&s.masks).any(|(&y, m)| y && m.is_none()) {
                return Err(Error::Training(format!("eligible positive sample {i} has no expert mask")));
            }
        }
    }
    let human: Vec<Vec<Option<AttentionTarget>>> = train
        .iter()
        .map(|s| grid_masks(s, model_cfg.patch_size))
        .collect::<Result<_>>()?;

    let mut params = ModelParams::init(*model_cfg, cfg.seed)?;
    let mut state = AdamWState::new(params.num_params());
    let mut grads = params.zeros_like();
    let mut shuffler = stream(cfg.seed, STREAM_SHUFFLE);

    let mut best = params.clone();
    let mut best_auc = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut history = Vec::new();
    let mut last_loss = BatchLoss::default();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut shuffler);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let targets: Vec<Vec<Option<AttentionTarget>>> = chunk
                .iter()
                .map(|&i| epoch_targets(train[i], subset[i], eligible[i], &human[i], cfg, side, epoch))
                .collect::<Result<_>>()?;
            let batch: Vec<Example> = chunk
                .iter()
                .zip(&targets)
                .map(|(&i, t)| Example {
                    image: &train[i].image,
                    labels: &train[i].labels,
                    align: t,
                })
                .collect();
            let loss = batch_objective(&params, &batch, &cfg.dice, &mut grads).map_err(|e| Error::Divergence {
                epoch: epoch + 1,
                batch: b,
                message: e.to_string(),
            })?;
            if !loss.total.is_finite() {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    batch: b,
                    message: format!("loss is {}", loss.total),
                });
            }
            last_loss = loss;
            adamw_step_params(&mut params, &grads, &mut state, cfg.learning_rate, &cfg.optimizer).map_err(
                |e| match e {
                    Error::Divergence { message, .. } => Error::Divergence {
                        epoch: epoch + 1,
                        batch: b,
                        message,
                    },
                    other => other,
                },
            )?;
        }

        let val_auc = macro_auc(&params, &data.val)?;
        history.push(val_auc);
        if val_auc > best_auc {
            best_auc = val_auc;
            best = params.clone();
            best_epoch = epoch + 1;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    let test_id = evaluate_split(&best, &data.test_id)?;
    let test_ood = evaluate_split(&best, &data.test_ood)?;
    let result = RunResult {
        model: *model_cfg,
        train: cfg.clone(),
        best_val_auc: best_auc,
        best_epoch,
        epochs_trained: history.len(),
        val_auc_history: history,
        n_train_used: train.len(),
        n_align_eligible,
        final_train_loss: last_loss.total,
        test_id,
        test_ood,
    };
    Ok((best, result))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_subsets_are_nested_and_sized() {
        let n = 203;
        let q = ratio_subset(n, 25, 9);
        let h = ratio_subset(n, 50, 9);
        assert_eq!(q.len(), 50);
        assert!(q.iter().all(|i| h.contains(i)));
        assert_eq!(ratio_subset(n, 100, 9), (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn eligibility_is_nested_across_levels() {
        let cands: Vec<usize> = (0..97).map(|i| i * 3).collect();
        let mut prev: Vec<usize> = Vec::new();
        for level in [0, 25, 50, 75, 100] {
            let cur = eligible_subset(&cands, level, 4);
            assert!(prev.iter().all(|i| cur.contains(i)));
            prev = cur;
        }
        assert_eq!(prev, cands);
        assert!(eligible_subset(&cands, 0, 4).is_empty());
    }

    #[test]
    fn random_targets_change_per_epoch_and_skip_negatives() {
        let ds = crate::synthdata::generate(&crate::synthdata::GeneratorConfig {
            n_train: 20,
            n_val: 5,
            n_test_id: 5,
            n_test_ood: 5,
            ..Default::default()
        })
        .unwrap();
        let cfg = TrainConfig::default().with_arm(100, AlignmentMode::Random);
        let s = ds.train.iter().position(|s| s.is_positive()).unwrap();
        let sample = &ds.train[s];
        let human = grid_masks(sample, 4).unwrap();
        let a = epoch_targets(sample, s, true, &human, &cfg, 8, 0).unwrap();
        let b = epoch_targets(sample, s, true, &human, &cfg, 8, 1).unwrap();
        let a2 = epoch_targets(sample, s, true, &human, &cfg, 8, 0).unwrap();
        assert_eq!(a, a2);
        assert_ne!(a, b);
        for (y, t) in sample.labels.iter().zip(&a) {
            assert_eq!(*y, t.is_some());
        }
        let none = epoch_targets(sample, s, false, &human, &cfg, 8, 0).unwrap();
        assert!(none.iter().all(Option::is_none));
    }
}
