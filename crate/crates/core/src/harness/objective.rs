//! Batch objective: mean cross-entropy over samples plus mean dice-FP loss
//! over the samples that carry at least one alignment target. Both terms
//! are summed over classes within a sample.

use crate::diffcore::Grid;
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, dice_fp_loss, total_loss, AttentionTarget, DiceFpConfig};
use crate::model::{backward_into, forward_traced, ClassUpstream, ModelParams};

/// One training example as seen by the objective.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub image: &'a Grid,
    pub labels: &'a [bool],
    /// Alignment target per class at grid resolution. Only positive classes
    /// of alignment-eligible samples carry one.
    pub align: &'a [Option<AttentionTarget>],
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchLoss {
    pub ce: f64,
    pub al: f64,
    pub total: f64,
    /// Samples contributing to the alignment term.
    pub al_samples: usize,
}

/// Loss and parameter gradient of a batch. `grads` is overwritten.
pub fn batch_objective(
    params: &ModelParams,
    batch: &[Example<'_>],
    dice: &DiceFpConfig,
    grads: &mut ModelParams,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    let classes = params.config.num_classes;
    let all: Vec<usize> = (0..classes).collect();
    for (_, g) in grads.fields_mut() {
        g.fill(0.0);
    }

    let al_samples = batch
        .iter()
        .filter(|ex| ex.align.iter().zip(ex.labels).any(|(t, &y)| t.is_some() && y))
        .count();
    let ce_weight = 1.0 / batch.len() as f64;
    let al_weight = if al_samples > 0 { 1.0 / al_samples as f64 } else { 0.0 };

    let mut ce_sum = 0.0;
    let mut al_sum = 0.0;
    let mut upstream = Vec::with_capacity(classes);
    for ex in batch {
        if ex.labels.len() != classes || ex.align.len() != classes {
            return Err(Error::Dimension(format!(
                "example carries {} labels / {} targets for a {classes}-class model",
                ex.labels.len(),
                ex.align.len()
            )));
        }
        let (preds, trace) = forward_traced(params, ex.image, &all)?;
        let logits: Vec<f64> = preds.iter().map(|p| p.logit).collect();
        let (ce, d_logits) = cross_entropy(ex.labels, &logits)?;
        ce_sum += ce;

        upstream.clear();
        for (c, pred) in preds.iter().enumerate() {
            // negatives never contribute to the alignment loss
            let d_aligned = match (&ex.align[c], ex.labels[c]) {
                (Some(target), true) => {
                    let (loss, mut g) = dice_fp_loss(target, &pred.aligned_map, dice)?;
                    al_sum += loss;
                    for v in g.as_mut_slice() {
                        *v *= al_weight;
                    }
                    Some(g)
                }
                _ => None,
            };
            upstream.push(ClassUpstream {
                class_id: c,
                d_aligned,
                d_logit: d_logits[c] * ce_weight,
            });
        }
        backward_into(params, &trace, &upstream, grads)?;
    }
    let ce = ce_sum * ce_weight;
    let al = al_sum * al_weight;
    Ok(BatchLoss {
        ce,
        al,
        total: total_loss(ce, al)?,
        al_samples,
    })
}
