//! Evaluation: ROC AUC, thresholded confusion metrics, pointing-game hit
//! rate, per-subgroup metric bundles with best-minus-worst gaps, and
//! mean ± sample-std aggregation over repeated runs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::diffcore::Grid;
use crate::error::{Error, Result};
use crate::losses::AttentionTarget;
use crate::synthdata::Demographics;

/// Decision threshold on `σ(z)` for accuracy, sensitivity and F1.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Mann-Whitney AUC: the fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half. Computed from tie-grouped ranks in
/// `O(n log n)`.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dimension("auc scores/labels", (1, scores.len()), (1, labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Domain("auc score is NaN".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "auc needs both classes (positives={n_pos}, negatives={n_neg})"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Twice the Mann-Whitney U, kept integral so the result is exact.
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == s {
            if labels[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_u += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        i = j;
    }
    Ok((twice_u as f64 * 0.5) / ((n_pos * n_neg) as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub accuracy: f64,
    /// Absent when there are no positive labels.
    pub sensitivity: Option<f64>,
    /// Absent when TP + FP + FN = 0.
    pub f1: Option<f64>,
    pub confusion: Confusion,
}

/// Predicts positive when `score >= threshold`.
pub fn threshold_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Result<ThresholdMetrics> {
    if scores.len() != labels.len() {
        return Err(Error::dimension(
            "threshold metrics scores/labels",
            (1, scores.len()),
            (1, labels.len()),
        ));
    }
    if scores.is_empty() {
        return Err(Error::Domain("threshold metrics on empty input".into()));
    }
    let mut c = Confusion {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    let n = scores.len() as f64;
    let accuracy = (c.tp + c.tn) as f64 / n;
    let sensitivity = (c.tp + c.fn_ > 0).then(|| c.tp as f64 / (c.tp + c.fn_) as f64);
    let denom = 2 * c.tp + c.fp + c.fn_;
    let f1 = (denom > 0).then(|| 2.0 * c.tp as f64 / denom as f64);
    Ok(ThresholdMetrics {
        accuracy,
        sensitivity,
        f1,
        confusion: c,
    })
}

/// Row-major index of the maximum; ties go to the lowest index.
pub fn argmax_index(map: &Grid) -> usize {
    let mut best = 0;
    for (i, &v) in map.as_slice().iter().enumerate() {
        if v > map.as_slice()[best] {
            best = i;
        }
    }
    best
}

/// Whether the peak of `map` falls inside `mask`.
pub fn is_hit(map: &Grid, mask: &AttentionTarget) -> Result<bool> {
    if map.shape() != mask.shape() {
        return Err(Error::dimension("hit-rate map/mask", map.shape(), mask.shape()));
    }
    if mask.is_empty() {
        return Err(Error::Precondition("hit rate on an empty mask".into()));
    }
    Ok(mask.contains(argmax_index(map)))
}

/// Pointing-game hit rate over (attention map, expert mask) pairs.
pub fn hit_rate<'a, I>(pairs: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a Grid, &'a AttentionTarget)>,
{
    let (mut hits, mut n) = (0usize, 0usize);
    for (map, mask) in pairs {
        n += 1;
        if is_hit(map, mask)? {
            hits += 1;
        }
    }
    if n == 0 {
        return Err(Error::Domain("hit rate over an empty list".into()));
    }
    Ok(hits as f64 / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Auc,
    Sensitivity,
    F1,
    HitRate,
}

impl Metric {
    pub const GAP_METRICS: [Metric; 4] = [Metric::Accuracy, Metric::Auc, Metric::Sensitivity, Metric::F1];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Auc => "auc",
            Metric::Sensitivity => "sensitivity",
            Metric::F1 => "f1",
            Metric::HitRate => "hit_rate",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Metric bundle for one population. Class-level metrics are
/// macro-averaged; a macro value is absent unless every class defines it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub sensitivity: Option<f64>,
    pub f1: Option<f64>,
    pub hit_rate: Option<f64>,
    pub n: usize,
}

impl MetricSet {
    pub fn get(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::Accuracy => Some(self.accuracy),
            Metric::Auc => self.auc,
            Metric::Sensitivity => self.sensitivity,
            Metric::F1 => self.f1,
            Metric::HitRate => self.hit_rate,
        }
    }
}

/// Everything needed to score one evaluated sample.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    /// `σ(z_c)` per class
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    /// Aligned attention map per class at grid resolution.
    pub maps: Vec<Grid>,
    /// Expert mask per class at grid resolution, present for positive
    /// classes that have an annotation.
    pub masks: Vec<Option<AttentionTarget>>,
    pub demographics: Demographics,
}

pub fn metric_set(records: &[&EvalRecord], threshold: f64) -> Result<MetricSet> {
    let first = records
        .first()
        .ok_or_else(|| Error::Domain("metric set over zero samples".into()))?;
    let classes = first.labels.len();
    if records.iter().any(|r| r.labels.len() != classes || r.scores.len() != classes) {
        return Err(Error::Dimension("records disagree on class count".into()));
    }

    let mut acc = Vec::with_capacity(classes);
    let mut aucs = Vec::with_capacity(classes);
    let mut sens = Vec::with_capacity(classes);
    let mut f1s = Vec::with_capacity(classes);
    for c in 0..classes {
        let scores: Vec<f64> = records.iter().map(|r| r.scores[c]).collect();
        let labels: Vec<bool> = records.iter().map(|r| r.labels[c]).collect();
        let t = threshold_metrics(&scores, &labels, threshold)?;
        acc.push(t.accuracy);
        sens.push(t.sensitivity);
        f1s.push(t.f1);
        aucs.push(match auc(&scores, &labels) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        });
    }
    let macro_avg = |vals: &[Option<f64>]| -> Option<f64> {
        let defined: Option<Vec<f64>> = vals.iter().copied().collect();
        defined.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    };

    let pairs: Vec<(&Grid, &AttentionTarget)> = records
        .iter()
        .flat_map(|r| {
            r.maps
                .iter()
                .zip(&r.masks)
                .zip(&r.labels)
                .filter_map(|((map, mask), &y)| mask.as_ref().filter(|_| y).map(|m| (map, m)))
        })
        .collect();
    let hit = if pairs.is_empty() {
        None
    } else {
        Some(hit_rate(pairs)?)
    };

    Ok(MetricSet {
        accuracy: acc.iter().sum::<f64>() / classes as f64,
        auc: macro_avg(&aucs),
        sensitivity: macro_avg(&sens),
        f1: macro_avg(&f1s),
        hit_rate: hit,
        n: records.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    Sex,
    Age,
}

impl Grouping {
    pub fn name(self) -> &'static str {
        match self {
            Grouping::Sex => "sex",
            Grouping::Age => "age",
        }
    }

    pub fn label(self, d: &Demographics) -> &'static str {
        match self {
            Grouping::Sex => d.sex.name(),
            Grouping::Age => d.age_group.name(),
        }
    }
}

impl std::str::FromStr for Grouping {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sex" | "gender" => Ok(Grouping::Sex),
            "age" | "age_group" => Ok(Grouping::Age),
            other => Err(Error::Config(format!("unknown grouping {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub grouping: Grouping,
    pub threshold: f64,
    pub per_subgroup: BTreeMap<String, MetricSet>,
    /// Best minus worst subgroup value, in the metric's own unit.
    pub gaps: BTreeMap<Metric, f64>,
    /// Subgroups left out of a metric's gap because the metric is
    /// undefined for them.
    pub excluded: BTreeMap<Metric, Vec<String>>,
}

impl FairnessReport {
    pub fn gap(&self, m: Metric) -> Option<f64> {
        self.gaps.get(&m).copied()
    }
}

/// Per-subgroup metrics plus best-minus-worst gaps over the four
/// performance metrics. Requires at least two subgroups with a defined AUC.
pub fn fairness_report(records: &[EvalRecord], grouping: Grouping, threshold: f64) -> Result<FairnessReport> {
    let mut groups: BTreeMap<String, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry(grouping.label(&r.demographics).to_string())
            .or_default()
            .push(r);
    }
    let mut per_subgroup = BTreeMap::new();
    for (label, rs) in &groups {
        per_subgroup.insert(label.clone(), metric_set(rs, threshold)?);
    }
    gaps_from_subgroups(grouping, threshold, per_subgroup)
}

/// Gap computation over precomputed subgroup metric sets.
pub fn gaps_from_subgroups(
    grouping: Grouping,
    threshold: f64,
    per_subgroup: BTreeMap<String, MetricSet>,
) -> Result<FairnessReport> {
    let mut gaps = BTreeMap::new();
    let mut excluded = BTreeMap::new();
    for m in Metric::GAP_METRICS {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut valid = 0;
        let mut left_out = Vec::new();
        for (label, set) in &per_subgroup {
            match set.get(m) {
                Some(v) => {
                    lo = lo.min(v);
                    hi = hi.max(v);
                    valid += 1;
                }
                None => left_out.push(label.clone()),
            }
        }
        if !left_out.is_empty() {
            excluded.insert(m, left_out);
        }
        if valid >= 2 {
            gaps.insert(m, hi - lo);
        } else if m == Metric::Auc {
            return Err(Error::UndefinedMetric(format!(
                "auc gap needs two subgroups with both classes present, found {valid}"
            )));
        }
    }
    Ok(FairnessReport {
        grouping,
        threshold,
        per_subgroup,
        gaps,
        excluded,
    })
}

/// Named scalar fields of a report, used for cross-run aggregation.
pub trait Flatten {
    fn flatten(&self) -> BTreeMap<String, f64>;
}

impl Flatten for MetricSet {
    fn flatten(&self) -> BTreeMap<String, f64> {
        [Metric::Accuracy, Metric::Auc, Metric::Sensitivity, Metric::F1, Metric::HitRate]
            .into_iter()
            .filter_map(|m| self.get(m).map(|v| (m.name().to_string(), v)))
            .collect()
    }
}

impl Flatten for FairnessReport {
    fn flatten(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for (m, v) in &self.gaps {
            out.insert(format!("gap.{m}"), *v);
        }
        for (g, set) in &self.per_subgroup {
            for (k, v) in set.flatten() {
                out.insert(format!("{g}.{k}"), v);
            }
        }
        out
    }
}

impl Flatten for BTreeMap<String, f64> {
    fn flatten(&self) -> BTreeMap<String, f64> {
        self.clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Unbiased (n − 1) sample standard deviation.
    pub std: f64,
    pub n: usize,
}

impl Aggregate {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Precondition(format!(
                "standard deviation needs at least 2 runs, got {}",
                values.len()
            )));
        }
        let n = values.len() as f64;
        if values.iter().all(|&v| v == values[0]) {
            // summation rounding would otherwise leak into the spread
            return Ok(Self {
                mean: values[0],
                std: 0.0,
                n: values.len(),
            });
        }
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Ok(Self {
            mean,
            std: var.sqrt(),
            n: values.len(),
        })
    }

    /// Percentage-point rendering, e.g. `3.20 ± 0.19` for a mean of 0.032.
    pub fn display_pct(&self) -> String {
        format!("{:.2} ± {:.2}", self.mean * 100.0, self.std * 100.0)
    }
}

impl fmt::Display for Aggregate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

/// Mean and sample std of every field across runs. All runs must expose
/// the same field names.
pub fn aggregate_runs<T: Flatten>(runs: &[T]) -> Result<BTreeMap<String, Aggregate>> {
    if runs.len() < 2 {
        return Err(Error::Precondition(format!(
            "aggregation needs at least 2 runs, got {}",
            runs.len()
        )));
    }
    let flat: Vec<BTreeMap<String, f64>> = runs.iter().map(Flatten::flatten).collect();
    let keys: BTreeSet<&String> = flat[0].keys().collect();
    for (i, f) in flat.iter().enumerate().skip(1) {
        let other: BTreeSet<&String> = f.keys().collect();
        if other != keys {
            let diff: Vec<_> = keys.symmetric_difference(&other).collect();
            return Err(Error::Schema(format!("run {i} differs from run 0 in fields {diff:?}")));
        }
    }
    keys.into_iter()
        .map(|k| {
            let vals: Vec<f64> = flat.iter().map(|f| f[k]).collect();
            Ok((k.clone(), Aggregate::from_values(&vals)?))
        })
        .collect()
}
