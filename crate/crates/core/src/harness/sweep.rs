//! Multi-run experiments: alignment-level sweep, data-ratio sweep and the
//! randomized-alignment ablation.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{AlignmentMode, TrainConfig};
use super::train::{train, RunResult};
use crate::error::{Error, Result};
use crate::metrics::Aggregate;
use crate::model::ModelConfig;
use crate::synthdata::Dataset;

/// Name of the environment variable selecting the worker count.
pub const WORKERS_ENV: &str = "EGL_WORKERS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Alignment,
    Ratio,
    Ablation,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Alignment => "alignment",
            SweepKind::Ratio => "ratio",
            SweepKind::Ablation => "ablation",
        }
    }
}

impl std::str::FromStr for SweepKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alignment" => Ok(SweepKind::Alignment),
            "ratio" => Ok(SweepKind::Ratio),
            "ablation" => Ok(SweepKind::Ablation),
            other => Err(Error::Config(format!("unknown sweep kind {other:?}"))),
        }
    }
}

/// Identifies one experimental condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Arm {
    pub level: u8,
    pub mode: AlignmentMode,
    pub ratio: u8,
}

impl Arm {
    pub fn train_config(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            data_ratio: self.ratio,
            seed,
            ..base.with_arm(self.level, self.mode)
        }
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "level {} / {} / ratio {}", self.level, self.mode, self.ratio)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub arm: Arm,
    pub seed: u64,
    pub result: RunResult,
}

/// One aggregate line of a sweep report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub level: u8,
    pub mode: AlignmentMode,
    pub ratio: u8,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub kind: SweepKind,
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
    /// Per arm, summary fields that some runs left undefined and that are
    /// therefore not aggregated.
    pub incomplete: BTreeMap<String, Vec<String>>,
    pub runs: Vec<RunRecord>,
}

impl SweepReport {
    pub fn row(&self, arm: Arm, metric: &str) -> Option<&SweepRow> {
        self.rows
            .iter()
            .find(|r| r.level == arm.level && r.mode == arm.mode && r.ratio == arm.ratio && r.metric == metric)
    }

    pub fn mean(&self, arm: Arm, metric: &str) -> Option<f64> {
        self.row(arm, metric).map(|r| r.mean)
    }

    pub fn runs_of(&self, arm: Arm) -> impl Iterator<Item = &RunRecord> {
        self.runs.iter().filter(move |r| r.arm == arm)
    }
}

/// Worker count from the environment; `None` means serial execution.
pub fn workers_from_env() -> Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

/// Trains every (arm, seed) pair. Results come back in job order
/// regardless of the worker count.
pub fn run_jobs(
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    data: &Dataset,
    jobs: &[(Arm, u64)],
    workers: Option<usize>,
) -> Result<Vec<RunRecord>> {
    let one = |&(arm, seed): &(Arm, u64)| -> Result<RunRecord> {
        let cfg = arm.train_config(base, seed);
        let (_, result) = train(model_cfg, &cfg, data).map_err(|e| match e {
            Error::Training(m) => Error::Training(format!("{arm}, seed {seed}: {m}")),
            other => other,
        })?;
        Ok(RunRecord { arm, seed, result })
    };
    match workers {
        None | Some(1) => jobs.iter().map(one).collect(),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))?;
            pool.install(|| jobs.par_iter().map(one).collect::<Vec<_>>())
                .into_iter()
                .collect()
        }
    }
}

/// Groups runs by arm and aggregates every summary field shared by all
/// runs of that arm. Rows are sorted by (level, mode, ratio, metric).
pub fn aggregate(kind: SweepKind, seeds: &[u64], mut runs: Vec<RunRecord>) -> Result<SweepReport> {
    runs.sort_by_key(|r| (r.arm, r.seed));
    let mut by_arm: BTreeMap<Arm, Vec<BTreeMap<String, f64>>> = BTreeMap::new();
    for r in &runs {
        by_arm.entry(r.arm).or_default().push(r.result.summary());
    }
    let mut rows = Vec::new();
    let mut incomplete = BTreeMap::new();
    for (arm, summaries) in &by_arm {
        let all: BTreeSet<&String> = summaries.iter().flat_map(|s| s.keys()).collect();
        let mut missing = Vec::new();
        for key in all {
            let values: Vec<f64> = summaries.iter().filter_map(|s| s.get(key).copied()).collect();
            if values.len() < summaries.len() {
                missing.push(key.clone());
                continue;
            }
            let agg = Aggregate::from_values(&values)?;
            rows.push(SweepRow {
                level: arm.level,
                mode: arm.mode,
                ratio: arm.ratio,
                metric: key.clone(),
                mean: agg.mean,
                std: agg.std,
                n: agg.n,
            });
        }
        if !missing.is_empty() {
            incomplete.insert(arm.to_string(), missing);
        }
    }
    Ok(SweepReport {
        kind,
        seeds: seeds.to_vec(),
        rows,
        incomplete,
        runs,
    })
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    let distinct: BTreeSet<_> = seeds.iter().collect();
    if seeds.len() < 2 || distinct.len() != seeds.len() {
        return Err(Error::Config(format!("a sweep needs at least 2 distinct seeds, got {seeds:?}")));
    }
    Ok(())
}

fn jobs_for(arms: &[Arm], seeds: &[u64]) -> Vec<(Arm, u64)> {
    arms.iter().flat_map(|&a| seeds.iter().map(move |&s| (a, s))).collect()
}

pub fn alignment_arms(levels: &[u8], mode: AlignmentMode) -> Vec<Arm> {
    levels
        .iter()
        .map(|&level| Arm {
            level,
            mode: if level == 0 { AlignmentMode::None } else { mode },
            ratio: 100,
        })
        .collect()
}

pub fn ratio_arms(ratios: &[u8]) -> Vec<Arm> {
    ratios
        .iter()
        .flat_map(|&ratio| {
            [
                Arm {
                    level: 0,
                    mode: AlignmentMode::None,
                    ratio,
                },
                Arm {
                    level: 100,
                    mode: AlignmentMode::Human,
                    ratio,
                },
            ]
        })
        .collect()
}

pub fn ablation_arms() -> Vec<Arm> {
    [(0, AlignmentMode::None), (100, AlignmentMode::Human), (100, AlignmentMode::Random)]
        .into_iter()
        .map(|(level, mode)| Arm { level, mode, ratio: 100 })
        .collect()
}

/// Levels × seeds runs at full data ratio with human masks.
pub fn sweep_alignment(
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    data: &Dataset,
    levels: &[u8],
    seeds: &[u64],
    workers: Option<usize>,
) -> Result<SweepReport> {
    check_seeds(seeds)?;
    let arms = alignment_arms(levels, AlignmentMode::Human);
    let runs = run_jobs(model_cfg, base, data, &jobs_for(&arms, seeds), workers)?;
    aggregate(SweepKind::Alignment, seeds, runs)
}

/// Paired aligned (level 100, human) and baseline (level 0) arms per ratio.
pub fn sweep_data_ratio(
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    data: &Dataset,
    ratios: &[u8],
    seeds: &[u64],
    workers: Option<usize>,
) -> Result<SweepReport> {
    check_seeds(seeds)?;
    let runs = run_jobs(model_cfg, base, data, &jobs_for(&ratio_arms(ratios), seeds), workers)?;
    aggregate(SweepKind::Ratio, seeds, runs)
}

/// No alignment, human masks and random shapes under matched seeds.
pub fn ablate_random(
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    data: &Dataset,
    seeds: &[u64],
    workers: Option<usize>,
) -> Result<SweepReport> {
    check_seeds(seeds)?;
    let runs = run_jobs(model_cfg, base, data, &jobs_for(&ablation_arms(), seeds), workers)?;
    aggregate(SweepKind::Ablation, seeds, runs)
}
