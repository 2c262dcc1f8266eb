//! Command-line front end of the `egl` binary.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::Result;
use crate::harness::config::{AlignmentMode, ExperimentConfig};
use crate::harness::report::{
    write_json, write_kv_csv, write_sweep, CONFIG_ECHO_FILE, REPORT_CSV_FILE, REPORT_JSON_FILE,
};
use crate::harness::sweep::{ablate_random, sweep_alignment, sweep_data_ratio, workers_from_env, SweepReport};
use crate::harness::train::{eval_records, train};
use crate::metrics::{fairness_report, metric_set, Flatten, Grouping, DEFAULT_THRESHOLD};
use crate::model::{load_checkpoint, save_checkpoint};
use crate::synthdata::{generate, read_dataset, write_dataset, Dataset, GeneratorConfig, Split};

pub const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Debug, Parser)]
#[command(name = "egl", version, about = "Attention-alignment experiments on synthetic shortcut data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Human,
    Random,
    None,
}

impl From<ModeArg> for AlignmentMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Human => AlignmentMode::Human,
            ModeArg::Random => AlignmentMode::Random,
            ModeArg::None => AlignmentMode::None,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Id,
    Ood,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum GroupArg {
    Sex,
    Age,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum KindArg {
    Alignment,
    Ratio,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Generate {
        /// Experiment config; only its generator section is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and evaluate it on both test splits.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 100)]
        level: u8,
        #[arg(long, value_enum, default_value_t = ModeArg::Human)]
        mode: ModeArg,
        #[arg(long, default_value_t = 100)]
        ratio: u8,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fairness report of a saved model on one test split.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        split: SplitArg,
        #[arg(long, value_enum, default_value_t = GroupArg::Sex)]
        group: GroupArg,
        /// Path of the JSON report; a CSV with the same stem is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Alignment-level or data-ratio sweep.
    Sweep {
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Existing dataset; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// None / human / random alignment comparison.
    Ablate {
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<Dataset> {
    match data {
        Some(d) => read_dataset(d),
        None => generate(&cfg.generator),
    }
}

#[derive(Serialize)]
struct SplitSummary {
    n: usize,
    positives_per_class: Vec<usize>,
    markers_per_class: Vec<usize>,
    align_eligible: usize,
}

fn summarize(ds: &Dataset) -> BTreeMap<String, SplitSummary> {
    Split::ALL
        .iter()
        .map(|&s| {
            let samples = ds.split(s);
            let classes = ds.config.classes;
            let count = |f: &dyn Fn(&crate::synthdata::Sample, usize) -> bool| {
                (0..classes).map(|c| samples.iter().filter(|x| f(x, c)).count()).collect()
            };
            (
                s.name().to_string(),
                SplitSummary {
                    n: samples.len(),
                    positives_per_class: count(&|x, c| x.labels[c]),
                    markers_per_class: count(&|x, c| x.markers[c]),
                    align_eligible: samples.iter().filter(|x| x.align_eligible).count(),
                },
            )
        })
        .collect()
}

fn cmd_generate(config: Option<&Path>, out: &Path) -> Result<()> {
    let gen: GeneratorConfig = load_config(config)?.generator;
    let ds = generate(&gen)?;
    write_dataset(&ds, out)?;
    let summary = summarize(&ds);
    write_json(&out.join(CONFIG_ECHO_FILE), &gen)?;
    write_json(&out.join(REPORT_JSON_FILE), &summary)?;
    let mut flat = BTreeMap::new();
    for (split, s) in &summary {
        flat.insert(format!("{split}.n"), s.n as f64);
        for (c, &p) in s.positives_per_class.iter().enumerate() {
            flat.insert(format!("{split}.positives.{c}"), p as f64);
            flat.insert(format!("{split}.markers.{c}"), s.markers_per_class[c] as f64);
        }
    }
    write_kv_csv(&out.join(REPORT_CSV_FILE), &flat)?;
    eprintln!("wrote dataset to {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: &Path,
    level: u8,
    mode: AlignmentMode,
    ratio: u8,
    seed: u64,
    config: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let exp = load_config(config)?;
    let cfg = crate::harness::TrainConfig {
        alignment_level: level,
        alignment_mode: mode,
        data_ratio: ratio,
        seed,
        ..exp.train.clone()
    };
    cfg.validate()?;
    let ds = read_dataset(data)?;
    let (params, result) = train(&exp.model, &cfg, &ds)?;
    std::fs::create_dir_all(out)?;
    save_checkpoint(&params, &out.join(CHECKPOINT_FILE))?;
    write_json(
        &out.join(CONFIG_ECHO_FILE),
        &serde_json::json!({ "model": exp.model, "train": cfg, "data": data }),
    )?;
    write_json(&out.join(REPORT_JSON_FILE), &result)?;
    write_kv_csv(&out.join(REPORT_CSV_FILE), &result.summary())?;
    eprintln!(
        "best val auc {:.4} at epoch {} of {}; ood auc {}",
        result.best_val_auc,
        result.best_epoch,
        result.epochs_trained,
        result
            .test_ood
            .overall
            .auc
            .map_or("undefined".to_string(), |v| format!("{v:.4}"))
    );
    Ok(())
}

fn cmd_evaluate(model: &Path, data: &Path, split: SplitArg, group: GroupArg, out: &Path) -> Result<()> {
    let params = load_checkpoint(model)?;
    let ds = read_dataset(data)?;
    let samples = match split {
        SplitArg::Id => &ds.test_id,
        SplitArg::Ood => &ds.test_ood,
    };
    let grouping = match group {
        GroupArg::Sex => Grouping::Sex,
        GroupArg::Age => Grouping::Age,
    };
    let records = eval_records(&params, samples)?;
    let refs: Vec<_> = records.iter().collect();
    let overall = metric_set(&refs, DEFAULT_THRESHOLD)?;
    let fairness = fairness_report(&records, grouping, DEFAULT_THRESHOLD)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let split_name = match split {
        SplitArg::Id => "id",
        SplitArg::Ood => "ood",
    };
    write_json(
        out,
        &serde_json::json!({
            "model": model,
            "data": data,
            "split": split_name,
            "overall": overall,
            "fairness": fairness,
        }),
    )?;
    let mut flat = BTreeMap::new();
    for (k, v) in overall.flatten() {
        flat.insert(format!("overall.{k}"), v);
    }
    for (k, v) in fairness.flatten() {
        flat.insert(format!("{}.{k}", grouping.name()), v);
    }
    write_kv_csv(&out.with_extension("csv"), &flat)?;
    for (m, gap) in &fairness.gaps {
        eprintln!("{} gap {m}: {:.2}", grouping.name(), gap * 100.0);
    }
    Ok(())
}

fn finish_sweep(out: &Path, exp: &ExperimentConfig, report: &SweepReport) -> Result<()> {
    write_sweep(out, exp, report)?;
    eprintln!(
        "{} runs, {} aggregate rows written to {}",
        report.runs.len(),
        report.rows.len(),
        out.display()
    );
    Ok(())
}

fn cmd_sweep(
    kind: KindArg,
    seeds: Option<Vec<u64>>,
    config: Option<&Path>,
    data: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let mut exp = load_config(config)?;
    if let Some(s) = seeds {
        exp.seeds = s;
    }
    let ds = load_data(&exp, data)?;
    let workers = workers_from_env()?;
    let report = match kind {
        KindArg::Alignment => sweep_alignment(&exp.model, &exp.train, &ds, &exp.levels, &exp.seeds, workers)?,
        KindArg::Ratio => sweep_data_ratio(&exp.model, &exp.train, &ds, &exp.ratios, &exp.seeds, workers)?,
    };
    finish_sweep(out, &exp, &report)
}

fn cmd_ablate(seeds: Option<Vec<u64>>, config: Option<&Path>, data: Option<&Path>, out: &Path) -> Result<()> {
    let mut exp = load_config(config)?;
    if let Some(s) = seeds {
        exp.seeds = s;
    }
    let ds = load_data(&exp, data)?;
    let report = ablate_random(&exp.model, &exp.train, &ds, &exp.seeds, workers_from_env()?)?;
    finish_sweep(out, &exp, &report)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, out } => cmd_generate(config.as_deref(), &out),
        Command::Train {
            data,
            level,
            mode,
            ratio,
            seed,
            config,
            out,
        } => cmd_train(&data, level, mode.into(), ratio, seed, config.as_deref(), &out),
        Command::Evaluate {
            model,
            data,
            split,
            group,
            out,
        } => cmd_evaluate(&model, &data, split, group, &out),
        Command::Sweep {
            kind,
            seeds,
            config,
            data,
            out,
        } => cmd_sweep(kind, seeds, config.as_deref(), data.as_deref(), &out),
        Command::Ablate {
            seeds,
            config,
            data,
            out,
        } => cmd_ablate(seeds, config.as_deref(), data.as_deref(), &out),
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn main() -> i32 {
    run_from(std::env::args_os())
}
