use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{evaluate, train, EpochLog, ExperimentConfig, Scorer, ScorerResult, SplitLoader, SplitRead};
use crate::data::{generate, read_dataset, write_dataset, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{csv_row, MetricReport, CSV_HEADER};
use crate::model::{load_checkpoint, save_checkpoint, StateKind};
use crate::ood::write_bank;

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const BANK_FILE: &str = "bank.taeb";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_DOC: &str = "metrics.txt";
pub const SCORES_CSV: &str = "scores.csv";
pub const RUN_RECORD: &str = "run.toml";
pub const COMPARE_CSV: &str = "compare.csv";
const CONFIG_SNAPSHOT: &str = "config.toml";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Per-class sizes, coarse labels and ID/OOD role.
pub fn class_size_table(dataset: &Dataset) -> String {
    let mut s = String::from("class  kind  malignancy  samples\n");
    for (c, n) in dataset.class_counts().into_iter().enumerate() {
        let kind = if c < dataset.id_classes() { "ID" } else { "OOD" };
        let m = format!("{:?}", dataset.malignancy[c]).to_lowercase();
        let _ = writeln!(s, "{c:>5}  {kind:<4}  {m:<10}  {n:>7}");
    }
    s
}

/// Generates the dataset of `config.dataset` into `out`; returns the class table.
pub fn cmd_gen_data(config: &ExperimentConfig, out: &Path) -> Result<String> {
    config.dataset.validate()?;
    let dataset = generate(&config.dataset)?;
    write_dataset(&dataset, out)?;
    Ok(class_size_table(&dataset))
}

fn train_log_csv(epochs: &[EpochLog]) -> String {
    let mut s = String::from("epoch,L_S1,L_mix,L_rmix,total\n");
    for e in epochs {
        let _ = writeln!(s, "{},{},{},{},{}", e.epoch, e.l_s1, e.l_mix, e.l_rmix, e.total);
    }
    s
}

fn read_train_log(path: &Path, kinds: [StateKind; 3]) -> Result<Vec<EpochLog>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let num = |i: usize| -> Result<f64> {
                f.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::format(path, format!("bad line `{line}`")))
            };
            Ok(EpochLog {
                epoch: num(0)? as usize,
                kinds,
                l_s1: num(1)?,
                l_mix: num(2)?,
                l_rmix: num(3)?,
                total: num(4)?,
            })
        })
        .collect()
}

/// Trains on the dataset in `data`; writes `out/checkpoint/` and the epoch log.
pub fn cmd_train(config: &ExperimentConfig, data: &Path, out: &Path) -> Result<Vec<EpochLog>> {
    config.validate()?;
    let dataset = read_dataset(data)?;
    if dataset.spec != config.dataset {
        log::warn!("dataset in {} was generated from a different spec than the config's", data.display());
    }
    let loader = SplitLoader::new(&dataset)?;
    let outcome = train(config, &dataset, &loader)?;
    let dir = out.join(CHECKPOINT_DIR);
    create_dir(&dir)?;
    save_checkpoint(&outcome.checkpoint, &dir)?;
    write(&dir.join(TRAIN_LOG), train_log_csv(&outcome.epochs))?;
    write(&dir.join(CONFIG_SNAPSHOT), config.to_toml())?;
    Ok(outcome.epochs)
}

/// Everything one evaluation produced, as persisted in `run.toml`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub checkpoint: PathBuf,
    pub bank: PathBuf,
    pub k: usize,
    pub wall_clock_secs: f64,
    pub epochs: Vec<EpochLog>,
    pub split_reads: Vec<SplitRead>,
    pub scorers: Vec<ScorerSummary>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScorerSummary {
    pub scorer: Scorer,
    pub tau: f64,
    pub calibration_tpr: f64,
    pub test_tpr: f64,
    pub test_fpr: f64,
    pub report: MetricReport,
}

pub struct EvalSummary {
    pub record: RunRecord,
    pub rows: Vec<String>,
}

fn scores_csv(results: &[ScorerResult]) -> String {
    let mut s = String::from("scorer,index,score,decision,origin,predicted,truth\n");
    for r in results {
        for (i, t) in r.test.samples.iter().enumerate() {
            let truth = t.truth.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{i},{},{:?},{:?},{},{truth}",
                r.scorer, t.score, t.decision, t.origin, t.predicted
            );
        }
    }
    s
}

/// Evaluates `checkpoint` on `data` with the selected scorers and writes the
/// bank, metric table, metric document, per-sample scores and run record.
pub fn cmd_eval(
    config: &ExperimentConfig,
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    scorers: &[Scorer],
) -> Result<EvalSummary> {
    config.validate()?;
    let start = Instant::now();
    let ckpt = load_checkpoint(checkpoint)?;
    let dataset = read_dataset(data)?;
    let loader = SplitLoader::new(&dataset)?;
    let outcome = evaluate(&ckpt, &dataset, &config.ood, scorers, &loader)?;

    create_dir(out)?;
    let bank_path = out.join(BANK_FILE);
    write_bank(&outcome.bank, &bank_path)?;

    let hash = config.hash();
    let mut csv = format!("{CSV_HEADER}\n");
    let mut rows = Vec::new();
    let mut doc = format!("run = {}\nconfig_hash = {hash}\nk = {}\n", config.name, outcome.k);
    for r in &outcome.results {
        let row = csv_row(&config.name, r.scorer.name(), &hash, &r.report);
        csv.push_str(&row);
        csv.push('\n');
        rows.push(row);
        let p = format!("{}.", r.scorer);
        let _ = writeln!(doc, "{p}tau = {}\n{p}calibration_tpr = {}", r.tau, r.calibration_tpr);
        doc.push_str(&r.report.to_document(&p));
    }
    write(&out.join(METRICS_CSV), &csv)?;
    write(&out.join(METRICS_DOC), &doc)?;
    write(&out.join(SCORES_CSV), scores_csv(&outcome.results))?;

    let log_path = checkpoint.join(TRAIN_LOG);
    let epochs = if log_path.exists() {
        read_train_log(&log_path, config.effective_model().states_enabled)?
    } else {
        Vec::new()
    };
    let record = RunRecord {
        config: config.clone(),
        config_hash: hash,
        checkpoint: checkpoint.to_path_buf(),
        bank: bank_path,
        k: outcome.k,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        epochs,
        split_reads: loader.reads(),
        scorers: outcome
            .results
            .iter()
            .map(|r| ScorerSummary {
                scorer: r.scorer,
                tau: r.tau,
                calibration_tpr: r.calibration_tpr,
                test_tpr: r.test.tpr(),
                test_fpr: r.test.fpr(),
                report: r.report.clone(),
            })
            .collect(),
    };
    let text = toml::to_string(&record).map_err(|e| Error::format(out.join(RUN_RECORD), e.to_string()))?;
    write(&out.join(RUN_RECORD), text)?;
    Ok(EvalSummary { record, rows })
}

/// Trains and evaluates (KNN) every config on one shared dataset and writes
/// `out/compare.csv`, one row per config. The table is rewritten after each
/// config so a failure keeps the rows finished so far.
pub fn cmd_compare(configs: &[ExperimentConfig], data: Option<&Path>, out: &Path) -> Result<String> {
    let first = configs
        .first()
        .ok_or_else(|| Error::Config("compare needs at least one config".into()))?;
    for (i, c) in configs.iter().enumerate() {
        c.validate()?;
        if configs[..i].iter().any(|o| o.name == c.name) {
            return Err(Error::Config(format!("duplicate run name `{}`", c.name)));
        }
    }
    create_dir(out)?;
    let data_dir = match data {
        Some(d) => d.to_path_buf(),
        None => {
            if let Some(c) = configs.iter().find(|c| c.dataset != first.dataset) {
                return Err(Error::Config(format!(
                    "config `{}` uses a different dataset than `{}`; compare needs one shared dataset",
                    c.name, first.name
                )));
            }
            let d = out.join("data");
            cmd_gen_data(first, &d)?;
            d
        }
    };

    let table_path = out.join(COMPARE_CSV);
    let mut table = format!("{CSV_HEADER}\n");
    write(&table_path, &table)?;
    for c in configs {
        let run_dir = out.join(&c.name);
        let step = cmd_train(c, &data_dir, &run_dir)
            .and_then(|_| cmd_eval(c, &run_dir.join(CHECKPOINT_DIR), &data_dir, &run_dir, &[Scorer::Knn]));
        let summary = step.inspect_err(|_| {
            log::error!("run `{}` failed; {} keeps the finished rows", c.name, table_path.display());
        })?;
        for row in summary.rows {
            table.push_str(&row);
            table.push('\n');
        }
        write(&table_path, &table)?;
    }
    Ok(table)
}
