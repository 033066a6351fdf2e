//! The six commands. Every output goes under the configured output directory
//! with a fixed file name.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use groupact::checkpoint::Checkpoint;
use groupact::gradcheck::{run_suite, CheckResult, TOLERANCE};
use groupact::metrics::{write_predictions, EvalReport};
use groupact::nn::Adam;
use groupact::scene::{read_dataset, write_dataset, Dataset};
use groupact::train::LOSS_CSV_HEADER;
use groupact::verify::{assignment_suite, metric_oracle_suite};
use groupact::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::experiments::{
    build_model, evaluate_clips, generate_datasets, prepare, run_ablation, summarize, train, DatasetSummary,
    ABLATION_CSV_HEADER, COMPONENT_ROWS, VARIANT_ROWS,
};

pub const TRAIN_FILE: &str = "train.json";
pub const EVAL_FILE: &str = "eval.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const LOSSES_FILE: &str = "losses.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const REPORT_FILE: &str = "report.json";
pub const REPORT_CSV_FILE: &str = "report.csv";
pub const RUN_FILE: &str = "run.json";
pub const ABLATION_FILE: &str = "ablation.csv";

pub const ORACLE_MATRICES: usize = 1000;
pub const ORACLE_BENCHMARKS: usize = 200;
pub const METRIC_TOLERANCE: f64 = 1e-9;

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSummary {
    pub train: DatasetSummary,
    pub eval: DatasetSummary,
}

pub fn cmd_gen(cfg: &ExperimentConfig) -> Result<GenSummary> {
    let dir = cfg.dataset_dir();
    ensure_dir(&dir)?;
    let (train_set, eval_set) = generate_datasets(cfg)?;
    write_dataset(&train_set, &dir.join(TRAIN_FILE))?;
    write_dataset(&eval_set, &dir.join(EVAL_FILE))?;
    let summary = GenSummary { train: summarize(&train_set.clips), eval: summarize(&eval_set.clips) };
    fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
    log::info!("wrote {} train and {} eval clips to {}", summary.train.clips, summary.eval.clips, dir.display());
    Ok(summary)
}

pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let dir = cfg.dataset_dir();
    let read = |name: &str| {
        let p = dir.join(name);
        if !p.exists() {
            return Err(Error::Usage(format!("dataset file {} not found; run `gen` first", p.display())));
        }
        read_dataset(&p)
    };
    Ok((read(TRAIN_FILE)?, read(EVAL_FILE)?))
}

/// Rejects a checkpoint whose token budget differs from the configuration.
pub fn check_compatible(ck: &Checkpoint, cfg: &ExperimentConfig) -> Result<()> {
    match ck.config.get("K").and_then(serde_json::Value::as_u64) {
        Some(k) if k as usize == cfg.k => Ok(()),
        Some(k) => Err(Error::Config(format!("checkpoint was trained with K={k}, configuration has K={}", cfg.k))),
        None => Err(Error::Config("checkpoint header has no K".into())),
    }
}

/// Resolved configuration, step count, final report and timing of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub steps: usize,
    pub report: Option<EvalReport>,
    pub wall_clock_seconds: f64,
    pub artifact_version: String,
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    fs::write(dir.join(REPORT_FILE), report.to_json()?)?;
    fs::write(dir.join(REPORT_CSV_FILE), format!("{}\n{}\n", report.csv_header(), report.csv_row()))?;
    Ok(())
}

/// Keeps the header and the rows of steps before `step`.
fn truncate_losses(path: &Path, step: usize) -> Result<String> {
    let mut out = format!("{LOSS_CSV_HEADER}\n");
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let s: usize = line.split(',').next().and_then(|f| f.parse().ok()).unwrap_or(usize::MAX);
            if s < step {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    Ok(out)
}

pub fn cmd_train(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<RunRecord> {
    let start = Instant::now();
    let out = cfg.out_dir();
    ensure_dir(&out)?;
    cfg.save(&out)?;
    let (train_set, eval_set) = load_datasets(cfg)?;
    let (model, store) = build_model(cfg)?;
    let train_clips = prepare(cfg, &model, &train_set.clips)?;
    let eval_clips = prepare(cfg, &model, &eval_set.clips)?;

    let ck = resume.map(Checkpoint::load).transpose()?;
    if let Some(ck) = &ck {
        check_compatible(ck, cfg)?;
    }
    let losses_path = out.join(LOSSES_FILE);
    let head = truncate_losses(&losses_path, ck.as_ref().map_or(0, |c| c.step))?;
    let head = if ck.is_none() { format!("{LOSS_CSV_HEADER}\n") } else { head };
    fs::write(&losses_path, head)?;
    let mut losses = fs::OpenOptions::new().append(true).open(&losses_path)?;

    let trained = train(cfg, &model, store, &train_clips, ck.as_ref(), |r| {
        writeln!(losses, "{}", r.csv_row())?;
        if r.step % 50 == 0 {
            log::info!("step {} lr {:.3e} total {:.6}", r.step, r.lr, r.losses.total);
        }
        Ok(())
    })?;
    let snapshot = serde_json::to_value(cfg)?;
    Checkpoint::capture(snapshot, trained.steps, &trained.store, &trained.adam).save(&out.join(CHECKPOINT_FILE))?;

    let report = if eval_clips.is_empty() {
        None
    } else {
        let (preds, report) = evaluate_clips(cfg, &model, &trained.store, &eval_clips)?;
        write_predictions(&preds, &out.join(PREDICTIONS_FILE))?;
        write_report(&out, &report)?;
        Some(report)
    };
    let record = RunRecord {
        config: cfg.clone(),
        seed: cfg.seed,
        steps: trained.steps,
        report,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    fs::write(out.join(RUN_FILE), serde_json::to_string_pretty(&record)? + "\n")?;
    Ok(record)
}

pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<EvalReport> {
    let out = cfg.out_dir();
    ensure_dir(&out)?;
    let ck = Checkpoint::load(checkpoint)?;
    check_compatible(&ck, cfg)?;
    let (_, eval_set) = load_datasets(cfg)?;
    let (model, mut store) = build_model(cfg)?;
    let mut adam = Adam::new(&store, cfg.train_config().adam);
    ck.restore(&mut store, &mut adam)?;
    let clips = prepare(cfg, &model, &eval_set.clips)?;
    let (preds, report) = evaluate_clips(cfg, &model, &store, &clips)?;
    write_predictions(&preds, &out.join(PREDICTIONS_FILE))?;
    write_report(&out, &report)?;
    Ok(report)
}

/// Component rows then fusion variants, each over every configured seed.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let out = cfg.out_dir();
    ensure_dir(&out)?;
    cfg.save(&out)?;
    let (train_set, eval_set) = load_datasets(cfg)?;
    let rows: Vec<_> = COMPONENT_ROWS.iter().chain(&VARIANT_ROWS).copied().collect();
    let results = run_ablation(cfg, &rows, &train_set.clips, &eval_set.clips)?;
    let mut csv = format!("{ABLATION_CSV_HEADER}\n");
    for r in &results {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    let path = out.join(ABLATION_FILE);
    fs::write(&path, csv)?;
    Ok(path)
}

pub fn format_check(r: &CheckResult) -> String {
    format!(
        "{:<28} max_rel_err {:.3e} over {:>5} entries  {}",
        r.name,
        r.max_rel_err,
        r.checked,
        if r.passed() { "PASS" } else { "FAIL" }
    )
}

/// Prints one line per operation plus the miniature model; `Ok(false)` when
/// any exceeds the tolerance.
pub fn cmd_gradcheck(cfg: &ExperimentConfig) -> Result<bool> {
    let results = run_suite(cfg.seed)?;
    for r in &results {
        println!("{}", format_check(r));
    }
    let ok = results.iter().all(CheckResult::passed);
    println!("gradcheck {} (tolerance {TOLERANCE:e})", if ok { "PASS" } else { "FAIL" });
    Ok(ok)
}

pub fn cmd_oracle(cfg: &ExperimentConfig) -> Result<bool> {
    let a = assignment_suite(cfg.seed, ORACLE_MATRICES)?;
    let a_ok = a.mismatches == 0;
    println!("assignment: {} matrices, {} mismatches  {}", a.cases, a.mismatches, if a_ok { "PASS" } else { "FAIL" });
    let worst = metric_oracle_suite(cfg.seed, ORACLE_BENCHMARKS)?;
    let m_ok = worst <= METRIC_TOLERANCE;
    println!(
        "metrics: {ORACLE_BENCHMARKS} benchmarks, max abs diff {worst:.3e}  {}",
        if m_ok { "PASS" } else { "FAIL" }
    );
    Ok(a_ok && m_ok)
}
