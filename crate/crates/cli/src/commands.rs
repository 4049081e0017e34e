//! One function per subcommand, plus the run-directory plumbing they
//! share.  Every command materializes its outputs under
//! `<out_dir>/<run-id>/` and returns the directory it wrote.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use time::macros::format_description;
use time::OffsetDateTime;

use cfct_core::augment::{check_selection_distribution, write_selection_csv};
use cfct_core::encoder::EmbeddingTable;
use cfct_core::eval::{evaluate_seq, write_metrics_csv, RankingReport, Similarity};
use cfct_core::ingest::{build_dataset, parse_interactions, InteractionDataset};
use cfct_core::trainer::{run_training, HyperParams, TrainMode, TrainReport};

use crate::config::ExperimentConfig;
use crate::CliError;

/// Timestamp plus a short hash of whatever will be written into the run's
/// manifest, so concurrent runs with different configs cannot collide.
fn run_id<T: Serialize>(manifest_src: &T) -> String {
    let stamp = OffsetDateTime::now_utc()
        .format(format_description!(
            "[year][month][day]T[hour][minute][second]Z"
        ))
        .unwrap_or_else(|_| "00000000T000000Z".to_string());
    let bytes = serde_json::to_vec(manifest_src).unwrap_or_default();
    let hash = Sha256::digest(&bytes);
    format!(
        "{stamp}-{:02x}{:02x}{:02x}{:02x}",
        hash[0], hash[1], hash[2], hash[3]
    )
}

/// Creates `<out>/<id>`, suffixing a counter if a same-second run with the
/// same config already claimed the name.
fn create_run_dir(out: &Path, id: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(out)?;
    let mut dir = out.join(id);
    let mut attempt = 1usize;
    loop {
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                attempt += 1;
                dir = out.join(format!("{id}-{attempt}"));
            }
            Err(e) => return Err(e.into()),
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    mode: &'a str,
    engine_version: &'a str,
    interactions: usize,
    split: cfct_core::ingest::SplitManifest,
    config: &'a ExperimentConfig,
}

fn manifest<'a>(
    command: &'a str,
    cfg: &'a ExperimentConfig,
    ds: &InteractionDataset,
    interactions: usize,
) -> RunManifest<'a> {
    RunManifest {
        command,
        mode: if cfg.parallel { "parallel" } else { "sequential" },
        engine_version: env!("CARGO_PKG_VERSION"),
        interactions,
        split: ds.split_manifest(cfg.split.seed, cfg.split.test_fraction),
        config: cfg,
    }
}

/// Parses and splits the configured dataset.  Returns the dataset and the
/// raw interaction count (pre-deduplication).
fn load_dataset(cfg: &ExperimentConfig) -> Result<(InteractionDataset, usize), CliError> {
    let file = File::open(&cfg.dataset.path).map_err(|e| {
        CliError::usage(format!(
            "cannot open dataset {}: {e}",
            cfg.dataset.path.display()
        ))
    })?;
    let rows = parse_interactions(BufReader::new(file), cfg.dataset.format)?;
    let ds = build_dataset(&rows, cfg.split.test_fraction, cfg.split.seed)?;
    Ok((ds, rows.len()))
}

fn train_mode(cfg: &ExperimentConfig) -> TrainMode {
    if cfg.parallel {
        TrainMode::Parallel
    } else {
        TrainMode::Sequential
    }
}

/// Trains under `hp` and scores the result, using the similarity the loss
/// trains toward.
fn train_and_score(
    ds: &InteractionDataset,
    hp: &HyperParams,
    mode: TrainMode,
    cutoffs: &[usize],
) -> Result<(EmbeddingTable, TrainReport, RankingReport), CliError> {
    let (table, train_report) = run_training(ds, hp, mode)?;
    let sim = Similarity::from(hp.loss);
    let metrics = match mode {
        TrainMode::Sequential => evaluate_seq(&table, ds, cutoffs, sim)?,
        TrainMode::Parallel => cfct_core::eval::evaluate(&table, ds, cutoffs, sim)?,
    };
    Ok((table, train_report, metrics))
}

fn write_run_files(
    dir: &Path,
    table: &EmbeddingTable,
    train_report: &TrainReport,
    metrics: &RankingReport,
) -> Result<(), CliError> {
    table.save_checkpoint(dir.join("checkpoint.bin"))?;
    let mut jsonl = BufWriter::new(File::create(dir.join("train.jsonl"))?);
    train_report.write_jsonl(&mut jsonl)?;
    jsonl.flush()?;
    let mut csv = BufWriter::new(File::create(dir.join("metrics.csv"))?);
    write_metrics_csv(&mut csv, metrics)?;
    csv.flush()?;
    Ok(())
}

fn print_metrics(metrics: &RankingReport) {
    for (name, values) in [
        ("precision", &metrics.precision),
        ("recall", &metrics.recall),
        ("ndcg", &metrics.ndcg),
    ] {
        let cells: Vec<String> = metrics
            .cutoffs
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{name}@{k} {v:.4}"))
            .collect();
        println!("{}", cells.join("  "));
    }
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let (ds, interactions) = load_dataset(cfg)?;
    let (table, train_report, metrics) =
        train_and_score(&ds, &cfg.hyper, train_mode(cfg), &cfg.cutoffs)?;

    let man = manifest("train", cfg, &ds, interactions);
    let dir = create_run_dir(&cfg.out_dir, &run_id(&man))?;
    write_run_files(&dir, &table, &train_report, &metrics)?;
    write_json(&dir.join("run_manifest.json"), &man)?;

    println!(
        "trained {} for {} epochs on {} users / {} items ({} interactions)",
        cfg.hyper.loss, cfg.hyper.epochs, ds.num_users, ds.num_items, interactions
    );
    if let Some(loss) = train_report.final_mean_loss() {
        println!("final mean loss {loss:.6}");
    }
    print_metrics(&metrics);
    Ok(dir)
}

pub fn cmd_evaluate(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<PathBuf, CliError> {
    if !checkpoint.exists() {
        return Err(CliError::usage(format!(
            "checkpoint not found: {}",
            checkpoint.display()
        )));
    }
    let (ds, interactions) = load_dataset(cfg)?;
    let table = EmbeddingTable::load_checkpoint(checkpoint)?;
    if table.num_users() != ds.num_users || table.num_items() != ds.num_items {
        return Err(CliError::usage(format!(
            "checkpoint shape {}x{} does not match dataset {}x{}",
            table.num_users(),
            table.num_items(),
            ds.num_users,
            ds.num_items
        )));
    }
    let sim = Similarity::from(cfg.hyper.loss);
    let metrics = evaluate_seq(&table, &ds, &cfg.cutoffs, sim)?;

    #[derive(Serialize)]
    struct EvalManifest<'a> {
        #[serde(flatten)]
        base: RunManifest<'a>,
        checkpoint: &'a Path,
    }
    let man = EvalManifest {
        base: manifest("evaluate", cfg, &ds, interactions),
        checkpoint,
    };
    let dir = create_run_dir(&cfg.out_dir, &run_id(&man))?;
    let mut csv = BufWriter::new(File::create(dir.join("metrics.csv"))?);
    write_metrics_csv(&mut csv, &metrics)?;
    csv.flush()?;
    write_json(&dir.join("run_manifest.json"), &man)?;

    print_metrics(&metrics);
    Ok(dir)
}

pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    if cfg.sweep_m.is_empty() && cfg.sweep_alpha.is_empty() {
        return Err(CliError::usage(
            "sweep needs a non-empty sweep_m and/or sweep_alpha grid".into(),
        ));
    }
    let m_grid = if cfg.sweep_m.is_empty() {
        vec![cfg.hyper.m_positives]
    } else {
        cfg.sweep_m.clone()
    };
    let a_grid = if cfg.sweep_alpha.is_empty() {
        vec![cfg.hyper.alpha]
    } else {
        cfg.sweep_alpha.clone()
    };

    let (ds, interactions) = load_dataset(cfg)?;
    let man = manifest("sweep", cfg, &ds, interactions);
    let sweep_dir = create_run_dir(&cfg.out_dir, &run_id(&man))?;
    write_json(&sweep_dir.join("run_manifest.json"), &man)?;

    let mut sweep_csv = BufWriter::new(File::create(sweep_dir.join("sweep.csv"))?);
    writeln!(sweep_csv, "M,alpha,metric,K,value")?;
    sweep_csv.flush()?;

    for &m in &m_grid {
        for &alpha in &a_grid {
            let mut point_cfg = cfg.clone();
            point_cfg.hyper.m_positives = m;
            point_cfg.hyper.alpha = alpha;
            point_cfg
                .hyper
                .validate()
                .map_err(|e| CliError::usage(format!("grid point M={m} alpha={alpha}: {e}")))?;

            let (table, train_report, metrics) =
                train_and_score(&ds, &point_cfg.hyper, train_mode(cfg), &cfg.cutoffs)?;

            let point_dir = sweep_dir.join(format!("m{m}-alpha{alpha}"));
            fs::create_dir(&point_dir)?;
            write_run_files(&point_dir, &table, &train_report, &metrics)?;
            write_json(
                &point_dir.join("run_manifest.json"),
                &manifest("sweep", &point_cfg, &ds, interactions),
            )?;

            for (name, values) in [
                ("precision", &metrics.precision),
                ("recall", &metrics.recall),
                ("ndcg", &metrics.ndcg),
            ] {
                for (k, v) in metrics.cutoffs.iter().zip(values) {
                    writeln!(sweep_csv, "{m},{alpha},{name},{k},{v}")?;
                }
            }
            // One grid point, one flush: a later abort cannot corrupt rows
            // that were already reported.
            sweep_csv.flush()?;
            println!(
                "M={m} alpha={alpha}: precision@{} {:.4}",
                metrics.cutoffs[0],
                metrics.precision[0]
            );
        }
    }
    Ok(sweep_dir)
}

pub struct VerifyParams {
    pub alpha: f64,
    pub catalog_size: usize,
    pub trials: u64,
    pub seed: u64,
    pub out: PathBuf,
}

/// Returns the run directory and whether the distribution check passed.
pub fn cmd_verify_lemma2(p: &VerifyParams) -> Result<(PathBuf, bool), CliError> {
    let check = check_selection_distribution(p.catalog_size, p.alpha, p.trials, p.seed)?;

    #[derive(Serialize)]
    struct VerifyManifest {
        command: &'static str,
        engine_version: &'static str,
        alpha: f64,
        catalog_size: usize,
        trials: u64,
        seed: u64,
        r_squared: f64,
        slope: f64,
        slope_sigmas: f64,
        max_item_sigma: f64,
        passed: bool,
    }
    let man = VerifyManifest {
        command: "verify-lemma2",
        engine_version: env!("CARGO_PKG_VERSION"),
        alpha: p.alpha,
        catalog_size: p.catalog_size,
        trials: p.trials,
        seed: p.seed,
        r_squared: check.report.fit.r_squared,
        slope: check.report.fit.slope,
        slope_sigmas: check.slope_sigmas,
        max_item_sigma: check.max_item_sigma,
        passed: check.passed,
    };
    let dir = create_run_dir(&p.out, &run_id(&man))?;
    let mut csv = BufWriter::new(File::create(dir.join("selection.csv"))?);
    write_selection_csv(&mut csv, &check)?;
    csv.flush()?;
    write_json(&dir.join("run_manifest.json"), &man)?;

    println!(
        "alpha={} catalog={} trials={}",
        p.alpha, p.catalog_size, p.trials
    );
    println!(
        "affine fit: R^2 = {:.6}, slope = {:.3e} ({:.2} sigma from flat)",
        check.report.fit.r_squared, check.report.fit.slope, check.slope_sigmas
    );
    println!(
        "largest per-item deviation: {:.2} sigma",
        check.max_item_sigma
    );
    println!("{}", if check.passed { "PASS" } else { "FAIL" });
    Ok((dir, check.passed))
}

pub fn cmd_ingest(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let (ds, interactions) = load_dataset(cfg)?;
    let man = manifest("ingest", cfg, &ds, interactions);
    let dir = create_run_dir(&cfg.out_dir, &run_id(&man))?;
    write_json(
        &dir.join("split_manifest.json"),
        &ds.split_manifest(cfg.split.seed, cfg.split.test_fraction),
    )?;
    write_json(&dir.join("run_manifest.json"), &man)?;

    let train: usize = ds.train_pos.iter().map(Vec::len).sum();
    let test: usize = ds.test_pos.iter().map(Vec::len).sum();
    println!(
        "parsed {} interactions: {} users, {} items, {} train / {} test positives",
        interactions, ds.num_users, ds.num_items, train, test
    );
    Ok(dir)
}
