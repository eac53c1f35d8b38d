//! `evaluate`: scores a checkpoint on the held-out test split. With
//! ground truth present it reports per-source and global error metrics;
//! without it, it falls back to a per-record predictions CSV. Metrics
//! from repeated runs can be aggregated into mean and standard error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use causal_rff::data::{load_csv_source, load_truth_csv, CsvSchema};
use causal_rff::effects::{estimate_effects, global_ate};
use causal_rff::eval::{mean_and_se, pehe};
use causal_rff::Real;

use crate::config::ExperimentConfig;
use crate::generate::Manifest;
use crate::train::Checkpoint;
use crate::{CliError, Result};

pub struct EvalReport {
    pub metrics: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub global_ate: Option<Real>,
}

pub fn cmd_evaluate(
    config: &ExperimentConfig,
    checkpoint_path: &Path,
    data_dir: &Path,
    out_dir: &Path,
) -> Result<EvalReport> {
    let manifest = Manifest::load(data_dir)?;
    let checkpoint = Checkpoint::load(checkpoint_path)?;
    let model = checkpoint.model;
    model.validate()?;
    if model.num_sources() != manifest.m {
        return Err(CliError::Validation(format!(
            "checkpoint trained over {} sources but the manifest has {}",
            model.num_sources(),
            manifest.m
        )));
    }
    let effect = config.effect_settings();
    let schema = CsvSchema::default();
    let splits = manifest.splits;
    fs::create_dir_all(out_dir)?;
    config.save(out_dir)?;

    let truth_available =
        (0..manifest.m).all(|s| manifest.truth_path(data_dir, s).exists());

    let mut tests = Vec::with_capacity(manifest.m);
    for s in 0..manifest.m {
        let full = load_csv_source(&manifest.observed_path(data_dir, s), &schema)?;
        if full.n() < splits.train + splits.test {
            return Err(CliError::Validation(format!(
                "source {s} has {} rows, fewer than the {} the manifest's splits need",
                full.n(),
                splits.train + splits.test
            )));
        }
        tests.push(full.slice_rows(splits.train, splits.test));
    }

    if !truth_available {
        eprintln!("note: ground truth missing; writing predictions only");
        let path = out_dir.join("predictions.csv");
        let mut writer = csv::Writer::from_path(&path)?;
        writer.write_record(["source", "unit", "cate"])?;
        for (s, test) in tests.iter().enumerate() {
            let est = estimate_effects(&test.x, s, &model, &effect)?;
            for (i, cate) in est.cates.iter().enumerate() {
                let unit = test
                    .unit_ids
                    .as_ref()
                    .map(|ids| ids[i].clone())
                    .unwrap_or_else(|| (splits.train + i).to_string());
                writer.write_record(&[s.to_string(), unit, cate.to_string()])?;
            }
        }
        writer.flush()?;
        return Ok(EvalReport { metrics: None, predictions: Some(path), global_ate: None });
    }

    let path = out_dir.join("metrics.csv");
    let mut writer = csv::Writer::from_path(&path)?;
    writer.write_record(["scope", "n", "sqrt_pehe", "ate_estimate", "ate_error"])?;
    let mut pairs = Vec::with_capacity(manifest.m);
    let mut all_estimates = Vec::new();
    let mut all_truths = Vec::new();
    for (s, test) in tests.iter().enumerate() {
        let truth_rows = load_truth_csv(&manifest.truth_path(data_dir, s))?;
        if truth_rows.len() < splits.train + splits.test {
            return Err(CliError::Validation(format!(
                "truth file of source {s} has {} rows, fewer than the splits need",
                truth_rows.len()
            )));
        }
        let truth: Vec<Real> = truth_rows[splits.train..splits.train + splits.test]
            .iter()
            .map(|&(_, _, cate)| cate)
            .collect();
        let est = estimate_effects(&test.x, s, &model, &effect)?;
        let sqrt_pehe = pehe(&truth, &est.cates)?;
        let true_ate = mean_and_se(&truth)?.0;
        writer.write_record(&[
            format!("source_{s}"),
            est.count.to_string(),
            sqrt_pehe.to_string(),
            est.local_ate.to_string(),
            (est.local_ate - true_ate).abs().to_string(),
        ])?;
        pairs.push((est.local_ate, est.count as u64));
        all_estimates.extend(est.cates);
        all_truths.extend(truth);
    }
    let global = global_ate(&pairs)?;
    let pooled_pehe = pehe(&all_truths, &all_estimates)?;
    let pooled_true_ate = mean_and_se(&all_truths)?.0;
    writer.write_record(&[
        "global".to_string(),
        all_truths.len().to_string(),
        pooled_pehe.to_string(),
        global.to_string(),
        (global - pooled_true_ate).abs().to_string(),
    ])?;
    writer.flush()?;
    Ok(EvalReport { metrics: Some(path), predictions: None, global_ate: Some(global) })
}

/// Aggregates metrics CSVs from repeated runs: per scope and metric, the
/// mean and standard error over the replicates.
pub fn cmd_aggregate(inputs: &[PathBuf], out_dir: &Path) -> Result<PathBuf> {
    if inputs.len() < 2 {
        return Err(CliError::Validation(
            "aggregation needs at least two metrics files".into(),
        ));
    }
    const METRICS: [&str; 3] = ["sqrt_pehe", "ate_estimate", "ate_error"];
    // scope -> metric -> one value per replicate, in input order.
    let mut table: BTreeMap<String, BTreeMap<&str, Vec<Real>>> = BTreeMap::new();
    for path in inputs {
        let mut reader = csv::Reader::from_path(path)?;
        let headers: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
        let col = |name: &str| -> Result<usize> {
            headers.iter().position(|h| h == name).ok_or_else(|| {
                CliError::Validation(format!(
                    "{}: missing column {name:?}",
                    path.display()
                ))
            })
        };
        let scope_col = col("scope")?;
        let metric_cols: Vec<usize> =
            METRICS.iter().map(|name| col(name)).collect::<Result<_>>()?;
        for record in reader.records() {
            let record = record?;
            let scope = record[scope_col].to_string();
            for (name, &idx) in METRICS.iter().zip(&metric_cols) {
                let value: Real = record[idx].parse().map_err(|e| {
                    CliError::Validation(format!(
                        "{}: bad {name} value {:?}: {e}",
                        path.display(),
                        &record[idx]
                    ))
                })?;
                table.entry(scope.clone()).or_default().entry(name).or_default().push(value);
            }
        }
    }

    fs::create_dir_all(out_dir)?;
    let path = out_dir.join("aggregate.csv");
    let mut writer = csv::Writer::from_path(&path)?;
    writer.write_record(["scope", "metric", "mean", "se", "replicates"])?;
    for (scope, metrics) in &table {
        for name in METRICS {
            let values = &metrics[name];
            if values.len() != inputs.len() {
                return Err(CliError::Validation(format!(
                    "scope {scope:?} appears {} times across {} files",
                    values.len(),
                    inputs.len()
                )));
            }
            let (mean, se) = mean_and_se(values)?;
            writer.write_record(&[
                scope.clone(),
                name.to_string(),
                mean.to_string(),
                se.to_string(),
                values.len().to_string(),
            ])?;
        }
    }
    writer.flush()?;
    Ok(path)
}
