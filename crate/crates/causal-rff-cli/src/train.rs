//! `train`: federated training over a generated benchmark directory.
//! Writes a checkpoint, the per-round loss history, and the learned
//! transfer-factor matrices.

use std::fs;
use std::path::{Path, PathBuf};

use causal_rff::data::{load_csv_source, CsvSchema, SourceDataset};
use causal_rff::federation::run_training;
use causal_rff::model::GlobalModel;
use causal_rff::Real;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::generate::Manifest;
use crate::{CliError, Result};

/// Serialized training result; JSON keeps every float bit-exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub rounds: u64,
    pub model: GlobalModel,
    /// Records each source dropped in the dedup pre-round.
    pub dropped_records: Vec<usize>,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            CliError::Runtime(format!("cannot read checkpoint {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text).map_err(|e| {
            CliError::Validation(format!("invalid checkpoint {}: {e}", path.display()))
        })
    }
}

pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub rounds_logged: usize,
    pub first_total: Option<Real>,
    pub final_total: Option<Real>,
}

/// Training splits of every source in the manifest, in source order.
pub fn load_train_splits(manifest: &Manifest, data_dir: &Path) -> Result<Vec<SourceDataset>> {
    let schema = CsvSchema::default();
    let mut sets = Vec::with_capacity(manifest.m);
    for s in 0..manifest.m {
        let full = load_csv_source(&manifest.observed_path(data_dir, s), &schema)?;
        if full.n() < manifest.splits.train {
            return Err(CliError::Validation(format!(
                "source {s} has {} rows, fewer than the {} the manifest's train split needs",
                full.n(),
                manifest.splits.train
            )));
        }
        if full.d_x() != manifest.d_x {
            return Err(CliError::Validation(format!(
                "source {s} has {} covariate columns but the manifest says {}",
                full.d_x(),
                manifest.d_x
            )));
        }
        sets.push(full.slice_rows(0, manifest.splits.train));
    }
    Ok(sets)
}

pub fn cmd_train(
    config: &ExperimentConfig,
    data_dir: &Path,
    out_dir: &Path,
) -> Result<TrainReport> {
    let manifest = Manifest::load(data_dir)?;
    let train_sets = load_train_splits(&manifest, data_dir)?;
    let settings = config.train_settings(manifest.d_x)?;
    let transport = config.transport()?;

    let outcome = run_training(&settings, &train_sets, &transport)?;

    fs::create_dir_all(out_dir)?;
    let checkpoint_path = out_dir.join("checkpoint.json");
    let checkpoint = Checkpoint {
        rounds: settings.rounds,
        model: outcome.model,
        dropped_records: outcome.dropped_records,
    };
    let text = serde_json::to_string(&checkpoint)
        .map_err(|e| CliError::Runtime(format!("cannot serialize checkpoint: {e}")))?;
    fs::write(&checkpoint_path, text + "\n")?;

    let mut losses = csv::Writer::from_path(out_dir.join("losses.csv"))?;
    losses.write_record(["round", "source", "elbo", "propensity", "outcome", "total"])?;
    for (round, breakdown) in outcome.history.iter().enumerate() {
        for loss in &breakdown.per_source {
            losses.write_record(&[
                round.to_string(),
                loss.source_id.to_string(),
                loss.elbo.to_string(),
                loss.propensity.to_string(),
                loss.outcome.to_string(),
                loss.total().to_string(),
            ])?;
        }
    }
    losses.flush()?;

    let m = checkpoint.model.num_sources();
    let matrix = |f: &dyn Fn(usize, usize) -> Real| -> Vec<Vec<Real>> {
        (0..m).map(|s| (0..m).map(|v| f(s, v)).collect()).collect()
    };
    let factors = serde_json::json!({
        "lambda": matrix(&|s, v| checkpoint.model.factors.lambda(s, v)),
        "gamma": matrix(&|s, v| checkpoint.model.factors.gamma(s, v)),
        "eta": matrix(&|s, v| checkpoint.model.factors.eta(s, v)),
    });
    fs::write(out_dir.join("factors.json"), factors.to_string() + "\n")?;
    config.save(out_dir)?;

    Ok(TrainReport {
        checkpoint: checkpoint_path,
        rounds_logged: outcome.history.len(),
        first_total: outcome.history.first().map(|b| b.total),
        final_total: outcome.history.last().map(|b| b.total),
    })
}
