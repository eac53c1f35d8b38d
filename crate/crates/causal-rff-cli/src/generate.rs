//! `generate`: draws a synthetic multi-source benchmark and writes one
//! observed CSV and one ground-truth CSV per source, plus a manifest
//! that records everything needed to reproduce and consume the files.

use std::fs;
use std::path::{Path, PathBuf};

use causal_rff::data::{
    make_benchmark_with_splits, write_csv_source, write_truth_csv, BenchmarkKind, Splits,
};
use causal_rff::Real;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::{CliError, Result};

/// What `generate` wrote and `train`/`evaluate` read back.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: BenchmarkKind,
    pub m: usize,
    pub n_per_source: usize,
    pub d_x: usize,
    pub seed: u64,
    pub splits: Splits,
    pub deltas: Vec<Real>,
    pub sources: Vec<SourceFiles>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceFiles {
    pub observed: String,
    pub truth: String,
}

impl Manifest {
    pub fn load(data_dir: &Path) -> Result<Self> {
        let path = data_dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| {
            CliError::Runtime(format!("cannot read manifest {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text).map_err(|e| {
            CliError::Validation(format!("invalid manifest {}: {e}", path.display()))
        })
    }

    pub fn observed_path(&self, data_dir: &Path, s: usize) -> PathBuf {
        data_dir.join(&self.sources[s].observed)
    }

    pub fn truth_path(&self, data_dir: &Path, s: usize) -> PathBuf {
        data_dir.join(&self.sources[s].truth)
    }
}

pub fn cmd_generate(config: &ExperimentConfig, out_dir: &Path) -> Result<Manifest> {
    let b = &config.benchmark;
    let bench =
        make_benchmark_with_splits(b.kind, b.m, b.splits, b.n_per_source, b.seed)?;
    fs::create_dir_all(out_dir)?;

    let mut sources = Vec::with_capacity(b.m);
    for (s, source) in bench.sources.iter().enumerate() {
        let files = SourceFiles {
            observed: format!("source_{s}.csv"),
            truth: format!("truth_{s}.csv"),
        };
        write_csv_source(&out_dir.join(&files.observed), &source.observed)?;
        write_truth_csv(&out_dir.join(&files.truth), source)?;
        sources.push(files);
    }

    let manifest = Manifest {
        kind: b.kind,
        m: b.m,
        n_per_source: b.n_per_source,
        d_x: bench.sources[0].observed.d_x(),
        seed: b.seed,
        splits: b.splits,
        deltas: bench.deltas.clone(),
        sources,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CliError::Runtime(format!("cannot serialize manifest: {e}")))?;
    fs::write(out_dir.join("manifest.json"), text + "\n")?;
    config.save(out_dir)?;
    Ok(manifest)
}
