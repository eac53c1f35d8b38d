//! One JSON file describes an experiment end to end. Every field has a
//! default, unknown fields are rejected, and the effective config (after
//! flag overrides) is serialized into the output directory verbatim.

use std::fs;
use std::path::Path;
use std::time::Duration;

use causal_rff::data::{BenchmarkKind, Splits};
use causal_rff::effects::{EffectSettings, SamplerKind};
use causal_rff::federation::{BasisSettings, TrainSettings, TransportKind};
use causal_rff::model::{FactorMode, Hyperparams, ObservationKind};
use causal_rff::rff::KernelFamily;
use causal_rff::Real;
use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub benchmark: BenchmarkConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub sampler: SamplerConfig,
    pub transport: TransportConfig,
}

/// Which synthetic benchmark to draw and how to split it per source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub kind: BenchmarkKind,
    pub m: usize,
    pub n_per_source: usize,
    pub seed: u64,
    pub splits: Splits,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            kind: BenchmarkKind::Same,
            m: 3,
            n_per_source: 250,
            seed: 7,
            splits: Splits { train: 50, test: 150, validation: 50 },
        }
    }
}

/// Model capacity and observation families. `x_modes: null` treats every
/// covariate column as binary, matching the synthetic benchmarks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_features: usize,
    pub d_z: usize,
    pub m_samples: usize,
    pub sigma_z: Real,
    pub sigma_y: Real,
    pub sigma_x: Real,
    pub sigma_q: Real,
    pub zeta: Real,
    pub zeta_w: Real,
    pub zeta_y: Real,
    pub y_mode: ObservationKind,
    pub x_modes: Option<Vec<ObservationKind>>,
    pub family: KernelFamily,
    pub lengthscale_z: Real,
    pub lengthscale_xy: Real,
    pub lengthscale_x: Real,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_features: 100,
            d_z: 5,
            m_samples: 2,
            sigma_z: 1.0,
            sigma_y: 1.0,
            sigma_x: 1.0,
            sigma_q: 1.0,
            zeta: 1e-2,
            zeta_w: 1e-2,
            zeta_y: 1e-2,
            y_mode: ObservationKind::Continuous,
            x_modes: None,
            family: KernelFamily::Gaussian,
            lengthscale_z: 2.0,
            lengthscale_xy: 6.0,
            lengthscale_x: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub rounds: u64,
    pub learning_rate: Real,
    pub momentum: Real,
    pub seed: u64,
    pub init_scale: Real,
    pub factor_mode: FactorMode,
    pub factor_init_u: Real,
    pub round_timeout_secs: Option<u64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            rounds: 500,
            learning_rate: 2e-3,
            momentum: 0.9,
            seed: 71,
            init_scale: 0.1,
            factor_mode: FactorMode::Learned,
            factor_init_u: 0.0,
            round_timeout_secs: Some(120),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_draws: usize,
    pub kind: SamplerKind,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { n_draws: 30, kind: SamplerKind::Variational, seed: 2024 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TransportChoice {
    InProcess,
    Tcp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportConfig {
    pub kind: TransportChoice,
    pub listen: String,
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig { kind: TransportChoice::InProcess, listen: "127.0.0.1:0".into() }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            CliError::Validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        let config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("invalid config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    /// Writes the effective config next to a command's outputs.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Runtime(format!("cannot serialize config: {e}")))?;
        fs::write(dir.join("config.json"), text + "\n")?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.benchmark;
        if b.m == 0 {
            return Err(CliError::Validation("benchmark.m must be at least 1".into()));
        }
        if b.splits.train == 0 || b.splits.test == 0 {
            return Err(CliError::Validation(
                "benchmark.splits needs nonempty train and test splits".into(),
            ));
        }
        if b.splits.total() > b.n_per_source {
            return Err(CliError::Validation(format!(
                "benchmark.splits totals {} records but n_per_source is {}",
                b.splits.total(),
                b.n_per_source
            )));
        }
        if let Some(modes) = &self.model.x_modes {
            if modes.is_empty() {
                return Err(CliError::Validation(
                    "model.x_modes must be null or a nonempty list".into(),
                ));
            }
        }
        // The numeric ranges are enforced by the engine itself; build the
        // settings once against a placeholder width to surface them early.
        let d_x = self.model.x_modes.as_ref().map_or(1, Vec::len);
        self.train_settings(d_x)?.validate()?;
        self.effect_settings().validate()?;
        self.transport()?;
        Ok(())
    }

    /// Observation hyperparameters for data of width `d_x`.
    pub fn hyper(&self, d_x: usize) -> Result<Hyperparams> {
        let m = &self.model;
        let x_modes = match &m.x_modes {
            Some(modes) => {
                if modes.len() != d_x {
                    return Err(CliError::Validation(format!(
                        "model.x_modes lists {} columns but the data has {d_x}",
                        modes.len()
                    )));
                }
                modes.clone()
            }
            None => vec![ObservationKind::Binary; d_x],
        };
        let mut hyper = Hyperparams::with_x_modes(x_modes);
        hyper.d_z = m.d_z;
        hyper.m_samples = m.m_samples;
        hyper.sigma_z = m.sigma_z;
        hyper.sigma_y = m.sigma_y;
        hyper.sigma_x = m.sigma_x;
        hyper.sigma_q = m.sigma_q;
        hyper.zeta = m.zeta;
        hyper.zeta_w = m.zeta_w;
        hyper.zeta_y = m.zeta_y;
        hyper.y_mode = m.y_mode;
        Ok(hyper)
    }

    pub fn train_settings(&self, d_x: usize) -> Result<TrainSettings> {
        let t = &self.training;
        Ok(TrainSettings {
            rounds: t.rounds,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            seed: t.seed,
            init_scale: t.init_scale,
            factor_mode: t.factor_mode,
            factor_init_u: t.factor_init_u,
            hyper: self.hyper(d_x)?,
            basis: BasisSettings {
                family: self.model.family,
                num_features: self.model.num_features,
                lengthscale_z: self.model.lengthscale_z,
                lengthscale_xy: self.model.lengthscale_xy,
                lengthscale_x: self.model.lengthscale_x,
            },
            round_timeout: t.round_timeout_secs.map(Duration::from_secs),
        })
    }

    pub fn effect_settings(&self) -> EffectSettings {
        EffectSettings {
            n_draws: self.sampler.n_draws,
            sampler: self.sampler.kind,
            seed: self.sampler.seed,
        }
    }

    pub fn transport(&self) -> Result<TransportKind> {
        match self.transport.kind {
            TransportChoice::InProcess => Ok(TransportKind::InProcess),
            TransportChoice::Tcp => {
                let listen = self.transport.listen.parse().map_err(|e| {
                    CliError::Validation(format!(
                        "transport.listen {:?} is not a socket address: {e}",
                        self.transport.listen
                    ))
                })?;
                Ok(TransportKind::Tcp { listen })
            }
        }
    }

    /// Applies command-line overrides; `seed` replaces every seed in the
    /// config (benchmark, training, sampler) so one flag rerolls a run.
    pub fn apply_overrides(
        &mut self,
        seed: Option<u64>,
        transport: Option<TransportChoice>,
        listen: Option<String>,
    ) -> Result<()> {
        if let Some(seed) = seed {
            self.benchmark.seed = seed;
            self.training.seed = seed;
            self.sampler.seed = seed;
        }
        if let Some(kind) = transport {
            self.transport.kind = kind;
        }
        if let Some(listen) = listen {
            self.transport.listen = listen;
        }
        self.validate()
    }
}

/// Loads the config from `--config` or falls back to the defaults.
pub fn load_or_default(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(path) => ExperimentConfig::load(path),
        None => Ok(ExperimentConfig::default()),
    }
}
