//! `bounds`: tabulates the three minimax error bounds over a grid of
//! per-source record counts and transfer-factor values.

use std::fs;
use std::path::Path;

use causal_rff::eval::{
    minimax_bound_latent, minimax_bound_outcome, minimax_bound_propensity, BoundMode,
};
use causal_rff::Real;
use ndarray::Array2;

use crate::{CliError, Result};

pub struct BoundsParams {
    pub m: usize,
    pub num_features: usize,
    pub d_x: usize,
    pub sigma: Real,
    pub n_grid: Vec<u64>,
    pub lambda_grid: Vec<Real>,
    pub mode: BoundMode,
}

impl Default for BoundsParams {
    fn default() -> Self {
        BoundsParams {
            m: 3,
            num_features: 100,
            d_x: 30,
            sigma: 1.0,
            n_grid: vec![10, 100, 1000, 10000],
            lambda_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            mode: BoundMode::Continuous,
        }
    }
}

pub fn parse_mode(text: &str) -> Result<BoundMode> {
    match text {
        "continuous" => Ok(BoundMode::Continuous),
        "binary" => Ok(BoundMode::Binary),
        other => Err(CliError::Validation(format!(
            "mode must be \"continuous\" or \"binary\", got {other:?}"
        ))),
    }
}

/// Renders the bound table as CSV text and optionally writes it to
/// `<out>/bounds.csv`.
pub fn cmd_bounds(params: &BoundsParams, out_dir: Option<&Path>) -> Result<String> {
    if params.n_grid.is_empty() || params.lambda_grid.is_empty() {
        return Err(CliError::Validation("both grids need at least one value".into()));
    }
    let mut text = String::from("n,lambda,latent,propensity,outcome\n");
    for &n in &params.n_grid {
        let n_per_source = vec![n; params.m];
        for &lambda in &params.lambda_grid {
            let factors = Array2::from_shape_fn((params.m, params.m), |(s, v)| {
                if s == v {
                    1.0
                } else {
                    lambda
                }
            });
            let latent = minimax_bound_latent(
                params.m,
                params.num_features,
                params.d_x,
                &n_per_source,
                factors.view(),
                params.mode,
            )?;
            let propensity =
                minimax_bound_propensity(params.m, &n_per_source, factors.view())?;
            let outcome = minimax_bound_outcome(
                params.m,
                params.num_features,
                params.sigma,
                &n_per_source,
                factors.view(),
                params.mode,
            )?;
            text.push_str(&format!("{n},{lambda},{latent},{propensity},{outcome}\n"));
        }
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("bounds.csv"), &text)?;
    }
    Ok(text)
}
