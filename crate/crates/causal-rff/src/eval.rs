//! Effect-estimation metrics and closed-form minimax lower bounds.
//!
//! The bounds are worst-case estimation-error floors for multi-source
//! learning as functions of per-source sample sizes and the transfer
//! factors: more records or stronger transfer strictly lowers every
//! bound. Each evaluator has a continuous-observation form and a
//! binary-observation form selected by [`BoundMode`]. Logarithms are
//! natural throughout.

use ndarray::ArrayView2;

use crate::{Error, Real, Result, Scalar};

/// Root precision in estimating heterogeneous effects:
/// `√(Σ (τ_i − τ̂_i)² / n)`.
pub fn pehe<T: Scalar>(true_cate: &[T], est_cate: &[T]) -> Result<T> {
    if true_cate.is_empty() {
        return Err(Error::parameter("true_cate", 0usize, "need at least one record"));
    }
    if true_cate.len() != est_cate.len() {
        return Err(Error::shape("pehe inputs", true_cate.len(), est_cate.len()));
    }
    let n = T::from_usize(true_cate.len()).expect("count fits scalar");
    let sum: T = true_cate
        .iter()
        .zip(est_cate.iter())
        .map(|(&t, &e)| (t - e) * (t - e))
        .sum();
    Ok((sum / n).sqrt())
}

/// Absolute error of an average-effect estimate, `|τ − τ̂|`.
pub fn ate_error<T: Scalar>(true_ate: T, est_ate: T) -> T {
    (true_ate - est_ate).abs()
}

/// Mean and standard error over replicate values; the standard error is
/// the sample standard deviation (one delta degree of freedom) divided by
/// `√k`, and 0 for a single replicate.
pub fn mean_and_se(values: &[Real]) -> Result<(Real, Real)> {
    if values.is_empty() {
        return Err(Error::parameter("values", 0usize, "need at least one replicate"));
    }
    let k = values.len() as Real;
    let mean = values.iter().sum::<Real>() / k;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / (k - 1.0);
    Ok((mean, (var / k).sqrt()))
}

/// Observation family a bound is evaluated under.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundMode {
    Continuous,
    Binary,
}

fn check_bound_inputs(
    m: usize,
    n_per_source: &[u64],
    factors: ArrayView2<'_, Real>,
    factor_name: &'static str,
) -> Result<()> {
    if m == 0 {
        return Err(Error::parameter("m", m, "must be at least 1"));
    }
    if n_per_source.len() != m {
        return Err(Error::shape("per-source sample sizes", m, n_per_source.len()));
    }
    if n_per_source.contains(&0) {
        return Err(Error::parameter("n_per_source", 0usize, "every source needs a record"));
    }
    if factors.dim() != (m, m) {
        return Err(Error::shape("factor matrix", m * m, factors.len()));
    }
    for s in 0..m {
        for v in 0..m {
            if s == v {
                continue;
            }
            let f = factors[(s, v)];
            if !(0.0..=1.0).contains(&f) || f.is_nan() {
                return Err(Error::parameter(factor_name, f, "off-diagonals must lie in [0, 1]"));
            }
        }
    }
    Ok(())
}

fn log_term(m: usize) -> Real {
    (2.0 * (m as Real).sqrt()).ln()
}

/// `Σ_s n_s (1 + Σ_{v≠s} f^{s,v})^power`.
fn factor_denominator(
    m: usize,
    n_per_source: &[u64],
    factors: ArrayView2<'_, Real>,
    power: i32,
) -> Real {
    (0..m)
        .map(|s| {
            let transfer: Real = (0..m).filter(|&v| v != s).map(|v| factors[(s, v)]).sum();
            n_per_source[s] as Real * (1.0 + transfer).powi(power)
        })
        .sum()
}

/// Minimax floor for estimating the latent-confounder model.
///
/// Continuous observations:
/// `√(m(d_x+3)) · ln(2√m) / (64 √B · Σ_s n_s (1+Σλ)²)`.
/// Binary observations: `3 m B · ln(2√m) / (128 B · Σ_s n_s (1+Σλ))`.
pub fn minimax_bound_latent(
    m: usize,
    num_features: usize,
    d_x: usize,
    n_per_source: &[u64],
    lambda: ArrayView2<'_, Real>,
    mode: BoundMode,
) -> Result<Real> {
    check_bound_inputs(m, n_per_source, lambda, "lambda")?;
    if num_features == 0 {
        return Err(Error::parameter("num_features", num_features, "must be at least 1"));
    }
    if d_x == 0 {
        return Err(Error::parameter("d_x", d_x, "must be at least 1"));
    }
    let m_real = m as Real;
    let b = num_features as Real;
    Ok(match mode {
        BoundMode::Continuous => {
            let numerator = (m_real * (d_x as Real + 3.0)).sqrt() * log_term(m);
            numerator / (64.0 * b.sqrt() * factor_denominator(m, n_per_source, lambda, 2))
        }
        BoundMode::Binary => {
            let numerator = 3.0 * m_real * b * log_term(m);
            numerator / (128.0 * b * factor_denominator(m, n_per_source, lambda, 1))
        }
    })
}

/// Minimax floor for estimating the propensity model:
/// `m · ln(2√m) / (256 · Σ_s n_s (1+Σγ))`.
pub fn minimax_bound_propensity(
    m: usize,
    n_per_source: &[u64],
    gamma: ArrayView2<'_, Real>,
) -> Result<Real> {
    check_bound_inputs(m, n_per_source, gamma, "gamma")?;
    Ok(m as Real * log_term(m) / (256.0 * factor_denominator(m, n_per_source, gamma, 1)))
}

/// Minimax floor for estimating the outcome model.
///
/// Continuous outcomes:
/// `(σ / 2^{9/2}) · √(m · ln(2√m) / (B · Σ_s n_s (1+Ση)²))`.
/// Binary outcomes: `m · ln(2√m) / (32√2 · Σ_s n_s (1+Ση))`.
pub fn minimax_bound_outcome(
    m: usize,
    num_features: usize,
    sigma: Real,
    n_per_source: &[u64],
    eta: ArrayView2<'_, Real>,
    mode: BoundMode,
) -> Result<Real> {
    check_bound_inputs(m, n_per_source, eta, "eta")?;
    if num_features == 0 {
        return Err(Error::parameter("num_features", num_features, "must be at least 1"));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::parameter("sigma", sigma, "must be a positive finite real"));
    }
    let m_real = m as Real;
    let b = num_features as Real;
    Ok(match mode {
        BoundMode::Continuous => {
            let inside = m_real * log_term(m) / (b * factor_denominator(m, n_per_source, eta, 2));
            sigma / (2.0 as Real).powf(4.5) * inside.sqrt()
        }
        BoundMode::Binary => {
            m_real * log_term(m)
                / (32.0 * (2.0 as Real).sqrt() * factor_denominator(m, n_per_source, eta, 1))
        }
    })
}
