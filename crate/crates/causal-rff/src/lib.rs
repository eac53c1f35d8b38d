//! Federated estimation of heterogeneous treatment effects.
//!
//! Several data sources hold private records `(w, y, x)` of a binary
//! treatment, an outcome, and proxy covariates of a latent confounder.
//! They jointly fit a shared latent-variable causal model whose function
//! heads are linear in a random Fourier feature map, which makes the
//! global training objective decompose exactly into one term per source.
//! A parameter server aggregates per-source gradients; raw records never
//! leave their source. After training, each source estimates conditional
//! and average treatment effects locally and only `(local ATE, count)`
//! summaries are pooled.
//!
//! Module map:
//! - [`rff`]: random Fourier feature bases and cross-source head mixing;
//! - [`model`]: the structural model, its variational encoder, and all
//!   learned parameters;
//! - [`training`]: losses, analytic gradients, and the SGD update;
//! - [`federation`]: dedup round, synchronous protocol, transports, and
//!   the wire codec;
//! - [`effects`]: posterior sampling and CATE/ATE estimation;
//! - [`data`]: synthetic benchmark generation and CSV ingestion;
//! - [`eval`]: error metrics and minimax lower-bound evaluators.

pub mod data;
pub mod effects;
pub mod eval;
pub mod federation;
pub mod model;
pub mod rff;
pub mod training;

/// Scalar type of the numeric kernels (feature maps, divergences, metrics).
///
/// Implemented for `f32` and `f64`. The federated pipeline itself is fixed
/// to [`Real`] because its wire format carries 8-byte floats.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Concrete scalar used by the model, training, and federation pipeline.
pub type Real = f64;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A parameter is outside its documented domain.
    #[error("invalid parameter `{parameter}`: {reason} (got {value})")]
    Parameter {
        parameter: &'static str,
        value: String,
        reason: &'static str,
    },

    /// Two containers that must agree in size do not.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// A state machine was driven out of order or with inconsistent peers.
    #[error("protocol violation: {0}")]
    Protocol(String),

    /// A CSV cell or column failed validation.
    #[error("ingestion error at row {row}, column `{column}`: {reason}")]
    Ingestion {
        row: usize,
        column: String,
        reason: String,
    },

    /// A computation produced a NaN or infinity.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// The model is not in a state that supports the requested operation.
    #[error("model state error: {0}")]
    State(String),

    /// A transport failed mid-run.
    #[error("transport failure at round {round}: {reason}")]
    Transport { round: u64, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn parameter(
        parameter: &'static str,
        value: impl std::fmt::Display,
        reason: &'static str,
    ) -> Self {
        Error::Parameter {
            parameter,
            value: value.to_string(),
            reason,
        }
    }

    pub(crate) fn shape(context: &'static str, expected: usize, got: usize) -> Self {
        Error::Shape {
            context,
            expected,
            got,
        }
    }
}
