//! The latent-confounder structural model and its variational encoder.
//!
//! A latent confounder `z ~ N(0, σ_z² I)` drives three observed families:
//! treatment `w ~ Bern(logistic(f_w(z)))`, outcome
//! `y | w, z ~ N((1-w) f_y0(z) + w f_y1(z), σ_y²)` (or a Bernoulli head
//! for binary outcomes), and proxy covariates `x | z` with one continuous
//! or binary head per dimension. Inference uses a Gaussian encoder
//! `q(z | y, w, x) = N((1-w) f_q0(y, x) + w f_q1(y, x), σ_q² I)`.
//!
//! Every function head is linear in a shared random Fourier feature map,
//! `f_c(u) = (θ_c^s + Σ_{v≠s} λ^{s,v} θ_c^v)ᵀ φ(u)`, where `s` is the
//! source making the prediction and `λ^{s,v} ∈ (0, 1)` is a learned
//! transfer factor weighting peer `v`'s head. Treatment gating is exact:
//! heads for the untaken arm never influence the output.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rff::{effective_weight, effective_weight_matrix, FourierBasis};
use crate::{Error, Real, Result};

/// Observation family of an outcome or covariate dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationKind {
    Continuous,
    Binary,
}

/// Fixed (non-learned) model hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub sigma_z: Real,
    pub sigma_y: Real,
    pub sigma_x: Real,
    pub sigma_q: Real,
    /// Latent dimension `d_z`.
    pub d_z: usize,
    /// Monte-Carlo latent samples per record, `M`.
    pub m_samples: usize,
    /// Regularizer factor on the latent-model heads.
    pub zeta: Real,
    /// Regularizer factor on the propensity head.
    pub zeta_w: Real,
    /// Regularizer factor on the auxiliary outcome heads.
    pub zeta_y: Real,
    /// Observation family per covariate dimension (length `d_x`).
    pub x_modes: Vec<ObservationKind>,
    /// Observation family of the outcome; continuous is the default.
    pub y_mode: ObservationKind,
}

impl Hyperparams {
    /// Defaults: all σ = 1, d_z = 5, M = 2, all ζ = 1e-2, continuous
    /// outcome, with covariate modes supplied per dimension.
    pub fn with_x_modes(x_modes: Vec<ObservationKind>) -> Self {
        Hyperparams {
            sigma_z: 1.0,
            sigma_y: 1.0,
            sigma_x: 1.0,
            sigma_q: 1.0,
            d_z: 5,
            m_samples: 2,
            zeta: 1e-2,
            zeta_w: 1e-2,
            zeta_y: 1e-2,
            x_modes,
            y_mode: ObservationKind::Continuous,
        }
    }

    pub fn d_x(&self) -> usize {
        self.x_modes.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("sigma_z", self.sigma_z),
            ("sigma_y", self.sigma_y),
            ("sigma_x", self.sigma_x),
            ("sigma_q", self.sigma_q),
        ] {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::parameter(name, value, "must be a positive finite real"));
            }
        }
        for (name, value) in [
            ("zeta", self.zeta),
            ("zeta_w", self.zeta_w),
            ("zeta_y", self.zeta_y),
        ] {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(Error::parameter(name, value, "must be a nonnegative finite real"));
            }
        }
        if self.d_z == 0 {
            return Err(Error::parameter("d_z", self.d_z, "must be at least 1"));
        }
        if self.m_samples == 0 {
            return Err(Error::parameter("m_samples", self.m_samples, "must be at least 1"));
        }
        if self.x_modes.is_empty() {
            return Err(Error::parameter("x_modes", 0usize, "must cover at least one covariate"));
        }
        Ok(())
    }
}

/// One source's head weights.
///
/// Latent-model heads act on `φ_z(z)` (dimension `2B_z`): `theta_y0`,
/// `theta_y1`, `theta_w` as vectors and `theta_x` as a `2B_z × d_x`
/// matrix. Encoder heads `theta_q0`, `theta_q1` are `2B_q × d_z` matrices
/// acting on `φ_xy([x; y])`. Auxiliary heads `psi` (propensity) and
/// `beta0`, `beta1` (outcome) act on `φ_x(x)` (dimension `2B_x`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceParams {
    pub theta_y0: Array1<Real>,
    pub theta_y1: Array1<Real>,
    pub theta_w: Array1<Real>,
    pub theta_x: Array2<Real>,
    pub theta_q0: Array2<Real>,
    pub theta_q1: Array2<Real>,
    pub psi: Array1<Real>,
    pub beta0: Array1<Real>,
    pub beta1: Array1<Real>,
}

/// Tensor shapes of one model instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    /// Feature dimension over the latent space, `2B_z`.
    pub phi_z: usize,
    /// Feature dimension over the `(x, y)` space, `2B_q`.
    pub phi_xy: usize,
    /// Feature dimension over the covariate space, `2B_x`.
    pub phi_x: usize,
    pub d_x: usize,
    pub d_z: usize,
}

impl SourceParams {
    pub fn zeros(dims: &ModelDims) -> Self {
        SourceParams {
            theta_y0: Array1::zeros(dims.phi_z),
            theta_y1: Array1::zeros(dims.phi_z),
            theta_w: Array1::zeros(dims.phi_z),
            theta_x: Array2::zeros((dims.phi_z, dims.d_x)),
            theta_q0: Array2::zeros((dims.phi_xy, dims.d_z)),
            theta_q1: Array2::zeros((dims.phi_xy, dims.d_z)),
            psi: Array1::zeros(dims.phi_x),
            beta0: Array1::zeros(dims.phi_x),
            beta1: Array1::zeros(dims.phi_x),
        }
    }

    /// Draws every entry from `N(0, scale²)`.
    pub fn sampled(dims: &ModelDims, scale: Real, rng: &mut ChaCha8Rng) -> Self {
        let mut params = Self::zeros(dims);
        if scale > 0.0 {
            let law = Normal::new(0.0, scale).expect("positive std");
            params.for_each_mut(|p| *p = law.sample(rng));
        }
        params
    }

    /// Vector-valued fields in wire order.
    pub fn vec_fields(&self) -> [(&'static str, &Array1<Real>); 6] {
        [
            ("theta_y0", &self.theta_y0),
            ("theta_y1", &self.theta_y1),
            ("theta_w", &self.theta_w),
            ("psi", &self.psi),
            ("beta0", &self.beta0),
            ("beta1", &self.beta1),
        ]
    }

    /// Matrix-valued fields in wire order.
    pub fn mat_fields(&self) -> [(&'static str, &Array2<Real>); 3] {
        [
            ("theta_x", &self.theta_x),
            ("theta_q0", &self.theta_q0),
            ("theta_q1", &self.theta_q1),
        ]
    }

    pub fn vec_fields_mut(&mut self) -> [&mut Array1<Real>; 6] {
        [
            &mut self.theta_y0,
            &mut self.theta_y1,
            &mut self.theta_w,
            &mut self.psi,
            &mut self.beta0,
            &mut self.beta1,
        ]
    }

    pub fn mat_fields_mut(&mut self) -> [&mut Array2<Real>; 3] {
        [&mut self.theta_x, &mut self.theta_q0, &mut self.theta_q1]
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut Real)) {
        for field in self.vec_fields_mut() {
            field.iter_mut().for_each(&mut f);
        }
        for field in self.mat_fields_mut() {
            field.iter_mut().for_each(&mut f);
        }
    }

    /// Applies `f(own, other)` over paired entries, field by field in wire
    /// order. Shapes must already agree.
    pub fn zip_mut_with(&mut self, other: &SourceParams, mut f: impl FnMut(&mut Real, Real)) {
        self.theta_y0.zip_mut_with(&other.theta_y0, |a, b| f(a, *b));
        self.theta_y1.zip_mut_with(&other.theta_y1, |a, b| f(a, *b));
        self.theta_w.zip_mut_with(&other.theta_w, |a, b| f(a, *b));
        self.psi.zip_mut_with(&other.psi, |a, b| f(a, *b));
        self.beta0.zip_mut_with(&other.beta0, |a, b| f(a, *b));
        self.beta1.zip_mut_with(&other.beta1, |a, b| f(a, *b));
        self.theta_x.zip_mut_with(&other.theta_x, |a, b| f(a, *b));
        self.theta_q0.zip_mut_with(&other.theta_q0, |a, b| f(a, *b));
        self.theta_q1.zip_mut_with(&other.theta_q1, |a, b| f(a, *b));
    }

    /// Squared norm of the latent-model heads (the ζ-regularized set:
    /// `theta_y0`, `theta_y1`, `theta_w`, `theta_x`, `theta_q0`,
    /// `theta_q1`).
    pub fn latent_sq_norm(&self) -> Real {
        sq(&self.theta_y0)
            + sq(&self.theta_y1)
            + sq(&self.theta_w)
            + self.theta_x.iter().map(|v| v * v).sum::<Real>()
            + self.theta_q0.iter().map(|v| v * v).sum::<Real>()
            + self.theta_q1.iter().map(|v| v * v).sum::<Real>()
    }

    /// Squared norm of the propensity head.
    pub fn psi_sq_norm(&self) -> Real {
        sq(&self.psi)
    }

    /// Squared norm of the auxiliary outcome heads.
    pub fn beta_sq_norm(&self) -> Real {
        sq(&self.beta0) + sq(&self.beta1)
    }

    pub fn matches(&self, dims: &ModelDims) -> bool {
        self.theta_y0.len() == dims.phi_z
            && self.theta_y1.len() == dims.phi_z
            && self.theta_w.len() == dims.phi_z
            && self.theta_x.dim() == (dims.phi_z, dims.d_x)
            && self.theta_q0.dim() == (dims.phi_xy, dims.d_z)
            && self.theta_q1.dim() == (dims.phi_xy, dims.d_z)
            && self.psi.len() == dims.phi_x
            && self.beta0.len() == dims.phi_x
            && self.beta1.len() == dims.phi_x
    }
}

fn sq(v: &Array1<Real>) -> Real {
    v.iter().map(|x| x * x).sum()
}

/// How transfer factors behave during training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorMode {
    /// Factors are free parameters in unconstrained space, read through
    /// the logistic map.
    Learned,
    /// Every off-diagonal factor reads as the given constant and receives
    /// no updates. `fixed(1.0)` is the full-pooling ablation.
    Fixed(Real),
}

/// Cross-source transfer coefficients.
///
/// `lambda` weights peer latent-model heads, `gamma` peer propensity
/// heads, `eta` peer auxiliary outcome heads. Entries are stored as
/// unconstrained reals and mapped through the logistic function on read,
/// so learned factors always lie strictly inside `(0, 1)`. `λ^{s,v}` and
/// `λ^{v,s}` are independent parameters; the diagonal is the implicit
/// self-weight 1 and is never applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveFactors {
    pub(crate) mode: FactorMode,
    pub(crate) lambda_u: Array2<Real>,
    pub(crate) gamma_u: Array2<Real>,
    pub(crate) eta_u: Array2<Real>,
}

/// Which of the three factor families to read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FactorKind {
    Lambda,
    Gamma,
    Eta,
}

impl AdaptiveFactors {
    /// Learned factors, all unconstrained entries set to `init_u`
    /// (`init_u = 0` reads as 0.5 everywhere).
    pub fn learned(num_sources: usize, init_u: Real) -> Self {
        AdaptiveFactors {
            mode: FactorMode::Learned,
            lambda_u: Array2::from_elem((num_sources, num_sources), init_u),
            gamma_u: Array2::from_elem((num_sources, num_sources), init_u),
            eta_u: Array2::from_elem((num_sources, num_sources), init_u),
        }
    }

    /// Factors pinned to a constant in `[0, 1]`; they receive no updates.
    pub fn fixed(num_sources: usize, value: Real) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) || value.is_nan() {
            return Err(Error::parameter("factor value", value, "must lie in [0, 1]"));
        }
        Ok(AdaptiveFactors {
            mode: FactorMode::Fixed(value),
            lambda_u: Array2::zeros((num_sources, num_sources)),
            gamma_u: Array2::zeros((num_sources, num_sources)),
            eta_u: Array2::zeros((num_sources, num_sources)),
        })
    }

    /// Rebuilds factor state from its stored parts (wire decoding and
    /// checkpoints); the matrices must be square and of equal order.
    pub fn from_raw(
        mode: FactorMode,
        lambda_u: Array2<Real>,
        gamma_u: Array2<Real>,
        eta_u: Array2<Real>,
    ) -> Result<Self> {
        let m = lambda_u.nrows();
        for (name, mat) in [("lambda", &lambda_u), ("gamma", &gamma_u), ("eta", &eta_u)] {
            if mat.dim() != (m, m) {
                return Err(Error::shape(name, m * m, mat.len()));
            }
        }
        if let FactorMode::Fixed(value) = mode {
            if !(0.0..=1.0).contains(&value) || value.is_nan() {
                return Err(Error::parameter("factor value", value, "must lie in [0, 1]"));
            }
        }
        Ok(AdaptiveFactors {
            mode,
            lambda_u,
            gamma_u,
            eta_u,
        })
    }

    pub fn mode(&self) -> FactorMode {
        self.mode
    }

    pub fn num_sources(&self) -> usize {
        self.lambda_u.nrows()
    }

    fn unconstrained(&self, kind: FactorKind) -> &Array2<Real> {
        match kind {
            FactorKind::Lambda => &self.lambda_u,
            FactorKind::Gamma => &self.gamma_u,
            FactorKind::Eta => &self.eta_u,
        }
    }

    /// The applied factor weighting source `v`'s head inside source `s`'s
    /// prediction. `s == v` is the unapplied self-weight 1.
    pub fn factor(&self, kind: FactorKind, s: usize, v: usize) -> Real {
        if s == v {
            return 1.0;
        }
        match self.mode {
            FactorMode::Fixed(value) => value,
            FactorMode::Learned => logistic(self.unconstrained(kind)[(s, v)]),
        }
    }

    pub fn lambda(&self, s: usize, v: usize) -> Real {
        self.factor(FactorKind::Lambda, s, v)
    }

    pub fn gamma(&self, s: usize, v: usize) -> Real {
        self.factor(FactorKind::Gamma, s, v)
    }

    pub fn eta(&self, s: usize, v: usize) -> Real {
        self.factor(FactorKind::Eta, s, v)
    }

    /// Mapped factor matrix; the diagonal reports the self-weight 1.
    pub fn matrix(&self, kind: FactorKind) -> Array2<Real> {
        let m = self.num_sources();
        Array2::from_shape_fn((m, m), |(s, v)| self.factor(kind, s, v))
    }
}

/// Numerically stable logistic function.
pub fn logistic(a: Real) -> Real {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + exp(a))`.
pub fn softplus(a: Real) -> Real {
    a.max(0.0) + (-a.abs()).exp().ln_1p()
}

/// Bernoulli negative log-likelihood of `label ∈ {0, 1}` under the given
/// logit: `softplus(logit) - label · logit`.
pub fn bernoulli_nll(logit: Real, label: Real) -> Real {
    softplus(logit) - label * logit
}

/// Gaussian negative log-likelihood `½ln(2πσ²) + (v - mean)²/(2σ²)`.
pub fn gaussian_nll(value: Real, mean: Real, sigma: Real) -> Real {
    let r = value - mean;
    0.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln() + r * r / (2.0 * sigma * sigma)
}

/// The three shared feature bases.
///
/// `z` maps the latent space (input dimension `d_z`), `xy` maps the
/// concatenation `[x; y]` (input dimension `d_x + 1`, outcome appended
/// last), and `x` maps the covariates alone (input dimension `d_x`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bases {
    pub z: FourierBasis<Real>,
    pub xy: FourierBasis<Real>,
    pub x: FourierBasis<Real>,
}

/// Everything the server broadcasts: bases, per-source heads, transfer
/// factors, and hyperparameters. Immutable between training steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalModel {
    pub bases: Bases,
    pub params: Vec<SourceParams>,
    pub factors: AdaptiveFactors,
    pub hyper: Hyperparams,
}

impl GlobalModel {
    /// Initializes an `m`-source model with heads drawn from
    /// `N(0, init_scale²)` and learned factors at `factor_init_u`
    /// (logistic-mapped). Deterministic in `seed`.
    pub fn init(
        bases: Bases,
        num_sources: usize,
        hyper: Hyperparams,
        seed: u64,
        init_scale: Real,
        factor_init_u: Real,
    ) -> Result<Self> {
        if num_sources == 0 {
            return Err(Error::parameter("num_sources", num_sources, "must be at least 1"));
        }
        hyper.validate()?;
        let model = GlobalModel {
            bases,
            params: Vec::new(),
            factors: AdaptiveFactors::learned(num_sources, factor_init_u),
            hyper,
        };
        model.check_bases()?;
        let dims = model.dims();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = (0..num_sources)
            .map(|_| SourceParams::sampled(&dims, init_scale, &mut rng))
            .collect();
        Ok(GlobalModel { params, ..model })
    }

    fn check_bases(&self) -> Result<()> {
        if self.bases.z.input_dim() != self.hyper.d_z {
            return Err(Error::shape(
                "latent basis input",
                self.hyper.d_z,
                self.bases.z.input_dim(),
            ));
        }
        if self.bases.xy.input_dim() != self.hyper.d_x() + 1 {
            return Err(Error::shape(
                "xy basis input",
                self.hyper.d_x() + 1,
                self.bases.xy.input_dim(),
            ));
        }
        if self.bases.x.input_dim() != self.hyper.d_x() {
            return Err(Error::shape(
                "covariate basis input",
                self.hyper.d_x(),
                self.bases.x.input_dim(),
            ));
        }
        Ok(())
    }

    pub fn num_sources(&self) -> usize {
        self.params.len()
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            phi_z: self.bases.z.output_dim(),
            phi_xy: self.bases.xy.output_dim(),
            phi_x: self.bases.x.output_dim(),
            d_x: self.hyper.d_x(),
            d_z: self.hyper.d_z,
        }
    }

    /// Structural validation: source counts agree, every tensor matches
    /// the declared dims, bases match the hyperparameters.
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        self.check_bases()?;
        if self.params.is_empty() {
            return Err(Error::State("model has no sources".into()));
        }
        if self.factors.num_sources() != self.params.len() {
            return Err(Error::shape(
                "factor matrix order",
                self.params.len(),
                self.factors.num_sources(),
            ));
        }
        let dims = self.dims();
        for (s, params) in self.params.iter().enumerate() {
            if !params.matches(&dims) {
                return Err(Error::State(format!("source {s} params do not match model dims")));
            }
        }
        Ok(())
    }

    /// Errors if any learned quantity is NaN or infinite.
    pub fn assert_finite(&self) -> Result<()> {
        for (s, params) in self.params.iter().enumerate() {
            for (name, field) in params.vec_fields() {
                if field.iter().any(|v| !v.is_finite()) {
                    return Err(Error::State(format!("source {s} head {name} is non-finite")));
                }
            }
            for (name, field) in params.mat_fields() {
                if field.iter().any(|v| !v.is_finite()) {
                    return Err(Error::State(format!("source {s} head {name} is non-finite")));
                }
            }
        }
        Ok(())
    }

    fn source(&self, s: usize) -> Result<&SourceParams> {
        self.params.get(s).ok_or_else(|| {
            Error::State(format!(
                "source {s} out of range for {}-source model",
                self.params.len()
            ))
        })
    }

    /// `θ_c^s + Σ_{v≠s} factor^{s,v} θ_c^v` for a vector head selected by
    /// `pick`, under the factor family `kind`.
    pub fn effective_vec(
        &self,
        s: usize,
        kind: FactorKind,
        pick: impl Fn(&SourceParams) -> &Array1<Real>,
    ) -> Result<Array1<Real>> {
        let own = pick(self.source(s)?);
        let others: Vec<_> = self
            .params
            .iter()
            .enumerate()
            .filter(|(v, _)| *v != s)
            .map(|(v, p)| (self.factors.factor(kind, s, v), pick(p).view()))
            .collect();
        effective_weight(own.view(), &others)
    }

    /// Matrix-head counterpart of [`GlobalModel::effective_vec`].
    pub fn effective_mat(
        &self,
        s: usize,
        kind: FactorKind,
        pick: impl Fn(&SourceParams) -> &Array2<Real>,
    ) -> Result<Array2<Real>> {
        let own = pick(self.source(s)?);
        let others: Vec<_> = self
            .params
            .iter()
            .enumerate()
            .filter(|(v, _)| *v != s)
            .map(|(v, p)| (self.factors.factor(kind, s, v), pick(p).view()))
            .collect();
        effective_weight_matrix(own.view(), &others)
    }

    /// `p_s(w = 1 | z)`, strictly inside `(0, 1)`.
    pub fn propensity_prob(&self, s: usize, z: &[Real]) -> Result<Real> {
        let head = self.effective_vec(s, FactorKind::Lambda, |p| &p.theta_w)?;
        let phi = self.bases.z.feature_map(z)?;
        Ok(logistic(head.dot(&phi)))
    }

    /// Pre-activation of the outcome head for arm `w`.
    pub fn outcome_linear(&self, s: usize, z: &[Real], w: bool) -> Result<Real> {
        let head = if w {
            self.effective_vec(s, FactorKind::Lambda, |p| &p.theta_y1)?
        } else {
            self.effective_vec(s, FactorKind::Lambda, |p| &p.theta_y0)?
        };
        let phi = self.bases.z.feature_map(z)?;
        Ok(head.dot(&phi))
    }

    /// `E[y | w, z]`: the gated head value for a continuous outcome, its
    /// logistic for a binary outcome.
    pub fn outcome_mean(&self, s: usize, z: &[Real], w: bool) -> Result<Real> {
        let linear = self.outcome_linear(s, z, w)?;
        Ok(match self.hyper.y_mode {
            ObservationKind::Continuous => linear,
            ObservationKind::Binary => logistic(linear),
        })
    }

    /// Per-dimension distribution of the proxies given `z`.
    pub fn proxy_distribution(&self, s: usize, z: &[Real]) -> Result<Vec<ProxyParam>> {
        let head = self.effective_mat(s, FactorKind::Lambda, |p| &p.theta_x)?;
        let phi = self.bases.z.feature_map(z)?;
        let linear = head.t().dot(&phi);
        Ok(linear
            .iter()
            .zip(self.hyper.x_modes.iter())
            .map(|(&a, mode)| match mode {
                ObservationKind::Continuous => ProxyParam::Continuous {
                    mean: a,
                    sigma: self.hyper.sigma_x,
                },
                ObservationKind::Binary => ProxyParam::Binary { prob: logistic(a) },
            })
            .collect())
    }

    /// Mean of the variational posterior `q(z | y, w, x)`.
    pub fn variational_mean(&self, s: usize, y: Real, w: bool, x: &[Real]) -> Result<Array1<Real>> {
        let head = if w {
            self.effective_mat(s, FactorKind::Lambda, |p| &p.theta_q1)?
        } else {
            self.effective_mat(s, FactorKind::Lambda, |p| &p.theta_q0)?
        };
        let phi = self.feature_xy(x, y)?;
        Ok(head.t().dot(&phi))
    }

    /// Feature map over the concatenation `[x; y]`.
    pub fn feature_xy(&self, x: &[Real], y: Real) -> Result<Array1<Real>> {
        let mut input = Vec::with_capacity(x.len() + 1);
        input.extend_from_slice(x);
        input.push(y);
        self.bases.xy.feature_map(&input)
    }
}

/// Distribution parameters of one proxy dimension.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ProxyParam {
    Continuous { mean: Real, sigma: Real },
    Binary { prob: Real },
}

/// Log-density of the latent prior `N(0, σ_z² I)` at `z`.
pub fn prior_log_density(z: &[Real], hyper: &Hyperparams) -> Real {
    let var = hyper.sigma_z * hyper.sigma_z;
    let d = z.len() as Real;
    let sq: Real = z.iter().map(|v| v * v).sum();
    -0.5 * d * (2.0 * std::f64::consts::PI * var).ln() - sq / (2.0 * var)
}

/// Reparameterized latent sample `mean + σ_q · ε`; deterministic in `ε`.
pub fn reparam_sample(mean: &Array1<Real>, sigma_q: Real, epsilon: &Array1<Real>) -> Array1<Real> {
    mean + &(epsilon * sigma_q)
}
