//! Per-source losses, analytic gradients, and the SGD update rule.
//!
//! Each source evaluates three objectives against the current global
//! model: the negative Monte-Carlo ELBO of the latent-confounder model
//! (reconstruction of outcome, treatment, and covariates from sampled
//! latents, plus an exact Gaussian KL per record), a propensity
//! cross-entropy, and an outcome regression loss. All three are sums
//! over records, not means, and each carries an `m⁻¹ζ ‖·‖²` ridge over
//! the matching heads of every source so that summing the per-source
//! objectives reproduces the pooled objective exactly.
//!
//! A source's gradient covers the tensors of all sources (its own
//! directly, the others scaled by the transfer factors) but only its own
//! row of each factor matrix. Factor gradients are taken in the
//! unconstrained parametrization, chaining through the logistic map.
//! Latent samples are reparametrized as `z = μ + σ_q ε`, so the gradient
//! flows through the feature map of `z` back into the recognition heads.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::SourceDataset;
use crate::model::{
    bernoulli_nll, gaussian_nll, logistic, FactorKind, FactorMode, GlobalModel, ObservationKind,
    SourceParams,
};
use crate::{Error, Real, Result, Scalar};

/// Exact KL divergence from `N(q_mean, σ_q² I)` to the prior
/// `N(0, σ_z² I)`, summed over dimensions.
pub fn kl_to_prior<T: Scalar>(q_mean: &[T], sigma_q: T, sigma_z: T) -> Result<T> {
    if !(sigma_q > T::zero()) || !sigma_q.is_finite() {
        return Err(Error::parameter("sigma_q", sigma_q, "must be positive and finite"));
    }
    if !(sigma_z > T::zero()) || !sigma_z.is_finite() {
        return Err(Error::parameter("sigma_z", sigma_z, "must be positive and finite"));
    }
    let half = T::from_f64(0.5).expect("scalar from f64");
    let log_ratio = (sigma_z / sigma_q).ln();
    let var_q = sigma_q * sigma_q;
    let denom = T::from_f64(2.0).expect("scalar from f64") * sigma_z * sigma_z;
    Ok(q_mean
        .iter()
        .map(|&mu| log_ratio + (var_q + mu * mu) / denom - half)
        .sum())
}

/// Deterministic per-(source, round) seed derived from the run seed.
pub fn round_seed(master_seed: u64, source_id: u64, round: u64) -> u64 {
    let mut h = crate::data::splitmix64(master_seed);
    h = crate::data::splitmix64(h ^ source_id.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    h = crate::data::splitmix64(h ^ round.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    h
}

/// Reparametrization noise for one source and round: `eps[i][l]` is the
/// `d_z`-dimensional standard-normal draw for record `i`, sample `l`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraws {
    pub eps: Vec<Vec<Array1<Real>>>,
}

impl NoiseDraws {
    /// Draws noise from the per-(source, round) stream. Centralized and
    /// federated runs call this with the same arguments, which is what
    /// keeps their trajectories identical.
    pub fn generate(
        master_seed: u64,
        source_id: u64,
        round: u64,
        n: usize,
        m_samples: usize,
        d_z: usize,
    ) -> NoiseDraws {
        let mut rng = ChaCha8Rng::seed_from_u64(round_seed(master_seed, source_id, round));
        let eps = (0..n)
            .map(|_| {
                (0..m_samples)
                    .map(|_| {
                        Array1::from_iter(
                            (0..d_z).map(|_| StandardNormal.sample(&mut rng)),
                        )
                    })
                    .collect()
            })
            .collect();
        NoiseDraws { eps }
    }

    /// All-zero draws; collapses every latent sample onto the
    /// recognition mean. Intended for deterministic tests.
    pub fn zeros(n: usize, m_samples: usize, d_z: usize) -> NoiseDraws {
        NoiseDraws {
            eps: vec![vec![Array1::zeros(d_z); m_samples]; n],
        }
    }

    fn check(&self, n: usize, m_samples: usize, d_z: usize) -> Result<()> {
        if self.eps.len() != n {
            return Err(Error::shape("noise draws per record", n, self.eps.len()));
        }
        for per_record in &self.eps {
            if per_record.len() != m_samples {
                return Err(Error::shape("noise draws per sample", m_samples, per_record.len()));
            }
            for eps in per_record {
                if eps.len() != d_z {
                    return Err(Error::shape("noise draw dimension", d_z, eps.len()));
                }
            }
        }
        Ok(())
    }
}

/// Additive pieces of one source's ELBO objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub recon_y: Real,
    pub recon_w: Real,
    pub recon_x: Real,
    pub kl: Real,
    pub regularizer: Real,
}

impl ElboTerms {
    pub fn total(&self) -> Real {
        self.recon_y + self.recon_w + self.recon_x + self.kl + self.regularizer
    }
}

/// One source's three objective values at a fixed model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceLoss {
    pub source_id: usize,
    pub elbo: Real,
    pub propensity: Real,
    pub outcome: Real,
    pub terms: ElboTerms,
}

impl SourceLoss {
    pub fn total(&self) -> Real {
        self.elbo + self.propensity + self.outcome
    }
}

/// All sources' losses for one round, with their totals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub per_source: Vec<SourceLoss>,
    pub total_elbo: Real,
    pub total_propensity: Real,
    pub total_outcome: Real,
    pub total: Real,
}

impl LossBreakdown {
    pub fn new(per_source: Vec<SourceLoss>) -> LossBreakdown {
        let total_elbo = per_source.iter().map(|l| l.elbo).sum();
        let total_propensity = per_source.iter().map(|l| l.propensity).sum();
        let total_outcome = per_source.iter().map(|l| l.outcome).sum();
        LossBreakdown {
            total_elbo,
            total_propensity,
            total_outcome,
            total: total_elbo + total_propensity + total_outcome,
            per_source,
        }
    }
}

/// One source's gradient: a full mirror of every source's parameter
/// tensors plus the unconstrained factor matrices. Rows of the factor
/// matrices other than the emitting source's stay zero.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientRecord {
    pub params: Vec<SourceParams>,
    pub lambda_u: Array2<Real>,
    pub gamma_u: Array2<Real>,
    pub eta_u: Array2<Real>,
    /// Records contributing to this gradient (after dedup).
    pub n_s: u64,
}

impl GradientRecord {
    pub fn zeros(model: &GlobalModel) -> GradientRecord {
        let m = model.num_sources();
        let dims = model.dims();
        GradientRecord {
            params: (0..m).map(|_| SourceParams::zeros(&dims)).collect(),
            lambda_u: Array2::zeros((m, m)),
            gamma_u: Array2::zeros((m, m)),
            eta_u: Array2::zeros((m, m)),
            n_s: 0,
        }
    }

    pub fn num_sources(&self) -> usize {
        self.params.len()
    }

    /// Elementwise sum; shapes must match.
    pub fn add_assign(&mut self, other: &GradientRecord) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::shape("gradient sources", self.params.len(), other.params.len()));
        }
        for (v, (mine, theirs)) in self.params.iter_mut().zip(&other.params).enumerate() {
            if !params_same_shape(mine, theirs) {
                return Err(Error::State(format!(
                    "gradient tensors of source {v} have mismatched shapes"
                )));
            }
            mine.zip_mut_with(theirs, |a, b| *a += b);
        }
        if self.lambda_u.dim() != other.lambda_u.dim() {
            return Err(Error::shape(
                "gradient factor matrix",
                self.lambda_u.len(),
                other.lambda_u.len(),
            ));
        }
        self.lambda_u += &other.lambda_u;
        self.gamma_u += &other.gamma_u;
        self.eta_u += &other.eta_u;
        self.n_s += other.n_s;
        Ok(())
    }

    /// Errors with the offending tensor named if any entry is non-finite.
    pub fn assert_finite(&self) -> Result<()> {
        for (v, params) in self.params.iter().enumerate() {
            for (name, field) in params.vec_fields() {
                if field.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite {
                        context: format!("gradient of {name} for source {v}"),
                    });
                }
            }
            for (name, field) in params.mat_fields() {
                if field.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite {
                        context: format!("gradient of {name} for source {v}"),
                    });
                }
            }
        }
        for (name, mat) in [
            ("lambda", &self.lambda_u),
            ("gamma", &self.gamma_u),
            ("eta", &self.eta_u),
        ] {
            if mat.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("gradient of {name} factors"),
                });
            }
        }
        Ok(())
    }
}

/// Cached feature maps of one source's records; fixed across rounds.
#[derive(Clone, Debug)]
pub struct SourceFeatures {
    pub phi_x: Vec<Array1<Real>>,
    pub phi_xy: Vec<Array1<Real>>,
}

/// Evaluates the covariate and covariate-outcome feature maps once per
/// record.
pub fn compute_features(data: &SourceDataset, model: &GlobalModel) -> Result<SourceFeatures> {
    data.validate()?;
    if data.n() > 0 && data.d_x() != model.dims().d_x {
        return Err(Error::shape("covariate dimension", model.dims().d_x, data.d_x()));
    }
    let mut phi_x = Vec::with_capacity(data.n());
    let mut phi_xy = Vec::with_capacity(data.n());
    let mut joint = vec![0.0; model.dims().d_x + 1];
    for i in 0..data.n() {
        let row = data.x_row(i);
        phi_x.push(model.bases.x.feature_map(row)?);
        joint[..row.len()].copy_from_slice(row);
        joint[row.len()] = data.y[i];
        phi_xy.push(model.bases.xy.feature_map(&joint)?);
    }
    Ok(SourceFeatures { phi_x, phi_xy })
}

/// Effective (transfer-combined) heads of one source, plus its factor
/// rows mapped into [0, 1].
pub(crate) struct EffectiveHeads {
    pub(crate) ey0: Array1<Real>,
    pub(crate) ey1: Array1<Real>,
    pub(crate) ew: Array1<Real>,
    pub(crate) ex: Array2<Real>,
    pub(crate) eq0: Array2<Real>,
    pub(crate) eq1: Array2<Real>,
    pub(crate) epsi: Array1<Real>,
    pub(crate) eb0: Array1<Real>,
    pub(crate) eb1: Array1<Real>,
    lambda: Vec<Real>,
    gamma: Vec<Real>,
    eta: Vec<Real>,
}

pub(crate) fn effective_heads(model: &GlobalModel, s: usize) -> Result<EffectiveHeads> {
    let m = model.num_sources();
    let factor_row = |kind: FactorKind| -> Vec<Real> {
        (0..m)
            .map(|v| if v == s { 1.0 } else { model.factors.factor(kind, s, v) })
            .collect()
    };
    Ok(EffectiveHeads {
        ey0: model.effective_vec(s, FactorKind::Lambda, |p| &p.theta_y0)?,
        ey1: model.effective_vec(s, FactorKind::Lambda, |p| &p.theta_y1)?,
        ew: model.effective_vec(s, FactorKind::Lambda, |p| &p.theta_w)?,
        ex: model.effective_mat(s, FactorKind::Lambda, |p| &p.theta_x)?,
        eq0: model.effective_mat(s, FactorKind::Lambda, |p| &p.theta_q0)?,
        eq1: model.effective_mat(s, FactorKind::Lambda, |p| &p.theta_q1)?,
        epsi: model.effective_vec(s, FactorKind::Gamma, |p| &p.psi)?,
        eb0: model.effective_vec(s, FactorKind::Eta, |p| &p.beta0)?,
        eb1: model.effective_vec(s, FactorKind::Eta, |p| &p.beta1)?,
        lambda: factor_row(FactorKind::Lambda),
        gamma: factor_row(FactorKind::Gamma),
        eta: factor_row(FactorKind::Eta),
    })
}

fn outcome_point_nll(value: Real, linear: Real, model: &GlobalModel) -> Real {
    match model.hyper.y_mode {
        ObservationKind::Continuous => gaussian_nll(value, linear, model.hyper.sigma_y),
        ObservationKind::Binary => bernoulli_nll(linear, value),
    }
}

fn outcome_point_grad(value: Real, linear: Real, model: &GlobalModel) -> Real {
    match model.hyper.y_mode {
        ObservationKind::Continuous => {
            (linear - value) / (model.hyper.sigma_y * model.hyper.sigma_y)
        }
        ObservationKind::Binary => logistic(linear) - value,
    }
}

fn proxy_point_nll(value: Real, linear: Real, mode: ObservationKind, sigma_x: Real) -> Real {
    match mode {
        ObservationKind::Continuous => gaussian_nll(value, linear, sigma_x),
        ObservationKind::Binary => bernoulli_nll(linear, value),
    }
}

fn proxy_point_grad(value: Real, linear: Real, mode: ObservationKind, sigma_x: Real) -> Real {
    match mode {
        ObservationKind::Continuous => (linear - value) / (sigma_x * sigma_x),
        ObservationKind::Binary => logistic(linear) - value,
    }
}

/// Negative Monte-Carlo ELBO of source `s` at the current model, with its
/// additive pieces. Sum over records; the ridge covers the latent heads
/// of every source.
pub fn local_elbo_loss(
    s: usize,
    data: &SourceDataset,
    model: &GlobalModel,
    noise: &NoiseDraws,
) -> Result<(Real, ElboTerms)> {
    let feats = compute_features(data, model)?;
    local_elbo_loss_prepared(s, data, &feats, model, noise)
}

/// [`local_elbo_loss`] over precomputed feature maps.
pub fn local_elbo_loss_prepared(
    s: usize,
    data: &SourceDataset,
    feats: &SourceFeatures,
    model: &GlobalModel,
    noise: &NoiseDraws,
) -> Result<(Real, ElboTerms)> {
    model.validate()?;
    check_source(model, s)?;
    let hyper = &model.hyper;
    noise.check(data.n(), hyper.m_samples, hyper.d_z)?;
    let heads = effective_heads(model, s)?;
    let inv_m = 1.0 / hyper.m_samples as Real;

    let mut terms = ElboTerms::default();
    for i in 0..data.n() {
        let phi_xy = &feats.phi_xy[i];
        let w = data.w[i];
        let eq = if w == 1 { &heads.eq1 } else { &heads.eq0 };
        let mu = eq.t().dot(phi_xy);
        terms.kl += kl_to_prior(mu.as_slice().expect("contiguous"), hyper.sigma_q, hyper.sigma_z)?;
        for eps in &noise.eps[i] {
            let z = &mu + &(eps * hyper.sigma_q);
            let phi_z = model.bases.z.feature_map(z.as_slice().expect("contiguous"))?;
            let ey = if w == 1 { &heads.ey1 } else { &heads.ey0 };
            terms.recon_y += inv_m * outcome_point_nll(data.y[i], ey.dot(&phi_z), model);
            terms.recon_w += inv_m * bernoulli_nll(heads.ew.dot(&phi_z), w as Real);
            let ax = heads.ex.t().dot(&phi_z);
            for (j, &a) in ax.iter().enumerate() {
                terms.recon_x += inv_m
                    * proxy_point_nll(data.x[(i, j)], a, hyper.x_modes[j], hyper.sigma_x);
            }
        }
    }
    let m = model.num_sources() as Real;
    terms.regularizer = hyper.zeta / m
        * (0..model.num_sources())
            .map(|v| model.params[v].latent_sq_norm())
            .sum::<Real>();
    Ok((terms.total(), terms))
}

/// Propensity cross-entropy of source `s` plus its ridge.
pub fn local_aux_propensity_loss(
    s: usize,
    data: &SourceDataset,
    model: &GlobalModel,
) -> Result<Real> {
    let feats = compute_features(data, model)?;
    local_aux_propensity_loss_prepared(s, data, &feats, model)
}

/// [`local_aux_propensity_loss`] over precomputed feature maps.
pub fn local_aux_propensity_loss_prepared(
    s: usize,
    data: &SourceDataset,
    feats: &SourceFeatures,
    model: &GlobalModel,
) -> Result<Real> {
    model.validate()?;
    check_source(model, s)?;
    let heads = effective_heads(model, s)?;
    let mut loss = 0.0;
    for i in 0..data.n() {
        loss += bernoulli_nll(heads.epsi.dot(&feats.phi_x[i]), data.w[i] as Real);
    }
    let m = model.num_sources() as Real;
    loss += model.hyper.zeta_w / m
        * (0..model.num_sources())
            .map(|v| model.params[v].psi_sq_norm())
            .sum::<Real>();
    Ok(loss)
}

/// Outcome regression loss of source `s` plus its ridge. The treated and
/// untreated heads are gated by the observed treatment.
pub fn local_aux_outcome_loss(s: usize, data: &SourceDataset, model: &GlobalModel) -> Result<Real> {
    let feats = compute_features(data, model)?;
    local_aux_outcome_loss_prepared(s, data, &feats, model)
}

/// [`local_aux_outcome_loss`] over precomputed feature maps.
pub fn local_aux_outcome_loss_prepared(
    s: usize,
    data: &SourceDataset,
    feats: &SourceFeatures,
    model: &GlobalModel,
) -> Result<Real> {
    model.validate()?;
    check_source(model, s)?;
    let heads = effective_heads(model, s)?;
    let mut loss = 0.0;
    for i in 0..data.n() {
        let eb = if data.w[i] == 1 { &heads.eb1 } else { &heads.eb0 };
        loss += outcome_point_nll(data.y[i], eb.dot(&feats.phi_x[i]), model);
    }
    let m = model.num_sources() as Real;
    loss += model.hyper.zeta_y / m
        * (0..model.num_sources())
            .map(|v| model.params[v].beta_sq_norm())
            .sum::<Real>();
    Ok(loss)
}

/// All three objectives of source `s`, packaged per round.
pub fn local_losses(
    s: usize,
    data: &SourceDataset,
    model: &GlobalModel,
    noise: &NoiseDraws,
) -> Result<SourceLoss> {
    let feats = compute_features(data, model)?;
    local_losses_prepared(s, data, &feats, model, noise)
}

/// [`local_losses`] over precomputed feature maps.
pub fn local_losses_prepared(
    s: usize,
    data: &SourceDataset,
    feats: &SourceFeatures,
    model: &GlobalModel,
    noise: &NoiseDraws,
) -> Result<SourceLoss> {
    let (elbo, terms) = local_elbo_loss_prepared(s, data, feats, model, noise)?;
    let propensity = local_aux_propensity_loss_prepared(s, data, feats, model)?;
    let outcome = local_aux_outcome_loss_prepared(s, data, feats, model)?;
    Ok(SourceLoss {
        source_id: s,
        elbo,
        propensity,
        outcome,
        terms,
    })
}

/// Sum of the three objectives of source `s`; the quantity
/// [`local_gradient`] differentiates.
pub fn local_objective(
    s: usize,
    data: &SourceDataset,
    model: &GlobalModel,
    noise: &NoiseDraws,
) -> Result<Real> {
    Ok(local_losses(s, data, model, noise)?.total())
}

/// The pooled ELBO objective: every source's records under a shared
/// iteration order, plus one full ridge over all latent heads. Equals
/// the sum of per-source ELBO losses up to floating-point reassociation.
pub fn pooled_elbo_objective(
    datasets: &[&SourceDataset],
    model: &GlobalModel,
    noises: &[&NoiseDraws],
) -> Result<Real> {
    model.validate()?;
    if datasets.len() != model.num_sources() || noises.len() != model.num_sources() {
        return Err(Error::shape("pooled sources", model.num_sources(), datasets.len()));
    }
    let hyper = &model.hyper;
    let inv_m = 1.0 / hyper.m_samples as Real;
    let mut heads = Vec::with_capacity(model.num_sources());
    let mut feats = Vec::with_capacity(model.num_sources());
    for (s, data) in datasets.iter().enumerate() {
        noises[s].check(data.n(), hyper.m_samples, hyper.d_z)?;
        heads.push(effective_heads(model, s)?);
        feats.push(compute_features(data, model)?);
    }
    let max_n = datasets.iter().map(|d| d.n()).max().unwrap_or(0);
    let mut total = 0.0;
    for i in 0..max_n {
        for (s, data) in datasets.iter().enumerate() {
            if i >= data.n() {
                continue;
            }
            let heads = &heads[s];
            let phi_xy = &feats[s].phi_xy[i];
            let w = data.w[i];
            let eq = if w == 1 { &heads.eq1 } else { &heads.eq0 };
            let mu = eq.t().dot(phi_xy);
            total +=
                kl_to_prior(mu.as_slice().expect("contiguous"), hyper.sigma_q, hyper.sigma_z)?;
            for eps in &noises[s].eps[i] {
                let z = &mu + &(eps * hyper.sigma_q);
                let phi_z = model.bases.z.feature_map(z.as_slice().expect("contiguous"))?;
                let ey = if w == 1 { &heads.ey1 } else { &heads.ey0 };
                total += inv_m * outcome_point_nll(data.y[i], ey.dot(&phi_z), model);
                total += inv_m * bernoulli_nll(heads.ew.dot(&phi_z), w as Real);
                let ax = heads.ex.t().dot(&phi_z);
                for (j, &a) in ax.iter().enumerate() {
                    total += inv_m
                        * proxy_point_nll(data.x[(i, j)], a, hyper.x_modes[j], hyper.sigma_x);
                }
            }
        }
    }
    total += hyper.zeta
        * (0..model.num_sources())
            .map(|v| model.params[v].latent_sq_norm())
            .sum::<Real>();
    Ok(total)
}

/// Analytic gradient of source `s`'s total objective.
pub fn local_gradient(
    s: usize,
    data: &SourceDataset,
    model: &GlobalModel,
    noise: &NoiseDraws,
) -> Result<GradientRecord> {
    let feats = compute_features(data, model)?;
    local_gradient_prepared(s, data, &feats, model, noise)
}

/// [`local_gradient`] over precomputed feature maps.
pub fn local_gradient_prepared(
    s: usize,
    data: &SourceDataset,
    feats: &SourceFeatures,
    model: &GlobalModel,
    noise: &NoiseDraws,
) -> Result<GradientRecord> {
    model.validate()?;
    model.assert_finite()?;
    check_source(model, s)?;
    let hyper = &model.hyper;
    noise.check(data.n(), hyper.m_samples, hyper.d_z)?;
    let heads = effective_heads(model, s)?;
    let dims = model.dims();
    let m = model.num_sources();
    let inv_m = 1.0 / hyper.m_samples as Real;
    let inv_var_z = 1.0 / (hyper.sigma_z * hyper.sigma_z);
    let freq_z = model.bases.z.frequencies();
    let half_b = model.bases.z.num_features();

    // Gradients with respect to each effective head, summed over records.
    let mut acc_y0: Array1<Real> = Array1::zeros(dims.phi_z);
    let mut acc_y1: Array1<Real> = Array1::zeros(dims.phi_z);
    let mut acc_w: Array1<Real> = Array1::zeros(dims.phi_z);
    let mut acc_x: Array2<Real> = Array2::zeros((dims.phi_z, dims.d_x));
    let mut acc_q0: Array2<Real> = Array2::zeros((dims.phi_xy, dims.d_z));
    let mut acc_q1: Array2<Real> = Array2::zeros((dims.phi_xy, dims.d_z));
    let mut acc_psi: Array1<Real> = Array1::zeros(dims.phi_x);
    let mut acc_b0: Array1<Real> = Array1::zeros(dims.phi_x);
    let mut acc_b1: Array1<Real> = Array1::zeros(dims.phi_x);

    let mut dphi = Array1::<Real>::zeros(dims.phi_z);
    for i in 0..data.n() {
        let w = data.w[i];
        let y = data.y[i];
        let phi_xy = &feats.phi_xy[i];
        let phi_x = &feats.phi_x[i];
        let eq = if w == 1 { &heads.eq1 } else { &heads.eq0 };
        let mu = eq.t().dot(phi_xy);
        // KL path; the reconstruction path adds to this below.
        let mut g_mu: Array1<Real> = &mu * inv_var_z;

        for eps in &noise.eps[i] {
            let z = &mu + &(eps * hyper.sigma_q);
            let phi_z = model.bases.z.feature_map(z.as_slice().expect("contiguous"))?;

            let ey = if w == 1 { &heads.ey1 } else { &heads.ey0 };
            let coef_y = inv_m * outcome_point_grad(y, ey.dot(&phi_z), model);
            let coef_w = inv_m * (logistic(heads.ew.dot(&phi_z)) - w as Real);
            let ax = heads.ex.t().dot(&phi_z);
            let mut dx = Array1::<Real>::zeros(dims.d_x);
            for j in 0..dims.d_x {
                dx[j] = inv_m
                    * proxy_point_grad(data.x[(i, j)], ax[j], hyper.x_modes[j], hyper.sigma_x);
            }

            if w == 1 {
                acc_y1.scaled_add(coef_y, &phi_z);
            } else {
                acc_y0.scaled_add(coef_y, &phi_z);
            }
            acc_w.scaled_add(coef_w, &phi_z);
            rank_one_update(&mut acc_x, &phi_z, &dx);

            // Backpropagation through the feature map of z: combine the
            // head coefficients, rotate cos/sin pairs, and push through
            // the frequency matrix.
            dphi.assign(ey);
            dphi *= coef_y;
            dphi.scaled_add(coef_w, &heads.ew);
            dphi += &heads.ex.dot(&dx);
            for b in 0..half_b {
                let dt = -dphi[b] * phi_z[half_b + b] + dphi[half_b + b] * phi_z[b];
                g_mu.scaled_add(dt, &freq_z.row(b));
            }
        }

        if w == 1 {
            rank_one_update(&mut acc_q1, phi_xy, &g_mu);
        } else {
            rank_one_update(&mut acc_q0, phi_xy, &g_mu);
        }

        let coef_psi = logistic(heads.epsi.dot(phi_x)) - w as Real;
        acc_psi.scaled_add(coef_psi, phi_x);
        let eb = if w == 1 { &heads.eb1 } else { &heads.eb0 };
        let coef_b = outcome_point_grad(y, eb.dot(phi_x), model);
        if w == 1 {
            acc_b1.scaled_add(coef_b, phi_x);
        } else {
            acc_b0.scaled_add(coef_b, phi_x);
        }
    }

    // Distribute the effective-head gradients across sources and collect
    // the factor-row gradients.
    let mut grad = GradientRecord::zeros(model);
    grad.n_s = data.n() as u64;
    let mut d_lambda = vec![0.0; m];
    let mut d_gamma = vec![0.0; m];
    let mut d_eta = vec![0.0; m];
    for v in 0..m {
        let scale_l = heads.lambda[v];
        let scale_g = heads.gamma[v];
        let scale_e = heads.eta[v];
        let theirs = &model.params[v];
        let target = &mut grad.params[v];
        target.theta_y0.scaled_add(scale_l, &acc_y0);
        target.theta_y1.scaled_add(scale_l, &acc_y1);
        target.theta_w.scaled_add(scale_l, &acc_w);
        target.theta_x.scaled_add(scale_l, &acc_x);
        target.theta_q0.scaled_add(scale_l, &acc_q0);
        target.theta_q1.scaled_add(scale_l, &acc_q1);
        target.psi.scaled_add(scale_g, &acc_psi);
        target.beta0.scaled_add(scale_e, &acc_b0);
        target.beta1.scaled_add(scale_e, &acc_b1);
        if v != s {
            d_lambda[v] = acc_y0.dot(&theirs.theta_y0)
                + acc_y1.dot(&theirs.theta_y1)
                + acc_w.dot(&theirs.theta_w)
                + frobenius(&acc_x, &theirs.theta_x)
                + frobenius(&acc_q0, &theirs.theta_q0)
                + frobenius(&acc_q1, &theirs.theta_q1);
            d_gamma[v] = acc_psi.dot(&theirs.psi);
            d_eta[v] = acc_b0.dot(&theirs.beta0) + acc_b1.dot(&theirs.beta1);
        }
    }

    // Ridge gradients reach every source's tensors.
    let m_real = m as Real;
    for v in 0..m {
        let theirs = &model.params[v];
        let target = &mut grad.params[v];
        let c = 2.0 * hyper.zeta / m_real;
        target.theta_y0.scaled_add(c, &theirs.theta_y0);
        target.theta_y1.scaled_add(c, &theirs.theta_y1);
        target.theta_w.scaled_add(c, &theirs.theta_w);
        target.theta_x.scaled_add(c, &theirs.theta_x);
        target.theta_q0.scaled_add(c, &theirs.theta_q0);
        target.theta_q1.scaled_add(c, &theirs.theta_q1);
        target.psi.scaled_add(2.0 * hyper.zeta_w / m_real, &theirs.psi);
        target.beta0.scaled_add(2.0 * hyper.zeta_y / m_real, &theirs.beta0);
        target.beta1.scaled_add(2.0 * hyper.zeta_y / m_real, &theirs.beta1);
    }

    // Factor gradients live in the unconstrained parametrization; fixed
    // factors receive none.
    if let FactorMode::Learned = model.factors.mode() {
        for v in 0..m {
            if v == s {
                continue;
            }
            let lam = heads.lambda[v];
            let gam = heads.gamma[v];
            let eta = heads.eta[v];
            grad.lambda_u[(s, v)] = d_lambda[v] * lam * (1.0 - lam);
            grad.gamma_u[(s, v)] = d_gamma[v] * gam * (1.0 - gam);
            grad.eta_u[(s, v)] = d_eta[v] * eta * (1.0 - eta);
        }
    }

    grad.assert_finite()?;
    Ok(grad)
}

fn rank_one_update(target: &mut Array2<Real>, left: &Array1<Real>, right: &Array1<Real>) {
    for (r, &l) in left.iter().enumerate() {
        if l == 0.0 {
            continue;
        }
        let mut row = target.row_mut(r);
        let row = row.as_slice_mut().expect("row-major");
        for (t, &g) in row.iter_mut().zip(right.iter()) {
            *t += l * g;
        }
    }
}

fn frobenius(a: &Array2<Real>, b: &Array2<Real>) -> Real {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn params_same_shape(a: &SourceParams, b: &SourceParams) -> bool {
    a.vec_fields()
        .iter()
        .zip(b.vec_fields())
        .all(|((_, x), (_, y))| x.len() == y.len())
        && a.mat_fields()
            .iter()
            .zip(b.mat_fields())
            .all(|((_, x), (_, y))| x.dim() == y.dim())
}

fn check_source(model: &GlobalModel, s: usize) -> Result<()> {
    if s >= model.num_sources() {
        return Err(Error::parameter("source_id", s, "exceeds the source count"));
    }
    Ok(())
}

/// Gradient-descent state: classical momentum over every parameter
/// tensor and both factor matrices.
#[derive(Clone, Debug)]
pub struct Sgd {
    momentum: Real,
    velocity: Option<GradientRecord>,
}

impl Sgd {
    /// `momentum` must lie in `[0, 0.99]`; 0 is plain SGD.
    pub fn new(momentum: Real) -> Result<Sgd> {
        if !(0.0..=0.99).contains(&momentum) {
            return Err(Error::parameter("momentum", momentum, "must lie in [0, 0.99]"));
        }
        Ok(Sgd {
            momentum,
            velocity: None,
        })
    }

    pub fn momentum(&self) -> Real {
        self.momentum
    }
}

/// One descent step: `v ← momentum·v + g`, `p ← p − lr·v`. Factor
/// matrices move in the unconstrained parametrization and only when the
/// factors are learned.
pub fn apply_update(
    model: &mut GlobalModel,
    grad: &GradientRecord,
    opt: &mut Sgd,
    learning_rate: Real,
) -> Result<()> {
    if !(learning_rate > 0.0) || !learning_rate.is_finite() {
        return Err(Error::parameter("learning_rate", learning_rate, "must be positive and finite"));
    }
    if grad.params.len() != model.num_sources() {
        return Err(Error::shape("gradient sources", model.num_sources(), grad.params.len()));
    }
    for (v, g) in grad.params.iter().enumerate() {
        if !g.matches(&model.dims()) {
            return Err(Error::State(format!(
                "gradient tensors of source {v} do not match the model dims"
            )));
        }
    }
    if grad.lambda_u.dim() != (model.num_sources(), model.num_sources()) {
        return Err(Error::shape(
            "gradient factor matrix",
            model.num_sources() * model.num_sources(),
            grad.lambda_u.len(),
        ));
    }
    let velocity = opt
        .velocity
        .get_or_insert_with(|| GradientRecord::zeros(model));
    if velocity.params.len() != grad.params.len() {
        return Err(Error::State(
            "optimizer velocity does not match the model".into(),
        ));
    }
    let mu = opt.momentum;
    for (vel, g) in velocity.params.iter_mut().zip(&grad.params) {
        vel.zip_mut_with(g, |v, gi| *v = mu * *v + gi);
    }
    ndarray::Zip::from(&mut velocity.lambda_u)
        .and(&grad.lambda_u)
        .for_each(|v, &g| *v = mu * *v + g);
    ndarray::Zip::from(&mut velocity.gamma_u)
        .and(&grad.gamma_u)
        .for_each(|v, &g| *v = mu * *v + g);
    ndarray::Zip::from(&mut velocity.eta_u)
        .and(&grad.eta_u)
        .for_each(|v, &g| *v = mu * *v + g);

    for (p, vel) in model.params.iter_mut().zip(&velocity.params) {
        p.zip_mut_with(vel, |pi, vi| *pi -= learning_rate * vi);
    }
    if let FactorMode::Learned = model.factors.mode() {
        ndarray::Zip::from(&mut model.factors.lambda_u)
            .and(&velocity.lambda_u)
            .for_each(|p, &v| *p -= learning_rate * v);
        ndarray::Zip::from(&mut model.factors.gamma_u)
            .and(&velocity.gamma_u)
            .for_each(|p, &v| *p -= learning_rate * v);
        ndarray::Zip::from(&mut model.factors.eta_u)
            .and(&velocity.eta_u)
            .for_each(|p, &v| *p -= learning_rate * v);
    }
    model.assert_finite()?;
    Ok(())
}
