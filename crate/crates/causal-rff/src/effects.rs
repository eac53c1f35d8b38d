//! Post-training effect estimation: posterior latent sampling, CATE,
//! and source-weighted ATE aggregation.
//!
//! Effects condition on covariates alone. Each posterior draw follows a
//! five-step chain: sample a treatment from the propensity head, sample
//! an outcome from the auxiliary outcome head, then draw a latent from
//! the posterior given `(x, y, w)` with the configured sampler. Averaging
//! the two outcome arms over one shared set of latents gives the
//! per-record effect; a source's ATE is the plain mean and the global
//! ATE weights sources by record count, which is all a source ever
//! reports upward.
//!
//! Two posterior samplers share the proposal machinery: the variational
//! draw `z = μ + σ_q ε` and a Metropolis-Hastings independence chain
//! whose proposal is that same variational Gaussian and whose target is
//! the unnormalized joint `p(y|z,w) p(w|z) p(x|z) p(z)`.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{bernoulli_nll, gaussian_nll, logistic, GlobalModel, ObservationKind};
use crate::training::{effective_heads, EffectiveHeads};
use crate::{Error, Real, Result};

/// Posterior sampler used inside the five-step chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// One reparametrized draw from the recognition model.
    Variational,
    /// Metropolis-Hastings independence chain proposed from the
    /// recognition model; the final chain state is the draw.
    Mh { chain_len: usize, burn_in: usize },
}

impl SamplerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            SamplerKind::Variational => "variational",
            SamplerKind::Mh { .. } => "mh",
        }
    }
}

/// Settings shared by every effect query of one evaluation run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectSettings {
    /// Posterior draws per record, `N`.
    pub n_draws: usize,
    pub sampler: SamplerKind,
    pub seed: u64,
}

impl EffectSettings {
    pub fn validate(&self) -> Result<()> {
        if self.n_draws == 0 {
            return Err(Error::parameter("n_draws", self.n_draws, "must be at least 1"));
        }
        if let SamplerKind::Mh { chain_len, burn_in } = self.sampler {
            if chain_len <= burn_in {
                return Err(Error::parameter(
                    "chain_len",
                    chain_len,
                    "must exceed the burn-in",
                ));
            }
        }
        Ok(())
    }
}

/// Effect summary of one source's records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    /// Per-record effect estimates, in input order.
    pub cates: Vec<Real>,
    /// Arithmetic mean of `cates`.
    pub local_ate: Real,
    /// Records used.
    pub count: usize,
    /// Posterior draws per record.
    pub n_draws: usize,
    /// Sampler tag, `variational` or `mh`.
    pub sampler: String,
}

/// Record-content seed: a hash of the run seed and the covariate bytes,
/// so row order never changes any record's draws.
pub fn record_seed(seed: u64, x: &[Real]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for v in x {
        hasher.update(v.to_le_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

struct EffectContext<'m> {
    model: &'m GlobalModel,
    heads: EffectiveHeads,
}

impl<'m> EffectContext<'m> {
    fn new(model: &'m GlobalModel, s: usize) -> Result<Self> {
        model.assert_finite()?;
        if model.hyper.sigma_q < 0.0 {
            return Err(Error::parameter("sigma_q", model.hyper.sigma_q, "must be nonnegative"));
        }
        Ok(EffectContext {
            model,
            heads: effective_heads(model, s)?,
        })
    }

    fn posterior_mean(&self, x: &[Real], y: Real, w: bool) -> Result<Array1<Real>> {
        let head = if w { &self.heads.eq1 } else { &self.heads.eq0 };
        let phi = self.model.feature_xy(x, y)?;
        Ok(head.t().dot(&phi))
    }

    /// Unnormalized posterior log density
    /// `log p(y|z,w) + log p(w|z) + log p(x|z) + log p(z)`.
    fn log_target(&self, x: &[Real], y: Real, w: bool, z: &Array1<Real>) -> Result<Real> {
        let hyper = &self.model.hyper;
        let phi_z = self
            .model
            .bases
            .z
            .feature_map(z.as_slice().expect("contiguous"))?;
        let ey = if w { &self.heads.ey1 } else { &self.heads.ey0 };
        let ly = -match hyper.y_mode {
            ObservationKind::Continuous => gaussian_nll(y, ey.dot(&phi_z), hyper.sigma_y),
            ObservationKind::Binary => bernoulli_nll(ey.dot(&phi_z), y),
        };
        let lw = -bernoulli_nll(self.heads.ew.dot(&phi_z), if w { 1.0 } else { 0.0 });
        let ax = self.heads.ex.t().dot(&phi_z);
        let mut lx = 0.0;
        for (j, &a) in ax.iter().enumerate() {
            lx -= match hyper.x_modes[j] {
                ObservationKind::Continuous => gaussian_nll(x[j], a, hyper.sigma_x),
                ObservationKind::Binary => bernoulli_nll(a, x[j]),
            };
        }
        let lz = crate::model::prior_log_density(z.as_slice().expect("contiguous"), hyper);
        let total = ly + lw + lx + lz;
        if total.is_nan() {
            return Err(Error::NonFinite {
                context: "posterior log target".into(),
            });
        }
        Ok(total)
    }
}

/// Log density of the Gaussian proposal `N(mean, σ² I)` at `z`.
///
/// The squared residuals are summed before the single division so that,
/// when the proposal coincides with the latent prior, this expression
/// cancels bitwise against the prior's log density inside the acceptance
/// ratio.
pub fn proposal_log_density(z: &Array1<Real>, mean: &Array1<Real>, sigma: Real) -> Real {
    let var = sigma * sigma;
    let d = z.len() as Real;
    let rs: Real = z
        .iter()
        .zip(mean.iter())
        .map(|(&zi, &mi)| (zi - mi) * (zi - mi))
        .sum();
    -0.5 * d * (2.0 * std::f64::consts::PI * var).ln() - rs / (2.0 * var)
}

/// An independence-chain run: the retained states plus acceptance
/// bookkeeping.
#[derive(Clone, Debug)]
pub struct MhRun {
    pub states: Vec<Array1<Real>>,
    pub accepted: usize,
    pub proposals: usize,
}

impl MhRun {
    /// Fraction of proposals accepted; 1 when the chain made none.
    pub fn acceptance_rate(&self) -> Real {
        if self.proposals == 0 {
            1.0
        } else {
            self.accepted as Real / self.proposals as Real
        }
    }
}

/// Generic Metropolis-Hastings independence chain.
///
/// The initial state is one proposal draw; each later step draws a fresh
/// proposal and accepts with probability
/// `min{1, p̃(z*) q(z_t) / (p̃(z_t) q(z*))}`, evaluated in log space. The
/// full chain of `chain_len` states is returned.
pub fn mh_chain(
    chain_len: usize,
    rng: &mut ChaCha8Rng,
    mut propose: impl FnMut(&mut ChaCha8Rng) -> Array1<Real>,
    log_target: impl Fn(&Array1<Real>) -> Result<Real>,
    log_proposal: impl Fn(&Array1<Real>) -> Real,
) -> Result<MhRun> {
    if chain_len == 0 {
        return Err(Error::parameter("chain_len", chain_len, "must be at least 1"));
    }
    let mut current = propose(rng);
    let mut current_score = log_target(&current)? - log_proposal(&current);
    let mut states = Vec::with_capacity(chain_len);
    states.push(current.clone());
    let mut accepted = 0;
    for _ in 1..chain_len {
        let candidate = propose(rng);
        let candidate_score = log_target(&candidate)? - log_proposal(&candidate);
        let u: Real = rng.random();
        if u.ln() < candidate_score - current_score {
            current = candidate;
            current_score = candidate_score;
            accepted += 1;
        }
        states.push(current.clone());
    }
    Ok(MhRun {
        states,
        accepted,
        proposals: chain_len - 1,
    })
}

/// Independence-chain posterior sampler for one observed record.
///
/// Targets the unnormalized joint of `(y, w, x, z)` in `z` with the
/// recognition Gaussian as the proposal; returns the post-burn-in states.
#[allow(clippy::too_many_arguments)]
pub fn mh_independent_sampler(
    x: &[Real],
    y: Real,
    w: bool,
    source_id: usize,
    model: &GlobalModel,
    chain_len: usize,
    burn_in: usize,
    seed: u64,
) -> Result<MhRun> {
    if chain_len <= burn_in {
        return Err(Error::parameter("chain_len", chain_len, "must exceed the burn-in"));
    }
    let ctx = EffectContext::new(model, source_id)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let run = mh_posterior_chain(&ctx, x, y, w, chain_len, &mut rng)?;
    Ok(MhRun {
        states: run.states[burn_in..].to_vec(),
        accepted: run.accepted,
        proposals: run.proposals,
    })
}

fn mh_posterior_chain(
    ctx: &EffectContext<'_>,
    x: &[Real],
    y: Real,
    w: bool,
    chain_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MhRun> {
    let sigma_q = ctx.model.hyper.sigma_q;
    if !(sigma_q > 0.0) {
        return Err(Error::parameter(
            "sigma_q",
            sigma_q,
            "independence chain needs a positive proposal width",
        ));
    }
    let mean = ctx.posterior_mean(x, y, w)?;
    let d_z = mean.len();
    mh_chain(
        chain_len,
        rng,
        |rng| {
            let mut z = mean.clone();
            for v in z.iter_mut() {
                let e: Real = StandardNormal.sample(rng);
                *v += sigma_q * e;
            }
            z
        },
        |z| ctx.log_target(x, y, w, z),
        |z| {
            debug_assert_eq!(z.len(), d_z);
            proposal_log_density(z, &mean, sigma_q)
        },
    )
}

/// Draws `N` latents from `p_s(z | x)` by the five-step chain: treatment
/// from the propensity head, outcome from the gated auxiliary head, then
/// the configured posterior sampler given the drawn pair. Fresh `(w, y)`
/// per draw marginalizes the pair out. Draw randomness is seeded from the
/// record content, so row order is irrelevant.
pub fn sample_z_given_x(
    x: &[Real],
    source_id: usize,
    model: &GlobalModel,
    settings: &EffectSettings,
) -> Result<Vec<Array1<Real>>> {
    settings.validate()?;
    let ctx = EffectContext::new(model, source_id)?;
    sample_z_with_ctx(&ctx, x, settings)
}

fn sample_z_with_ctx(
    ctx: &EffectContext<'_>,
    x: &[Real],
    settings: &EffectSettings,
) -> Result<Vec<Array1<Real>>> {
    let model = ctx.model;
    let hyper = &model.hyper;
    let phi_x = model.bases.x.feature_map(x)?;
    let p_w = logistic(ctx.heads.epsi.dot(&phi_x));
    let lin0 = ctx.heads.eb0.dot(&phi_x);
    let lin1 = ctx.heads.eb1.dot(&phi_x);
    let mut rng = ChaCha8Rng::seed_from_u64(record_seed(settings.seed, x));
    let mut draws = Vec::with_capacity(settings.n_draws);
    for _ in 0..settings.n_draws {
        let u: Real = rng.random();
        let w = u < p_w;
        let lin = if w { lin1 } else { lin0 };
        let y = match hyper.y_mode {
            ObservationKind::Continuous => {
                let e: Real = StandardNormal.sample(&mut rng);
                lin + hyper.sigma_y * e
            }
            ObservationKind::Binary => {
                let u: Real = rng.random();
                if u < logistic(lin) {
                    1.0
                } else {
                    0.0
                }
            }
        };
        let z = match settings.sampler {
            SamplerKind::Variational => {
                let mut z = ctx.posterior_mean(x, y, w)?;
                for v in z.iter_mut() {
                    let e: Real = StandardNormal.sample(&mut rng);
                    *v += hyper.sigma_q * e;
                }
                z
            }
            SamplerKind::Mh { chain_len, .. } => {
                let run = mh_posterior_chain(ctx, x, y, w, chain_len, &mut rng)?;
                run.states.last().expect("nonempty chain").clone()
            }
        };
        draws.push(z);
    }
    Ok(draws)
}

/// Conditional average treatment effect at `x`: the two outcome arms
/// averaged over one shared set of posterior latents.
pub fn cate(
    x: &[Real],
    source_id: usize,
    model: &GlobalModel,
    settings: &EffectSettings,
) -> Result<Real> {
    settings.validate()?;
    let ctx = EffectContext::new(model, source_id)?;
    cate_with_ctx(&ctx, x, settings)
}

fn cate_with_ctx(ctx: &EffectContext<'_>, x: &[Real], settings: &EffectSettings) -> Result<Real> {
    let draws = sample_z_with_ctx(ctx, x, settings)?;
    let model = ctx.model;
    let mut total = 0.0;
    for z in &draws {
        let phi_z = model
            .bases
            .z
            .feature_map(z.as_slice().expect("contiguous"))?;
        let a1 = ctx.heads.ey1.dot(&phi_z);
        let a0 = ctx.heads.ey0.dot(&phi_z);
        total += match model.hyper.y_mode {
            ObservationKind::Continuous => a1 - a0,
            ObservationKind::Binary => logistic(a1) - logistic(a0),
        };
    }
    Ok(total / draws.len() as Real)
}

/// Per-record effects and their mean over a batch of covariate rows.
pub fn estimate_effects(
    x_rows: &Array2<Real>,
    source_id: usize,
    model: &GlobalModel,
    settings: &EffectSettings,
) -> Result<EffectEstimate> {
    settings.validate()?;
    if x_rows.nrows() == 0 {
        return Err(Error::parameter("rows", 0usize, "need at least one record"));
    }
    let ctx = EffectContext::new(model, source_id)?;
    let mut cates = Vec::with_capacity(x_rows.nrows());
    for row in x_rows.rows() {
        let x = row.to_slice().expect("row-major");
        cates.push(cate_with_ctx(&ctx, x, settings)?);
    }
    let local_ate = cates.iter().sum::<Real>() / cates.len() as Real;
    Ok(EffectEstimate {
        count: cates.len(),
        n_draws: settings.n_draws,
        sampler: settings.sampler.tag().to_owned(),
        cates,
        local_ate,
    })
}

/// Mean effect over a source's rows, with the row count the source
/// reports alongside it.
pub fn local_ate(
    x_rows: &Array2<Real>,
    source_id: usize,
    model: &GlobalModel,
    settings: &EffectSettings,
) -> Result<(Real, usize)> {
    let est = estimate_effects(x_rows, source_id, model, settings)?;
    Ok((est.local_ate, est.count))
}

/// Count-weighted average of per-source ATE summaries:
/// `Σ count·ate / Σ count`.
pub fn global_ate(pairs: &[(Real, u64)]) -> Result<Real> {
    if pairs.is_empty() {
        return Err(Error::parameter("pairs", 0usize, "need at least one source summary"));
    }
    let mut weighted = 0.0;
    let mut total = 0u64;
    for &(ate, count) in pairs {
        if count == 0 {
            return Err(Error::parameter("count", count, "must be at least 1"));
        }
        weighted += ate * count as Real;
        total += count;
    }
    Ok(weighted / total as Real)
}
