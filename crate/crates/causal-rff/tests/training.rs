//! Objective and gradient correctness: KL closed form against
//! quadrature, loss closed forms at zero heads, the source-by-source
//! decomposition, the analytic gradient against central differences, and
//! the momentum update rule.

use causal_rff::data::SourceDataset;
use causal_rff::model::{
    gaussian_nll, logistic, AdaptiveFactors, Bases, FactorMode, GlobalModel, Hyperparams,
    ObservationKind,
};
use causal_rff::rff::{sample_basis, KernelFamily};
use causal_rff::training::{
    apply_update, kl_to_prior, local_elbo_loss, local_gradient, local_losses, local_objective,
    pooled_elbo_objective, round_seed, GradientRecord, NoiseDraws, Sgd,
};
use causal_rff::Real;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One-dimensional `KL(N(mu, sq²) || N(0, sz²))` by trapezoid quadrature
/// of `E_q[ln q - ln p]`.
fn kl_1d_numeric(mu: f64, sq: f64, sz: f64) -> f64 {
    let lo = mu - 14.0 * sq;
    let hi = mu + 14.0 * sq;
    let steps = 400_000usize;
    let h = (hi - lo) / steps as f64;
    let ln_q = |t: f64| {
        -0.5 * (2.0 * std::f64::consts::PI * sq * sq).ln() - (t - mu) * (t - mu) / (2.0 * sq * sq)
    };
    let ln_p = |t: f64| {
        -0.5 * (2.0 * std::f64::consts::PI * sz * sz).ln() - t * t / (2.0 * sz * sz)
    };
    let f = |t: f64| ln_q(t).exp() * (ln_q(t) - ln_p(t));
    let mut acc = 0.5 * (f(lo) + f(hi));
    for k in 1..steps {
        acc += f(lo + h * k as f64);
    }
    acc * h
}

#[test]
fn kl_closed_form_matches_quadrature() {
    let mu = [0.3, -1.2, 2.0];
    let (sq, sz) = (0.8, 1.3);
    let expected: f64 = mu.iter().map(|&m| kl_1d_numeric(m, sq, sz)).sum();
    let got = kl_to_prior(&mu, sq, sz).unwrap();
    assert!(
        (got - expected).abs() < 1e-7,
        "closed form {got} vs quadrature {expected}"
    );
}

#[test]
fn kl_vanishes_when_posterior_equals_prior() {
    assert_eq!(kl_to_prior(&[0.0, 0.0, 0.0, 0.0], 1.7, 1.7).unwrap(), 0.0);
    assert!(kl_to_prior(&[0.5], 1.0, 1.0).unwrap() > 0.0);
    assert!(kl_to_prior(&[0.0], 0.0, 1.0).is_err(), "zero posterior scale");
    assert!(kl_to_prior(&[0.0], 1.0, 0.0).is_err(), "zero prior scale");
}

#[test]
fn noise_streams_are_deterministic_and_distinct() {
    let a = NoiseDraws::generate(7, 2, 5, 4, 3, 2);
    let b = NoiseDraws::generate(7, 2, 5, 4, 3, 2);
    assert_eq!(a, b);
    assert_ne!(a, NoiseDraws::generate(7, 2, 6, 4, 3, 2), "round changes the stream");
    assert_ne!(a, NoiseDraws::generate(7, 3, 5, 4, 3, 2), "source changes the stream");
    assert_ne!(a, NoiseDraws::generate(8, 2, 5, 4, 3, 2), "seed changes the stream");

    let mut seeds = std::collections::HashSet::new();
    for source in 0..10u64 {
        for round in 0..10u64 {
            assert!(seeds.insert(round_seed(42, source, round)));
        }
    }
}

const X_MODES: [ObservationKind; 3] = [
    ObservationKind::Binary,
    ObservationKind::Continuous,
    ObservationKind::Binary,
];

fn test_hyper(y_mode: ObservationKind) -> Hyperparams {
    let mut hyper = Hyperparams::with_x_modes(X_MODES.to_vec());
    hyper.sigma_z = 1.1;
    hyper.sigma_q = 0.8;
    hyper.sigma_y = 0.9;
    hyper.sigma_x = 1.3;
    hyper.d_z = 2;
    hyper.m_samples = 2;
    hyper.zeta = 0.02;
    hyper.zeta_w = 0.03;
    hyper.zeta_y = 0.04;
    hyper.y_mode = y_mode;
    hyper
}

fn test_model(y_mode: ObservationKind, factor_mode: FactorMode, init_scale: Real) -> GlobalModel {
    let hyper = test_hyper(y_mode);
    let bases = Bases {
        z: sample_basis(KernelFamily::Gaussian, 1.0, hyper.d_z, 4, 1).unwrap(),
        xy: sample_basis(KernelFamily::Gaussian, 1.2, hyper.d_x() + 1, 4, 2).unwrap(),
        x: sample_basis(KernelFamily::Gaussian, 0.8, hyper.d_x(), 4, 3).unwrap(),
    };
    let mut model = GlobalModel::init(bases, 3, hyper, 4, init_scale, 0.0).unwrap();
    model.factors = AdaptiveFactors::from_raw(
        factor_mode,
        Array2::from_shape_fn((3, 3), |(s, v)| 0.3 * s as Real - 0.5 * v as Real + 0.1),
        Array2::from_shape_fn((3, 3), |(s, v)| 0.2 * v as Real - 0.4 * s as Real),
        Array2::from_shape_fn((3, 3), |(s, v)| 0.15 * (s as Real + 1.0) * (v as Real - 1.0)),
    )
    .unwrap();
    model
}

fn test_datasets(y_mode: ObservationKind) -> Vec<SourceDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let w_patterns: [[u8; 3]; 3] = [[0, 1, 1], [1, 0, 1], [0, 0, 1]];
    (0..3)
        .map(|s| {
            let n = 3;
            let x = Array2::from_shape_fn((n, 3), |(_, j)| match X_MODES[j] {
                ObservationKind::Binary => {
                    if rng.random_bool(0.5) {
                        1.0
                    } else {
                        0.0
                    }
                }
                ObservationKind::Continuous => rng.random_range(-1.5..1.5),
            });
            let y = (0..n)
                .map(|_| match y_mode {
                    ObservationKind::Continuous => rng.random_range(-2.0..6.0),
                    ObservationKind::Binary => {
                        if rng.random_bool(0.5) {
                            1.0
                        } else {
                            0.0
                        }
                    }
                })
                .collect();
            SourceDataset {
                unit_ids: None,
                w: w_patterns[s].to_vec(),
                y,
                x,
            }
        })
        .collect()
}

fn test_noises(model: &GlobalModel, datasets: &[SourceDataset]) -> Vec<NoiseDraws> {
    datasets
        .iter()
        .enumerate()
        .map(|(s, d)| {
            NoiseDraws::generate(99, s as u64, 0, d.n(), model.hyper.m_samples, model.hyper.d_z)
        })
        .collect()
}

#[test]
fn elbo_has_a_closed_form_at_zero_heads() {
    let model = test_model(ObservationKind::Continuous, FactorMode::Learned, 0.0);
    let datasets = test_datasets(ObservationKind::Continuous);
    let noises = test_noises(&model, &datasets);
    let hyper = &model.hyper;

    for (s, data) in datasets.iter().enumerate() {
        let (loss, terms) = local_elbo_loss(s, data, &model, &noises[s]).unwrap();
        let n = data.n() as Real;

        // Zero recognition heads put q at N(0, σ_q²) for every record.
        let kl_per_record = kl_to_prior(&[0.0; 2], hyper.sigma_q, hyper.sigma_z).unwrap();
        assert!((terms.kl - n * kl_per_record).abs() < 1e-12);

        // Zero decoder heads make every likelihood indifferent to z.
        let ln2 = (2.0f64).ln();
        assert!((terms.recon_w - n * ln2).abs() < 1e-12);
        let expected_y: Real = data
            .y
            .iter()
            .map(|&y| gaussian_nll(y, 0.0, hyper.sigma_y))
            .sum();
        assert!((terms.recon_y - expected_y).abs() < 1e-12);
        let expected_x: Real = (0..data.n())
            .map(|i| {
                (0..3)
                    .map(|j| match X_MODES[j] {
                        ObservationKind::Binary => ln2,
                        ObservationKind::Continuous => {
                            gaussian_nll(data.x[(i, j)], 0.0, hyper.sigma_x)
                        }
                    })
                    .sum::<Real>()
            })
            .sum();
        assert!((terms.recon_x - expected_x).abs() < 1e-12);
        assert_eq!(terms.regularizer, 0.0);
        assert!((loss - terms.total()).abs() < 1e-12);
    }
}

#[test]
fn auxiliary_losses_have_closed_forms_at_zero_heads() {
    let model = test_model(ObservationKind::Continuous, FactorMode::Learned, 0.0);
    let datasets = test_datasets(ObservationKind::Continuous);
    let noises = test_noises(&model, &datasets);
    for (s, data) in datasets.iter().enumerate() {
        let loss = local_losses(s, data, &model, &noises[s]).unwrap();
        let n = data.n() as Real;
        assert!((loss.propensity - n * (2.0f64).ln()).abs() < 1e-12);
        let expected: Real = data
            .y
            .iter()
            .map(|&y| gaussian_nll(y, 0.0, model.hyper.sigma_y))
            .sum();
        assert!((loss.outcome - expected).abs() < 1e-12);
        assert_eq!(loss.total(), loss.elbo + loss.propensity + loss.outcome);
        assert_eq!(loss.source_id, s);
    }
}

/// The pooled objective equals the sum of per-source objectives: the
/// decomposition that lets each source compute its own share.
#[test]
fn pooled_objective_decomposes_source_by_source() {
    let model = test_model(ObservationKind::Continuous, FactorMode::Learned, 0.35);
    let datasets = test_datasets(ObservationKind::Continuous);
    let noises = test_noises(&model, &datasets);

    let pooled = pooled_elbo_objective(
        &datasets.iter().collect::<Vec<_>>(),
        &model,
        &noises.iter().collect::<Vec<_>>(),
    )
    .unwrap();
    let summed: Real = (0..3)
        .map(|s| local_elbo_loss(s, &datasets[s], &model, &noises[s]).unwrap().0)
        .sum();
    let rel = (pooled - summed).abs() / summed.abs().max(1.0);
    assert!(rel < 1e-12, "pooled {pooled} vs summed {summed} (rel {rel})");
}

/// Central-difference check of every coordinate the gradient covers: all
/// sources' heads and all three factor matrices.
fn check_gradient_against_central_differences(y_mode: ObservationKind, mode: FactorMode) {
    let model = test_model(y_mode, mode, 0.35);
    let datasets = test_datasets(y_mode);
    let noises = test_noises(&model, &datasets);
    let lam = Array2::from_shape_fn((3, 3), |(s, v)| 0.3 * s as Real - 0.5 * v as Real + 0.1);
    let gam = Array2::from_shape_fn((3, 3), |(s, v)| 0.2 * v as Real - 0.4 * s as Real);
    let eta = Array2::from_shape_fn((3, 3), |(s, v)| 0.15 * (s as Real + 1.0) * (v as Real - 1.0));

    for s in 0..3 {
        let grad = local_gradient(s, &datasets[s], &model, &noises[s]).unwrap();
        assert_eq!(grad.n_s, datasets[s].n() as u64);
        let mut checked = 0usize;
        let mut check = |analytic: Real, perturb: &dyn Fn(Real) -> GlobalModel, what: String| {
            let h = 1e-5;
            let plus = local_objective(s, &datasets[s], &perturb(h), &noises[s]).unwrap();
            let minus = local_objective(s, &datasets[s], &perturb(-h), &noises[s]).unwrap();
            let numeric = (plus - minus) / (2.0 * h);
            let tol = 1e-7 + 1e-4 * analytic.abs().max(numeric.abs());
            assert!(
                (analytic - numeric).abs() < tol,
                "{what}: analytic {analytic} vs numeric {numeric}"
            );
            checked += 1;
        };

        for v in 0..3 {
            for field in 0..6 {
                let len = grad.params[v].vec_fields()[field].1.len();
                for idx in 0..len {
                    let analytic = grad.params[v].vec_fields()[field].1[idx];
                    let name = grad.params[v].vec_fields()[field].0;
                    check(
                        analytic,
                        &|h| {
                            let mut m = model.clone();
                            m.params[v].vec_fields_mut()[field][idx] += h;
                            m
                        },
                        format!("source {s}, head {name}[{idx}] of {v}"),
                    );
                }
            }
            for field in 0..3 {
                let dim = grad.params[v].mat_fields()[field].1.dim();
                for r in 0..dim.0 {
                    for c in 0..dim.1 {
                        let analytic = grad.params[v].mat_fields()[field].1[(r, c)];
                        let name = grad.params[v].mat_fields()[field].0;
                        check(
                            analytic,
                            &|h| {
                                let mut m = model.clone();
                                m.params[v].mat_fields_mut()[field][(r, c)] += h;
                                m
                            },
                            format!("source {s}, head {name}[({r},{c})] of {v}"),
                        );
                    }
                }
            }
        }

        for a in 0..3 {
            for b in 0..3 {
                for (which, analytic) in [
                    ("lambda", grad.lambda_u[(a, b)]),
                    ("gamma", grad.gamma_u[(a, b)]),
                    ("eta", grad.eta_u[(a, b)]),
                ] {
                    if mode != FactorMode::Learned {
                        assert_eq!(analytic, 0.0, "fixed factors take no gradient");
                        continue;
                    }
                    check(
                        analytic,
                        &|h| {
                            let mut m = model.clone();
                            let (mut l, mut g, mut e) = (lam.clone(), gam.clone(), eta.clone());
                            match which {
                                "lambda" => l[(a, b)] += h,
                                "gamma" => g[(a, b)] += h,
                                _ => e[(a, b)] += h,
                            }
                            m.factors = AdaptiveFactors::from_raw(mode, l, g, e).unwrap();
                            m
                        },
                        format!("source {s}, {which}[{a},{b}]"),
                    );
                }
            }
        }
        assert!(checked >= 312, "checked only {checked} coordinates");
    }
}

#[test]
fn analytic_gradient_matches_central_differences() {
    check_gradient_against_central_differences(ObservationKind::Continuous, FactorMode::Learned);
}

#[test]
fn analytic_gradient_matches_central_differences_with_binary_outcome() {
    check_gradient_against_central_differences(ObservationKind::Binary, FactorMode::Learned);
}

#[test]
fn analytic_gradient_matches_central_differences_with_fixed_factors() {
    check_gradient_against_central_differences(ObservationKind::Continuous, FactorMode::Fixed(0.7));
}

#[test]
fn gradient_record_addition_checks_shapes() {
    let model3 = test_model(ObservationKind::Continuous, FactorMode::Learned, 0.1);
    let mut total = GradientRecord::zeros(&model3);
    let other = GradientRecord::zeros(&model3);
    total.add_assign(&other).unwrap();

    let hyper = test_hyper(ObservationKind::Continuous);
    let bases = Bases {
        z: sample_basis(KernelFamily::Gaussian, 1.0, hyper.d_z, 4, 1).unwrap(),
        xy: sample_basis(KernelFamily::Gaussian, 1.2, hyper.d_x() + 1, 4, 2).unwrap(),
        x: sample_basis(KernelFamily::Gaussian, 0.8, hyper.d_x(), 4, 3).unwrap(),
    };
    let model2 = GlobalModel::init(bases, 2, hyper, 4, 0.1, 0.0).unwrap();
    assert!(total.add_assign(&GradientRecord::zeros(&model2)).is_err());

    let mut nan = GradientRecord::zeros(&model3);
    nan.params[1].beta1[0] = f64::NAN;
    let err = nan.assert_finite().unwrap_err().to_string();
    assert!(err.contains("beta1"), "unexpected message: {err}");
}

#[test]
fn sgd_follows_the_momentum_recursion() {
    let mut model = test_model(ObservationKind::Continuous, FactorMode::Learned, 0.2);
    model.factors = AdaptiveFactors::learned(3, 0.2);
    let p0 = model.params[0].theta_y0[1];
    let q0 = model.params[2].psi[3];

    let mut grad = GradientRecord::zeros(&model);
    grad.params[0].theta_y0[1] = 2.0;
    grad.params[2].psi[3] = -1.0;
    grad.lambda_u[(0, 1)] = 0.5;

    let mut opt = Sgd::new(0.5).unwrap();
    let lr = 0.1;
    apply_update(&mut model, &grad, &mut opt, lr).unwrap();
    assert!((model.params[0].theta_y0[1] - (p0 - lr * 2.0)).abs() < 1e-15);
    assert!((model.params[2].psi[3] - (q0 + lr)).abs() < 1e-15);
    assert!((model.factors.lambda(0, 1) - logistic(0.2 - lr * 0.5)).abs() < 1e-15);

    // Second step with the same gradient: velocity = 0.5·g + g = 1.5·g.
    apply_update(&mut model, &grad, &mut opt, lr).unwrap();
    assert!((model.params[0].theta_y0[1] - (p0 - lr * 2.0 - lr * 3.0)).abs() < 1e-15);
    assert!(
        (model.factors.lambda(0, 1) - logistic(0.2 - lr * 0.5 - lr * 0.75)).abs() < 1e-15
    );
    // Untouched coordinates stay put.
    assert_eq!(model.factors.lambda(1, 0), logistic(0.2));
}

#[test]
fn fixed_factors_receive_no_updates() {
    let mut model = test_model(ObservationKind::Continuous, FactorMode::Fixed(0.6), 0.2);
    let before = model.params[1].theta_w.clone();
    let mut grad = GradientRecord::zeros(&model);
    grad.params[1].theta_w.fill(1.0);
    grad.lambda_u.fill(9.0);
    grad.gamma_u.fill(9.0);
    grad.eta_u.fill(9.0);
    let mut opt = Sgd::new(0.0).unwrap();
    apply_update(&mut model, &grad, &mut opt, 0.05).unwrap();
    assert_eq!(model.factors.lambda(0, 1), 0.6, "pinned factors never move");
    assert_eq!(model.factors.eta(1, 2), 0.6);
    for (a, b) in model.params[1].theta_w.iter().zip(before.iter()) {
        assert!((a - (b - 0.05)).abs() < 1e-15, "heads still update");
    }
}

#[test]
fn update_rejects_degenerate_learning_rates_and_momentum() {
    let mut model = test_model(ObservationKind::Continuous, FactorMode::Learned, 0.1);
    let grad = GradientRecord::zeros(&model);
    for lr in [0.0, -0.1, f64::NAN, f64::INFINITY] {
        let mut opt = Sgd::new(0.0).unwrap();
        assert!(apply_update(&mut model, &grad, &mut opt, lr).is_err());
    }
    assert!(Sgd::new(-0.1).is_err());
    assert!(Sgd::new(0.995).is_err());
    assert!(Sgd::new(0.99).is_ok());
}

#[test]
fn losses_are_invariant_to_the_unit_id_column() {
    let model = test_model(ObservationKind::Continuous, FactorMode::Learned, 0.3);
    let datasets = test_datasets(ObservationKind::Continuous);
    let noises = test_noises(&model, &datasets);
    let mut named = datasets[0].clone();
    named.unit_ids = Some(vec!["a".into(), "b".into(), "c".into()]);
    let anon = local_losses(0, &datasets[0], &model, &noises[0]).unwrap();
    let with_ids = local_losses(0, &named, &model, &noises[0]).unwrap();
    assert_eq!(anon, with_ids);
}
