//! Structural-model correctness: factor mapping, adaptive head mixing,
//! the observation likelihood helpers, and (de)serialization.

use causal_rff::model::{
    bernoulli_nll, gaussian_nll, logistic, prior_log_density, reparam_sample, softplus,
    AdaptiveFactors, Bases, FactorKind, FactorMode, GlobalModel, Hyperparams, ObservationKind,
    ProxyParam, SourceParams,
};
use causal_rff::rff::{sample_basis, KernelFamily};
use causal_rff::Real;
use ndarray::{Array1, Array2};
use statrs::distribution::{Continuous, Normal};

fn small_hyper(d_x: usize) -> Hyperparams {
    Hyperparams::with_x_modes(vec![ObservationKind::Binary; d_x])
}

fn small_model(m: usize, seed: u64, init_scale: Real) -> GlobalModel {
    let hyper = small_hyper(4);
    let bases = Bases {
        z: sample_basis(KernelFamily::Gaussian, 1.0, hyper.d_z, 8, seed).unwrap(),
        xy: sample_basis(KernelFamily::Gaussian, 1.0, hyper.d_x() + 1, 8, seed + 1).unwrap(),
        x: sample_basis(KernelFamily::Gaussian, 1.0, hyper.d_x(), 8, seed + 2).unwrap(),
    };
    GlobalModel::init(bases, m, hyper, seed + 3, init_scale, 0.3).unwrap()
}

#[test]
fn hyperparameter_validation_rejects_degenerate_values() {
    assert!(small_hyper(4).validate().is_ok());
    for breaker in [
        |h: &mut Hyperparams| h.sigma_z = 0.0,
        |h: &mut Hyperparams| h.sigma_y = -1.0,
        |h: &mut Hyperparams| h.sigma_x = f64::NAN,
        |h: &mut Hyperparams| h.sigma_q = 0.0,
        |h: &mut Hyperparams| h.d_z = 0,
        |h: &mut Hyperparams| h.m_samples = 0,
        |h: &mut Hyperparams| h.zeta = -0.5,
        |h: &mut Hyperparams| h.zeta_w = f64::INFINITY,
        |h: &mut Hyperparams| h.zeta_y = -1e-9,
        |h: &mut Hyperparams| h.x_modes.clear(),
    ] {
        let mut hyper = small_hyper(4);
        breaker(&mut hyper);
        assert!(hyper.validate().is_err());
    }
}

#[test]
fn model_initialization_is_deterministic_and_validates() {
    let a = small_model(3, 40, 0.1);
    let b = small_model(3, 40, 0.1);
    assert_eq!(a, b);
    a.validate().unwrap();
    a.assert_finite().unwrap();
    assert_eq!(a.num_sources(), 3);

    let c = small_model(3, 41, 0.1);
    assert_ne!(a.params, c.params);

    let flat = small_model(2, 40, 0.0);
    for params in &flat.params {
        assert!(params.vec_fields().iter().all(|(_, f)| f.iter().all(|&v| v == 0.0)));
    }
}

#[test]
fn learned_factors_read_through_the_logistic_map() {
    let mut factors = AdaptiveFactors::learned(3, 0.0);
    assert_eq!(factors.mode(), FactorMode::Learned);
    for s in 0..3 {
        for v in 0..3 {
            let expected = if s == v { 1.0 } else { 0.5 };
            assert_eq!(factors.lambda(s, v), expected);
            assert_eq!(factors.gamma(s, v), expected);
            assert_eq!(factors.eta(s, v), expected);
        }
    }

    factors = AdaptiveFactors::from_raw(
        FactorMode::Learned,
        Array2::from_shape_fn((2, 2), |(s, v)| (s as Real) - 2.0 * (v as Real)),
        Array2::zeros((2, 2)),
        Array2::from_elem((2, 2), -3.0),
    )
    .unwrap();
    assert_eq!(factors.lambda(0, 1), logistic(-2.0));
    assert_eq!(factors.lambda(1, 0), logistic(1.0));
    assert_eq!(factors.eta(0, 1), logistic(-3.0));
    let matrix = factors.matrix(FactorKind::Lambda);
    assert_eq!(matrix[(0, 0)], 1.0);
    assert_eq!(matrix[(1, 1)], 1.0);
    assert_eq!(matrix[(0, 1)], logistic(-2.0));
    assert!(matrix.iter().all(|&f| (0.0..=1.0).contains(&f)));
}

#[test]
fn fixed_factors_pin_every_off_diagonal_entry() {
    let factors = AdaptiveFactors::fixed(4, 1.0).unwrap();
    for s in 0..4 {
        for v in 0..4 {
            assert_eq!(factors.lambda(s, v), 1.0);
            assert_eq!(factors.gamma(s, v), 1.0);
        }
    }
    let factors = AdaptiveFactors::fixed(2, 0.0).unwrap();
    assert_eq!(factors.eta(0, 1), 0.0);
    assert_eq!(factors.eta(0, 0), 1.0);

    assert!(AdaptiveFactors::fixed(2, -0.01).is_err());
    assert!(AdaptiveFactors::fixed(2, 1.01).is_err());
    assert!(AdaptiveFactors::fixed(2, f64::NAN).is_err());
}

#[test]
fn raw_factor_matrices_must_be_square_and_equal_order() {
    let square = Array2::<Real>::zeros((2, 2));
    let tall = Array2::<Real>::zeros((3, 2));
    assert!(AdaptiveFactors::from_raw(
        FactorMode::Learned,
        tall.clone(),
        square.clone(),
        square.clone()
    )
    .is_err());
    assert!(AdaptiveFactors::from_raw(
        FactorMode::Learned,
        square.clone(),
        Array2::zeros((3, 3)),
        square.clone()
    )
    .is_err());
    assert!(AdaptiveFactors::from_raw(FactorMode::Fixed(2.0), square.clone(), square.clone(), square).is_err());
}

#[test]
fn effective_heads_match_manual_mixing() {
    let model = small_model(3, 50, 0.2);
    let s = 1;
    let head = model.effective_vec(s, FactorKind::Lambda, |p| &p.theta_w).unwrap();
    let mut manual: Array1<Real> = model.params[s].theta_w.clone();
    for v in 0..3 {
        if v != s {
            manual += &(model.params[v].theta_w.view().to_owned() * model.factors.lambda(s, v));
        }
    }
    for (a, b) in head.iter().zip(manual.iter()) {
        assert!((a - b).abs() < 1e-12, "effective head {a} vs manual {b}");
    }

    let mat = model.effective_mat(s, FactorKind::Eta, |p| &p.theta_q0).unwrap();
    let mut manual = model.params[s].theta_q0.clone();
    for v in 0..3 {
        if v != s {
            manual += &(model.params[v].theta_q0.view().to_owned() * model.factors.eta(s, v));
        }
    }
    for (a, b) in mat.iter().zip(manual.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn outcome_heads_are_gated_by_the_treatment_arm() {
    let mut model = small_model(1, 60, 0.0);
    let dims = model.dims();
    let mut params = SourceParams::zeros(&dims);
    params.theta_y0.fill(1.0);
    params.theta_y1.fill(-2.0);
    model.params[0] = params;
    let z = vec![0.0; model.hyper.d_z];
    let phi_sum: Real = model.bases.z.feature_map(&z).unwrap().sum();
    let a0 = model.outcome_linear(0, &z, false).unwrap();
    let a1 = model.outcome_linear(0, &z, true).unwrap();
    assert!((a0 - phi_sum).abs() < 1e-12);
    assert!((a1 + 2.0 * phi_sum).abs() < 1e-12);
    assert_eq!(model.outcome_mean(0, &z, false).unwrap(), a0);

    model.hyper.y_mode = ObservationKind::Binary;
    assert_eq!(model.outcome_mean(0, &z, false).unwrap(), logistic(a0));
}

#[test]
fn zero_heads_give_indifferent_propensity_and_proxies() {
    let model = small_model(2, 70, 0.0);
    let z = vec![0.4, -0.2, 0.0, 1.0, -1.0];
    assert_eq!(model.propensity_prob(0, &z).unwrap(), 0.5);
    for proxy in model.proxy_distribution(0, &z).unwrap() {
        match proxy {
            ProxyParam::Binary { prob } => assert_eq!(prob, 0.5),
            ProxyParam::Continuous { .. } => panic!("covariates are binary here"),
        }
    }
}

#[test]
fn variational_mean_has_latent_dimension_and_gates_on_treatment() {
    let model = small_model(2, 80, 0.3);
    let x = vec![1.0, 0.0, 1.0, 1.0];
    let mean0 = model.variational_mean(0, 2.5, false, &x).unwrap();
    let mean1 = model.variational_mean(0, 2.5, true, &x).unwrap();
    assert_eq!(mean0.len(), model.hyper.d_z);
    assert_ne!(mean0, mean1);

    let eps = Array1::from_vec(vec![1.0, -1.0, 0.5, 0.0, 2.0]);
    let draw = reparam_sample(&mean0, 0.7, &eps);
    for d in 0..mean0.len() {
        assert!((draw[d] - (mean0[d] + 0.7 * eps[d])).abs() < 1e-15);
    }
}

#[test]
fn prior_log_density_matches_the_normal_distribution() {
    let hyper = small_hyper(4);
    let z = [0.3, -1.1, 0.0, 2.0, -0.5];
    let normal = Normal::new(0.0, hyper.sigma_z).unwrap();
    let expected: f64 = z.iter().map(|&v| normal.ln_pdf(v)).sum();
    let got = prior_log_density(&z, &hyper);
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");

    let mut wide = hyper.clone();
    wide.sigma_z = 2.5;
    let normal = Normal::new(0.0, 2.5).unwrap();
    let expected: f64 = z.iter().map(|&v| normal.ln_pdf(v)).sum();
    assert!((prior_log_density(&z, &wide) - expected).abs() < 1e-12);
}

#[test]
fn gaussian_nll_matches_the_normal_distribution() {
    let normal = Normal::new(1.7, 0.4).unwrap();
    for value in [-2.0, 0.0, 1.7, 5.5] {
        let got = gaussian_nll(value, 1.7, 0.4);
        let expected = -normal.ln_pdf(value);
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }
}

#[test]
fn link_helpers_are_stable_at_extreme_arguments() {
    assert_eq!(logistic(0.0), 0.5);
    assert!((logistic(800.0) - 1.0).abs() < 1e-15);
    assert!(logistic(-700.0) > 0.0);
    assert!(logistic(-700.0) < 1e-300);
    assert_eq!(logistic(-800.0), 0.0, "underflows cleanly instead of producing NaN");

    assert!((softplus(0.0) - (2.0f64).ln()).abs() < 1e-15);
    assert!((softplus(40.0) - 40.0).abs() < 1e-12);
    assert!(softplus(-40.0) < 1e-12);
    assert!(softplus(-40.0) > 0.0);

    // -ln p(label) under the logit, stable far from the boundary.
    assert!(bernoulli_nll(500.0, 1.0) < 1e-12);
    assert!(bernoulli_nll(-500.0, 0.0) < 1e-12);
    assert!((bernoulli_nll(500.0, 0.0) - 500.0).abs() < 1e-9);
    let p = logistic(1.3);
    assert!((bernoulli_nll(1.3, 1.0) + p.ln()).abs() < 1e-12);
    assert!((bernoulli_nll(1.3, 0.0) + (1.0 - p).ln()).abs() < 1e-12);
}

#[test]
fn model_json_round_trips_exactly() {
    let model = small_model(2, 90, 0.15);
    let json = serde_json::to_string(&model).unwrap();
    let back: GlobalModel = serde_json::from_str(&json).unwrap();
    assert_eq!(model, back);
}

#[test]
fn non_finite_heads_are_reported_by_name() {
    let mut model = small_model(2, 95, 0.1);
    model.params[1].psi[0] = f64::NAN;
    let err = model.assert_finite().unwrap_err().to_string();
    assert!(err.contains("source 1"), "unexpected message: {err}");
    assert!(err.contains("psi"), "unexpected message: {err}");
}

#[test]
fn validation_catches_source_count_and_shape_drift() {
    let mut model = small_model(2, 96, 0.1);
    model.params.pop();
    assert!(model.validate().is_err());

    let mut model = small_model(2, 97, 0.1);
    model.params[0].theta_w = Array1::zeros(3);
    assert!(model.validate().is_err());

    let mut model = small_model(2, 98, 0.1);
    model.hyper.d_z += 1;
    assert!(model.validate().is_err(), "bases must match the latent dimension");
}
