//! Effect-estimation correctness: content-seeded draws, the
//! Metropolis-Hastings independence sampler, sampler agreement, and ATE
//! aggregation.

use causal_rff::effects::{
    cate, estimate_effects, global_ate, mh_chain, mh_independent_sampler, proposal_log_density,
    record_seed, sample_z_given_x, EffectSettings, SamplerKind,
};
use causal_rff::model::{Bases, GlobalModel, Hyperparams, ObservationKind};
use causal_rff::rff::{sample_basis, KernelFamily};
use causal_rff::Real;
use ndarray::{array, Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn effect_hyper() -> Hyperparams {
    let mut hyper = Hyperparams::with_x_modes(vec![
        ObservationKind::Binary,
        ObservationKind::Continuous,
        ObservationKind::Binary,
    ]);
    hyper.d_z = 2;
    hyper.sigma_z = 1.2;
    hyper.sigma_q = 0.9;
    hyper
}

fn effect_model(m: usize, init_scale: Real, hyper: Hyperparams) -> GlobalModel {
    let bases = Bases {
        z: sample_basis(KernelFamily::Gaussian, 1.0, hyper.d_z, 6, 11).unwrap(),
        xy: sample_basis(KernelFamily::Gaussian, 1.1, hyper.d_x() + 1, 6, 12).unwrap(),
        x: sample_basis(KernelFamily::Gaussian, 0.9, hyper.d_x(), 6, 13).unwrap(),
    };
    GlobalModel::init(bases, m, hyper, 14, init_scale, 0.1).unwrap()
}

fn variational(n_draws: usize, seed: u64) -> EffectSettings {
    EffectSettings {
        n_draws,
        sampler: SamplerKind::Variational,
        seed,
    }
}

#[test]
fn record_seeds_hash_content_not_position() {
    let a = record_seed(5, &[1.0, 0.0, 1.0]);
    assert_eq!(a, record_seed(5, &[1.0, 0.0, 1.0]));
    assert_ne!(a, record_seed(5, &[0.0, 0.0, 1.0]));
    assert_ne!(a, record_seed(6, &[1.0, 0.0, 1.0]));
    assert_ne!(
        record_seed(5, &[1.0, 0.0]),
        record_seed(5, &[1.0, 0.0, 0.0]),
        "length is part of the content"
    );
}

#[test]
fn effects_are_invariant_to_row_order() {
    let model = effect_model(2, 0.4, effect_hyper());
    let rows = array![
        [1.0, 0.3, 0.0],
        [0.0, -0.7, 1.0],
        [1.0, 1.4, 1.0],
    ];
    let settings = variational(25, 77);
    let est = estimate_effects(&rows, 0, &model, &settings).unwrap();

    let reversed = array![
        [1.0, 1.4, 1.0],
        [0.0, -0.7, 1.0],
        [1.0, 0.3, 0.0],
    ];
    let est_rev = estimate_effects(&reversed, 0, &model, &settings).unwrap();
    assert_eq!(est.cates[0], est_rev.cates[2]);
    assert_eq!(est.cates[1], est_rev.cates[1]);
    assert_eq!(est.cates[2], est_rev.cates[0]);
    assert!((est.local_ate - est_rev.local_ate).abs() < 1e-12);
    assert_eq!(est.count, 3);
    assert_eq!(est.n_draws, 25);
}

#[test]
fn effect_estimates_are_deterministic_in_the_seed() {
    let model = effect_model(3, 0.3, effect_hyper());
    let rows = Array2::from_shape_fn((4, 3), |(i, j)| ((i * 3 + j) % 2) as Real);
    let a = estimate_effects(&rows, 1, &model, &variational(30, 5)).unwrap();
    let b = estimate_effects(&rows, 1, &model, &variational(30, 5)).unwrap();
    assert_eq!(a, b);
    let c = estimate_effects(&rows, 1, &model, &variational(30, 6)).unwrap();
    assert_ne!(a.cates, c.cates);
}

/// With every latent head at zero the likelihood does not depend on `z`,
/// so the posterior is the prior; with `σ_q = σ_z` the proposal equals
/// that posterior and every proposal must be accepted, exactly.
#[test]
fn mh_accepts_every_proposal_when_proposal_equals_posterior() {
    let mut hyper = effect_hyper();
    hyper.sigma_q = hyper.sigma_z;
    let model = effect_model(2, 0.0, hyper);
    for (w, y, seed) in [(false, 0.7, 1u64), (true, -2.0, 2), (true, 0.0, 3)] {
        let run =
            mh_independent_sampler(&[1.0, 0.25, 0.0], y, w, 0, &model, 400, 100, seed).unwrap();
        assert_eq!(run.proposals, 399);
        assert_eq!(run.accepted, 399);
        assert_eq!(run.acceptance_rate(), 1.0, "acceptance must be exactly 1");
        assert_eq!(run.states.len(), 300);
    }
}

#[test]
fn mh_rejects_some_proposals_once_heads_are_informative() {
    let model = effect_model(2, 0.8, effect_hyper());
    let run = mh_independent_sampler(&[1.0, 0.5, 1.0], 1.5, true, 0, &model, 400, 100, 9).unwrap();
    assert!(run.accepted < run.proposals, "an informative target must reject sometimes");
    assert!(run.acceptance_rate() > 0.0);
}

/// Independence chain against a known one-dimensional Gaussian target:
/// the grand mean over independent seeds lands within three standard
/// errors of the target mean.
#[test]
fn mh_chain_recovers_a_gaussian_target_mean() {
    let (target_mean, target_sd) = (1.5, 0.7);
    let (prop_mean, prop_sd) = (0.0, 2.0);
    let prop_mean_vec = Array1::from_vec(vec![prop_mean]);
    let mut means = Vec::new();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let run = mh_chain(
            2000,
            &mut rng,
            |rng| {
                let e: Real = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
                array![prop_mean + prop_sd * e]
            },
            |z| Ok(-(z[0] - target_mean) * (z[0] - target_mean) / (2.0 * target_sd * target_sd)),
            |z| proposal_log_density(z, &prop_mean_vec, prop_sd),
        )
        .unwrap();
        let tail = &run.states[500..];
        means.push(tail.iter().map(|z| z[0]).sum::<Real>() / tail.len() as Real);
    }
    let grand = means.iter().sum::<Real>() / means.len() as Real;
    let var = means.iter().map(|m| (m - grand) * (m - grand)).sum::<Real>()
        / (means.len() - 1) as Real;
    let se = (var / means.len() as Real).sqrt();
    assert!(
        (grand - target_mean).abs() <= 3.0 * se,
        "grand mean {grand} vs target {target_mean} (se {se})"
    );
}

/// A length-1 chain consumes exactly one proposal, which is the
/// variational draw, so the two samplers agree bit for bit.
#[test]
fn variational_and_single_step_mh_draw_identical_latents() {
    let model = effect_model(3, 0.5, effect_hyper());
    let x = [0.0, 1.3, 1.0];
    for source in 0..3 {
        let v = sample_z_given_x(&x, source, &model, &variational(40, 21)).unwrap();
        let mh = sample_z_given_x(
            &x,
            source,
            &model,
            &EffectSettings {
                n_draws: 40,
                sampler: SamplerKind::Mh {
                    chain_len: 1,
                    burn_in: 0,
                },
                seed: 21,
            },
        )
        .unwrap();
        assert_eq!(v, mh);
    }
}

#[test]
fn cate_is_exactly_zero_when_both_arms_share_a_head() {
    let mut model = effect_model(2, 0.6, effect_hyper());
    for params in &mut model.params {
        params.theta_y1 = params.theta_y0.clone();
    }
    for x in [[0.0, 0.4, 1.0], [1.0, -1.2, 0.0]] {
        assert_eq!(cate(&x, 0, &model, &variational(15, 3)).unwrap(), 0.0);
        assert_eq!(
            cate(
                &x,
                1,
                &model,
                &EffectSettings {
                    n_draws: 5,
                    sampler: SamplerKind::Mh {
                        chain_len: 20,
                        burn_in: 4,
                    },
                    seed: 3,
                }
            )
            .unwrap(),
            0.0
        );
    }
}

#[test]
fn zero_posterior_width_collapses_draws_onto_the_mean() {
    let mut hyper = effect_hyper();
    hyper.sigma_q = 1.0;
    let mut model = effect_model(2, 0.0, hyper);
    model.hyper.sigma_q = 0.0;
    let draws = sample_z_given_x(&[1.0, 0.0, 0.0], 0, &model, &variational(8, 4)).unwrap();
    for z in &draws {
        assert!(z.iter().all(|&v| v == 0.0), "zero heads pin the mean at zero");
    }

    let mh = EffectSettings {
        n_draws: 2,
        sampler: SamplerKind::Mh {
            chain_len: 5,
            burn_in: 1,
        },
        seed: 4,
    };
    assert!(
        sample_z_given_x(&[1.0, 0.0, 0.0], 0, &model, &mh).is_err(),
        "the independence chain needs a positive proposal width"
    );
}

#[test]
fn global_ate_weights_sources_by_record_count() {
    let got = global_ate(&[(7.0, 10), (8.5, 8), (6.8, 12)]).unwrap();
    assert!((got - 7.32).abs() < 1e-12, "weighted mean {got}");

    let uniform = global_ate(&[(1.0, 5), (3.0, 5)]).unwrap();
    assert!((uniform - 2.0).abs() < 1e-15);

    assert!(global_ate(&[]).is_err());
    assert!(global_ate(&[(1.0, 0)]).is_err());
}

#[test]
fn estimate_effects_reports_the_mean_of_per_record_effects() {
    let model = effect_model(2, 0.45, effect_hyper());
    let rows = Array2::from_shape_fn((5, 3), |(i, j)| {
        if j == 1 {
            i as Real * 0.3 - 0.6
        } else {
            ((i + j) % 2) as Real
        }
    });
    let est = estimate_effects(&rows, 1, &model, &variational(20, 8)).unwrap();
    let mean = est.cates.iter().sum::<Real>() / est.cates.len() as Real;
    assert!((est.local_ate - mean).abs() < 1e-15);
    assert_eq!(est.count, 5);
    assert_eq!(est.sampler, "variational");

    let empty = Array2::<Real>::zeros((0, 3));
    assert!(estimate_effects(&empty, 1, &model, &variational(20, 8)).is_err());
}

#[test]
fn effect_settings_reject_degenerate_configurations() {
    assert!(variational(0, 1).validate().is_err());
    assert!(EffectSettings {
        n_draws: 5,
        sampler: SamplerKind::Mh {
            chain_len: 10,
            burn_in: 10,
        },
        seed: 1,
    }
    .validate()
    .is_err());
    assert!(EffectSettings {
        n_draws: 5,
        sampler: SamplerKind::Mh {
            chain_len: 0,
            burn_in: 0,
        },
        seed: 1,
    }
    .validate()
    .is_err());
    assert!(variational(1, 0).validate().is_ok());
}
