//! Feature-map correctness: spectral sampling laws, kernel
//! approximation against closed forms, the inner-product identity, head
//! mixing, and the basis wire blob.

use causal_rff::rff::{
    effective_weight, effective_weight_matrix, sample_basis, FourierBasis, KernelFamily,
};
use ndarray::{array, Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Closed-form Gaussian kernel `exp(-||u - v||² / (2ℓ²))`.
fn gaussian_kernel(u: &[f64], v: &[f64], ell: f64) -> f64 {
    let sq: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
    (-sq / (2.0 * ell * ell)).exp()
}

/// Closed-form Laplacian kernel `exp(-ℓ ||u - v||₁)`; ℓ multiplies here.
fn laplacian_kernel(u: &[f64], v: &[f64], ell: f64) -> f64 {
    let l1: f64 = u.iter().zip(v).map(|(a, b)| (a - b).abs()).sum();
    (-ell * l1).exp()
}

/// Closed-form Matérn kernel at ν = 1/2: `exp(-||u - v||₂ / ℓ)`.
fn matern_half_kernel(u: &[f64], v: &[f64], ell: f64) -> f64 {
    let r: f64 = u
        .iter()
        .zip(v)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    (-r / ell).exp()
}

/// Closed-form Matérn kernel at ν = 3/2:
/// `(1 + √3 r/ℓ) exp(-√3 r/ℓ)` with `r = ||u - v||₂`.
fn matern_three_halves_kernel(u: &[f64], v: &[f64], ell: f64) -> f64 {
    let r: f64 = u
        .iter()
        .zip(v)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let s = 3f64.sqrt() * r / ell;
    (1.0 + s) * (-s).exp()
}

fn random_point(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Largest absolute error of `φ(u)ᵀφ(v)` against the closed form over
/// random pairs.
fn max_kernel_error(
    basis: &FourierBasis<f64>,
    kernel: impl Fn(&[f64], &[f64]) -> f64,
    pairs: usize,
    scale: f64,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = basis.input_dim();
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let u = random_point(&mut rng, dim, scale);
        let v = random_point(&mut rng, dim, scale);
        let approx = basis
            .feature_map(&u)
            .unwrap()
            .dot(&basis.feature_map(&v).unwrap());
        worst = worst.max((approx - kernel(&u, &v)).abs());
    }
    worst
}

#[test]
fn gaussian_features_approximate_the_gaussian_kernel() {
    let basis = sample_basis::<f64>(KernelFamily::Gaussian, 1.3, 4, 4000, 7).unwrap();
    let worst = max_kernel_error(&basis, |u, v| gaussian_kernel(u, v, 1.3), 200, 2.0, 99);
    assert!(worst < 0.05, "worst Gaussian kernel error {worst}");
}

#[test]
fn laplacian_features_approximate_the_laplacian_kernel() {
    let basis = sample_basis::<f64>(KernelFamily::Laplacian, 0.7, 3, 4000, 8).unwrap();
    let worst = max_kernel_error(&basis, |u, v| laplacian_kernel(u, v, 0.7), 200, 2.0, 100);
    assert!(worst < 0.05, "worst Laplacian kernel error {worst}");
}

#[test]
fn matern_features_approximate_the_matern_kernel() {
    let half = sample_basis::<f64>(KernelFamily::Matern { nu: 0.5 }, 1.1, 3, 4000, 9).unwrap();
    let worst = max_kernel_error(&half, |u, v| matern_half_kernel(u, v, 1.1), 200, 2.0, 101);
    assert!(worst < 0.05, "worst Matérn(1/2) kernel error {worst}");

    let three_halves =
        sample_basis::<f64>(KernelFamily::Matern { nu: 1.5 }, 0.9, 3, 4000, 10).unwrap();
    let worst = max_kernel_error(
        &three_halves,
        |u, v| matern_three_halves_kernel(u, v, 0.9),
        200,
        2.0,
        102,
    );
    assert!(worst < 0.05, "worst Matérn(3/2) kernel error {worst}");
}

/// In one dimension, Matérn(1/2) with lengthscale ℓ and the Laplacian
/// family with multiplier 1/ℓ name the same kernel, so their feature
/// approximations must agree up to Monte-Carlo error.
#[test]
fn matern_half_and_laplacian_agree_in_one_dimension() {
    let ell = 1.6;
    let matern = sample_basis::<f64>(KernelFamily::Matern { nu: 0.5 }, ell, 1, 6000, 11).unwrap();
    let laplace =
        sample_basis::<f64>(KernelFamily::Laplacian, 1.0 / ell, 1, 6000, 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..100 {
        let u = [rng.random_range(-2.0..2.0)];
        let v = [rng.random_range(-2.0..2.0)];
        let a = matern.feature_map(&u).unwrap().dot(&matern.feature_map(&v).unwrap());
        let b = laplace.feature_map(&u).unwrap().dot(&laplace.feature_map(&v).unwrap());
        assert!(
            (a - b).abs() < 0.08,
            "Matérn(1/2) {a} vs Laplacian {b} at u={:?} v={:?}",
            u,
            v
        );
    }
}

#[test]
fn gaussian_frequencies_have_inverse_lengthscale_spread() {
    let ell = 2.0;
    let basis = sample_basis::<f64>(KernelFamily::Gaussian, ell, 4, 10000, 14).unwrap();
    let freqs = basis.frequencies();
    let n = freqs.len() as f64;
    let var = freqs.iter().map(|w| w * w).sum::<f64>() / n;
    let expected = 1.0 / (ell * ell);
    assert!(
        (var - expected).abs() < 0.05 * expected,
        "per-dimension frequency variance {var}, expected {expected}"
    );
}

#[test]
fn laplacian_frequencies_have_cauchy_scale_median() {
    let ell = 0.8;
    let basis = sample_basis::<f64>(KernelFamily::Laplacian, ell, 4, 10000, 15).unwrap();
    let mut magnitudes: Vec<f64> = basis.frequencies().iter().map(|w| w.abs()).collect();
    magnitudes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = magnitudes[magnitudes.len() / 2];
    assert!(
        (median - ell).abs() < 0.1 * ell,
        "|ω| median {median}, expected the Cauchy scale {ell}"
    );
}

#[test]
fn feature_map_layout_is_cosine_block_then_sine_block() {
    let basis = sample_basis::<f64>(KernelFamily::Gaussian, 1.0, 3, 17, 21).unwrap();
    let u = [0.3, -1.2, 0.8];
    let phi = basis.feature_map(&u).unwrap();
    assert_eq!(phi.len(), 34);
    let inv_sqrt_b = 1.0 / (17f64).sqrt();
    for (b, row) in basis.frequencies().rows().into_iter().enumerate() {
        let t: f64 = row.iter().zip(u.iter()).map(|(w, x)| w * x).sum();
        assert!((phi[b] - t.cos() * inv_sqrt_b).abs() < 1e-12);
        assert!((phi[17 + b] - t.sin() * inv_sqrt_b).abs() < 1e-12);
    }
}

/// `φ(u)ᵀφ(v) = (1/B) Σ_b cos(ω_bᵀ(u - v))`: the identity that turns
/// translation-invariant kernels into plain inner products.
#[test]
fn inner_product_equals_mean_of_cosines_of_differences() {
    let basis = sample_basis::<f64>(KernelFamily::Gaussian, 0.9, 5, 256, 22).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..50 {
        let u = random_point(&mut rng, 5, 3.0);
        let v = random_point(&mut rng, 5, 3.0);
        let inner = basis
            .feature_map(&u)
            .unwrap()
            .dot(&basis.feature_map(&v).unwrap());
        let mean_cos = basis
            .frequencies()
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .zip(u.iter().zip(v.iter()))
                    .map(|(w, (a, b))| w * (a - b))
                    .sum::<f64>()
                    .cos()
            })
            .sum::<f64>()
            / 256.0;
        assert!(
            (inner - mean_cos).abs() < 1e-12,
            "inner product {inner} vs cosine mean {mean_cos}"
        );
    }
}

#[test]
fn sampling_is_deterministic_in_the_seed() {
    let a = sample_basis::<f64>(KernelFamily::Matern { nu: 2.5 }, 1.4, 6, 50, 77).unwrap();
    let b = sample_basis::<f64>(KernelFamily::Matern { nu: 2.5 }, 1.4, 6, 50, 77).unwrap();
    assert_eq!(a.frequencies(), b.frequencies());
    let c = sample_basis::<f64>(KernelFamily::Matern { nu: 2.5 }, 1.4, 6, 50, 78).unwrap();
    assert_ne!(a.frequencies(), c.frequencies());
}

#[test]
fn f32_features_also_have_unit_norm() {
    let basis = sample_basis::<f32>(KernelFamily::Gaussian, 1.0, 4, 300, 31).unwrap();
    let phi = basis.feature_map(&[0.5f32, -2.0, 0.25, 1.5]).unwrap();
    let norm = phi.dot(&phi).sqrt();
    assert!((norm - 1.0).abs() < 1e-5, "f32 feature norm {norm}");
}

#[test]
fn effective_weight_mixes_peers_linearly() {
    let own: Array1<f64> = array![1.0, -2.0, 0.5];
    let peer_a: Array1<f64> = array![0.5, 0.5, 0.5];
    let peer_b: Array1<f64> = array![-1.0, 0.0, 2.0];
    let out = effective_weight(
        own.view(),
        &[(0.25, peer_a.view()), (1.0, peer_b.view())],
    )
    .unwrap();
    assert_eq!(out, array![1.0 + 0.125 - 1.0, -2.0 + 0.125, 0.5 + 0.125 + 2.0]);

    let out = effective_weight(own.view(), &[]).unwrap();
    assert_eq!(out, own);
}

#[test]
fn effective_weight_matrix_mixes_columnwise() {
    let own: Array2<f64> = array![[1.0, 0.0], [0.0, 1.0]];
    let peer: Array2<f64> = array![[2.0, 2.0], [2.0, 2.0]];
    let out = effective_weight_matrix(own.view(), &[(0.5, peer.view())]).unwrap();
    assert_eq!(out, array![[2.0, 1.0], [1.0, 2.0]]);
}

#[test]
fn transfer_factors_outside_the_unit_interval_are_rejected() {
    let own: Array1<f64> = array![1.0];
    let peer: Array1<f64> = array![1.0];
    assert!(effective_weight(own.view(), &[(-0.1, peer.view())]).is_err());
    assert!(effective_weight(own.view(), &[(1.1, peer.view())]).is_err());
    assert!(effective_weight(own.view(), &[(f64::NAN, peer.view())]).is_err());
}

#[test]
fn mismatched_peer_lengths_are_rejected() {
    let own: Array1<f64> = array![1.0, 2.0];
    let peer: Array1<f64> = array![1.0];
    assert!(effective_weight(own.view(), &[(0.5, peer.view())]).is_err());
}

#[test]
fn degenerate_construction_arguments_are_rejected() {
    assert!(sample_basis::<f64>(KernelFamily::Gaussian, 0.0, 3, 10, 1).is_err());
    assert!(sample_basis::<f64>(KernelFamily::Gaussian, -1.0, 3, 10, 1).is_err());
    assert!(sample_basis::<f64>(KernelFamily::Gaussian, 1.0, 0, 10, 1).is_err());
    assert!(sample_basis::<f64>(KernelFamily::Gaussian, 1.0, 3, 0, 1).is_err());
    assert!(sample_basis::<f64>(KernelFamily::Matern { nu: 0.0 }, 1.0, 3, 10, 1).is_err());
    assert!(sample_basis::<f64>(KernelFamily::Matern { nu: -1.5 }, 1.0, 3, 10, 1).is_err());
}

#[test]
fn wire_blob_round_trips_bit_exactly() {
    for family in [
        KernelFamily::Gaussian,
        KernelFamily::Laplacian,
        KernelFamily::Matern { nu: 1.5 },
    ] {
        let basis = sample_basis::<f64>(family, 0.65, 4, 33, 5151).unwrap();
        let bytes = basis.to_wire_bytes();
        let (decoded, consumed) = FourierBasis::from_wire_bytes(&bytes).unwrap();
        assert_eq!(consumed, bytes.len());
        assert_eq!(decoded.family(), family);
        assert_eq!(decoded.lengthscale(), 0.65);
        assert_eq!(decoded.frequencies(), basis.frequencies());
        assert_eq!(decoded.seed(), 0, "a decoded basis does not carry the seed");

        // Trailing bytes belong to the caller.
        let mut padded = bytes.clone();
        padded.extend_from_slice(&[0xAB, 0xCD]);
        let (_, consumed) = FourierBasis::from_wire_bytes(&padded).unwrap();
        assert_eq!(consumed, bytes.len());
    }
}

#[test]
fn truncated_wire_blobs_are_rejected() {
    let basis = sample_basis::<f64>(KernelFamily::Gaussian, 1.0, 2, 5, 6).unwrap();
    let bytes = basis.to_wire_bytes();
    for cut in [0, 1, 8, bytes.len() - 1] {
        assert!(
            FourierBasis::from_wire_bytes(&bytes[..cut]).is_err(),
            "blob truncated to {cut} bytes must not decode"
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Every feature vector has unit Euclidean norm.
    #[test]
    fn feature_norm_is_always_one(
        seed in 0u64..1000,
        num_features in 1usize..64,
        coords in prop::collection::vec(-50.0f64..50.0, 1..6),
    ) {
        let basis = sample_basis::<f64>(
            KernelFamily::Gaussian,
            1.0,
            coords.len(),
            num_features,
            seed,
        ).unwrap();
        let phi = basis.feature_map(&coords).unwrap();
        prop_assert_eq!(phi.len(), 2 * num_features);
        let norm = phi.dot(&phi).sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-12, "norm {}", norm);
    }

    /// The kernel estimate of a point with itself is exactly 1 and any
    /// estimate lies in [-1, 1].
    #[test]
    fn kernel_estimates_stay_in_range(
        seed in 0u64..1000,
        coords in prop::collection::vec(-10.0f64..10.0, 2..5),
        offset in prop::collection::vec(-10.0f64..10.0, 2..5),
    ) {
        let dim = coords.len().min(offset.len());
        let basis = sample_basis::<f64>(KernelFamily::Laplacian, 0.5, dim, 32, seed).unwrap();
        let phi_u = basis.feature_map(&coords[..dim]).unwrap();
        prop_assert!((phi_u.dot(&phi_u) - 1.0).abs() < 1e-12);
        let phi_v = basis.feature_map(&offset[..dim]).unwrap();
        let k = phi_u.dot(&phi_v);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&k), "estimate {}", k);
    }

    /// Mixing is linear: the mixed head applied to φ equals the mixture
    /// of per-head applications.
    #[test]
    fn head_mixing_commutes_with_projection(
        own in prop::collection::vec(-3.0f64..3.0, 8),
        peer in prop::collection::vec(-3.0f64..3.0, 8),
        factor in 0.0f64..=1.0,
        point in prop::collection::vec(-2.0f64..2.0, 3),
    ) {
        let basis = sample_basis::<f64>(KernelFamily::Gaussian, 1.0, 3, 4, 3).unwrap();
        let phi = basis.feature_map(&point).unwrap();
        let own = Array1::from_vec(own);
        let peer = Array1::from_vec(peer);
        let mixed = effective_weight(own.view(), &[(factor, peer.view())]).unwrap();
        let direct = mixed.dot(&phi);
        let split = own.dot(&phi) + factor * peer.dot(&phi);
        prop_assert!((direct - split).abs() < 1e-12, "{} vs {}", direct, split);
    }
}
