//! Random Fourier feature maps for translation-invariant kernels.
//!
//! Bochner's theorem writes every continuous translation-invariant kernel
//! `k(u, u') = k(u - u')` as the Fourier transform of a nonnegative
//! spectral density `s(ω)`. Drawing `B` frequencies `ω_b ~ s` i.i.d. and
//! stacking paired cosine and sine coordinates,
//!
//! ```text
//! φ(u) = B^{-1/2} [cos(ω_1ᵀu), .., cos(ω_Bᵀu), sin(ω_1ᵀu), .., sin(ω_Bᵀu)]
//! ```
//!
//! gives an unbiased Monte-Carlo estimate `φ(u)ᵀφ(u') ≈ k(u, u')` with
//! error `O(B^{-1/2})`, by the trigonometric identity
//! `cos(a)cos(b) + sin(a)sin(b) = cos(a - b)`. No random phase offsets are
//! used; the paired layout keeps `‖φ(u)‖₂ = 1` exactly for every input,
//! since the squared coordinates sum to `B · (1/B)`.
//!
//! Spectral laws implemented here:
//!
//! | kernel                                   | per-frequency law                          |
//! |------------------------------------------|--------------------------------------------|
//! | Gaussian   `exp(-‖τ‖² / (2ℓ²))`          | `N(0, ℓ⁻² I_d)`                            |
//! | Laplacian  `exp(-ℓ ‖τ‖₁)`                | independent `Cauchy(0, ℓ)` per dimension   |
//! | Matérn(ν)  with lengthscale `ℓ`          | `(1/ℓ) · z · √(2ν / u)`, `z ~ N(0, I_d)`,  |
//! |                                          | `u ~ χ²_{2ν}` (multivariate t, 2ν dof)     |
//!
//! The Laplacian law follows the density kernel `ℓ / (ℓ² + ω²)`; its
//! normalization constant does not affect sampling. Note the Laplacian
//! lengthscale multiplies the distance, so larger `ℓ` means faster decay.
//!
//! A basis is frozen at construction: the same `(family, ℓ, d, B, seed)`
//! always regenerates bit-identical frequencies, and all federation peers
//! share one basis verbatim so that their feature maps agree exactly.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Cauchy, ChiSquared, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Scalar};

/// Kernel family of a [`FourierBasis`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Gaussian,
    Laplacian,
    /// Matérn kernel of order `nu > 0`.
    Matern { nu: f64 },
}

/// Frozen random frequencies defining one feature map `φ`.
///
/// Invariants, enforced at construction:
/// - `frequencies` has exactly `num_features` rows of `input_dim` columns;
/// - regenerating with the same `(family, lengthscale, input_dim,
///   num_features, seed)` yields bit-identical frequencies;
/// - [`FourierBasis::feature_map`] output has dimension
///   `2 * num_features` and unit Euclidean norm (within 1e-12).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierBasis<T: Scalar> {
    family: KernelFamily,
    lengthscale: f64,
    input_dim: usize,
    num_features: usize,
    seed: u64,
    frequencies: Array2<T>,
}

/// Draws a fresh basis whose frequencies follow the spectral density of
/// the named kernel.
///
/// Frequencies are sampled in `f64` row by row (for Matérn: one χ² draw,
/// then the row's normals) and converted to `T`, so a given seed produces
/// the same basis on every platform.
pub fn sample_basis<T: Scalar>(
    family: KernelFamily,
    lengthscale: f64,
    input_dim: usize,
    num_features: usize,
    seed: u64,
) -> Result<FourierBasis<T>> {
    if !(lengthscale > 0.0) || !lengthscale.is_finite() {
        return Err(Error::parameter(
            "lengthscale",
            lengthscale,
            "must be a positive finite real",
        ));
    }
    if input_dim == 0 {
        return Err(Error::parameter("input_dim", input_dim, "must be at least 1"));
    }
    if num_features == 0 {
        return Err(Error::parameter(
            "num_features",
            num_features,
            "must be at least 1",
        ));
    }
    if let KernelFamily::Matern { nu } = family {
        if !(nu > 0.0) || !nu.is_finite() {
            return Err(Error::parameter("nu", nu, "must be a positive finite real"));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<f64> = Vec::with_capacity(num_features * input_dim);
    match family {
        KernelFamily::Gaussian => {
            let per_dim = Normal::new(0.0, 1.0 / lengthscale).expect("positive std");
            for _ in 0..num_features * input_dim {
                rows.push(per_dim.sample(&mut rng));
            }
        }
        KernelFamily::Laplacian => {
            let per_dim = Cauchy::new(0.0, lengthscale).expect("positive scale");
            for _ in 0..num_features * input_dim {
                rows.push(per_dim.sample(&mut rng));
            }
        }
        KernelFamily::Matern { nu } => {
            let mixing = ChiSquared::new(2.0 * nu).expect("positive dof");
            let unit = Normal::new(0.0, 1.0).expect("positive std");
            for _ in 0..num_features {
                let u: f64 = mixing.sample(&mut rng);
                let row_scale = (2.0 * nu / u).sqrt() / lengthscale;
                for _ in 0..input_dim {
                    let z: f64 = unit.sample(&mut rng);
                    rows.push(z * row_scale);
                }
            }
        }
    }

    let frequencies = Array2::from_shape_vec(
        (num_features, input_dim),
        rows.into_iter().map(scalar::<T>).collect(),
    )
    .expect("row count matches shape");

    Ok(FourierBasis {
        family,
        lengthscale,
        input_dim,
        num_features,
        seed,
        frequencies,
    })
}

impl<T: Scalar> FourierBasis<T> {
    /// Builds a basis from explicit frequencies (one row per feature).
    ///
    /// Used when a basis arrives over the wire with its frequencies
    /// verbatim; such a basis reports `seed = 0`.
    pub fn from_frequencies(
        family: KernelFamily,
        lengthscale: f64,
        frequencies: Array2<T>,
        seed: u64,
    ) -> Result<Self> {
        if !(lengthscale > 0.0) || !lengthscale.is_finite() {
            return Err(Error::parameter(
                "lengthscale",
                lengthscale,
                "must be a positive finite real",
            ));
        }
        let (num_features, input_dim) = frequencies.dim();
        if num_features == 0 || input_dim == 0 {
            return Err(Error::parameter(
                "frequencies",
                format!("{num_features}x{input_dim}"),
                "must have at least one row and one column",
            ));
        }
        Ok(FourierBasis {
            family,
            lengthscale,
            input_dim,
            num_features,
            seed,
            frequencies,
        })
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn lengthscale(&self) -> f64 {
        self.lengthscale
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Number of frequencies `B`; the feature map has dimension `2B`.
    pub fn num_features(&self) -> usize {
        self.num_features
    }

    /// Dimension of [`FourierBasis::feature_map`] output, `2B`.
    pub fn output_dim(&self) -> usize {
        2 * self.num_features
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn frequencies(&self) -> ArrayView2<'_, T> {
        self.frequencies.view()
    }

    /// Evaluates `φ(u)`: coordinates `0..B` are `B^{-1/2} cos(ω_bᵀu)`,
    /// coordinates `B..2B` are `B^{-1/2} sin(ω_bᵀu)`.
    pub fn feature_map(&self, u: &[T]) -> Result<Array1<T>> {
        if u.len() != self.input_dim {
            return Err(Error::shape("feature_map input", self.input_dim, u.len()));
        }
        let b = self.num_features;
        let inv_sqrt_b = T::one() / scalar::<T>(b as f64).sqrt();
        let mut out = Array1::zeros(2 * b);
        for (row_idx, row) in self.frequencies.rows().into_iter().enumerate() {
            let mut t = T::zero();
            for (w, x) in row.iter().zip(u.iter()) {
                t = t + *w * *x;
            }
            out[row_idx] = t.cos() * inv_sqrt_b;
            out[b + row_idx] = t.sin() * inv_sqrt_b;
        }
        Ok(out)
    }
}

/// Combines one source's head weights with transfer-weighted peer heads:
/// returns `own + Σ_v λ_v · other_v`.
///
/// A dot product of the result with `φ(u)` realizes the adaptive
/// cross-source prediction head. Every `λ_v` must lie in `[0, 1]`; `λ = 0`
/// blocks transfer from that peer and `λ = 1` pools it fully.
pub fn effective_weight<T: Scalar>(
    own: ArrayView1<'_, T>,
    others: &[(T, ArrayView1<'_, T>)],
) -> Result<Array1<T>> {
    let mut out = own.to_owned();
    for (factor, weights) in others {
        check_factor(*factor)?;
        if weights.len() != own.len() {
            return Err(Error::shape("effective_weight", own.len(), weights.len()));
        }
        out.zip_mut_with(weights, |acc, w| *acc = *acc + *factor * *w);
    }
    Ok(out)
}

/// Column-wise [`effective_weight`] for matrix-valued heads.
pub fn effective_weight_matrix<T: Scalar>(
    own: ArrayView2<'_, T>,
    others: &[(T, ArrayView2<'_, T>)],
) -> Result<Array2<T>> {
    let mut out = own.to_owned();
    for (factor, weights) in others {
        check_factor(*factor)?;
        if weights.dim() != own.dim() {
            return Err(Error::shape(
                "effective_weight_matrix",
                own.len(),
                weights.len(),
            ));
        }
        out.zip_mut_with(weights, |acc, w| *acc = *acc + *factor * *w);
    }
    Ok(out)
}

fn check_factor<T: Scalar>(factor: T) -> Result<()> {
    if factor < T::zero() || factor > T::one() || factor.is_nan() {
        return Err(Error::parameter(
            "transfer factor",
            factor,
            "must lie in [0, 1]",
        ));
    }
    Ok(())
}

/// Family tag bytes of the wire blob.
const TAG_GAUSSIAN: u8 = 0;
const TAG_LAPLACIAN: u8 = 1;
const TAG_MATERN: u8 = 2;

impl FourierBasis<f64> {
    /// Serializes the basis for the model broadcast: family tag (1 byte,
    /// with an 8-byte ν following a Matérn tag), ℓ as an 8-byte IEEE-754
    /// little-endian float, `d` and `B` as 4-byte unsigned little-endian
    /// integers, then the `B · d` frequencies row-major as 8-byte floats.
    pub fn to_wire_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(1 + 8 + 4 + 4 + 8 * self.frequencies.len());
        match self.family {
            KernelFamily::Gaussian => out.push(TAG_GAUSSIAN),
            KernelFamily::Laplacian => out.push(TAG_LAPLACIAN),
            KernelFamily::Matern { nu } => {
                out.push(TAG_MATERN);
                out.extend_from_slice(&nu.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.lengthscale.to_le_bytes());
        out.extend_from_slice(&(self.input_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_features as u32).to_le_bytes());
        for w in self.frequencies.iter() {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    /// Decodes a blob written by [`FourierBasis::to_wire_bytes`], returning
    /// the basis and the number of bytes consumed. Frequencies round-trip
    /// bit-exactly; the decoded basis carries `seed = 0`.
    pub fn from_wire_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut cursor = ByteCursor::new(bytes);
        let family = match cursor.take_u8()? {
            TAG_GAUSSIAN => KernelFamily::Gaussian,
            TAG_LAPLACIAN => KernelFamily::Laplacian,
            TAG_MATERN => KernelFamily::Matern {
                nu: cursor.take_f64()?,
            },
            tag => {
                return Err(Error::Protocol(format!(
                    "unknown kernel family tag {tag}"
                )))
            }
        };
        let lengthscale = cursor.take_f64()?;
        let input_dim = cursor.take_u32()? as usize;
        let num_features = cursor.take_u32()? as usize;
        let mut rows = Vec::with_capacity(num_features * input_dim);
        for _ in 0..num_features * input_dim {
            rows.push(cursor.take_f64()?);
        }
        let frequencies = Array2::from_shape_vec((num_features, input_dim), rows)
            .map_err(|_| Error::Protocol("basis blob shape".into()))?;
        let basis = FourierBasis::from_frequencies(family, lengthscale, frequencies, 0)?;
        Ok((basis, cursor.consumed()))
    }
}

/// Bounds-checked little-endian reader shared by the wire decoders.
pub(crate) struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteCursor { bytes, pos: 0 }
    }

    pub(crate) fn consumed(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Protocol(format!(
                "truncated payload: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    pub(crate) fn take_u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn take_u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn take_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn take_f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn take_bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    /// Unconsumed tail, for decoders that track their own consumption.
    pub(crate) fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }

    pub(crate) fn advance(&mut self, n: usize) -> Result<()> {
        self.take(n).map(|_| ())
    }
}

fn scalar<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("f64 converts into Scalar")
}
