//! Length-prefixed binary frame codec for the federation protocol.
//!
//! Every frame is `magic "CRFF" | type: u8 | payload length: u32 LE |
//! payload`. Integers are little-endian; floats are IEEE-754 f64
//! little-endian, so encode/decode round-trips are bit-exact. That
//! exactness is what makes the in-process and TCP transports
//! interchangeable down to the last bit of the trained model.
//!
//! Payload layouts:
//! - dedup: `source_id u32 | count u32 | count × 32-byte digest`
//! - dedup exclusions: `count u32 | count × 32-byte digest`
//! - broadcast: `round u64 | model blob`
//! - gradient: `source_id u32 | round u64 | gradient blob`
//! - effect request: `n_draws u32 | sampler u8 | chain_len u32 |
//!   burn_in u32 | seed u64 | model blob`
//! - effect summary: `source_id u32 | ate f64 | count u64`
//! - shutdown: empty
//!
//! The model blob carries hyperparameters, factor state, the three
//! feature bases (frequencies verbatim), and every source's heads; the
//! gradient blob is self-describing via a leading dimension header. No
//! frame has a field for raw records.

use ndarray::{Array1, Array2};

use crate::effects::{EffectSettings, SamplerKind};
use crate::model::{
    AdaptiveFactors, Bases, FactorMode, GlobalModel, Hyperparams, ObservationKind, SourceParams,
};
use crate::rff::{ByteCursor, FourierBasis};
use crate::training::GradientRecord;
use crate::{Error, Real, Result};

use super::{DedupMessage, GradientMessage, ModelBroadcast};

pub const MAGIC: [u8; 4] = *b"CRFF";

const TYPE_DEDUP: u8 = 1;
const TYPE_DEDUP_EXCLUSIONS: u8 = 2;
const TYPE_BROADCAST: u8 = 3;
const TYPE_GRADIENT: u8 = 4;
const TYPE_ATE_REQUEST: u8 = 5;
const TYPE_ATE_SUMMARY: u8 = 6;
const TYPE_SHUTDOWN: u8 = 7;

const MODEL_BLOB_VERSION: u32 = 1;

/// One protocol message.
#[derive(Clone, Debug, PartialEq)]
pub enum Frame {
    Dedup(DedupMessage),
    DedupExclusions(Vec<[u8; 32]>),
    Broadcast(ModelBroadcast),
    Gradient(GradientMessage),
    AteRequest {
        settings: EffectSettings,
        model: GlobalModel,
    },
    AteSummary {
        source_id: u32,
        ate: Real,
        count: u64,
    },
    Shutdown,
}

impl Frame {
    pub fn type_name(&self) -> &'static str {
        match self {
            Frame::Dedup(_) => "dedup",
            Frame::DedupExclusions(_) => "dedup_exclusions",
            Frame::Broadcast(_) => "broadcast",
            Frame::Gradient(_) => "gradient",
            Frame::AteRequest { .. } => "ate_request",
            Frame::AteSummary { .. } => "ate_summary",
            Frame::Shutdown => "shutdown",
        }
    }
}

/// Serializes one frame, header included.
pub fn encode_frame(frame: &Frame) -> Vec<u8> {
    let (frame_type, payload) = match frame {
        Frame::Dedup(msg) => {
            let mut p = Vec::with_capacity(8 + 32 * msg.digests.len());
            p.extend_from_slice(&msg.source_id.to_le_bytes());
            p.extend_from_slice(&(msg.digests.len() as u32).to_le_bytes());
            for digest in &msg.digests {
                p.extend_from_slice(digest);
            }
            (TYPE_DEDUP, p)
        }
        Frame::DedupExclusions(digests) => {
            let mut p = Vec::with_capacity(4 + 32 * digests.len());
            p.extend_from_slice(&(digests.len() as u32).to_le_bytes());
            for digest in digests {
                p.extend_from_slice(digest);
            }
            (TYPE_DEDUP_EXCLUSIONS, p)
        }
        Frame::Broadcast(bc) => {
            let mut p = Vec::new();
            p.extend_from_slice(&bc.round.to_le_bytes());
            encode_model(&bc.model, &mut p);
            (TYPE_BROADCAST, p)
        }
        Frame::Gradient(msg) => {
            let mut p = Vec::new();
            p.extend_from_slice(&msg.source_id.to_le_bytes());
            p.extend_from_slice(&msg.round.to_le_bytes());
            encode_gradient(&msg.grad, &mut p);
            (TYPE_GRADIENT, p)
        }
        Frame::AteRequest { settings, model } => {
            let mut p = Vec::new();
            p.extend_from_slice(&(settings.n_draws as u32).to_le_bytes());
            match settings.sampler {
                SamplerKind::Variational => {
                    p.push(0);
                    p.extend_from_slice(&0u32.to_le_bytes());
                    p.extend_from_slice(&0u32.to_le_bytes());
                }
                SamplerKind::Mh { chain_len, burn_in } => {
                    p.push(1);
                    p.extend_from_slice(&(chain_len as u32).to_le_bytes());
                    p.extend_from_slice(&(burn_in as u32).to_le_bytes());
                }
            }
            p.extend_from_slice(&settings.seed.to_le_bytes());
            encode_model(model, &mut p);
            (TYPE_ATE_REQUEST, p)
        }
        Frame::AteSummary {
            source_id,
            ate,
            count,
        } => {
            let mut p = Vec::with_capacity(20);
            p.extend_from_slice(&source_id.to_le_bytes());
            p.extend_from_slice(&ate.to_le_bytes());
            p.extend_from_slice(&count.to_le_bytes());
            (TYPE_ATE_SUMMARY, p)
        }
        Frame::Shutdown => (TYPE_SHUTDOWN, Vec::new()),
    };
    let mut out = Vec::with_capacity(9 + payload.len());
    out.extend_from_slice(&MAGIC);
    out.push(frame_type);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

/// Decodes exactly one frame; trailing bytes are a protocol error.
pub fn decode_frame(bytes: &[u8]) -> Result<Frame> {
    let mut cursor = ByteCursor::new(bytes);
    let magic = cursor.take_bytes(4)?;
    if magic != MAGIC {
        return Err(Error::Protocol(format!("bad frame magic {magic:02x?}")));
    }
    let frame_type = cursor.take_u8()?;
    let len = cursor.take_u32()? as usize;
    if cursor.remaining() != len {
        return Err(Error::Protocol(format!(
            "frame length {len} does not match remaining {} bytes",
            cursor.remaining()
        )));
    }
    let frame = match frame_type {
        TYPE_DEDUP => {
            let source_id = cursor.take_u32()?;
            let digests = decode_digests(&mut cursor)?;
            Frame::Dedup(DedupMessage { source_id, digests })
        }
        TYPE_DEDUP_EXCLUSIONS => Frame::DedupExclusions(decode_digests(&mut cursor)?),
        TYPE_BROADCAST => {
            let round = cursor.take_u64()?;
            let model = decode_model(&mut cursor)?;
            Frame::Broadcast(ModelBroadcast { round, model })
        }
        TYPE_GRADIENT => {
            let source_id = cursor.take_u32()?;
            let round = cursor.take_u64()?;
            let grad = decode_gradient(&mut cursor)?;
            Frame::Gradient(GradientMessage {
                source_id,
                round,
                grad,
            })
        }
        TYPE_ATE_REQUEST => {
            let n_draws = cursor.take_u32()? as usize;
            let sampler_tag = cursor.take_u8()?;
            let chain_len = cursor.take_u32()? as usize;
            let burn_in = cursor.take_u32()? as usize;
            let sampler = match sampler_tag {
                0 => SamplerKind::Variational,
                1 => SamplerKind::Mh { chain_len, burn_in },
                tag => return Err(Error::Protocol(format!("unknown sampler tag {tag}"))),
            };
            let seed = cursor.take_u64()?;
            let model = decode_model(&mut cursor)?;
            Frame::AteRequest {
                settings: EffectSettings {
                    n_draws,
                    sampler,
                    seed,
                },
                model,
            }
        }
        TYPE_ATE_SUMMARY => Frame::AteSummary {
            source_id: cursor.take_u32()?,
            ate: cursor.take_f64()?,
            count: cursor.take_u64()?,
        },
        TYPE_SHUTDOWN => Frame::Shutdown,
        tag => return Err(Error::Protocol(format!("unknown frame type {tag}"))),
    };
    if cursor.remaining() != 0 {
        return Err(Error::Protocol(format!(
            "{} trailing bytes after {} frame",
            cursor.remaining(),
            frame.type_name()
        )));
    }
    Ok(frame)
}

fn decode_digests(cursor: &mut ByteCursor<'_>) -> Result<Vec<[u8; 32]>> {
    let count = cursor.take_u32()? as usize;
    let mut digests = Vec::with_capacity(count);
    for _ in 0..count {
        let bytes = cursor.take_bytes(32)?;
        digests.push(bytes.try_into().expect("32 bytes"));
    }
    Ok(digests)
}

fn push_f64s<'a>(out: &mut Vec<u8>, values: impl IntoIterator<Item = &'a Real>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn take_vec(cursor: &mut ByteCursor<'_>, len: usize) -> Result<Array1<Real>> {
    let mut v = Vec::with_capacity(len);
    for _ in 0..len {
        v.push(cursor.take_f64()?);
    }
    Ok(Array1::from_vec(v))
}

fn take_mat(cursor: &mut ByteCursor<'_>, rows: usize, cols: usize) -> Result<Array2<Real>> {
    let mut v = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        v.push(cursor.take_f64()?);
    }
    Array2::from_shape_vec((rows, cols), v).map_err(|_| Error::Protocol("matrix shape".into()))
}

fn encode_params(params: &SourceParams, out: &mut Vec<u8>) {
    for (_, field) in params.vec_fields() {
        push_f64s(out, field.iter());
    }
    for (_, field) in params.mat_fields() {
        push_f64s(out, field.iter());
    }
}

fn decode_params(
    cursor: &mut ByteCursor<'_>,
    dims: &crate::model::ModelDims,
) -> Result<SourceParams> {
    Ok(SourceParams {
        theta_y0: take_vec(cursor, dims.phi_z)?,
        theta_y1: take_vec(cursor, dims.phi_z)?,
        theta_w: take_vec(cursor, dims.phi_z)?,
        psi: take_vec(cursor, dims.phi_x)?,
        beta0: take_vec(cursor, dims.phi_x)?,
        beta1: take_vec(cursor, dims.phi_x)?,
        theta_x: take_mat(cursor, dims.phi_z, dims.d_x)?,
        theta_q0: take_mat(cursor, dims.phi_xy, dims.d_z)?,
        theta_q1: take_mat(cursor, dims.phi_xy, dims.d_z)?,
    })
}

fn observation_byte(kind: ObservationKind) -> u8 {
    match kind {
        ObservationKind::Continuous => 0,
        ObservationKind::Binary => 1,
    }
}

fn observation_from_byte(byte: u8) -> Result<ObservationKind> {
    match byte {
        0 => Ok(ObservationKind::Continuous),
        1 => Ok(ObservationKind::Binary),
        tag => Err(Error::Protocol(format!("unknown observation tag {tag}"))),
    }
}

/// Appends the model blob: version, source count, hyperparameters,
/// factor state, the three basis blobs, then per-source heads.
pub fn encode_model(model: &GlobalModel, out: &mut Vec<u8>) {
    let hyper = &model.hyper;
    out.extend_from_slice(&MODEL_BLOB_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.num_sources() as u32).to_le_bytes());
    for v in [hyper.sigma_z, hyper.sigma_y, hyper.sigma_x, hyper.sigma_q] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(hyper.d_z as u32).to_le_bytes());
    out.extend_from_slice(&(hyper.m_samples as u32).to_le_bytes());
    for v in [hyper.zeta, hyper.zeta_w, hyper.zeta_y] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(observation_byte(hyper.y_mode));
    out.extend_from_slice(&(hyper.d_x() as u32).to_le_bytes());
    for &mode in &hyper.x_modes {
        out.push(observation_byte(mode));
    }
    match model.factors.mode() {
        FactorMode::Learned => out.push(0),
        FactorMode::Fixed(value) => {
            out.push(1);
            out.extend_from_slice(&value.to_le_bytes());
        }
    }
    push_f64s(out, model.factors.lambda_u.iter());
    push_f64s(out, model.factors.gamma_u.iter());
    push_f64s(out, model.factors.eta_u.iter());
    out.extend_from_slice(&model.bases.z.to_wire_bytes());
    out.extend_from_slice(&model.bases.xy.to_wire_bytes());
    out.extend_from_slice(&model.bases.x.to_wire_bytes());
    for params in &model.params {
        encode_params(params, out);
    }
}

/// Decodes a model blob written by [`encode_model`]; round-trips every
/// float bit-exactly. Decoded bases report seed 0.
pub(crate) fn decode_model(cursor: &mut ByteCursor<'_>) -> Result<GlobalModel> {
    let version = cursor.take_u32()?;
    if version != MODEL_BLOB_VERSION {
        return Err(Error::Protocol(format!("unsupported model blob version {version}")));
    }
    let m = cursor.take_u32()? as usize;
    let sigma_z = cursor.take_f64()?;
    let sigma_y = cursor.take_f64()?;
    let sigma_x = cursor.take_f64()?;
    let sigma_q = cursor.take_f64()?;
    let d_z = cursor.take_u32()? as usize;
    let m_samples = cursor.take_u32()? as usize;
    let zeta = cursor.take_f64()?;
    let zeta_w = cursor.take_f64()?;
    let zeta_y = cursor.take_f64()?;
    let y_mode = observation_from_byte(cursor.take_u8()?)?;
    let d_x = cursor.take_u32()? as usize;
    let mut x_modes = Vec::with_capacity(d_x);
    for _ in 0..d_x {
        x_modes.push(observation_from_byte(cursor.take_u8()?)?);
    }
    let hyper = Hyperparams {
        sigma_z,
        sigma_y,
        sigma_x,
        sigma_q,
        d_z,
        m_samples,
        zeta,
        zeta_w,
        zeta_y,
        x_modes,
        y_mode,
    };
    let mode = match cursor.take_u8()? {
        0 => FactorMode::Learned,
        1 => FactorMode::Fixed(cursor.take_f64()?),
        tag => return Err(Error::Protocol(format!("unknown factor mode tag {tag}"))),
    };
    let lambda_u = take_mat(cursor, m, m)?;
    let gamma_u = take_mat(cursor, m, m)?;
    let eta_u = take_mat(cursor, m, m)?;
    let factors = AdaptiveFactors::from_raw(mode, lambda_u, gamma_u, eta_u)?;

    let mut take_basis = || -> Result<FourierBasis<Real>> {
        let (basis, consumed) = FourierBasis::from_wire_bytes(cursor.rest())?;
        cursor.advance(consumed)?;
        Ok(basis)
    };
    let z = take_basis()?;
    let xy = take_basis()?;
    let x = take_basis()?;
    let bases = Bases { z, xy, x };

    let dims = crate::model::ModelDims {
        phi_z: bases.z.output_dim(),
        phi_xy: bases.xy.output_dim(),
        phi_x: bases.x.output_dim(),
        d_x,
        d_z,
    };
    let mut params = Vec::with_capacity(m);
    for _ in 0..m {
        params.push(decode_params(cursor, &dims)?);
    }
    let model = GlobalModel {
        bases,
        params,
        factors,
        hyper,
    };
    model.validate()?;
    Ok(model)
}

/// Appends the gradient blob: a dimension header, record count, every
/// source's tensors, then the three unconstrained factor matrices.
pub fn encode_gradient(grad: &GradientRecord, out: &mut Vec<u8>) {
    let m = grad.num_sources();
    let (phi_z, phi_x, d_x) = match grad.params.first() {
        Some(p) => (p.theta_y0.len(), p.psi.len(), p.theta_x.ncols()),
        None => (0, 0, 0),
    };
    let (phi_xy, d_z) = match grad.params.first() {
        Some(p) => (p.theta_q0.nrows(), p.theta_q0.ncols()),
        None => (0, 0),
    };
    out.extend_from_slice(&(m as u32).to_le_bytes());
    out.extend_from_slice(&(phi_z as u32).to_le_bytes());
    out.extend_from_slice(&(phi_xy as u32).to_le_bytes());
    out.extend_from_slice(&(phi_x as u32).to_le_bytes());
    out.extend_from_slice(&(d_x as u32).to_le_bytes());
    out.extend_from_slice(&(d_z as u32).to_le_bytes());
    out.extend_from_slice(&grad.n_s.to_le_bytes());
    for params in &grad.params {
        encode_params(params, out);
    }
    push_f64s(out, grad.lambda_u.iter());
    push_f64s(out, grad.gamma_u.iter());
    push_f64s(out, grad.eta_u.iter());
}

/// Decodes a gradient blob written by [`encode_gradient`].
pub(crate) fn decode_gradient(cursor: &mut ByteCursor<'_>) -> Result<GradientRecord> {
    let m = cursor.take_u32()? as usize;
    let dims = crate::model::ModelDims {
        phi_z: cursor.take_u32()? as usize,
        phi_xy: cursor.take_u32()? as usize,
        phi_x: cursor.take_u32()? as usize,
        d_x: cursor.take_u32()? as usize,
        d_z: cursor.take_u32()? as usize,
    };
    let n_s = cursor.take_u64()?;
    let mut params = Vec::with_capacity(m);
    for _ in 0..m {
        params.push(decode_params(cursor, &dims)?);
    }
    let lambda_u = take_mat(cursor, m, m)?;
    let gamma_u = take_mat(cursor, m, m)?;
    let eta_u = take_mat(cursor, m, m)?;
    Ok(GradientRecord {
        params,
        lambda_u,
        gamma_u,
        eta_u,
        n_s,
    })
}
