//! The parameter-server protocol: a dedup pre-round, synchronous
//! gradient rounds, and count-weighted effect aggregation.
//!
//! One session runs a server against `m` source workers. Workers first
//! exchange unit-identifier digests so records present in more than one
//! source are dropped everywhere before training. Each round the server
//! broadcasts the model, every worker answers with its local gradient,
//! and the server sums the gradients in source order and takes one
//! descent step. Raw records never enter any frame; only digests,
//! parameters, gradients, and effect summaries cross the boundary.
//!
//! Determinism is end to end: reparametrization noise comes from
//! per-(source, round) seed streams, gradient summation is sorted by
//! source id, and the codec round-trips floats bit-exactly. A federated
//! run therefore reproduces [`centralized_run`] exactly, over either
//! transport.

pub mod transport;
pub mod wire;

use std::collections::{HashMap, HashSet};
use std::net::SocketAddr;
use std::sync::Mutex;
use std::time::Duration;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{mix_seed, SourceDataset};
use crate::effects::{global_ate, local_ate, EffectSettings};
use crate::model::{
    AdaptiveFactors, Bases, FactorMode, GlobalModel, Hyperparams,
};
use crate::rff::{sample_basis, KernelFamily};
use crate::training::{
    apply_update, compute_features, local_gradient_prepared, local_losses_prepared, GradientRecord,
    LossBreakdown, NoiseDraws, Sgd, SourceFeatures, SourceLoss,
};
use crate::{Error, Real, Result};

pub use transport::{in_process_pair, Channel, InProcessChannel, TcpChannel};
pub use wire::{decode_frame, encode_frame, Frame};

/// Digest exchange opening a session: one per source.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DedupMessage {
    pub source_id: u32,
    /// SHA-256 digests of the source's unit identifiers; never the
    /// identifiers themselves.
    pub digests: Vec<[u8; 32]>,
}

/// The server's per-round model snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBroadcast {
    pub round: u64,
    pub model: GlobalModel,
}

/// One source's gradient reply for one round.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMessage {
    pub source_id: u32,
    pub round: u64,
    pub grad: GradientRecord,
}

/// SHA-256 digest of a unit identifier.
pub fn unit_digest(id: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(id.as_bytes());
    hasher.finalize().into()
}

/// Computes every source's exclusion set: a digest is excluded
/// everywhere iff at least two distinct sources reported it.
pub fn dedup_round(messages: &[DedupMessage]) -> Result<Vec<HashSet<[u8; 32]>>> {
    let mut seen = HashSet::new();
    for msg in messages {
        if !seen.insert(msg.source_id) {
            return Err(Error::Protocol(format!(
                "duplicate source id {} in dedup round",
                msg.source_id
            )));
        }
    }
    let mut owners: HashMap<[u8; 32], u32> = HashMap::new();
    for msg in messages {
        let distinct: HashSet<&[u8; 32]> = msg.digests.iter().collect();
        for digest in distinct {
            *owners.entry(*digest).or_insert(0) += 1;
        }
    }
    let shared: HashSet<[u8; 32]> = owners
        .into_iter()
        .filter_map(|(digest, holders)| (holders >= 2).then_some(digest))
        .collect();
    Ok(vec![shared; messages.len()])
}

/// Which frame carrier a session runs over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransportKind {
    /// Queue-backed channels inside one process.
    InProcess,
    /// Loopback TCP; the server binds `listen` and workers connect to it.
    Tcp { listen: SocketAddr },
}

/// Shared feature-basis configuration of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisSettings {
    pub family: KernelFamily,
    /// Frequencies per basis, `B`.
    pub num_features: usize,
    pub lengthscale_z: f64,
    pub lengthscale_xy: f64,
    pub lengthscale_x: f64,
}

/// Everything a training session needs beyond the datasets.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub rounds: u64,
    pub learning_rate: Real,
    pub momentum: Real,
    pub seed: u64,
    /// Head initialization scale; heads draw from `N(0, init_scale²)`.
    pub init_scale: Real,
    pub factor_mode: FactorMode,
    /// Unconstrained initial value of learned factors (0 reads as 0.5).
    pub factor_init_u: Real,
    pub hyper: Hyperparams,
    pub basis: BasisSettings,
    /// Server-side wait per protocol step; `None` waits indefinitely.
    pub round_timeout: Option<Duration>,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::parameter(
                "learning_rate",
                self.learning_rate,
                "must be positive and finite",
            ));
        }
        if !(0.0..=0.99).contains(&self.momentum) {
            return Err(Error::parameter("momentum", self.momentum, "must lie in [0, 0.99]"));
        }
        if !(self.init_scale >= 0.0) || !self.init_scale.is_finite() {
            return Err(Error::parameter(
                "init_scale",
                self.init_scale,
                "must be nonnegative and finite",
            ));
        }
        if !self.factor_init_u.is_finite() {
            return Err(Error::parameter(
                "factor_init",
                self.factor_init_u,
                "must be finite",
            ));
        }
        if let FactorMode::Fixed(value) = self.factor_mode {
            if !(0.0..=1.0).contains(&value) || value.is_nan() {
                return Err(Error::parameter("factor value", value, "must lie in [0, 1]"));
            }
        }
        self.hyper.validate()
    }
}

/// A finished training session.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: GlobalModel,
    /// One entry per round, sources ascending within each.
    pub history: Vec<LossBreakdown>,
    /// Records each source lost to dedup.
    pub dropped_records: Vec<usize>,
}

/// Builds the initial global model for a run: three fresh bases and
/// randomly initialized per-source heads, all derived from the run seed.
pub fn build_model(settings: &TrainSettings, num_sources: usize) -> Result<GlobalModel> {
    settings.validate()?;
    let hyper = &settings.hyper;
    let basis = &settings.basis;
    let bases = Bases {
        z: sample_basis(
            basis.family,
            basis.lengthscale_z,
            hyper.d_z,
            basis.num_features,
            mix_seed(settings.seed, 11),
        )?,
        xy: sample_basis(
            basis.family,
            basis.lengthscale_xy,
            hyper.d_x() + 1,
            basis.num_features,
            mix_seed(settings.seed, 12),
        )?,
        x: sample_basis(
            basis.family,
            basis.lengthscale_x,
            hyper.d_x(),
            basis.num_features,
            mix_seed(settings.seed, 13),
        )?,
    };
    let mut model = GlobalModel::init(
        bases,
        num_sources,
        hyper.clone(),
        mix_seed(settings.seed, 14),
        settings.init_scale,
        settings.factor_init_u,
    )?;
    if let FactorMode::Fixed(value) = settings.factor_mode {
        model.factors = AdaptiveFactors::fixed(num_sources, value)?;
    }
    Ok(model)
}

/// One synchronous aggregation step: checks the batch is exactly one
/// current-round message per source, sums gradients in source order,
/// applies the update, and emits the next round's broadcast.
pub fn server_round(
    model: &mut GlobalModel,
    opt: &mut Sgd,
    learning_rate: Real,
    round: u64,
    mut messages: Vec<GradientMessage>,
) -> Result<ModelBroadcast> {
    let m = model.num_sources();
    if messages.len() != m {
        return Err(Error::Protocol(format!(
            "round {round}: expected {m} gradient messages, got {}",
            messages.len()
        )));
    }
    messages.sort_by_key(|msg| msg.source_id);
    let dims = model.dims();
    for (idx, msg) in messages.iter().enumerate() {
        if msg.source_id as usize != idx {
            return Err(Error::Protocol(format!(
                "round {round}: gradient batch does not cover every source exactly once"
            )));
        }
        if msg.round != round {
            return Err(Error::Protocol(format!(
                "round {round}: source {} reported round {}",
                msg.source_id, msg.round
            )));
        }
        if msg.grad.num_sources() != m
            || !msg.grad.params.iter().all(|p| p.matches(&dims))
            || msg.grad.lambda_u.dim() != (m, m)
        {
            return Err(Error::Protocol(format!(
                "round {round}: gradient shapes from source {} do not match the model",
                msg.source_id
            )));
        }
    }
    let mut total = GradientRecord::zeros(model);
    for msg in &messages {
        total.add_assign(&msg.grad)?;
    }
    apply_update(model, &total, opt, learning_rate)?;
    Ok(ModelBroadcast {
        round: round + 1,
        model: model.clone(),
    })
}

/// One source's reply to a broadcast: noise drawn from the
/// per-(source, round) stream, then the local gradient of the decoded
/// model. A broadcast older than `expected_round` is a stale-round
/// protocol error asking for resync.
pub fn source_round(
    broadcast: &ModelBroadcast,
    source_id: usize,
    data: &SourceDataset,
    master_seed: u64,
    expected_round: u64,
) -> Result<GradientMessage> {
    let feats = compute_features(data, &broadcast.model)?;
    source_round_prepared(broadcast, source_id, data, &feats, master_seed, expected_round)
}

/// [`source_round`] over precomputed feature maps.
pub fn source_round_prepared(
    broadcast: &ModelBroadcast,
    source_id: usize,
    data: &SourceDataset,
    feats: &SourceFeatures,
    master_seed: u64,
    expected_round: u64,
) -> Result<GradientMessage> {
    if broadcast.round != expected_round {
        return Err(Error::Protocol(format!(
            "source {source_id}: stale round {} (expected {expected_round}); resync required",
            broadcast.round
        )));
    }
    let hyper = &broadcast.model.hyper;
    let noise = NoiseDraws::generate(
        master_seed,
        source_id as u64,
        broadcast.round,
        data.n(),
        hyper.m_samples,
        hyper.d_z,
    );
    let grad = local_gradient_prepared(source_id, data, feats, &broadcast.model, &noise)?;
    Ok(GradientMessage {
        source_id: source_id as u32,
        round: broadcast.round,
        grad,
    })
}

fn check_datasets(settings: &TrainSettings, datasets: &[SourceDataset]) -> Result<()> {
    if datasets.is_empty() {
        return Err(Error::parameter("datasets", 0usize, "need at least one source"));
    }
    for data in datasets {
        data.validate()?;
        if data.n() > 0 && data.d_x() != settings.hyper.d_x() {
            return Err(Error::shape("dataset covariates", settings.hyper.d_x(), data.d_x()));
        }
    }
    Ok(())
}

/// Server-side and worker-side channel endpoints, index-aligned by source.
type ChannelPair = (Vec<Box<dyn Channel>>, Vec<Box<dyn Channel>>);

fn make_channels(m: usize, transport: &TransportKind) -> Result<ChannelPair> {
    match transport {
        TransportKind::InProcess => {
            let mut server_ends: Vec<Box<dyn Channel>> = Vec::with_capacity(m);
            let mut worker_ends: Vec<Box<dyn Channel>> = Vec::with_capacity(m);
            for _ in 0..m {
                let (server, worker) = in_process_pair();
                server_ends.push(Box::new(server));
                worker_ends.push(Box::new(worker));
            }
            Ok((server_ends, worker_ends))
        }
        TransportKind::Tcp { listen } => {
            let listener = std::net::TcpListener::bind(listen)?;
            let addr = listener.local_addr()?;
            let mut worker_ends: Vec<Box<dyn Channel>> = Vec::with_capacity(m);
            for _ in 0..m {
                let chan = TcpChannel::connect(addr)?;
                worker_ends.push(Box::new(chan));
            }
            let mut server_ends: Vec<Box<dyn Channel>> = Vec::with_capacity(m);
            for _ in 0..m {
                let (stream, _) = listener.accept()?;
                stream.set_nodelay(true)?;
                server_ends.push(Box::new(TcpChannel::new(stream)));
            }
            Ok((server_ends, worker_ends))
        }
    }
}

fn recv_frame<C: Channel + ?Sized>(chan: &mut C, timeout: Option<Duration>) -> Result<Frame> {
    decode_frame(&chan.recv(timeout)?)
}

fn at_round(round: u64, error: Error) -> Error {
    match error {
        e @ Error::Transport { .. } => e,
        e => Error::Transport {
            round,
            reason: e.to_string(),
        },
    }
}

/// Runs one full training session over the chosen transport: the dedup
/// pre-round, then `rounds` synchronous gradient rounds. Workers run on
/// their own threads regardless of transport; the protocol itself is
/// synchronous, so the outcome is deterministic in the seed and equals
/// [`centralized_run`] on the same inputs.
pub fn run_training(
    settings: &TrainSettings,
    datasets: &[SourceDataset],
    transport: &TransportKind,
) -> Result<TrainOutcome> {
    settings.validate()?;
    check_datasets(settings, datasets)?;
    let m = datasets.len();
    let (server_ends, worker_ends) = make_channels(m, transport)?;
    let collector: Mutex<Vec<(u64, SourceLoss)>> = Mutex::new(Vec::new());

    let (model, dropped_records) = std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(m);
        for (s, (data, chan)) in datasets.iter().zip(worker_ends).enumerate() {
            let collector = &collector;
            let seed = settings.seed;
            let data = data.clone();
            handles.push(scope.spawn(move || train_worker(chan, s, data, seed, collector)));
        }
        let server_result = train_server(server_ends, settings, m);
        let mut dropped = vec![0usize; m];
        let mut worker_error: Option<Error> = None;
        for (s, handle) in handles.into_iter().enumerate() {
            match handle.join() {
                Ok(Ok(d)) => dropped[s] = d,
                Ok(Err(e)) => {
                    worker_error.get_or_insert(e);
                }
                Err(_) => {
                    worker_error.get_or_insert(Error::State(format!("worker {s} panicked")));
                }
            }
        }
        if let Some(e) = worker_error {
            return Err(e);
        }
        Ok((server_result?, dropped))
    })?;

    let mut rows = collector.into_inner().expect("no worker holds the lock");
    rows.sort_by_key(|(round, loss)| (*round, loss.source_id));
    if rows.len() != m * settings.rounds as usize {
        return Err(Error::State(format!(
            "loss history incomplete: {} rows for {} rounds x {m} sources",
            rows.len(),
            settings.rounds
        )));
    }
    let history = rows
        .chunks(m)
        .map(|chunk| LossBreakdown::new(chunk.iter().map(|(_, loss)| loss.clone()).collect()))
        .collect();
    Ok(TrainOutcome {
        model,
        history,
        dropped_records,
    })
}

fn train_server(
    channels: Vec<Box<dyn Channel>>,
    settings: &TrainSettings,
    m: usize,
) -> Result<GlobalModel> {
    let timeout = settings.round_timeout;

    // Sources identify themselves by their dedup frame; reorder the
    // channels so index equals source id.
    let mut slots: Vec<Option<(Box<dyn Channel>, DedupMessage)>> =
        (0..m).map(|_| None).collect();
    for mut chan in channels {
        let frame = recv_frame(chan.as_mut(), timeout).map_err(|e| at_round(0, e))?;
        let Frame::Dedup(msg) = frame else {
            return Err(Error::Protocol(format!(
                "expected a dedup frame to open the session, got {}",
                frame.type_name()
            )));
        };
        let s = msg.source_id as usize;
        if s >= m {
            return Err(Error::Protocol(format!(
                "source id {s} out of range for {m} sources"
            )));
        }
        if slots[s].is_some() {
            return Err(Error::Protocol(format!("duplicate source id {s} in dedup round")));
        }
        slots[s] = Some((chan, msg));
    }
    let mut channels = Vec::with_capacity(m);
    let mut dedup_msgs = Vec::with_capacity(m);
    for (s, slot) in slots.into_iter().enumerate() {
        let (chan, msg) = slot.ok_or_else(|| {
            Error::Protocol(format!("source {s} never opened the session"))
        })?;
        channels.push(chan);
        dedup_msgs.push(msg);
    }
    let exclusions = dedup_round(&dedup_msgs)?;
    for (chan, excluded) in channels.iter_mut().zip(exclusions) {
        let mut digests: Vec<[u8; 32]> = excluded.into_iter().collect();
        digests.sort_unstable();
        chan.send(&encode_frame(&Frame::DedupExclusions(digests)))
            .map_err(|e| at_round(0, e))?;
    }

    let mut model = build_model(settings, m)?;
    let mut opt = Sgd::new(settings.momentum)?;
    for round in 0..settings.rounds {
        // Encode once so every worker receives identical bytes.
        let bytes = encode_frame(&Frame::Broadcast(ModelBroadcast {
            round,
            model: model.clone(),
        }));
        for chan in channels.iter_mut() {
            chan.send(&bytes).map_err(|e| at_round(round, e))?;
        }
        let mut messages = Vec::with_capacity(m);
        for chan in channels.iter_mut() {
            let frame = recv_frame(chan.as_mut(), timeout).map_err(|e| at_round(round, e))?;
            let Frame::Gradient(msg) = frame else {
                return Err(Error::Protocol(format!(
                    "round {round}: expected a gradient frame, got {}",
                    frame.type_name()
                )));
            };
            messages.push(msg);
        }
        server_round(&mut model, &mut opt, settings.learning_rate, round, messages)?;
    }
    let shutdown = encode_frame(&Frame::Shutdown);
    for chan in channels.iter_mut() {
        chan.send(&shutdown)
            .map_err(|e| at_round(settings.rounds, e))?;
    }
    Ok(model)
}

fn train_worker(
    mut chan: Box<dyn Channel>,
    source_id: usize,
    mut data: SourceDataset,
    master_seed: u64,
    collector: &Mutex<Vec<(u64, SourceLoss)>>,
) -> Result<usize> {
    let digests = data
        .unit_ids
        .as_ref()
        .map(|ids| ids.iter().map(|id| unit_digest(id)).collect())
        .unwrap_or_default();
    chan.send(&encode_frame(&Frame::Dedup(DedupMessage {
        source_id: source_id as u32,
        digests,
    })))?;
    let frame = recv_frame(chan.as_mut(), None)?;
    let Frame::DedupExclusions(excluded) = frame else {
        return Err(Error::Protocol(format!(
            "source {source_id}: expected exclusions, got {}",
            frame.type_name()
        )));
    };
    let excluded: HashSet<[u8; 32]> = excluded.into_iter().collect();
    let had_records = data.n() > 0;
    let dropped = data.drop_excluded(&excluded);
    if had_records && data.n() == 0 {
        eprintln!(
            "warning: dedup removed every record of source {source_id}; \
             it stays in the protocol with regularizer-only gradients"
        );
    }

    let mut feats: Option<SourceFeatures> = None;
    let mut expected_round = 0u64;
    loop {
        match recv_frame(chan.as_mut(), None)? {
            Frame::Broadcast(bc) => {
                if feats.is_none() {
                    feats = Some(compute_features(&data, &bc.model)?);
                }
                let feats = feats.as_ref().expect("features cached above");
                let hyper = &bc.model.hyper;
                let noise = NoiseDraws::generate(
                    master_seed,
                    source_id as u64,
                    bc.round,
                    data.n(),
                    hyper.m_samples,
                    hyper.d_z,
                );
                let loss = local_losses_prepared(source_id, &data, feats, &bc.model, &noise)?;
                collector
                    .lock()
                    .expect("collector lock never poisoned")
                    .push((bc.round, loss));
                let msg = source_round_prepared(
                    &bc,
                    source_id,
                    &data,
                    feats,
                    master_seed,
                    expected_round,
                )?;
                expected_round = bc.round + 1;
                chan.send(&encode_frame(&Frame::Gradient(msg)))?;
            }
            Frame::Shutdown => return Ok(dropped),
            other => {
                return Err(Error::Protocol(format!(
                    "source {source_id}: unexpected {} frame",
                    other.type_name()
                )))
            }
        }
    }
}

/// Training without any transport: the same dedup, noise streams,
/// source-ordered gradient summation, and update rule as
/// [`run_training`], evaluated in one loop. The reference the federated
/// path is tested against.
pub fn centralized_run(
    settings: &TrainSettings,
    datasets: &[SourceDataset],
) -> Result<TrainOutcome> {
    settings.validate()?;
    check_datasets(settings, datasets)?;
    let m = datasets.len();
    let dedup_msgs: Vec<DedupMessage> = datasets
        .iter()
        .enumerate()
        .map(|(s, data)| DedupMessage {
            source_id: s as u32,
            digests: data
                .unit_ids
                .as_ref()
                .map(|ids| ids.iter().map(|id| unit_digest(id)).collect())
                .unwrap_or_default(),
        })
        .collect();
    let exclusions = dedup_round(&dedup_msgs)?;
    let mut local: Vec<SourceDataset> = datasets.to_vec();
    let mut dropped_records = vec![0usize; m];
    for (s, (data, excluded)) in local.iter_mut().zip(&exclusions).enumerate() {
        let had_records = data.n() > 0;
        dropped_records[s] = data.drop_excluded(excluded);
        if had_records && data.n() == 0 {
            eprintln!(
                "warning: dedup removed every record of source {s}; \
                 it stays in the run with regularizer-only gradients"
            );
        }
    }

    let mut model = build_model(settings, m)?;
    let feats: Vec<SourceFeatures> = local
        .iter()
        .map(|data| compute_features(data, &model))
        .collect::<Result<_>>()?;
    let mut opt = Sgd::new(settings.momentum)?;
    let mut history = Vec::with_capacity(settings.rounds as usize);
    for round in 0..settings.rounds {
        let mut per_source = Vec::with_capacity(m);
        let mut total = GradientRecord::zeros(&model);
        for s in 0..m {
            let hyper = &model.hyper;
            let noise = NoiseDraws::generate(
                settings.seed,
                s as u64,
                round,
                local[s].n(),
                hyper.m_samples,
                hyper.d_z,
            );
            per_source.push(local_losses_prepared(s, &local[s], &feats[s], &model, &noise)?);
            let grad = local_gradient_prepared(s, &local[s], &feats[s], &model, &noise)?;
            total.add_assign(&grad)?;
        }
        apply_update(&mut model, &total, &mut opt, settings.learning_rate)?;
        history.push(LossBreakdown::new(per_source));
    }
    Ok(TrainOutcome {
        model,
        history,
        dropped_records,
    })
}

/// Collects count-weighted effect summaries over the transport: each
/// source receives the model once, reports `(local ATE, count)` for its
/// own rows, and the server weights the summaries into the global ATE.
/// Returns the global value and the per-source pairs, sources ascending.
pub fn federated_ate(
    model: &GlobalModel,
    rows_per_source: &[Array2<Real>],
    settings: &EffectSettings,
    transport: &TransportKind,
) -> Result<(Real, Vec<(Real, u64)>)> {
    settings.validate()?;
    model.validate()?;
    if rows_per_source.len() != model.num_sources() {
        return Err(Error::shape(
            "effect row batches",
            model.num_sources(),
            rows_per_source.len(),
        ));
    }
    let m = rows_per_source.len();
    let (server_ends, worker_ends) = make_channels(m, transport)?;
    std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(m);
        for (s, (rows, chan)) in rows_per_source.iter().zip(worker_ends).enumerate() {
            let rows = rows.clone();
            handles.push(scope.spawn(move || ate_worker(chan, s, rows)));
        }
        let server_result = ate_server(server_ends, model, settings, m);
        let mut worker_error: Option<Error> = None;
        for (s, handle) in handles.into_iter().enumerate() {
            match handle.join() {
                Ok(Ok(())) => {}
                Ok(Err(e)) => {
                    worker_error.get_or_insert(e);
                }
                Err(_) => {
                    worker_error.get_or_insert(Error::State(format!("worker {s} panicked")));
                }
            }
        }
        if let Some(e) = worker_error {
            return Err(e);
        }
        server_result
    })
}

fn ate_server(
    mut channels: Vec<Box<dyn Channel>>,
    model: &GlobalModel,
    settings: &EffectSettings,
    m: usize,
) -> Result<(Real, Vec<(Real, u64)>)> {
    let request = encode_frame(&Frame::AteRequest {
        settings: *settings,
        model: model.clone(),
    });
    for chan in channels.iter_mut() {
        chan.send(&request)?;
    }
    let mut pairs: Vec<Option<(Real, u64)>> = vec![None; m];
    for chan in channels.iter_mut() {
        let frame = recv_frame(chan.as_mut(), None)?;
        let Frame::AteSummary {
            source_id,
            ate,
            count,
        } = frame
        else {
            return Err(Error::Protocol(format!(
                "expected an effect summary, got {}",
                frame.type_name()
            )));
        };
        let s = source_id as usize;
        if s >= m || pairs[s].is_some() {
            return Err(Error::Protocol(format!("unexpected effect summary from source {s}")));
        }
        pairs[s] = Some((ate, count));
    }
    let shutdown = encode_frame(&Frame::Shutdown);
    for chan in channels.iter_mut() {
        chan.send(&shutdown)?;
    }
    let pairs: Vec<(Real, u64)> = pairs
        .into_iter()
        .enumerate()
        .map(|(s, pair)| {
            pair.ok_or_else(|| Error::Protocol(format!("source {s} never reported a summary")))
        })
        .collect::<Result<_>>()?;
    Ok((global_ate(&pairs)?, pairs))
}

fn ate_worker(mut chan: Box<dyn Channel>, source_id: usize, rows: Array2<Real>) -> Result<()> {
    loop {
        match recv_frame(chan.as_mut(), None)? {
            Frame::AteRequest { settings, model } => {
                let (ate, count) = local_ate(&rows, source_id, &model, &settings)?;
                chan.send(&encode_frame(&Frame::AteSummary {
                    source_id: source_id as u32,
                    ate,
                    count: count as u64,
                }))?;
            }
            Frame::Shutdown => return Ok(()),
            other => {
                return Err(Error::Protocol(format!(
                    "source {source_id}: unexpected {} frame",
                    other.type_name()
                )))
            }
        }
    }
}
