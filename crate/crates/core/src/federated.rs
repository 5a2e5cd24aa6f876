//! Federated training: client partitioning, weighted local gradients, FedAvg
//! over a pluggable transport, and the training loop.
//!
//! Client `j` owns `N_j` loss terms and minimizes `L_j = loss_j / N_j`. Each
//! round every client starts from the global parameters, takes `sync_every`
//! local steps on its own `L_j`, and contributes its accumulated gradient
//! weighted by `N_j / N`. The server sums the contributions through the
//! transport and applies one step with the same learning rate. With
//! `sync_every = 1` this is plain gradient descent on the pooled loss `L / N`.

use crate::dynamic_gnn::{
    constant_position_errors, ErrorSums, GradientVector, Hyperparams, ModelError, ModelParams, PreparedSequence,
    Rmse,
};
use crate::graph_model::GraphSequence;
use crate::secure_agg::{self, ClientKey, InProcessChannel, SecureAggError, SecureParams};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::time::Instant;

#[derive(Debug, thiserror::Error)]
pub enum FederatedError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("aggregation failed in round {round}: {source}")]
    Transport {
        round: u32,
        #[source]
        source: SecureAggError,
    },
    #[error("partition: {0}")]
    Partition(String),
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error("contribution length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("no contributions to aggregate")]
    NoContributions,
    #[error("metrics: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, FederatedError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Central,
    FedPlain,
    FedSecure,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Central => "central",
            Mode::FedPlain => "fed_plain",
            Mode::FedSecure => "fed_secure",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionStrategy {
    ByVideo,
    ByTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub sync_every: usize,
    pub eta: f64,
    pub epochs: usize,
    pub mode: Mode,
}

impl RoundPlan {
    pub fn validate(&self) -> Result<()> {
        if self.sync_every == 0 {
            return Err(FederatedError::Plan("sync_every must be at least 1".into()));
        }
        if !self.eta.is_finite() || self.eta <= 0.0 {
            return Err(FederatedError::Plan("eta must be a positive number".into()));
        }
        Ok(())
    }

    /// Number of synchronizations the plan performs.
    pub fn rounds(&self) -> usize {
        self.epochs.div_ceil(self.sync_every)
    }
}

/// One client's private data. The shared parameter replica is held by the
/// training loop, since all replicas are identical after every round.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub sequences: Vec<GraphSequence>,
    prepared: Vec<PreparedSequence>,
    /// Loss terms across the client's sequences.
    pub n_j: usize,
}

impl ClientState {
    pub fn new(client_id: usize, sequences: Vec<GraphSequence>, hyper: &Hyperparams, delta_t: usize) -> Result<Self> {
        let prepared = sequences
            .iter()
            .map(|s| PreparedSequence::new(s, hyper, Some(delta_t)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let n_j = prepared.iter().map(|p| p.term_count()).sum();
        if n_j == 0 {
            return Err(ModelError::EmptyLossWindow(format!("client {client_id} has no loss terms")).into());
        }
        Ok(Self {
            client_id,
            sequences,
            prepared,
            n_j,
        })
    }

    /// Sum of the per-sequence losses and gradients, unnormalized.
    fn loss_and_gradient_sum(&self, params: &ModelParams) -> Result<(f64, GradientVector)> {
        let mut total = 0.0;
        let mut grad = GradientVector::zeros(params.len());
        for p in &self.prepared {
            let (l, g) = p.loss_and_gradient(params)?;
            total += l;
            grad.axpy(1.0, &g);
        }
        Ok((total, grad))
    }

    /// `∇L_j(Θ)` with `L_j = loss_j / N_j`.
    pub fn local_gradient(&self, params: &ModelParams) -> Result<GradientVector> {
        let (_, mut g) = self.loss_and_gradient_sum(params)?;
        g.scale(1.0 / self.n_j as f64);
        Ok(g)
    }

    pub fn loss_sum(&self, params: &ModelParams) -> Result<f64> {
        Ok(self.prepared.iter().map(|p| p.loss(params)).sum::<std::result::Result<f64, _>>()?)
    }

    pub fn errors(&self, params: &ModelParams) -> Result<ErrorSums> {
        let mut sums = ErrorSums::default();
        for p in &self.prepared {
            sums.merge(&p.squared_errors(params)?);
        }
        Ok(sums)
    }
}

/// Splits data among `m` clients. `ByVideo` deals whole sequences round-robin;
/// `ByTime` cuts a single sequence into `m` contiguous chunks, each trained as
/// an independent sequence so no loss window crosses a cut.
pub fn partition_clients(
    seqs: &[GraphSequence],
    m: usize,
    strategy: PartitionStrategy,
    hyper: &Hyperparams,
    delta_t: usize,
) -> Result<Vec<ClientState>> {
    if m == 0 {
        return Err(FederatedError::Partition("m must be at least 1".into()));
    }
    let groups: Vec<Vec<GraphSequence>> = match strategy {
        PartitionStrategy::ByVideo => {
            if m > seqs.len() {
                return Err(FederatedError::Partition(format!(
                    "{m} clients but only {} sequences",
                    seqs.len()
                )));
            }
            (0..m)
                .map(|j| seqs.iter().skip(j).step_by(m).cloned().collect())
                .collect()
        }
        PartitionStrategy::ByTime => {
            let [seq] = seqs else {
                return Err(FederatedError::Partition(format!(
                    "by_time splits exactly one sequence, got {}",
                    seqs.len()
                )));
            };
            let t = seq.len();
            let min_len = delta_t + 2;
            if t / m < min_len {
                return Err(FederatedError::Partition(format!(
                    "{t} frames cannot be cut into {m} chunks of at least {min_len} frames"
                )));
            }
            let (base, extra) = (t / m, t % m);
            let mut start = 0;
            (0..m)
                .map(|j| {
                    let len = base + usize::from(j < extra);
                    let chunk = seq.slice(start..start + len);
                    start += len;
                    vec![chunk]
                })
                .collect()
        }
    };
    groups
        .into_iter()
        .enumerate()
        .map(|(j, g)| ClientState::new(j, g, hyper, delta_t))
        .collect()
}

/// One client holding every sequence of `clients`.
pub fn pool_clients(clients: &[ClientState], hyper: &Hyperparams, delta_t: usize) -> Result<ClientState> {
    let all = clients.iter().flat_map(|c| c.sequences.iter().cloned()).collect();
    ClientState::new(0, all, hyper, delta_t)
}

/// `Σ_j N_j`.
pub fn total_samples(clients: &[ClientState]) -> usize {
    clients.iter().map(|c| c.n_j).sum()
}

/// `(N_j / N) · ∇L_j(Θ)`.
pub fn local_update(client: &ClientState, params: &ModelParams, n_total: usize) -> Result<GradientVector> {
    let mut g = client.local_gradient(params)?;
    g.scale(client.n_j as f64 / n_total as f64);
    Ok(g)
}

/// Element-wise sum of pre-weighted contributions.
pub fn fedavg_plain(contributions: &[GradientVector]) -> Result<GradientVector> {
    let first = contributions.first().ok_or(FederatedError::NoContributions)?;
    let mut sum = GradientVector::zeros(first.len());
    for c in contributions {
        if c.len() != first.len() {
            return Err(FederatedError::LengthMismatch {
                expected: first.len(),
                found: c.len(),
            });
        }
        sum.axpy(1.0, c);
    }
    Ok(sum)
}

/// How client contributions reach the server. Contributions arrive in client
/// order; the result is their sum.
pub trait Transport {
    fn aggregate(&mut self, round: u32, contributions: &[GradientVector]) -> Result<GradientVector>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct PlainTransport;

impl Transport for PlainTransport {
    fn aggregate(&mut self, _round: u32, contributions: &[GradientVector]) -> Result<GradientVector> {
        fedavg_plain(contributions)
    }
}

/// Default largest plausible magnitude of an aggregated coordinate. Decoded
/// sums beyond it mean a contribution was missing or corrupt.
pub const DEFAULT_VALUE_BOUND: f64 = 1e9;

/// Masked aggregation. Holds every client's key and masks on its behalf, so
/// only masked vectors and their product pass through [`aggregate`].
///
/// [`aggregate`]: Transport::aggregate
pub struct SecureTransport {
    params: SecureParams,
    keys: Vec<ClientKey>,
    value_bound: f64,
}

impl SecureTransport {
    /// Runs key generation for clients `0..m`.
    pub fn new<R: Rng + ?Sized>(params: SecureParams, m: usize, rng: &mut R) -> Result<Self> {
        let ids: Vec<u64> = (0..m as u64).collect();
        let keys = secure_agg::keygen(&params, &ids, &mut InProcessChannel::default(), rng)
            .map_err(|source| FederatedError::Transport { round: 0, source })?;
        Ok(Self {
            params,
            keys,
            value_bound: DEFAULT_VALUE_BOUND,
        })
    }

    pub fn with_value_bound(mut self, bound: f64) -> Self {
        self.value_bound = bound;
        self
    }

    pub fn params(&self) -> &SecureParams {
        &self.params
    }
}

impl Transport for SecureTransport {
    fn aggregate(&mut self, round: u32, contributions: &[GradientVector]) -> Result<GradientVector> {
        let t = secure_agg::round_tag(self.params.session_id, round);
        let vectors: Vec<Vec<f64>> = contributions.iter().map(|c| c.0.clone()).collect();
        secure_agg::secure_sum_reals(&vectors, &mut self.keys, &self.params, t, self.value_bound)
            .map(GradientVector)
            .map_err(|source| FederatedError::Transport { round, source })
    }
}

/// One row of the shared metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub mode: Mode,
    pub m: usize,
    pub d: usize,
    pub epoch: usize,
    pub rmse_x: f64,
    pub rmse_y: f64,
    pub seconds: f64,
    /// Pooled loss `L / N` at the global parameters.
    pub loss: f64,
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub metrics: Vec<MetricsRow>,
}

/// Pooled loss `L / N` and RMSE over all clients at `params`.
pub fn evaluate_clients(clients: &[ClientState], params: &ModelParams) -> Result<(f64, Rmse)> {
    let parts = clients
        .par_iter()
        .map(|c| Ok((c.loss_sum(params)?, c.errors(params)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut loss = 0.0;
    let mut sums = ErrorSums::default();
    for (l, e) in &parts {
        loss += l;
        sums.merge(e);
    }
    Ok((loss / total_samples(clients) as f64, sums.rmse()))
}

/// [`train_observed`] without an observer.
pub fn train(
    plan: &RoundPlan,
    clients: &[ClientState],
    init: ModelParams,
    transport: &mut dyn Transport,
    run_id: &str,
) -> Result<TrainOutput> {
    train_observed(plan, clients, init, transport, run_id, |_, _| {})
}

/// Runs `plan` from `init`. In central mode the clients are pooled into one
/// and every epoch is a step. Metrics are recorded after every
/// synchronization; `observer` sees the global parameters at the same points
/// together with the round number.
pub fn train_observed(
    plan: &RoundPlan,
    clients: &[ClientState],
    init: ModelParams,
    transport: &mut dyn Transport,
    run_id: &str,
    mut observer: impl FnMut(u32, &ModelParams),
) -> Result<TrainOutput> {
    plan.validate()?;
    if clients.is_empty() {
        return Err(FederatedError::Partition("no clients".into()));
    }
    let m = clients.len();
    let sync_every = if plan.mode == Mode::Central { 1 } else { plan.sync_every };
    let n_total = total_samples(clients);
    let start = Instant::now();
    let mut global = init;
    let mut metrics = Vec::new();
    let mut epoch = 0;
    let mut round: u32 = 0;

    while epoch < plan.epochs {
        round += 1;
        let period = sync_every.min(plan.epochs - epoch);
        let contributions = match plan.mode {
            Mode::Central => {
                let parts = clients
                    .par_iter()
                    .map(|c| c.loss_and_gradient_sum(&global))
                    .collect::<Result<Vec<_>>>()?;
                let mut g = GradientVector::zeros(global.len());
                for (_, part) in &parts {
                    g.axpy(1.0, part);
                }
                g.scale(1.0 / n_total as f64);
                vec![g]
            }
            Mode::FedPlain | Mode::FedSecure => clients
                .par_iter()
                .map(|c| local_round(c, &global, period, plan.eta, n_total))
                .collect::<Result<Vec<_>>>()?,
        };
        let step = match plan.mode {
            Mode::Central => contributions.into_iter().next().expect("one contribution"),
            _ => transport.aggregate(round, &contributions)?,
        };
        global.descend(plan.eta, &step);
        epoch += period;

        observer(round, &global);
        let (loss, rmse) = evaluate_clients(clients, &global)?;
        tracing::debug!(round, epoch, loss, "synchronized");
        metrics.push(MetricsRow {
            run_id: run_id.to_string(),
            mode: plan.mode,
            m,
            d: global.hyper.d,
            epoch,
            rmse_x: rmse.x,
            rmse_y: rmse.y,
            seconds: start.elapsed().as_secs_f64(),
            loss,
        });
    }
    Ok(TrainOutput {
        params: global,
        metrics,
    })
}

/// `period` local steps from `global`, returning `(N_j / N) · Σ ∇L_j`.
fn local_round(
    client: &ClientState,
    global: &ModelParams,
    period: usize,
    eta: f64,
    n_total: usize,
) -> Result<GradientVector> {
    let mut local = global.clone();
    let mut acc = GradientVector::zeros(global.len());
    for step in 0..period {
        let g = client.local_gradient(&local)?;
        acc.axpy(1.0, &g);
        if step + 1 < period {
            local.descend(eta, &g);
        }
    }
    acc.scale(client.n_j as f64 / n_total as f64);
    Ok(acc)
}

/// RMSE of predicting that every object stays where it is.
pub fn baseline_constant_position(seq: &GraphSequence, delta_t: usize) -> Result<Rmse> {
    Ok(constant_position_errors(seq, delta_t)?.rmse())
}

/// Same baseline pooled over several sequences.
pub fn baseline_constant_position_many(seqs: &[GraphSequence], delta_t: usize) -> Result<Rmse> {
    let mut sums = ErrorSums::default();
    for s in seqs {
        sums.merge(&constant_position_errors(s, delta_t)?);
    }
    Ok(sums.rmse())
}
