//! Round orchestration for flat federated training.
//!
//! Each round the server samples clients, every selected client trains a
//! private copy of the global parameters on its own data, and the server
//! folds the returned parameters back in, either by FedAvg or by treating
//! the weighted parameter difference as a gradient for a server optimizer.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contrastive::{LocalConfig, LocalStats, LocalTrainer};
use crate::dataset::ClientDataset;
use crate::error::{Error, Result};
use crate::geo::ClientId;
use crate::model::{EmbedderSpec, ParamVector};
use crate::optim::Adam;
use crate::retrieval::{recall_at_k, EvalSet, RecallReport};
use crate::seed::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServerOptimizer {
    #[default]
    Sgd,
    Sgdm,
    Adam,
    Adagrad,
}

impl ServerOptimizer {
    /// Default (learning rate, momentum). Plain SGD at rate 1 is FedAvg.
    pub fn default_hyperparameters(self) -> (f64, f64) {
        match self {
            ServerOptimizer::Sgd => (1.0, 0.0),
            ServerOptimizer::Sgdm => (0.1, 0.9),
            ServerOptimizer::Adam => (0.1, 0.9),
            ServerOptimizer::Adagrad => (0.01, 0.9),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedVcConfig {
    /// Queries per virtual client; defaults to batch size times local
    /// iterations.
    pub virtual_size: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub rounds: usize,
    pub clients_per_round: usize,
    pub server_optimizer: ServerOptimizer,
    pub server_lr: Option<f64>,
    pub server_momentum: Option<f64>,
    /// Fixed local iterations per round, replacing the one-epoch rule.
    pub local_iterations: Option<usize>,
    /// Total local iteration budget; must equal
    /// `local_iterations * rounds * clients_per_round` when both are set.
    pub total_iterations: Option<usize>,
    pub fedvc: Option<FedVcConfig>,
    pub eval_interval: usize,
    pub seed: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            rounds: 60,
            clients_per_round: 5,
            server_optimizer: ServerOptimizer::Sgd,
            server_lr: None,
            server_momentum: None,
            local_iterations: None,
            total_iterations: None,
            fedvc: None,
            eval_interval: 10,
            seed: 0,
        }
    }
}

impl FederationConfig {
    pub fn server_hyperparameters(&self) -> (f64, f64) {
        let (lr, momentum) = self.server_optimizer.default_hyperparameters();
        (self.server_lr.unwrap_or(lr), self.server_momentum.unwrap_or(momentum))
    }

    /// Runs as plain FedAvg: SGD at unit rate without momentum.
    pub fn is_fedavg(&self) -> bool {
        let (lr, momentum) = self.server_hyperparameters();
        self.server_optimizer == ServerOptimizer::Sgd && lr == 1.0 && momentum == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients_per_round == 0 {
            return Err(Error::config("clients_per_round must be >= 1"));
        }
        if self.eval_interval == 0 {
            return Err(Error::config("eval_interval must be >= 1"));
        }
        let (lr, momentum) = self.server_hyperparameters();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config("server_lr must be > 0"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config("server_momentum must lie in [0, 1)"));
        }
        if self.local_iterations == Some(0) {
            return Err(Error::config("local_iterations must be >= 1"));
        }
        if let (Some(total), Some(local)) = (self.total_iterations, self.local_iterations) {
            if local * self.rounds * self.clients_per_round != total {
                return Err(Error::config(format!(
                    "total_iterations {total} != local_iterations {local} x rounds {} x clients_per_round {}",
                    self.rounds, self.clients_per_round
                )));
            }
        }
        if let Some(vc) = self.fedvc {
            if vc.virtual_size == Some(0) {
                return Err(Error::config("virtual_size must be >= 1"));
            }
            if vc.virtual_size.is_none() && self.local_iterations.is_none() {
                return Err(Error::config(
                    "fedvc needs virtual_size or local_iterations to size virtual clients",
                ));
            }
        }
        Ok(())
    }
}

/// Rounds that spend exactly `total` local iterations.
pub fn rounds_for_budget(total: usize, local_iterations: usize, clients_per_round: usize) -> Result<usize> {
    let per_round = local_iterations * clients_per_round;
    if per_round == 0 || !total.is_multiple_of(per_round) {
        return Err(Error::config(format!(
            "budget {total} is not a multiple of {local_iterations} x {clients_per_round}"
        )));
    }
    Ok(total / per_round)
}

/// Selects `count` distinct clients from `pool` for `round`. Uniform unless
/// `weights` (one per pool entry, positive) are given, in which case clients
/// are drawn sequentially with probability proportional to weight among
/// those not yet drawn. Returned ascending.
pub fn select_clients(
    pool: &[ClientId],
    round: usize,
    count: usize,
    seed: u64,
    weights: Option<&[f64]>,
) -> Result<Vec<ClientId>> {
    select_in_group(pool, round, 0, count, seed, weights)
}

pub(crate) fn select_in_group(
    pool: &[ClientId],
    round: usize,
    group: usize,
    count: usize,
    seed: u64,
    weights: Option<&[f64]>,
) -> Result<Vec<ClientId>> {
    if pool.is_empty() {
        return Err(Error::invalid("client pool is empty"));
    }
    let count = count.min(pool.len());
    let mut rng = seed::rng(seed, Stream::Selection, &[round as u64, group as u64]);
    let picks = match weights {
        None => rand::seq::index::sample(&mut rng, pool.len(), count),
        Some(w) => {
            if w.len() != pool.len() {
                return Err(Error::shape(pool.len(), w.len()));
            }
            rand::seq::index::sample_weighted(&mut rng, pool.len(), |i| w[i], count)
                .map_err(|e| Error::invalid(format!("selection weights: {e}")))?
        }
    };
    let mut out: Vec<ClientId> = picks.into_iter().map(|i| pool[i]).collect();
    out.sort_unstable();
    Ok(out)
}

/// Parameters returned by one client, with its aggregation weight.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: ClientId,
    pub params: ParamVector,
    pub n_samples: usize,
}

fn canonical<'a>(
    current: &ParamVector,
    updates: &'a [ClientUpdate],
) -> Result<(Vec<(f64, &'a ClientUpdate)>, bool)> {
    if updates.is_empty() {
        return Ok((Vec::new(), true));
    }
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let mut total = 0usize;
    for u in &sorted {
        if !u.params.same_shape(current) {
            return Err(Error::shape(current.len(), u.params.len()));
        }
        if u.n_samples == 0 {
            return Err(Error::invalid(format!("client {} reported zero samples", u.client_id)));
        }
        total += u.n_samples;
    }
    let total = total as f64;
    Ok((
        sorted
            .into_iter()
            .map(|u| (u.n_samples as f64 / total, u))
            .collect(),
        false,
    ))
}

/// Sample-weighted mean of the client parameters, summed in ascending
/// client-id order. No updates leaves `current` unchanged.
pub fn fedavg_aggregate(current: &ParamVector, updates: &[ClientUpdate]) -> Result<ParamVector> {
    let (weighted, empty) = canonical(current, updates)?;
    if empty {
        return Ok(current.clone());
    }
    let mut out = current.zeros_like();
    let (w0, first) = weighted[0];
    for (o, v) in out.values_mut().iter_mut().zip(first.params.values()) {
        *o = w0 * v;
    }
    for &(w, u) in &weighted[1..] {
        for (o, v) in out.values_mut().iter_mut().zip(u.params.values()) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// `sum_k (N_k / N) (current - params_k)`, zero for no updates.
pub fn pseudo_gradient(current: &ParamVector, updates: &[ClientUpdate]) -> Result<Vec<f64>> {
    let (weighted, _) = canonical(current, updates)?;
    let mut delta = vec![0.0; current.len()];
    for &(w, u) in &weighted {
        for ((d, c), v) in delta.iter_mut().zip(current.values()).zip(u.params.values()) {
            *d += w * (c - v);
        }
    }
    Ok(delta)
}

#[derive(Debug, Clone)]
enum ServerState {
    Sgd,
    Sgdm { velocity: Vec<f64> },
    Adam(Adam),
    Adagrad { momentum: Vec<f64>, accumulator: Vec<f64> },
}

/// Server optimizer treating the pseudo-gradient as a gradient.
#[derive(Debug, Clone)]
pub struct ServerOpt {
    lr: f64,
    beta: f64,
    state: ServerState,
}

pub const SERVER_EPS: f64 = 1e-8;
pub const SERVER_BETA2: f64 = 0.999;

impl ServerOpt {
    pub fn new(kind: ServerOptimizer, lr: f64, momentum: f64, param_count: usize) -> Self {
        let state = match kind {
            ServerOptimizer::Sgd => ServerState::Sgd,
            ServerOptimizer::Sgdm => ServerState::Sgdm {
                velocity: vec![0.0; param_count],
            },
            ServerOptimizer::Adam => {
                ServerState::Adam(Adam::new(param_count, momentum, SERVER_BETA2, SERVER_EPS))
            }
            ServerOptimizer::Adagrad => ServerState::Adagrad {
                momentum: vec![0.0; param_count],
                accumulator: vec![0.0; param_count],
            },
        };
        ServerOpt {
            lr,
            beta: momentum,
            state,
        }
    }

    pub fn from_config(cfg: &FederationConfig, param_count: usize) -> Self {
        let (lr, momentum) = cfg.server_hyperparameters();
        ServerOpt::new(cfg.server_optimizer, lr, momentum, param_count)
    }

    /// One server update. SGD: `theta - lr * delta`. SGDm: `v = beta v +
    /// delta; theta - lr * v`. Adam: bias-corrected moments with beta1 =
    /// momentum. AdaGrad: `m = beta m + (1 - beta) delta; acc += delta^2;
    /// theta - lr * m / (sqrt(acc) + eps)`.
    pub fn step(&mut self, theta: &ParamVector, delta: &[f64]) -> Result<ParamVector> {
        if delta.len() != theta.len() {
            return Err(Error::shape(theta.len(), delta.len()));
        }
        if !delta.iter().all(|d| d.is_finite()) {
            return Err(Error::NonFinite("server pseudo-gradient".into()));
        }
        let mut next = theta.clone();
        let p = next.values_mut();
        let (lr, beta) = (self.lr, self.beta);
        match &mut self.state {
            ServerState::Sgd => {
                for (x, d) in p.iter_mut().zip(delta) {
                    *x -= lr * d;
                }
            }
            ServerState::Sgdm { velocity } => {
                for ((x, v), d) in p.iter_mut().zip(velocity.iter_mut()).zip(delta) {
                    *v = beta * *v + d;
                    *x -= lr * *v;
                }
            }
            ServerState::Adam(adam) => adam.step(p, delta, lr),
            ServerState::Adagrad {
                momentum,
                accumulator,
            } => {
                for i in 0..p.len() {
                    momentum[i] = beta * momentum[i] + (1.0 - beta) * delta[i];
                    accumulator[i] += delta[i] * delta[i];
                    p[i] -= lr * momentum[i] / (accumulator[i].sqrt() + SERVER_EPS);
                }
            }
        }
        if !next.is_finite() {
            return Err(Error::NonFinite("server parameters".into()));
        }
        Ok(next)
    }
}

/// Equal-sized virtual clients and their selection weights.
#[derive(Debug, Clone)]
pub struct VirtualPool {
    pub clients: Vec<ClientDataset>,
    /// Usable queries of the originating real client.
    pub origin_sizes: Vec<usize>,
    /// Shards the originating real client was cut into.
    pub origin_shards: Vec<usize>,
}

impl VirtualPool {
    /// Selection weight of each virtual client: origin size over shard count,
    /// so a real client's total mass is proportional to its size.
    pub fn weights(&self) -> Vec<f64> {
        self.origin_sizes
            .iter()
            .zip(&self.origin_shards)
            .map(|(&n, &s)| n as f64 / s as f64)
            .collect()
    }
}

/// Cuts every real client into `ceil(N_k / virtual_size)` shards over
/// disjoint subsets of its shuffled queries, then pads each short shard by
/// resampling its own queries until it holds exactly `virtual_size`.
/// Clients without usable queries are dropped. Virtual ids are assigned in
/// order from 0.
pub fn make_virtual_clients(pool: &[ClientDataset], virtual_size: usize, seed: u64) -> Result<VirtualPool> {
    use rand::seq::SliceRandom;
    use rand::Rng;
    if virtual_size == 0 {
        return Err(Error::config("virtual_size must be >= 1"));
    }
    let mut real: Vec<&ClientDataset> = pool.iter().filter(|c| c.usable_queries() > 0).collect();
    real.sort_by_key(|c| c.id());
    let mut out = VirtualPool {
        clients: Vec::new(),
        origin_sizes: Vec::new(),
        origin_shards: Vec::new(),
    };
    for c in real {
        let n = c.usable_queries();
        let shards = n.div_ceil(virtual_size);
        let mut rng = seed::rng(seed, Stream::VirtualClients, &[c.id().0 as u64]);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(virtual_size) {
            let mut idx = chunk.to_vec();
            while idx.len() < virtual_size {
                idx.push(chunk[rng.random_range(0..chunk.len())]);
            }
            let id = ClientId(out.clients.len() as u32);
            out.clients.push(c.with_queries(id, &idx)?);
            out.origin_sizes.push(n);
            out.origin_shards.push(shards);
        }
    }
    Ok(out)
}

/// How each round's clients are drawn.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum SelectionPlan {
    /// `clients_per_round` from the whole pool.
    #[default]
    Uniform,
    /// `clients_per_round` from each group, with the same per-group draws a
    /// hierarchical run makes.
    Stratified(Vec<Vec<ClientId>>),
}

/// Outcome of one client in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub client_id: ClientId,
    pub origin: ClientId,
    pub n_samples: usize,
    pub mean_loss: f64,
    pub iterations: usize,
    pub skipped_queries: usize,
    pub negative_shortfall: usize,
}

impl ClientRecord {
    fn new(origin: ClientId, stats: &LocalStats) -> Self {
        ClientRecord {
            client_id: stats.client_id,
            origin,
            n_samples: stats.n_samples,
            mean_loss: stats.mean_loss,
            iterations: stats.iterations,
            skipped_queries: stats.skipped_queries,
            negative_shortfall: stats.negative_shortfall,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Set for per-cluster records of hierarchical runs.
    pub cluster_id: Option<u32>,
    pub selected: Vec<ClientId>,
    pub clients: Vec<ClientRecord>,
    /// No client contributed; parameters unchanged.
    pub skipped: bool,
    /// A top-level aggregation happened this round (hierarchical runs).
    pub top_aggregation: bool,
    pub checksum: String,
    pub validation: Option<RecallReport>,
}

/// Shared inputs of every training driver.
#[derive(Debug, Clone, Copy)]
pub struct RunContext<'a> {
    pub spec: &'a EmbedderSpec,
    pub local: &'a LocalConfig,
    pub validation: Option<&'a EvalSet>,
    pub ks: &'a [usize],
    /// Cap on concurrently training clients; `None` uses every core.
    pub workers: Option<usize>,
}

impl RunContext<'_> {
    pub(crate) fn evaluate(&self, params: &ParamVector) -> Result<Option<RecallReport>> {
        self.validation
            .map(|v| recall_at_k(params, self.spec, v, self.ks))
            .transpose()
    }
}

/// Best validation checkpoint seen during a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub round: usize,
    /// Recall at the smallest requested k.
    pub score: f64,
    pub params: ParamVector,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub final_params: ParamVector,
    pub best: Option<Checkpoint>,
    pub records: Vec<RoundRecord>,
}

pub(crate) fn primary_score(report: &RecallReport) -> f64 {
    report.recall.values().next().copied().unwrap_or(0.0)
}

pub(crate) fn track_best(best: &mut Option<Checkpoint>, round: usize, report: &RecallReport, params: &ParamVector) {
    let score = primary_score(report);
    if best.as_ref().is_none_or(|b| score > b.score) {
        *best = Some(Checkpoint {
            round,
            score,
            params: params.clone(),
        });
    }
}

pub(crate) fn is_eval_round(round: usize, rounds: usize, interval: usize) -> bool {
    (round + 1).is_multiple_of(interval) || round + 1 == rounds
}

/// Runs jobs on the global rayon pool or on a capped private one.
pub(crate) struct Executor(Option<rayon::ThreadPool>);

impl Executor {
    pub(crate) fn new(workers: Option<usize>) -> Result<Self> {
        match workers {
            None => Ok(Executor(None)),
            Some(0) => Err(Error::config("workers must be >= 1")),
            Some(n) => rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map(|p| Executor(Some(p)))
                .map_err(|e| Error::config(format!("thread pool: {e}"))),
        }
    }

    pub(crate) fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        match &self.0 {
            Some(pool) => pool.install(f),
            None => f(),
        }
    }
}

/// Trains each client from its paired starting parameters in parallel.
/// Results come back in input order.
pub(crate) fn train_round(
    ctx: &RunContext,
    exec: &Executor,
    jobs: &[(&ClientDataset, &ParamVector)],
    round: usize,
    run_seed: u64,
    local_iterations: Option<usize>,
) -> Result<Vec<(ClientRecord, Option<ClientUpdate>)>> {
    let results: Vec<Result<(ClientRecord, Option<ClientUpdate>)>> = exec.install(|| {
        jobs.par_iter()
            .map(|&(client, start)| {
                let mut cfg = *ctx.local;
                cfg.train.seed = seed::derive(run_seed, Stream::Local, &[round as u64, client.id().0 as u64]);
                if local_iterations.is_some() {
                    cfg.train.fixed_iterations = local_iterations;
                }
                let mut params = start.clone();
                let mut trainer = LocalTrainer::new(cfg.train.optimizer, params.len());
                let stats = trainer.run(&mut params, ctx.spec, client, &cfg)?;
                let record = ClientRecord::new(client.origin(), &stats);
                let update = (stats.n_samples > 0).then(|| ClientUpdate {
                    client_id: client.id(),
                    params,
                    n_samples: stats.n_samples,
                });
                Ok((record, update))
            })
            .collect()
    });
    results.into_iter().collect()
}

/// Flat federated training from `theta0`. Every record is passed to `sink`
/// as soon as its round completes.
pub fn run_federation(
    cfg: &FederationConfig,
    ctx: &RunContext,
    clients: &[ClientDataset],
    theta0: ParamVector,
    plan: &SelectionPlan,
    sink: &mut dyn FnMut(&RoundRecord) -> Result<()>,
) -> Result<RunOutput> {
    cfg.validate()?;
    ctx.local.validate()?;
    theta0.check_spec(ctx.spec)?;
    if clients.is_empty() {
        return Err(Error::invalid("no training clients"));
    }

    let virtual_pool;
    let (pool, weights): (&[ClientDataset], Option<Vec<f64>>) = match cfg.fedvc {
        Some(vc) => {
            if *plan != SelectionPlan::Uniform {
                return Err(Error::config("fedvc supports uniform selection plans only"));
            }
            let size = vc
                .virtual_size
                .unwrap_or_else(|| ctx.local.train.batch_triplets * cfg.local_iterations.unwrap_or(1));
            virtual_pool = make_virtual_clients(clients, size, cfg.seed)?;
            if virtual_pool.clients.is_empty() {
                return Err(Error::NoUsableQueries("every training client".into()));
            }
            (&virtual_pool.clients, Some(virtual_pool.weights()))
        }
        None => (clients, None),
    };
    let by_id: BTreeMap<ClientId, &ClientDataset> = pool.iter().map(|c| (c.id(), c)).collect();
    if by_id.len() != pool.len() {
        return Err(Error::invalid("client ids must be unique"));
    }
    let ids: Vec<ClientId> = pool.iter().map(|c| c.id()).collect();
    let groups: Vec<Vec<ClientId>> = match plan {
        SelectionPlan::Uniform => vec![ids.clone()],
        SelectionPlan::Stratified(g) => g.clone(),
    };
    for g in &groups {
        if let Some(missing) = g.iter().find(|id| !by_id.contains_key(id)) {
            return Err(Error::invalid(format!("selection group names unknown client {missing}")));
        }
    }

    let exec = Executor::new(ctx.workers)?;
    let mut server = ServerOpt::from_config(cfg, theta0.len());
    let mut theta = theta0;
    let mut best = None;
    let mut records = Vec::with_capacity(cfg.rounds);
    for t in 0..cfg.rounds {
        let mut selected = Vec::new();
        for (gi, g) in groups.iter().enumerate() {
            if g.is_empty() {
                continue;
            }
            selected.extend(select_in_group(g, t, gi, cfg.clients_per_round, cfg.seed, weights.as_deref())?);
        }
        selected.sort_unstable();
        let jobs: Vec<(&ClientDataset, &ParamVector)> = selected.iter().map(|id| (by_id[id], &theta)).collect();
        let results = train_round(ctx, &exec, &jobs, t, cfg.seed, cfg.local_iterations)?;
        let (client_records, updates): (Vec<ClientRecord>, Vec<Option<ClientUpdate>>) = results.into_iter().unzip();
        let updates: Vec<ClientUpdate> = updates.into_iter().flatten().collect();
        let skipped = updates.is_empty();
        if !skipped {
            theta = if cfg.is_fedavg() {
                fedavg_aggregate(&theta, &updates)?
            } else {
                server.step(&theta, &pseudo_gradient(&theta, &updates)?)?
            };
        }
        let validation = if is_eval_round(t, cfg.rounds, cfg.eval_interval) {
            ctx.evaluate(&theta)?
        } else {
            None
        };
        if let Some(v) = &validation {
            track_best(&mut best, t, v, &theta);
        }
        let record = RoundRecord {
            round: t,
            cluster_id: None,
            selected,
            clients: client_records,
            skipped,
            top_aggregation: false,
            checksum: theta.checksum(),
            validation,
        };
        sink(&record)?;
        records.push(record);
    }
    Ok(RunOutput {
        final_params: theta,
        best,
        records,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CentralizedConfig {
    pub epochs: usize,
    /// Keep the optimizer state across epochs (ordinary training). When
    /// false every epoch starts from fresh state, as a federated client would.
    pub persist_optimizer: bool,
    pub eval_interval: usize,
    pub seed: u64,
}

impl Default for CentralizedConfig {
    fn default() -> Self {
        CentralizedConfig {
            epochs: 3,
            persist_optimizer: true,
            eval_interval: 1,
            seed: 0,
        }
    }
}

/// Epoch-wise training on one dataset holding all the data. Epoch `e` uses
/// the same seed a federated run gives that client in round `e`.
pub fn train_centralized(
    cfg: &CentralizedConfig,
    ctx: &RunContext,
    data: &ClientDataset,
    theta0: ParamVector,
    sink: &mut dyn FnMut(&RoundRecord) -> Result<()>,
) -> Result<RunOutput> {
    ctx.local.validate()?;
    theta0.check_spec(ctx.spec)?;
    if cfg.eval_interval == 0 {
        return Err(Error::config("eval_interval must be >= 1"));
    }
    let mut theta = theta0;
    let mut trainer = LocalTrainer::new(ctx.local.train.optimizer, theta.len());
    let mut best = None;
    let mut records = Vec::with_capacity(cfg.epochs);
    for e in 0..cfg.epochs {
        if !cfg.persist_optimizer {
            trainer = LocalTrainer::new(ctx.local.train.optimizer, theta.len());
        }
        let mut local = *ctx.local;
        local.train.seed = seed::derive(cfg.seed, Stream::Local, &[e as u64, data.id().0 as u64]);
        let stats = trainer.run(&mut theta, ctx.spec, data, &local)?;
        let validation = if is_eval_round(e, cfg.epochs, cfg.eval_interval) {
            ctx.evaluate(&theta)?
        } else {
            None
        };
        if let Some(v) = &validation {
            track_best(&mut best, e, v, &theta);
        }
        let record = RoundRecord {
            round: e,
            cluster_id: None,
            selected: vec![data.id()],
            clients: vec![ClientRecord::new(data.origin(), &stats)],
            skipped: stats.n_samples == 0,
            top_aggregation: false,
            checksum: theta.checksum(),
            validation,
        };
        sink(&record)?;
        records.push(record);
    }
    Ok(RunOutput {
        final_params: theta,
        best,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Activation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(p_in: usize) -> EmbedderSpec {
        EmbedderSpec {
            input_dim: p_in,
            hidden_dims: vec![3],
            output_dim: 2,
            activation: Activation::Tanh,
            l2_normalize: false,
        }
    }

    fn random_update(rng: &mut ChaCha8Rng, s: &EmbedderSpec, id: u32, n: usize) -> ClientUpdate {
        let mut p = ParamVector::zeros(s);
        p.values_mut().iter_mut().for_each(|v| *v = rng.random_range(-2.0..2.0));
        ClientUpdate {
            client_id: ClientId(id),
            params: p,
            n_samples: n,
        }
    }

    #[test]
    fn single_client_aggregate_is_that_client() {
        let s = spec(2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cur = init_params(&s, 0).unwrap();
        let u = random_update(&mut rng, &s, 3, 17);
        assert_eq!(fedavg_aggregate(&cur, &[u.clone()]).unwrap(), u.params);
        let d = pseudo_gradient(&cur, &[u.clone()]).unwrap();
        for i in 0..d.len() {
            assert_eq!(d[i], cur.values()[i] - u.params.values()[i]);
        }
    }

    #[test]
    fn equal_weights_average() {
        let s = spec(2);
        let cur = ParamVector::zeros(&s);
        let mut twos = cur.clone();
        twos.values_mut().iter_mut().for_each(|v| *v = 2.0);
        let ups = [
            ClientUpdate { client_id: ClientId(0), params: cur.clone(), n_samples: 4 },
            ClientUpdate { client_id: ClientId(1), params: twos, n_samples: 4 },
        ];
        assert!(fedavg_aggregate(&cur, &ups).unwrap().values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn weighted_sum_matches_straight_line_oracle() {
        let s = spec(3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cur = init_params(&s, 1).unwrap();
        let ups: Vec<ClientUpdate> = (0..3).map(|k| random_update(&mut rng, &s, k, k as usize + 1)).collect();
        let agg = fedavg_aggregate(&cur, &ups).unwrap();
        for i in 0..cur.len() {
            let oracle = (1.0 * ups[0].params.values()[i]
                + 2.0 * ups[1].params.values()[i]
                + 3.0 * ups[2].params.values()[i])
                / 6.0;
            assert!((agg.values()[i] - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregation_ignores_update_order() {
        let s = spec(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cur = init_params(&s, 1).unwrap();
        let mut ups: Vec<ClientUpdate> = (0..5).map(|k| random_update(&mut rng, &s, k, 3 + k as usize)).collect();
        let a = fedavg_aggregate(&cur, &ups).unwrap();
        let da = pseudo_gradient(&cur, &ups).unwrap();
        ups.reverse();
        ups.swap(0, 2);
        assert_eq!(a, fedavg_aggregate(&cur, &ups).unwrap());
        assert_eq!(da, pseudo_gradient(&cur, &ups).unwrap());
    }

    #[test]
    fn empty_and_identical_updates() {
        let s = spec(2);
        let cur = init_params(&s, 5).unwrap();
        assert_eq!(fedavg_aggregate(&cur, &[]).unwrap(), cur);
        assert!(pseudo_gradient(&cur, &[]).unwrap().iter().all(|&d| d == 0.0));
        let same: Vec<ClientUpdate> = (0..3)
            .map(|k| ClientUpdate { client_id: ClientId(k), params: cur.clone(), n_samples: 1 + k as usize })
            .collect();
        assert!(pseudo_gradient(&cur, &same).unwrap().iter().all(|&d| d == 0.0));
        let zero = ClientUpdate { client_id: ClientId(0), params: cur.clone(), n_samples: 0 };
        assert!(fedavg_aggregate(&cur, &[zero]).is_err());
    }

    #[test]
    fn sgd_unit_rate_matches_fedavg() {
        let s = spec(4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..100 {
            let cur = init_params(&s, trial).unwrap();
            let n = rng.random_range(1..6);
            let ups: Vec<ClientUpdate> =
                (0..n)
                .map(|k| {
                    let w = rng.random_range(1..50);
                    random_update(&mut rng, &s, k, w)
                })
                .collect();
            let direct = fedavg_aggregate(&cur, &ups).unwrap();
            let mut opt = ServerOpt::new(ServerOptimizer::Sgd, 1.0, 0.0, cur.len());
            let via = opt.step(&cur, &pseudo_gradient(&cur, &ups).unwrap()).unwrap();
            for (a, b) in direct.values().iter().zip(via.values()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    fn scalar_spec() -> EmbedderSpec {
        EmbedderSpec {
            input_dim: 1,
            hidden_dims: vec![],
            output_dim: 1,
            activation: Activation::Relu,
            l2_normalize: false,
        }
    }

    #[test]
    fn sgdm_three_steps_match_hand_recursion() {
        let s = scalar_spec();
        let mut theta = ParamVector::zeros(&s);
        theta.values_mut()[0] = 1.0;
        let mut opt = ServerOpt::new(ServerOptimizer::Sgdm, 0.1, 0.9, 2);
        // v1 = 0.5, x = 1 - 0.05 = 0.95
        // v2 = 0.45 + 0.2 = 0.65, x = 0.95 - 0.065 = 0.885
        // v3 = 0.585 - 0.1 = 0.485, x = 0.885 - 0.0485 = 0.8365
        let expected = [0.95, 0.885, 0.8365];
        for (d, e) in [0.5, 0.2, -0.1].iter().zip(expected) {
            theta = opt.step(&theta, &[*d, 0.0]).unwrap();
            assert!((theta.values()[0] - e).abs() < 1e-15, "{}", theta.values()[0]);
        }
    }

    #[test]
    fn zero_pseudo_gradient_keeps_parameters() {
        let s = spec(2);
        let cur = init_params(&s, 2).unwrap();
        let zero = vec![0.0; cur.len()];
        for kind in [ServerOptimizer::Sgd, ServerOptimizer::Sgdm, ServerOptimizer::Adam, ServerOptimizer::Adagrad] {
            let (lr, m) = kind.default_hyperparameters();
            let mut opt = ServerOpt::new(kind, lr, m, cur.len());
            let mut theta = cur.clone();
            for _ in 0..4 {
                theta = opt.step(&theta, &zero).unwrap();
            }
            assert_eq!(theta, cur, "{kind:?}");
        }
    }

    #[test]
    fn adagrad_first_step() {
        let s = scalar_spec();
        let theta = ParamVector::zeros(&s);
        let mut opt = ServerOpt::new(ServerOptimizer::Adagrad, 0.01, 0.9, 2);
        let next = opt.step(&theta, &[2.0, 0.0]).unwrap();
        // m = 0.2, acc = 4 -> step 0.01 * 0.2 / 2
        assert!((next.values()[0] + 0.001).abs() < 1e-10);
    }

    #[test]
    fn non_finite_pseudo_gradient_is_rejected() {
        let s = scalar_spec();
        let mut opt = ServerOpt::new(ServerOptimizer::Sgd, 1.0, 0.0, 2);
        assert!(matches!(
            opt.step(&ParamVector::zeros(&s), &[f64::NAN, 0.0]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn selection_is_deterministic_and_bounded() {
        let pool: Vec<ClientId> = (0..10).map(ClientId).collect();
        let a = select_clients(&pool, 4, 3, 99, None).unwrap();
        assert_eq!(a, select_clients(&pool, 4, 3, 99, None).unwrap());
        assert_eq!(a.len(), 3);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(select_clients(&pool, 0, 50, 1, None).unwrap(), pool);
        assert!(select_clients(&[], 0, 1, 1, None).is_err());
    }

    #[test]
    fn weighted_selection_frequencies() {
        let pool = [ClientId(0), ClientId(1)];
        let w = [3.0, 1.0];
        let n = 10_000;
        let first = (0..n)
            .filter(|&t| select_clients(&pool, t, 1, 5, Some(&w)).unwrap()[0] == ClientId(0))
            .count();
        let f = first as f64 / n as f64;
        assert!((f - 0.75).abs() < 0.02, "{f}");
    }

    #[test]
    fn budget_arithmetic() {
        assert_eq!(rounds_for_budget(1000, 10, 5).unwrap(), 20);
        assert!(rounds_for_budget(1001, 10, 5).is_err());
        let cfg = FederationConfig {
            rounds: 20,
            local_iterations: Some(10),
            total_iterations: Some(999),
            ..Default::default()
        };
        assert!(cfg.validate().unwrap_err().is_config_error());
        assert!(FederationConfig {
            total_iterations: Some(1000),
            ..cfg
        }
        .validate()
        .is_ok());
    }
}
