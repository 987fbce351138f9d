//! Two-tier federated training: one server per geographic cluster and a top
//! server that merges the cluster models every few rounds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::ClientDataset;
use crate::error::{Error, Result};
use crate::federation::{
    fedavg_aggregate, is_eval_round, select_in_group, track_best, train_round, ClientRecord,
    ClientUpdate, Executor, FederationConfig, RoundRecord, RunContext, RunOutput, SelectionPlan,
};
use crate::geo::{ClientId, GeoSample};
use crate::model::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterLevel {
    #[default]
    City,
    Continent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub level: ClusterLevel,
    pub clusters: BTreeMap<u32, Vec<ClientId>>,
    pub clients_per_cluster_per_round: usize,
    /// Rounds between top-level aggregations.
    pub aggregation_interval: usize,
}

pub const DEFAULT_AGGREGATION_INTERVAL: usize = 15;
pub const DEFAULT_CLIENTS_PER_CLUSTER: usize = 5;

fn majority<T: Ord + Copy>(items: impl Iterator<Item = T>) -> Option<T> {
    let mut counts: BTreeMap<T, usize> = BTreeMap::new();
    for i in items {
        *counts.entry(i).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(k, _)| k)
}

/// Cluster of a client: the city or continent holding most of its images.
pub fn cluster_of(client: &ClientDataset, level: ClusterLevel) -> u32 {
    let all = || client.queries().iter().chain(client.database());
    match level {
        ClusterLevel::City => majority(all().map(|s: &GeoSample| s.city_id.0)).unwrap_or(0),
        ClusterLevel::Continent => client.continent_id().0,
    }
}

impl ClusterSpec {
    /// Groups `clients` by city or continent metadata.
    pub fn from_metadata(
        clients: &[ClientDataset],
        level: ClusterLevel,
        clients_per_cluster_per_round: usize,
        aggregation_interval: usize,
    ) -> Self {
        let mut clusters: BTreeMap<u32, Vec<ClientId>> = BTreeMap::new();
        for c in clients {
            clusters.entry(cluster_of(c, level)).or_default().push(c.id());
        }
        clusters.values_mut().for_each(|v| v.sort_unstable());
        ClusterSpec {
            level,
            clusters,
            clients_per_cluster_per_round,
            aggregation_interval,
        }
    }

    /// Non-empty clusters in ascending id order.
    pub fn active_clusters(&self) -> Vec<(u32, &[ClientId])> {
        self.clusters
            .iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(k, v)| (*k, v.as_slice()))
            .collect()
    }

    /// The flat selection plan that draws exactly the clients this
    /// hierarchy draws each round.
    pub fn selection_plan(&self) -> SelectionPlan {
        SelectionPlan::Stratified(self.active_clusters().into_iter().map(|(_, v)| v.to_vec()).collect())
    }

    fn validate(&self, clients: &[ClientDataset]) -> Result<()> {
        if self.aggregation_interval == 0 {
            return Err(Error::config("aggregation_interval must be >= 1"));
        }
        if self.clients_per_cluster_per_round == 0 {
            return Err(Error::config("clients_per_cluster_per_round must be >= 1"));
        }
        let mut seen: BTreeMap<ClientId, u32> = BTreeMap::new();
        for (&c, members) in &self.clusters {
            for &m in members {
                if let Some(prev) = seen.insert(m, c) {
                    return Err(Error::config(format!("client {m} is in clusters {prev} and {c}")));
                }
            }
        }
        let known: std::collections::BTreeSet<ClientId> = clients.iter().map(|c| c.id()).collect();
        if seen.len() != known.len() || seen.keys().any(|k| !known.contains(k)) {
            return Err(Error::config("clusters must partition the training clients"));
        }
        if self.active_clusters().is_empty() {
            return Err(Error::invalid("no non-empty cluster"));
        }
        Ok(())
    }
}

/// Hierarchical training. Every round each cluster draws its clients, trains
/// them from the cluster model and FedAvg-aggregates the results into it.
/// Every `aggregation_interval` rounds, and after the last round, the top
/// server averages the cluster models weighted by the samples each cluster
/// processed since the previous top aggregation and broadcasts the result
/// to every cluster. The returned parameters are the last top aggregate.
///
/// Uses `fed.rounds`, `fed.seed`, `fed.local_iterations` and
/// `fed.eval_interval`; the cluster and top servers always run FedAvg.
pub fn run_hierarchical(
    fed: &FederationConfig,
    clusters: &ClusterSpec,
    ctx: &RunContext,
    clients: &[ClientDataset],
    theta0: ParamVector,
    sink: &mut dyn FnMut(&RoundRecord) -> Result<()>,
) -> Result<RunOutput> {
    fed.validate()?;
    ctx.local.validate()?;
    theta0.check_spec(ctx.spec)?;
    if fed.fedvc.is_some() {
        return Err(Error::config("fedvc is not supported by hierarchical runs"));
    }
    clusters.validate(clients)?;
    let by_id: BTreeMap<ClientId, &ClientDataset> = clients.iter().map(|c| (c.id(), c)).collect();
    let active = clusters.active_clusters();
    let exec = Executor::new(ctx.workers)?;

    let mut top = theta0;
    let mut cluster_params: Vec<ParamVector> = vec![top.clone(); active.len()];
    let mut since_sync = vec![0usize; active.len()];
    let mut best = None;
    let mut records = Vec::new();
    for t in 0..fed.rounds {
        let mut selections = Vec::with_capacity(active.len());
        let mut jobs: Vec<(&ClientDataset, &ParamVector)> = Vec::new();
        for (gi, (_, members)) in active.iter().enumerate() {
            let sel = select_in_group(members, t, gi, clusters.clients_per_cluster_per_round, fed.seed, None)?;
            jobs.extend(sel.iter().map(|id| (by_id[id], &cluster_params[gi])));
            selections.push(sel);
        }
        let mut results = train_round(ctx, &exec, &jobs, t, fed.seed, fed.local_iterations)?.into_iter();

        let mut round_records = Vec::with_capacity(active.len());
        for (gi, (cluster_id, _)) in active.iter().enumerate() {
            let (client_records, updates): (Vec<ClientRecord>, Vec<Option<ClientUpdate>>) =
                results.by_ref().take(selections[gi].len()).unzip();
            let updates: Vec<ClientUpdate> = updates.into_iter().flatten().collect();
            let skipped = updates.is_empty();
            if !skipped {
                cluster_params[gi] = fedavg_aggregate(&cluster_params[gi], &updates)?;
                since_sync[gi] += updates.iter().map(|u| u.n_samples).sum::<usize>();
            }
            round_records.push(RoundRecord {
                round: t,
                cluster_id: Some(*cluster_id),
                selected: selections[gi].clone(),
                clients: client_records,
                skipped,
                top_aggregation: false,
                checksum: cluster_params[gi].checksum(),
                validation: None,
            });
        }

        let sync = (t + 1) % clusters.aggregation_interval == 0 || t + 1 == fed.rounds;
        if sync {
            let contributions: Vec<ClientUpdate> = cluster_params
                .iter()
                .zip(&since_sync)
                .zip(&active)
                .filter(|((_, &n), _)| n > 0)
                .map(|((p, &n), (c, _))| ClientUpdate {
                    client_id: ClientId(*c),
                    params: p.clone(),
                    n_samples: n,
                })
                .collect();
            top = fedavg_aggregate(&top, &contributions)?;
            cluster_params.iter_mut().for_each(|p| *p = top.clone());
            since_sync.iter_mut().for_each(|n| *n = 0);
        }
        let evaluate = is_eval_round(t, fed.rounds, fed.eval_interval);
        for r in round_records {
            sink(&r)?;
            records.push(r);
        }
        if sync || evaluate {
            let validation = if evaluate { ctx.evaluate(&top)? } else { None };
            if let Some(v) = &validation {
                track_best(&mut best, t, v, &top);
            }
            let record = RoundRecord {
                round: t,
                cluster_id: None,
                selected: Vec::new(),
                clients: Vec::new(),
                skipped: false,
                top_aggregation: sync,
                checksum: top.checksum(),
                validation,
            };
            sink(&record)?;
            records.push(record);
        }
    }
    Ok(RunOutput {
        final_params: top,
        best,
        records,
    })
}
