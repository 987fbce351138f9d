//! End-to-end runs: world, partition, training and evaluation for every
//! variant and seed of an experiment configuration.

use std::path::{Path, PathBuf};

use crate::config::{ExperimentConfig, Mode};
use crate::contrastive::LocalConfig;
use crate::dataset::ClientDataset;
use crate::error::{Error, Result};
use crate::federation::{run_federation, train_centralized, RoundRecord, RunContext, RunOutput, SelectionPlan};
use crate::geo::ClientId;
use crate::hierarchy::{run_hierarchical, ClusterSpec};
use crate::manifest::Manifest;
use crate::metrics::{MetricRecord, RunKey, RunSummary};
use crate::model::{init_params, ParamVector};
use crate::partition::{
    build_client_dataset, check_against, holdout, partition_stats, pooled_samples, read_partition, split,
    ClientManifest, PartitionStats,
};
use crate::retrieval::{recall_at_k, EvalSet};
use crate::synth::generate_world;

/// The manifest a run trains on: the configured file, or the world
/// generated from the (seeded) world spec.
pub fn load_or_generate(cfg: &ExperimentConfig) -> Result<Manifest> {
    match &cfg.manifest {
        Some(path) => Manifest::load(path),
        None => generate_world(&cfg.world),
    }
}

/// Clients of a run: the configured partition file, or a fresh split.
pub fn partition_clients(cfg: &ExperimentConfig, manifest: &Manifest) -> Result<Vec<ClientManifest>> {
    match &cfg.partition_file {
        Some(path) => {
            let file = std::fs::File::open(path)?;
            let clients = read_partition(std::io::BufReader::new(file), path)?;
            check_against(manifest, &clients)?;
            Ok(clients)
        }
        None => split(manifest, &cfg.partition),
    }
}

/// Training clients and validation set of one run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub stats: PartitionStats,
    pub train_clients: Vec<ClientManifest>,
    pub validation_clients: Vec<ClientManifest>,
    pub train: Vec<ClientDataset>,
    pub validation: EvalSet,
}

pub fn prepare(cfg: &ExperimentConfig, manifest: &Manifest) -> Result<Prepared> {
    let clients = partition_clients(cfg, manifest)?;
    let stats = partition_stats(manifest, &clients)?;
    let (train_clients, validation_clients) = holdout(clients, cfg.partition.validation_clients, cfg.partition.seed)?;
    let train = train_clients
        .iter()
        .map(|c| build_client_dataset(manifest, c, cfg.mining.tau, cfg.mining.tau_neg))
        .collect::<Result<Vec<_>>>()?;
    let (queries, database) = pooled_samples(manifest, &validation_clients);
    let validation = EvalSet::new(queries, database, cfg.eval.positive_radius)?;
    Ok(Prepared {
        stats,
        train_clients,
        validation_clients,
        train,
        validation,
    })
}

/// All training data as one dataset, for centralized runs.
pub fn centralized_dataset(cfg: &ExperimentConfig, manifest: &Manifest, prepared: &Prepared) -> Result<ClientDataset> {
    let (queries, database) = pooled_samples(manifest, &prepared.train_clients);
    ClientDataset::build(ClientId(0), queries, database, cfg.mining.tau, cfg.mining.tau_neg)
}

/// Trains one variant for one seed. `cfg` must already carry the run seed.
pub fn run_single(
    cfg: &ExperimentConfig,
    key: RunKey,
    manifest: &Manifest,
    sink: &mut dyn FnMut(&MetricRecord) -> Result<()>,
) -> Result<(RunSummary, RunOutput)> {
    let prepared = prepare(cfg, manifest)?;
    let theta0 = init_params(&cfg.embedder, cfg.init_seed)?;
    let ks = &cfg.eval.ks;
    let initial = recall_at_k(&theta0, &cfg.embedder, &prepared.validation, ks)?;
    let local = LocalConfig {
        mining: cfg.mining,
        augment: cfg.augment,
        train: cfg.local,
        augment_seed: cfg.augment_seed,
    };
    let ctx = RunContext {
        spec: &cfg.embedder,
        local: &local,
        validation: Some(&prepared.validation),
        ks,
        workers: cfg.workers,
    };
    let mut forward = |record: &RoundRecord| {
        sink(&MetricRecord::Round {
            key: key.clone(),
            record: record.clone(),
        })
    };
    let output = match cfg.mode {
        Mode::Centralized => {
            let data = centralized_dataset(cfg, manifest, &prepared)?;
            train_centralized(&cfg.centralized, &ctx, &data, theta0, &mut forward)?
        }
        Mode::Federated => run_federation(
            &cfg.federation,
            &ctx,
            &prepared.train,
            theta0,
            &SelectionPlan::Uniform,
            &mut forward,
        )?,
        Mode::Hierarchical => {
            let clusters = ClusterSpec::from_metadata(
                &prepared.train,
                cfg.hierarchy.level,
                cfg.hierarchy.clients_per_cluster_per_round,
                cfg.hierarchy.aggregation_interval,
            );
            run_hierarchical(&cfg.federation, &clusters, &ctx, &prepared.train, theta0, &mut forward)?
        }
    };
    let final_recall = recall_at_k(&output.final_params, &cfg.embedder, &prepared.validation, ks)?;
    let summary = RunSummary {
        key,
        mode: cfg.mode.as_str().to_string(),
        partition: prepared.stats.clone(),
        train_clients: prepared.train.len(),
        validation_clients: prepared.validation_clients.len(),
        initial,
        final_recall,
        best_round: output.best.as_ref().map(|b| b.round),
        best_score: output.best.as_ref().map(|b| b.score),
        final_checksum: output.final_params.checksum(),
    };
    sink(&MetricRecord::Summary(summary.clone()))?;
    Ok((summary, output))
}

/// Checkpoint file of a run: `<study>-<variant index>-seed<seed>-<which>.bin`.
pub fn checkpoint_path(dir: &Path, key: &RunKey, which: &str) -> PathBuf {
    dir.join(format!("{}-{}-seed{}-{which}.bin", key.study, key.variant_index, key.seed))
}

fn save_params(path: &Path, params: &ParamVector) -> Result<()> {
    let file = std::fs::File::create(path)?;
    params.write_to(std::io::BufWriter::new(file))
}

/// Runs every variant for every seed, variant by variant, streaming records
/// to `sink`. Final and best parameters are saved under `checkpoint_dir`
/// when one is given.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    sink: &mut dyn FnMut(&MetricRecord) -> Result<()>,
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<RunSummary>> {
    cfg.validate()?;
    let variants = cfg.variants()?;
    let mut manifests = Vec::with_capacity(cfg.seeds.len());
    for &s in &cfg.seeds {
        let manifest = load_or_generate(&cfg.with_run_seed(s))?;
        if manifest.feature_dim() != cfg.embedder.input_dim {
            return Err(Error::config(format!(
                "manifest has {} features but embedder.input_dim is {}",
                manifest.feature_dim(),
                cfg.embedder.input_dim
            )));
        }
        manifests.push(manifest);
    }
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut summaries = Vec::with_capacity(variants.len() * cfg.seeds.len());
    for (index, variant) in variants.iter().enumerate() {
        for (&s, manifest) in cfg.seeds.iter().zip(&manifests) {
            let key = RunKey {
                study: variant.study.clone(),
                variant: variant.label.clone(),
                variant_index: index,
                seed: s,
            };
            let run_cfg = variant.config.with_run_seed(s);
            let (summary, output) = run_single(&run_cfg, key, manifest, sink)?;
            if let Some(dir) = checkpoint_dir {
                save_params(&checkpoint_path(dir, &summary.key, "final"), &output.final_params)?;
                if let Some(best) = &output.best {
                    save_params(&checkpoint_path(dir, &summary.key, "best"), &best.params)?;
                }
            }
            summaries.push(summary);
        }
    }
    Ok(summaries)
}
