#![allow(dead_code)]

pub mod invariants;

use placefl_core::contrastive::{LocalConfig, LocalTrainConfig};
use placefl_core::dataset::ClientDataset;
use placefl_core::manifest::Manifest;
use placefl_core::model::EmbedderSpec;
use placefl_core::partition::{build_client_dataset, split, PartitionSpec};
use placefl_core::synth::{generate_world, WorldSpec};

pub fn small_world(seed: u64) -> WorldSpec {
    WorldSpec {
        n_cities: 2,
        sequences_per_city: 24,
        images_per_sequence: 6,
        city_radius: 600.0,
        feature_dim: 8,
        seed,
        ..Default::default()
    }
}

pub fn small_embedder() -> EmbedderSpec {
    EmbedderSpec {
        input_dim: 8,
        hidden_dims: vec![8],
        output_dim: 4,
        ..Default::default()
    }
}

pub fn local_config() -> LocalConfig {
    LocalConfig {
        train: LocalTrainConfig {
            lr: 1e-2,
            max_local_iterations: 6,
            ..Default::default()
        },
        ..Default::default()
    }
}

/// Manifest and proximity clients of a small two-city world.
pub fn small_clients(seed: u64) -> (Manifest, Vec<ClientDataset>) {
    let manifest = generate_world(&small_world(seed)).unwrap();
    let spec = PartitionSpec {
        radius: 250.0,
        seed,
        ..Default::default()
    };
    let clients = split(&manifest, &spec)
        .unwrap()
        .iter()
        .map(|c| build_client_dataset(&manifest, c, 25.0, 25.0).unwrap())
        .collect();
    (manifest, clients)
}
