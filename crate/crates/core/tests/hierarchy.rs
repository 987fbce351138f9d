mod common;

use common::{local_config, small_clients, small_embedder};
use placefl_core::federation::{run_federation, FedVcConfig, FederationConfig, RoundRecord, RunContext, SelectionPlan};
use placefl_core::hierarchy::{run_hierarchical, ClusterLevel, ClusterSpec};
use placefl_core::model::init_params;

fn no_sink() -> impl FnMut(&RoundRecord) -> placefl_core::Result<()> {
    |_| Ok(())
}

fn fed(rounds: usize) -> FederationConfig {
    FederationConfig {
        rounds,
        clients_per_round: 2,
        seed: 5,
        ..Default::default()
    }
}

#[test]
fn interval_one_collapses_to_flat_fedavg() {
    let (_, clients) = small_clients(0);
    let spec = small_embedder();
    let local = local_config();
    let ctx = RunContext { spec: &spec, local: &local, validation: None, ks: &[1], workers: None };
    let clusters = ClusterSpec::from_metadata(&clients, ClusterLevel::City, 2, 1);
    assert_eq!(clusters.active_clusters().len(), 2);
    let theta0 = init_params(&spec, 3).unwrap();
    let h = run_hierarchical(&fed(6), &clusters, &ctx, &clients, theta0.clone(), &mut no_sink()).unwrap();
    let f = run_federation(&fed(6), &ctx, &clients, theta0.clone(), &clusters.selection_plan(), &mut no_sink()).unwrap();
    assert_ne!(f.final_params, theta0);
    let max_diff = h
        .final_params
        .values()
        .iter()
        .zip(f.final_params.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(max_diff <= 1e-10, "{max_diff}");
    // The same clients were drawn every round.
    for t in 0..6 {
        let mut drawn: Vec<_> = h
            .records
            .iter()
            .filter(|r| r.round == t && r.cluster_id.is_some())
            .flat_map(|r| r.selected.clone())
            .collect();
        drawn.sort_unstable();
        assert_eq!(drawn, f.records[t].selected);
    }
}

#[test]
fn one_cluster_is_the_flat_run() {
    let (_, clients) = small_clients(1);
    let spec = small_embedder();
    let local = local_config();
    let ctx = RunContext { spec: &spec, local: &local, validation: None, ks: &[1], workers: None };
    let theta0 = init_params(&spec, 0).unwrap();
    let mut everyone = ClusterSpec::from_metadata(&clients, ClusterLevel::City, 2, 4);
    let all: Vec<_> = clients.iter().map(|c| c.id()).collect();
    everyone.clusters = [(0, all)].into_iter().collect();
    let h = run_hierarchical(&fed(5), &everyone, &ctx, &clients, theta0.clone(), &mut no_sink()).unwrap();
    let f = run_federation(&fed(5), &ctx, &clients, theta0, &SelectionPlan::Uniform, &mut no_sink()).unwrap();
    assert_eq!(h.final_params, f.final_params);
}

#[test]
fn interval_equal_to_rounds_aggregates_once() {
    let (_, clients) = small_clients(0);
    let spec = small_embedder();
    let local = local_config();
    let ctx = RunContext { spec: &spec, local: &local, validation: None, ks: &[1], workers: None };
    let clusters = ClusterSpec::from_metadata(&clients, ClusterLevel::City, 2, 4);
    let out = run_hierarchical(&fed(4), &clusters, &ctx, &clients, init_params(&spec, 0).unwrap(), &mut no_sink()).unwrap();
    let tops: Vec<_> = out.records.iter().filter(|r| r.top_aggregation).collect();
    assert_eq!(tops.len(), 1);
    assert_eq!(tops[0].round, 3);
    assert_eq!(tops[0].checksum, out.final_params.checksum());
}

#[test]
fn clusters_evolve_independently_between_aggregations() {
    let (_, clients) = small_clients(0);
    let spec = small_embedder();
    let local = local_config();
    let ctx = RunContext { spec: &spec, local: &local, validation: None, ks: &[1], workers: None };
    let clusters = ClusterSpec::from_metadata(&clients, ClusterLevel::City, 2, 3);
    let theta0 = init_params(&spec, 2).unwrap();
    let base = run_hierarchical(&fed(5), &clusters, &ctx, &clients, theta0.clone(), &mut no_sink()).unwrap();

    // Rebuild cluster 0's clients from features pushed far away.
    let mut perturbed = clients.clone();
    for (i, c) in clients.iter().enumerate() {
        if clusters.clusters[&0].contains(&c.id()) {
            let shift = |s: &placefl_core::geo::GeoSample| {
                let mut s = s.clone();
                s.feat.iter_mut().for_each(|v| *v = -2.0 * *v + 0.5);
                s
            };
            perturbed[i] = placefl_core::dataset::ClientDataset::build(
                c.id(),
                c.queries().iter().map(shift).collect(),
                c.database().iter().map(shift).collect(),
                25.0,
                25.0,
            )
            .unwrap();
        }
    }
    let changed = run_hierarchical(&fed(5), &clusters, &ctx, &perturbed, theta0, &mut no_sink()).unwrap();
    let cluster_checksums = |out: &placefl_core::federation::RunOutput, id: u32| -> Vec<(usize, String)> {
        out.records
            .iter()
            .filter(|r| r.cluster_id == Some(id))
            .map(|r| (r.round, r.checksum.clone()))
            .collect()
    };
    let (b0, c0) = (cluster_checksums(&base, 0), cluster_checksums(&changed, 0));
    let (b1, c1) = (cluster_checksums(&base, 1), cluster_checksums(&changed, 1));
    // Before the first top aggregation (after round 2) cluster 1 is untouched.
    assert_eq!(b1[..2], c1[..2]);
    assert_ne!(b0[0], c0[0]);
    // Afterwards the perturbation reaches cluster 1 through the broadcast.
    assert_ne!(b1[3], c1[3]);
}

#[test]
fn cluster_count_and_rejections() {
    let (_, clients) = small_clients(2);
    let by_city = ClusterSpec::from_metadata(&clients, ClusterLevel::City, 1, 2);
    let cities: std::collections::BTreeSet<_> = clients
        .iter()
        .map(|c| placefl_core::hierarchy::cluster_of(c, ClusterLevel::City))
        .collect();
    assert_eq!(by_city.active_clusters().len(), cities.len());
    let by_continent = ClusterSpec::from_metadata(&clients, ClusterLevel::Continent, 1, 2);
    assert_eq!(by_continent.active_clusters().len(), 1);

    let spec = small_embedder();
    let local = local_config();
    let ctx = RunContext { spec: &spec, local: &local, validation: None, ks: &[1], workers: None };
    let theta0 = init_params(&spec, 0).unwrap();
    let with_vc = FederationConfig { fedvc: Some(FedVcConfig { virtual_size: None }), ..fed(2) };
    assert!(run_hierarchical(&with_vc, &by_city, &ctx, &clients, theta0.clone(), &mut no_sink()).is_err());
    let mut missing = by_city.clone();
    missing.clusters.get_mut(&0).unwrap().pop();
    assert!(run_hierarchical(&fed(2), &missing, &ctx, &clients, theta0.clone(), &mut no_sink()).is_err());
    let mut zero = by_city;
    zero.aggregation_interval = 0;
    assert!(run_hierarchical(&fed(2), &zero, &ctx, &clients, theta0, &mut no_sink()).is_err());
}
