//! Structural checks of the three client splits, written against the
//! manifest alone.

use std::collections::BTreeSet;

use placefl_core::geo::{geo_distance, CityId, Role, SeqId};
use placefl_core::manifest::Manifest;
use placefl_core::partition::{sequence_centroid, ClientManifest, PartitionSpec};

fn roles_and_validity(m: &Manifest, c: &ClientManifest, spec: &PartitionSpec) -> Result<(), String> {
    for &s in &c.query_seqs {
        if m.sequence(s).map(|x| x.role) != Some(Role::Query) {
            return Err(format!("client {}: {s} listed as query", c.client_id));
        }
    }
    for &s in &c.db_seqs {
        if m.sequence(s).map(|x| x.role) != Some(Role::Database) {
            return Err(format!("client {}: {s} listed as database", c.client_id));
        }
    }
    if c.query_seqs.len() < spec.min_query_seqs || c.db_seqs.len() < spec.min_db_seqs {
        return Err(format!(
            "client {} has {} query and {} database sequences",
            c.client_id,
            c.query_seqs.len(),
            c.db_seqs.len()
        ));
    }
    Ok(())
}

fn cities(m: &Manifest, c: &ClientManifest) -> BTreeSet<CityId> {
    c.all_seqs().map(|s| m.sequence(s).unwrap().city_id).collect()
}

fn disjoint(clients: &[ClientManifest]) -> Result<(), String> {
    let mut seen = BTreeSet::new();
    for c in clients {
        for s in c.all_seqs() {
            if !seen.insert(s) {
                return Err(format!("{s} belongs to two clients"));
            }
        }
    }
    Ok(())
}

/// One city per client, disjoint, valid, and some query sequence of the
/// client whose first image is within `radius` of every member sequence.
pub fn check_proximity(m: &Manifest, clients: &[ClientManifest], spec: &PartitionSpec) -> Result<(), String> {
    disjoint(clients)?;
    for c in clients {
        roles_and_validity(m, c, spec)?;
        if cities(m, c).len() != 1 {
            return Err(format!("client {} spans cities", c.client_id));
        }
        let near = |founder: SeqId, s: SeqId| {
            let f = m.sequence_samples(founder).next().unwrap().tag;
            m.sequence_samples(s).any(|x| geo_distance(f, x.tag) <= spec.radius)
        };
        if !c.query_seqs.iter().any(|&f| c.all_seqs().all(|s| near(f, s))) {
            return Err(format!("client {} has no founding sequence covering it", c.client_id));
        }
    }
    Ok(())
}

/// One city per client, disjoint, valid, and every sequence at least as
/// close (in feature space) to its own client's centroid as to any other
/// client centroid of the same city.
pub fn check_clustering(m: &Manifest, clients: &[ClientManifest], spec: &PartitionSpec) -> Result<(), String> {
    disjoint(clients)?;
    let mut means = Vec::new();
    for c in clients {
        roles_and_validity(m, c, spec)?;
        let city = cities(m, c);
        if city.len() != 1 {
            return Err(format!("client {} spans cities", c.client_id));
        }
        let points: Vec<Vec<f64>> = c.all_seqs().map(|s| sequence_centroid(m, m.sequence(s).unwrap())).collect();
        let mut mean = vec![0.0; m.feature_dim()];
        for p in &points {
            for (a, v) in mean.iter_mut().zip(p) {
                *a += v / points.len() as f64;
            }
        }
        means.push((*city.iter().next().unwrap(), mean, points));
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    for (i, (city, own, points)) in means.iter().enumerate() {
        for p in points {
            let d_own = dist(p, own);
            for (j, (other_city, other, _)) in means.iter().enumerate() {
                if j != i && other_city == city && dist(p, other) + 1e-9 < d_own {
                    return Err(format!("a sequence of client {i} is nearer to client {j}"));
                }
            }
        }
    }
    Ok(())
}

/// Every client valid and holding sequences of every city.
pub fn check_random(m: &Manifest, clients: &[ClientManifest], spec: &PartitionSpec) -> Result<(), String> {
    let all: BTreeSet<CityId> = m.cities().into_iter().collect();
    for c in clients {
        roles_and_validity(m, c, spec)?;
        if cities(m, c) != all {
            return Err(format!("client {} misses a city", c.client_id));
        }
    }
    Ok(())
}
