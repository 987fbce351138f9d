//! Turning a manifest into federated clients.
//!
//! Three splits are provided. `Proximity` grows clients around founding
//! images inside a radius, `Clustering` runs k-means over sequence feature
//! centroids per city, and `Random` deals sequences out so that every client
//! sees every city. All of them work city by city and keep only clients with
//! enough query and database sequences.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::ClientDataset;
use crate::error::{Error, Result};
use crate::geo::{geo_distance, CityId, ClientId, ContinentId, GeoSample, Role, SeqId};
use crate::kmeans::{kmeans, KMeansConfig};
use crate::manifest::{Manifest, Sequence};
use crate::seed::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Proximity,
    Clustering,
    Random,
}

impl SplitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::Proximity => "proximity",
            SplitKind::Clustering => "clustering",
            SplitKind::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionSpec {
    pub kind: SplitKind,
    /// Founding radius in meters (proximity).
    pub radius: f64,
    /// Total cluster budget across cities (clustering).
    pub k_total: usize,
    /// Client count (random).
    pub n_clients: usize,
    pub min_query_seqs: usize,
    pub min_db_seqs: usize,
    /// Clients withheld for validation.
    pub validation_clients: usize,
    pub seed: u64,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec {
            kind: SplitKind::Proximity,
            radius: 1000.0,
            k_total: 40,
            n_clients: 40,
            min_query_seqs: 2,
            min_db_seqs: 2,
            validation_clients: 12,
            seed: 0,
        }
    }
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            SplitKind::Proximity if !(self.radius > 0.0 && self.radius.is_finite()) => {
                Err(Error::config("proximity radius must be > 0"))
            }
            SplitKind::Clustering if self.k_total == 0 => Err(Error::config("k_total must be >= 1")),
            SplitKind::Random if self.n_clients == 0 => Err(Error::config("n_clients must be >= 1")),
            _ => Ok(()),
        }
    }
}

/// One client's share of the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientManifest {
    pub client_id: ClientId,
    pub query_seqs: Vec<SeqId>,
    pub db_seqs: Vec<SeqId>,
    pub city_ids: Vec<CityId>,
    pub continent_id: ContinentId,
}

impl ClientManifest {
    pub fn sequence_count(&self) -> usize {
        self.query_seqs.len() + self.db_seqs.len()
    }

    pub fn all_seqs(&self) -> impl Iterator<Item = SeqId> + '_ {
        self.query_seqs.iter().chain(&self.db_seqs).copied()
    }

    pub fn image_count(&self, manifest: &Manifest) -> usize {
        self.all_seqs()
            .filter_map(|s| manifest.sequence(s))
            .map(|s| s.members.len())
            .sum()
    }
}

/// A candidate client before validation and numbering.
fn candidate(manifest: &Manifest, seqs: &[SeqId]) -> ClientManifest {
    let mut query_seqs = Vec::new();
    let mut db_seqs = Vec::new();
    let mut cities = Vec::new();
    let mut continents: BTreeMap<ContinentId, usize> = BTreeMap::new();
    for &id in seqs {
        let s = manifest.sequence(id).expect("sequence from this manifest");
        match s.role {
            Role::Query => query_seqs.push(id),
            Role::Database => db_seqs.push(id),
        }
        cities.push(s.city_id);
        *continents.entry(s.continent_id).or_default() += s.members.len();
    }
    query_seqs.sort_unstable();
    db_seqs.sort_unstable();
    cities.sort_unstable();
    cities.dedup();
    let continent_id = continents
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(c, _)| c)
        .unwrap_or(ContinentId(0));
    ClientManifest {
        client_id: ClientId(0),
        query_seqs,
        db_seqs,
        city_ids: cities,
        continent_id,
    }
}

fn is_valid(c: &ClientManifest, spec: &PartitionSpec) -> bool {
    c.query_seqs.len() >= spec.min_query_seqs && c.db_seqs.len() >= spec.min_db_seqs
}

fn number(mut clients: Vec<ClientManifest>) -> Vec<ClientManifest> {
    for (i, c) in clients.iter_mut().enumerate() {
        c.client_id = ClientId(i as u32);
    }
    clients
}

fn by_city(manifest: &Manifest) -> BTreeMap<CityId, Vec<&Sequence>> {
    let mut out: BTreeMap<CityId, Vec<&Sequence>> = BTreeMap::new();
    for s in manifest.sequences() {
        out.entry(s.city_id).or_default().push(s);
    }
    out
}

/// Runs the split named by `spec.kind`.
pub fn split(manifest: &Manifest, spec: &PartitionSpec) -> Result<Vec<ClientManifest>> {
    spec.validate()?;
    Ok(match spec.kind {
        SplitKind::Proximity => split_proximity(manifest, spec),
        SplitKind::Clustering => split_clustering(manifest, spec),
        SplitKind::Random => split_random(manifest, spec),
    })
}

/// Grows clients around founding images. Within each city, query sequences
/// are visited in a seeded order; the first image of the next unassigned one
/// founds a candidate that takes every unassigned sequence with some image
/// within `spec.radius`. Candidates failing validation still consume their
/// sequences.
pub fn split_proximity(manifest: &Manifest, spec: &PartitionSpec) -> Vec<ClientManifest> {
    let samples = manifest.samples();
    let mut clients = Vec::new();
    for (city, seqs) in by_city(manifest) {
        let mut order: Vec<usize> = (0..seqs.len()).filter(|&i| seqs[i].role == Role::Query).collect();
        order.shuffle(&mut seed::rng(spec.seed, Stream::Partition, &[0, city.0 as u64]));
        let mut assigned = vec![false; seqs.len()];
        for &start in &order {
            if assigned[start] {
                continue;
            }
            let founding = samples[seqs[start].members[0]].tag;
            let mut members = Vec::new();
            for (j, s) in seqs.iter().enumerate() {
                if assigned[j] {
                    continue;
                }
                if s.members
                    .iter()
                    .any(|&i| geo_distance(founding, samples[i].tag) <= spec.radius)
                {
                    assigned[j] = true;
                    members.push(s.id);
                }
            }
            let c = candidate(manifest, &members);
            if is_valid(&c, spec) {
                clients.push(c);
            }
        }
    }
    number(clients)
}

/// Splits `total` into parts proportional to `weights` with largest-remainder
/// rounding, then raises every part to at least 1. Ties in the remainder go
/// to the earlier index.
pub fn allocate_largest_remainder(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![1; weights.len()];
    }
    let mut parts: Vec<usize> = weights.iter().map(|&w| total * w / sum).collect();
    let mut rest: Vec<(usize, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| ((total * w) % sum, i))
        .collect();
    rest.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let assigned: usize = parts.iter().sum();
    for &(_, i) in rest.iter().take(total - assigned) {
        parts[i] += 1;
    }
    parts.iter_mut().for_each(|p| *p = (*p).max(1));
    parts
}

/// Mean feature vector of each sequence's images.
pub fn sequence_centroid(manifest: &Manifest, seq: &Sequence) -> Vec<f64> {
    let mut c = vec![0.0; manifest.feature_dim()];
    for &i in &seq.members {
        for (a, v) in c.iter_mut().zip(&manifest.samples()[i].feat) {
            *a += v;
        }
    }
    let n = seq.members.len() as f64;
    c.iter_mut().for_each(|a| *a /= n);
    c
}

/// Per-city k-means over sequence feature centroids. Each city gets a share
/// of `spec.k_total` proportional to its sequence count.
pub fn split_clustering(manifest: &Manifest, spec: &PartitionSpec) -> Vec<ClientManifest> {
    let cities = by_city(manifest);
    let counts: Vec<usize> = cities.values().map(Vec::len).collect();
    let ks = allocate_largest_remainder(spec.k_total, &counts);
    let mut clients = Vec::new();
    for ((city, seqs), k) in cities.iter().zip(ks) {
        let points: Vec<Vec<f64>> = seqs.iter().map(|s| sequence_centroid(manifest, s)).collect();
        let mut rng = seed::rng(spec.seed, Stream::Partition, &[1, city.0 as u64]);
        let km = kmeans(&points, k.min(seqs.len()), &KMeansConfig::default(), &mut rng);
        let mut groups: Vec<Vec<SeqId>> = vec![Vec::new(); km.centroids.len()];
        for (s, &a) in seqs.iter().zip(&km.assignments) {
            groups[a].push(s.id);
        }
        for g in groups.into_iter().filter(|g| !g.is_empty()) {
            let c = candidate(manifest, &g);
            if is_valid(&c, spec) {
                clients.push(c);
            }
        }
    }
    number(clients)
}

/// Deals sequences so every client holds at least one sequence of every
/// city, duplicating a city's sequences cyclically when it has fewer than
/// `spec.n_clients`. Leftover sequences are pooled, shuffled and dealt
/// round-robin.
pub fn split_random(manifest: &Manifest, spec: &PartitionSpec) -> Vec<ClientManifest> {
    let n = spec.n_clients;
    let mut holdings: Vec<Vec<SeqId>> = vec![Vec::new(); n];
    let mut leftover = Vec::new();
    for (city, seqs) in by_city(manifest) {
        let mut ids: Vec<SeqId> = seqs.iter().map(|s| s.id).collect();
        ids.shuffle(&mut seed::rng(spec.seed, Stream::Partition, &[2, city.0 as u64]));
        for (c, h) in holdings.iter_mut().enumerate() {
            h.push(ids[c % ids.len()]);
        }
        if ids.len() > n {
            leftover.extend_from_slice(&ids[n..]);
        }
    }
    leftover.sort_unstable();
    leftover.shuffle(&mut seed::rng(spec.seed, Stream::Partition, &[3]));
    for (i, s) in leftover.into_iter().enumerate() {
        holdings[i % n].push(s);
    }
    let clients = holdings
        .iter()
        .map(|h| candidate(manifest, h))
        .filter(|c| is_valid(c, spec))
        .collect();
    number(clients)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionStats {
    pub clients: usize,
    pub seqs_mean: f64,
    pub seqs_std: f64,
    pub images_mean: f64,
    pub images_std: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn partition_stats(manifest: &Manifest, clients: &[ClientManifest]) -> Result<PartitionStats> {
    if clients.is_empty() {
        return Err(Error::invalid("partition has no clients"));
    }
    let seqs: Vec<f64> = clients.iter().map(|c| c.sequence_count() as f64).collect();
    let images: Vec<f64> = clients.iter().map(|c| c.image_count(manifest) as f64).collect();
    let (seqs_mean, seqs_std) = mean_std(&seqs);
    let (images_mean, images_std) = mean_std(&images);
    Ok(PartitionStats {
        clients: clients.len(),
        seqs_mean,
        seqs_std,
        images_mean,
        images_std,
    })
}

/// Withholds `count` randomly chosen clients for validation. Returns
/// (training, validation), each ascending by client id.
pub fn holdout(
    clients: Vec<ClientManifest>,
    count: usize,
    seed: u64,
) -> Result<(Vec<ClientManifest>, Vec<ClientManifest>)> {
    if count >= clients.len() {
        return Err(Error::config(format!(
            "cannot hold out {count} of {} clients and still train",
            clients.len()
        )));
    }
    let mut rng = seed::rng(seed, Stream::Holdout, &[]);
    let mut picked = rand::seq::index::sample(&mut rng, clients.len(), count).into_vec();
    picked.sort_unstable();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, c) in clients.into_iter().enumerate() {
        if picked.binary_search(&i).is_ok() {
            val.push(c);
        } else {
            train.push(c);
        }
    }
    Ok((train, val))
}

/// Query and database samples of a client, in sequence order.
pub fn client_samples(manifest: &Manifest, client: &ClientManifest) -> (Vec<GeoSample>, Vec<GeoSample>) {
    let take = |seqs: &[SeqId]| -> Vec<GeoSample> {
        seqs.iter()
            .flat_map(|&s| manifest.sequence_samples(s).cloned())
            .collect()
    };
    (take(&client.query_seqs), take(&client.db_seqs))
}

pub fn build_client_dataset(
    manifest: &Manifest,
    client: &ClientManifest,
    tau: f64,
    tau_neg: f64,
) -> Result<ClientDataset> {
    let (q, d) = client_samples(manifest, client);
    ClientDataset::build(client.client_id, q, d, tau, tau_neg)
}

/// Union of several clients' samples with duplicates (by sample id) removed.
pub fn pooled_samples(manifest: &Manifest, clients: &[ClientManifest]) -> (Vec<GeoSample>, Vec<GeoSample>) {
    let mut seqs: Vec<SeqId> = clients.iter().flat_map(|c| c.all_seqs()).collect();
    seqs.sort_unstable();
    seqs.dedup();
    let mut queries = Vec::new();
    let mut database = Vec::new();
    for s in seqs {
        for sample in manifest.sequence_samples(s) {
            match sample.role {
                Role::Query => queries.push(sample.clone()),
                Role::Database => database.push(sample.clone()),
            }
        }
    }
    (queries, database)
}

/// One JSON record per line.
pub fn write_partition(clients: &[ClientManifest], mut w: impl Write) -> Result<()> {
    for c in clients {
        serde_json::to_writer(&mut w, c)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_partition(r: impl BufRead, origin: &Path) -> Result<Vec<ClientManifest>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Checks that every sequence named by `clients` exists in `manifest`.
pub fn check_against(manifest: &Manifest, clients: &[ClientManifest]) -> Result<()> {
    for c in clients {
        for s in c.all_seqs() {
            if manifest.sequence(s).is_none() {
                return Err(Error::invalid(format!(
                    "client {} references unknown sequence {s}",
                    c.client_id
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{GeoTag, SampleId};

    /// Sequences of 3 images, each laid out eastward from an anchor.
    fn world(anchors: &[(u32, f64, f64, Role, [f64; 2])]) -> Manifest {
        let origin = GeoTag::new(45.0, 7.0).unwrap();
        let mut samples = Vec::new();
        for (seq, &(city, north, east, role, feat)) in anchors.iter().enumerate() {
            for k in 0..3 {
                samples.push(GeoSample {
                    id: SampleId(samples.len() as u64),
                    tag: origin.offset_m(north, east + 10.0 * k as f64).unwrap(),
                    feat: feat.to_vec(),
                    seq_id: SeqId(seq as u64),
                    city_id: CityId(city),
                    continent_id: ContinentId(city / 2),
                    role,
                });
            }
        }
        Manifest::new(2, samples).unwrap()
    }

    fn two_blobs() -> Manifest {
        let mut a = Vec::new();
        for (i, base) in [0.0, 10_000.0].iter().enumerate() {
            for j in 0..6 {
                let role = if j % 2 == 0 { Role::Query } else { Role::Database };
                a.push((0, base + 30.0 * j as f64, 0.0, role, [i as f64 * 10.0, j as f64 * 0.1]));
            }
        }
        world(&a)
    }

    #[test]
    fn everything_within_radius_is_one_client() {
        let m = two_blobs();
        let spec = PartitionSpec {
            radius: 50_000.0,
            ..Default::default()
        };
        let c = split_proximity(&m, &spec);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].sequence_count(), 12);
    }

    #[test]
    fn two_distant_blobs_give_two_clients() {
        let m = two_blobs();
        let spec = PartitionSpec {
            radius: 2000.0,
            ..Default::default()
        };
        let c = split_proximity(&m, &spec);
        assert_eq!(c.len(), 2);
        let origin = GeoTag::new(45.0, 7.0).unwrap();
        for client in &c {
            let north: Vec<bool> = client
                .all_seqs()
                .flat_map(|s| m.sequence_samples(s))
                .map(|s| geo_distance(origin, s.tag) > 5000.0)
                .collect();
            assert!(north.iter().all(|&b| b == north[0]));
        }
    }

    #[test]
    fn invalid_candidates_consume_their_sequences() {
        // One query, one database sequence: never valid.
        let m = world(&[(0, 0.0, 0.0, Role::Query, [0.0; 2]), (0, 5.0, 0.0, Role::Database, [0.0; 2])]);
        assert!(split_proximity(&m, &PartitionSpec::default()).is_empty());
    }

    #[test]
    fn largest_remainder_allocation() {
        assert_eq!(allocate_largest_remainder(10, &[5, 3, 2]), vec![5, 3, 2]);
        // 7 * (1, 1, 1) / 3 -> 2.33 each -> first index gets the extra.
        assert_eq!(allocate_largest_remainder(7, &[1, 1, 1]), vec![3, 2, 2]);
        // Minimum one per city even when the share rounds to zero.
        assert_eq!(allocate_largest_remainder(2, &[100, 1, 1]), vec![2, 1, 1]);
        assert_eq!(allocate_largest_remainder(5, &[0, 0]), vec![1, 1]);
    }

    #[test]
    fn clustering_one_cluster_per_city() {
        let mut a = Vec::new();
        for city in 0..3 {
            for j in 0..4 {
                let role = if j % 2 == 0 { Role::Query } else { Role::Database };
                a.push((city, 50_000.0 * city as f64 + 40.0 * j as f64, 0.0, role, [j as f64, 0.0]));
            }
        }
        let m = world(&a);
        let spec = PartitionSpec {
            kind: SplitKind::Clustering,
            k_total: 3,
            ..Default::default()
        };
        let c = split_clustering(&m, &spec);
        assert_eq!(c.len(), 3);
        for (i, client) in c.iter().enumerate() {
            assert_eq!(client.city_ids, vec![CityId(i as u32)]);
        }
        assert_eq!(c, split_clustering(&m, &spec));
    }

    #[test]
    fn clustering_separates_feature_blobs() {
        let m = two_blobs();
        let spec = PartitionSpec {
            kind: SplitKind::Clustering,
            k_total: 2,
            ..Default::default()
        };
        let c = split_clustering(&m, &spec);
        assert_eq!(c.len(), 2);
        for client in &c {
            let f0: Vec<f64> = client
                .all_seqs()
                .map(|s| m.sequence_samples(s).next().unwrap().feat[0])
                .collect();
            assert!(f0.iter().all(|&v| v == f0[0]));
        }
    }

    #[test]
    fn random_with_one_client_takes_everything_once() {
        let m = two_blobs();
        let spec = PartitionSpec {
            kind: SplitKind::Random,
            n_clients: 1,
            ..Default::default()
        };
        let c = split_random(&m, &spec);
        assert_eq!(c.len(), 1);
        let mut all: Vec<SeqId> = c[0].all_seqs().collect();
        all.sort_unstable();
        assert_eq!(all, (0..12).map(SeqId).collect::<Vec<_>>());
    }

    #[test]
    fn random_duplicates_short_cities_cyclically() {
        let mut a = Vec::new();
        for city in 0..2u32 {
            let n = if city == 0 { 3 } else { 9 };
            for j in 0..n {
                let role = if j % 2 == 0 { Role::Query } else { Role::Database };
                a.push((city, 40.0 * j as f64, 0.0, role, [0.0, 0.0]));
            }
        }
        let m = world(&a);
        let spec = PartitionSpec {
            kind: SplitKind::Random,
            n_clients: 5,
            min_query_seqs: 0,
            min_db_seqs: 0,
            ..Default::default()
        };
        let c = split_random(&m, &spec);
        assert_eq!(c.len(), 5);
        let mut uses: BTreeMap<SeqId, usize> = BTreeMap::new();
        for client in &c {
            assert_eq!(client.city_ids, vec![CityId(0), CityId(1)]);
            for s in client.all_seqs() {
                *uses.entry(s).or_default() += 1;
            }
        }
        let city0_extra: usize = (0..3).map(|s| uses[&SeqId(s)] - 1).sum();
        assert_eq!(city0_extra, 5 - 3);
        assert!((3..12).all(|s| uses[&SeqId(s)] == 1));
    }

    #[test]
    fn stats_use_population_std() {
        let (m, s) = mean_std(&[10.0, 20.0]);
        assert_eq!((m, s), (15.0, 5.0));
        assert_eq!(mean_std(&[7.0]).1, 0.0);
    }

    #[test]
    fn holdout_is_seeded_and_disjoint() {
        let m = two_blobs();
        let spec = PartitionSpec {
            kind: SplitKind::Random,
            n_clients: 3,
            min_query_seqs: 1,
            min_db_seqs: 1,
            ..Default::default()
        };
        let clients = split_random(&m, &spec);
        let (t, v) = holdout(clients.clone(), 1, 4).unwrap();
        assert_eq!((t.len(), v.len()), (2, 1));
        assert_eq!(holdout(clients.clone(), 1, 4).unwrap().1, v);
        assert!(holdout(clients, 3, 4).is_err());
    }

    #[test]
    fn partition_file_round_trip() {
        let m = two_blobs();
        let c = split_proximity(&m, &PartitionSpec { radius: 2000.0, ..Default::default() });
        let mut buf = Vec::new();
        write_partition(&c, &mut buf).unwrap();
        let back = read_partition(buf.as_slice(), Path::new("p.jsonl")).unwrap();
        assert_eq!(back, c);
        check_against(&m, &back).unwrap();
    }
}
