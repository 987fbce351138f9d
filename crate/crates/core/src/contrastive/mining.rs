//! Positive and hard-negative selection in descriptor space.
//!
//! Candidates are ordered by Euclidean distance to the query, ties broken by
//! ascending sample id. That total order makes every selection reproducible
//! and equal to an exhaustive sort.

use std::cmp::Ordering;

use rand::Rng;

use crate::geo::{self, GeoSample, GeoTag, SampleId, SeqId};
use crate::model::euclidean_distance;
use crate::seed;

/// A candidate with its caller-side index and its distance to the query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ranked {
    pub index: usize,
    pub id: SampleId,
    pub distance: f64,
}

fn by_distance_then_id(a: &Ranked, b: &Ranked) -> Ordering {
    a.distance
        .total_cmp(&b.distance)
        .then_with(|| a.id.cmp(&b.id))
}

fn rank<'a>(
    query: &[f64],
    candidates: impl IntoIterator<Item = (usize, SampleId, &'a [f64])>,
) -> Vec<Ranked> {
    candidates
        .into_iter()
        .map(|(index, id, desc)| Ranked {
            index,
            id,
            distance: euclidean_distance(query, desc),
        })
        .collect()
}

/// The candidate positive nearest to the query in descriptor space, or
/// `None` when there are no candidates.
pub fn mine_positive<'a>(
    query: &[f64],
    candidates: impl IntoIterator<Item = (usize, SampleId, &'a [f64])>,
) -> Option<Ranked> {
    rank(query, candidates)
        .into_iter()
        .min_by(by_distance_then_id)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NegativeSelection {
    /// Ascending by distance.
    pub selected: Vec<Ranked>,
    /// How many fewer than requested were available.
    pub shortfall: usize,
}

/// The `n_neg` candidates nearest to the query, ascending.
pub fn mine_negatives<'a>(
    query: &[f64],
    candidates: impl IntoIterator<Item = (usize, SampleId, &'a [f64])>,
    n_neg: usize,
) -> NegativeSelection {
    let mut ranked = rank(query, candidates);
    let take = n_neg.min(ranked.len());
    if take < ranked.len() && take > 0 {
        ranked.select_nth_unstable_by(take - 1, by_distance_then_id);
    }
    ranked.truncate(take);
    ranked.sort_unstable_by(by_distance_then_id);
    NegativeSelection {
        shortfall: n_neg - take,
        selected: ranked,
    }
}

/// `n_neg` candidates drawn uniformly without replacement, then ordered
/// like mined negatives. Used as the no-mining baseline.
pub fn random_negatives<'a, R: Rng>(
    query: &[f64],
    candidates: impl IntoIterator<Item = (usize, SampleId, &'a [f64])>,
    n_neg: usize,
    rng: &mut R,
) -> NegativeSelection {
    let ranked = rank(query, candidates);
    let take = n_neg.min(ranked.len());
    let picks = rand::seq::index::sample(rng, ranked.len(), take);
    let mut selected: Vec<Ranked> = picks.into_iter().map(|i| ranked[i]).collect();
    selected.sort_unstable_by(by_distance_then_id);
    NegativeSelection {
        shortfall: n_neg - take,
        selected,
    }
}

/// Indices into `db` of a restricted mining pool: the `max_sequences`
/// sequences whose coordinate centroid is nearest `center`, and from each at
/// most `images_per_sequence` images drawn uniformly under `pool_seed`.
/// Returned ascending.
pub fn restrict_mining_pool(
    db: &[GeoSample],
    center: GeoTag,
    max_sequences: usize,
    images_per_sequence: usize,
    pool_seed: u64,
) -> Vec<usize> {
    let mut by_seq: std::collections::BTreeMap<SeqId, Vec<usize>> = Default::default();
    for (i, s) in db.iter().enumerate() {
        by_seq.entry(s.seq_id).or_default().push(i);
    }
    let mut seqs: Vec<(f64, SeqId, Vec<usize>)> = by_seq
        .into_iter()
        .filter_map(|(seq, members)| {
            let c = geo::centroid(members.iter().map(|&i| db[i].tag))?;
            Some((geo::geo_distance(center, c), seq, members))
        })
        .collect();
    seqs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    seqs.truncate(max_sequences.max(1));

    let mut pool = Vec::new();
    for (_, seq, members) in seqs {
        if members.len() <= images_per_sequence {
            pool.extend(members);
        } else {
            let mut rng = seed::rng_from(seed::derive(
                pool_seed,
                seed::Stream::MiningPool,
                &[seq.0],
            ));
            let picks = rand::seq::index::sample(&mut rng, members.len(), images_per_sequence);
            pool.extend(picks.into_iter().map(|k| members[k]));
        }
    }
    pool.sort_unstable();
    pool
}
