//! A client's private training data: its queries, its database (which is
//! also its mining pool) and the GPS candidate sets of every usable query.

use crate::error::{Error, Result};
use crate::geo::{self, CityId, ClientId, ContinentId, GeoSample};

/// Candidate indices into the owning dataset's database, ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryCandidates {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ClientDataset {
    id: ClientId,
    /// Real client this dataset derives from (differs for virtual clients).
    origin: ClientId,
    queries: Vec<GeoSample>,
    database: Vec<GeoSample>,
    candidates: Vec<QueryCandidates>,
    excluded_queries: usize,
    city_ids: Vec<CityId>,
    continent_id: ContinentId,
}

impl ClientDataset {
    /// Builds the dataset, dropping queries without any positive or without
    /// any negative in `database`.
    pub fn build(
        id: ClientId,
        queries: Vec<GeoSample>,
        database: Vec<GeoSample>,
        tau: f64,
        tau_neg: f64,
    ) -> Result<Self> {
        geo::validate_thresholds(tau, tau_neg)?;
        let mut kept = Vec::with_capacity(queries.len());
        let mut candidates = Vec::with_capacity(queries.len());
        let mut excluded = 0;
        for q in queries {
            let (positives, negatives) = geo::candidate_indices(q.tag, &database, tau, tau_neg);
            if positives.is_empty() || negatives.is_empty() {
                excluded += 1;
                continue;
            }
            kept.push(q);
            candidates.push(QueryCandidates {
                positives,
                negatives,
            });
        }
        let mut city_ids: Vec<CityId> = kept
            .iter()
            .chain(database.iter())
            .map(|s| s.city_id)
            .collect();
        city_ids.sort_unstable();
        city_ids.dedup();
        let continent_id = majority_continent(kept.iter().chain(database.iter()));
        Ok(ClientDataset {
            id,
            origin: id,
            queries: kept,
            database,
            candidates,
            excluded_queries: excluded,
            city_ids,
            continent_id,
        })
    }

    /// A dataset over the same database whose queries are `query_indices`
    /// (repeats allowed) of `self`.
    pub fn with_queries(&self, id: ClientId, query_indices: &[usize]) -> Result<Self> {
        let mut queries = Vec::with_capacity(query_indices.len());
        let mut candidates = Vec::with_capacity(query_indices.len());
        for &i in query_indices {
            let q = self
                .queries
                .get(i)
                .ok_or_else(|| Error::invalid(format!("query index {i} out of range")))?;
            queries.push(q.clone());
            candidates.push(self.candidates[i].clone());
        }
        Ok(ClientDataset {
            id,
            origin: self.origin,
            queries,
            database: self.database.clone(),
            candidates,
            excluded_queries: 0,
            city_ids: self.city_ids.clone(),
            continent_id: self.continent_id,
        })
    }

    pub fn id(&self) -> ClientId {
        self.id
    }

    pub fn origin(&self) -> ClientId {
        self.origin
    }

    pub fn queries(&self) -> &[GeoSample] {
        &self.queries
    }

    pub fn database(&self) -> &[GeoSample] {
        &self.database
    }

    pub fn candidates(&self, query_index: usize) -> &QueryCandidates {
        &self.candidates[query_index]
    }

    pub fn usable_queries(&self) -> usize {
        self.queries.len()
    }

    pub fn excluded_queries(&self) -> usize {
        self.excluded_queries
    }

    pub fn city_ids(&self) -> &[CityId] {
        &self.city_ids
    }

    pub fn continent_id(&self) -> ContinentId {
        self.continent_id
    }

    pub fn image_count(&self) -> usize {
        self.queries.len() + self.database.len()
    }
}

/// Most frequent continent; ties go to the smallest id.
pub(crate) fn majority_continent<'a>(samples: impl Iterator<Item = &'a GeoSample>) -> ContinentId {
    let mut counts = std::collections::BTreeMap::new();
    for s in samples {
        *counts.entry(s.continent_id).or_insert(0usize) += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(c, _)| c)
        .unwrap_or(ContinentId(0))
}
