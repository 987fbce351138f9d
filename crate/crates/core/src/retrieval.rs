//! Exact k-nearest-neighbor retrieval and recall@K.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{geo_distance, GeoSample, SampleId};
use crate::model::{self, squared_distance, Descriptors, EmbedderSpec, ParamVector};

pub const DEFAULT_POSITIVE_RADIUS: f64 = 25.0;

/// Queries and database for evaluation. Queries without any database sample
/// inside the positive radius are dropped at construction and counted.
#[derive(Debug, Clone)]
pub struct EvalSet {
    queries: Vec<GeoSample>,
    database: Vec<GeoSample>,
    positive_radius: f64,
    /// Sorted database indices within the radius, per kept query.
    positives: Vec<Vec<usize>>,
    excluded_queries: usize,
}

impl EvalSet {
    pub fn new(queries: Vec<GeoSample>, database: Vec<GeoSample>, positive_radius: f64) -> Result<Self> {
        if database.is_empty() {
            return Err(Error::invalid("evaluation database is empty"));
        }
        if !(positive_radius > 0.0 && positive_radius.is_finite()) {
            return Err(Error::invalid("positive radius must be > 0"));
        }
        let mut kept = Vec::with_capacity(queries.len());
        let mut positives = Vec::with_capacity(queries.len());
        let mut excluded = 0;
        for q in queries {
            let p: Vec<usize> = database
                .iter()
                .enumerate()
                .filter(|(_, d)| geo_distance(q.tag, d.tag) < positive_radius)
                .map(|(i, _)| i)
                .collect();
            if p.is_empty() {
                excluded += 1;
            } else {
                kept.push(q);
                positives.push(p);
            }
        }
        Ok(EvalSet {
            queries: kept,
            database,
            positive_radius,
            positives,
            excluded_queries: excluded,
        })
    }

    pub fn queries(&self) -> &[GeoSample] {
        &self.queries
    }

    pub fn database(&self) -> &[GeoSample] {
        &self.database
    }

    pub fn positive_radius(&self) -> f64 {
        self.positive_radius
    }

    pub fn usable_queries(&self) -> usize {
        self.queries.len()
    }

    pub fn excluded_queries(&self) -> usize {
        self.excluded_queries
    }

    fn is_positive(&self, query: usize, db_index: usize) -> bool {
        self.positives[query].binary_search(&db_index).is_ok()
    }
}

/// Recall per cutoff plus the query accounting behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub recall: BTreeMap<usize, f64>,
    pub usable_queries: usize,
    pub excluded_queries: usize,
}

impl RecallReport {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.recall.get(&k).copied()
    }
}

/// Rank (0-based) of the first geographic positive among the top `max_k`
/// retrieved database items, per query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query: SampleId,
    pub first_hit: Option<usize>,
}

fn check_ks(ks: &[usize]) -> Result<usize> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::invalid("ks must be non-empty and every k >= 1"));
    }
    Ok(*ks.iter().max().unwrap())
}

/// Database indices of the `k` nearest descriptors, nearest first; ties go to
/// the smaller sample id.
pub fn nearest(query: &[f64], db: &Descriptors, db_ids: &[SampleId], k: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, SampleId, usize)> = (0..db.len())
        .map(|i| (squared_distance(query, db.row(i)), db_ids[i], i))
        .collect();
    let cmp = |a: &(f64, SampleId, usize), b: &(f64, SampleId, usize)| {
        a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
    };
    let k = k.min(scored.len());
    if k == 0 {
        return Vec::new();
    }
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_unstable_by(cmp);
    scored.into_iter().map(|s| s.2).collect()
}

/// Per-query outcomes from precomputed descriptors.
pub fn query_outcomes(
    query_desc: &Descriptors,
    db_desc: &Descriptors,
    eval: &EvalSet,
    max_k: usize,
) -> Result<Vec<QueryOutcome>> {
    if query_desc.len() != eval.queries.len() || db_desc.len() != eval.database.len() {
        return Err(Error::shape(
            format!("{} queries, {} database", eval.queries.len(), eval.database.len()),
            format!("{} queries, {} database", query_desc.len(), db_desc.len()),
        ));
    }
    let db_ids: Vec<SampleId> = eval.database.iter().map(|s| s.id).collect();
    Ok((0..eval.queries.len())
        .into_par_iter()
        .map(|qi| {
            let top = nearest(query_desc.row(qi), db_desc, &db_ids, max_k);
            QueryOutcome {
                query: eval.queries[qi].id,
                first_hit: top.iter().position(|&di| eval.is_positive(qi, di)),
            }
        })
        .collect())
}

fn summarize(outcomes: &[QueryOutcome], eval: &EvalSet, ks: &[usize]) -> RecallReport {
    let n = outcomes.len() as f64;
    let recall = ks
        .iter()
        .map(|&k| {
            let hits = outcomes
                .iter()
                .filter(|o| o.first_hit.is_some_and(|r| r < k))
                .count();
            (k, hits as f64 / n)
        })
        .collect();
    RecallReport {
        recall,
        usable_queries: eval.usable_queries(),
        excluded_queries: eval.excluded_queries(),
    }
}

pub fn recall_from_descriptors(
    query_desc: &Descriptors,
    db_desc: &Descriptors,
    eval: &EvalSet,
    ks: &[usize],
) -> Result<RecallReport> {
    let max_k = check_ks(ks)?;
    if eval.usable_queries() == 0 {
        return Err(Error::NoUsableQueries(format!(
            "all {} evaluation queries lack a positive within {} m",
            eval.excluded_queries, eval.positive_radius
        )));
    }
    let outcomes = query_outcomes(query_desc, db_desc, eval, max_k)?;
    Ok(summarize(&outcomes, eval, ks))
}

fn embed(params: &ParamVector, spec: &EmbedderSpec, samples: &[GeoSample]) -> Result<Descriptors> {
    let rows: Vec<&[f64]> = samples.iter().map(|s| s.feat.as_slice()).collect();
    model::forward(params, spec, &rows)
}

/// Recall@K of the embedder `params` on `eval`.
pub fn recall_at_k(
    params: &ParamVector,
    spec: &EmbedderSpec,
    eval: &EvalSet,
    ks: &[usize],
) -> Result<RecallReport> {
    let q = embed(params, spec, &eval.queries)?;
    let d = embed(params, spec, &eval.database)?;
    recall_from_descriptors(&q, &d, eval, ks)
}

/// Per-query outcomes of the embedder, for error analysis.
pub fn outcomes_at_k(
    params: &ParamVector,
    spec: &EmbedderSpec,
    eval: &EvalSet,
    max_k: usize,
) -> Result<Vec<QueryOutcome>> {
    let q = embed(params, spec, &eval.queries)?;
    let d = embed(params, spec, &eval.database)?;
    query_outcomes(&q, &d, eval, max_k)
}

/// Recall@K of nearest-neighbor search directly on the raw features.
pub fn recall_on_features(eval: &EvalSet, ks: &[usize]) -> Result<RecallReport> {
    let rows = |s: &[GeoSample]| -> Result<Descriptors> {
        Descriptors::from_rows(&s.iter().map(|x| x.feat.clone()).collect::<Vec<_>>())
    };
    recall_from_descriptors(&rows(&eval.queries)?, &rows(&eval.database)?, eval, ks)
}
