//! Candidate ranking and recall metrics.
//!
//! Scores are cosine similarities accumulated in `f64`; ties are broken by
//! ascending store index, which equals ascending image id. The query image
//! (the reference for forward queries, the target for reversed ones) is
//! never among its own candidates.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ReversalOracle, Split};
use crate::encoders::{tokenize, Direction, ImageFeatureStore};
use crate::error::{Error, Result};
use crate::model::ModelState;

/// Global Recall@K cut-offs reported for every run.
pub const RECALL_KS: [usize; 4] = [1, 5, 10, 50];
/// Subset Recall@K cut-offs; subset pools hold five candidates.
pub const SUBSET_KS: [usize; 3] = [1, 2, 3];

const QUERY_NORM_TOL: f64 = 1e-4;

fn score(query: &[f32], row: &[f32]) -> f64 {
    query.iter().zip(row).map(|(&a, &b)| a as f64 * b as f64).sum()
}

fn check_query(query: &[f32], dim: usize) -> Result<()> {
    if query.len() != dim {
        return Err(Error::Data(format!("query has dim {}, corpus {dim}", query.len())));
    }
    let n = query.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if (n - 1.0).abs() > QUERY_NORM_TOL {
        return Err(Error::Data(format!("query norm {n} is not 1")));
    }
    Ok(())
}

/// Orders `pool` (store rows) by descending similarity to `query`.
pub fn rank_pool(query: &[f32], corpus: &ImageFeatureStore, pool: &[usize]) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = pool.iter().map(|&i| (score(query, corpus.row(i)), i)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, i)| i).collect()
}

/// Every store row except `exclude`, best match first.
pub fn rank_indices(query: &[f32], corpus: &ImageFeatureStore, exclude: &[usize]) -> Result<Vec<usize>> {
    check_query(query, corpus.dim())?;
    let pool: Vec<usize> = (0..corpus.len()).filter(|i| !exclude.contains(i)).collect();
    if pool.is_empty() {
        return Err(Error::Data("empty candidate pool".into()));
    }
    Ok(rank_pool(query, corpus, &pool))
}

/// Image ids sorted by descending cosine similarity, ties by ascending id.
pub fn rank_candidates(query: &[f32], corpus: &ImageFeatureStore, exclude: &BTreeSet<String>) -> Result<Vec<String>> {
    let skip: Vec<usize> = exclude.iter().filter_map(|id| corpus.index_of(id).ok()).collect();
    Ok(rank_indices(query, corpus, &skip)?
        .into_iter()
        .map(|i| corpus.ids()[i].clone())
        .collect())
}

fn hit_rate<T: PartialEq>(rankings: &[Vec<T>], truths: &[T], k: usize, what: &str) -> Result<f64> {
    if k == 0 {
        return Err(Error::Usage(format!("{what}: K must be at least 1")));
    }
    if rankings.len() != truths.len() {
        return Err(Error::Data(format!(
            "{what}: {} rankings but {} truths",
            rankings.len(),
            truths.len()
        )));
    }
    if rankings.is_empty() {
        return Err(Error::Data(format!("{what}: no queries")));
    }
    if let Some(short) = rankings.iter().map(Vec::len).filter(|&n| n < k).min() {
        warn!("{what}: K={k} exceeds a candidate pool of {short}; clamping");
    }
    let hits = rankings
        .iter()
        .zip(truths)
        .filter(|(r, t)| r.iter().take(k).any(|c| c == *t))
        .count();
    Ok(hits as f64 / rankings.len() as f64)
}

/// Fraction of queries whose truth is among the first `k` candidates.
pub fn recall_at_k<T: PartialEq>(rankings: &[Vec<T>], truths: &[T], k: usize) -> Result<f64> {
    hit_rate(rankings, truths, k, "recall@k")
}

/// Recall over per-query subset pools (five candidates once the query
/// image is removed).
pub fn recall_subset_at_k<T: PartialEq>(rankings: &[Vec<T>], truths: &[T], k: usize) -> Result<f64> {
    hit_rate(rankings, truths, k, "subset recall@k")
}

/// Fraction of queries with any of their acceptable answers in the top `k`.
pub fn set_recall_at_k<T: PartialEq>(rankings: &[Vec<T>], answers: &[Vec<T>], k: usize) -> Result<f64> {
    if rankings.len() != answers.len() || rankings.is_empty() {
        return Err(Error::Data("set recall needs one answer set per query".into()));
    }
    let hits = rankings
        .iter()
        .zip(answers)
        .filter(|(r, a)| r.iter().take(k).any(|c| a.contains(c)))
        .count();
    Ok(hits as f64 / rankings.len() as f64)
}

/// Fashion-IQ style average, `(R@10 + R@50) / 2`.
pub fn avg_metric_fiq(r10: f64, r50: f64) -> f64 {
    (r10 + r50) / 2.0
}

/// CIRR style average, `(R@5 + R_subset@1) / 2`.
pub fn avg_metric_cirr(r5: f64, rsub1: f64) -> f64 {
    (r5 + rsub1) / 2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalReport {
    pub split: Split,
    pub direction: Direction,
    pub query_count: usize,
    /// K to fraction of queries with the truth in the global top K.
    pub recall: BTreeMap<usize, f64>,
    /// K to fraction within the query's subset; empty without subsets.
    pub subset_recall: BTreeMap<usize, f64>,
    pub avg_metric_fiq: f64,
    pub avg_metric_cirr: Option<f64>,
    /// Reversed queries only: K to fraction of queries with any image
    /// consistent with the reversed caption in the top K.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub oracle_recall: BTreeMap<usize, f64>,
    /// The query image is removed from its own candidate pool.
    pub query_image_excluded: bool,
    pub config_fingerprint: String,
    #[serde(default)]
    pub flags: Vec<String>,
}

impl RetrievalReport {
    /// The CIRR average when subsets exist, otherwise the Fashion-IQ one.
    pub fn primary_metric(&self) -> f64 {
        self.avg_metric_cirr.unwrap_or(self.avg_metric_fiq)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One `metric,value` row per stored number.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in &self.recall {
            let _ = writeln!(s, "recall@{k},{v}");
        }
        for (k, v) in &self.subset_recall {
            let _ = writeln!(s, "subset_recall@{k},{v}");
        }
        for (k, v) in &self.oracle_recall {
            let _ = writeln!(s, "oracle_recall@{k},{v}");
        }
        let _ = writeln!(s, "avg_metric_fiq,{}", self.avg_metric_fiq);
        if let Some(c) = self.avg_metric_cirr {
            let _ = writeln!(s, "avg_metric_cirr,{c}");
        }
        s
    }

    pub fn save(&self, json: &Path, csv: Option<&Path>) -> Result<()> {
        fs::write(json, self.to_json() + "\n").map_err(|e| Error::io(json, e))?;
        if let Some(p) = csv {
            fs::write(p, self.to_csv()).map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Composed queries with their ground truth, ready for ranking.
#[derive(Debug, Clone)]
pub struct QuerySet {
    pub embeddings: Vec<Vec<f32>>,
    /// Store row of each query's own image, excluded from its pool.
    pub query_images: Vec<usize>,
    pub truths: Vec<usize>,
    /// Subset members (store rows, query image included) per query.
    pub subsets: Option<Vec<Vec<usize>>>,
}

/// Rankings of a [`QuerySet`]: global, and within subsets when present.
#[derive(Debug, Clone, PartialEq)]
pub struct Rankings {
    pub global: Vec<Vec<usize>>,
    pub subset: Option<Vec<Vec<usize>>>,
}

pub fn rank_queries(store: &ImageFeatureStore, q: &QuerySet) -> Result<Rankings> {
    let n = q.embeddings.len();
    if q.query_images.len() != n || q.truths.len() != n || q.subsets.as_ref().is_some_and(|s| s.len() != n) {
        return Err(Error::Data("query set fields differ in length".into()));
    }
    let global = (0..n)
        .into_par_iter()
        .map(|i| rank_indices(&q.embeddings[i], store, &[q.query_images[i]]))
        .collect::<Result<Vec<_>>>()?;
    let subset = q.subsets.as_ref().map(|subsets| {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let pool: Vec<usize> = subsets[i].iter().copied().filter(|&m| m != q.query_images[i]).collect();
                rank_pool(&q.embeddings[i], store, &pool)
            })
            .collect()
    });
    Ok(Rankings { global, subset })
}

/// Recall maps and averages from rankings.
pub fn summarize(
    rankings: &Rankings,
    truths: &[usize],
) -> Result<(BTreeMap<usize, f64>, BTreeMap<usize, f64>, f64, Option<f64>)> {
    let mut recall = BTreeMap::new();
    for k in RECALL_KS {
        recall.insert(k, recall_at_k(&rankings.global, truths, k)?);
    }
    let mut subset_recall = BTreeMap::new();
    if let Some(sub) = &rankings.subset {
        for k in SUBSET_KS {
            subset_recall.insert(k, recall_subset_at_k(sub, truths, k)?);
        }
    }
    let fiq = avg_metric_fiq(recall[&10], recall[&50]);
    let cirr = subset_recall.get(&1).map(|&s| avg_metric_cirr(recall[&5], s));
    Ok((recall, subset_recall, fiq, cirr))
}

/// Builds the query set for `split` in `direction`: forward queries pair the
/// reference with the forward caption and look for the target; reversed
/// queries pair the target with the reversed caption and look for the
/// reference.
pub fn build_queries(ds: &Dataset, split: Split, model: &ModelState, direction: Direction) -> Result<QuerySet> {
    let triplets = ds.split(split);
    if triplets.is_empty() {
        return Err(Error::Data(format!("{split} split is empty")));
    }
    let token = model.meta.token_scheme.token(direction);
    let mut seqs = Vec::with_capacity(triplets.len());
    let mut query_images = Vec::with_capacity(triplets.len());
    let mut truths = Vec::with_capacity(triplets.len());
    for t in triplets {
        let (r, g) = (ds.store.index_of(&t.ref_id)?, ds.store.index_of(&t.target_id)?);
        let (q, truth) = match direction {
            Direction::Forward => (r, g),
            Direction::Reversed => (g, r),
        };
        query_images.push(q);
        truths.push(truth);
        seqs.push(tokenize(&t.words(), token, &ds.vocab, model.meta.encoder.max_len)?);
    }
    let with_subset = triplets.iter().filter(|t| t.subset_id.is_some()).count();
    let subsets = if with_subset == 0 {
        None
    } else if with_subset < triplets.len() {
        return Err(Error::Data(format!(
            "{split}: {} of {} triplets lack a subset assignment",
            triplets.len() - with_subset,
            triplets.len()
        )));
    } else {
        let mut out = Vec::with_capacity(triplets.len());
        for t in triplets {
            let members = ds
                .subset_of(t)
                .ok_or_else(|| Error::Data(format!("missing subset {:?}", t.subset_id)))?;
            out.push(members.iter().map(|m| ds.store.index_of(m)).collect::<Result<Vec<_>>>()?);
        }
        Some(out)
    };
    let texts = model.embed_texts(&seqs)?;
    let embeddings = model.compose(&ds.store, &query_images, &texts)?;
    Ok(QuerySet {
        embeddings,
        query_images,
        truths,
        subsets,
    })
}

/// Evaluates `model` on `split`. Forward is the inference protocol;
/// reversed is a diagnostic and is flagged when the model never trained on
/// reversed queries.
pub fn evaluate(ds: &Dataset, split: Split, model: &ModelState, direction: Direction) -> Result<RetrievalReport> {
    evaluate_with_oracle(ds, split, model, direction, None)
}

/// As [`evaluate`]; with a reversal oracle, reversed reports also carry the
/// fraction of queries whose top K contains any oracle-consistent image.
pub fn evaluate_with_oracle(
    ds: &Dataset,
    split: Split,
    model: &ModelState,
    direction: Direction,
    oracle: Option<&ReversalOracle>,
) -> Result<RetrievalReport> {
    let q = build_queries(ds, split, model, direction)?;
    let rankings = rank_queries(&ds.store, &q)?;
    let (recall, subset_recall, fiq, cirr) = summarize(&rankings, &q.truths)?;
    let mut oracle_recall = BTreeMap::new();
    if let (Direction::Reversed, Some(oracle)) = (direction, oracle) {
        let answers = (0..q.truths.len())
            .map(|k| {
                let ids = oracle
                    .candidates(k)
                    .ok_or_else(|| Error::Data(format!("oracle has no entry for triplet {k}")))?;
                ids.iter().map(|id| ds.store.index_of(id)).collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        for k in RECALL_KS {
            oracle_recall.insert(k, set_recall_at_k(&rankings.global, &answers, k)?);
        }
    }
    let mut flags = Vec::new();
    if direction == Direction::Reversed && !model.meta.bidirectional {
        flags.push("reversed queries on a model trained without reversed queries".to_string());
    }
    Ok(RetrievalReport {
        split,
        direction,
        query_count: q.truths.len(),
        recall,
        subset_recall,
        avg_metric_fiq: fiq,
        avg_metric_cirr: cirr,
        oracle_recall,
        query_image_excluded: true,
        config_fingerprint: format!("{:016x}", model.fingerprint),
        flags,
    })
}
