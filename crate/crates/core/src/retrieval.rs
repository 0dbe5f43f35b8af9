//! Baseline aggregators, exact Euclidean ranking and average precision.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::hash::Hash;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descriptors::LocalDescriptorSet;
use crate::error::{Error, Result};
use crate::fisher::l2_norm;

/// Gallery vectors must be unit norm within this tolerance.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Sum,
    Max,
}

pub fn l2_normalized(v: &[f64]) -> Option<Vec<f64>> {
    let norm = l2_norm(v);
    (norm > 0.0 && norm.is_finite()).then(|| v.iter().map(|x| x / norm).collect())
}

/// Elementwise sum or max over the descriptors, L2-normalized.
pub fn baseline_pool(set: &LocalDescriptorSet, mode: PoolMode) -> Result<Vec<f64>> {
    let d = set.dim();
    let mut acc = match mode {
        PoolMode::Sum => vec![0.0; d],
        PoolMode::Max => vec![f64::NEG_INFINITY; d],
    };
    for row in set.rows() {
        for (a, &v) in acc.iter_mut().zip(row) {
            match mode {
                PoolMode::Sum => *a += v,
                PoolMode::Max => *a = a.max(v),
            }
        }
    }
    l2_normalized(&acc).ok_or(Error::DegeneratePooledVector)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryItem {
    pub id: String,
    pub vector: Vec<f64>,
    pub dataset_tag: String,
}

/// Ground truth for one query. Items in `ignore` are removed from the
/// ranking before scoring and never count as relevant.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryRelevance {
    pub relevant: BTreeSet<String>,
    pub ignore: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryIndex {
    items: Vec<GalleryItem>,
    relevance: BTreeMap<String, QueryRelevance>,
}

impl GalleryIndex {
    pub fn new(items: Vec<GalleryItem>, relevance: BTreeMap<String, QueryRelevance>) -> Result<Self> {
        if let Some(first) = items.first() {
            let len = first.vector.len();
            for item in &items {
                if item.vector.len() != len {
                    return Err(Error::DimensionMismatch {
                        expected: len,
                        actual: item.vector.len(),
                    });
                }
                let norm = l2_norm(&item.vector);
                if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                    return Err(Error::InvalidInput(format!(
                        "gallery vector {} has norm {norm}",
                        item.id
                    )));
                }
            }
        }
        let mut seen = HashSet::new();
        for item in &items {
            if !seen.insert(item.id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate gallery id {}", item.id)));
            }
        }
        Ok(Self { items, relevance })
    }

    pub fn items(&self) -> &[GalleryItem] {
        &self.items
    }

    pub fn relevance(&self) -> &BTreeMap<String, QueryRelevance> {
        &self.relevance
    }

    pub fn item(&self, id: &str) -> Option<&GalleryItem> {
        self.items.iter().find(|i| i.id == id)
    }

    pub fn dim(&self) -> Option<usize> {
        self.items.first().map(|i| i.vector.len())
    }

    pub fn dataset_tags(&self) -> BTreeSet<String> {
        self.items.iter().map(|i| i.dataset_tag.clone()).collect()
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Gallery ids by ascending Euclidean distance to `query`, ties broken by
/// id; items whose id is in `exclude` are left out.
pub fn rank_excluding(
    query: &[f64],
    gallery: &GalleryIndex,
    exclude: &BTreeSet<String>,
) -> Result<Vec<String>> {
    if let Some(d) = gallery.dim() {
        if d != query.len() {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: query.len(),
            });
        }
    }
    let mut scored: Vec<(f64, &str)> = gallery
        .items
        .iter()
        .filter(|i| !exclude.contains(&i.id))
        .map(|i| (euclidean(query, &i.vector), i.id.as_str()))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    Ok(scored.into_iter().map(|(_, id)| id.to_string()).collect())
}

pub fn rank(query: &[f64], gallery: &GalleryIndex) -> Result<Vec<String>> {
    rank_excluding(query, gallery, &BTreeSet::new())
}

/// Non-interpolated AP: mean over relevant items of the precision at the
/// rank where each is retrieved. Relevant items missing from `ranked`
/// contribute zero.
pub fn average_precision<S>(ranked: &[S], relevant: &HashSet<S>) -> Result<f64>
where
    S: Eq + Hash,
{
    if relevant.is_empty() {
        return Err(Error::UndefinedAp);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, item) in ranked.iter().enumerate() {
        if relevant.contains(item) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / relevant.len() as f64)
}

/// AP after removing `rel.ignore` from both the ranking and the relevant set.
pub fn average_precision_with_ignore(ranked: &[String], rel: &QueryRelevance) -> Result<f64> {
    let filtered: Vec<&String> = ranked.iter().filter(|id| !rel.ignore.contains(*id)).collect();
    let relevant: HashSet<&String> = rel.relevant.iter().filter(|id| !rel.ignore.contains(*id)).collect();
    average_precision(&filtered, &relevant)
}

/// Unweighted mean of per-query AP; relevance comes from the gallery.
pub fn mean_average_precision(queries: &[(String, Vec<String>)], gallery: &GalleryIndex) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::NoQueries);
    }
    let mut sum = 0.0;
    for (id, ranked) in queries {
        let rel = gallery
            .relevance
            .get(id)
            .ok_or_else(|| Error::InvalidInput(format!("query {id} has no relevance set")))?;
        sum += average_precision_with_ignore(ranked, rel)?;
    }
    Ok(sum / queries.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub id: String,
    pub average_precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub queries: Vec<QueryResult>,
}

/// Ranks the gallery for every query with a relevance entry and scores it.
///
/// A query uses its entry in `query_vectors` when present, otherwise the
/// gallery item of the same id, which is then excluded from its own ranking.
pub fn evaluate(gallery: &GalleryIndex, query_vectors: &BTreeMap<String, Vec<f64>>) -> Result<EvalReport> {
    let queries: Vec<(&String, &QueryRelevance)> = gallery.relevance.iter().collect();
    if queries.is_empty() {
        return Err(Error::NoQueries);
    }
    let results: Vec<QueryResult> = queries
        .par_iter()
        .map(|(id, rel)| {
            let (vector, exclude) = match query_vectors.get(*id) {
                Some(v) => (v.as_slice(), rel.ignore.clone()),
                None => {
                    let item = gallery
                        .item(id)
                        .ok_or_else(|| Error::InvalidInput(format!("query {id} has no vector")))?;
                    let mut ex = rel.ignore.clone();
                    ex.insert((*id).clone());
                    (item.vector.as_slice(), ex)
                }
            };
            let ranked = rank_excluding(vector, gallery, &exclude)?;
            Ok(QueryResult {
                id: (*id).clone(),
                average_precision: average_precision_with_ignore(&ranked, rel)?,
            })
        })
        .collect::<Result<_>>()?;
    let map = results.iter().map(|r| r.average_precision).sum::<f64>() / results.len() as f64;
    Ok(EvalReport { map, queries: results })
}

/// Relevance sets where every item with at least one same-class peer is a
/// query and its peers are relevant.
pub fn class_relevance(ids: &[&str], labels: &[&str]) -> BTreeMap<String, QueryRelevance> {
    let mut out = BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        let relevant: BTreeSet<String> = ids
            .iter()
            .zip(labels)
            .enumerate()
            .filter(|(j, (_, l))| *j != i && **l == labels[i])
            .map(|(_, (other, _))| other.to_string())
            .collect();
        if !relevant.is_empty() {
            out.insert(
                id.to_string(),
                QueryRelevance {
                    relevant,
                    ignore: BTreeSet::new(),
                },
            );
        }
    }
    out
}

/// Leave-one-out mAP of a labeled set of unit vectors.
pub fn class_map(ids: &[&str], labels: &[&str], vectors: &[Vec<f64>]) -> Result<f64> {
    let items = ids
        .iter()
        .zip(vectors)
        .map(|(id, v)| GalleryItem {
            id: id.to_string(),
            vector: v.clone(),
            dataset_tag: String::new(),
        })
        .collect();
    let gallery = GalleryIndex::new(items, class_relevance(ids, labels))?;
    Ok(evaluate(&gallery, &BTreeMap::new())?.map)
}
