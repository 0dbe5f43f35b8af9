//! Hard-negative mining: for sampled matching pairs, the closest
//! non-matching items to the query under the current embedding.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::loss::PairLabel;

/// A training pair of item indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub left: usize,
    pub right: usize,
    pub label: PairLabel,
}

/// Query, its matching item and the hardest non-matching items.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiningTuple {
    pub query: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// One item of the corpus being mined, embedded by the current model.
#[derive(Debug, Clone, Copy)]
pub struct CorpusEntry<'a> {
    pub id: &'a str,
    pub class_label: &'a str,
    pub vector: &'a [f64],
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Indices of the `k` non-matching items closest to `query`, nearest first,
/// ties broken by item id.
pub fn hardest_negatives(corpus: &[CorpusEntry<'_>], query: usize, k: usize) -> Result<Vec<usize>> {
    let q = &corpus[query];
    let mut candidates: Vec<(f64, usize)> = corpus
        .par_iter()
        .enumerate()
        .filter(|(_, e)| e.class_label != q.class_label)
        .map(|(i, e)| (squared_distance(q.vector, e.vector), i))
        .collect();
    if candidates.len() < k {
        return Err(Error::CorpusTooSmall(format!(
            "query {} has {} non-matching items, {k} required",
            q.id,
            candidates.len()
        )));
    }
    let order = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
        a.0.total_cmp(&b.0).then_with(|| corpus[a.1].id.cmp(corpus[b.1].id))
    };
    if k < candidates.len() && k > 0 {
        candidates.select_nth_unstable_by(k - 1, order);
        candidates.truncate(k);
    }
    candidates.sort_by(order);
    Ok(candidates.into_iter().take(k).map(|(_, i)| i).collect())
}

/// Samples `pairs` matching pairs uniformly over all ordered matching pairs
/// and attaches the `negatives` hardest non-matching items to each.
pub fn mine_tuples(
    corpus: &[CorpusEntry<'_>],
    pairs: usize,
    negatives: usize,
    rng: &mut impl Rng,
) -> Result<Vec<MiningTuple>> {
    // members of each class, in corpus order
    let mut classes: Vec<(&str, Vec<usize>)> = Vec::new();
    for (i, e) in corpus.iter().enumerate() {
        match classes.iter_mut().find(|(c, _)| *c == e.class_label) {
            Some((_, members)) => members.push(i),
            None => classes.push((e.class_label, vec![i])),
        }
    }
    let class_of: Vec<usize> = corpus
        .iter()
        .map(|e| classes.iter().position(|(c, _)| *c == e.class_label).unwrap())
        .collect();
    // a query is drawn with weight (class size − 1): its number of partners
    let mut cumulative = Vec::with_capacity(corpus.len());
    let mut total = 0usize;
    for &c in &class_of {
        total += classes[c].1.len() - 1;
        cumulative.push(total);
    }
    if total == 0 {
        return Err(Error::CorpusTooSmall("no class has two items".into()));
    }

    let mut tuples = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let pick = rng.random_range(0..total);
        let query = cumulative.partition_point(|&c| c <= pick);
        let members = &classes[class_of[query]].1;
        let mut positive = members[rng.random_range(0..members.len() - 1)];
        if positive == query {
            positive = *members.last().unwrap();
        }
        tuples.push(MiningTuple {
            query,
            positive,
            negatives: hardest_negatives(corpus, query, negatives)?,
        });
    }
    Ok(tuples)
}

/// One matching pair and one non-matching pair per negative, per tuple.
pub fn expand_tuples(tuples: &[MiningTuple]) -> Vec<LabeledPair> {
    let mut out = Vec::with_capacity(tuples.iter().map(|t| 1 + t.negatives.len()).sum());
    for t in tuples {
        out.push(LabeledPair {
            left: t.query,
            right: t.positive,
            label: PairLabel::Matching,
        });
        out.extend(t.negatives.iter().map(|&n| LabeledPair {
            left: t.query,
            right: n,
            label: PairLabel::NonMatching,
        }));
    }
    out
}

pub fn shuffle_pairs(pairs: &mut [LabeledPair], rng: &mut impl Rng) {
    pairs.shuffle(rng);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Corpus {
        ids: Vec<String>,
        labels: Vec<String>,
        vectors: Vec<Vec<f64>>,
    }

    impl Corpus {
        fn entries(&self) -> Vec<CorpusEntry<'_>> {
            (0..self.ids.len())
                .map(|i| CorpusEntry {
                    id: &self.ids[i],
                    class_label: &self.labels[i],
                    vector: &self.vectors[i],
                })
                .collect()
        }
    }

    fn corpus(labels: &[&str], seed: u64) -> Corpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Corpus {
            ids: (0..labels.len()).map(|i| format!("item{i:03}")).collect(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
            vectors: (0..labels.len())
                .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
        }
    }

    #[test]
    fn forced_selection_with_exactly_k_negatives() {
        let c = corpus(&["a", "a", "b", "c", "d", "e", "f"], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tuples = mine_tuples(&c.entries(), 10, 5, &mut rng).unwrap();
        for t in tuples {
            let mut n = t.negatives.clone();
            n.sort();
            assert_eq!(n, vec![2, 3, 4, 5, 6]);
            assert_ne!(t.query, t.positive);
            assert!(t.query < 2 && t.positive < 2);
        }
    }

    #[test]
    fn too_few_negatives_is_an_error() {
        let c = corpus(&["a", "a", "b", "c"], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(
            mine_tuples(&c.entries(), 1, 5, &mut rng),
            Err(Error::CorpusTooSmall(_))
        ));
        let singletons = corpus(&["a", "b", "c", "d", "e", "f", "g"], 1);
        assert!(mine_tuples(&singletons.entries(), 1, 5, &mut rng).is_err());
    }

    #[test]
    fn ties_broken_by_id() {
        let c = Corpus {
            ids: vec!["q".into(), "p".into(), "n2".into(), "n1".into(), "n0".into()],
            labels: vec!["a".into(), "a".into(), "b".into(), "c".into(), "d".into()],
            vectors: vec![vec![0.0], vec![0.0], vec![1.0], vec![1.0], vec![-1.0]],
        };
        assert_eq!(hardest_negatives(&c.entries(), 0, 3).unwrap(), vec![4, 3, 2]);
    }

    #[test]
    fn expansion_counts() {
        let tuples = vec![
            MiningTuple { query: 0, positive: 1, negatives: vec![2, 3, 4, 5, 6] };
            2000
        ];
        let pairs = expand_tuples(&tuples);
        assert_eq!(pairs.len(), 12000);
        assert_eq!(pairs.iter().filter(|p| p.label == PairLabel::Matching).count(), 2000);
    }
}
