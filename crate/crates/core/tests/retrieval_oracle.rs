use std::collections::{BTreeMap, BTreeSet, HashSet};

use proptest::prelude::*;

use siamfv::retrieval::{average_precision, evaluate, rank, GalleryIndex, GalleryItem, QueryRelevance};

/// Precision at every relevant position, each recounted from scratch.
fn brute_force_ap(ranked: &[usize], relevant: &HashSet<usize>) -> f64 {
    let mut total = 0.0;
    for (pos, item) in ranked.iter().enumerate() {
        if relevant.contains(item) {
            let hits = ranked[..=pos].iter().filter(|r| relevant.contains(r)).count();
            total += hits as f64 / (pos + 1) as f64;
        }
    }
    total / relevant.len() as f64
}

fn ranking_and_relevance() -> impl Strategy<Value = (Vec<usize>, HashSet<usize>)> {
    (1usize..60).prop_flat_map(|n| {
        (
            Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
            proptest::collection::hash_set(0..n, 1..=n),
        )
    })
}

proptest! {
    #[test]
    fn ap_matches_brute_force((ranked, relevant) in ranking_and_relevance()) {
        let ap = average_precision(&ranked, &relevant).unwrap();
        prop_assert!((ap - brute_force_ap(&ranked, &relevant)).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&ap));
    }

    #[test]
    fn relevant_prefix_scores_one((ranked, relevant) in ranking_and_relevance()) {
        let mut perfect: Vec<usize> = ranked.iter().copied().filter(|r| relevant.contains(r)).collect();
        perfect.extend(ranked.iter().copied().filter(|r| !relevant.contains(r)));
        prop_assert_eq!(average_precision(&perfect, &relevant).unwrap(), 1.0);
    }

    #[test]
    fn trailing_irrelevant_items_do_not_matter((ranked, relevant) in ranking_and_relevance()) {
        let mut longer = ranked.clone();
        longer.push(usize::MAX);
        prop_assert_eq!(
            average_precision(&ranked, &relevant).unwrap(),
            average_precision(&longer, &relevant).unwrap()
        );
    }
}

#[test]
fn empty_relevant_set_is_rejected() {
    assert!(average_precision(&[1usize, 2], &HashSet::new()).is_err());
}

/// Items on the unit circle at the given angles.
fn gallery(points: &[(&str, f64)], relevance: BTreeMap<String, QueryRelevance>) -> GalleryIndex {
    let items = points
        .iter()
        .map(|(id, x)| GalleryItem {
            id: id.to_string(),
            vector: vec![x.cos(), x.sin()],
            dataset_tag: "t".into(),
        })
        .collect();
    GalleryIndex::new(items, relevance).unwrap()
}

#[test]
fn ranking_is_by_distance_then_id() {
    let g = gallery(&[("d", 1.0), ("c", -1.0), ("a", 3.0), ("b", 0.5)], BTreeMap::new());
    assert_eq!(rank(&[1.0, 0.0], &g).unwrap(), vec!["b", "c", "d", "a"]);
}

#[test]
fn gallery_queries_exclude_themselves() {
    let rel = |ids: &[&str]| QueryRelevance {
        relevant: ids.iter().map(|s| s.to_string()).collect(),
        ignore: BTreeSet::new(),
    };
    let relevance = BTreeMap::from([("q".to_string(), rel(&["p"])), ("p".to_string(), rel(&["q"]))]);
    let g = gallery(&[("q", 0.0), ("p", 0.1), ("n", 3.0)], relevance);
    let report = evaluate(&g, &BTreeMap::new()).unwrap();
    assert_eq!(report.map, 1.0);
    assert_eq!(report.queries.len(), 2);
}
