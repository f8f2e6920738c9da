use std::collections::BTreeSet;

use proptest::prelude::*;

use texlang::corpus::{normalize_segment, split_description};
use texlang::joint_embedding::{triplet_losses, EmbeddingStore, Modality};
use texlang::metrics::{
    average_precision, caption_scores, precision_recall_at_k, r_precision, rank_ascending, rank_descending,
    reciprocal_rank, tokenize, MetricReport, Ranking,
};

fn relevance_case() -> impl Strategy<Value = (Vec<bool>, usize)> {
    prop::collection::vec(any::<bool>(), 1..40).prop_flat_map(|rel| {
        let hits = rel.iter().filter(|&&r| r).count();
        (Just(rel), hits.max(1)..hits + 5)
    })
}

proptest! {
    #[test]
    fn ranking_metrics_lie_in_unit_interval((rel, n_rel) in relevance_case()) {
        let ap = average_precision::<f64>(&rel, n_rel).unwrap();
        let rp = r_precision::<f64>(&rel, n_rel).unwrap();
        let rr = reciprocal_rank::<f64>(&rel);
        for v in [ap, rp, rr] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let mut last_recall = 0.0;
        for k in 1..=rel.len() + 3 {
            let at = precision_recall_at_k::<f64>(&rel, n_rel, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&at.precision));
            prop_assert!(at.recall >= last_recall);
            last_recall = at.recall;
        }
    }

    #[test]
    fn perfect_ranking_scores_one(n_rel in 1usize..10, n_irr in 0usize..20) {
        let rel: Vec<bool> = (0..n_rel + n_irr).map(|i| i < n_rel).collect();
        prop_assert_eq!(average_precision::<f64>(&rel, n_rel), Some(1.0));
        prop_assert_eq!(r_precision::<f64>(&rel, n_rel), Some(1.0));
        prop_assert_eq!(reciprocal_rank::<f64>(&rel), 1.0);
    }

    #[test]
    fn ranking_orders_are_sorted_permutations(scores in prop::collection::vec(0u8..5, 0..30)) {
        let scored: Vec<(usize, f64)> = scores.iter().enumerate().map(|(i, &s)| (i, f64::from(s))).collect();
        let desc = rank_descending(&scored);
        let asc = rank_ascending(&scored);
        let ids: BTreeSet<usize> = desc.iter().copied().collect();
        prop_assert_eq!(ids.len(), scored.len());
        for w in desc.windows(2) {
            let (a, b) = (scored[w[0]].1, scored[w[1]].1);
            prop_assert!(a > b || (a == b && w[0] < w[1]));
        }
        for w in asc.windows(2) {
            let (a, b) = (scored[w[0]].1, scored[w[1]].1);
            prop_assert!(a < b || (a == b && w[0] < w[1]));
        }
    }

    #[test]
    fn report_is_the_mean_of_per_query_average_precision(
        cases in prop::collection::vec(relevance_case(), 1..8)
    ) {
        let mut aps = 0.0;
        let rankings: Vec<Ranking<usize>> = cases.iter().enumerate().map(|(q, (rel, n_rel))| {
            aps += average_precision::<f64>(rel, *n_rel).unwrap();
            let ranked: Vec<usize> = (0..rel.len()).collect();
            // relevant ids missing from the list live above its length
            let mut relevant: BTreeSet<usize> = (0..rel.len()).filter(|&i| rel[i]).collect();
            relevant.extend((0..n_rel - relevant.len()).map(|j| 1000 + j));
            Ranking::new(format!("q{q}"), ranked, relevant)
        }).collect();
        let report = MetricReport::from_rankings(&rankings);
        prop_assert!((report.map - aps / cases.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn triplet_losses_are_nonnegative_and_vanish_for_far_negatives(
        v in prop::collection::vec(-2.0f64..2.0, 12)
    ) {
        let (a, p, an, pn) = (&v[0..3], &v[3..6], &v[6..9], &v[9..12]);
        let (lp, li) = triplet_losses(a, p, an, pn);
        prop_assert!(lp >= 0.0 && li >= 0.0);
        let far = |x: &[f64]| x.iter().map(|u| u + 100.0).collect::<Vec<_>>();
        let (lp, li) = triplet_losses(a, p, &far(an), &far(pn));
        prop_assert_eq!((lp, li), (0.0, 0.0));
    }

    #[test]
    fn embedding_store_round_trips(rows in 0usize..6, dim in 1usize..5, seed in any::<u64>()) {
        let ids: Vec<String> = (0..rows).map(|i| format!("img{i}")).collect();
        let data: Vec<f64> = (0..rows * dim).map(|i| ((seed ^ i as u64) % 1000) as f64 / 7.0 - 50.0).collect();
        let store = EmbeddingStore::new(Modality::Text, ids, dim, data).unwrap();
        let mut buf = Vec::new();
        store.write_matrix(&mut buf).unwrap();
        let mut back = EmbeddingStore::read_matrix(buf.as_slice(), Modality::Text).unwrap();
        back.ids = store.ids.clone();
        prop_assert_eq!(back, store);
    }

    #[test]
    fn phrase_normalization_is_idempotent(raw in "[ a-zA-Z,;.!-]{0,40}") {
        for p in split_description(&raw) {
            prop_assert_eq!(normalize_segment(&p.canonical), p.canonical.clone());
            prop_assert!(!p.canonical.is_empty());
        }
    }

    #[test]
    fn caption_scores_are_bounded(
        cand in prop::collection::vec("[a-e]", 1..8),
        refs in prop::collection::vec(prop::collection::vec("[a-e]", 1..8), 1..4),
    ) {
        let cand = cand.join(" ");
        let refs: Vec<String> = refs.into_iter().map(|r| r.join(" ")).collect();
        let r = caption_scores(&cand, &refs);
        for v in r.bleu.into_iter().chain([r.meteor, r.rouge_l]) {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&v), "{:?}", r);
        }
        prop_assert!(r.cider >= 0.0);
        prop_assert!(!tokenize(&cand).is_empty());
    }
}
