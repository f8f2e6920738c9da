use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::MetricValue;

/// One query's ranked candidate list and its relevant set.
#[derive(Clone, Debug, PartialEq)]
pub struct Ranking<I: Ord = String> {
    pub query_id: String,
    pub ranked_ids: Vec<I>,
    pub relevant_ids: BTreeSet<I>,
}

impl<I: Ord + Clone> Ranking<I> {
    pub fn new(query_id: impl Into<String>, ranked_ids: Vec<I>, relevant_ids: BTreeSet<I>) -> Self {
        Ranking {
            query_id: query_id.into(),
            ranked_ids,
            relevant_ids,
        }
    }

    /// Relevance flag for each ranked position.
    pub fn relevance(&self) -> Vec<bool> {
        self.ranked_ids.iter().map(|id| self.relevant_ids.contains(id)).collect()
    }

    pub fn num_relevant(&self) -> usize {
        self.relevant_ids.len()
    }
}

/// Orders `(id, score)` pairs best first: descending score, then ascending id.
pub fn rank_descending<I: Ord + Clone>(scored: &[(I, f64)]) -> Vec<I> {
    let mut v: Vec<&(I, f64)> = scored.iter().collect();
    v.sort_by(|a, b| cmp_score(a.1, b.1, true).then_with(|| a.0.cmp(&b.0)));
    v.into_iter().map(|(id, _)| id.clone()).collect()
}

/// Orders `(id, distance)` pairs best first: ascending distance, then ascending id.
pub fn rank_ascending<I: Ord + Clone>(scored: &[(I, f64)]) -> Vec<I> {
    let mut v: Vec<&(I, f64)> = scored.iter().collect();
    v.sort_by(|a, b| cmp_score(a.1, b.1, false).then_with(|| a.0.cmp(&b.0)));
    v.into_iter().map(|(id, _)| id.clone()).collect()
}

/// Best-first order on scores; NaN always sorts last.
fn cmp_score(a: f64, b: f64, descending: bool) -> Ordering {
    match (a.is_nan(), b.is_nan()) {
        (false, false) => {
            let o = a.partial_cmp(&b).unwrap_or(Ordering::Equal);
            if descending {
                o.reverse()
            } else {
                o
            }
        }
        (x, y) => x.cmp(&y),
    }
}

/// Mean over relevant items of the precision at their rank. Relevant items
/// missing from the list contribute zero. `None` when nothing is relevant.
pub fn average_precision<V: MetricValue>(relevance: &[bool], num_relevant: usize) -> Option<V> {
    if num_relevant == 0 {
        return None;
    }
    let mut hits = 0;
    let mut sum = V::zero();
    for (rank, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum = sum + V::from_count(hits) / V::from_count(rank + 1);
        }
    }
    Some(sum / V::from_count(num_relevant))
}

/// `1 / rank` of the first relevant item, zero when none is ranked.
pub fn reciprocal_rank<V: MetricValue>(relevance: &[bool]) -> V {
    match relevance.iter().position(|&r| r) {
        Some(i) => V::one() / V::from_count(i + 1),
        None => V::zero(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AtK<V> {
    pub precision: V,
    pub recall: V,
    /// `k` exceeded the list length and the full list was used.
    pub truncated: bool,
}

/// Precision and recall of the top `k`. `k` is clamped to the list length.
pub fn precision_recall_at_k<V: MetricValue>(relevance: &[bool], num_relevant: usize, k: usize) -> Option<AtK<V>> {
    assert!(k >= 1, "k must be at least 1");
    if num_relevant == 0 || relevance.is_empty() {
        return None;
    }
    let k_eff = k.min(relevance.len());
    let hits = relevance[..k_eff].iter().filter(|&&r| r).count();
    Some(AtK {
        precision: V::from_count(hits) / V::from_count(k_eff),
        recall: V::from_count(hits) / V::from_count(num_relevant),
        truncated: k > relevance.len(),
    })
}

/// Precision of the first `R` items, `R` the number of relevant items.
pub fn r_precision<V: MetricValue>(relevance: &[bool], num_relevant: usize) -> Option<V> {
    if num_relevant == 0 {
        return None;
    }
    let hits = relevance.iter().take(num_relevant).filter(|&&r| r).count();
    Some(V::from_count(hits) / V::from_count(num_relevant))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query_id: String,
    pub ap: f64,
    pub rr: f64,
    pub p5: f64,
    pub p20: f64,
    pub r5: f64,
    pub r20: f64,
    pub r_precision: f64,
}

/// Per-query values and means over queries with at least one relevant item.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_query: Vec<QueryMetrics>,
    pub map: f64,
    pub mrr: f64,
    pub p5: f64,
    pub p20: f64,
    pub r5: f64,
    pub r20: f64,
    pub r_precision: f64,
    /// Queries skipped because their relevant set was empty.
    pub excluded: Vec<String>,
    /// Queries with no relevant item anywhere in the ranked list.
    pub no_hit: usize,
    /// Queries whose list was shorter than 20.
    pub truncated: usize,
}

impl MetricReport {
    pub fn from_rankings<I: Ord + Clone>(rankings: &[Ranking<I>]) -> Self {
        let mut report = MetricReport::default();
        for r in rankings {
            let rel = r.relevance();
            let n = r.num_relevant();
            let Some(ap) = average_precision::<f64>(&rel, n) else {
                report.excluded.push(r.query_id.clone());
                continue;
            };
            let rr = reciprocal_rank::<f64>(&rel);
            if rr == 0.0 {
                report.no_hit += 1;
            }
            let (at5, at20) = match (
                precision_recall_at_k::<f64>(&rel, n, 5),
                precision_recall_at_k::<f64>(&rel, n, 20),
            ) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    let zero = AtK { precision: 0.0, recall: 0.0, truncated: true };
                    (zero, zero)
                }
            };
            if at20.truncated {
                report.truncated += 1;
            }
            report.per_query.push(QueryMetrics {
                query_id: r.query_id.clone(),
                ap,
                rr,
                p5: at5.precision,
                p20: at20.precision,
                r5: at5.recall,
                r20: at20.recall,
                r_precision: r_precision::<f64>(&rel, n).unwrap_or(0.0),
            });
        }
        let q = report.per_query.len().max(1) as f64;
        let mean = |f: fn(&QueryMetrics) -> f64| report.per_query.iter().map(f).sum::<f64>() / q;
        report.map = mean(|m| m.ap);
        report.mrr = mean(|m| m.rr);
        report.p5 = mean(|m| m.p5);
        report.p20 = mean(|m| m.p20);
        report.r5 = mean(|m| m.r5);
        report.r20 = mean(|m| m.r20);
        report.r_precision = mean(|m| m.r_precision);
        report
    }

    pub fn num_queries(&self) -> usize {
        self.per_query.len()
    }

    pub const TSV_HEADER: &'static str = "MAP\tMRR\tP@5\tP@20\tR@5\tR@20";

    /// Table row scaled by 100 with two decimals.
    pub fn tsv_row(&self) -> String {
        [self.map, self.mrr, self.p5, self.p20, self.r5, self.r20]
            .iter()
            .map(|v| format!("{:.2}", v * 100.0))
            .collect::<Vec<_>>()
            .join("\t")
    }

    /// One `key = value` line per corpus mean.
    pub fn key_values(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("map", self.map),
            ("mrr", self.mrr),
            ("p@5", self.p5),
            ("p@20", self.p20),
            ("r@5", self.r5),
            ("r@20", self.r20),
            ("r_precision", self.r_precision),
        ] {
            s.push_str(&format!("{k} = {v:.6}\n"));
        }
        s.push_str(&format!("queries = {}\n", self.num_queries()));
        s.push_str(&format!("excluded = {}\n", self.excluded.len()));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;

    type Q = Ratio<i64>;

    #[test]
    fn perfect_ranking_scores_one() {
        let rel = [true, true, false, false];
        assert_eq!(average_precision::<f64>(&rel, 2), Some(1.0));
        assert_eq!(r_precision::<f64>(&rel, 2), Some(1.0));
        assert_eq!(reciprocal_rank::<f64>(&rel), 1.0);
    }

    #[test]
    fn ap_of_interleaved_ranking() {
        let ap = average_precision::<Q>(&[true, false, true], 2).unwrap();
        assert_eq!(ap, (Q::from_integer(1) + Q::new(2, 3)) / Q::from_integer(2));
    }

    #[test]
    fn rr_at_rank_four() {
        assert_eq!(reciprocal_rank::<Q>(&[false, false, false, true]), Q::new(1, 4));
        assert_eq!(reciprocal_rank::<f64>(&[false, false]), 0.0);
    }

    #[test]
    fn precision_recall_definition_and_truncation() {
        let rel = [true, false, true, false, false, true, true];
        let at5 = precision_recall_at_k::<Q>(&rel, 4, 5).unwrap();
        assert_eq!((at5.precision, at5.recall), (Q::new(2, 5), Q::new(1, 2)));
        assert!(!at5.truncated);
        let all = precision_recall_at_k::<Q>(&rel, 4, 20).unwrap();
        assert!(all.truncated);
        assert_eq!(all.recall, Q::from_integer(1));
    }

    #[test]
    fn empty_relevant_set_is_excluded() {
        assert_eq!(average_precision::<f64>(&[false, false], 0), None);
        let r = Ranking::new("q", vec!["a".to_string()], BTreeSet::new());
        let report = MetricReport::from_rankings(&[r]);
        assert_eq!(report.excluded, vec!["q".to_string()]);
        assert_eq!(report.num_queries(), 0);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let scored = vec![("c", 0.5), ("a", 0.5), ("b", 0.9), ("d", f64::NAN)];
        assert_eq!(rank_descending(&scored), vec!["b", "a", "c", "d"]);
        let dist = vec![("c", 1.0), ("a", 1.0), ("b", 0.1)];
        assert_eq!(rank_ascending(&dist), vec!["b", "a", "c"]);
    }

    #[test]
    fn report_means_and_tsv() {
        let mk = |ranked: &[&str], rel: &[&str]| {
            Ranking::new(
                "q",
                ranked.iter().map(|s| s.to_string()).collect(),
                rel.iter().map(|s| s.to_string()).collect(),
            )
        };
        let report = MetricReport::from_rankings(&[mk(&["a", "b"], &["a"]), mk(&["a", "b"], &["b"])]);
        assert!((report.map - 0.75).abs() < 1e-12);
        assert!((report.mrr - 0.75).abs() < 1e-12);
        assert_eq!(report.tsv_row().split('\t').next(), Some("75.00"));
        assert_eq!(report.truncated, 2);
    }
}
