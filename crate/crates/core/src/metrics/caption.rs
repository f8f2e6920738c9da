//! Corpus-level caption metrics: BLEU-1..4, simplified METEOR (exact unigram
//! matches with a fragmentation penalty), ROUGE-L and plain CIDEr.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

/// Lowercase, replace punctuation (other than interior `'` and `-`) by
/// spaces, split on whitespace.
pub fn tokenize(s: &str) -> Vec<String> {
    let cleaned: String = s
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '\'' || c == '-' { c } else { ' ' })
        .collect();
    cleaned
        .split_whitespace()
        .map(|t| t.trim_matches(|c| c == '\'' || c == '-').to_string())
        .filter(|t| !t.is_empty())
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CaptionReport {
    pub bleu: [f64; 4],
    pub meteor: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

impl CaptionReport {
    pub const TSV_HEADER: &'static str = "BLEU-1\tBLEU-2\tBLEU-3\tBLEU-4\tMETEOR\tROUGE-L\tCIDEr";

    pub fn tsv_row(&self) -> String {
        let mut v: Vec<f64> = self.bleu.to_vec();
        v.extend([self.meteor, self.rouge_l, self.cider]);
        v.iter().map(|x| format!("{:.2}", x * 100.0)).collect::<Vec<_>>().join("\t")
    }
}

type NgramCounts = HashMap<Vec<String>, usize>;

fn ngrams(tokens: &[String], n: usize) -> NgramCounts {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    m
}

/// Scores tokenized candidates against tokenized reference sets. CIDEr
/// document frequencies are taken over the reference sets given here.
pub struct CaptionScorer {
    refs: Vec<Vec<Vec<String>>>,
    doc_freq: [HashMap<Vec<String>, usize>; 4],
}

impl CaptionScorer {
    pub fn new(references: Vec<Vec<Vec<String>>>) -> Self {
        let mut doc_freq: [HashMap<Vec<String>, usize>; 4] = Default::default();
        for set in &references {
            for (n, df) in doc_freq.iter_mut().enumerate() {
                let mut seen: Vec<Vec<String>> = set.iter().flat_map(|r| ngrams(r, n + 1).into_keys()).collect();
                seen.sort();
                seen.dedup();
                for g in seen {
                    *df.entry(g).or_insert(0) += 1;
                }
            }
        }
        CaptionScorer { refs: references, doc_freq }
    }

    pub fn from_strings(references: &[Vec<String>]) -> Self {
        Self::new(
            references
                .iter()
                .map(|set| set.iter().map(|r| tokenize(r)).collect())
                .collect(),
        )
    }

    /// `candidates[i]` is scored against reference set `i`.
    pub fn score(&self, candidates: &[Vec<String>]) -> CaptionReport {
        assert_eq!(candidates.len(), self.refs.len(), "one candidate per reference set");
        if candidates.is_empty() {
            return CaptionReport::default();
        }
        let bleu = self.bleu(candidates);
        let m = candidates.len() as f64;
        let mut meteor = 0.0;
        let mut rouge = 0.0;
        let mut cider = 0.0;
        for (c, refs) in candidates.iter().zip(&self.refs) {
            meteor += meteor_sentence(c, refs);
            rouge += rouge_l_sentence(c, refs);
            cider += self.cider_sentence(c, refs);
        }
        CaptionReport {
            bleu,
            meteor: meteor / m,
            rouge_l: rouge / m,
            cider: cider / m,
        }
    }

    fn bleu(&self, candidates: &[Vec<String>]) -> [f64; 4] {
        let mut matched = [0usize; 4];
        let mut total = [0usize; 4];
        let (mut cand_len, mut ref_len) = (0usize, 0usize);
        for (c, refs) in candidates.iter().zip(&self.refs) {
            if c.is_empty() {
                ref_len += closest_ref_len(0, refs);
                continue;
            }
            cand_len += c.len();
            ref_len += closest_ref_len(c.len(), refs);
            for n in 1..=4 {
                let cg = ngrams(c, n);
                let mut max_ref: NgramCounts = HashMap::new();
                for r in refs {
                    for (g, k) in ngrams(r, n) {
                        let e = max_ref.entry(g).or_insert(0);
                        *e = (*e).max(k);
                    }
                }
                for (g, k) in &cg {
                    matched[n - 1] += (*k).min(max_ref.get(g).copied().unwrap_or(0));
                }
                total[n - 1] += c.len().saturating_sub(n - 1);
            }
        }
        if cand_len == 0 {
            return [0.0; 4];
        }
        let bp = if cand_len >= ref_len {
            1.0
        } else {
            (1.0 - ref_len as f64 / cand_len as f64).exp()
        };
        let mut out = [0.0; 4];
        let mut log_sum = 0.0;
        for n in 0..4 {
            if matched[n] == 0 || total[n] == 0 {
                // every higher order is zero too
                break;
            }
            log_sum += (matched[n] as f64 / total[n] as f64).ln();
            out[n] = bp * (log_sum / (n + 1) as f64).exp();
        }
        out
    }

    fn cider_sentence(&self, cand: &[String], refs: &[Vec<String>]) -> f64 {
        if cand.is_empty() || refs.is_empty() {
            return 0.0;
        }
        let n_docs = self.refs.len() as f64;
        let mut total = 0.0;
        for n in 1..=4 {
            let df = &self.doc_freq[n - 1];
            let vec = |toks: &[String]| -> HashMap<Vec<String>, f64> {
                let counts = ngrams(toks, n);
                let len: usize = counts.values().sum();
                counts
                    .into_iter()
                    .map(|(g, k)| {
                        let idf = (n_docs / df.get(&g).copied().unwrap_or(0).max(1) as f64).ln();
                        (g, k as f64 / len as f64 * idf)
                    })
                    .collect()
            };
            let cv = vec(cand);
            let mut sim = 0.0;
            for r in refs {
                sim += cosine(&cv, &vec(r));
            }
            total += sim / refs.len() as f64;
        }
        total / 4.0
    }
}

fn cosine(a: &HashMap<Vec<String>, f64>, b: &HashMap<Vec<String>, f64>) -> f64 {
    let dot: f64 = a.iter().map(|(g, v)| v * b.get(g).copied().unwrap_or(0.0)).sum();
    let na = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Reference length closest to `c`, ties to the shorter.
fn closest_ref_len(c: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(c), l))
        .unwrap_or(0)
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

const ROUGE_BETA: f64 = 1.2;

fn rouge_l_sentence(cand: &[String], refs: &[Vec<String>]) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let (mut p_max, mut r_max) = (0.0f64, 0.0f64);
    for r in refs.iter().filter(|r| !r.is_empty()) {
        let l = lcs(cand, r) as f64;
        p_max = p_max.max(l / cand.len() as f64);
        r_max = r_max.max(l / r.len() as f64);
    }
    if p_max == 0.0 || r_max == 0.0 {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p_max * r_max / (r_max + b2 * p_max)
}

/// Exact unigram alignment: each candidate token takes the first unused
/// identical reference token. Returns aligned reference positions.
fn align(cand: &[String], reference: &[String]) -> Vec<Option<usize>> {
    let mut used = vec![false; reference.len()];
    cand.iter()
        .map(|t| {
            let j = reference.iter().enumerate().position(|(j, r)| !used[j] && r == t)?;
            used[j] = true;
            Some(j)
        })
        .collect()
}

fn meteor_pair(cand: &[String], reference: &[String]) -> f64 {
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let alignment = align(cand, reference);
    let matches = alignment.iter().flatten().count();
    if matches == 0 {
        return 0.0;
    }
    let mut chunks = 0;
    let mut prev: Option<usize> = None;
    for a in &alignment {
        match (a, prev) {
            (Some(j), Some(p)) if *j == p + 1 => {}
            (Some(_), _) => chunks += 1,
            _ => {}
        }
        prev = *a;
    }
    let p = matches as f64 / cand.len() as f64;
    let r = matches as f64 / reference.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / matches as f64).powi(3);
    fmean * (1.0 - penalty)
}

fn meteor_sentence(cand: &[String], refs: &[Vec<String>]) -> f64 {
    refs.iter().map(|r| meteor_pair(cand, r)).fold(0.0, f64::max)
}

/// Scores a single candidate against its references.
pub fn caption_scores(candidate: &str, references: &[String]) -> CaptionReport {
    let scorer = CaptionScorer::from_strings(&[references.to_vec()]);
    scorer.score(&[tokenize(candidate)])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn tokenize_strips_punctuation_and_case() {
        assert_eq!(toks("Red dots, zig-zag; Blue."), vec!["red", "dots", "zig-zag", "blue"]);
    }

    #[test]
    fn identity_scores_one() {
        let s = "red and white stripes on a dark background";
        let r = caption_scores(s, &[s.to_string()]);
        assert_eq!(r.bleu, [1.0; 4]);
        assert_eq!(r.rouge_l, 1.0);
        assert!(r.meteor > 0.99);
    }

    #[test]
    fn disjoint_tokens_score_zero() {
        let r = caption_scores("blue zigzag", &["red dotted pattern".to_string()]);
        assert_eq!(r.bleu[0], 0.0);
        assert_eq!(r.rouge_l, 0.0);
        assert_eq!(r.meteor, 0.0);
    }

    #[test]
    fn empty_candidate_scores_zero() {
        assert_eq!(caption_scores("", &["red dots".to_string()]), CaptionReport::default());
    }

    #[test]
    fn bleu_hand_computed() {
        // candidate "a b c d" vs reference "a b x d e":
        // p1 = 3/4, p2 = 1/3, bp = exp(1 - 5/4)
        let scorer = CaptionScorer::new(vec![vec![toks("a b x d e")]]);
        let r = scorer.score(&[toks("a b c d")]);
        let bp = (1.0f64 - 5.0 / 4.0).exp();
        assert!((r.bleu[0] - bp * 0.75).abs() < 1e-12);
        assert!((r.bleu[1] - bp * (0.75f64 * (1.0 / 3.0)).sqrt()).abs() < 1e-12);
        assert_eq!(r.bleu[2], 0.0);
    }

    #[test]
    fn rouge_and_meteor_hand_computed() {
        let c = toks("a b c d");
        let r = toks("a c b d");
        // lcs = 3
        let p: f64 = 0.75;
        let b2 = 1.44;
        let expected = (1.0 + b2) * p * p / (p + b2 * p);
        assert!((rouge_l_sentence(&c, std::slice::from_ref(&r)) - expected).abs() < 1e-12);
        // four matches in chunks: [a], [b], [c], [d]
        let m = meteor_pair(&c, &r);
        let want = 1.0 * (1.0 - 0.5 * (4.0f64 / 4.0).powi(3));
        assert!((m - want).abs() < 1e-12);
    }

    #[test]
    fn cider_prefers_matching_candidate() {
        let refs = vec![
            vec![toks("red dots on white")],
            vec![toks("blue stripes on black")],
        ];
        let scorer = CaptionScorer::new(refs);
        let good = scorer.score(&[toks("red dots on white"), toks("blue stripes on black")]);
        let bad = scorer.score(&[toks("blue stripes on black"), toks("red dots on white")]);
        assert!(good.cider > 0.5 && bad.cider < good.cider);
    }
}
