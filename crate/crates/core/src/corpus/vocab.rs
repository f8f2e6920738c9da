use std::collections::HashMap;

use super::Description;
use crate::{Error, Result};

/// Frequency-filtered phrase and word inventories.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    phrases: Vec<String>,
    phrase_counts: Vec<usize>,
    phrase_index: HashMap<String, usize>,
    words: Vec<String>,
    word_counts: Vec<usize>,
    word_index: HashMap<String, usize>,
    pub phrase_min_count: usize,
    pub word_min_count: usize,
    /// Number of descriptions that contributed counts.
    pub counted_descriptions: usize,
}

/// Entries with count ≥ `min`, ordered by descending count then ascending text.
fn filter_sorted(counts: HashMap<String, usize>, min: usize) -> Vec<(String, usize)> {
    let mut v: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min).collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v
}

/// Counts every phrase and word occurrence in `descriptions`. Callers pass
/// training descriptions only.
pub fn build_vocabulary<'a>(
    descriptions: impl IntoIterator<Item = &'a Description>,
    phrase_min: usize,
    word_min: usize,
) -> Result<Vocabulary> {
    let mut pc: HashMap<String, usize> = HashMap::new();
    let mut wc: HashMap<String, usize> = HashMap::new();
    let mut counted = 0;
    for d in descriptions {
        counted += 1;
        for p in &d.phrases {
            *pc.entry(p.canonical.clone()).or_insert(0) += 1;
            for t in &p.tokens {
                *wc.entry(t.clone()).or_insert(0) += 1;
            }
        }
    }
    let phrases = filter_sorted(pc, phrase_min);
    if phrases.is_empty() {
        return Err(Error::Empty(format!("no phrase occurs at least {phrase_min} times")));
    }
    let words = filter_sorted(wc, word_min);
    let mut v = Vocabulary::from_counts(phrases, words);
    v.phrase_min_count = phrase_min;
    v.word_min_count = word_min;
    v.counted_descriptions = counted;
    Ok(v)
}

impl Vocabulary {
    pub fn from_counts(phrases: Vec<(String, usize)>, words: Vec<(String, usize)>) -> Self {
        let (phrases, phrase_counts): (Vec<_>, Vec<_>) = phrases.into_iter().unzip();
        let (words, word_counts): (Vec<_>, Vec<_>) = words.into_iter().unzip();
        let index = |v: &[String]| v.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Vocabulary {
            phrase_index: index(&phrases),
            word_index: index(&words),
            phrases,
            phrase_counts,
            words,
            word_counts,
            phrase_min_count: 0,
            word_min_count: 0,
            counted_descriptions: 0,
        }
    }

    /// Fixed phrase list in the given order; words are the phrase tokens.
    pub fn from_phrases<S: AsRef<str>>(phrases: &[S]) -> Self {
        let mut words: Vec<String> = phrases
            .iter()
            .flat_map(|p| p.as_ref().split_whitespace().map(str::to_string))
            .collect();
        words.sort();
        words.dedup();
        Self::from_counts(
            phrases.iter().map(|p| (p.as_ref().to_string(), 0)).collect(),
            words.into_iter().map(|w| (w, 0)).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn phrases(&self) -> &[String] {
        &self.phrases
    }

    pub fn phrase(&self, i: usize) -> &str {
        &self.phrases[i]
    }

    pub fn phrase_count(&self, i: usize) -> usize {
        self.phrase_counts[i]
    }

    pub fn index(&self, phrase: &str) -> Option<usize> {
        self.phrase_index.get(phrase).copied()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word_index(&self, w: &str) -> Option<usize> {
        self.word_index.get(w).copied()
    }

    /// Phrases starting with `prefix`, in vocabulary order.
    pub fn complete(&self, prefix: &str) -> Vec<&str> {
        let prefix = prefix.to_lowercase();
        self.phrases
            .iter()
            .filter(|p| p.starts_with(&prefix))
            .map(String::as_str)
            .collect()
    }

    fn tsv(items: &[String], counts: &[usize]) -> String {
        let mut s = String::from("index\tphrase\tcount\n");
        for (i, (p, c)) in items.iter().zip(counts).enumerate() {
            s.push_str(&format!("{i}\t{p}\t{c}\n"));
        }
        s
    }

    pub fn phrases_tsv(&self) -> String {
        Self::tsv(&self.phrases, &self.phrase_counts)
    }

    pub fn words_tsv(&self) -> String {
        Self::tsv(&self.words, &self.word_counts)
    }

    fn parse_tsv(s: &str) -> Result<Vec<(String, usize)>> {
        let mut out = Vec::new();
        for (n, line) in s.lines().enumerate().skip(1) {
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let bad = |reason: &str| Error::MalformedRecord {
                path: "<vocabulary>".into(),
                line: n + 1,
                reason: reason.into(),
            };
            if cols.len() != 3 {
                return Err(bad("expected 3 columns"));
            }
            let idx: usize = cols[0].parse().map_err(|_| bad("bad index"))?;
            if idx != out.len() {
                return Err(bad("indices must be 0..n in order"));
            }
            let count = cols[2].parse().map_err(|_| bad("bad count"))?;
            out.push((cols[1].to_string(), count));
        }
        Ok(out)
    }

    pub fn from_tsv(phrases_tsv: &str, words_tsv: &str) -> Result<Self> {
        Ok(Self::from_counts(Self::parse_tsv(phrases_tsv)?, Self::parse_tsv(words_tsv)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desc(raw: &str) -> Description {
        Description::parse("img", raw).unwrap()
    }

    #[test]
    fn threshold_boundary_includes_exact_count() {
        let ds: Vec<Description> = (0..10).map(|_| desc("red dots, stripes")).collect();
        let v = build_vocabulary(&ds, 10, 5).unwrap();
        assert_eq!(v.phrases(), &["red dots", "stripes"]);
        assert!(build_vocabulary(&ds[..9], 10, 5).is_err());
    }

    #[test]
    fn orders_by_count_then_lexicographic() {
        let ds = vec![desc("b, a, c, c"), desc("b, a, c")];
        let v = build_vocabulary(&ds, 1, 1).unwrap();
        assert_eq!(v.phrases(), &["c", "a", "b"]);
        assert_eq!(v.phrase_count(0), 3);
        assert_eq!(v.counted_descriptions, 2);
    }

    #[test]
    fn tsv_round_trip() {
        let ds = vec![desc("red dots, dots"), desc("red dots")];
        let v = build_vocabulary(&ds, 1, 1).unwrap();
        let back = Vocabulary::from_tsv(&v.phrases_tsv(), &v.words_tsv()).unwrap();
        assert_eq!(back.phrases(), v.phrases());
        assert_eq!(back.words(), v.words());
        assert_eq!(back.phrases_tsv(), v.phrases_tsv());
    }

    #[test]
    fn prefix_completion() {
        let v = Vocabulary::from_phrases(&["banded", "blue", "bands of red"]);
        assert_eq!(v.complete("ban"), vec!["banded", "bands of red"]);
        assert!(v.complete("x").is_empty());
    }
}
