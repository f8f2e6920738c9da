use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Phrase {
    pub tokens: Vec<String>,
    pub canonical: String,
}

impl Phrase {
    /// Builds a phrase from already-normalized text.
    pub fn from_canonical(s: &str) -> Self {
        let tokens: Vec<String> = s.split_whitespace().map(str::to_string).collect();
        Phrase {
            canonical: tokens.join(" "),
            tokens,
        }
    }
}

/// Lowercase, strip punctuation at both edges, collapse internal whitespace.
pub fn normalize_segment(seg: &str) -> String {
    let lower = seg.to_lowercase();
    let trimmed = lower.trim_matches(|c: char| !c.is_alphanumeric());
    trimmed.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Splits on `,` and `;`, normalizes each segment and drops empty ones.
pub fn split_description(raw: &str) -> Vec<Phrase> {
    raw.split([',', ';'])
        .map(normalize_segment)
        .filter(|s| !s.is_empty())
        .map(|s| Phrase::from_canonical(&s))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn canon(raw: &str) -> Vec<String> {
        split_description(raw).into_iter().map(|p| p.canonical).collect()
    }

    #[test]
    fn splits_on_commas() {
        assert_eq!(
            canon("spiralled, rounded, thick, light colour, rope type"),
            vec!["spiralled", "rounded", "thick", "light colour", "rope type"]
        );
        assert_eq!(canon("dotted"), vec!["dotted"]);
    }

    #[test]
    fn normalizes_case_whitespace_and_delimiters() {
        assert_eq!(canon(" Red ;  blue,  "), vec!["red", "blue"]);
        assert_eq!(canon("  Light   Colour. "), vec!["light colour"]);
        assert!(canon(" , ;; ").is_empty());
    }

    #[test]
    fn keeps_interior_punctuation() {
        assert_eq!(canon("Zig-Zag, rock's edge!"), vec!["zig-zag", "rock's edge"]);
    }

    #[test]
    fn tokens_round_trip() {
        for p in split_description("a  b c, d") {
            assert_eq!(p.tokens.join(" "), p.canonical);
        }
    }
}
