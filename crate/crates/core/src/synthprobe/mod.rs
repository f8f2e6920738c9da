//! Synthetic two-color textures with templated descriptions and the four
//! compositional probing experiments scored by R-precision.

mod bases;
mod demo;
mod generate;
mod probe;

pub use bases::{procedural_bases, BaseTexture, TextureType, PATTERNS};
pub use demo::demo_corpus;
pub use generate::{generate_corpus, parse_description, recolor, to_corpus, SyntheticImage};
pub use probe::{
    build_all, build_probe, chance_rate, manifest_tsv, run_probe, DescriptionScorer, ExperimentSummary, ProbeReport,
    ProbeTask, RandomScorer, SimilarGroups,
};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Foreground,
    Background,
    ColorPattern,
    TwoColors,
}

impl Experiment {
    pub const ALL: [Experiment; 4] = [
        Experiment::Foreground,
        Experiment::Background,
        Experiment::ColorPattern,
        Experiment::TwoColors,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::Foreground => "foreground",
            Experiment::Background => "background",
            Experiment::ColorPattern => "color_pattern",
            Experiment::TwoColors => "two_colors",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Experiment::ALL.into_iter().find(|e| e.as_str() == s).or(match s {
            "1" | "exp1" => Some(Experiment::Foreground),
            "2" | "exp2" => Some(Experiment::Background),
            "3" | "exp3" => Some(Experiment::ColorPattern),
            "4" | "exp4" => Some(Experiment::TwoColors),
            _ => None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedColor {
    pub name: String,
    pub rgb: [u8; 3],
}

/// Named colors with their RGB values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub colors: Vec<NamedColor>,
}

impl Default for Palette {
    /// The eleven conventional named colors.
    fn default() -> Self {
        let table: [(&str, [u8; 3]); 11] = [
            ("white", [255, 255, 255]),
            ("black", [0, 0, 0]),
            ("brown", [139, 69, 19]),
            ("green", [0, 128, 0]),
            ("blue", [0, 0, 255]),
            ("red", [255, 0, 0]),
            ("yellow", [255, 255, 0]),
            ("pink", [255, 192, 203]),
            ("orange", [255, 165, 0]),
            ("gray", [128, 128, 128]),
            ("purple", [128, 0, 128]),
        ];
        Palette {
            colors: table
                .iter()
                .map(|(n, rgb)| NamedColor { name: n.to_string(), rgb: *rgb })
                .collect(),
        }
    }
}

impl Palette {
    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.colors.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn rgb(&self, name: &str) -> Option<[u8; 3]> {
        self.colors.iter().find(|c| c.name == name).map(|c| c.rgb)
    }

    pub fn validate(&self) -> crate::Result<()> {
        let mut names = self.names();
        names.sort_unstable();
        let n = names.len();
        names.dedup();
        if names.len() != n {
            return Err(crate::Error::Config("palette color names must be unique".into()));
        }
        Ok(())
    }
}
