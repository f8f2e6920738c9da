use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Experiment, Palette, SyntheticImage, TextureType, PATTERNS};
use crate::metrics::{r_precision, rank_descending};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeTask {
    pub experiment: Experiment,
    pub query: String,
    /// Sorted, disjoint from `negative_ids`.
    pub positive_ids: Vec<String>,
    pub negative_ids: Vec<String>,
}

impl ProbeTask {
    pub fn universe(&self) -> Vec<String> {
        let mut u: Vec<String> = self.positive_ids.iter().chain(&self.negative_ids).cloned().collect();
        u.sort();
        u
    }
}

/// `|pos| / (|pos| + |neg|)`: expected R-precision of a uniformly random ranking.
pub fn chance_rate(task: &ProbeTask) -> f64 {
    let p = task.positive_ids.len() as f64;
    p / (p + task.negative_ids.len() as f64)
}

/// Pattern groups whose members are not negatives for each other in the
/// color+pattern experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarGroups(pub Vec<Vec<String>>);

impl Default for SimilarGroups {
    fn default() -> Self {
        let g = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        SimilarGroups(vec![
            g(&["lines", "banded", "stripes"]),
            g(&["dots", "polka-dots"]),
            g(&["squares", "hexagon"]),
        ])
    }
}

impl SimilarGroups {
    pub fn similar(&self, p: &str, q: &str) -> bool {
        p == q || self.0.iter().any(|g| g.iter().any(|x| x == p) && g.iter().any(|x| x == q))
    }
}

fn ids<'a>(it: impl Iterator<Item = &'a SyntheticImage>) -> Vec<String> {
    let mut v: Vec<String> = it.map(|s| s.id.clone()).collect();
    v.sort();
    v
}

/// Tasks of one experiment and the number dropped for an empty side.
pub fn build_probe(
    experiment: Experiment,
    images: &[SyntheticImage],
    palette: &Palette,
    groups: &SimilarGroups,
) -> Result<(Vec<ProbeTask>, usize)> {
    let colors = palette.names();
    let type_a: Vec<&SyntheticImage> = images.iter().filter(|s| s.kind == TextureType::A).collect();
    let mut raw: Vec<(String, Vec<String>, Vec<String>)> = Vec::new();
    match experiment {
        Experiment::Foreground => {
            for p in PATTERNS.iter().filter(|p| TextureType::of(p) == Some(TextureType::A)) {
                for c in &colors {
                    let of_p = type_a.iter().filter(|s| s.pattern == *p);
                    raw.push((
                        format!("{c} {p}"),
                        ids(of_p.clone().filter(|s| s.color1 == *c).copied()),
                        ids(of_p.filter(|s| s.color2 == *c).copied()),
                    ));
                }
            }
        }
        Experiment::Background => {
            for c in &colors {
                raw.push((
                    format!("{c} background"),
                    ids(type_a.iter().filter(|s| s.color2 == *c).copied()),
                    ids(type_a.iter().filter(|s| s.color1 == *c).copied()),
                ));
            }
        }
        Experiment::ColorPattern => {
            for p in PATTERNS {
                for c in &colors {
                    let pos = ids(images.iter().filter(|s| s.pattern == p && s.has_color(c)));
                    let neg = ids(images.iter().filter(|s| {
                        if s.pattern == p {
                            !s.has_color(c)
                        } else {
                            s.has_color(c) && !groups.similar(p, &s.pattern)
                        }
                    }));
                    raw.push((format!("{c} {p}"), pos, neg));
                }
            }
        }
        Experiment::TwoColors => {
            for (i, a) in colors.iter().enumerate() {
                for b in &colors[i + 1..] {
                    let pos = ids(images.iter().filter(|s| s.has_color(a) && s.has_color(b)));
                    let neg = ids(images.iter().filter(|s| s.has_color(a) != s.has_color(b)));
                    raw.push((format!("{a} and {b}"), pos, neg));
                }
            }
        }
    }
    let mut tasks = Vec::with_capacity(raw.len());
    let mut dropped = 0;
    for (query, pos, neg) in raw {
        if pos.is_empty() || neg.is_empty() {
            log::warn!("{} task {query:?} has an empty side; dropped", experiment.as_str());
            dropped += 1;
            continue;
        }
        let p: BTreeSet<&String> = pos.iter().collect();
        if neg.iter().any(|n| p.contains(n)) {
            return Err(Error::Config(format!("task {query:?}: positive and negative sets overlap")));
        }
        tasks.push(ProbeTask {
            experiment,
            query,
            positive_ids: pos,
            negative_ids: neg,
        });
    }
    Ok((tasks, dropped))
}

/// All four experiments, in order.
pub fn build_all(images: &[SyntheticImage], palette: &Palette, groups: &SimilarGroups) -> Result<Vec<ProbeTask>> {
    let mut all = Vec::new();
    for e in Experiment::ALL {
        all.extend(build_probe(e, images, palette, groups)?.0);
    }
    Ok(all)
}

/// `experiment \t query \t image_id \t pos|neg`, positives first per task.
pub fn manifest_tsv(tasks: &[ProbeTask]) -> String {
    let mut s = String::from("experiment\tquery\timage_id\tlabel\n");
    for t in tasks {
        for (set, label) in [(&t.positive_ids, "pos"), (&t.negative_ids, "neg")] {
            for id in set {
                s.push_str(&format!("{}\t{}\t{}\t{}\n", t.experiment.as_str(), t.query, id, label));
            }
        }
    }
    s
}

/// Anything that can score description queries against images by id.
pub trait DescriptionScorer: Sync {
    fn name(&self) -> &str;
    /// Higher is more relevant.
    fn score(&self, query: &str, image_ids: &[String]) -> Result<Vec<f64>>;
}

/// Uniform pseudo-random scores keyed on `(seed, query, image)`.
pub struct RandomScorer {
    pub seed: u64,
}

impl DescriptionScorer for RandomScorer {
    fn name(&self) -> &str {
        "random"
    }

    fn score(&self, query: &str, image_ids: &[String]) -> Result<Vec<f64>> {
        Ok(image_ids
            .iter()
            .map(|id| {
                let mut h = Sha256::new();
                h.update(self.seed.to_le_bytes());
                h.update(query.as_bytes());
                h.update([0]);
                h.update(id.as_bytes());
                let d = h.finalize();
                (u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub experiment: Experiment,
    pub tasks: usize,
    pub mean: f64,
    /// Sample standard deviation over tasks.
    pub std: f64,
    /// Mean per-task chance rate.
    pub chance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub model: String,
    /// `(experiment, query, R-precision)`
    pub per_task: Vec<(Experiment, String, f64)>,
    pub summaries: Vec<ExperimentSummary>,
}

impl ProbeReport {
    pub fn summary(&self, e: Experiment) -> Option<&ExperimentSummary> {
        self.summaries.iter().find(|s| s.experiment == e)
    }

    pub const TSV_HEADER: &'static str = "model\tforeground\tbackground\tcolor_pattern\ttwo_colors";

    /// `mean ± std` per experiment, ×100 with two decimals.
    pub fn tsv_row(&self) -> String {
        let mut cols = vec![self.model.clone()];
        for e in Experiment::ALL {
            cols.push(match self.summary(e) {
                Some(s) => format!("{:.2} ± {:.2}", s.mean * 100.0, s.std * 100.0),
                None => "-".into(),
            });
        }
        cols.join("\t")
    }
}

/// R-precision of `scorer` on every task over its positive ∪ negative universe.
pub fn run_probe(scorer: &dyn DescriptionScorer, tasks: &[ProbeTask]) -> Result<ProbeReport> {
    let per_task: Vec<(Experiment, String, f64)> = tasks
        .par_iter()
        .map(|t| {
            let universe = t.universe();
            let scores = scorer.score(&t.query, &universe)?;
            if scores.len() != universe.len() {
                return Err(Error::Shape(format!("scorer returned {} scores for {} images", scores.len(), universe.len())));
            }
            let scored: Vec<(String, f64)> = universe.into_iter().zip(scores).collect();
            let pos: BTreeSet<&String> = t.positive_ids.iter().collect();
            let rel: Vec<bool> = rank_descending(&scored).iter().map(|id| pos.contains(id)).collect();
            let rp = r_precision::<f64>(&rel, pos.len()).unwrap_or(0.0);
            Ok((t.experiment, t.query.clone(), rp))
        })
        .collect::<Result<_>>()?;
    let mut summaries = Vec::new();
    for e in Experiment::ALL {
        let vals: Vec<f64> = per_task.iter().filter(|t| t.0 == e).map(|t| t.2).collect();
        if vals.is_empty() {
            continue;
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = if vals.len() > 1 {
            vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let chance = tasks.iter().filter(|t| t.experiment == e).map(chance_rate).sum::<f64>() / n;
        summaries.push(ExperimentSummary {
            experiment: e,
            tasks: vals.len(),
            mean,
            std: var.sqrt(),
            chance,
        });
    }
    Ok(ProbeReport {
        model: scorer.name().to_string(),
        per_task,
        summaries,
    })
}
