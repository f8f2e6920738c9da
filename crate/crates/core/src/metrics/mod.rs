//! Retrieval and captioning metrics.

pub mod caption;
pub mod ranking;

pub use caption::{caption_scores, tokenize, CaptionReport, CaptionScorer};
pub use ranking::{
    average_precision, precision_recall_at_k, r_precision, rank_ascending, rank_descending, reciprocal_rank,
    AtK, MetricReport, QueryMetrics, Ranking,
};
