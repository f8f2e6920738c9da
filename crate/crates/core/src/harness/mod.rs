//! Experiment configuration, run manifests, end-to-end pipelines and the
//! retrieval service behind the web interface.

pub mod api;
pub mod config;
pub mod manifest;
pub mod pipeline;

pub use api::{
    Backend, DescribeResponse, QueryMode, RetrievalApi, RetrieveRequest, RetrieveResponse, RetrievedImage,
    ScoredPhrase, Snapshot, SourceRank, TextEmbedder,
};
pub use config::{BackboneKind, DataSection, ExperimentConfig, ExperimentSection, ModelKind, OutputSection, Precision};
pub use manifest::{corpus_checksum, sha256_file, RunManifest, CODE_VERSION};
pub use pipeline::{
    eval_caption, eval_retrieval, load_data, load_snapshot, prepare_data, synth_generate, synth_probe,
    synthetic_probe_set, train, transfer_cub, ClassifierScorer, ProbeScorer, TransferOptions,
};

#[cfg(test)]
mod tests;
