//! Bi-level graph matching for video retrieval over a dual interaction graph.
//!
//! A platform where the same account both watches videos and buys items yields
//! two bipartite graphs that share their user set: user-video and user-item.
//! This crate learns per-user retrieval embeddings by *matching* the two sides
//! of each user's 1-hop neighbourhood — first node against node, then pooled
//! preference against pooled preference — and fusing the result through a small
//! MLP. Scores are plain dot products against graph-smoothed video embeddings,
//! trained with a pairwise ranking loss.
//!
//! Everything numeric is `f64` and every backward pass is written by hand; the
//! `gradcheck` module verifies the analytic gradients against central finite
//! differences end to end. There is no autodiff anywhere.
//!
//! Modules, roughly in pipeline order:
//!
//! * [`graph`] — TSV ingestion, the dual graph, subgraph extraction, binary persistence
//! * [`config`] — flat-text model/training configuration
//! * [`params`] — parameter store, Xavier init, Adam, checkpoints
//! * [`embed`] — feature-concat node embeddings and the one-hop mean smoother
//! * [`matchnode`] — bilinear node relevance, dual softmax normalization, propagation
//! * [`pref`] — soft-assignment pooling and preference-level matching rounds
//! * [`model`] — the per-user forward/backward pipeline and ablation variants
//! * [`train`] — ranking loss, negative sampling, epochs, top-k retrieval, export
//! * [`metrics`] — AUC and thresholded classification metrics
//! * [`synth`] — synthetic dual-graph generator with a cross-graph signal knob
//! * [`evalrun`] — evaluation protocol, ablation and sweep drivers
//! * [`gradcheck`] — finite-difference verification harness

pub mod config;
pub mod embed;
pub mod evalrun;
pub mod gradcheck;
pub mod graph;
pub mod matchnode;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pref;
pub mod synth;
pub mod train;

use thiserror::Error;

/// Crate-wide error type. Variants that indicate bad *input* (malformed files,
/// inconsistent configuration, unknown keys) map to exit code 2 in the CLI;
/// plain I/O failures map to 1.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {what}")]
    Malformed {
        path: String,
        line: usize,
        what: String,
    },

    #[error("unknown {kind} key {key:?}")]
    UnknownKey { kind: &'static str, key: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("field {field:?}: feature id {id} out of vocabulary (size {vocab})")]
    Vocab { field: String, id: u32, vocab: u32 },

    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: String,
        expected: String,
        got: String,
    },

    #[error("bad file format in {path}: {what}")]
    Format { path: String, what: String },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    /// Wrap an io error with the path it concerned.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user-supplied input rather than the machine.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
