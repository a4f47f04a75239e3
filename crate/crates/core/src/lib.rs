//! Evaluation engine for biometric (face) recognition experiments.
//!
//! The crate follows the usual pipeline: annotated images are geometrically
//! aligned ([`align`]), turned into embeddings by an extractor
//! ([`embedding`]), enrolled into templates by averaging and scored with
//! cosine similarity. Scores are evaluated with identity-disjoint dev/eval
//! splits, a threshold chosen at a target false match rate on dev, and
//! per-sub-protocol FMR/FNMR on eval ([`evaluator`], [`metrics`]). Open-set
//! identification is reported as rank-1 TPIR over FPIR ([`openset`]).
//!
//! [`synth`] generates seeded identity clusters and score distributions so
//! every metric can be checked without real datasets.
//!
//! Data-parallel loops use rayon when the `parallel` feature is enabled
//! (default) and fall back to sequential iteration otherwise. Results are
//! identical either way.

pub mod align;
pub mod embedding;
pub mod error;
pub mod evaluator;
pub mod image;
pub mod metrics;
pub mod openset;
pub mod par;
pub mod protocol;
pub mod scorefile;
pub mod synth;

pub use error::{Error, Result};
