//! Proximity-based data curation.
//!
//! Scores every sample of a large candidate feature pool by how close it lies
//! to a small target-domain distribution, then emits a ranked top-K manifest.
//! The crate is organised by pipeline stage:
//!
//! | Module | Purpose |
//! |--------|---------|
//! | [`store`] | `.fst` binary feature files with JSON-lines metadata sidecars |
//! | [`kernel`] | RBF kernel, median-heuristic bandwidth, squared MMD and pairwise MMD matrices |
//! | [`estimator`] | Linear domain classifier trained with balanced momentum SGD |
//! | [`baselines`] | Average-distance, perplexity and delta-perplexity scorers |
//! | [`selection`] | Streaming top-K, composition, histograms, shift reports, diversity |
//! | [`synth`] | Gaussian-mixture benchmarks with planted target-aligned clusters |
//!
//! All engine arithmetic is 64-bit; vectors are stored as 32-bit floats on disk.
//! Every randomised routine takes an explicit seed, and every parallel
//! reduction has a fixed order, so results do not depend on the thread count.

pub mod baselines;
pub mod error;
pub mod estimator;
mod fsutil;
pub mod kernel;
pub mod points;
pub mod rng;
pub mod scores;
pub mod selection;
pub mod store;
pub mod synth;

pub use error::{Error, Result};
pub use points::{Points, VectorSource};
pub use scores::{Direction, ScoreEntry, ScoreTable, ScorerKind};
pub use store::{FeatureRecord, FeatureStore};
