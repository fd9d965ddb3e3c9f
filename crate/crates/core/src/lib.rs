//! Scene graph generation from object-annotated images.
//!
//! Every ordered subject/object pair in an image is classified into a
//! predicate using a concatenation of a semantic feature (word vectors of the
//! two category names, projected through a small trained network) and an
//! optional visual feature (precomputed CNN activations for the pair region).
//! The top-ranked predicates become the edges of a directed scene graph, which
//! can be serialized, queried, and compared for context-based retrieval.
//!
//! Module map:
//!
//! - [`geometry`]: bounding boxes, IoU, enclosing box.
//! - [`dataset`]: annotation ingestion, dictionaries, splits, pair enumeration, statistics.
//! - [`wordvec`]: word2vec text/binary parsing and name lookup.
//! - [`semproj`]: the semantic projection network (one hidden layer MLP).
//! - [`visfeat`]: file-backed visual features and the deterministic stub provider.
//! - [`predsvm`]: one-vs-rest linear SVM over the concatenated features.
//! - [`features`]: glue that builds per-pair feature vectors.
//! - [`scenegraph`]: graph assembly, triples, DOT/JSON.
//! - [`retrieval`]: graph similarity and ranking.
//! - [`evalmetrics`]: accuracy, recall@k, mean average precision.

pub mod dataset;
pub mod error;
pub mod evalmetrics;
pub mod features;
pub mod geometry;
pub mod io;
pub mod predsvm;
pub mod retrieval;
pub mod rng;
pub mod scenegraph;
pub mod semproj;
pub mod visfeat;
pub mod wordvec;

pub use error::{Error, Result};
pub use geometry::BoundingBox;
