//! Benchmark evaluation for attention-alignment similarity metrics:
//! manifests and seeded triplet construction, 2AFC accuracy with grid
//! search and ensembles, video consistency, reports and retrieval.

pub mod datasets;
pub mod error;
pub mod harness;
pub mod report;
pub mod retrieval;

pub use datasets::{build_triplets, load_frame_sequence, load_manifest, Benchmark, DatasetManifest, TripletRecord};
pub use error::{Error, Result};
pub use harness::{
    default_grid, ensemble_choices, ensemble_vote, evaluate_triplets, grid_search, population_variance,
    video_consistency_variance, BenchmarkReport, ChoiceSet, DiffSimMetric, FnMetric, ImageTable, PairMetric,
};
pub use report::{emit_report, Environment, Format};
pub use retrieval::{precompute_corpus, query_topk, CorpusItem, Ranking, DEFAULT_K};
