//! Benchmark manifests and the triplet and frame protocols built on them.

mod frames;
mod manifest;
mod sampler;
mod triplets;

pub use frames::{load_frame_sequence, video_ids};
pub use manifest::{load_manifest, Benchmark, DatasetManifest, ManifestItem, Task, MANIFEST_VERSION, SREF_IMAGES_PER_STYLE};
pub use sampler::{TripletRng, STREAM_DOMAIN};
pub use triplets::{
    build_triplets, parse_triplets, write_jsonl, TripletRecord, CUTE_REPEATS, DREAMBENCH_TRIPLETS, IP_REPEATS,
    STYLE_TRIPLETS,
};
