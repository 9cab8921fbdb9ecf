//! Patch descriptors, depth-binned exemplar databases and retrieval.

pub mod database;
pub mod features;
pub mod kmedoids;

pub use database::{
    bin_of, build_database, candidate_centers, depth_edges, depth_key, derive_scaled_database, retrieve_cousin,
    retrieve_exhaustive, segment_by_depth, DbParams, ExhaustiveIndex, PatchDatabase, PatchEntry, RetrievalResult,
    Segmentation,
};
pub use features::{
    descriptor_distance, extract_image_features, patch_descriptor, Descriptor, DescriptorBackend, FeatureMap,
};
pub use kmedoids::{cluster_kmedoids, kmedoids, total_cost};
