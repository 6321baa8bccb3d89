//! Seeded fixture generators and brute-force oracles for the slimdet test
//! suites.
//!
//! The oracles deliberately avoid the library's own implementations: they
//! only borrow its data types (tensors, boxes, specs) and recompute every
//! number with the plainest possible loops.

pub mod bundle;
pub mod gen;
pub mod oracle;
pub mod rf;

pub use bundle::{write_bundle, Fixture, BUNDLE_VERSION};
pub use gen::{
    planted_clusters, random_eval_instance, random_graph, random_selection, random_weights, residual_graph,
    EvalInstance, PlantedClusters,
};
pub use oracle::{oracle_ap, oracle_conv, oracle_nms};
pub use rf::perturb_rf;
