//! Compression toolkit for small SSD-style detection networks.
//!
//! Networks are held as an immutable [`graph::Graph`] plus a
//! [`tensor::WeightStore`]. Structural passes in [`transforms`] map one
//! `(graph, weights)` pair to another; [`executor`] runs either side so the
//! passes can be checked numerically, and [`cost`] counts what they save.
//! [`detection`] and [`evaluation`] cover the SSD head and the AP metric,
//! and [`zoo`] builds the reference architectures.

pub mod cost;
pub mod detection;
pub mod evaluation;
pub mod executor;
pub mod graph;
pub mod pipeline;
pub mod tensor;
pub mod transforms;
pub mod zoo;

pub use graph::{ConvSpec, Graph, LayerNode, Op, Pair, PoolSpec, TensorShape, INPUT};
pub use tensor::{Tensor, WeightStore};
