//! A small stream-dataflow compiler: typed stream layouts, layout converters,
//! kernel fusion, FIFO sizing and a token-level simulator to check all of it.

pub mod allocation;
pub mod converter;
pub mod dse;
pub mod fixtures;
pub mod frontend;
pub mod fusion;
pub mod graph;
pub mod itensor;
pub mod lp;
pub mod pipeline;
pub mod sim;
pub mod sizing;

#[cfg(test)]
pub(crate) mod testutil;

pub use itensor::{ElementKind, ITensorType, TypeViolation};
pub use converter::{infer_converter, verify_converter, ConverterSpec};
pub use graph::{DataflowGraph, FifoEdge, KernelNode, KernelProfile, NodeKind, PortRef};
