//! Rank and dimension propagation over dynamic computational graphs, and the
//! static fusion, execution-order, and memory planners built on it.

pub mod bundled;
pub mod check;
pub mod exec;
pub mod fusion;
pub mod graph;
pub mod interp;
pub mod mem;
pub mod ops;
pub mod pipeline;
pub mod rdp;
pub mod report;
pub mod shape;
pub mod sym;
pub mod synth;
