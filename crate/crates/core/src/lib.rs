//! RTGNN: Markovian traffic dynamics where each agent carries a distribution
//! over a motion-primitive lattice and a graph neural network advances those
//! distributions one step at a time.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod map;
pub mod traffic;
pub mod gnn;
pub mod graph;
pub mod scene;
pub mod training;
pub mod scenario;
pub mod metrics;
pub mod rollout;
pub mod render;
