//! Dense-SLAM tracking with depth uncertainty feeding an incrementally
//! optimized Gaussian-splat map.

pub mod ablation;
pub mod config;
pub mod dataset;
pub mod dba;
pub mod eval;
pub mod flow;
pub mod frame_graph;
pub mod geometry;
pub mod grid;
pub mod mapping;
pub mod output;
pub mod pipeline;
pub mod scene;
pub mod splat;
