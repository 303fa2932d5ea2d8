//! Merge neural-network checkpoints and compare parents and merged models
//! from two angles: task accuracy and linear-probe accuracy on last-layer
//! representations.
//!
//! * [`checkpoint`]: safetensors-compatible named-tensor container.
//! * [`merge`]: Linear, SLERP, Task Arithmetic, TIES and DARE-TIES.
//! * [`toy`]: small tanh MLPs, synthetic datasets and training.
//! * [`probe`]: linear probes over extracted representations.
//! * [`analysis`]: behavioral scores, parent-relative categories, correlations.
//! * [`pipeline`]: manifest-driven end-to-end runs.
//!
//! Data-parallel loops go through [`Exec`]; the `parallel` feature (on by
//! default) backs it with rayon.

pub mod analysis;
pub mod checkpoint;
mod exec;
pub mod matrix;
pub mod merge;
pub mod pipeline;
pub mod probe;
pub mod rng;
pub mod toy;

pub use exec::Exec;
