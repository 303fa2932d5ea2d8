//! Checkpoint merging.
//!
//! All operators are pure functions of their inputs. Arithmetic runs in `f64`
//! and each output element is rounded to `f32` exactly once. Work is split per
//! tensor; any [`Exec`](crate::Exec) mode gives bitwise-identical results.

mod dare;
mod linear;
pub mod recipe;
mod slerp;
mod task;
mod ties;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::checkpoint::{validate_compatibility, Checkpoint, CompatReport, Tensor};

pub use dare::{dare_sparsify, dare_sparsify_values, merge_dare_ties, DARE_STREAM_DOMAIN};
pub use linear::merge_linear;
pub use recipe::{MergeMethod, MergePlan, MergeRecipe, RecipeError};
pub use slerp::{merge_slerp, slerp_values, SLERP_EPSILON};
pub use task::{
    apply_task_vector, compute_task_vector, merge_task_arithmetic, DeltaTensor, TaskVector,
};
pub use ties::{
    disjoint_merge, disjoint_merge_values, elect_sign, elect_sign_values, kept_count, merge_ties,
    ties_values, trim_by_magnitude, trim_values, SignVector,
};

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("parents are not compatible: {0}")]
    IncompatibleParents(CompatReport),
    #[error("degenerate weights: {0}")]
    DegenerateWeights(String),
    #[error("parameter `{name}` = {value} out of range: expected {expected}")]
    ParameterOutOfRange {
        name: &'static str,
        value: f64,
        expected: &'static str,
    },
    #[error("task vectors do not share a layout: {0}")]
    IncompatibleTaskVectors(String),
    #[error("merge needs at least one parent")]
    NoParents,
    #[error("merged weights are non-finite in tensor(s): {}", .0.join(", "))]
    NonFiniteResult(Vec<String>),
    #[error(transparent)]
    Recipe(#[from] RecipeError),
}

pub(crate) fn out_of_range(name: &'static str, value: f64, expected: &'static str) -> MergeError {
    MergeError::ParameterOutOfRange {
        name,
        value,
        expected,
    }
}

pub(crate) fn ensure_compatible(checkpoints: &[&Checkpoint]) -> Result<(), MergeError> {
    if checkpoints.is_empty() {
        return Err(MergeError::NoParents);
    }
    let report = validate_compatibility(checkpoints);
    if report.compatible {
        Ok(())
    } else {
        Err(MergeError::IncompatibleParents(report))
    }
}

/// Formats a float for metadata; shortest round-trip representation.
pub(crate) fn fmt_f64(v: f64) -> String {
    serde_json::to_string(&v).expect("finite float serializes")
}

/// Metadata shared by every merge output: the architecture tag, if all
/// inputs agree on it, followed by `merge.*` entries.
pub(crate) fn merged_metadata(
    inputs: &[&Checkpoint],
    entries: &[(&str, String)],
) -> BTreeMap<String, String> {
    let mut meta = BTreeMap::new();
    let arch = inputs
        .first()
        .and_then(|c| c.metadata.get(crate::toy::ARCH_METADATA_KEY));
    if let Some(arch) = arch {
        if inputs
            .iter()
            .all(|c| c.metadata.get(crate::toy::ARCH_METADATA_KEY) == Some(arch))
        {
            meta.insert(crate::toy::ARCH_METADATA_KEY.to_string(), arch.clone());
        }
    }
    for (k, v) in entries {
        meta.insert(format!("merge.{k}"), v.clone());
    }
    meta
}

/// Assembles per-tensor results (in name order) into a checkpoint, rejecting
/// non-finite output.
pub(crate) fn assemble(
    template: &Checkpoint,
    data: Vec<Vec<f32>>,
    metadata: BTreeMap<String, String>,
) -> Result<Checkpoint, MergeError> {
    let mut out = Checkpoint::new();
    let mut bad = Vec::new();
    for ((name, tensor), values) in template.iter().zip(data) {
        if values.iter().any(|v| !v.is_finite()) {
            bad.push(name.clone());
        }
        let t = Tensor::new(tensor.shape().to_vec(), values).expect("shape preserved");
        out.insert(name.clone(), t)
            .expect("names come from a valid checkpoint");
    }
    if !bad.is_empty() {
        return Err(MergeError::NonFiniteResult(bad));
    }
    out.metadata = metadata;
    Ok(out)
}

pub(crate) fn check_lambda(lambda: f64) -> Result<(), MergeError> {
    if lambda.is_finite() && lambda > 0.0 {
        Ok(())
    } else {
        Err(out_of_range("lambda", lambda, "a finite value > 0"))
    }
}

pub(crate) fn check_density(density: f64) -> Result<(), MergeError> {
    if density > 0.0 && density <= 1.0 {
        Ok(())
    } else {
        Err(out_of_range("density", density, "a value in (0, 1]"))
    }
}

pub(crate) fn check_drop_prob(p: f64) -> Result<(), MergeError> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(out_of_range("drop_prob", p, "a value in [0, 1)"))
    }
}
