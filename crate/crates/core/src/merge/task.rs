use std::collections::BTreeMap;

use crate::checkpoint::Checkpoint;
use crate::exec::Exec;

use super::{assemble, check_lambda, ensure_compatible, fmt_f64, merged_metadata, MergeError};

/// Per-tensor weight difference, kept in `f64`.
///
/// The difference of two `f32` values is exact in `f64` for any realistic
/// weight range, so `base + (ft - base)` reproduces `ft` bitwise.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// `θ_ft − θ_base` for every tensor of the base checkpoint.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TaskVector {
    pub tensors: BTreeMap<String, DeltaTensor>,
}

impl TaskVector {
    pub fn get(&self, name: &str) -> Option<&DeltaTensor> {
        self.tensors.get(name)
    }

    /// Rebuilds a task vector with each tensor's values replaced by `f`.
    pub fn map_tensors(&self, mut f: impl FnMut(&str, &[f64]) -> Vec<f64>) -> TaskVector {
        let tensors = self
            .tensors
            .iter()
            .map(|(name, d)| {
                let data = f(name, &d.data);
                debug_assert_eq!(data.len(), d.data.len());
                (
                    name.clone(),
                    DeltaTensor {
                        shape: d.shape.clone(),
                        data,
                    },
                )
            })
            .collect();
        TaskVector { tensors }
    }

    pub fn is_zero(&self) -> bool {
        self.tensors
            .values()
            .all(|d| d.data.iter().all(|v| *v == 0.0))
    }

    /// `true` when both vectors carry the same names and shapes.
    pub fn same_layout(&self, other: &TaskVector) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, a), (nb, b))| na == nb && a.shape == b.shape)
    }
}

pub fn compute_task_vector(
    fine_tuned: &Checkpoint,
    base: &Checkpoint,
) -> Result<TaskVector, MergeError> {
    ensure_compatible(&[base, fine_tuned])?;
    let tensors = base
        .iter()
        .map(|(name, b)| {
            let ft = fine_tuned.get(name).expect("compatible");
            let data = ft
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f64::from(x) - f64::from(y))
                .collect();
            (
                name.clone(),
                DeltaTensor {
                    shape: b.shape().to_vec(),
                    data,
                },
            )
        })
        .collect();
    Ok(TaskVector { tensors })
}

/// `base + λ·τ`, rounded to `f32` once per element.
pub fn apply_task_vector(
    base: &Checkpoint,
    tv: &TaskVector,
    lambda: f64,
    exec: Exec,
) -> Result<Checkpoint, MergeError> {
    check_lambda(lambda)?;
    let names: Vec<&String> = base.tensors().keys().collect();
    if names.len() != tv.tensors.len()
        || names.iter().any(|n| {
            tv.get(n)
                .is_none_or(|d| d.shape.as_slice() != base.get(n).expect("own name").shape())
        })
    {
        return Err(MergeError::IncompatibleTaskVectors(
            "task vector layout does not match the base checkpoint".into(),
        ));
    }
    let data = exec.map(&names, |name| {
        add_scaled(
            base.get(name).expect("own name").data(),
            &tv.get(name).expect("checked").data,
            lambda,
        )
    });
    let meta = merged_metadata(&[base], &[("lambda", fmt_f64(lambda))]);
    assemble(base, data, meta)
}

pub(crate) fn add_scaled(base: &[f32], delta: &[f64], lambda: f64) -> Vec<f32> {
    base.iter()
        .zip(delta)
        .map(|(&b, &d)| (f64::from(b) + lambda * d) as f32)
        .collect()
}

/// Task vectors of every fine-tuned checkpoint against `base`, after a joint
/// compatibility check.
pub(crate) fn task_vectors(
    base: &Checkpoint,
    fine_tuned: &[&Checkpoint],
) -> Result<Vec<TaskVector>, MergeError> {
    if fine_tuned.is_empty() {
        return Err(MergeError::NoParents);
    }
    let mut all = vec![base];
    all.extend_from_slice(fine_tuned);
    ensure_compatible(&all)?;
    fine_tuned
        .iter()
        .map(|ft| compute_task_vector(ft, base))
        .collect()
}

/// `base + λ·Σᵢ τᵢ` with `τᵢ = θᵢ − θ_base`.
pub fn merge_task_arithmetic(
    base: &Checkpoint,
    fine_tuned: &[&Checkpoint],
    lambda: f64,
    exec: Exec,
) -> Result<Checkpoint, MergeError> {
    check_lambda(lambda)?;
    let tvs = task_vectors(base, fine_tuned)?;
    let names: Vec<&String> = base.tensors().keys().collect();
    let data = exec.map(&names, |name| {
        let deltas: Vec<&[f64]> = tvs
            .iter()
            .map(|tv| tv.get(name).expect("compatible").data.as_slice())
            .collect();
        let mut sum = deltas[0].to_vec();
        for d in &deltas[1..] {
            for (s, v) in sum.iter_mut().zip(*d) {
                *s += v;
            }
        }
        add_scaled(base.get(name).expect("own name").data(), &sum, lambda)
    });
    let mut inputs = vec![base];
    inputs.extend_from_slice(fine_tuned);
    let meta = merged_metadata(
        &inputs,
        &[
            ("method", "task_arithmetic".into()),
            ("lambda", fmt_f64(lambda)),
        ],
    );
    assemble(base, data, meta)
}
