//! TIES: trim each task vector to its largest-magnitude entries, elect a
//! per-parameter sign, then average only the entries that agree with it.

use std::collections::BTreeMap;

use crate::checkpoint::Checkpoint;
use crate::exec::Exec;

use super::task::{add_scaled, task_vectors, DeltaTensor, TaskVector};
use super::{assemble, check_density, check_lambda, fmt_f64, merged_metadata, MergeError};

/// Elected signs (`+1` or `-1`) per parameter.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SignVector {
    pub tensors: BTreeMap<String, Vec<i8>>,
}

/// Number of entries kept out of `n` at density `k`: `⌈k·n⌉`, clamped to
/// `[1, n]`. A relative slack of 1e-9 absorbs products like `0.3·10` that
/// land just above an integer.
pub fn kept_count(density: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let raw = density * n as f64;
    let count = (raw - raw * 1e-9).ceil();
    (count as usize).clamp(1, n)
}

/// Keeps the `kept_count(density, len)` largest-magnitude entries and zeroes
/// the rest. Equal magnitudes at the threshold keep the lower flat index.
pub fn trim_values(values: &[f64], density: f64) -> Vec<f64> {
    let keep = kept_count(density, values.len());
    if keep == values.len() {
        return values.to_vec();
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[j].abs().total_cmp(&values[i].abs()).then(i.cmp(&j)));
    let mut out = vec![0.0; values.len()];
    for &i in &order[..keep] {
        out[i] = values[i];
    }
    out
}

/// Sign of the summed values per parameter; a zero sum elects `+1`.
pub fn elect_sign_values(values: &[&[f64]]) -> Vec<i8> {
    let n = values.first().map_or(0, |v| v.len());
    (0..n)
        .map(|j| {
            let sum: f64 = values.iter().map(|v| v[j]).sum();
            if sum >= 0.0 {
                1
            } else {
                -1
            }
        })
        .collect()
}

/// Mean over the nonzero entries whose sign matches the elected one; zero when
/// no model qualifies.
pub fn disjoint_merge_values(values: &[&[f64]], signs: &[i8]) -> Vec<f64> {
    signs
        .iter()
        .enumerate()
        .map(|(j, &s)| {
            let (mut sum, mut count) = (0.0f64, 0usize);
            for v in values {
                let x = v[j];
                if (s > 0 && x > 0.0) || (s < 0 && x < 0.0) {
                    sum += x;
                    count += 1;
                }
            }
            if count == 0 {
                0.0
            } else {
                sum / count as f64
            }
        })
        .collect()
}

/// Full trim → elect → disjoint-merge pipeline on one parameter block.
pub fn ties_values(values: &[&[f64]], density: f64) -> Vec<f64> {
    let trimmed: Vec<Vec<f64>> = values.iter().map(|v| trim_values(v, density)).collect();
    let refs: Vec<&[f64]> = trimmed.iter().map(Vec::as_slice).collect();
    let signs = elect_sign_values(&refs);
    disjoint_merge_values(&refs, &signs)
}

pub fn trim_by_magnitude(tv: &TaskVector, density: f64) -> Result<TaskVector, MergeError> {
    check_density(density)?;
    Ok(tv.map_tensors(|_, v| trim_values(v, density)))
}

fn check_layouts(tvs: &[TaskVector]) -> Result<&TaskVector, MergeError> {
    let first = tvs.first().ok_or(MergeError::NoParents)?;
    if let Some(i) = tvs.iter().position(|tv| !tv.same_layout(first)) {
        return Err(MergeError::IncompatibleTaskVectors(format!(
            "task vector #{i} differs from #0"
        )));
    }
    Ok(first)
}

fn slices<'a>(tvs: &'a [TaskVector], name: &str) -> Vec<&'a [f64]> {
    tvs.iter()
        .map(|tv| tv.get(name).expect("layout checked").data.as_slice())
        .collect()
}

pub fn elect_sign(tvs: &[TaskVector]) -> Result<SignVector, MergeError> {
    let first = check_layouts(tvs)?;
    let tensors = first
        .tensors
        .keys()
        .map(|name| (name.clone(), elect_sign_values(&slices(tvs, name))))
        .collect();
    Ok(SignVector { tensors })
}

pub fn disjoint_merge(tvs: &[TaskVector], signs: &SignVector) -> Result<TaskVector, MergeError> {
    let first = check_layouts(tvs)?;
    let mut tensors = BTreeMap::new();
    for (name, delta) in &first.tensors {
        let s = signs
            .tensors
            .get(name)
            .filter(|s| s.len() == delta.data.len())
            .ok_or_else(|| {
                MergeError::IncompatibleTaskVectors(format!(
                    "sign vector lacks a matching `{name}`"
                ))
            })?;
        tensors.insert(
            name.clone(),
            DeltaTensor {
                shape: delta.shape.clone(),
                data: disjoint_merge_values(&slices(tvs, name), s),
            },
        );
    }
    if signs.tensors.len() != tensors.len() {
        return Err(MergeError::IncompatibleTaskVectors(
            "sign vector has extra tensors".into(),
        ));
    }
    Ok(TaskVector { tensors })
}

/// `base + λ · disjoint_merge(trimmed, elect_sign(trimmed))`.
pub fn merge_ties(
    base: &Checkpoint,
    fine_tuned: &[&Checkpoint],
    density: f64,
    lambda: f64,
    exec: Exec,
) -> Result<Checkpoint, MergeError> {
    check_density(density)?;
    check_lambda(lambda)?;
    let tvs = task_vectors(base, fine_tuned)?;
    let names: Vec<&String> = base.tensors().keys().collect();
    let data = exec.map(&names, |name| {
        let merged = ties_values(&slices(&tvs, name), density);
        add_scaled(base.get(name).expect("own name").data(), &merged, lambda)
    });
    let mut inputs = vec![base];
    inputs.extend_from_slice(fine_tuned);
    let meta = merged_metadata(
        &inputs,
        &[
            ("method", "ties".into()),
            ("density", fmt_f64(density)),
            ("lambda", fmt_f64(lambda)),
        ],
    );
    assemble(base, data, meta)
}
