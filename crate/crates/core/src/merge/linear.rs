use crate::checkpoint::Checkpoint;
use crate::exec::Exec;

use super::{assemble, ensure_compatible, fmt_f64, merged_metadata, MergeError};

/// Sum of `values` in ascending order, so the result does not depend on the
/// order the terms were produced in.
fn order_free_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

/// Weighted average `Σ wᵢ·θᵢ / Σ wᵢ` of compatible parents.
///
/// Per-element terms are summed in sorted order, which makes the result
/// bitwise invariant under permutations of the (parent, weight) pairs.
pub fn merge_linear(
    parents: &[&Checkpoint],
    weights: &[f64],
    exec: Exec,
) -> Result<Checkpoint, MergeError> {
    ensure_compatible(parents)?;
    if weights.len() != parents.len() {
        return Err(MergeError::DegenerateWeights(format!(
            "{} weights for {} parents",
            weights.len(),
            parents.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(MergeError::DegenerateWeights(format!(
            "weight {w} is negative or non-finite"
        )));
    }
    let total = order_free_sum(&mut weights.to_vec());
    if total <= 0.0 {
        return Err(MergeError::DegenerateWeights("weights sum to zero".into()));
    }

    let reference = parents[0];
    let names: Vec<&String> = reference.tensors().keys().collect();
    let data = exec.map(&names, |name| {
        let sources: Vec<&[f32]> = parents
            .iter()
            .map(|p| p.get(name).expect("compatible").data())
            .collect();
        let mut terms = vec![0.0f64; parents.len()];
        (0..sources[0].len())
            .map(|j| {
                for (slot, (src, w)) in terms.iter_mut().zip(sources.iter().zip(weights)) {
                    *slot = w * f64::from(src[j]);
                }
                (order_free_sum(&mut terms) / total) as f32
            })
            .collect()
    });

    let normalized: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let meta = merged_metadata(
        parents,
        &[
            ("method", "linear".to_string()),
            (
                "weights",
                format!(
                    "[{}]",
                    normalized
                        .iter()
                        .map(|w| fmt_f64(*w))
                        .collect::<Vec<_>>()
                        .join(",")
                ),
            ),
        ],
    );
    assemble(reference, data, meta)
}
