//! DARE (drop and rescale) sparsification followed by TIES.

use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::exec::Exec;
use crate::rng::keyed_stream;

use super::task::{add_scaled, task_vectors, TaskVector};
use super::ties::ties_values;
use super::{
    assemble, check_density, check_drop_prob, check_lambda, fmt_f64, merged_metadata, MergeError,
};

/// Domain tag mixed into every DARE stream key.
pub const DARE_STREAM_DOMAIN: &str = "mergelens/dare";

/// Zeroes each entry with probability `p` and divides survivors by `1 - p`.
///
/// One uniform draw per entry, in flat-index order, from the stream keyed by
/// `(seed, tensor_name, model_index)`. `p` must already be in `[0, 1)`.
pub fn dare_sparsify_values(
    values: &[f64],
    p: f64,
    seed: u64,
    tensor_name: &str,
    model_index: u64,
) -> Vec<f64> {
    if p == 0.0 {
        return values.to_vec();
    }
    let mut rng = keyed_stream(DARE_STREAM_DOMAIN, seed, tensor_name, model_index);
    let keep = 1.0 - p;
    values
        .iter()
        .map(|&x| {
            let u: f64 = rng.random();
            if u < p {
                0.0
            } else {
                x / keep
            }
        })
        .collect()
}

pub fn dare_sparsify(
    tv: &TaskVector,
    p: f64,
    seed: u64,
    model_index: u64,
) -> Result<TaskVector, MergeError> {
    check_drop_prob(p)?;
    Ok(tv.map_tensors(|name, v| dare_sparsify_values(v, p, seed, name, model_index)))
}

/// DARE on each model's task vector (model index = position in
/// `fine_tuned`), then TIES trim/elect/merge, then `base + λ·merged`.
pub fn merge_dare_ties(
    base: &Checkpoint,
    fine_tuned: &[&Checkpoint],
    drop_prob: f64,
    density: f64,
    lambda: f64,
    seed: u64,
    exec: Exec,
) -> Result<Checkpoint, MergeError> {
    check_drop_prob(drop_prob)?;
    check_density(density)?;
    check_lambda(lambda)?;
    let tvs = task_vectors(base, fine_tuned)?;
    let names: Vec<&String> = base.tensors().keys().collect();
    let data = exec.map(&names, |name| {
        let sparse: Vec<Vec<f64>> = tvs
            .iter()
            .enumerate()
            .map(|(i, tv)| {
                let v = &tv.get(name).expect("compatible").data;
                dare_sparsify_values(v, drop_prob, seed, name, i as u64)
            })
            .collect();
        let refs: Vec<&[f64]> = sparse.iter().map(Vec::as_slice).collect();
        let merged = ties_values(&refs, density);
        add_scaled(base.get(name).expect("own name").data(), &merged, lambda)
    });
    let mut inputs = vec![base];
    inputs.extend_from_slice(fine_tuned);
    let meta = merged_metadata(
        &inputs,
        &[
            ("method", "dare_ties".into()),
            ("drop_prob", fmt_f64(drop_prob)),
            ("density", fmt_f64(density)),
            ("lambda", fmt_f64(lambda)),
            ("seed", seed.to_string()),
        ],
    );
    assemble(base, data, meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::Tensor;
    use crate::merge::{compute_task_vector, merge_ties};

    #[test]
    fn zero_drop_is_identity() {
        let v = [0.3, -1.0, 7.25];
        for seed in [0, 1, 99] {
            assert_eq!(dare_sparsify_values(&v, 0.0, seed, "w", 0), v.to_vec());
        }
    }

    #[test]
    fn keyed_draws_are_reproducible() {
        let v: Vec<f64> = (0..64).map(|i| i as f64 - 31.5).collect();
        let a = dare_sparsify_values(&v, 0.5, 11, "layer0.weight", 2);
        let b = dare_sparsify_values(&v, 0.5, 11, "layer0.weight", 2);
        assert_eq!(a, b);
        assert_ne!(a, dare_sparsify_values(&v, 0.5, 11, "layer0.weight", 3));
        for (x, y) in v.iter().zip(&a) {
            assert!(*y == 0.0 || *y == 2.0 * x);
        }
    }

    #[test]
    fn unbiased_over_seeds() {
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|seed| dare_sparsify_values(&[1.0], 0.5, seed, "w", 0)[0])
            .sum::<f64>()
            / n as f64;
        assert!((0.97..=1.03).contains(&mean), "mean {mean}");
    }

    #[test]
    fn rejects_bad_drop_prob() {
        let base = Checkpoint::new().with("w", Tensor::from_vec(vec![0.0]));
        for p in [1.0, -0.1, f64::NAN] {
            assert!(matches!(
                merge_dare_ties(&base, &[&base], p, 0.5, 1.0, 0, Exec::Sequential),
                Err(MergeError::ParameterOutOfRange {
                    name: "drop_prob",
                    ..
                })
            ));
        }
    }

    #[test]
    fn zero_drop_matches_ties() {
        let base = Checkpoint::new().with("w", Tensor::from_vec(vec![0.5, -0.5, 1.0, 0.0]));
        let a = Checkpoint::new().with("w", Tensor::from_vec(vec![1.5, -0.25, 0.0, 0.5]));
        let b = Checkpoint::new().with("w", Tensor::from_vec(vec![-1.0, -2.0, 1.0, 0.75]));
        let d = merge_dare_ties(&base, &[&a, &b], 0.0, 0.5, 1.0, 5, Exec::Sequential).unwrap();
        let t = merge_ties(&base, &[&a, &b], 0.5, 1.0, Exec::Sequential).unwrap();
        assert_eq!(d.tensors(), t.tensors());
    }

    #[test]
    fn single_model_full_density_equals_sparsified_task_vector() {
        let base = Checkpoint::new().with("w", Tensor::from_vec(vec![0.0; 32]));
        let ft = Checkpoint::new().with(
            "w",
            Tensor::from_vec((0..32).map(|i| (i as f32 - 16.0) / 8.0).collect()),
        );
        let m = merge_dare_ties(&base, &[&ft], 0.5, 1.0, 1.0, 3, Exec::Sequential).unwrap();
        let tv = compute_task_vector(&ft, &base).unwrap();
        let sparse = dare_sparsify(&tv, 0.5, 3, 0).unwrap();
        let got: Vec<f64> = m
            .get("w")
            .unwrap()
            .data()
            .iter()
            .map(|v| f64::from(*v))
            .collect();
        assert_eq!(got, sparse.tensors["w"].data);
    }
}
