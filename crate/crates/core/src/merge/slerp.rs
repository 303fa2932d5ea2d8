use crate::checkpoint::Checkpoint;
use crate::exec::Exec;

use super::{assemble, ensure_compatible, fmt_f64, merged_metadata, out_of_range, MergeError};

/// Below this `|sin Ω|` the two tensors are treated as collinear and blended
/// linearly.
pub const SLERP_EPSILON: f64 = 1e-6;

/// Spherical interpolation between two flattened tensors.
///
/// `Ω = arccos(clamp(⟨a,b⟩ / (‖a‖‖b‖), -1, 1))`, output
/// `sin((1-t)Ω)/sin Ω · a + sin(tΩ)/sin Ω · b`. Falls back to `(1-t)·a + t·b`
/// when `|sin Ω| < SLERP_EPSILON` or either operand has zero norm.
pub fn slerp_values(a: &[f32], b: &[f32], t: f64) -> Vec<f32> {
    debug_assert_eq!(a.len(), b.len());
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());

    let (ca, cb) = if na == 0.0 || nb == 0.0 {
        (1.0 - t, t)
    } else {
        let omega = (dot / (na * nb)).clamp(-1.0, 1.0).acos();
        let sin_omega = omega.sin();
        if sin_omega.abs() < SLERP_EPSILON {
            (1.0 - t, t)
        } else {
            (
                ((1.0 - t) * omega).sin() / sin_omega,
                (t * omega).sin() / sin_omega,
            )
        }
    };
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (ca * f64::from(x) + cb * f64::from(y)) as f32)
        .collect()
}

/// Per-tensor SLERP between two compatible checkpoints.
pub fn merge_slerp(
    a: &Checkpoint,
    b: &Checkpoint,
    t: f64,
    exec: Exec,
) -> Result<Checkpoint, MergeError> {
    ensure_compatible(&[a, b])?;
    if !(0.0..=1.0).contains(&t) {
        return Err(out_of_range("t", t, "a value in [0, 1]"));
    }
    let names: Vec<&String> = a.tensors().keys().collect();
    let data = exec.map(&names, |name| {
        slerp_values(
            a.get(name).expect("compatible").data(),
            b.get(name).expect("compatible").data(),
            t,
        )
    });
    let meta = merged_metadata(&[a, b], &[("method", "slerp".into()), ("t", fmt_f64(t))]);
    assemble(a, data, meta)
}
