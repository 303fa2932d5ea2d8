//! Seeded synthetic classification data.
//!
//! | kind     | geometry                                                     | label                         |
//! |----------|--------------------------------------------------------------|-------------------------------|
//! | `blobs`  | class centre uniform in `[-center_scale, center_scale]^dim`, plus `spread`·N(0, 1) | `i % classes` (balanced) |
//! | `xor`    | uniform in `[-1, 1]^dim`                                     | `(x[a] > 0) xor (x[b] > 0)`   |
//! | `rings`  | random direction, radius `c + 1 + radius_noise`·N(0, 1)      | ring index `c = i % classes`  |
//! | `linear` | uniform in `[-1, 1]^dim`, rejecting `|w·x| < margin`         | `w·x > 0` for a random unit `w` |
//!
//! Every kind accepts `label_noise`: with that probability a label is
//! replaced by a uniformly drawn class, so `label_noise = 1` gives labels
//! independent of the inputs.
//!
//! `seed` draws the samples. For `blobs` and `linear`, `task_seed` (default 0)
//! draws the centres or the normal `w`, so train, dev and test splits with
//! different `seed`s share one labelling rule.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, ModelError};
use crate::matrix::Matrix;
use crate::rng::{keyed_stream, seeded};

/// Key domain for the task-geometry stream.
pub const TASK_STREAM_DOMAIN: &str = "mergelens/data";

fn one() -> f64 {
    1.0
}
fn three() -> f64 {
    3.0
}
fn tenth() -> f64 {
    0.1
}
fn two() -> usize {
    2
}
fn xor_axes() -> [usize; 2] {
    [0, 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Blobs {
        n: usize,
        dim: usize,
        #[serde(default = "two")]
        classes: usize,
        #[serde(default = "one")]
        spread: f64,
        #[serde(default = "three")]
        center_scale: f64,
        #[serde(default)]
        label_noise: f64,
        seed: u64,
        #[serde(default)]
        task_seed: u64,
    },
    Xor {
        n: usize,
        dim: usize,
        #[serde(default = "xor_axes")]
        axes: [usize; 2],
        #[serde(default)]
        label_noise: f64,
        seed: u64,
    },
    Rings {
        n: usize,
        dim: usize,
        #[serde(default = "two")]
        classes: usize,
        #[serde(default = "tenth")]
        radius_noise: f64,
        #[serde(default)]
        label_noise: f64,
        seed: u64,
    },
    Linear {
        n: usize,
        dim: usize,
        #[serde(default)]
        margin: f64,
        #[serde(default)]
        label_noise: f64,
        seed: u64,
        #[serde(default)]
        task_seed: u64,
    },
}

impl DataSpec {
    pub fn num_classes(&self) -> usize {
        match self {
            DataSpec::Blobs { classes, .. } | DataSpec::Rings { classes, .. } => *classes,
            DataSpec::Xor { .. } | DataSpec::Linear { .. } => 2,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DataSpec::Blobs { dim, .. }
            | DataSpec::Xor { dim, .. }
            | DataSpec::Rings { dim, .. }
            | DataSpec::Linear { dim, .. } => *dim,
        }
    }

    pub fn with_seed(&self, new_seed: u64) -> Self {
        let mut out = self.clone();
        match &mut out {
            DataSpec::Blobs { seed, .. }
            | DataSpec::Xor { seed, .. }
            | DataSpec::Rings { seed, .. }
            | DataSpec::Linear { seed, .. } => *seed = new_seed,
        }
        out
    }

    fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: &str| Err(ModelError::InvalidDataset(format!("{msg} in {self:?}")));
        let (dim, noise) = match self {
            DataSpec::Blobs {
                dim, label_noise, ..
            }
            | DataSpec::Xor {
                dim, label_noise, ..
            }
            | DataSpec::Rings {
                dim, label_noise, ..
            }
            | DataSpec::Linear {
                dim, label_noise, ..
            } => (*dim, *label_noise),
        };
        if dim == 0 {
            return bad("dim must be positive");
        }
        if !(0.0..=1.0).contains(&noise) {
            return bad("label_noise must be in [0, 1]");
        }
        match self {
            DataSpec::Blobs {
                classes, spread, ..
            } if *classes == 0 || spread.is_nan() || *spread < 0.0 => {
                bad("blobs need classes > 0 and spread >= 0")
            }
            DataSpec::Rings { classes, dim, .. } if *classes == 0 || *dim < 2 => {
                bad("rings need classes > 0 and dim >= 2")
            }
            DataSpec::Xor { axes, dim, .. }
                if axes[0] == axes[1] || axes.iter().any(|a| a >= dim) =>
            {
                bad("xor axes must be two distinct feature indices")
            }
            DataSpec::Linear { margin, .. } if !(0.0..0.5).contains(margin) => {
                bad("margin must be in [0, 0.5)")
            }
            _ => Ok(()),
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn uniform_cube(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Draws the dataset described by `spec`. Same spec, same bytes.
pub fn generate(spec: &DataSpec) -> Result<LabeledDataset, ModelError> {
    spec.validate()?;
    let classes = spec.num_classes();
    let mut rng = seeded(match spec {
        DataSpec::Blobs { seed, .. }
        | DataSpec::Xor { seed, .. }
        | DataSpec::Rings { seed, .. }
        | DataSpec::Linear { seed, .. } => *seed,
    });
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let dim;
    let label_noise;
    match spec {
        DataSpec::Blobs {
            n,
            dim: d,
            spread,
            center_scale,
            label_noise: ln,
            task_seed,
            ..
        } => {
            dim = *d;
            label_noise = *ln;
            let mut geo = keyed_stream(TASK_STREAM_DOMAIN, *task_seed, "blobs", 0);
            let centers: Vec<Vec<f64>> = (0..classes)
                .map(|_| {
                    (0..dim)
                        .map(|_| geo.random_range(-1.0..=1.0) * center_scale)
                        .collect()
                })
                .collect();
            for i in 0..*n {
                let c = i % classes;
                rows.push(
                    centers[c]
                        .iter()
                        .map(|m| m + spread * normal(&mut rng))
                        .collect(),
                );
                labels.push(c);
            }
        }
        DataSpec::Xor {
            n,
            dim: d,
            axes,
            label_noise: ln,
            ..
        } => {
            dim = *d;
            label_noise = *ln;
            for _ in 0..*n {
                let x = uniform_cube(&mut rng, dim);
                labels.push(usize::from((x[axes[0]] > 0.0) != (x[axes[1]] > 0.0)));
                rows.push(x);
            }
        }
        DataSpec::Rings {
            n,
            dim: d,
            radius_noise,
            label_noise: ln,
            ..
        } => {
            dim = *d;
            label_noise = *ln;
            for i in 0..*n {
                let c = i % classes;
                let r = (c + 1) as f64 + radius_noise * normal(&mut rng);
                rows.push(
                    unit_vector(&mut rng, dim)
                        .into_iter()
                        .map(|u| u * r)
                        .collect(),
                );
                labels.push(c);
            }
        }
        DataSpec::Linear {
            n,
            dim: d,
            margin,
            label_noise: ln,
            task_seed,
            ..
        } => {
            dim = *d;
            label_noise = *ln;
            let w = unit_vector(
                &mut keyed_stream(TASK_STREAM_DOMAIN, *task_seed, "linear", 0),
                dim,
            );
            while rows.len() < *n {
                let x = uniform_cube(&mut rng, dim);
                let s: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
                if s.abs() < *margin {
                    continue;
                }
                labels.push(usize::from(s > 0.0));
                rows.push(x);
            }
        }
    }
    if label_noise > 0.0 {
        for l in labels.iter_mut() {
            if rng.random::<f64>() < label_noise {
                *l = rng.random_range(0..classes);
            }
        }
    }
    let inputs = if rows.is_empty() {
        Matrix::zeros(0, dim)
    } else {
        Matrix::from_rows(&rows).expect("uniform width")
    };
    let mut ds = LabeledDataset::new(inputs, labels, classes)?;
    ds.input_dim = dim;
    Ok(ds)
}
