//! Small tanh MLP classifiers that live in ordinary checkpoints.
//!
//! Layer `i` is stored as `layer{i}.weight` with shape `[out, in]` and
//! `layer{i}.bias` with shape `[out]`. Hidden layers use tanh; the last layer
//! is affine and produces logits.

mod datagen;
mod dataset;
mod mlp;
mod train;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::Checkpoint;

pub use datagen::{generate, DataSpec};
pub use dataset::{load_dataset, save_dataset, LabeledDataset};
pub use mlp::{extract_representation, forward, Gradients, Mlp};
pub use train::{finetune, train_toy_model, train_with_history, TrainConfig, TrainOutcome};

/// Metadata key holding the JSON-encoded [`ToyArchitecture`].
pub const ARCH_METADATA_KEY: &str = "mergelens.architecture";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("parameter `{name}` = {value} out of range: expected {expected}")]
    ParameterOutOfRange {
        name: &'static str,
        value: f64,
        expected: &'static str,
    },
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyArchitecture {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl ToyArchitecture {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden_dims,
            num_classes,
            activation: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 || self.num_classes == 0 || self.hidden_dims.contains(&0) {
            return Err(ModelError::ArchitectureMismatch(format!(
                "all dimensions must be positive in {self}"
            )));
        }
        Ok(())
    }

    /// `(in, out)` per layer, hidden layers first.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in self
            .hidden_dims
            .iter()
            .chain(std::iter::once(&self.num_classes))
        {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }

    /// Width of the representation handed to probes.
    pub fn representation_dim(&self) -> usize {
        self.hidden_dims.last().copied().unwrap_or(self.input_dim)
    }

    /// Lists every way `model` deviates from this architecture's tensor
    /// layout; empty when it conforms.
    pub fn conformance_issues(&self, model: &Checkpoint) -> Vec<String> {
        let mut issues = Vec::new();
        let dims = self.layer_dims();
        let mut expected = std::collections::BTreeSet::new();
        for (i, (fan_in, fan_out)) in dims.iter().enumerate() {
            for (name, shape) in [
                (format!("layer{i}.weight"), vec![*fan_out, *fan_in]),
                (format!("layer{i}.bias"), vec![*fan_out]),
            ] {
                match model.get(&name) {
                    None => issues.push(format!("missing `{name}`")),
                    Some(t) if t.shape() != shape.as_slice() => issues.push(format!(
                        "`{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )),
                    Some(_) => {}
                }
                expected.insert(name);
            }
        }
        for name in model.names() {
            if !expected.contains(name) {
                issues.push(format!("unexpected tensor `{name}`"));
            }
        }
        issues
    }

    pub fn check(&self, model: &Checkpoint) -> Result<(), ModelError> {
        self.validate()?;
        let issues = self.conformance_issues(model);
        if issues.is_empty() {
            Ok(())
        } else {
            Err(ModelError::ArchitectureMismatch(issues.join("; ")))
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("architecture serializes")
    }

    /// Architecture recorded in a checkpoint's metadata, if any.
    pub fn from_checkpoint(model: &Checkpoint) -> Option<Result<Self, ModelError>> {
        model.metadata.get(ARCH_METADATA_KEY).map(|s| {
            serde_json::from_str(s).map_err(|e| {
                ModelError::ArchitectureMismatch(format!("unreadable architecture metadata: {e}"))
            })
        })
    }
}

impl fmt::Display for ToyArchitecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.input_dim)?;
        for h in &self.hidden_dims {
            write!(f, "-{h}")?;
        }
        write!(f, "-{} (tanh)", self.num_classes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::Tensor;

    #[test]
    fn layer_layout() {
        let a = ToyArchitecture::new(3, vec![5, 4], 2);
        assert_eq!(a.layer_dims(), vec![(3, 5), (5, 4), (4, 2)]);
        assert_eq!(a.representation_dim(), 4);
        assert_eq!(ToyArchitecture::new(3, vec![], 2).representation_dim(), 3);
        assert_eq!(a.to_string(), "3-5-4-2 (tanh)");
    }

    #[test]
    fn conformance() {
        let a = ToyArchitecture::new(2, vec![], 2);
        let good = Checkpoint::new()
            .with("layer0.weight", Tensor::zeros(vec![2, 2]))
            .with("layer0.bias", Tensor::zeros(vec![2]));
        assert!(a.check(&good).is_ok());
        let bad = good.clone().with("extra", Tensor::zeros(vec![1]));
        assert!(matches!(
            a.check(&bad),
            Err(ModelError::ArchitectureMismatch(_))
        ));
        let wrong = Checkpoint::new()
            .with("layer0.weight", Tensor::zeros(vec![2, 3]))
            .with("layer0.bias", Tensor::zeros(vec![2]));
        assert_eq!(a.conformance_issues(&wrong).len(), 1);
    }

    #[test]
    fn architecture_json() {
        let a: ToyArchitecture =
            serde_json::from_str(r#"{"input_dim":4,"hidden_dims":[8],"num_classes":3}"#).unwrap();
        assert_eq!(a, ToyArchitecture::new(4, vec![8], 3));
        assert_eq!(
            a.to_json(),
            r#"{"input_dim":4,"hidden_dims":[8],"num_classes":3,"activation":"tanh"}"#
        );
    }
}
