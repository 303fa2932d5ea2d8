//! Declarative merge recipes.
//!
//! A recipe names the method, the parent references, an optional base
//! reference and the method's hyperparameters. Unset hyperparameters take the
//! defaults below; setting one the method does not use is an error.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::exec::Exec;

use super::{
    merge_dare_ties, merge_linear, merge_slerp, merge_task_arithmetic, merge_ties, MergeError,
};

pub const DEFAULT_T: f64 = 0.5;
pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_DENSITY: f64 = 0.5;
pub const DEFAULT_DROP_PROB: f64 = 0.5;
pub const DEFAULT_SEED: u64 = 0;

/// Validation failure, with the path of the offending field.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{field}: {reason}")]
pub struct RecipeError {
    pub field: String,
    pub reason: String,
}

impl RecipeError {
    pub fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Prefixes the field path, e.g. `t` becomes `recipes[2].t`.
    pub fn within(mut self, prefix: &str) -> Self {
        self.field = format!("{prefix}.{}", self.field);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    #[serde(alias = "Linear")]
    Linear,
    #[serde(alias = "Slerp", alias = "SLERP")]
    Slerp,
    #[serde(alias = "TaskArithmetic")]
    TaskArithmetic,
    #[serde(alias = "Ties", alias = "TIES")]
    Ties,
    #[serde(alias = "DareTies")]
    DareTies,
}

impl MergeMethod {
    pub const ALL: [MergeMethod; 5] = [
        MergeMethod::Linear,
        MergeMethod::Slerp,
        MergeMethod::TaskArithmetic,
        MergeMethod::Ties,
        MergeMethod::DareTies,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MergeMethod::Linear => "linear",
            MergeMethod::Slerp => "slerp",
            MergeMethod::TaskArithmetic => "task_arithmetic",
            MergeMethod::Ties => "ties",
            MergeMethod::DareTies => "dare_ties",
        }
    }

    pub fn needs_base(self) -> bool {
        matches!(
            self,
            MergeMethod::TaskArithmetic | MergeMethod::Ties | MergeMethod::DareTies
        )
    }
}

impl fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// On-disk recipe. Parent and base references are opaque strings; the caller
/// decides whether they are paths or model ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeRecipe {
    pub method: MergeMethod,
    pub parents: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Fully resolved hyperparameters for one method.
#[derive(Debug, Clone, PartialEq)]
pub enum MergePlan {
    Linear {
        weights: Vec<f64>,
    },
    Slerp {
        t: f64,
    },
    TaskArithmetic {
        lambda: f64,
    },
    Ties {
        density: f64,
        lambda: f64,
    },
    DareTies {
        drop_prob: f64,
        density: f64,
        lambda: f64,
        seed: u64,
    },
}

impl MergePlan {
    pub fn method(&self) -> MergeMethod {
        match self {
            MergePlan::Linear { .. } => MergeMethod::Linear,
            MergePlan::Slerp { .. } => MergeMethod::Slerp,
            MergePlan::TaskArithmetic { .. } => MergeMethod::TaskArithmetic,
            MergePlan::Ties { .. } => MergeMethod::Ties,
            MergePlan::DareTies { .. } => MergeMethod::DareTies,
        }
    }

    /// Runs the merge. `base` must be given exactly when the method needs it.
    pub fn execute(
        &self,
        parents: &[&Checkpoint],
        base: Option<&Checkpoint>,
        exec: Exec,
    ) -> Result<Checkpoint, MergeError> {
        let need_base = || {
            base.ok_or_else(|| {
                MergeError::Recipe(RecipeError::new("base", "required for this method"))
            })
        };
        match self {
            MergePlan::Linear { weights } => merge_linear(parents, weights, exec),
            MergePlan::Slerp { t } => match parents {
                [a, b] => merge_slerp(a, b, *t, exec),
                _ => Err(RecipeError::new("parents", "slerp takes exactly 2 parents").into()),
            },
            MergePlan::TaskArithmetic { lambda } => {
                merge_task_arithmetic(need_base()?, parents, *lambda, exec)
            }
            MergePlan::Ties { density, lambda } => {
                merge_ties(need_base()?, parents, *density, *lambda, exec)
            }
            MergePlan::DareTies {
                drop_prob,
                density,
                lambda,
                seed,
            } => merge_dare_ties(
                need_base()?,
                parents,
                *drop_prob,
                *density,
                *lambda,
                *seed,
                exec,
            ),
        }
    }
}

fn reject_field<T>(value: &Option<T>, field: &str, method: MergeMethod) -> Result<(), RecipeError> {
    match value {
        Some(_) => Err(RecipeError::new(field, format!("not used by {method}"))),
        None => Ok(()),
    }
}

fn check_range(field: &str, v: f64, ok: bool, expected: &str) -> Result<f64, RecipeError> {
    if ok {
        Ok(v)
    } else {
        Err(RecipeError::new(field, format!("{v} is not {expected}")))
    }
}

impl MergeRecipe {
    pub fn from_json(text: &str) -> Result<Self, RecipeError> {
        serde_json::from_str(text).map_err(|e| RecipeError::new("recipe", e.to_string()))
    }

    /// Checks the method/hyperparameter combination and fills defaults.
    pub fn validate(&self) -> Result<MergePlan, RecipeError> {
        let m = self.method;
        match (m, self.parents.len()) {
            (_, 0) => {
                return Err(RecipeError::new(
                    "parents",
                    "at least one parent is required",
                ))
            }
            (MergeMethod::Slerp, n) if n != 2 => {
                return Err(RecipeError::new(
                    "parents",
                    format!("slerp merges exactly 2 parents, got {n}"),
                ))
            }
            _ => {}
        }
        if let Some(i) = self.parents.iter().position(String::is_empty) {
            return Err(RecipeError::new(format!("parents[{i}]"), "empty reference"));
        }
        match (&self.base, m.needs_base()) {
            (None, true) => return Err(RecipeError::new("base", format!("{m} requires a base"))),
            (Some(_), false) => return Err(RecipeError::new("base", format!("not used by {m}"))),
            (Some(b), true) if b.is_empty() => {
                return Err(RecipeError::new("base", "empty reference"))
            }
            _ => {}
        }

        let lambda = || -> Result<f64, RecipeError> {
            let v = self.lambda.unwrap_or(DEFAULT_LAMBDA);
            check_range("lambda", v, v.is_finite() && v > 0.0, "a finite value > 0")
        };
        let density = || -> Result<f64, RecipeError> {
            let v = self.density.unwrap_or(DEFAULT_DENSITY);
            check_range("density", v, v > 0.0 && v <= 1.0, "in (0, 1]")
        };

        let plan = match m {
            MergeMethod::Linear => {
                for (f, v) in [
                    ("t", self.t),
                    ("lambda", self.lambda),
                    ("density", self.density),
                    ("drop_prob", self.drop_prob),
                ] {
                    reject_field(&v, f, m)?;
                }
                reject_field(&self.seed, "seed", m)?;
                let weights = self
                    .weights
                    .clone()
                    .unwrap_or_else(|| vec![1.0; self.parents.len()]);
                if weights.len() != self.parents.len() {
                    return Err(RecipeError::new(
                        "weights",
                        format!(
                            "{} weights for {} parents",
                            weights.len(),
                            self.parents.len()
                        ),
                    ));
                }
                if let Some(i) = weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
                    return Err(RecipeError::new(
                        format!("weights[{i}]"),
                        "must be finite and >= 0",
                    ));
                }
                if weights.iter().sum::<f64>() <= 0.0 {
                    return Err(RecipeError::new("weights", "must sum to a positive value"));
                }
                MergePlan::Linear { weights }
            }
            MergeMethod::Slerp => {
                reject_field(&self.weights, "weights", m)?;
                for (f, v) in [
                    ("lambda", self.lambda),
                    ("density", self.density),
                    ("drop_prob", self.drop_prob),
                ] {
                    reject_field(&v, f, m)?;
                }
                reject_field(&self.seed, "seed", m)?;
                let t = self.t.unwrap_or(DEFAULT_T);
                MergePlan::Slerp {
                    t: check_range("t", t, (0.0..=1.0).contains(&t), "in [0, 1]")?,
                }
            }
            MergeMethod::TaskArithmetic => {
                reject_field(&self.weights, "weights", m)?;
                for (f, v) in [
                    ("t", self.t),
                    ("density", self.density),
                    ("drop_prob", self.drop_prob),
                ] {
                    reject_field(&v, f, m)?;
                }
                reject_field(&self.seed, "seed", m)?;
                MergePlan::TaskArithmetic { lambda: lambda()? }
            }
            MergeMethod::Ties => {
                reject_field(&self.weights, "weights", m)?;
                for (f, v) in [("t", self.t), ("drop_prob", self.drop_prob)] {
                    reject_field(&v, f, m)?;
                }
                reject_field(&self.seed, "seed", m)?;
                MergePlan::Ties {
                    density: density()?,
                    lambda: lambda()?,
                }
            }
            MergeMethod::DareTies => {
                reject_field(&self.weights, "weights", m)?;
                reject_field(&self.t, "t", m)?;
                let p = self.drop_prob.unwrap_or(DEFAULT_DROP_PROB);
                MergePlan::DareTies {
                    drop_prob: check_range("drop_prob", p, (0.0..1.0).contains(&p), "in [0, 1)")?,
                    density: density()?,
                    lambda: lambda()?,
                    seed: self.seed.unwrap_or(DEFAULT_SEED),
                }
            }
        };
        Ok(plan)
    }
}
