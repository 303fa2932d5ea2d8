use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::AnalysisError;

/// Where a merged model's score sits relative to its two parents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Better,
    Between,
    Worse,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Better => "better",
            Category::Between => "between",
            Category::Worse => "worse",
        })
    }
}

fn check_score(name: &'static str, v: f64) -> Result<(), AnalysisError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(AnalysisError::ParameterOutOfRange {
            name,
            value: v,
            expected: "a score in [0, 1]",
        })
    }
}

/// `Better` iff `merged > max + ε`, `Worse` iff `merged < min − ε`, otherwise
/// `Between` (boundaries included).
pub fn categorize_vs_parents(
    merged: f64,
    parent_a: f64,
    parent_b: f64,
    epsilon: f64,
) -> Result<Category, AnalysisError> {
    check_score("merged", merged)?;
    check_score("parent_a", parent_a)?;
    check_score("parent_b", parent_b)?;
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(AnalysisError::ParameterOutOfRange {
            name: "epsilon",
            value: epsilon,
            expected: "a finite value >= 0",
        });
    }
    let (lo, hi) = (parent_a.min(parent_b), parent_a.max(parent_b));
    Ok(if merged > hi + epsilon {
        Category::Better
    } else if merged < lo - epsilon {
        Category::Worse
    } else {
        Category::Between
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParentComparison {
    pub merged_model_id: String,
    pub task_id: String,
    pub category: Category,
    pub parent_a_score: f64,
    pub parent_b_score: f64,
    pub merged_score: f64,
    pub epsilon: f64,
}

/// Stacked-bar counts for one merged model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub model_id: String,
    pub better: usize,
    pub between: usize,
    pub worse: usize,
    pub total: usize,
}

impl CategoryCounts {
    pub fn tally(model_id: &str, comparisons: &[ParentComparison]) -> Self {
        let mut c = Self {
            model_id: model_id.to_string(),
            better: 0,
            between: 0,
            worse: 0,
            total: 0,
        };
        for cmp in comparisons.iter().filter(|c| c.merged_model_id == model_id) {
            match cmp.category {
                Category::Better => c.better += 1,
                Category::Between => c.between += 1,
                Category::Worse => c.worse += 1,
            }
            c.total += 1;
        }
        c
    }
}

/// Categorizes every task that all three score maps share, in task order.
pub fn compare_with_parents(
    merged_model_id: &str,
    merged: &BTreeMap<String, f64>,
    parent_a: &BTreeMap<String, f64>,
    parent_b: &BTreeMap<String, f64>,
    epsilon: f64,
) -> Result<Vec<ParentComparison>, AnalysisError> {
    merged
        .iter()
        .filter_map(|(task, &m)| Some((task, m, *parent_a.get(task)?, *parent_b.get(task)?)))
        .map(|(task, m, a, b)| {
            Ok(ParentComparison {
                merged_model_id: merged_model_id.to_string(),
                task_id: task.clone(),
                category: categorize_vs_parents(m, a, b, epsilon)?,
                parent_a_score: a,
                parent_b_score: b,
                merged_score: m,
                epsilon,
            })
        })
        .collect()
}
