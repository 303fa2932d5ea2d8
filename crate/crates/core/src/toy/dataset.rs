use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::matrix::Matrix;

/// Feature rows with integer class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledDataset {
    pub input_dim: usize,
    pub num_classes: usize,
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self, ModelError> {
        let ds = Self {
            input_dim: inputs.cols(),
            num_classes,
            inputs,
            labels,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidDataset(msg));
        if self.inputs.rows() != self.labels.len() {
            return bad(format!(
                "{} input rows but {} labels",
                self.inputs.rows(),
                self.labels.len()
            ));
        }
        if self.inputs.rows() > 0 && self.inputs.cols() != self.input_dim {
            return bad(format!(
                "declared input_dim {} but rows have {} features",
                self.input_dim,
                self.inputs.cols()
            ));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if let Some(l) = self.labels.iter().find(|l| **l >= self.num_classes) {
            return bad(format!("label {l} outside [0, {})", self.num_classes));
        }
        if self.inputs.as_slice().iter().any(|v| !v.is_finite()) {
            return bad("non-finite feature value".into());
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of examples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("dataset serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let ds: Self =
            serde_json::from_str(text).map_err(|e| ModelError::InvalidDataset(e.to_string()))?;
        ds.validate()?;
        Ok(ds)
    }

    /// CSV with header `x0,..,x{d-1},label`, preceded by a
    /// `# num_classes=<c>` line.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# num_classes={}\n", self.num_classes);
        let header: Vec<String> = (0..self.input_dim).map(|j| format!("x{j}")).collect();
        out.push_str(&header.join(","));
        out.push_str(if self.input_dim > 0 {
            ",label\n"
        } else {
            "label\n"
        });
        for (row, label) in self.inputs.iter_rows().zip(&self.labels) {
            for v in row {
                out.push_str(&serde_json::to_string(v).expect("finite float"));
                out.push(',');
            }
            out.push_str(&label.to_string());
            out.push('\n');
        }
        out
    }

    /// Parses [`to_csv`](Self::to_csv) output. Without a `num_classes` line
    /// the class count is `max(label) + 1`.
    pub fn from_csv(text: &str) -> Result<Self, ModelError> {
        let bad = |msg: String| ModelError::InvalidDataset(msg);
        let mut num_classes = None;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty()).peekable();
        while let Some(line) = lines.peek() {
            let Some(comment) = line.trim().strip_prefix('#') else {
                break;
            };
            if let Some(v) = comment.trim().strip_prefix("num_classes=") {
                num_classes = Some(
                    v.trim()
                        .parse::<usize>()
                        .map_err(|e| bad(format!("num_classes: {e}")))?,
                );
            }
            lines.next();
        }
        let header = lines
            .next()
            .ok_or_else(|| bad("missing CSV header".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.last() != Some(&"label") {
            return Err(bad("last CSV column must be `label`".into()));
        }
        let dim = cols.len() - 1;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != dim + 1 {
                return Err(bad(format!(
                    "row {}: expected {} fields",
                    lineno + 1,
                    dim + 1
                )));
            }
            let row = fields[..dim]
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| bad(format!("row {}: {e}", lineno + 1)))?;
            rows.push(row);
            labels.push(
                fields[dim]
                    .parse::<usize>()
                    .map_err(|e| bad(format!("row {} label: {e}", lineno + 1)))?,
            );
        }
        let num_classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
        let inputs = if rows.is_empty() {
            Matrix::zeros(0, dim)
        } else {
            Matrix::from_rows(&rows).expect("row widths checked")
        };
        let ds = Self {
            input_dim: dim,
            num_classes,
            inputs,
            labels,
        };
        ds.validate()?;
        Ok(ds)
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Loads JSON, or CSV when the extension is `.csv`.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<LabeledDataset, ModelError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if is_csv(path) {
        LabeledDataset::from_csv(&text)
    } else {
        LabeledDataset::from_json(&text)
    }
}

pub fn save_dataset(ds: &LabeledDataset, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    let text = if is_csv(path) {
        ds.to_csv()
    } else {
        ds.to_json()
    };
    fs::write(path, text).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}
