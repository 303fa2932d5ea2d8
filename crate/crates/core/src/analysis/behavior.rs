use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{fmt_score, AnalysisError};
use crate::checkpoint::Checkpoint;
use crate::exec::Exec;
use crate::matrix::argmax;
use crate::toy::{load_dataset, LabeledDataset, Mlp, ToyArchitecture};

#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorTask {
    pub task_id: String,
    pub data: LabeledDataset,
}

/// Named group of tasks whose accuracies are averaged together.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorSuite {
    pub suite_id: String,
    pub tasks: Vec<BehaviorTask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorRow {
    pub model_id: String,
    pub suite_id: String,
    pub task_id: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteMean {
    pub model_id: String,
    pub suite_id: String,
    pub tasks: usize,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorReport {
    pub rows: Vec<BehaviorRow>,
    pub suite_means: Vec<SuiteMean>,
}

impl BehaviorReport {
    /// Sorts rows by (model, suite, task) and recomputes suite means.
    pub fn from_rows(mut rows: Vec<BehaviorRow>) -> Self {
        rows.sort_by(|a, b| {
            (&a.model_id, &a.suite_id, &a.task_id).cmp(&(&b.model_id, &b.suite_id, &b.task_id))
        });
        let mut groups: BTreeMap<(&str, &str), Vec<f64>> = BTreeMap::new();
        for r in &rows {
            groups
                .entry((r.model_id.as_str(), r.suite_id.as_str()))
                .or_default()
                .push(r.accuracy);
        }
        let suite_means = groups
            .into_iter()
            .map(|((m, s), accs)| SuiteMean {
                model_id: m.to_string(),
                suite_id: s.to_string(),
                tasks: accs.len(),
                mean_accuracy: accs.iter().sum::<f64>() / accs.len() as f64,
            })
            .collect();
        Self { rows, suite_means }
    }

    pub fn combine(reports: &[BehaviorReport]) -> Self {
        Self::from_rows(
            reports
                .iter()
                .flat_map(|r| r.rows.iter().cloned())
                .collect(),
        )
    }

    /// `model -> suite -> mean accuracy`.
    pub fn score_table(&self) -> BTreeMap<String, BTreeMap<String, f64>> {
        let mut out: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for m in &self.suite_means {
            out.entry(m.model_id.clone())
                .or_default()
                .insert(m.suite_id.clone(), m.mean_accuracy);
        }
        out
    }

    /// `model -> "suite/task" -> accuracy`.
    pub fn task_table(&self) -> BTreeMap<String, BTreeMap<String, f64>> {
        let mut out: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for r in &self.rows {
            out.entry(r.model_id.clone())
                .or_default()
                .insert(format!("{}/{}", r.suite_id, r.task_id), r.accuracy);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["model_id", "suite_id", "task_id", "accuracy"])
            .expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.model_id.as_str(),
                r.suite_id.as_str(),
                r.task_id.as_str(),
                &fmt_score(r.accuracy),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

/// Argmax accuracy of `model` on every task of every suite.
pub fn evaluate_behavior(
    model_id: &str,
    model: &Checkpoint,
    arch: &ToyArchitecture,
    suites: &[BehaviorSuite],
    exec: Exec,
) -> Result<BehaviorReport, AnalysisError> {
    if suites.is_empty() {
        return Err(AnalysisError::NoSuites);
    }
    let mut seen = BTreeSet::new();
    let mut work = Vec::new();
    for s in suites {
        for t in &s.tasks {
            if !seen.insert((s.suite_id.as_str(), t.task_id.as_str())) {
                return Err(AnalysisError::DuplicateTask {
                    suite: s.suite_id.clone(),
                    task: t.task_id.clone(),
                });
            }
            if t.data.is_empty() {
                return Err(AnalysisError::EmptyTask(t.task_id.clone()));
            }
            work.push((s.suite_id.as_str(), t));
        }
    }
    let mlp = Mlp::from_checkpoint(model, arch)?;
    let rows = exec.try_map(
        &work,
        |(suite, task)| -> Result<BehaviorRow, AnalysisError> {
            let logits = mlp.logits(&task.data.inputs)?;
            let correct = logits
                .iter_rows()
                .zip(&task.data.labels)
                .filter(|(z, y)| argmax(z) == **y)
                .count();
            Ok(BehaviorRow {
                model_id: model_id.to_string(),
                suite_id: suite.to_string(),
                task_id: task.task_id.clone(),
                accuracy: correct as f64 / task.data.len() as f64,
            })
        },
    )?;
    Ok(BehaviorReport::from_rows(rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviorTaskEntry {
    pub task_id: String,
    pub data: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviorSuiteEntry {
    pub suite_id: String,
    pub tasks: Vec<BehaviorTaskEntry>,
}

/// `{"suites": [{"suite_id": .., "tasks": [{"task_id": .., "data": "path"}]}]}`
/// with dataset paths relative to the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuitesFile {
    pub suites: Vec<BehaviorSuiteEntry>,
}

pub fn load_behavior_suites(path: impl AsRef<Path>) -> Result<Vec<BehaviorSuite>, AnalysisError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| AnalysisError::SuitesFile(format!("{}: {e}", path.display())))?;
    let file: SuitesFile = serde_json::from_str(&text)
        .map_err(|e| AnalysisError::SuitesFile(format!("{}: {e}", path.display())))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    file.suites
        .iter()
        .map(|s| {
            Ok(BehaviorSuite {
                suite_id: s.suite_id.clone(),
                tasks: s
                    .tasks
                    .iter()
                    .map(|t| {
                        Ok(BehaviorTask {
                            task_id: t.task_id.clone(),
                            data: load_dataset(dir.join(&t.data))?,
                        })
                    })
                    .collect::<Result<_, AnalysisError>>()?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::Tensor;
    use crate::matrix::Matrix;

    fn identity_model() -> (Checkpoint, ToyArchitecture) {
        let arch = ToyArchitecture::new(2, vec![], 2);
        let c = Checkpoint::new()
            .with(
                "layer0.weight",
                Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            )
            .with("layer0.bias", Tensor::zeros(vec![2]));
        (c, arch)
    }

    fn task(id: &str, rows: &[[f64; 2]], labels: &[usize]) -> BehaviorTask {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        BehaviorTask {
            task_id: id.into(),
            data: LabeledDataset::new(Matrix::from_rows(&rows).unwrap(), labels.to_vec(), 2)
                .unwrap(),
        }
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let (model, arch) = identity_model();
        let suites = vec![BehaviorSuite {
            suite_id: "s".into(),
            tasks: vec![task(
                "t",
                &[[1.0, 0.0], [0.0, 1.0], [2.0, -1.0]],
                &[0, 1, 0],
            )],
        }];
        let r = evaluate_behavior("m", &model, &arch, &suites, Exec::Sequential).unwrap();
        assert_eq!(r.rows[0].accuracy, 1.0);

        let zero = Checkpoint::new()
            .with("layer0.weight", Tensor::zeros(vec![2, 2]))
            .with("layer0.bias", Tensor::zeros(vec![2]));
        let balanced = vec![BehaviorSuite {
            suite_id: "s".into(),
            tasks: vec![task(
                "t",
                &[[1.0, 0.0], [0.0, 1.0], [3.0, 0.0], [0.0, 3.0]],
                &[0, 1, 0, 1],
            )],
        }];
        let r = evaluate_behavior("z", &zero, &arch, &balanced, Exec::Sequential).unwrap();
        assert_eq!(r.rows[0].accuracy, 0.5);
    }

    #[test]
    fn suite_mean_averages_tasks() {
        let (model, arch) = identity_model();
        let pts = [[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0]];
        let suites = vec![BehaviorSuite {
            suite_id: "s".into(),
            tasks: vec![
                task("a", &pts, &[0, 0, 0, 1, 1]),
                task("b", &pts, &[0, 0, 0, 0, 1]),
            ],
        }];
        let r = evaluate_behavior("m", &model, &arch, &suites, Exec::Parallel).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert!((r.suite_means[0].mean_accuracy - 0.7).abs() < 1e-15);
        assert!(r.to_csv().contains("m,s,a,0.6\n"));
    }

    #[test]
    fn errors() {
        let (model, arch) = identity_model();
        assert!(matches!(
            evaluate_behavior("m", &model, &arch, &[], Exec::Sequential),
            Err(AnalysisError::NoSuites)
        ));
        let t = task("t", &[[1.0, 0.0]], &[0]);
        let dup = vec![BehaviorSuite {
            suite_id: "s".into(),
            tasks: vec![t.clone(), t],
        }];
        assert!(matches!(
            evaluate_behavior("m", &model, &arch, &dup, Exec::Sequential),
            Err(AnalysisError::DuplicateTask { .. })
        ));
        let wrong = ToyArchitecture::new(2, vec![3], 2);
        let ok = vec![BehaviorSuite {
            suite_id: "s".into(),
            tasks: vec![task("t", &[[1.0, 0.0]], &[0])],
        }];
        assert!(matches!(
            evaluate_behavior("m", &model, &wrong, &ok, Exec::Sequential),
            Err(AnalysisError::Model(_))
        ));
    }
}
