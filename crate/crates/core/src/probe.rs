//! Linear probes on last-layer representations.
//!
//! A probe is multinomial logistic regression on standardized features, fit
//! by full-batch gradient descent from zero parameters. The objective is
//! mean cross-entropy plus `l2_penalty / 2 · ‖W‖²` (the bias is not
//! penalized). A [`ProbeTask`] holds raw-input splits; [`run_probe_suite`]
//! pushes them through a model, trains on `train` and scores on `test`.
//! `dev` is carried but unused by the default run.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::exec::Exec;
use crate::matrix::{argmax, Matrix};
use crate::toy::{load_dataset, LabeledDataset, Mlp, ModelError, ToyArchitecture};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("degenerate task `{task}`: {reason}")]
    DegenerateTask { task: String, reason: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("empty split")]
    EmptySplit,
    #[error("no probe tasks given")]
    NoTasks,
    #[error("duplicate task id `{0}`")]
    DuplicateTask(String),
    #[error("invalid probe config: {0}")]
    InvalidConfig(String),
    #[error("probe task manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn default_epochs() -> usize {
    200
}
fn default_lr() -> f64 {
    0.1
}
fn default_l2() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_l2")]
    pub l2_penalty: f64,
    /// Recorded for provenance. Zero initialisation and full-batch updates
    /// leave nothing for it to randomise.
    #[serde(default)]
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            learning_rate: default_lr(),
            l2_penalty: default_l2(),
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), ProbeError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(ProbeError::InvalidConfig(format!(
                "learning_rate {} must be > 0",
                self.learning_rate
            )));
        }
        if !(self.l2_penalty.is_finite() && self.l2_penalty >= 0.0) {
            return Err(ProbeError::InvalidConfig(format!(
                "l2_penalty {} must be >= 0",
                self.l2_penalty
            )));
        }
        Ok(())
    }
}

/// One probing task: three labelled splits sharing a feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeTask {
    pub task_id: String,
    pub phenomenon: String,
    pub train: LabeledDataset,
    pub dev: LabeledDataset,
    pub test: LabeledDataset,
}

impl ProbeTask {
    pub fn num_classes(&self) -> usize {
        self.train
            .num_classes
            .max(self.dev.num_classes)
            .max(self.test.num_classes)
    }

    pub fn feature_dim(&self) -> usize {
        self.train.input_dim
    }

    /// Same feature width across splits and every class present in `train`.
    pub fn validate(&self) -> Result<(), ProbeError> {
        let d = self.feature_dim();
        for (name, split) in [("dev", &self.dev), ("test", &self.test)] {
            if split.input_dim != d {
                return Err(ProbeError::DimensionMismatch(format!(
                    "task `{}`: {name} has {} features, train has {d}",
                    self.task_id, split.input_dim
                )));
            }
        }
        let counts = {
            let mut c = vec![0usize; self.num_classes()];
            for &l in &self.train.labels {
                c[l] += 1;
            }
            c
        };
        let missing: Vec<usize> = (0..counts.len()).filter(|&k| counts[k] == 0).collect();
        if counts.len() < 2 || !missing.is_empty() {
            return Err(ProbeError::DegenerateTask {
                task: self.task_id.clone(),
                reason: format!(
                    "train split must contain every one of {} (>= 2) classes; missing {missing:?}",
                    counts.len()
                ),
            });
        }
        Ok(())
    }

    /// Replaces every split's inputs with `f(inputs)`.
    pub fn map_features(
        &self,
        f: impl Fn(&Matrix) -> Result<Matrix, ModelError>,
    ) -> Result<ProbeTask, ProbeError> {
        let map = |ds: &LabeledDataset| -> Result<LabeledDataset, ProbeError> {
            let inputs = f(&ds.inputs)?;
            let mut out = LabeledDataset::new(inputs, ds.labels.clone(), ds.num_classes)?;
            if ds.is_empty() {
                out.input_dim = f(&Matrix::zeros(1, ds.input_dim))?.cols();
            }
            Ok(out)
        };
        Ok(ProbeTask {
            task_id: self.task_id.clone(),
            phenomenon: self.phenomenon.clone(),
            train: map(&self.train)?,
            dev: map(&self.dev)?,
            test: map(&self.test)?,
        })
    }
}

/// Per-feature affine map fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub stddev: Vec<f64>,
}

impl Standardization {
    /// Population mean/stddev per column. Columns whose spread is
    /// indistinguishable from rounding noise get stddev 1.
    pub fn fit(x: &Matrix) -> Self {
        let n = x.rows().max(1) as f64;
        let d = x.cols();
        let mut mean = vec![0.0; d];
        for row in x.iter_rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in x.iter_rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let stddev = var
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let sd = (s / n).sqrt();
                if sd <= 1e-12 * m.abs().max(1.0) {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Self { mean, stddev }
    }

    pub fn apply_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.stddev))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for (i, row) in x.iter_rows().enumerate() {
            out.row_mut(i).copy_from_slice(&self.apply_row(row));
        }
        out
    }
}

/// Trained linear probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    /// `[num_classes, feature_dim]`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub standardization: Standardization,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
}

impl Probe {
    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.cols()
    }

    fn scores_std(&self, z: &[f64]) -> Vec<f64> {
        (0..self.num_classes())
            .map(|c| {
                self.bias[c]
                    + self
                        .weight
                        .row(c)
                        .iter()
                        .zip(z)
                        .map(|(w, x)| w * x)
                        .sum::<f64>()
            })
            .collect()
    }

    /// Argmax class per row; ties go to the lowest class index.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>, ProbeError> {
        if x.rows() > 0 && x.cols() != self.feature_dim() {
            return Err(ProbeError::DimensionMismatch(format!(
                "probe expects {} features, got {}",
                self.feature_dim(),
                x.cols()
            )));
        }
        Ok(x.iter_rows()
            .map(|row| argmax(&self.scores_std(&self.standardization.apply_row(row))))
            .collect())
    }
}

/// Regularised objective and its gradient `(loss, dW, db)` on already
/// standardized features.
pub fn probe_objective(
    weight: &Matrix,
    bias: &[f64],
    z: &Matrix,
    labels: &[usize],
    l2_penalty: f64,
) -> (f64, Matrix, Vec<f64>) {
    let classes = bias.len();
    let n = z.rows();
    let mut gw = Matrix::zeros(classes, z.cols());
    let mut gb = vec![0.0; classes];
    let mut loss = 0.0;
    for (row, &y) in z.iter_rows().zip(labels) {
        let scores: Vec<f64> = (0..classes)
            .map(|c| {
                bias[c]
                    + weight
                        .row(c)
                        .iter()
                        .zip(row)
                        .map(|(w, x)| w * x)
                        .sum::<f64>()
            })
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        loss += total.ln() + max - scores[y];
        for c in 0..classes {
            let d = exps[c] / total - if c == y { 1.0 } else { 0.0 };
            gb[c] += d;
            for (g, x) in gw.row_mut(c).iter_mut().zip(row) {
                *g += d * x;
            }
        }
    }
    let inv = if n > 0 { 1.0 / n as f64 } else { 0.0 };
    loss *= inv;
    gb.iter_mut().for_each(|g| *g *= inv);
    let mut penalty = 0.0;
    for c in 0..classes {
        for (g, w) in gw.row_mut(c).iter_mut().zip(weight.row(c)) {
            *g = *g * inv + l2_penalty * w;
            penalty += w * w;
        }
    }
    (loss + 0.5 * l2_penalty * penalty, gw, gb)
}

/// Trains a probe and returns the objective before each update plus the
/// final value (`epochs + 1` entries).
pub fn train_probe_with_history(
    task: &ProbeTask,
    config: &ProbeConfig,
) -> Result<(Probe, Vec<f64>), ProbeError> {
    config.validate()?;
    task.validate()?;
    let classes = task.num_classes();
    let standardization = Standardization::fit(&task.train.inputs);
    let z = standardization.apply(&task.train.inputs);
    let mut weight = Matrix::zeros(classes, task.feature_dim());
    let mut bias = vec![0.0; classes];
    let mut history = Vec::with_capacity(config.epochs + 1);
    for _ in 0..config.epochs {
        let (loss, gw, gb) =
            probe_objective(&weight, &bias, &z, &task.train.labels, config.l2_penalty);
        history.push(loss);
        for c in 0..classes {
            for (w, g) in weight.row_mut(c).iter_mut().zip(gw.row(c)) {
                *w -= config.learning_rate * g;
            }
            bias[c] -= config.learning_rate * gb[c];
        }
    }
    history.push(probe_objective(&weight, &bias, &z, &task.train.labels, config.l2_penalty).0);
    Ok((
        Probe {
            weight,
            bias,
            standardization,
        },
        history,
    ))
}

pub fn train_probe(task: &ProbeTask, config: &ProbeConfig) -> Result<Probe, ProbeError> {
    Ok(train_probe_with_history(task, config)?.0)
}

/// Accuracy and macro-F1 over classes `0..num_classes`. A class with no
/// true and no predicted instances scores F1 = 0.
pub fn classification_metrics(
    predicted: &[usize],
    truth: &[usize],
    num_classes: usize,
) -> ProbeMetrics {
    let n = truth.len();
    let correct = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fneg = vec![0usize; num_classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[t] += 1;
        }
    }
    let f1_sum: f64 = (0..num_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fneg[c];
            if denom == 0 {
                0.0
            } else {
                (2 * tp[c]) as f64 / denom as f64
            }
        })
        .sum();
    ProbeMetrics {
        accuracy: if n == 0 {
            0.0
        } else {
            correct as f64 / n as f64
        },
        macro_f1: if num_classes == 0 {
            0.0
        } else {
            f1_sum / num_classes as f64
        },
    }
}

pub fn evaluate_probe(probe: &Probe, split: &LabeledDataset) -> Result<ProbeMetrics, ProbeError> {
    if split.is_empty() {
        return Err(ProbeError::EmptySplit);
    }
    if split.num_classes > probe.num_classes() {
        return Err(ProbeError::DimensionMismatch(format!(
            "split has {} classes, probe has {}",
            split.num_classes,
            probe.num_classes()
        )));
    }
    let predicted = probe.predict(&split.inputs)?;
    Ok(classification_metrics(
        &predicted,
        &split.labels,
        probe.num_classes(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub model_id: String,
    pub task_id: String,
    pub phenomenon: String,
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhenomenonMean {
    pub model_id: String,
    pub phenomenon: String,
    pub tasks: usize,
    pub mean_accuracy: f64,
}

/// One row per (model, task), sorted, plus unweighted per-phenomenon means
/// over tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub rows: Vec<ProbeRow>,
    pub phenomenon_means: Vec<PhenomenonMean>,
}

impl ProbeReport {
    /// Sorts rows by (model, task) and recomputes the phenomenon means.
    pub fn from_rows(mut rows: Vec<ProbeRow>) -> Self {
        rows.sort_by(|a, b| (&a.model_id, &a.task_id).cmp(&(&b.model_id, &b.task_id)));
        let mut groups: BTreeMap<(&str, &str), Vec<f64>> = BTreeMap::new();
        for r in &rows {
            groups
                .entry((r.model_id.as_str(), r.phenomenon.as_str()))
                .or_default()
                .push(r.accuracy);
        }
        let phenomenon_means = groups
            .into_iter()
            .map(|((m, p), accs)| PhenomenonMean {
                model_id: m.to_string(),
                phenomenon: p.to_string(),
                tasks: accs.len(),
                mean_accuracy: accs.iter().sum::<f64>() / accs.len() as f64,
            })
            .collect();
        Self {
            rows,
            phenomenon_means,
        }
    }

    /// Concatenates reports (e.g. one per model).
    pub fn combine(reports: &[ProbeReport]) -> Self {
        Self::from_rows(
            reports
                .iter()
                .flat_map(|r| r.rows.iter().cloned())
                .collect(),
        )
    }

    /// `model -> phenomenon -> mean accuracy`.
    pub fn score_table(&self) -> BTreeMap<String, BTreeMap<String, f64>> {
        let mut out: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for m in &self.phenomenon_means {
            out.entry(m.model_id.clone())
                .or_default()
                .insert(m.phenomenon.clone(), m.mean_accuracy);
        }
        out
    }

    /// `model -> task -> accuracy`.
    pub fn task_table(&self) -> BTreeMap<String, BTreeMap<String, f64>> {
        let mut out: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for r in &self.rows {
            out.entry(r.model_id.clone())
                .or_default()
                .insert(r.task_id.clone(), r.accuracy);
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
        w.write_record(["model_id", "task_id", "phenomenon", "accuracy", "macro_f1"])
            .expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.model_id.as_str(),
                r.task_id.as_str(),
                r.phenomenon.as_str(),
                &crate::analysis::fmt_score(r.accuracy),
                &crate::analysis::fmt_score(r.macro_f1),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

/// Extracts representations for every split with `model`, trains a probe on
/// `train` and reports `test` metrics. Tasks run through `exec`; rows come
/// out in task-id order.
pub fn run_probe_suite(
    model_id: &str,
    model: &Checkpoint,
    arch: &ToyArchitecture,
    tasks: &[ProbeTask],
    config: &ProbeConfig,
    exec: Exec,
) -> Result<ProbeReport, ProbeError> {
    if tasks.is_empty() {
        return Err(ProbeError::NoTasks);
    }
    let mut seen = BTreeSet::new();
    for t in tasks {
        if !seen.insert(t.task_id.as_str()) {
            return Err(ProbeError::DuplicateTask(t.task_id.clone()));
        }
    }
    config.validate()?;
    let mlp = Mlp::from_checkpoint(model, arch)?;
    let rows = exec.try_map(tasks, |task| -> Result<ProbeRow, ProbeError> {
        let reps = task.map_features(|x| mlp.representation(x))?;
        let probe = train_probe(&reps, config)?;
        let m = evaluate_probe(&probe, &reps.test)?;
        Ok(ProbeRow {
            model_id: model_id.to_string(),
            task_id: task.task_id.clone(),
            phenomenon: task.phenomenon.clone(),
            accuracy: m.accuracy,
            macro_f1: m.macro_f1,
        })
    })?;
    Ok(ProbeReport::from_rows(rows))
}

/// Split datasets as file paths, resolved against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeTaskEntry {
    pub task_id: String,
    pub phenomenon: String,
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeTaskManifest {
    pub tasks: Vec<ProbeTaskEntry>,
}

/// Reads a task manifest and every dataset it lists.
pub fn load_probe_tasks(path: impl AsRef<Path>) -> Result<Vec<ProbeTask>, ProbeError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| ProbeError::Manifest(format!("{}: {e}", path.display())))?;
    let manifest: ProbeTaskManifest = serde_json::from_str(&text)
        .map_err(|e| ProbeError::Manifest(format!("{}: {e}", path.display())))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    manifest
        .tasks
        .iter()
        .map(|e| {
            Ok(ProbeTask {
                task_id: e.task_id.clone(),
                phenomenon: e.phenomenon.clone(),
                train: load_dataset(dir.join(&e.train))?,
                dev: load_dataset(dir.join(&e.dev))?,
                test: load_dataset(dir.join(&e.test))?,
            })
        })
        .collect()
}
