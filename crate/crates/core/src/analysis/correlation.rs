use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::behavior::BehaviorReport;
use super::fmt_score;
use super::stats::{pearson, spearman};
use crate::probe::ProbeReport;

/// Fewest paired models for which a cell is defined.
pub const MIN_MODELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationMethod {
    Pearson,
    Spearman,
}

impl CorrelationMethod {
    pub const ALL: [CorrelationMethod; 2] =
        [CorrelationMethod::Pearson, CorrelationMethod::Spearman];

    pub fn as_str(self) -> &'static str {
        match self {
            CorrelationMethod::Pearson => "pearson",
            CorrelationMethod::Spearman => "spearman",
        }
    }
}

impl fmt::Display for CorrelationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CorrelationMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pearson" => Ok(CorrelationMethod::Pearson),
            "spearman" => Ok(CorrelationMethod::Spearman),
            other => Err(format!("unknown correlation method `{other}`")),
        }
    }
}

/// Unit of analysis on both axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    /// Phenomenon means (rows) against suite means (columns).
    #[default]
    Grouped,
    /// Probe tasks (rows) against behavior tasks, keyed `suite/task` (columns).
    Task,
}

impl Granularity {
    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Grouped => "grouped",
            Granularity::Task => "task",
        }
    }

    /// CSV header names for the row and column labels.
    pub fn axis_names(self) -> [&'static str; 2] {
        match self {
            Granularity::Grouped => ["phenomenon", "suite"],
            Granularity::Task => ["probe_task", "behavior_task"],
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Granularity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "grouped" => Ok(Granularity::Grouped),
            "task" => Ok(Granularity::Task),
            other => Err(format!("unknown granularity `{other}`")),
        }
    }
}

/// Probe scores (rows) by behavioral scores (columns), correlated across
/// models. `None` marks a cell that is undefined (too few models or constant
/// scores).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub method: CorrelationMethod,
    pub granularity: Granularity,
    pub models: Vec<String>,
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
    /// Models that contributed to each cell.
    pub n: Vec<Vec<usize>>,
}

impl CorrelationMatrix {
    /// Correlates two `model -> key -> score` tables over the models present
    /// in both.
    pub fn from_tables(
        row_scores: &BTreeMap<String, BTreeMap<String, f64>>,
        column_scores: &BTreeMap<String, BTreeMap<String, f64>>,
        method: CorrelationMethod,
        granularity: Granularity,
    ) -> Self {
        let models: Vec<String> = row_scores
            .keys()
            .filter(|m| column_scores.contains_key(*m))
            .cloned()
            .collect();
        let keys = |table: &BTreeMap<String, BTreeMap<String, f64>>| -> Vec<String> {
            models
                .iter()
                .flat_map(|m| table[m].keys().cloned())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect()
        };
        let rows = keys(row_scores);
        let columns = keys(column_scores);
        let mut values = Vec::with_capacity(rows.len());
        let mut n = Vec::with_capacity(rows.len());
        for r in &rows {
            let (mut vrow, mut nrow) = (Vec::new(), Vec::new());
            for c in &columns {
                let (x, y): (Vec<f64>, Vec<f64>) = models
                    .iter()
                    .filter_map(|m| Some((*row_scores[m].get(r)?, *column_scores[m].get(c)?)))
                    .unzip();
                let v = match method {
                    CorrelationMethod::Pearson => pearson(&x, &y),
                    CorrelationMethod::Spearman => spearman(&x, &y),
                };
                vrow.push(v.ok());
                nrow.push(x.len());
            }
            values.push(vrow);
            n.push(nrow);
        }
        Self {
            method,
            granularity,
            models,
            rows,
            columns,
            values,
            n,
        }
    }

    pub fn get(&self, row: &str, column: &str) -> Option<f64> {
        let i = self.rows.iter().position(|r| r == row)?;
        let j = self.columns.iter().position(|c| c == column)?;
        self.values[i][j]
    }

    pub fn is_fully_defined(&self) -> bool {
        self.values.iter().flatten().all(Option::is_some)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("matrix serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Header `phenomenon,<suite>...` (or `probe_task,<behavior task>...`);
    /// undefined cells are empty.
    pub fn to_wide_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![self.granularity.axis_names()[0].to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header).expect("in-memory write");
        for (r, vals) in self.rows.iter().zip(&self.values) {
            let mut rec = vec![r.clone()];
            rec.extend(vals.iter().map(|v| v.map(fmt_score).unwrap_or_default()));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    /// One `phenomenon,suite,value` line per cell; undefined cells are empty.
    pub fn to_long_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let [r, c] = self.granularity.axis_names();
        w.write_record([r, c, "value"]).expect("in-memory write");
        for (r, vals) in self.rows.iter().zip(&self.values) {
            for (c, v) in self.columns.iter().zip(vals) {
                w.write_record([
                    r.as_str(),
                    c.as_str(),
                    &v.map(fmt_score).unwrap_or_default(),
                ])
                .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

/// Per-phenomenon probing means against per-suite behavioral means.
pub fn correlation_matrix(
    probe: &ProbeReport,
    behavior: &BehaviorReport,
    method: CorrelationMethod,
) -> CorrelationMatrix {
    correlation_matrix_at(probe, behavior, method, Granularity::Grouped)
}

pub fn correlation_matrix_at(
    probe: &ProbeReport,
    behavior: &BehaviorReport,
    method: CorrelationMethod,
    granularity: Granularity,
) -> CorrelationMatrix {
    let (rows, columns) = match granularity {
        Granularity::Grouped => (probe.score_table(), behavior.score_table()),
        Granularity::Task => (probe.task_table(), behavior.task_table()),
    };
    CorrelationMatrix::from_tables(&rows, &columns, method, granularity)
}
