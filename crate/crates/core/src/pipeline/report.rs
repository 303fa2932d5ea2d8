use std::collections::{BTreeMap, BTreeSet};
use std::fs;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{read_file, write_file, OutputLayout, RunManifest, Stage, BASE_ID};
use crate::analysis::{
    compare_with_parents, correlation_matrix_at, fmt_score, BehaviorReport, CategoryCounts,
    CorrelationMatrix, CorrelationMethod, ParentComparison,
};
use crate::probe::ProbeReport;

type Table = BTreeMap<String, BTreeMap<String, f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelRole {
    Base,
    Parent,
    Merged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub model_id: String,
    pub role: ModelRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub seconds: f64,
}

impl Serialize for Stage {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Stage {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

/// Lineage of a run. Wall-clock timings are kept in memory only so that
/// reruns produce identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub manifest_sha256: String,
    pub seed: u64,
    #[serde(skip)]
    pub stage_timings: Vec<StageTiming>,
}

/// Absolute scores, `model -> key -> accuracy`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTables {
    pub behavior_suites: Table,
    pub behavior_tasks: Table,
    pub probe_phenomena: Table,
    pub probe_tasks: Table,
}

/// Merged models against the designated parent pair. Empty when the run
/// has no recipes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparisons {
    pub parent_a: Option<String>,
    pub parent_b: Option<String>,
    pub epsilon: f64,
    pub behavior: Vec<ParentComparison>,
    pub behavior_counts: Vec<CategoryCounts>,
    pub probe: Vec<ParentComparison>,
    pub probe_counts: Vec<CategoryCounts>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub provenance: Provenance,
    pub models: Vec<ModelEntry>,
    pub behavior: BehaviorReport,
    pub probe: ProbeReport,
    pub tables: ScoreTables,
    pub comparisons: Comparisons,
    pub correlations: Vec<CorrelationMatrix>,
}

impl PipelineReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn load_reports(
    m: &RunManifest,
    layout: &OutputLayout,
) -> Result<(BehaviorReport, ProbeReport), String> {
    let mut behavior = Vec::new();
    let mut probe = Vec::new();
    for id in m.model_ids() {
        let path = layout.behavior(&id, "json");
        behavior.push(
            BehaviorReport::from_json(&read_file(&path)?)
                .map_err(|e| format!("{}: {e}", path.display()))?,
        );
        let path = layout.probe(&id, "json");
        probe.push(
            ProbeReport::from_json(&read_file(&path)?)
                .map_err(|e| format!("{}: {e}", path.display()))?,
        );
    }
    Ok((
        BehaviorReport::combine(&behavior),
        ProbeReport::combine(&probe),
    ))
}

fn tables(behavior: &BehaviorReport, probe: &ProbeReport) -> ScoreTables {
    ScoreTables {
        behavior_suites: behavior.score_table(),
        behavior_tasks: behavior.task_table(),
        probe_phenomena: probe.score_table(),
        probe_tasks: probe.task_table(),
    }
}

fn comparisons(m: &RunManifest, t: &ScoreTables) -> Result<Comparisons, String> {
    let mut c = Comparisons {
        parent_a: None,
        parent_b: None,
        epsilon: m.epsilon,
        behavior: Vec::new(),
        behavior_counts: Vec::new(),
        probe: Vec::new(),
        probe_counts: Vec::new(),
    };
    let Some((a, b)) = m.comparison_pair().filter(|_| !m.recipes.is_empty()) else {
        return Ok(c);
    };
    c.parent_a = Some(a.to_string());
    c.parent_b = Some(b.to_string());
    let empty = BTreeMap::new();
    let get = |table: &'_ Table, id: &str| -> BTreeMap<String, f64> {
        table.get(id).unwrap_or(&empty).clone()
    };
    for r in &m.recipes {
        let id = r.name.as_str();
        for (table, out, counts) in [
            (&t.behavior_tasks, &mut c.behavior, &mut c.behavior_counts),
            (&t.probe_tasks, &mut c.probe, &mut c.probe_counts),
        ] {
            let rows = compare_with_parents(
                id,
                &get(table, id),
                &get(table, a),
                &get(table, b),
                m.epsilon,
            )
            .map_err(|e| format!("model `{id}`: {e}"))?;
            counts.push(CategoryCounts::tally(id, &rows));
            out.extend(rows);
        }
    }
    Ok(c)
}

fn wide_csv(model_ids: &[String], table: &Table) -> String {
    let columns: BTreeSet<&String> = table.values().flat_map(|r| r.keys()).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["model_id".to_string()];
    header.extend(columns.iter().map(|c| c.to_string()));
    w.write_record(&header).expect("in-memory write");
    for id in model_ids {
        let row = table.get(id);
        let mut rec = vec![id.clone()];
        rec.extend(columns.iter().map(|c| {
            row.and_then(|r| r.get(*c))
                .map(|v| fmt_score(*v))
                .unwrap_or_default()
        }));
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

fn comparisons_csv(rows: &[ParentComparison]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "merged_model_id",
        "task_id",
        "category",
        "parent_a_score",
        "parent_b_score",
        "merged_score",
        "epsilon",
    ])
    .expect("in-memory write");
    for r in rows {
        w.write_record([
            r.merged_model_id.clone(),
            r.task_id.clone(),
            r.category.to_string(),
            fmt_score(r.parent_a_score),
            fmt_score(r.parent_b_score),
            fmt_score(r.merged_score),
            fmt_score(r.epsilon),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

fn counts_csv(rows: &[CategoryCounts]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model_id", "better", "between", "worse", "total"])
        .expect("in-memory write");
    for r in rows {
        w.write_record([
            r.model_id.clone(),
            r.better.to_string(),
            r.between.to_string(),
            r.worse.to_string(),
            r.total.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// Absolute score tables plus Better/Between/Worse categorization.
pub(super) fn write_comparisons(m: &RunManifest, layout: &OutputLayout) -> Result<(), String> {
    let (behavior, probe) = load_reports(m, layout)?;
    let t = tables(&behavior, &probe);
    let ids = m.model_ids();
    write_file(
        &layout.table("behavior_suites"),
        wide_csv(&ids, &t.behavior_suites),
    )?;
    write_file(
        &layout.table("behavior_tasks"),
        wide_csv(&ids, &t.behavior_tasks),
    )?;
    write_file(
        &layout.table("probe_phenomena"),
        wide_csv(&ids, &t.probe_phenomena),
    )?;
    write_file(&layout.table("probe_tasks"), wide_csv(&ids, &t.probe_tasks))?;

    let c = comparisons(m, &t)?;
    write_file(
        &layout.comparison("comparisons.json"),
        serde_json::to_string_pretty(&c).expect("serializes") + "\n",
    )?;
    write_file(
        &layout.comparison("behavior.csv"),
        comparisons_csv(&c.behavior),
    )?;
    write_file(
        &layout.comparison("behavior_counts.csv"),
        counts_csv(&c.behavior_counts),
    )?;
    write_file(&layout.comparison("probe.csv"), comparisons_csv(&c.probe))?;
    write_file(
        &layout.comparison("probe_counts.csv"),
        counts_csv(&c.probe_counts),
    )?;
    Ok(())
}

/// Correlation matrices for both methods, then the full report.
pub(super) fn write_correlations(m: &RunManifest, layout: &OutputLayout) -> Result<(), String> {
    let (behavior, probe) = load_reports(m, layout)?;
    for method in CorrelationMethod::ALL {
        let cm = correlation_matrix_at(&probe, &behavior, method, m.correlation_granularity);
        let name = method.as_str();
        write_file(&layout.correlation(&format!("{name}.json")), cm.to_json())?;
        write_file(
            &layout.correlation(&format!("{name}.csv")),
            cm.to_wide_csv(),
        )?;
        write_file(
            &layout.correlation(&format!("{name}_long.csv")),
            cm.to_long_csv(),
        )?;
    }
    let report = assemble_report(m, layout)?;
    write_file(&layout.report(), report.to_json())
}

/// Builds the run report from the stage artifacts on disk.
pub fn assemble_report(m: &RunManifest, layout: &OutputLayout) -> Result<PipelineReport, String> {
    let (behavior, probe) = load_reports(m, layout)?;
    let t = tables(&behavior, &probe);
    let comparisons = comparisons(m, &t)?;
    let correlations = CorrelationMethod::ALL
        .into_iter()
        .map(|method| correlation_matrix_at(&probe, &behavior, method, m.correlation_granularity))
        .collect();

    let hash = |id: &str| -> Result<String, String> {
        let path = layout.checkpoint(id);
        Ok(sha256_hex(
            &fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?,
        ))
    };
    let mut models = Vec::new();
    if m.base.is_some() {
        models.push(ModelEntry {
            model_id: BASE_ID.into(),
            role: ModelRole::Base,
            method: None,
            sha256: hash(BASE_ID)?,
        });
    }
    for p in &m.parents {
        models.push(ModelEntry {
            model_id: p.id.clone(),
            role: ModelRole::Parent,
            method: None,
            sha256: hash(&p.id)?,
        });
    }
    for r in &m.recipes {
        models.push(ModelEntry {
            model_id: r.name.clone(),
            role: ModelRole::Merged,
            method: Some(r.recipe.method.as_str().into()),
            sha256: hash(&r.name)?,
        });
    }

    Ok(PipelineReport {
        provenance: Provenance {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            manifest_sha256: sha256_hex(m.to_json().as_bytes()),
            seed: m.seed,
            stage_timings: Vec::new(),
        },
        models,
        behavior,
        probe,
        tables: t,
        comparisons,
        correlations,
    })
}
