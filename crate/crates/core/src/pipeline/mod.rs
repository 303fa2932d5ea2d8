//! Manifest-driven end-to-end runs.
//!
//! Every stage reads its inputs from, and writes its outputs to, the output
//! directory, so a single stage can be rerun on its own:
//!
//! ```text
//! checkpoints/<model>.safetensors      parents, merge
//! behavior/<model>.{json,csv}          behavior
//! probe/<model>.{json,csv}             probe
//! tables/*.csv, comparisons/*          compare
//! correlation/<method>{.json,.csv,_long.csv}, report.json   correlate
//! ```

mod manifest;
mod report;

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use thiserror::Error;

use crate::analysis::{evaluate_behavior, BehaviorSuite, BehaviorTask};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::exec::Exec;
use crate::probe::run_probe_suite;
use crate::rng::keyed_stream;
use crate::toy::{finetune, train_toy_model, TrainConfig};

pub use manifest::{
    validate_manifest, BehaviorSuiteSpec, BehaviorTaskSpec, DataSource, InlineProbeTask,
    ModelSource, NamedRecipe, ParentSpec, ProbeTaskSource, RunManifest, TrainSpec, BASE_ID,
};
pub use report::{
    assemble_report, Comparisons, ModelEntry, ModelRole, PipelineReport, Provenance, ScoreTables,
    StageTiming,
};

const SEED_DOMAIN: &str = "mergelens/pipeline";

/// Name of the marker written to the output directory when a stage fails.
pub const FAILURE_MARKER: &str = "FAILED";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("manifest error at `{field}`: {reason}")]
pub struct ManifestError {
    pub field: String,
    pub reason: String,
}

impl ManifestError {
    pub fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Parents,
    Merge,
    Behavior,
    Probe,
    Compare,
    Correlate,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Parents,
        Stage::Merge,
        Stage::Behavior,
        Stage::Probe,
        Stage::Compare,
        Stage::Correlate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Parents => "parents",
            Stage::Merge => "merge",
            Stage::Behavior => "behavior",
            Stage::Probe => "probe",
            Stage::Compare => "compare",
            Stage::Correlate => "correlate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Stage::ALL.iter().map(|s| s.as_str()).collect();
                format!("unknown stage `{s}` (expected one of {})", names.join(", "))
            })
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: Stage, message: String },
}

impl PipelineError {
    pub fn stage(&self) -> Option<Stage> {
        match self {
            PipelineError::Stage { stage, .. } => Some(*stage),
            PipelineError::Manifest(_) => None,
        }
    }
}

/// Where and how to run.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub exec: Exec,
}

/// Per-stage layout of the output directory.
#[derive(Debug, Clone)]
pub struct OutputLayout {
    pub root: PathBuf,
}

impl OutputLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn checkpoint(&self, model_id: &str) -> PathBuf {
        self.root
            .join("checkpoints")
            .join(format!("{model_id}.safetensors"))
    }

    pub fn behavior(&self, model_id: &str, ext: &str) -> PathBuf {
        self.root.join("behavior").join(format!("{model_id}.{ext}"))
    }

    pub fn probe(&self, model_id: &str, ext: &str) -> PathBuf {
        self.root.join("probe").join(format!("{model_id}.{ext}"))
    }

    pub fn table(&self, name: &str) -> PathBuf {
        self.root.join("tables").join(format!("{name}.csv"))
    }

    pub fn comparison(&self, file: &str) -> PathBuf {
        self.root.join("comparisons").join(file)
    }

    pub fn correlation(&self, file: &str) -> PathBuf {
        self.root.join("correlation").join(file)
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn failure_marker(&self) -> PathBuf {
        self.root.join(FAILURE_MARKER)
    }
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), String> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    }
    fs::write(path, contents).map_err(|e| format!("{}: {e}", path.display()))
}

pub(crate) fn read_file(path: &Path) -> Result<String, String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

/// Seed for training model `id` when its spec leaves the seed open.
fn derived_seed(run_seed: u64, id: &str) -> u64 {
    keyed_stream(SEED_DOMAIN, run_seed, id, 0).random()
}

impl RunManifest {
    /// Evaluated model ids: parents in manifest order, then merged models.
    pub fn model_ids(&self) -> Vec<String> {
        self.parents
            .iter()
            .map(|p| p.id.clone())
            .chain(self.recipes.iter().map(|r| r.name.clone()))
            .collect()
    }

    fn behavior_suites(&self) -> Result<Vec<BehaviorSuite>, String> {
        self.behavior_suites
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
                                data: t
                                    .data
                                    .load(&self.root)
                                    .map_err(|e| format!("{}/{}: {e}", s.suite_id, t.task_id))?,
                            })
                        })
                        .collect::<Result<_, String>>()?,
                })
            })
            .collect()
    }
}

struct Runner<'a> {
    manifest: &'a RunManifest,
    layout: OutputLayout,
    exec: Exec,
}

impl Runner<'_> {
    fn load(&self, model_id: &str) -> Result<Checkpoint, String> {
        load_checkpoint(self.layout.checkpoint(model_id)).map_err(|e| e.to_string())
    }

    fn save(&self, model_id: &str, c: &Checkpoint) -> Result<(), String> {
        let path = self.layout.checkpoint(model_id);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
        }
        save_checkpoint(c, path).map_err(|e| e.to_string())
    }

    fn materialize(
        &self,
        id: &str,
        source: &ModelSource,
        base: Option<&Checkpoint>,
    ) -> Result<Checkpoint, String> {
        let m = self.manifest;
        let arch = &m.architecture;
        let config = |t: &TrainSpec| TrainConfig {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            seed: t.seed.unwrap_or_else(|| derived_seed(m.seed, id)),
        };
        let model = match (&source.path, &source.train, &source.finetune) {
            (Some(p), _, _) => load_checkpoint(m.resolve(p)).map_err(|e| e.to_string())?,
            (_, Some(t), _) => {
                let data = t.data.load(&m.root).map_err(|e| e.to_string())?;
                train_toy_model(arch, &data, &config(t), self.exec).map_err(|e| e.to_string())?
            }
            (_, _, Some(t)) => {
                let base = base.ok_or("fine-tuning needs a base")?;
                let data = t.data.load(&m.root).map_err(|e| e.to_string())?;
                finetune(base, arch, &data, &config(t), self.exec)
                    .map_err(|e| e.to_string())?
                    .checkpoint
            }
            _ => return Err(format!("`{id}` has no source")),
        };
        arch.check(&model).map_err(|e| format!("`{id}`: {e}"))?;
        Ok(model)
    }

    fn parents(&self) -> Result<(), String> {
        let m = self.manifest;
        let base = match &m.base {
            Some(src) => {
                let b = self.materialize(BASE_ID, src, None)?;
                self.save(BASE_ID, &b)?;
                Some(b)
            }
            None => None,
        };
        for p in &m.parents {
            let model = self.materialize(&p.id, &p.source(), base.as_ref())?;
            self.save(&p.id, &model)?;
            log::info!("parent `{}` ready", p.id);
        }
        Ok(())
    }

    fn resolve_ref(&self, r: &str) -> Result<Checkpoint, String> {
        let m = self.manifest;
        if r == BASE_ID || m.parents.iter().any(|p| p.id == r) {
            self.load(r)
        } else {
            load_checkpoint(m.resolve(Path::new(r))).map_err(|e| e.to_string())
        }
    }

    fn merge(&self) -> Result<(), String> {
        let m = self.manifest;
        for (i, r) in m.recipes.iter().enumerate() {
            let plan = m.plan(i).map_err(|e| e.to_string())?;
            let parents = r
                .recipe
                .parents
                .iter()
                .map(|p| self.resolve_ref(p))
                .collect::<Result<Vec<_>, _>>()?;
            let refs: Vec<&Checkpoint> = parents.iter().collect();
            let base = r
                .recipe
                .base
                .as_deref()
                .map(|b| self.resolve_ref(b))
                .transpose()?;
            let merged = plan
                .execute(&refs, base.as_ref(), self.exec)
                .map_err(|e| format!("recipe `{}`: {e}", r.name))?;
            self.save(&r.name, &merged)?;
            log::info!("merged `{}` ({})", r.name, plan.method());
        }
        Ok(())
    }

    fn behavior(&self) -> Result<(), String> {
        let m = self.manifest;
        let suites = m.behavior_suites()?;
        for id in m.model_ids() {
            let model = self.load(&id)?;
            let report = evaluate_behavior(&id, &model, &m.architecture, &suites, self.exec)
                .map_err(|e| format!("model `{id}`: {e}"))?;
            write_file(&self.layout.behavior(&id, "json"), report.to_json())?;
            write_file(&self.layout.behavior(&id, "csv"), report.to_csv())?;
        }
        Ok(())
    }

    fn probe(&self) -> Result<(), String> {
        let m = self.manifest;
        let tasks = m.load_probe_tasks()?;
        for id in m.model_ids() {
            let model = self.load(&id)?;
            let report = run_probe_suite(
                &id,
                &model,
                &m.architecture,
                &tasks,
                &m.probe_config,
                self.exec,
            )
            .map_err(|e| format!("model `{id}`: {e}"))?;
            write_file(&self.layout.probe(&id, "json"), report.to_json())?;
            write_file(&self.layout.probe(&id, "csv"), report.to_csv())?;
        }
        Ok(())
    }

    fn run(&self, stage: Stage) -> Result<(), String> {
        match stage {
            Stage::Parents => self.parents(),
            Stage::Merge => self.merge(),
            Stage::Behavior => self.behavior(),
            Stage::Probe => self.probe(),
            Stage::Compare => report::write_comparisons(self.manifest, &self.layout),
            Stage::Correlate => report::write_correlations(self.manifest, &self.layout),
        }
    }
}

fn fail(layout: &OutputLayout, stage: Stage, message: String) -> PipelineError {
    let marker = format!("stage={stage}\nerror={message}\n");
    if let Err(e) = write_file(&layout.failure_marker(), marker) {
        log::error!("could not write failure marker: {e}");
    }
    PipelineError::Stage { stage, message }
}

fn clear_marker(layout: &OutputLayout) -> Result<(), String> {
    match fs::remove_file(layout.failure_marker()) {
        Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e.to_string()),
        _ => Ok(()),
    }
}

/// Runs one stage; its inputs must already be on disk.
pub fn run_stage(
    manifest: &RunManifest,
    options: &RunOptions,
    stage: Stage,
) -> Result<StageTiming, PipelineError> {
    let runner = Runner {
        manifest,
        layout: OutputLayout::new(&options.out_dir),
        exec: options.exec,
    };
    clear_marker(&runner.layout).map_err(|e| fail(&runner.layout, stage, e))?;
    let start = Instant::now();
    runner
        .run(stage)
        .map_err(|e| fail(&runner.layout, stage, e))?;
    let timing = StageTiming {
        stage,
        seconds: start.elapsed().as_secs_f64(),
    };
    log::info!("stage {stage} done in {:.3}s", timing.seconds);
    Ok(timing)
}

/// Runs every stage in order and returns the assembled report, which is
/// also written to `report.json`.
pub fn run_pipeline(
    manifest: &RunManifest,
    options: &RunOptions,
) -> Result<PipelineReport, PipelineError> {
    let mut timings = Vec::new();
    for stage in Stage::ALL {
        timings.push(run_stage(manifest, options, stage)?);
    }
    let layout = OutputLayout::new(&options.out_dir);
    let mut report =
        assemble_report(manifest, &layout).map_err(|e| fail(&layout, Stage::Correlate, e))?;
    report.provenance.stage_timings = timings;
    Ok(report)
}
