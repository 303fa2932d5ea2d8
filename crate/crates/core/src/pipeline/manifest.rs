use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::ManifestError;
use crate::analysis::Granularity;
use crate::merge::{MergePlan, MergeRecipe};
use crate::probe::{load_probe_tasks, ProbeConfig, ProbeTask};
use crate::toy::{generate, load_dataset, DataSpec, LabeledDataset, ModelError, ToyArchitecture};

/// Reference to a model inside a recipe that names the shared base.
pub const BASE_ID: &str = "base";

/// A dataset either read from disk or drawn from a generator spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DataSource {
    Path(PathBuf),
    Generated(DataSpec),
}

impl DataSource {
    pub fn load(&self, root: &Path) -> Result<LabeledDataset, ModelError> {
        match self {
            DataSource::Path(p) => load_dataset(root.join(p)),
            DataSource::Generated(spec) => generate(spec),
        }
    }
}

/// Full-batch training settings; `seed` defaults to one derived from the
/// run seed and the model id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub data: DataSource,
    pub epochs: usize,
    pub learning_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Exactly one source: an existing checkpoint, training from scratch, or
/// fine-tuning the base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune: Option<TrainSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParentSpec {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune: Option<TrainSpec>,
}

impl ParentSpec {
    pub fn source(&self) -> ModelSource {
        ModelSource {
            path: self.path.clone(),
            train: self.train.clone(),
            finetune: self.finetune.clone(),
        }
    }
}

/// A recipe plus the id of the model it produces, written as one flat
/// object: `{"name": .., "method": .., "parents": [..], ...}`. Parent and base
/// references are parent ids, `"base"`, or checkpoint paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Map<String, Value>", into = "Map<String, Value>")]
pub struct NamedRecipe {
    pub name: String,
    pub recipe: MergeRecipe,
}

impl TryFrom<Map<String, Value>> for NamedRecipe {
    type Error = String;

    fn try_from(mut map: Map<String, Value>) -> Result<Self, String> {
        let name = match map.remove("name") {
            Some(Value::String(s)) => s,
            Some(_) => return Err("`name` must be a string".into()),
            None => return Err("missing field `name`".into()),
        };
        let recipe = serde_json::from_value(Value::Object(map)).map_err(|e| e.to_string())?;
        Ok(Self { name, recipe })
    }
}

impl From<NamedRecipe> for Map<String, Value> {
    fn from(r: NamedRecipe) -> Self {
        let mut map = Map::new();
        map.insert("name".into(), Value::String(r.name));
        if let Value::Object(fields) = serde_json::to_value(r.recipe).expect("recipe serializes") {
            map.extend(fields);
        }
        map
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviorTaskSpec {
    pub task_id: String,
    pub data: DataSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviorSuiteSpec {
    pub suite_id: String,
    pub tasks: Vec<BehaviorTaskSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineProbeTask {
    pub task_id: String,
    pub phenomenon: String,
    pub train: DataSource,
    pub dev: DataSource,
    pub test: DataSource,
}

/// A probe task manifest file, or one task written inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProbeTaskSource {
    Manifest(PathBuf),
    Inline(Box<InlineProbeTask>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub architecture: ToyArchitecture,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<ModelSource>,
    pub parents: Vec<ParentSpec>,
    /// The two parents merged models are categorized against; defaults to
    /// the first two parents.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare: Option<[String; 2]>,
    #[serde(default)]
    pub recipes: Vec<NamedRecipe>,
    pub behavior_suites: Vec<BehaviorSuiteSpec>,
    pub probe_tasks: Vec<ProbeTaskSource>,
    #[serde(default)]
    pub probe_config: ProbeConfig,
    /// Tolerance for the Better/Worse boundaries.
    #[serde(default)]
    pub epsilon: f64,
    /// Correlate phenomenon and suite means, or individual tasks.
    #[serde(default)]
    pub correlation_granularity: Granularity,
    /// Directory that relative paths resolve against.
    #[serde(skip)]
    pub root: PathBuf,
}

fn err(field: impl Into<String>, reason: impl Into<String>) -> ManifestError {
    ManifestError::new(field, reason)
}

fn check_id(field: &str, id: &str) -> Result<(), ManifestError> {
    if id.is_empty()
        || !id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || "_-.".contains(c))
        || id.starts_with('.')
    {
        return Err(err(
            field,
            format!("`{id}` must be non-empty and use only [A-Za-z0-9_.-]"),
        ));
    }
    Ok(())
}

impl RunManifest {
    /// Parses and validates `text`; relative paths resolve against `root`.
    pub fn from_json(text: &str, root: impl Into<PathBuf>) -> Result<Self, ManifestError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut m: RunManifest = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            err(
                if path == "." { String::new() } else { path },
                e.into_inner().to_string(),
            )
        })?;
        m.root = root.into();
        m.validate()?;
        Ok(m)
    }

    /// Canonical JSON (fixed field order), used for hashing.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    pub fn parent_ids(&self) -> Vec<&str> {
        self.parents.iter().map(|p| p.id.as_str()).collect()
    }

    /// The two parents merged models are compared against, if there are any.
    pub fn comparison_pair(&self) -> Option<(&str, &str)> {
        match &self.compare {
            Some([a, b]) => Some((a, b)),
            None if self.parents.len() >= 2 => Some((&self.parents[0].id, &self.parents[1].id)),
            None => None,
        }
    }

    /// Validated plan for recipe `i`. DARE-TIES without an explicit seed
    /// uses the run seed.
    pub fn plan(&self, i: usize) -> Result<MergePlan, ManifestError> {
        let mut recipe = self.recipes[i].recipe.clone();
        if recipe.method == crate::merge::MergeMethod::DareTies && recipe.seed.is_none() {
            recipe.seed = Some(self.seed);
        }
        recipe
            .validate()
            .map_err(|e| err(format!("recipes[{i}].{}", e.field), e.reason))
    }

    /// Loads every probe task, inline or from task manifests, in order.
    pub fn load_probe_tasks(&self) -> Result<Vec<ProbeTask>, String> {
        let mut out = Vec::new();
        for src in &self.probe_tasks {
            match src {
                ProbeTaskSource::Manifest(p) => {
                    out.extend(load_probe_tasks(self.resolve(p)).map_err(|e| e.to_string())?)
                }
                ProbeTaskSource::Inline(t) => {
                    let load = |d: &DataSource| {
                        d.load(&self.root)
                            .map_err(|e| format!("task `{}`: {e}", t.task_id))
                    };
                    out.push(ProbeTask {
                        task_id: t.task_id.clone(),
                        phenomenon: t.phenomenon.clone(),
                        train: load(&t.train)?,
                        dev: load(&t.dev)?,
                        test: load(&t.test)?,
                    });
                }
            }
        }
        Ok(out)
    }

    fn check_path(&self, field: &str, p: &Path) -> Result<(), ManifestError> {
        if self.resolve(p).is_file() {
            Ok(())
        } else {
            Err(err(field, format!("no such file: {}", p.display())))
        }
    }

    fn check_data(&self, field: &str, d: &DataSource) -> Result<(), ManifestError> {
        let arch = &self.architecture;
        match d {
            DataSource::Path(p) => self.check_path(field, p),
            DataSource::Generated(spec) if spec.dim() != arch.input_dim => Err(err(
                field,
                format!(
                    "generator dim {} != architecture input_dim {}",
                    spec.dim(),
                    arch.input_dim
                ),
            )),
            DataSource::Generated(_) => Ok(()),
        }
    }

    fn check_train(&self, field: &str, t: &TrainSpec) -> Result<(), ManifestError> {
        self.check_data(&format!("{field}.data"), &t.data)?;
        if t.epochs == 0 {
            return Err(err(format!("{field}.epochs"), "must be at least 1"));
        }
        if !(t.learning_rate.is_finite() && t.learning_rate > 0.0) {
            return Err(err(
                format!("{field}.learning_rate"),
                "must be finite and > 0",
            ));
        }
        Ok(())
    }

    fn check_source(
        &self,
        field: &str,
        s: &ModelSource,
        is_base: bool,
    ) -> Result<(), ManifestError> {
        match (&s.path, &s.train, &s.finetune) {
            (Some(p), None, None) => self.check_path(&format!("{field}.path"), p),
            (None, Some(t), None) => self.check_train(&format!("{field}.train"), t),
            (None, None, Some(_)) if is_base => Err(err(
                format!("{field}.finetune"),
                "the base cannot be fine-tuned",
            )),
            (None, None, Some(_)) if self.base.is_none() => {
                Err(err(format!("{field}.finetune"), "fine-tuning needs a base"))
            }
            (None, None, Some(t)) => self.check_train(&format!("{field}.finetune"), t),
            _ => Err(err(
                field,
                "exactly one of `path`, `train`, `finetune` is required",
            )),
        }
    }

    fn check_model_ref(&self, field: &str, r: &str) -> Result<(), ManifestError> {
        if r == BASE_ID {
            return match self.base {
                Some(_) => Ok(()),
                None => Err(err(field, "refers to `base` but the manifest has none")),
            };
        }
        if self.parents.iter().any(|p| p.id == r) {
            return Ok(());
        }
        self.check_path(field, Path::new(r)).map_err(|_| {
            err(
                field,
                format!("`{r}` is neither a parent id nor an existing checkpoint"),
            )
        })
    }

    fn validate(&self) -> Result<(), ManifestError> {
        self.architecture
            .validate()
            .map_err(|e| err("architecture", e.to_string()))?;
        if let Some(b) = &self.base {
            self.check_source("base", b, true)?;
        }

        if self.parents.is_empty() {
            return Err(err("parents", "at least one parent is required"));
        }
        let mut ids = BTreeSet::new();
        for (i, p) in self.parents.iter().enumerate() {
            let f = format!("parents[{i}]");
            check_id(&format!("{f}.id"), &p.id)?;
            if p.id == BASE_ID || !ids.insert(p.id.as_str()) {
                return Err(err(
                    format!("{f}.id"),
                    format!("`{}` is reserved or already used", p.id),
                ));
            }
            self.check_source(&f, &p.source(), false)?;
        }

        if let Some([a, b]) = &self.compare {
            for (j, id) in [a, b].into_iter().enumerate() {
                if !ids.contains(id.as_str()) {
                    return Err(err(
                        format!("compare[{j}]"),
                        format!("`{id}` is not a parent id"),
                    ));
                }
            }
            if a == b {
                return Err(err("compare", "the two parents must differ"));
            }
        } else if !self.recipes.is_empty() && self.parents.len() < 2 {
            return Err(err(
                "compare",
                "merged models need two parents to compare against",
            ));
        }

        for (i, r) in self.recipes.iter().enumerate() {
            let f = format!("recipes[{i}]");
            check_id(&format!("{f}.name"), &r.name)?;
            if r.name == BASE_ID || !ids.insert(r.name.as_str()) {
                return Err(err(
                    format!("{f}.name"),
                    format!("`{}` is reserved or already used", r.name),
                ));
            }
            self.plan(i)?;
            for (j, p) in r.recipe.parents.iter().enumerate() {
                self.check_model_ref(&format!("{f}.parents[{j}]"), p)?;
            }
            if let Some(b) = &r.recipe.base {
                self.check_model_ref(&format!("{f}.base"), b)?;
            }
        }

        if self.behavior_suites.is_empty() {
            return Err(err("behavior_suites", "at least one suite is required"));
        }
        let mut suites = BTreeSet::new();
        for (i, s) in self.behavior_suites.iter().enumerate() {
            let f = format!("behavior_suites[{i}]");
            check_id(&format!("{f}.suite_id"), &s.suite_id)?;
            if !suites.insert(s.suite_id.as_str()) {
                return Err(err(
                    format!("{f}.suite_id"),
                    format!("duplicate suite `{}`", s.suite_id),
                ));
            }
            if s.tasks.is_empty() {
                return Err(err(format!("{f}.tasks"), "at least one task is required"));
            }
            let mut tasks = BTreeSet::new();
            for (j, t) in s.tasks.iter().enumerate() {
                check_id(&format!("{f}.tasks[{j}].task_id"), &t.task_id)?;
                if !tasks.insert(t.task_id.as_str()) {
                    return Err(err(
                        format!("{f}.tasks[{j}].task_id"),
                        format!("duplicate task `{}`", t.task_id),
                    ));
                }
                self.check_data(&format!("{f}.tasks[{j}].data"), &t.data)?;
            }
        }

        if self.probe_tasks.is_empty() {
            return Err(err("probe_tasks", "at least one probe task is required"));
        }
        for (i, t) in self.probe_tasks.iter().enumerate() {
            let f = format!("probe_tasks[{i}]");
            match t {
                ProbeTaskSource::Manifest(p) => self.check_path(&f, p)?,
                ProbeTaskSource::Inline(t) => {
                    check_id(&format!("{f}.task_id"), &t.task_id)?;
                    for (split, d) in [("train", &t.train), ("dev", &t.dev), ("test", &t.test)] {
                        self.check_data(&format!("{f}.{split}"), d)?;
                    }
                }
            }
        }
        self.probe_config
            .validate()
            .map_err(|e| err("probe_config", e.to_string()))?;
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(err("epsilon", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Reads, parses and cross-checks a run manifest.
pub fn validate_manifest(path: impl AsRef<Path>) -> Result<RunManifest, ManifestError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| err("", format!("{}: {e}", path.display())))?;
    RunManifest::from_json(&text, path.parent().unwrap_or(Path::new(".")))
}
