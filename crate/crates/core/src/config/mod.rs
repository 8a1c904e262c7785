//! Task, graph and model-registry configuration.
//!
//! All documents are YAML (JSON is accepted too, being a YAML subset) and carry a
//! `schema_version` key. The full key reference lives in `docs/config-schema.md`.
//! Loading is two-staged: the text is first parsed into a generic YAML tree so
//! syntax problems surface as [`ConfigError::Parse`]; the tree is then mapped onto
//! the typed structs, and any missing/unknown key or invariant violation becomes a
//! [`ConfigError::Schema`] carrying the offending key path.

mod graph;
mod model;

pub use graph::{topo_order, Condition, GraphEdge, GraphNode, GraphSpec, Predicate};
pub use model::{ModelRegistry, ModelSpec, RequestLimits, SamplingParams, SizeClass};

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Version written into, and required from, every config document.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in `{path}`: {message}")]
    Parse { path: String, message: String },
    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("dependency cycle between graph nodes: {}", .0.join(" -> "))]
    Cycle(Vec<String>),
    #[error("requested {requested} examples but the pool holds only {available}")]
    InsufficientExamples { requested: usize, available: usize },
}

impl ConfigError {
    pub(crate) fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Schema {
            path: path.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Categorical,
    Binary,
    Numeric,
    FreeText,
    List,
    ExactString,
}

impl FieldKind {
    /// The metric each variable type is scored with.
    pub fn default_metric(self) -> MetricKind {
        match self {
            FieldKind::Categorical | FieldKind::Binary => MetricKind::BalancedAccuracy,
            FieldKind::Numeric => MetricKind::Accuracy,
            FieldKind::FreeText => MetricKind::CosineSimilarity,
            FieldKind::List => MetricKind::SymmetricSimilarity,
            FieldKind::ExactString => MetricKind::ExactMatch,
        }
    }

    /// Type label shown to the model in the field instructions.
    pub fn prompt_label(self) -> &'static str {
        match self {
            FieldKind::Categorical | FieldKind::Binary | FieldKind::FreeText => "string",
            FieldKind::Numeric => "number",
            FieldKind::List => "list",
            FieldKind::ExactString => "string_exact_match",
        }
    }

    pub fn has_options(self) -> bool {
        matches!(self, FieldKind::Categorical | FieldKind::Binary)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    BalancedAccuracy,
    Accuracy,
    CosineSimilarity,
    SymmetricSimilarity,
    ExactMatch,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::BalancedAccuracy => "balanced_accuracy",
            MetricKind::Accuracy => "accuracy",
            MetricKind::CosineSimilarity => "cosine_similarity",
            MetricKind::SymmetricSimilarity => "symmetric_similarity",
            MetricKind::ExactMatch => "exact_match",
        }
    }

    /// Whether swapping reference and prediction can change the value.
    pub fn is_asymmetric(self) -> bool {
        matches!(self, MetricKind::BalancedAccuracy)
    }
}

/// A single extracted (or annotated) value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldValue {
    Number(f64),
    Text(String),
    List(Vec<String>),
}

impl FieldValue {
    pub fn text(s: impl Into<String>) -> Self {
        FieldValue::Text(s.into())
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            FieldValue::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[String]> {
        match self {
            FieldValue::List(items) => Some(items),
            _ => None,
        }
    }

    /// Numeric reading of the value: numbers directly, numeric strings parsed.
    pub fn as_number(&self) -> Option<f64> {
        match self {
            FieldValue::Number(x) => Some(*x),
            FieldValue::Text(s) => s.trim().parse::<f64>().ok().filter(|x| x.is_finite()),
            FieldValue::List(_) => None,
        }
    }
}

impl fmt::Display for FieldValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldValue::Number(x) => f.write_str(&format_number(*x)),
            FieldValue::Text(s) => f.write_str(s),
            FieldValue::List(items) => f.write_str(&items.join("; ")),
        }
    }
}

/// Integral values print without a fractional part ("10", not "10.0").
pub fn format_number(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

/// Schema for one extraction variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub options: Vec<String>,
    pub default: FieldValue,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<MetricKind>,
    #[serde(default)]
    pub description: String,
    /// Value shown for this field in the empty JSON skeleton; defaults to `[]`
    /// for lists and `""` otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placeholder: Option<FieldValue>,
}

impl FieldSpec {
    pub fn metric(&self) -> MetricKind {
        self.metric.unwrap_or_else(|| self.kind.default_metric())
    }

    pub fn placeholder(&self) -> FieldValue {
        self.placeholder.clone().unwrap_or_else(|| match self.kind {
            FieldKind::List => FieldValue::List(Vec::new()),
            _ => FieldValue::Text(String::new()),
        })
    }

    /// Checks that `value` is a canonical value for this field.
    pub fn check_value(&self, value: &FieldValue, missing_token: &str) -> Result<(), String> {
        match (self.kind, value) {
            (FieldKind::Categorical | FieldKind::Binary, FieldValue::Text(s)) => {
                if s == missing_token || self.options.iter().any(|o| o == s) {
                    Ok(())
                } else {
                    Err(format!("{s:?} is not one of the options {:?}", self.options))
                }
            }
            (FieldKind::Numeric, FieldValue::Number(x)) if x.is_finite() => Ok(()),
            (FieldKind::Numeric, FieldValue::Text(s)) if s == missing_token => Ok(()),
            (FieldKind::Numeric, _) => Err(format!(
                "numeric fields take a finite number or the missing token {missing_token:?}"
            )),
            (FieldKind::FreeText | FieldKind::ExactString, FieldValue::Text(_)) => Ok(()),
            (FieldKind::List, FieldValue::List(_)) => Ok(()),
            (kind, other) => Err(format!("value {other:?} does not fit a {kind:?} field")),
        }
    }

    fn validate(&self, path: &str, missing_token: &str) -> Result<(), ConfigError> {
        if self.name.trim().is_empty() {
            return Err(ConfigError::schema(format!("{path}.name"), "field name is empty"));
        }
        let expected = self.kind.default_metric();
        if let Some(metric) = self.metric {
            if metric != expected {
                return Err(ConfigError::schema(
                    format!("{path}.metric"),
                    format!(
                        "field `{}` of kind {:?} must use {:?}, not {:?}",
                        self.name, self.kind, expected, metric
                    ),
                ));
            }
        }
        if self.kind.has_options() {
            if self.options.is_empty() {
                return Err(ConfigError::schema(
                    format!("{path}.options"),
                    format!("field `{}` needs at least one option", self.name),
                ));
            }
            let mut seen = HashSet::new();
            for (j, opt) in self.options.iter().enumerate() {
                if !seen.insert(opt) {
                    return Err(ConfigError::schema(
                        format!("{path}.options[{j}]"),
                        format!("duplicate option {opt:?} in field `{}`", self.name),
                    ));
                }
            }
        } else if !self.options.is_empty() {
            return Err(ConfigError::schema(
                format!("{path}.options"),
                format!("options are only allowed on categorical/binary fields (`{}`)", self.name),
            ));
        }
        self.check_value(&self.default, missing_token)
            .map_err(|m| ConfigError::schema(format!("{path}.default"), format!("field `{}`: {m}", self.name)))
    }
}

/// One text/variant pair; plain prompting uses the first, reasoning strategies the second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptVariants {
    pub plain: String,
    pub reasoning: String,
}

fn default_report_template() -> String {
    "[file name]: {report_id}\n{report}".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSections {
    pub system: PromptVariants,
    /// Lead-in placed directly before the empty JSON skeleton.
    pub task_instructions: String,
    /// Introduces the worked examples; `{n}` is replaced by the example count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub example_intro: Option<String>,
    /// `{report_id}` and `{report}` are substituted.
    #[serde(default = "default_report_template")]
    pub report_template: String,
    pub final_instructions: PromptVariants,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReasoningLine {
    pub field: String,
    pub rationale: String,
}

/// A worked example for one/few-shot and reasoning prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExampleSpec {
    pub id: String,
    pub report: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reasoning: Vec<ReasoningLine>,
    pub output: IndexMap<String, FieldValue>,
}

fn default_missing_token() -> String {
    String::new()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub schema_version: u32,
    pub task_id: String,
    #[serde(default)]
    pub language: String,
    /// The single string meaning "not specified" for this task.
    #[serde(default = "default_missing_token")]
    pub missing_token: String,
    pub fields: Vec<FieldSpec>,
    pub prompts: PromptSections,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub examples: Vec<ExampleSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph: Option<GraphSpec>,
}

impl TaskSpec {
    pub fn field(&self, name: &str) -> Option<&FieldSpec> {
        self.fields.iter().find(|f| f.name == name)
    }

    pub fn field_names(&self) -> impl Iterator<Item = &str> {
        self.fields.iter().map(|f| f.name.as_str())
    }

    /// A copy of the task restricted to `names`, keeping declaration order.
    pub fn restricted_to(&self, names: &[String]) -> TaskSpec {
        let mut sub = self.clone();
        sub.fields.retain(|f| names.contains(&f.name));
        for ex in &mut sub.examples {
            ex.output.retain(|k, _| names.contains(k));
            ex.reasoning.retain(|r| names.contains(&r.field));
        }
        sub.graph = None;
        sub
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        check_schema_version(self.schema_version)?;
        if self.task_id.trim().is_empty() {
            return Err(ConfigError::schema("task_id", "task id is empty"));
        }
        if self.fields.is_empty() {
            return Err(ConfigError::schema("fields", "a task needs at least one field"));
        }
        let mut names = HashSet::new();
        for (i, field) in self.fields.iter().enumerate() {
            let path = format!("fields[{i}]");
            field.validate(&path, &self.missing_token)?;
            if !names.insert(field.name.as_str()) {
                return Err(ConfigError::schema(
                    format!("{path}.name"),
                    format!("duplicate field name `{}`", field.name),
                ));
            }
        }
        let p = &self.prompts;
        for (path, text) in [
            ("prompts.system.plain", &p.system.plain),
            ("prompts.system.reasoning", &p.system.reasoning),
            ("prompts.task_instructions", &p.task_instructions),
            ("prompts.final_instructions.plain", &p.final_instructions.plain),
            ("prompts.final_instructions.reasoning", &p.final_instructions.reasoning),
            ("prompts.report_template", &p.report_template),
        ] {
            if text.trim().is_empty() {
                return Err(ConfigError::schema(path, "prompt section is empty"));
            }
        }
        if !p.report_template.contains("{report}") {
            return Err(ConfigError::schema(
                "prompts.report_template",
                "template must contain the `{report}` placeholder",
            ));
        }
        let mut ids = HashSet::new();
        for (i, ex) in self.examples.iter().enumerate() {
            let path = format!("examples[{i}]");
            if !ids.insert(ex.id.as_str()) {
                return Err(ConfigError::schema(format!("{path}.id"), format!("duplicate example id `{}`", ex.id)));
            }
            self.validate_example(ex, &path)?;
        }
        if let Some(graph) = &self.graph {
            graph.validate(&self.fields, "graph")?;
        }
        Ok(())
    }

    fn validate_example(&self, ex: &ExampleSpec, path: &str) -> Result<(), ConfigError> {
        for key in ex.output.keys() {
            if self.field(key).is_none() {
                return Err(ConfigError::schema(
                    format!("{path}.output.{key}"),
                    format!("example `{}` names unknown field `{key}`", ex.id),
                ));
            }
        }
        for field in &self.fields {
            let value = ex.output.get(&field.name).ok_or_else(|| {
                ConfigError::schema(
                    format!("{path}.output"),
                    format!("example `{}` lacks field `{}`", ex.id, field.name),
                )
            })?;
            field.check_value(value, &self.missing_token).map_err(|m| {
                ConfigError::schema(format!("{path}.output.{}", field.name), format!("example `{}`: {m}", ex.id))
            })?;
        }
        for (j, line) in ex.reasoning.iter().enumerate() {
            if self.field(&line.field).is_none() {
                return Err(ConfigError::schema(
                    format!("{path}.reasoning[{j}].field"),
                    format!("unknown field `{}`", line.field),
                ));
            }
        }
        Ok(())
    }

    /// Fails if any example shares a report id with the evaluation corpus.
    pub fn check_disjoint<'a>(&self, corpus_ids: impl IntoIterator<Item = &'a str>) -> Result<(), ConfigError> {
        let pool: HashSet<&str> = self.examples.iter().map(|e| e.id.as_str()).collect();
        for id in corpus_ids {
            if pool.contains(id) {
                return Err(ConfigError::schema(
                    "examples",
                    format!("example `{id}` also appears in the evaluation corpus"),
                ));
            }
        }
        Ok(())
    }
}

pub(crate) fn check_schema_version(v: u32) -> Result<(), ConfigError> {
    if v != SCHEMA_VERSION {
        return Err(ConfigError::schema(
            "schema_version",
            format!("unsupported schema version {v}, expected {SCHEMA_VERSION}"),
        ));
    }
    Ok(())
}

/// Parses a YAML/JSON document into `T`, mapping errors onto key paths.
pub fn parse_document<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T, ConfigError> {
    let tree: serde_yaml::Value = serde_yaml::from_str(text).map_err(|e| ConfigError::Parse {
        path: origin.to_string(),
        message: e.to_string(),
    })?;
    serde_path_to_error::deserialize(tree).map_err(|e| {
        let path = e.path().to_string();
        ConfigError::Schema {
            path: if path == "." { "<root>".into() } else { path },
            message: e.into_inner().to_string(),
        }
    })
}

pub(crate) fn read_file(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn parse_task_config(text: &str, origin: &str) -> Result<TaskSpec, ConfigError> {
    let task: TaskSpec = parse_document(text, origin)?;
    task.validate()?;
    Ok(task)
}

/// Loads and validates a task configuration file.
pub fn load_task_config(path: impl AsRef<Path>) -> Result<TaskSpec, ConfigError> {
    let path = path.as_ref();
    parse_task_config(&read_file(path)?, &path.display().to_string())
}

pub fn to_yaml<T: Serialize>(doc: &T) -> String {
    serde_yaml::to_string(doc).expect("config types always serialize")
}

/// Draws `n` distinct examples with a seeded generator.
///
/// The draw is a partial Fisher-Yates shuffle over pool indices, so the result
/// depends only on the pool, `n` and `seed`.
pub fn select_examples(task: &TaskSpec, n: usize, seed: u64) -> Result<Vec<ExampleSpec>, ConfigError> {
    let pool = &task.examples;
    if n > pool.len() {
        return Err(ConfigError::InsufficientExamples {
            requested: n,
            available: pool.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    let (chosen, _) = idx.partial_shuffle(&mut rng, n);
    Ok(chosen.iter().map(|&i| pool[i].clone()).collect())
}
