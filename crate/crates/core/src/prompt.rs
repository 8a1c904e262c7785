//! Message assembly for the six prompting strategies, plus the multi-call
//! executions (prompt graph, self-consistency).

use std::collections::HashMap;
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chat::{ChatBackend, ChatError, CompletionResult, Message};
use crate::config::{topo_order, ConfigError, ExampleSpec, FieldKind, FieldSpec, FieldValue, SamplingParams, TaskSpec};
use crate::embedding::Embedder;
use crate::metrics::{value_similarity, MetricError};
use crate::parser::{parse_response, render_fenced, ParsedRecord, RecordFlags};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    ZeroShot,
    OneShot,
    FewShot,
    ChainOfThought,
    SelfConsistency,
    PromptGraph,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 6] = [
        StrategyKind::ZeroShot,
        StrategyKind::OneShot,
        StrategyKind::FewShot,
        StrategyKind::ChainOfThought,
        StrategyKind::SelfConsistency,
        StrategyKind::PromptGraph,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::ZeroShot => "zero_shot",
            StrategyKind::OneShot => "one_shot",
            StrategyKind::FewShot => "few_shot",
            StrategyKind::ChainOfThought => "chain_of_thought",
            StrategyKind::SelfConsistency => "self_consistency",
            StrategyKind::PromptGraph => "prompt_graph",
        }
    }

    pub fn parse(s: &str) -> Option<StrategyKind> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    /// Number of worked examples the strategy's prompt carries.
    pub fn n_examples(self) -> usize {
        match self {
            StrategyKind::ZeroShot => 0,
            StrategyKind::OneShot => 1,
            _ => 3,
        }
    }

    /// Reasoning strategies use the reasoning system/final prompt variants and
    /// show example reasoning before each example output.
    pub fn is_reasoning(self) -> bool {
        matches!(self, StrategyKind::ChainOfThought | StrategyKind::SelfConsistency | StrategyKind::PromptGraph)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    pub n_examples: usize,
    pub k_samples: usize,
    pub temperature_delta: f64,
}

pub const DEFAULT_K_SAMPLES: usize = 3;
pub const DEFAULT_TEMPERATURE_DELTA: f64 = 0.1;

impl StrategySpec {
    pub fn new(kind: StrategyKind) -> Self {
        StrategySpec {
            kind,
            n_examples: kind.n_examples(),
            k_samples: DEFAULT_K_SAMPLES,
            temperature_delta: DEFAULT_TEMPERATURE_DELTA,
        }
    }

    pub fn with_samples(mut self, k: usize) -> Self {
        self.k_samples = k;
        self
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.n_examples != self.kind.n_examples() {
            return Err(EngineError::InvalidStrategy(format!(
                "{} uses {} examples, not {}",
                self.kind,
                self.kind.n_examples(),
                self.n_examples
            )));
        }
        if self.kind == StrategyKind::SelfConsistency && (self.k_samples < 3 || self.k_samples.is_multiple_of(2)) {
            return Err(EngineError::InvalidStrategy(format!("k_samples must be odd and >= 3, got {}", self.k_samples)));
        }
        if !(self.temperature_delta >= 0.0 && self.temperature_delta.is_finite()) {
            return Err(EngineError::InvalidStrategy("temperature_delta must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("missing prompt section: {0}")]
    MissingPromptSection(String),
    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Chat(#[from] ChatError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub id: String,
    pub text: String,
}

impl Report {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Report { id: id.into(), text: text.into() }
    }
}

pub const DEFAULT_EXAMPLE_INTRO: &str = "Below are {n} example of expected input and output, followed by a new task.";

fn json(value: &impl Serialize) -> String {
    serde_json::to_string(value).expect("prompt values serialize")
}

/// Numbered per-field instructions: type, description, options and default.
pub fn field_instructions(fields: &[FieldSpec]) -> String {
    let mut out = String::new();
    for (i, f) in fields.iter().enumerate() {
        out.push_str(&format!("{}. {}:\n- Type: {}\n", i + 1, json(&f.name), f.kind.prompt_label()));
        if !f.description.trim().is_empty() {
            out.push_str(&format!("- {}\n", f.description.trim()));
        }
        if f.kind.has_options() {
            out.push_str(&format!("- Options: {}\n", json(&f.options)));
        }
        out.push_str(&format!("- Default: {}\n", json(&f.default)));
    }
    out.trim_end().to_string()
}

/// The empty output structure shown to the model.
pub fn json_skeleton(fields: &[FieldSpec]) -> String {
    let placeholders: IndexMap<String, FieldValue> = fields.iter().map(|f| (f.name.clone(), f.placeholder())).collect();
    render_fenced(&placeholders)
}

fn render_report(template: &str, id: &str, text: &str) -> String {
    template.replace("{report_id}", id).replace("{report}", text)
}

fn render_reasoning(fields: &[FieldSpec], ex: &ExampleSpec) -> String {
    let mut lines: Vec<&crate::config::ReasoningLine> = ex.reasoning.iter().collect();
    lines.sort_by_key(|l| fields.iter().position(|f| f.name == l.field).unwrap_or(usize::MAX));
    lines.iter().map(|l| format!("- {} - {}", l.field, l.rationale)).collect::<Vec<_>>().join("\n")
}

fn example_output(fields: &[FieldSpec], ex: &ExampleSpec) -> Result<String, EngineError> {
    let ordered = fields
        .iter()
        .map(|f| {
            ex.output
                .get(&f.name)
                .map(|v| (f.name.clone(), v.clone()))
                .ok_or_else(|| EngineError::MissingPromptSection(format!("example `{}` output for `{}`", ex.id, f.name)))
        })
        .collect::<Result<IndexMap<_, _>, _>>()?;
    Ok(render_fenced(&ordered))
}

fn require(text: &str, what: &str) -> Result<(), EngineError> {
    if text.trim().is_empty() {
        Err(EngineError::MissingPromptSection(what.to_string()))
    } else {
        Ok(())
    }
}

/// Assembles the message sequence for a single-call strategy. The report and
/// the final instructions share the last human message.
pub fn build_messages(
    task: &TaskSpec,
    strategy: &StrategySpec,
    report: &Report,
    examples: &[ExampleSpec],
) -> Result<Vec<Message>, EngineError> {
    if examples.len() != strategy.n_examples {
        return Err(EngineError::MissingPromptSection(format!(
            "{} needs {} example(s), got {}",
            strategy.kind,
            strategy.n_examples,
            examples.len()
        )));
    }
    let p = &task.prompts;
    let reasoning = strategy.kind.is_reasoning();
    let (system, fin) = if reasoning {
        (&p.system.reasoning, &p.final_instructions.reasoning)
    } else {
        (&p.system.plain, &p.final_instructions.plain)
    };
    require(system, "system instructions")?;
    require(&p.task_instructions, "task instructions")?;
    require(fin, "final instructions")?;
    if task.fields.is_empty() {
        return Err(EngineError::MissingPromptSection("field instructions".into()));
    }

    let mut msgs = vec![
        Message::system(system.trim()),
        Message::human(field_instructions(&task.fields)),
        Message::human(format!("{}\n{}", p.task_instructions.trim(), json_skeleton(&task.fields))),
    ];
    if !examples.is_empty() {
        let intro = p.example_intro.as_deref().unwrap_or(DEFAULT_EXAMPLE_INTRO);
        msgs.push(Message::human(intro.replace("{n}", &examples.len().to_string())));
        for ex in examples {
            msgs.push(Message::human(render_report(&p.report_template, &ex.id, &ex.report)));
            if reasoning {
                if ex.reasoning.is_empty() {
                    return Err(EngineError::MissingPromptSection(format!("reasoning for example `{}`", ex.id)));
                }
                msgs.push(Message::assistant(render_reasoning(&task.fields, ex)));
            }
            msgs.push(Message::assistant(example_output(&task.fields, ex)?));
        }
    }
    msgs.push(Message::human(format!(
        "{}\n\n{}",
        render_report(&p.report_template, &report.id, &report.text),
        fin.trim()
    )));
    Ok(msgs)
}

/// One step of an execution: a chat call, or a graph node that was skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceTurn {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    /// Messages added to the conversation for this call.
    pub sent: Vec<Message>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion: Option<CompletionResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skip_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineOutput {
    pub record: ParsedRecord,
    pub turns: Vec<TraceTurn>,
    /// Individual parses when several samples were drawn.
    pub samples: Vec<ParsedRecord>,
}

fn single_call(
    task: &TaskSpec,
    strategy: &StrategySpec,
    report: &Report,
    examples: &[ExampleSpec],
    chat: &dyn ChatBackend,
    sampling: &SamplingParams,
) -> Result<EngineOutput, EngineError> {
    let msgs = build_messages(task, strategy, report, examples)?;
    let completion = chat.chat(&msgs, sampling)?;
    let record = parse_response(&completion.text, &task.fields, &task.missing_token);
    Ok(EngineOutput {
        record,
        turns: vec![TraceTurn {
            node: None,
            sample: None,
            temperature: Some(sampling.temperature),
            sent: msgs,
            completion: Some(completion),
            skip_reason: None,
        }],
        samples: Vec::new(),
    })
}

fn project_example(ex: &ExampleSpec, names: &[String]) -> ExampleSpec {
    let mut ex = ex.clone();
    ex.output.retain(|k, _| names.contains(k));
    ex.reasoning.retain(|r| names.contains(&r.field));
    ex
}

/// Prompt for a graph node after the first: its instruction, field
/// instructions and skeleton, asked within the running conversation.
fn node_prompt(task: &TaskSpec, instruction: &str, fields: &[FieldSpec]) -> String {
    let mut parts = Vec::new();
    if !instruction.trim().is_empty() {
        parts.push(instruction.trim().to_string());
    }
    parts.push(field_instructions(fields));
    parts.push(format!("{}\n{}", task.prompts.task_instructions.trim(), json_skeleton(fields)));
    parts.push(task.prompts.final_instructions.reasoning.trim().to_string());
    parts.join("\n\n")
}

/// Runs the task's prompt graph over one growing conversation. Nodes whose
/// condition fails on earlier answers are skipped and their fields defaulted.
pub fn run_graph(
    task: &TaskSpec,
    strategy: &StrategySpec,
    report: &Report,
    examples: &[ExampleSpec],
    chat: &dyn ChatBackend,
    sampling: &SamplingParams,
) -> Result<EngineOutput, EngineError> {
    let graph = task.graph.as_ref().ok_or_else(|| EngineError::MissingPromptSection("graph".into()))?;
    let order = topo_order(graph)?;
    let mut conversation: Vec<Message> = Vec::new();
    let mut values: HashMap<String, FieldValue> = HashMap::new();
    let mut flags = RecordFlags::default();
    let mut turns = Vec::with_capacity(order.len());

    for node in order {
        let node_fields: Vec<FieldSpec> = task.fields.iter().filter(|f| node.fields.contains(&f.name)).cloned().collect();
        if let Some(cond) = &node.condition {
            let source = values.get(&cond.field).cloned().unwrap_or_else(|| FieldValue::text(""));
            if !cond.holds(&source) {
                for f in &node_fields {
                    values.insert(f.name.clone(), f.default.clone());
                    flags.skipped.push(f.name.clone());
                }
                turns.push(TraceTurn {
                    node: Some(node.id.clone()),
                    sample: None,
                    temperature: None,
                    sent: Vec::new(),
                    completion: None,
                    skip_reason: Some(format!("condition on `{}` not met (value {:?})", cond.field, source.to_string())),
                });
                continue;
            }
        }
        let sent = if conversation.is_empty() {
            let sub = task.restricted_to(&node.fields);
            let projected: Vec<ExampleSpec> = examples.iter().map(|e| project_example(e, &node.fields)).collect();
            let mut msgs = build_messages(&sub, strategy, report, &projected)?;
            if !node.instruction.trim().is_empty() {
                let last = msgs.last_mut().expect("sequence ends with the report");
                last.content = format!("{}\n\n{}", node.instruction.trim(), last.content);
            }
            msgs
        } else {
            vec![Message::human(node_prompt(task, &node.instruction, &node_fields))]
        };
        conversation.extend(sent.iter().cloned());
        let completion = chat.chat(&conversation, sampling)?;
        conversation.push(Message::assistant(completion.text.clone()));
        let parsed = parse_response(&completion.text, &node_fields, &task.missing_token);
        values.extend(parsed.values);
        flags.merge(parsed.flags);
        turns.push(TraceTurn {
            node: Some(node.id.clone()),
            sample: None,
            temperature: Some(sampling.temperature),
            sent,
            completion: Some(completion),
            skip_reason: None,
        });
    }

    let ordered = task
        .fields
        .iter()
        .map(|f| (f.name.clone(), values.remove(&f.name).unwrap_or_else(|| f.default.clone())))
        .collect();
    Ok(EngineOutput { record: ParsedRecord { values: ordered, flags }, turns, samples: Vec::new() })
}

/// `k` temperatures spread evenly over `[t - delta, t + delta]`, floored at 0.
pub fn sample_temperatures(t: f64, delta: f64, k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![t];
    }
    (0..k)
        .map(|i| {
            let offset = 2.0 * i as f64 / (k - 1) as f64 - 1.0;
            (t + delta * offset).max(0.0)
        })
        .collect()
}

fn flag_field(from: &RecordFlags, into: &mut RecordFlags, name: &str) {
    for (src, dst) in [
        (&from.defaults_applied, &mut into.defaults_applied),
        (&from.coercions, &mut into.coercions),
        (&from.invalid, &mut into.invalid),
    ] {
        if src.iter().any(|n| n == name) {
            dst.push(name.to_string());
        }
    }
}

/// Index of the value with the highest total similarity to the others; ties go to the lowest index.
pub fn medoid(field: &FieldSpec, values: &[&FieldValue], embedder: &dyn Embedder) -> Result<usize, MetricError> {
    let n = values.len();
    let mut sim = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s = value_similarity(field, values[i], values[j], embedder)?;
            sim[i][j] = s;
            sim[j][i] = s;
        }
    }
    let totals: Vec<f64> = sim.iter().map(|row| row.iter().sum()).collect();
    let mut best = 0;
    for i in 1..n {
        if totals[i] > totals[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Index of the strict-majority value, if one exists.
fn majority(values: &[&FieldValue]) -> Option<usize> {
    let mut counts: IndexMap<String, (usize, usize)> = IndexMap::new();
    for (i, v) in values.iter().enumerate() {
        counts.entry(v.to_string()).or_insert((i, 0)).1 += 1;
    }
    counts.values().find(|(_, c)| 2 * c > values.len()).map(|(first, _)| *first)
}

/// Field-wise aggregation of several parses: strict majority for discrete
/// kinds, otherwise the embedding medoid.
pub fn aggregate_samples(task: &TaskSpec, samples: &[ParsedRecord], embedder: &dyn Embedder) -> Result<ParsedRecord, MetricError> {
    let parsed: Vec<&ParsedRecord> = samples.iter().filter(|s| !s.flags.parse_failed).collect();
    if parsed.is_empty() {
        return Ok(ParsedRecord::defaults(&task.fields, true));
    }
    let mut values = IndexMap::with_capacity(task.fields.len());
    let mut flags = RecordFlags::default();
    for field in &task.fields {
        let candidates: Vec<&FieldValue> = parsed.iter().map(|s| &s.values[&field.name]).collect();
        let discrete = !matches!(field.kind, FieldKind::FreeText | FieldKind::List);
        let winner = match discrete.then(|| majority(&candidates)).flatten() {
            Some(i) => i,
            None => medoid(field, &candidates, embedder)?,
        };
        values.insert(field.name.clone(), candidates[winner].clone());
        flag_field(&parsed[winner].flags, &mut flags, &field.name);
        flags.repaired |= parsed[winner].flags.repaired;
    }
    Ok(ParsedRecord { values, flags })
}

/// Draws `k` reasoning samples at jittered temperatures (concurrently) and aggregates them.
pub fn run_self_consistency(
    task: &TaskSpec,
    strategy: &StrategySpec,
    report: &Report,
    examples: &[ExampleSpec],
    chat: &dyn ChatBackend,
    sampling: &SamplingParams,
    embedder: &dyn Embedder,
) -> Result<EngineOutput, EngineError> {
    strategy.validate()?;
    let msgs = build_messages(task, strategy, report, examples)?;
    let temps = sample_temperatures(sampling.temperature, strategy.temperature_delta, strategy.k_samples);
    let results: Vec<Result<CompletionResult, ChatError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = temps
            .iter()
            .map(|&t| {
                let params = sampling.with_temperature(t);
                let msgs = &msgs;
                scope.spawn(move || chat.chat(msgs, &params))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sample thread panicked")).collect()
    });

    let mut turns = Vec::with_capacity(temps.len());
    let mut samples = Vec::with_capacity(temps.len());
    let mut last_err = None;
    for (i, (result, &t)) in results.into_iter().zip(&temps).enumerate() {
        match result {
            Ok(c) => {
                samples.push(parse_response(&c.text, &task.fields, &task.missing_token));
                turns.push(TraceTurn {
                    node: None,
                    sample: Some(i),
                    temperature: Some(t),
                    sent: msgs.clone(),
                    completion: Some(c),
                    skip_reason: None,
                });
            }
            Err(e) => {
                samples.push(ParsedRecord::defaults(&task.fields, true));
                last_err = Some(e);
            }
        }
    }
    if turns.is_empty() {
        return Err(last_err.expect("at least one sample was requested").into());
    }
    let record = aggregate_samples(task, &samples, embedder)?;
    Ok(EngineOutput { record, turns, samples })
}

/// Executes one strategy for one report.
pub fn run_strategy(
    task: &TaskSpec,
    strategy: &StrategySpec,
    report: &Report,
    examples: &[ExampleSpec],
    chat: &dyn ChatBackend,
    sampling: &SamplingParams,
    embedder: &dyn Embedder,
) -> Result<EngineOutput, EngineError> {
    strategy.validate()?;
    match strategy.kind {
        StrategyKind::SelfConsistency => run_self_consistency(task, strategy, report, examples, chat, sampling, embedder),
        StrategyKind::PromptGraph => run_graph(task, strategy, report, examples, chat, sampling),
        _ => single_call(task, strategy, report, examples, chat, sampling),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chat::{last_human, FnChat, Role};
    use crate::config::parse_task_config;
    use crate::embedding::HashedNgramEmbedder;

    const TASK: &str = r#"
schema_version: 1
task_id: crlm
missing_token: ""
fields:
  - name: "Was a hemihepatectomy performed?"
    kind: binary
    options: ["Yes", ""]
    default: ""
    description: Indicate "Yes" if a hemihepatectomy was performed, else "".
  - name: "Surgical resection margin (mm)"
    kind: numeric
    default: ""
prompts:
  system:
    plain: You are a medical data extraction system that ONLY outputs valid JSON.
    reasoning: You are a medical data extraction system that performs structured reasoning before producing output.
  task_instructions: "Extract information into this exact JSON structure:"
  final_instructions:
    plain: Begin the extraction now.
    reasoning: "Begin the extraction now. First, reason step-by-step, enclosed within <think>...</think> tags."
examples:
  - id: ex1
    report: Wedge resection, margin 1 cm.
    reasoning:
      - {field: "Surgical resection margin (mm)", rationale: "\"1 cm\" implies 10"}
      - {field: "Was a hemihepatectomy performed?", rationale: "only a wedge implies \"\""}
    output: {"Was a hemihepatectomy performed?": "", "Surgical resection margin (mm)": 10}
  - id: ex2
    report: Right hemihepatectomy.
    reasoning: [{field: "Was a hemihepatectomy performed?", rationale: "right hemihepatectomy implies \"Yes\""}]
    output: {"Was a hemihepatectomy performed?": "Yes", "Surgical resection margin (mm)": ""}
  - id: ex3
    report: Segment 7 resected, margin 2 mm.
    reasoning: [{field: "Surgical resection margin (mm)", rationale: "\"2 mm\" implies 2"}]
    output: {"Was a hemihepatectomy performed?": "", "Surgical resection margin (mm)": 2}
"#;

    fn task() -> TaskSpec {
        parse_task_config(TASK, "t").unwrap()
    }

    fn report() -> Report {
        Report::new("R001", "Liver resection of segment 4b. Margin 5 mm.")
    }

    #[test]
    fn zero_shot_layout() {
        let t = task();
        let msgs = build_messages(&t, &StrategySpec::new(StrategyKind::ZeroShot), &report(), &[]).unwrap();
        let roles: Vec<Role> = msgs.iter().map(|m| m.role).collect();
        assert_eq!(roles, [Role::System, Role::Human, Role::Human, Role::Human]);
        assert!(msgs[0].content.contains("ONLY outputs valid JSON"));
        assert!(msgs[1].content.starts_with("1. \"Was a hemihepatectomy performed?\":\n- Type: string"));
        assert!(msgs[1].content.contains("- Options: [\"Yes\",\"\"]"));
        assert!(msgs[1].content.contains("2. \"Surgical resection margin (mm)\":\n- Type: number"));
        assert!(last_human(&msgs).unwrap().contains(&report().text));
        assert!(last_human(&msgs).unwrap().starts_with("[file name]: R001\n"));
    }

    #[test]
    fn chain_of_thought_examples_carry_reasoning() {
        let t = task();
        let msgs = build_messages(&t, &StrategySpec::new(StrategyKind::ChainOfThought), &report(), &t.examples).unwrap();
        // system, fields, skeleton, intro, 3 x (user, reasoning, output), report
        assert_eq!(msgs.len(), 4 + 9 + 1);
        assert_eq!(msgs[3].content, "Below are 3 example of expected input and output, followed by a new task.");
        for k in 0..3 {
            let base = 4 + 3 * k;
            assert_eq!(msgs[base].role, Role::Human);
            assert_eq!(msgs[base + 1].role, Role::Assistant);
            assert!(msgs[base + 1].content.starts_with("- "));
            assert!(msgs[base + 2].content.starts_with("```json"));
        }
        // Reasoning lines follow field declaration order.
        assert!(msgs[5].content.starts_with("- Was a hemihepatectomy performed?"));
        assert!(msgs.last().unwrap().content.contains("<think>"));
    }

    #[test]
    fn few_shot_has_no_reasoning_turns() {
        let t = task();
        let msgs = build_messages(&t, &StrategySpec::new(StrategyKind::FewShot), &report(), &t.examples).unwrap();
        assert_eq!(msgs.len(), 4 + 6 + 1);
        assert!(!msgs[0].content.contains("structured reasoning"));
    }

    #[test]
    fn example_count_must_match() {
        let t = task();
        let err = build_messages(&t, &StrategySpec::new(StrategyKind::OneShot), &report(), &[]).unwrap_err();
        assert!(matches!(err, EngineError::MissingPromptSection(_)));
    }

    #[test]
    fn skeleton_appears_once() {
        let t = task();
        let skeleton = json_skeleton(&t.fields);
        for kind in [StrategyKind::ZeroShot, StrategyKind::FewShot, StrategyKind::ChainOfThought] {
            let ex = &t.examples[..kind.n_examples()];
            let msgs = build_messages(&t, &StrategySpec::new(kind), &report(), ex).unwrap();
            let hits: usize = msgs.iter().map(|m| m.content.matches(&skeleton).count()).sum();
            assert_eq!(hits, 1, "{kind}");
        }
    }

    #[test]
    fn temperatures_spread_evenly() {
        assert_eq!(sample_temperatures(0.6, 0.1, 3), vec![0.6 - 0.1, 0.6, 0.6 + 0.1]);
        assert_eq!(sample_temperatures(0.0, 0.1, 3), vec![0.0, 0.0, 0.1]);
        let five = sample_temperatures(0.4, 0.1, 5);
        assert_eq!(five.len(), 5);
        assert_eq!(five[2], 0.4);
    }

    fn answer(hemi: &str, margin: &str) -> String {
        format!("<think>ok</think>```json\n{{\"Was a hemihepatectomy performed?\": \"{hemi}\", \"Surgical resection margin (mm)\": {margin}}}\n```")
    }

    #[test]
    fn self_consistency_majority() {
        let t = task();
        let chat = FnChat::new("m", |_: &[Message], p: &SamplingParams| {
            let hemi = if p.temperature > 0.65 { "" } else { "Yes" };
            Ok(answer(hemi, "5"))
        });
        let sampling = SamplingParams { temperature: 0.6, top_p: 0.95, top_k: 50 };
        let out = run_self_consistency(
            &t,
            &StrategySpec::new(StrategyKind::SelfConsistency),
            &report(),
            &t.examples,
            &chat,
            &sampling,
            &HashedNgramEmbedder::default(),
        )
        .unwrap();
        assert_eq!(out.turns.len(), 3);
        assert_eq!(out.record.values["Was a hemihepatectomy performed?"], FieldValue::text("Yes"));
        assert_eq!(out.record.values["Surgical resection margin (mm)"], FieldValue::Number(5.0));
    }

    #[test]
    fn unparseable_samples_give_flagged_defaults() {
        let t = task();
        let chat = FnChat::new("m", |_: &[Message], _: &SamplingParams| Ok("no json here".to_string()));
        let sampling = SamplingParams { temperature: 0.6, top_p: 0.95, top_k: 50 };
        let out = run_self_consistency(
            &t,
            &StrategySpec::new(StrategyKind::SelfConsistency),
            &report(),
            &t.examples,
            &chat,
            &sampling,
            &HashedNgramEmbedder::default(),
        )
        .unwrap();
        assert!(out.record.flags.parse_failed);
        assert_eq!(out.record.values["Surgical resection margin (mm)"], FieldValue::text(""));
    }

    #[test]
    fn medoid_brute_force() {
        let field = FieldSpec {
            name: "Site".into(),
            kind: FieldKind::Categorical,
            options: vec!["Upper extremity".into(), "Lower extremity".into(), "Trunk".into()],
            default: FieldValue::text(""),
            metric: None,
            description: String::new(),
            placeholder: None,
        };
        let e = HashedNgramEmbedder::default();
        let vals = [FieldValue::text("Upper extremity"), FieldValue::text("Lower extremity"), FieldValue::text("Trunk")];
        let refs: Vec<&FieldValue> = vals.iter().collect();
        // Oracle: full 3x3 similarity matrix, row sums without the diagonal.
        let mut best = (0, f64::MIN);
        for i in 0..3 {
            let total: f64 = (0..3)
                .filter(|&j| j != i)
                .map(|j| value_similarity(&field, &vals[i], &vals[j], &e).unwrap())
                .sum();
            if total > best.1 {
                best = (i, total);
            }
        }
        assert_eq!(medoid(&field, &refs, &e).unwrap(), best.0);
    }
}
