//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any failure.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::time::Instant;

use clinex::records::{read_jsonl, RESULTS_FILE, TRACE_FILE};
use clinex::{run, ResultRow, RunOptions, TraceRow};
use clinex_core::analysis::{variance_partition, PerformanceCell};
use clinex_core::chat::FnChat;
use clinex_core::config::{select_examples, topo_order};
use clinex_core::embedding::cosine;
use clinex_core::metrics::{
    balanced_accuracy, bootstrap_mean_ci, inter_rater_agreement, list_pair_similarity, list_symmetric_similarity,
    macro_average, AnnotationSet,
};
use clinex_core::parser::parse_response;
use clinex_core::prompt::{aggregate_samples, run_graph, run_self_consistency};
use clinex_core::ranking::{anneal, AnnealSchedule, VoterProfile};
use clinex_core::{
    Embedder, FieldKind, FieldSpec, FieldValue, HashedNgramEmbedder, ParsedRecord, Report, SamplingParams,
    StrategyKind, StrategySpec,
};
use common::{corpus, embedder, mock, models, task};
use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("macro-average arithmetic", macro_arithmetic),
        ("kemeny oracle equivalence", kemeny_oracle),
        ("metric oracles", metric_oracles),
        ("bootstrap coverage", bootstrap_coverage),
        ("pipeline cross-product and cache determinism", pipeline_determinism),
        ("prompt-graph semantics", graph_semantics),
        ("self-consistency aggregation", self_consistency),
        ("parser robustness", parser_suite),
        ("variance partition", variance),
        ("inter-rater agreement", agreement),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} ({secs:.1}s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why} ({secs:.1}s)", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

// 1

fn macro_arithmetic() -> Outcome {
    let crlm = macro_average(&[0.95, 0.97, 0.73, 0.92]).map_err(|e| e.to_string())?;
    let liver = macro_average(&[0.93, 1.00, 0.69, 0.99, 0.97, 0.94, 0.98, 0.93, 0.96, 0.99, 1.00, 0.96, 1.00])
        .map_err(|e| e.to_string())?;
    check((crlm - 0.8925).abs() < 1e-12, format!("crlm {crlm}"))?;
    check((crlm - 0.89).abs() <= 0.005, format!("crlm {crlm} vs 0.89"))?;
    check((liver - 12.34 / 13.0).abs() < 1e-12, format!("liver {liver}"))?;
    check((liver - 0.95).abs() <= 0.005, format!("liver {liver} vs 0.95"))?;
    Ok(format!("crlm {crlm:.4}, liver tumours {liver:.4}"))
}

// 2

/// Disagreement counted directly from the definition: every voter, every
/// candidate pair ordered one way by the voter and the other by `order`.
fn oracle_score(order: &[usize], voters: &[Vec<usize>]) -> u64 {
    let pos = |r: &[usize], c: usize| r.iter().position(|&x| x == c).unwrap();
    let n = order.len();
    let mut total = 0;
    for v in voters {
        for a in 0..n {
            for b in 0..n {
                if a != b && pos(order, a) < pos(order, b) && pos(v, a) > pos(v, b) {
                    total += 1;
                }
            }
        }
    }
    total
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn oracle_minimum(n: usize, voters: &[Vec<usize>]) -> (u64, usize) {
    let scores: Vec<u64> = permutations(n).iter().map(|p| oracle_score(p, voters)).collect();
    let min = *scores.iter().min().unwrap();
    (min, scores.iter().filter(|&&s| s == min).count())
}

fn kemeny_oracle() -> Outcome {
    // A>B>C, B>C>A, C>A>B
    let cycle = vec![vec![0, 1, 2], vec![1, 2, 0], vec![2, 0, 1]];
    let (min, optima) = oracle_minimum(3, &cycle);
    check((min, optima) == (4, 3), format!("oracle gives min {min} with {optima} optima"))?;
    let profile = VoterProfile::from_indices(3, cycle).map_err(|e| e.to_string())?;
    let (_, got) = anneal(&profile, &AnnealSchedule::default());
    check(got == min, format!("annealing found {got} on the cycle"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(2025);
    let mut hits = 0;
    for case in 0..100u64 {
        let n = rng.gen_range(3..=8);
        let m = rng.gen_range(3..=10);
        let voters: Vec<Vec<usize>> = (0..m)
            .map(|_| {
                let mut v: Vec<usize> = (0..n).collect();
                v.shuffle(&mut rng);
                v
            })
            .collect();
        let (best, _) = oracle_minimum(n, &voters);
        let profile = VoterProfile::from_indices(n, voters.clone()).map_err(|e| e.to_string())?;
        let (order, score) = anneal(&profile, &AnnealSchedule { seed: case, ..AnnealSchedule::default() });
        check(score == oracle_score(&order, &voters), format!("case {case}: reported score disagrees with its order"))?;
        if score == best {
            hits += 1;
        }
    }
    check(hits == 100, format!("annealing matched the exhaustive minimum in {hits}/100 profiles"))?;
    Ok(format!("cycle minimum {min} with {optima} optimal orders; annealing optimal in {hits}/100 profiles"))
}

// 3

fn oracle_balanced_accuracy(pairs: &[(String, String)]) -> f64 {
    let labels: Vec<&String> = {
        let mut l: Vec<&String> = pairs.iter().flat_map(|(r, p)| [r, p]).collect();
        l.sort();
        l.dedup();
        l
    };
    let idx = |s: &String| labels.iter().position(|l| *l == s).unwrap();
    let k = labels.len();
    let mut confusion = vec![vec![0u32; k]; k];
    for (r, p) in pairs {
        confusion[idx(r)][idx(p)] += 1;
    }
    let mut recalls: Vec<f64> = (0..k)
        .filter_map(|c| {
            let support: u32 = confusion[c].iter().sum();
            (support > 0).then(|| f64::from(confusion[c][c]) / f64::from(support))
        })
        .collect();
    recalls.sort_by(f64::total_cmp);
    recalls.iter().sum::<f64>() / recalls.len() as f64
}

fn oracle_symmetric(g: &[&str], p: &[&str], emb: &dyn Embedder) -> f64 {
    let gv = emb.embed(g).unwrap();
    let pv = emb.embed(p).unwrap();
    let direction = |from: &[Vec<f64>], to: &[Vec<f64>]| {
        from.iter().map(|x| to.iter().map(|y| cosine(x, y)).fold(f64::NEG_INFINITY, f64::max)).sum::<f64>()
            / from.len() as f64
    };
    0.5 * (direction(&gv, &pv) + direction(&pv, &gv))
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let alphabet = ["Yes", "No", "Not specified", "R0", "R1"];
    for case in 0..1000 {
        let k = rng.gen_range(2..=alphabet.len());
        let n = rng.gen_range(1..=25);
        let pairs: Vec<(String, String)> = (0..n)
            .map(|_| (alphabet[rng.gen_range(0..k)].to_string(), alphabet[rng.gen_range(0..k)].to_string()))
            .collect();
        let got = balanced_accuracy(&pairs).map_err(|e| e.to_string())?;
        let want = oracle_balanced_accuracy(&pairs);
        check(got == want, format!("sample {case}: {got} != {want}"))?;
    }

    let emb = HashedNgramEmbedder::default();
    let fixtures: [(&[&str], &[&str]); 4] = [
        (&["segment 2", "segment 3", "segment 4a"], &["segment 2", "segment 4b", "caudate lobe"]),
        (&["liver", "colon", "lymph node"], &["liver", "lymph nodes", "omentum"]),
        (&["hepatocellular adenoma", "steatosis", "fibrosis"], &["adenoma", "steatosis"]),
        (&["5", "6", "7"], &["7", "8"]),
    ];
    let mut worst: f64 = 0.0;
    for (g, p) in fixtures {
        let gs: Vec<String> = g.iter().map(|s| s.to_string()).collect();
        let ps: Vec<String> = p.iter().map(|s| s.to_string()).collect();
        let forward = list_pair_similarity(&gs, &ps, &emb).map_err(|e| e.to_string())?;
        let backward = list_pair_similarity(&ps, &gs, &emb).map_err(|e| e.to_string())?;
        check(forward == backward, format!("{g:?} vs {p:?}: asymmetric {forward} / {backward}"))?;
        let hand = oracle_symmetric(g, p, &emb);
        worst = worst.max((forward - hand).abs());
        check((forward - hand).abs() <= 1e-9, format!("{g:?} vs {p:?}: {forward} vs hand {hand}"))?;
        let dataset = list_symmetric_similarity(&[(gs.clone(), ps.clone())], &emb).map_err(|e| e.to_string())?;
        check(dataset == forward, "single-sample dataset score differs")?;
    }
    Ok(format!("1000/1000 balanced-accuracy samples exact; list similarity symmetric, max deviation {worst:.1e}"))
}

// 4

fn bootstrap_coverage() -> Outcome {
    let mut covered = 0;
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let data: Vec<f64> = (0..200).map(|_| if rng.gen_bool(0.8) { 1.0 } else { 0.0 }).collect();
        let (lo, hi) = bootstrap_mean_ci(&data, 1000, 0.95, trial).map_err(|e| e.to_string())?;
        let again = bootstrap_mean_ci(&data, 1000, 0.95, trial).map_err(|e| e.to_string())?;
        check((lo, hi) == again, format!("trial {trial} is not deterministic"))?;
        if lo <= 0.8 && 0.8 <= hi {
            covered += 1;
        }
    }
    check(covered >= 90, format!("covered 0.8 in {covered}/100 trials"))?;
    Ok(format!("covered 0.8 in {covered}/100 trials"))
}

// 5

fn pipeline_determinism() -> Outcome {
    let server = mock("mock/crlm.yaml");
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (t, c) = (task("crlm"), corpus("crlm"));
    let m = models(&server.url(), &["qwen3-235b", "gemma-3-4b"]);
    let cache = tmp.path().join("cache");
    let go = |name: &str| {
        let opts = RunOptions { cache_dir: Some(cache.clone()), ..RunOptions::new(tmp.path().join(name)) };
        run(&t, &m, &c, &opts, embedder()).map_err(|e| e.to_string())
    };
    let first = go("first")?;
    let cold = server.chat_request_count();
    let second = go("second")?;
    let warm = server.chat_request_count() - cold;
    let rows: Vec<ResultRow> = read_jsonl(&tmp.path().join("first").join(RESULTS_FILE)).map_err(|e| e.to_string())?;
    check(rows.len() == 36 && first.rows == 36, format!("{} rows", rows.len()))?;
    check(first.exit_code() == 0, "first run had failures")?;
    check(warm == 0 && second.manifest.network_requests == 0, format!("cached rerun issued {warm} requests"))?;
    for f in [RESULTS_FILE, TRACE_FILE] {
        let a = fs::read(tmp.path().join("first").join(f)).map_err(|e| e.to_string())?;
        let b = fs::read(tmp.path().join("second").join(f)).map_err(|e| e.to_string())?;
        check(a == b, format!("{f} differs between runs"))?;
    }
    Ok(format!("36 rows, {cold} requests cold, 0 cached; results and trace byte-identical"))
}

// 6

fn node_order(trace: &[TraceRow]) -> BTreeMap<(String, String), Vec<String>> {
    let mut out: BTreeMap<(String, String), Vec<(usize, String)>> = BTreeMap::new();
    for t in trace.iter().filter(|t| t.strategy == StrategyKind::PromptGraph) {
        if let Some(node) = &t.node {
            out.entry((t.model_id.clone(), t.report_id.clone())).or_default().push((t.turn, node.clone()));
        }
    }
    out.into_iter()
        .map(|(k, mut v)| {
            v.sort();
            (k, v.into_iter().map(|(_, n)| n).collect())
        })
        .collect()
}

fn graph_semantics() -> Outcome {
    let t = task("melanoma");
    let graph = t.graph.as_ref().ok_or("melanoma fixture has no graph")?;
    let declared: Vec<String> = topo_order(graph).map_err(|e| e.to_string())?.iter().map(|n| n.id.clone()).collect();
    let count = "Mitosis count (per mm2)";

    let server = mock("mock/melanoma.yaml");
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = tmp.path().join("out");
    let opts = RunOptions { strategies: vec![StrategySpec::new(StrategyKind::PromptGraph)], ..RunOptions::new(&out) };
    let m = models(&server.url(), &["mistral-small-3.1-24b", "gemma-3-27b"]);
    run(&t, &m, &corpus("melanoma"), &opts, embedder()).map_err(|e| e.to_string())?;
    let rows: Vec<ResultRow> = read_jsonl(&out.join(RESULTS_FILE)).map_err(|e| e.to_string())?;
    let trace: Vec<TraceRow> = read_jsonl(&out.join(TRACE_FILE)).map_err(|e| e.to_string())?;

    for row in &rows {
        let described = row.record.values["Mitosis described"].as_str().unwrap_or_default().to_string();
        let skipped = row.record.flags.skipped.iter().any(|f| f == count);
        check(skipped == (described != "Yes"), format!("{}: skip flag {skipped} with mitosis {described:?}", row.record.report_id))?;
        if skipped {
            check(row.record.values[count] == t.field(count).unwrap().default, "skipped field is not at its default")?;
            let logged = trace.iter().any(|tr| {
                tr.report_id == row.record.report_id
                    && tr.model_id == row.record.model_id
                    && tr.node.as_deref() == Some("mitosis_count")
                    && tr.skip_reason.is_some()
                    && tr.request_hash.is_none()
            });
            check(logged, format!("{}: skip not recorded in trace", row.record.report_id))?;
        }
    }
    let no = rows.iter().find(|r| r.record.report_id == "mel-002").ok_or("mel-002 missing")?;
    check(no.record.values["Mitosis described"] == FieldValue::text("No"), "mel-002 not scripted as No")?;
    check(no.record.flags.skipped == [count], "mel-002 count node not skipped")?;

    let orders = node_order(&trace);
    let matching = orders.values().filter(|o| **o == declared).count();
    check(matching == orders.len() && !orders.is_empty(), format!("{matching}/{} traces in declared order", orders.len()))?;

    // Same check with in-process scripted answers for each mitosis state.
    let examples = select_examples(&t, 3, 0).map_err(|e| e.to_string())?;
    let sampling = SamplingParams { temperature: 0.15, top_p: 0.95, top_k: 50 };
    for answer in ["Yes", "No", "Not specified"] {
        let reply = format!("```json\n{{\"Mitosis described\": \"{answer}\", \"Mitosis count (per mm2)\": 3}}\n```");
        let chat = FnChat::new("scripted", move |_: &[_], _: &_| Ok(reply.clone()));
        let spec = StrategySpec::new(StrategyKind::PromptGraph);
        let outcome = run_graph(&t, &spec, &Report::new("r", "text"), &examples, &chat, &sampling).map_err(|e| e.to_string())?;
        let nodes: Vec<String> = outcome.turns.iter().filter_map(|x| x.node.clone()).collect();
        check(nodes == declared, format!("{answer}: nodes ran as {nodes:?}"))?;
        let want = if answer == "Yes" { FieldValue::Number(3.0) } else { FieldValue::text("Not specified") };
        check(outcome.record.values[count] == want, format!("{answer}: count {:?}", outcome.record.values[count]))?;
    }
    Ok(format!("count node skipped exactly when mitosis is not \"Yes\"; {matching}/{} traces in declared order", orders.len()))
}

// 7

fn all_kinds_fields() -> Vec<FieldSpec> {
    let field = |name: &str, kind: FieldKind, options: &[&str], default: FieldValue| FieldSpec {
        name: name.into(),
        kind,
        options: options.iter().map(|s| s.to_string()).collect(),
        default,
        metric: None,
        description: String::new(),
        placeholder: None,
    };
    vec![
        field("grade", FieldKind::Categorical, &["1", "2", "3"], FieldValue::text("")),
        field("present", FieldKind::Binary, &["Yes", ""], FieldValue::text("")),
        field("size", FieldKind::Numeric, &[], FieldValue::text("")),
        field("diagnosis", FieldKind::FreeText, &[], FieldValue::text("")),
        field("sites", FieldKind::List, &[], FieldValue::List(Vec::new())),
        field("code", FieldKind::ExactString, &[], FieldValue::text("")),
    ]
}

fn self_consistency() -> Outcome {
    let t = task("crlm");
    let hemi = "Was a hemihepatectomy performed?";
    let examples = select_examples(&t, 3, 0).map_err(|e| e.to_string())?;
    let sampling = SamplingParams { temperature: 0.6, top_p: 0.95, top_k: 50 };
    // Samples run concurrently, so answers are keyed by their temperature (0.5, 0.6, 0.7).
    let chat = FnChat::new("scripted", move |_: &[_], p: &SamplingParams| {
        let value = if p.temperature < 0.65 { "Yes" } else { "" };
        Ok(format!(
            "<think>...</think>```json\n{{\"List of liver segments resected during first surgery\": [\"2\"], \"{hemi}\": \"{value}\", \"Surgical resection margin (mm)\": 4, \"Radicality of liver surgery (R classification)\": \"R0\"}}\n```"
        ))
    });
    let spec = StrategySpec::new(StrategyKind::SelfConsistency).with_samples(3);
    let emb = HashedNgramEmbedder::default();
    let out = run_self_consistency(&t, &spec, &Report::new("r", "text"), &examples, &chat, &sampling, &emb)
        .map_err(|e| e.to_string())?;
    let drawn: Vec<String> = out.samples.iter().map(|s| s.values[hemi].to_string()).collect();
    check(drawn == ["Yes", "Yes", ""], format!("samples were {drawn:?}"))?;
    check(out.record.values[hemi] == FieldValue::text("Yes"), format!("aggregate {:?}", out.record.values[hemi]))?;

    let mut t2 = t.clone();
    t2.fields = all_kinds_fields();
    let sample = parse_response(
        "```json\n{\"grade\": \"2\", \"present\": \"Yes\", \"size\": 3.5, \"diagnosis\": \"well differentiated liposarcoma\", \"sites\": [\"thigh\", \"groin\"], \"code\": \"8850/3\"}\n```",
        &t2.fields,
        &t2.missing_token,
    );
    check(!sample.flags.parse_failed && sample.flags.defaults_applied.is_empty(), "reference sample did not parse cleanly")?;
    let agg: ParsedRecord = aggregate_samples(&t2, &[sample.clone(), sample.clone(), sample.clone()], &emb)
        .map_err(|e| e.to_string())?;
    check(agg.values == sample.values, format!("aggregate {:?}", agg.values))?;
    Ok("[Yes, Yes, \"\"] aggregates to \"Yes\"; identical samples reproduce all six field kinds".into())
}

// 8

struct Case {
    name: &'static str,
    text: String,
    expected: &'static str,
    repaired: bool,
}

const SEG: &str = "List of liver segments resected during first surgery";
const HEMI: &str = "Was a hemihepatectomy performed?";
const MARGIN: &str = "Surgical resection margin (mm)";
const RAD: &str = "Radicality of liver surgery (R classification)";

fn obj(seg: &str, hemi: &str, margin: &str, rad: &str) -> String {
    format!("{{\"{SEG}\": {seg}, \"{HEMI}\": {hemi}, \"{MARGIN}\": {margin}, \"{RAD}\": {rad}}}")
}

fn parser_cases() -> Vec<Case> {
    let a = obj(r#"["2", "3"]"#, r#""Yes""#, "4", r#""R0""#);
    let b = obj(r#"["6"]"#, r#""""#, r#""""#, r#""R1""#);
    let a_pretty = format!(
        "{{\n  \"{SEG}\": [\n    \"2\",\n    \"3\"\n  ],\n  \"{HEMI}\": \"Yes\",\n  \"{MARGIN}\": 4,\n  \"{RAD}\": \"R0\"\n}}"
    );
    const A: &str = r#"{"A": true}"#;
    const B: &str = r#"{"B": true}"#;
    const D: &str = r#"{"D": true}"#;
    let fence = |body: &str| format!("```json\n{body}\n```");
    let case = |name, text: String, expected, repaired| Case { name, text, expected, repaired };
    vec![
        // think preambles
        case("think then fence", format!("<think>Segments 2 and 3.</think>\n{}", fence(&a)), A, false),
        case("fenced draft inside think", format!("<think>draft {}</think>{}", fence(&b), fence(&a)), A, false),
        case("braces inside think", format!("<think>a {{not json}} b</think>{}", fence(&a)), A, false),
        case("closing tag only", format!("reasoning without opener\n</think>\n{}", fence(&a)), A, false),
        case("two think spans", format!("<think>x</think>ok<think>y {b}</think>{}", fence(&a)), A, false),
        case("multiline think", format!("<think>\nline one\nline two: 4 mm\n</think>\n\n{}", fence(&a)), A, false),
        case("think then bare object", format!("<think>{}</think>Answer: {a}", fence(&b)), A, true),
        case("bare draft inside think", format!("<think>first guess {b}</think>\n{}", fence(&a)), A, false),
        case("empty think", format!("<think></think>{}", fence(&a)), A, false),
        case("think then upper-case fence", format!("<think>t</think>```JSON\n{a}\n```"), A, false),
        // several fenced blocks
        case("b then a", format!("{}\n{}", fence(&b), fence(&a)), A, false),
        case("a then b", format!("{}\n{}", fence(&a), fence(&b)), B, false),
        case("prose between fences", format!("First try:\n{}\nCorrected:\n{}", fence(&b), fence(&a)), A, false),
        case("three fences", format!("{}{}{}", fence(&b), fence("{}"), fence(&a)), A, false),
        case("malformed first fence", format!("{}\n{}", fence("{\"broken\": "), fence(&a)), A, false),
        case("mixed-case fences", format!("```Json\n{b}\n```\n```json\n{a}\n```"), A, false),
        case("python fence after json", format!("{}\n```python\nprint({{}})\n```", fence(&a)), A, false),
        case("blank lines in fence", format!("```json\n\n\n{a}\n\n```"), A, false),
        case("empty then full", format!("{}\n{}", fence("{}"), fence(&a)), A, false),
        case("full then empty", format!("{}\n{}", fence(&a), fence("{}")), D, false),
        // unfenced objects
        case("leading prose", format!("Here is the answer: {a}"), A, true),
        case("trailing prose", format!("{a}\nLet me know if you need more."), A, true),
        case("braces in prose", format!("Set {{x}} first. {a}"), A, true),
        case("two bare objects", format!("{b}\nrevised: {a}"), A, true),
        case("closing brace in a string", obj(r#"["2}", "3"]"#, r#""Yes""#, "4", r#""R0""#), "braces", true),
        case("pretty printed", a_pretty.clone(), A, true),
        case("other fence language", format!("```text\n{a}\n```"), A, true),
        case("unterminated tail", format!("{a} and {{\"oops\": "), A, true),
        case("unparseable last object", format!("{a}\n{{not: json}}"), A, true),
        case("bare pretty after prose", format!("Result\n\n{a_pretty}\n"), A, true),
        // all defaults
        case("empty fenced object", fence("{}"), D, false),
        case("empty bare object", "{}".into(), D, true),
        case("whitespace object", fence("{   }"), D, false),
        case("think then empty", format!("<think>nothing found</think>{}", fence("{}")), D, false),
        case("only unknown keys", fence(r#"{"comment": "nothing"}"#), D, false),
        case("all nulls", fence(&obj("null", "null", "null", "null")), D, false),
        case("explicit defaults", fence(&obj("[]", r#""""#, r#""""#, r#""""#)), D, false),
        case("empty with prose", format!("No relevant information.\n{}", fence("{}")), D, false),
        case("empty after think close only", format!("...</think>{}", fence("{}")), D, false),
        case("crlf empty", "```json\r\n{}\r\n```".into(), D, false),
        // coercions and layout
        case("boolean binary", fence(&obj(r#"["2", "3"]"#, "true", "4", r#""R0""#)), A, false),
        case("numeric string margin", fence(&obj(r#"["2", "3"]"#, r#""Yes""#, r#""4""#, r#""R0""#)), A, false),
        case("lower-case category", fence(&obj(r#"["2", "3"]"#, r#""yes""#, "4", r#""r0""#)), A, false),
        case("numbers in list", fence(&obj("[2, 3]", r#""Yes""#, "4", r#""R0""#)), A, false),
        case("scalar list", fence(&obj(r#""6""#, r#""""#, r#""""#, r#""R1""#)), B, false),
        case("shuffled keys", fence(&format!("{{\"{RAD}\": \"R0\", \"{MARGIN}\": 4, \"{HEMI}\": \"Yes\", \"{SEG}\": [\"2\", \"3\"]}}")), A, false),
        case("extra keys", fence(&a.replacen('{', "{\"note\": \"x\", ", 1)), A, false),
        case("crlf fence", format!("```json\r\n{a}\r\n```"), A, false),
        case("margin with padding", fence(&obj(r#"["2", "3"]"#, r#""Yes""#, r#"" 4 ""#, r#""R0""#)), A, false),
        case("float margin", fence(&obj(r#"["2", "3"]"#, r#""Yes""#, "4.0", r#""R0""#)), A, false),
    ]
}

fn expected_values(tag: &str) -> IndexMap<String, FieldValue> {
    let text = match tag {
        r#"{"A": true}"# => obj(r#"["2", "3"]"#, r#""Yes""#, "4", r#""R0""#),
        r#"{"B": true}"# => obj(r#"["6"]"#, r#""""#, r#""""#, r#""R1""#),
        r#"{"D": true}"# => obj("[]", r#""""#, r#""""#, r#""""#),
        "braces" => obj(r#"["2}", "3"]"#, r#""Yes""#, "4", r#""R0""#),
        other => panic!("unknown expectation {other}"),
    };
    serde_json::from_str(&text).expect("expectation parses")
}

fn parser_suite() -> Outcome {
    let t = task("crlm");
    let cases = parser_cases();
    check(cases.len() == 50, format!("{} cases", cases.len()))?;
    let mut failures = Vec::new();
    for c in &cases {
        let rec = parse_response(&c.text, &t.fields, &t.missing_token);
        let ok = !rec.flags.parse_failed && rec.values == expected_values(c.expected) && rec.flags.repaired == c.repaired;
        if !ok {
            failures.push(format!("{} -> {:?} repaired={}", c.name, rec.values, rec.flags.repaired));
        }
    }
    check(failures.is_empty(), failures.join("; "))?;
    Ok(format!("{0}/{0} cases extracted as expected", cases.len()))
}

// 9

fn variance() -> Outcome {
    let grid = |transpose: bool| -> Vec<PerformanceCell> {
        let mut cells = Vec::new();
        for m in 0..5 {
            for s in 0..6 {
                let value = 0.4 + 0.1 * m as f64 + 0.001 * (((m * 7 + s * 3) % 5) as f64 - 2.0);
                let (row, col) = (format!("model-{m}"), format!("strategy-{s}"));
                cells.push(if transpose { PerformanceCell::new(col, row, value) } else { PerformanceCell::new(row, col, value) });
            }
        }
        cells
    };
    let v = variance_partition(&grid(false)).map_err(|e| e.to_string())?;
    let t = variance_partition(&grid(true)).map_err(|e| e.to_string())?;
    check(v.model_pct >= 95.0 && v.strategy_pct <= 2.0, format!("model {:.2}%, strategy {:.2}%", v.model_pct, v.strategy_pct))?;
    check(t.model_pct == v.strategy_pct && t.strategy_pct == v.model_pct, "transpose does not swap the components")?;
    for s in [v, t] {
        let sum = s.model_pct + s.strategy_pct + s.residual_pct;
        check((sum - 100.0).abs() <= 0.1, format!("shares sum to {sum}"))?;
    }
    Ok(format!("model {:.2}%, strategy {:.2}%, residual {:.2}%; transpose swaps exactly", v.model_pct, v.strategy_pct, v.residual_pct))
}

// 10

fn rater_set(id: &str, raters: &[(&str, &str)], shared: &str) -> AnnotationSet {
    let rec = |hemi: &str| -> IndexMap<String, FieldValue> {
        serde_json::from_str(&obj(shared, &format!("\"{hemi}\""), "4", r#""R0""#)).expect("record parses")
    };
    AnnotationSet {
        report_id: id.into(),
        raters: raters.iter().map(|(name, hemi)| (name.to_string(), rec(hemi))).collect(),
        consensus: rec(raters[0].1),
    }
}

fn agreement() -> Outcome {
    let t = task("crlm");
    let emb = HashedNgramEmbedder::default();
    let identical: Vec<AnnotationSet> = corpus("crlm")
        .annotations
        .iter()
        .map(|a| {
            let first = a.raters.values().next().expect("fixture has raters").clone();
            AnnotationSet {
                report_id: a.report_id.clone(),
                raters: [("a".to_string(), first.clone()), ("b".to_string(), first.clone())].into_iter().collect(),
                consensus: first,
            }
        })
        .collect();
    let same = inter_rater_agreement(&identical, &t.fields, &emb).map_err(|e| e.to_string())?;
    check(same.variables.iter().all(|v| v.value == 1.0) && same.macro_average == 1.0, "identical raters below 1.0")?;

    // Raters a and b agree; c misses the hemihepatectomy on report 2.
    let sets = vec![
        rater_set("r1", &[("a", "Yes"), ("b", "Yes"), ("c", "Yes")], r#"["2"]"#),
        rater_set("r2", &[("a", "Yes"), ("b", "Yes"), ("c", "")], r#"["5", "6"]"#),
        rater_set("r3", &[("a", ""), ("b", ""), ("c", "")], "[]"),
        rater_set("r4", &[("a", ""), ("b", ""), ("c", "")], r#"["7"]"#),
    ];
    let got = inter_rater_agreement(&sets, &t.fields, &emb).map_err(|e| e.to_string())?;
    // Pair (a, b): 1. Pair (a, c) with a as reference: Yes recall 1/2, "" recall 2/2, so 3/4;
    // with c as reference: Yes recall 1/1, "" recall 2/3, so 5/6. Symmetrised: 19/24.
    // Pair (b, c) equals (a, c). Mean over pairs: (1 + 19/24 + 19/24) / 3 = 31/36.
    let hand = (1.0 + 19.0 / 24.0 + 19.0 / 24.0) / 3.0;
    let hemi = got.variables.iter().find(|v| v.variable == HEMI).ok_or("no hemihepatectomy score")?.value;
    check(hemi == hand, format!("hemihepatectomy {hemi} vs hand {hand}"))?;
    check((hemi - 31.0 / 36.0).abs() < 1e-15, "hand value is not 31/36")?;
    let others = got.variables.iter().filter(|v| v.variable != HEMI).all(|v| v.value == 1.0);
    check(others, "undisputed variables below 1.0")?;
    check(got.rater_pairs.len() == 3, format!("{} rater pairs", got.rater_pairs.len()))?;
    Ok(format!("identical raters 1.0; deviant binary field {hemi:.6} = 31/36"))
}
