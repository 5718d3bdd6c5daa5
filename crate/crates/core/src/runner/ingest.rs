//! Scenario files: JSON lines with `{id, context, atomic_facts, question, options, answer}`.
//!
//! Two flavours are accepted. The symbolic flavour carries integer ids
//! (`context` and `question` are key lists, `atomic_facts` maps key to value,
//! `options` are option ids and `answer` is the correct option id). The
//! free-text flavour carries prose; every fact becomes a key of its scenario
//! whose value is the fact's index in a shared dictionary, which is returned so
//! the mapping can be reversed.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::env::{AnswerRule, Scenario};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestIssue {
    pub line: usize,
    pub id: Option<String>,
    pub reason: String,
}

/// Original text behind one free-text scenario.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioText {
    pub context: String,
    pub question: String,
    /// Fact text per key.
    pub facts: Vec<String>,
    /// Option text per option id.
    pub options: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dictionary {
    /// Fact text per value id.
    pub values: Vec<String>,
    pub scenarios: BTreeMap<String, ScenarioText>,
}

impl Dictionary {
    pub fn fact_text(&self, value: u32) -> Option<&str> {
        self.values.get(value as usize).map(String::as_str)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub scenarios: Vec<Scenario>,
    pub dictionary: Dictionary,
    pub issues: Vec<IngestIssue>,
    pub warnings: Vec<String>,
}

impl IngestReport {
    /// Smallest vocabulary holding every accepted scenario.
    pub fn vocabulary(&self) -> Vocabulary {
        let mut v = Vocabulary::new(0, 0, 0);
        for s in &self.scenarios {
            for (k, val) in &s.facts {
                v.num_keys = v.num_keys.max(k + 1);
                v.num_values = v.num_values.max(val + 1);
            }
            for o in &s.options {
                v.num_options = v.num_options.max(o + 1);
            }
        }
        v
    }

    pub fn summary(&self) -> String {
        format!("{} scenarios accepted, {} lines rejected", self.scenarios.len(), self.issues.len())
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Flavour {
    Symbolic,
    FreeText,
}

pub fn ingest_scenarios(path: &Path) -> std::io::Result<IngestReport> {
    Ok(ingest_str(&std::fs::read_to_string(path)?))
}

pub fn ingest_str(text: &str) -> IngestReport {
    let mut report = IngestReport::default();
    let mut seen = BTreeSet::new();
    let mut flavour = None;
    let mut value_ids: HashMap<String, u32> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let issue = |id: Option<String>, reason: String| IngestIssue { line, id, reason };
        let obj = match serde_json::from_str::<Value>(raw) {
            Ok(Value::Object(o)) => o,
            Ok(_) => {
                report.issues.push(issue(None, "expected a JSON object".into()));
                continue;
            }
            Err(e) => {
                report.issues.push(issue(None, format!("malformed JSON: {e}")));
                continue;
            }
        };
        let id = obj.get("id").and_then(Value::as_str).map(str::to_string);
        let parsed = parse_line(&obj, &mut flavour, &mut value_ids, &mut report.dictionary);
        match (parsed, id) {
            (Err(reason), id) => report.issues.push(issue(id, reason)),
            (Ok(_), None) => unreachable!("parse_line requires an id"),
            (Ok((s, text)), Some(id)) => {
                if !seen.insert(id.clone()) {
                    report.issues.push(issue(Some(id), "duplicate id".into()));
                    continue;
                }
                if let Some(t) = text {
                    report.dictionary.scenarios.insert(id, t);
                }
                report.scenarios.push(s);
            }
        }
    }
    if report.scenarios.is_empty() {
        report.warnings.push("no scenarios in input".into());
    }
    if flavour != Some(Flavour::FreeText) {
        report.dictionary.values.clear();
    }
    report
}

fn field<'a>(obj: &'a Map<String, Value>, name: &str) -> Result<&'a Value, String> {
    obj.get(name).ok_or_else(|| format!("missing field `{name}`"))
}

fn parse_line(
    obj: &Map<String, Value>,
    flavour: &mut Option<Flavour>,
    value_ids: &mut HashMap<String, u32>,
    dict: &mut Dictionary,
) -> Result<(Scenario, Option<ScenarioText>), String> {
    let id = field(obj, "id")?.as_str().ok_or("`id` must be a string")?.to_string();
    for f in ["context", "atomic_facts", "question", "options", "answer"] {
        field(obj, f)?;
    }
    let this = match &obj["atomic_facts"] {
        Value::Object(_) => Flavour::Symbolic,
        Value::Array(a) if a.iter().all(Value::is_string) => Flavour::FreeText,
        _ => return Err("`atomic_facts` must be an object of key -> value ids or a list of strings".into()),
    };
    match *flavour {
        None => *flavour = Some(this),
        Some(f) if f != this => return Err("file mixes symbolic and free-text scenarios".into()),
        _ => {}
    }
    match this {
        Flavour::Symbolic => parse_symbolic(&id, obj).map(|s| (s, None)),
        Flavour::FreeText => parse_free_text(&id, obj, value_ids, dict).map(|(s, t)| (s, Some(t))),
    }
}

fn u32_list(v: &Value, name: &str) -> Result<Vec<u32>, String> {
    v.as_array()
        .ok_or_else(|| format!("`{name}` must be a list of integers"))?
        .iter()
        .map(|x| x.as_u64().and_then(|x| u32::try_from(x).ok()).ok_or_else(|| format!("`{name}` must hold non-negative integers")))
        .collect()
}

fn parse_symbolic(id: &str, obj: &Map<String, Value>) -> Result<Scenario, String> {
    let context = u32_list(&obj["context"], "context")?;
    let question = u32_list(&obj["question"], "question")?;
    let options = u32_list(&obj["options"], "options")?;
    let mut facts = BTreeMap::new();
    for (k, v) in obj["atomic_facts"].as_object().expect("checked by caller") {
        let key: u32 = k.parse().map_err(|_| format!("fact key `{k}` is not an integer"))?;
        let val = v.as_u64().and_then(|x| u32::try_from(x).ok()).ok_or_else(|| format!("fact {k} has a non-integer value"))?;
        facts.insert(key, val);
    }
    let answer = obj["answer"].as_u64().and_then(|x| u32::try_from(x).ok()).ok_or("`answer` must be an option id")?;
    let Some(index) = options.iter().position(|o| *o == answer) else {
        return Err(format!("answer {answer} is not among the options"));
    };
    let rule = match obj.get("answer_rule") {
        Some(r) => serde_json::from_value(r.clone()).map_err(|e| format!("bad `answer_rule`: {e}"))?,
        None => AnswerRule::Fixed { index: index as u32 },
    };
    let s = Scenario::new(id, context, facts, question, options, rule).map_err(|e| e.to_string())?;
    if s.correct_option != answer {
        return Err(format!("answer {answer} disagrees with the answer rule (which selects {})", s.correct_option));
    }
    Ok(s)
}

fn parse_free_text(
    id: &str,
    obj: &Map<String, Value>,
    value_ids: &mut HashMap<String, u32>,
    dict: &mut Dictionary,
) -> Result<(Scenario, ScenarioText), String> {
    let context = obj["context"].as_str().ok_or("`context` must be a string")?.to_string();
    let question = obj["question"].as_str().ok_or("`question` must be a string")?.to_string();
    let fact_text: Vec<String> =
        obj["atomic_facts"].as_array().expect("checked by caller").iter().map(|v| v.as_str().unwrap_or("").to_string()).collect();
    if fact_text.is_empty() {
        return Err("`atomic_facts` is empty".into());
    }
    // Options as a list or a letter-keyed object (kept in key order).
    let (labels, option_text): (Vec<String>, Vec<String>) = match &obj["options"] {
        Value::Array(a) => a
            .iter()
            .enumerate()
            .map(|(i, v)| v.as_str().map(|t| (option_label(i), t.to_string())).ok_or("options must be strings"))
            .collect::<Result<Vec<_>, &str>>()?
            .into_iter()
            .unzip(),
        Value::Object(m) => m
            .iter()
            .map(|(k, v)| v.as_str().map(|t| (k.clone(), t.to_string())).ok_or("options must be strings"))
            .collect::<Result<Vec<_>, &str>>()?
            .into_iter()
            .unzip(),
        _ => return Err("`options` must be a list or an object of strings".into()),
    };
    let index = match &obj["answer"] {
        Value::String(a) => labels.iter().position(|l| l == a).or_else(|| option_text.iter().position(|t| t == a)),
        Value::Number(n) => n.as_u64().map(|i| i as usize).filter(|i| *i < option_text.len()),
        _ => None,
    }
    .ok_or_else(|| format!("answer {} is not among the options", obj["answer"]))?;

    // Only committed once the scenario validates.
    let mut pending = Vec::new();
    let mut facts = BTreeMap::new();
    for (k, text) in fact_text.iter().enumerate() {
        let next = (dict.values.len() + pending.len()) as u32;
        let v = match value_ids.get(text) {
            Some(v) => *v,
            None => match pending.iter().position(|p| p == text) {
                Some(j) => dict.values.len() as u32 + j as u32,
                None => {
                    pending.push(text.clone());
                    next
                }
            },
        };
        facts.insert(k as u32, v);
    }
    let keys: Vec<u32> = (0..fact_text.len() as u32).collect();
    let options: Vec<u32> = (0..option_text.len() as u32).collect();
    let s = Scenario::new(id, Vec::new(), facts, keys, options, AnswerRule::Fixed { index: index as u32 }).map_err(|e| e.to_string())?;
    for text in pending {
        value_ids.insert(text.clone(), dict.values.len() as u32);
        dict.values.push(text);
    }
    Ok((s, ScenarioText { context, question, facts: fact_text, options: option_text }))
}

/// `A`, `B`, ..., `Z`, `AA`, `AB`, ...
fn option_label(mut i: usize) -> String {
    let mut out = Vec::new();
    loop {
        out.push(b'A' + (i % 26) as u8);
        if i < 26 {
            break;
        }
        i = i / 26 - 1;
    }
    out.reverse();
    String::from_utf8(out).expect("ascii")
}

/// One line of the symbolic flavour.
pub fn scenario_to_json(s: &Scenario) -> Value {
    let facts: Map<String, Value> = s.facts.iter().map(|(k, v)| (k.to_string(), json!(v))).collect();
    json!({
        "id": s.id,
        "context": s.context_keys,
        "atomic_facts": facts,
        "question": s.relevant_keys,
        "options": s.options,
        "answer": s.correct_option,
        "answer_rule": s.answer_rule,
    })
}

pub fn write_scenarios(path: &Path, scenarios: &[Scenario]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in scenarios {
        writeln!(f, "{}", scenario_to_json(s))?;
    }
    f.flush()
}
