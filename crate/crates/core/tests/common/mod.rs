#![allow(dead_code)]

pub mod sql_oracle;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde_json::Value as Json;

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn read_json(rel: &str) -> Json {
    let path = repo_root().join(rel);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Prices read straight from the pricing JSON: model -> (prompt, completion)
/// dollars per 1k tokens.
pub fn raw_prices(rel: &str) -> BTreeMap<String, (f64, f64)> {
    read_json(rel)
        .as_object()
        .expect("pricing is an object")
        .iter()
        .map(|(model, p)| {
            (
                model.clone(),
                (
                    p["prompt_price_per_1k"].as_f64().unwrap(),
                    p["completion_price_per_1k"].as_f64().unwrap(),
                ),
            )
        })
        .collect()
}

/// Declared (prompt, completion) tokens of every entry of a script file, in
/// declaration order.
pub fn script_tokens(rel: &str) -> Vec<(u64, u64)> {
    read_json(rel)["entries"]
        .as_array()
        .expect("entries")
        .iter()
        .map(|e| (e["tokens"][0].as_u64().unwrap(), e["tokens"][1].as_u64().unwrap()))
        .collect()
}

/// Metrics recomputed from a JSONL trace without going through the
/// library's trace types.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceTally {
    pub turns: usize,
    pub failed: usize,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub cost: f64,
    pub model_responses: usize,
}

pub fn tally_trace(
    jsonl: &str,
    tool: &str,
    markers: &[String],
    prices: &BTreeMap<String, (f64, f64)>,
) -> TraceTally {
    let mut lines = jsonl.lines();
    let header: Json = serde_json::from_str(lines.next().expect("header line")).unwrap();
    assert_eq!(header["schema"], "stateflow-trace/1");
    let mut t = TraceTally {
        turns: 0,
        failed: 0,
        prompt_tokens: 0,
        completion_tokens: 0,
        cost: 0.0,
        model_responses: 0,
    };
    for line in lines {
        let rec: Json = serde_json::from_str(line).unwrap();
        let msg = &rec["message"];
        if msg["kind"] == "Observation" && msg["producer"] == tool {
            t.turns += 1;
            let content = msg["content"].as_str().unwrap();
            if markers.iter().any(|m| !m.is_empty() && content.contains(m.as_str())) {
                t.failed += 1;
            }
        }
        if msg["kind"] == "ModelResponse" {
            t.model_responses += 1;
        }
        if let Some(tokens) = rec["tokens"].as_array() {
            let p = tokens[0].as_u64().unwrap();
            let c = tokens[1].as_u64().unwrap();
            let model = rec["model"].as_str().expect("token records name their model");
            let (pp, cp) = prices[model];
            t.prompt_tokens += p;
            t.completion_tokens += c;
            t.cost += p as f64 / 1000.0 * pp + c as f64 / 1000.0 * cp;
        }
    }
    t
}
