// SPDX-License-Identifier: MIT OR Apache-2.0

//! Every CSV and JSON file the CLI writes must match `schemas/outputs.json`.

mod common;

use std::path::{Path, PathBuf};

use common::{ok, write_tiny};
use regex::Regex;
use serde_json::{Map, Value};

fn schema() -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas/outputs.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// `seed_*/records.json` style pattern against a path relative to the root.
fn glob_matches(pattern: &str, rel: &str) -> bool {
    let re = format!("^{}$", regex::escape(pattern).replace(r"\*", "[^/]*"));
    Regex::new(&re).unwrap().is_match(rel)
}

fn lookup<'a>(section: &'a Map<String, Value>, rel: &str) -> Option<(&'a str, &'a Value)> {
    // Files may sit below a sweep point or a seed directory.
    section.iter().find_map(|(k, v)| {
        let depth = k.matches('/').count() + 1;
        let parts: Vec<&str> = rel.rsplit('/').take(depth).collect();
        let tail: Vec<&str> = parts.into_iter().rev().collect();
        glob_matches(k, &tail.join("/")).then_some((k.as_str(), v))
    })
}

// ---------- JSON: the subset of JSON Schema the schema file uses ----------

fn type_ok(t: &str, v: &Value) -> bool {
    match t {
        "object" => v.is_object(),
        "array" => v.is_array(),
        "string" => v.is_string(),
        "number" => v.is_number(),
        "integer" => v.as_i64().is_some() || v.as_u64().is_some(),
        "boolean" => v.is_boolean(),
        "null" => v.is_null(),
        other => panic!("unsupported type {other}"),
    }
}

fn validate(s: &Value, v: &Value, defs: &Value, at: &str) -> Result<(), String> {
    let s = s.as_object().expect("schema node is an object");
    if let Some(r) = s.get("$ref") {
        let name = r.as_str().unwrap().strip_prefix("#/$defs/").expect("local $ref");
        return validate(&defs[name], v, defs, at);
    }
    if let Some(t) = s.get("type") {
        let ok = match t {
            Value::String(t) => type_ok(t, v),
            Value::Array(ts) => ts.iter().any(|t| type_ok(t.as_str().unwrap(), v)),
            _ => panic!("bad type"),
        };
        if !ok {
            return Err(format!("{at}: {v} is not {t}"));
        }
    }
    if let Some(e) = s.get("enum") {
        if !e.as_array().unwrap().contains(v) {
            return Err(format!("{at}: {v} not in {e}"));
        }
    }
    if let Some(options) = s.get("oneOf") {
        let n = options.as_array().unwrap().iter().filter(|o| validate(o, v, defs, at).is_ok()).count();
        if n != 1 {
            return Err(format!("{at}: {n} oneOf branches match"));
        }
    }
    if let (Some(min), Some(x)) = (s.get("minimum"), v.as_f64()) {
        if x < min.as_f64().unwrap() {
            return Err(format!("{at}: {x} below {min}"));
        }
    }
    if let (Some(max), Some(x)) = (s.get("maximum"), v.as_f64()) {
        if x > max.as_f64().unwrap() {
            return Err(format!("{at}: {x} above {max}"));
        }
    }
    if let (Some(p), Some(text)) = (s.get("pattern"), v.as_str()) {
        if !Regex::new(p.as_str().unwrap()).unwrap().is_match(text) {
            return Err(format!("{at}: `{text}` does not match {p}"));
        }
    }
    if let Some(items) = v.as_array() {
        if let Some(min) = s.get("minItems") {
            if (items.len() as u64) < min.as_u64().unwrap() {
                return Err(format!("{at}: fewer than {min} items"));
            }
        }
        if let Some(item) = s.get("items") {
            for (i, x) in items.iter().enumerate() {
                validate(item, x, defs, &format!("{at}[{i}]"))?;
            }
        }
    }
    if let Some(obj) = v.as_object() {
        let props = s.get("properties").and_then(Value::as_object);
        for r in s.get("required").and_then(Value::as_array).into_iter().flatten() {
            if !obj.contains_key(r.as_str().unwrap()) {
                return Err(format!("{at}: missing {r}"));
            }
        }
        for (k, x) in obj {
            match props.and_then(|p| p.get(k)) {
                Some(ps) => validate(ps, x, defs, &format!("{at}.{k}"))?,
                None if s.get("additionalProperties") == Some(&Value::Bool(false)) => {
                    return Err(format!("{at}: unexpected field {k}"))
                }
                None => {}
            }
        }
    }
    Ok(())
}

// ---------- CSV ----------

fn cell_ok(t: &str, cell: &str) -> bool {
    match t {
        "integer" => cell.parse::<i64>().is_ok(),
        "number" => cell.parse::<f64>().is_ok_and(f64::is_finite) && significant_digits(cell) <= 9,
        "hex64" => cell.len() == 16 && cell.chars().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()),
        "string" => true,
        e if e.starts_with("enum:") => e[5..].split('|').any(|w| w == cell),
        other => panic!("unsupported csv type {other}"),
    }
}

fn significant_digits(cell: &str) -> usize {
    let mantissa = cell.split(['e', 'E']).next().unwrap();
    let digits: String = mantissa.chars().filter(char::is_ascii_digit).collect();
    digits.trim_start_matches('0').len()
}

fn columns(spec: &Value) -> Vec<(String, String, bool)> {
    spec.as_array()
        .map(|cols| {
            cols.iter()
                .map(|c| {
                    let name = c["name"].as_str().unwrap().to_string();
                    let ty = c["type"].as_str().unwrap().to_string();
                    (name, ty, c["optional"].as_bool().unwrap_or(false))
                })
                .collect()
        })
        .unwrap_or_default()
}

fn validate_csv(csv_section: &Map<String, Value>, spec: &Value, text: &str) -> Result<(), String> {
    if let Some(other) = spec.get("same_as") {
        return validate_csv(csv_section, &csv_section[other.as_str().unwrap()], text);
    }
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or("empty file")?.split(',').collect();
    let lead = columns(&spec["columns"]);
    let trail = columns(&spec["trailing"]);
    let mut expected: Vec<(String, String, bool)> = lead.clone();
    if header.len() < lead.len() + trail.len() {
        return Err(format!("header too short: {header:?}"));
    }
    let middle = &header[lead.len()..header.len() - trail.len()];
    if let Some(rep) = spec.get("repeated") {
        let prefix = rep["prefix"].as_str().unwrap();
        for (i, name) in middle.iter().enumerate() {
            if *name != format!("{prefix}{i}") {
                return Err(format!("column {name} should be {prefix}{i}"));
            }
            expected.push((name.to_string(), rep["type"].as_str().unwrap().to_string(), false));
        }
        if middle.is_empty() {
            return Err("no repeated columns".into());
        }
    } else if let Some(t) = spec.get("axis_columns") {
        for name in middle {
            expected.push((name.to_string(), t.as_str().unwrap().to_string(), false));
        }
    } else if !middle.is_empty() {
        return Err(format!("unexpected columns {middle:?}"));
    }
    expected.extend(trail);
    let names: Vec<&str> = expected.iter().map(|c| c.0.as_str()).collect();
    if header != names {
        return Err(format!("header {header:?} != {names:?}"));
    }
    for (row, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != expected.len() {
            return Err(format!("row {row}: {} cells", cells.len()));
        }
        for ((name, ty, optional), cell) in expected.iter().zip(cells) {
            if !(cell.is_empty() && *optional) && !cell_ok(ty, cell) {
                return Err(format!("row {row} column {name}: `{cell}` is not {ty}"));
            }
        }
    }
    Ok(())
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn every_output_file_matches_the_schema() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = write_tiny(root);
    let cfg = cfg.to_str().unwrap();
    let with = |extra: &[&str]| ok(root, &[&["--config", cfg, "--out", "out"][..], extra].concat());

    with(&["--set", "seeds=[0,1,2,3,4]", "evaluate"]);
    with(&["--seed", "2", "gen-data"]);
    with(&["--seed", "0", "train-mlp"]);
    with(&["--seed", "0", "train-align", "--mlp", "out/mlp_all.txt", "--partition", "p2"]);
    with(&["--seed", "0", "evaluate", "--mlp", "out/mlp_all.txt", "--align", "out/align_p2.txt"]);
    ok(root, &["--config", cfg, "--seed", "1", "--scheme", "ood", "--loss", "cl", "--out", "sweep", "sweep", "--axis", "align.learning_rate=[0.002,0.004]"]);
    ok(root, &["--out", "out", "regress", "out/summary.json"]);

    let schema = schema();
    let defs = &schema["$defs"];
    let json_section = schema["json"].as_object().unwrap();
    let csv_section = schema["csv"].as_object().unwrap();
    let mut checked = 0;
    for base in ["out", "sweep"] {
        for path in files_under(&root.join(base)) {
            let rel = path.strip_prefix(root.join(base)).unwrap().to_string_lossy().replace('\\', "/");
            let text = std::fs::read_to_string(&path).unwrap();
            let result = match path.extension().and_then(|e| e.to_str()) {
                Some("json") => {
                    let (_, s) = lookup(json_section, &rel).unwrap_or_else(|| panic!("no schema for {rel}"));
                    let v: Value = serde_json::from_str(&text).unwrap();
                    validate(s, &v, defs, "$")
                }
                Some("csv") => {
                    let (_, s) = lookup(csv_section, &rel).unwrap_or_else(|| panic!("no schema for {rel}"));
                    validate_csv(csv_section, s, &text)
                }
                _ => continue,
            };
            if let Err(e) = result {
                panic!("{base}/{rel}: {e}");
            }
            checked += 1;
        }
    }
    assert!(checked >= 30, "only {checked} files checked");
}

#[test]
fn validator_rejects_drift() {
    let schema = schema();
    let defs = &schema["$defs"];
    let hist = &schema["json"]["mlp_*_history.json"];
    let good = serde_json::json!({"epochs": [], "best_epoch": null});
    assert!(validate(hist, &good, defs, "$").is_ok());
    let extra = serde_json::json!({"epochs": [], "best_epoch": null, "new_field": 1});
    assert!(validate(hist, &extra, defs, "$").is_err());
    let missing = serde_json::json!({"epochs": []});
    assert!(validate(hist, &missing, defs, "$").is_err());

    let csv = schema["csv"].as_object().unwrap();
    let scatter = &csv["seed_*/scatter_*.csv"];
    assert!(validate_csv(csv, scatter, "kind,class,pc1,pc2\nnatural,3,0.5,-1e-3\n").is_ok());
    assert!(validate_csv(csv, scatter, "kind,class,pc1,pc2\nother,3,0.5,1\n").is_err());
    assert!(validate_csv(csv, scatter, "kind,class,pc1,pc2\nnatural,3,0.1234567891,1\n").is_err());
    assert!(validate_csv(csv, scatter, "kind,class,pc2,pc1\n").is_err());
}
