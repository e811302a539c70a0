//! Helpers shared by the CLI integration tests, including a checker for
//! the subset of JSON Schema the shipped schemas use.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

pub fn longctx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_longctx"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn schema(name: &str) -> Value {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../schemas").join(name);
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

pub fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// Violations of `schema` by `v`, as JSON-pointer-ish paths. Supports
/// type, required, properties, additionalProperties, items, enum,
/// minItems/maxItems and minimum/maximum.
pub fn violations(schema: &Value, v: &Value, at: &str) -> Vec<String> {
    let mut out = Vec::new();
    if let Some(t) = schema.get("type").and_then(Value::as_str) {
        let ok = match t {
            "object" => v.is_object(),
            "array" => v.is_array(),
            "string" => v.is_string(),
            "number" => v.is_number(),
            "integer" => v.is_u64() || v.is_i64(),
            "boolean" => v.is_boolean(),
            other => panic!("unsupported type {other}"),
        };
        if !ok {
            out.push(format!("{at}: expected {t}"));
            return out;
        }
    }
    if let Some(e) = schema.get("enum").and_then(Value::as_array) {
        if !e.contains(v) {
            out.push(format!("{at}: {v} not in enum"));
        }
    }
    if let Some(x) = v.as_f64() {
        if schema.get("minimum").and_then(Value::as_f64).is_some_and(|m| x < m) {
            out.push(format!("{at}: {x} below minimum"));
        }
        if schema.get("maximum").and_then(Value::as_f64).is_some_and(|m| x > m) {
            out.push(format!("{at}: {x} above maximum"));
        }
    }
    if let Some(obj) = v.as_object() {
        for r in schema.get("required").and_then(Value::as_array).into_iter().flatten() {
            if !obj.contains_key(r.as_str().unwrap()) {
                out.push(format!("{at}: missing {r}"));
            }
        }
        let props = schema.get("properties").and_then(Value::as_object);
        for (k, val) in obj {
            let path = format!("{at}/{k}");
            match (props.and_then(|p| p.get(k)), schema.get("additionalProperties")) {
                (Some(s), _) => out.extend(violations(s, val, &path)),
                (None, Some(Value::Bool(false))) => out.push(format!("{path}: unexpected property")),
                (None, Some(s)) if s.is_object() => out.extend(violations(s, val, &path)),
                _ => {}
            }
        }
    }
    if let Some(arr) = v.as_array() {
        if schema.get("minItems").and_then(Value::as_u64).is_some_and(|m| (arr.len() as u64) < m) {
            out.push(format!("{at}: fewer than minItems"));
        }
        if schema.get("maxItems").and_then(Value::as_u64).is_some_and(|m| (arr.len() as u64) > m) {
            out.push(format!("{at}: more than maxItems"));
        }
        if let Some(items) = schema.get("items") {
            for (i, x) in arr.iter().enumerate() {
                out.extend(violations(items, x, &format!("{at}/{i}")));
            }
        }
    }
    out
}

pub fn assert_valid(schema_name: &str, v: &Value) {
    let errs = violations(&schema(schema_name), v, "");
    assert!(errs.is_empty(), "{schema_name}: {errs:?}");
}

pub const TINY_CONFIG: &str = r#"
seed = 3

[encoder]
vocab_size = 260
d_model = 16
n_layers = 1
max_seq_len = 64
monarch_b = 4

[corpus]
synthetic_passages = 30

[pretrain]
steps = 4
batch_size = 2
lr = 1e-3
"#;

pub fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
