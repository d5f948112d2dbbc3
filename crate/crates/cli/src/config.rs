//! Layered configuration: struct defaults, then a JSON file, then
//! `--set key=value` overrides on dotted paths.

use std::path::Path;

use geomotion_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Keys that select an enum variant; changing one replaces the whole object.
const TAG_KEYS: [&str; 2] = ["kind", "mode"];

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Overlays `top` onto `base`. Objects merge per key unless their variant
/// tag changes, in which case `top` wins outright.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            let retagged = TAG_KEYS.iter().any(|k| t.get(*k).is_some_and(|v| b.get(*k).is_some_and(|old| old != v)));
            if retagged {
                *b = t;
                return;
            }
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, top) => *slot = top,
    }
}

/// Parses the right-hand side of an override: JSON when it parses, a bare
/// string otherwise.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies one `a.b.c=value` override.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{spec}` is not of the form key=value")))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(config_err(format!("bad override key `{path}`")));
    }
    let mut patch = parse_value(raw);
    for k in keys.iter().rev() {
        let mut m = Map::new();
        m.insert(k.to_string(), patch);
        patch = Value::Object(m);
    }
    // A `null` object slot (an unset optional section) is replaced, not merged.
    let mut node = &mut *root;
    for k in &keys[..keys.len() - 1] {
        match node {
            Value::Object(m) => {
                let slot = m.entry(k.to_string()).or_insert(Value::Null);
                if slot.is_null() {
                    *slot = Value::Object(Map::new());
                }
                node = slot;
            }
            _ => return Err(config_err(format!("`{path}`: `{k}` is not a section"))),
        }
    }
    merge(root, patch);
    Ok(())
}

/// Builds a `T` from its defaults, an optional JSON file and overrides.
/// Unknown keys are rejected by `T`'s deserializer.
pub fn load<T: Serialize + DeserializeOwned + Default>(file: Option<&Path>, overrides: &[String]) -> Result<T> {
    let mut value = serde_json::to_value(T::default())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let top: Value =
            serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        merge(&mut value, top);
    }
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    serde_json::from_value(value).map_err(|e| config_err(e.to_string()))
}

/// Dotted leaf paths of `value` with their JSON renderings, in order.
pub fn flatten(value: &Value) -> Vec<(String, String)> {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
        match v {
            Value::Object(m) if !m.is_empty() => {
                for (k, child) in m {
                    let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&p, child, out);
                }
            }
            other => out.push((prefix.to_string(), other.to_string())),
        }
    }
    let mut out = Vec::new();
    walk("", value, &mut out);
    out
}

/// One documented configuration key.
pub struct KeyDoc {
    pub key: &'static str,
    pub doc: &'static str,
}

/// Documented keys of a command: the keys of its default configuration plus
/// keys that only exist in alternative variants (`variants`).
pub struct Schema {
    pub defaults: Value,
    pub variants: Vec<Value>,
    pub docs: Vec<&'static KeyDoc>,
}

impl Schema {
    pub fn new<T: Serialize + Default>(variants: Vec<Value>, docs: &[&'static [KeyDoc]]) -> Self {
        Self {
            defaults: serde_json::to_value(T::default()).expect("config serializes"),
            variants,
            docs: docs.iter().flat_map(|d| d.iter()).collect(),
        }
    }

    /// Every key reachable in the schema with its default rendering;
    /// variant-only keys show the variant's value.
    pub fn keys(&self) -> Vec<(String, String)> {
        let mut keys = flatten(&self.defaults);
        for v in &self.variants {
            for (k, d) in flatten(v) {
                if !keys.iter().any(|(have, _)| *have == k) {
                    keys.push((k, d));
                }
            }
        }
        keys
    }

    pub fn help(&self) -> String {
        let mut s = String::from("Configuration keys (set with --set key=value or a --config JSON file):\n");
        for (key, default) in self.keys() {
            let doc = self.docs.iter().find(|d| d.key == key).map_or("", |d| d.doc);
            s.push_str(&format!("  {key} = {default}\n      {doc}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;
    use serde_json::json;

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields, default)]
    struct Inner {
        a: u32,
        b: Option<f64>,
    }

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields, default)]
    struct Outer {
        x: String,
        inner: Inner,
    }

    #[test]
    fn precedence_is_defaults_file_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"x": "file", "inner": {"a": 3}}"#).unwrap();
        let c: Outer = load(Some(&path), &["inner.a=7".into()]).unwrap();
        assert_eq!(c, Outer { x: "file".into(), inner: Inner { a: 7, b: None } });
        let c: Outer = load(None, &["inner.b=0.5".into(), "x=plain text".into()]).unwrap();
        assert_eq!(c.inner.b, Some(0.5));
        assert_eq!(c.x, "plain text");
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(load::<Outer>(None, &["inner.z=1".into()]), Err(Error::Config(_))));
        assert!(load::<Outer>(None, &["nokey".into()]).is_err());
        assert!(load::<Outer>(None, &["x.y=1".into()]).is_err());
    }

    #[test]
    fn tag_change_replaces_object() {
        let mut v = json!({"p": {"kind": "synthetic", "noise": 0.25}});
        apply_override(&mut v, "p.kind=file").unwrap();
        assert_eq!(v, json!({"p": {"kind": "file"}}));
        apply_override(&mut v, "p.dir=/tmp/x").unwrap();
        assert_eq!(v, json!({"p": {"kind": "file", "dir": "/tmp/x"}}));
        let mut v = json!({"p": {"kind": "synthetic", "noise": 0.25}});
        merge(&mut v, json!({"p": {"kind": "synthetic", "noise": 0.5}}));
        assert_eq!(v, json!({"p": {"kind": "synthetic", "noise": 0.5}}));
    }

    #[test]
    fn null_sections_accept_nested_keys() {
        let mut v = json!({"opt": null});
        apply_override(&mut v, "opt.kind=file").unwrap();
        assert_eq!(v, json!({"opt": {"kind": "file"}}));
    }

    #[test]
    fn flatten_lists_leaves() {
        let v = json!({"a": 1, "b": {"c": [1, 2], "d": null}, "e": {}});
        let keys: Vec<String> = flatten(&v).into_iter().map(|(k, _)| k).collect();
        assert_eq!(keys, ["a", "b.c", "b.d", "e"]);
    }
}
