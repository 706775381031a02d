//! Settings come from three layers: built-in defaults, an optional TOML file
//! (one table per subcommand) and command-line flags. Later layers win.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::fail::{usage, Classify, Result};

fn overlay(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => overlay(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

/// Merge defaults, the `[section]` table of `file` and `flags`. Flags that
/// serialize as `null` are treated as unset.
pub fn merge<T, F>(section: &str, file: Option<&Path>, flags: &F) -> Result<T>
where
    T: Serialize + DeserializeOwned + Default,
    F: Serialize,
{
    let mut v = serde_json::to_value(T::default()).expect("settings serialize");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).io(format!("reading {}", path.display()))?;
        let doc: toml::Table = toml::from_str(&text).usage(format!("parsing {}", path.display()))?;
        if let Some(t) = doc.get(section) {
            let t = serde_json::to_value(t).usage("config table")?;
            if !t.is_object() {
                return Err(usage(format!("[{section}] in {} is not a table", path.display())));
            }
            overlay(&mut v, t);
        }
    }
    let mut flags = serde_json::to_value(flags).expect("flags serialize");
    if let Value::Object(m) = &mut flags {
        m.retain(|_, v| !v.is_null());
    }
    overlay(&mut v, flags);
    serde_json::from_value(v).usage(format!("[{section}] settings"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Serialize, Deserialize, Debug, PartialEq)]
    #[serde(default)]
    struct S {
        a: u32,
        b: String,
        c: f64,
    }

    impl Default for S {
        fn default() -> Self {
            Self {
                a: 1,
                b: "x".into(),
                c: 0.5,
            }
        }
    }

    #[derive(Serialize)]
    struct Flags {
        a: Option<u32>,
        b: Option<String>,
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "[train]\na = 5\nc = 2.0\n[other]\na = 9\n").unwrap();
        let s: S = merge(
            "train",
            Some(&p),
            &Flags {
                a: Some(7),
                b: None,
            },
        )
        .unwrap();
        assert_eq!(
            s,
            S {
                a: 7,
                b: "x".into(),
                c: 2.0
            }
        );
        let bad = dir.path().join("bad.toml");
        std::fs::write(&bad, "[train]\na = \"no\"\n").unwrap();
        let r: Result<S> = merge("train", Some(&bad), &Flags { a: None, b: None });
        assert_eq!(r.unwrap_err().code(), 2);
    }
}
