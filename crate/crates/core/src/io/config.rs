//! Flat `key = value` config files checked against a per-command schema.
//!
//! `#` starts a comment; blank lines are ignored. Floats accept simple
//! fractions such as `1/16`; lists are comma separated.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Float,
    Int,
    Bool,
    Str,
    FloatList,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Default {
    Required,
    /// Optional with no value unless given.
    Unset,
    Value(&'static str),
}

#[derive(Clone, Copy, Debug)]
pub struct Key {
    pub name: &'static str,
    pub kind: Kind,
    pub default: Default,
    pub doc: &'static str,
}

#[derive(Debug)]
pub struct Schema {
    pub name: &'static str,
    pub keys: &'static [Key],
}

impl Schema {
    pub fn key(&self, name: &str) -> Option<&Key> {
        self.keys.iter().find(|k| k.name == name)
    }
}

pub fn parse_f64(s: &str) -> Option<f64> {
    match s.split_once('/') {
        Some((a, b)) => {
            let (a, b) = (a.trim().parse::<f64>().ok()?, b.trim().parse::<f64>().ok()?);
            (b != 0.0).then_some(a / b)
        }
        None => s.parse().ok(),
    }
}

fn check(key: &Key, value: &str) -> Result<()> {
    let ok = match key.kind {
        Kind::Float => parse_f64(value).is_some_and(f64::is_finite),
        Kind::Int => value.parse::<u64>().is_ok(),
        Kind::Bool => matches!(value, "true" | "false"),
        Kind::Str => !value.is_empty(),
        Kind::FloatList => value.split(',').all(|v| parse_f64(v.trim()).is_some_and(f64::is_finite)),
    };
    if ok {
        Ok(())
    } else {
        let want = match key.kind {
            Kind::Float => "a finite number",
            Kind::Int => "a non-negative integer",
            Kind::Bool => "`true` or `false`",
            Kind::Str => "a non-empty string",
            Kind::FloatList => "a comma-separated list of numbers",
        };
        Err(Error::config(key.name, format!("expected {want}, got `{value}`")))
    }
}

/// A validated config with every default materialized.
#[derive(Clone, Debug)]
pub struct Config {
    schema: &'static Schema,
    values: BTreeMap<&'static str, String>,
    defaulted: Vec<&'static str>,
}

impl Config {
    pub fn parse_str(text: &str, schema: &'static Schema) -> Result<Self> {
        Self::parse_with(text, schema, &[])
    }

    /// As [`Config::parse_str`], with `overrides` replacing or adding keys
    /// before defaults and required keys are resolved.
    pub fn parse_with(text: &str, schema: &'static Schema, overrides: &[(String, String)]) -> Result<Self> {
        let mut given: BTreeMap<String, String> = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::config(format!("line {}", no + 1), format!("expected `key = value`, got `{line}`")));
            };
            let (k, v) = (k.trim(), v.trim());
            if given.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::config(k, "given more than once"));
            }
        }
        for (k, v) in overrides {
            given.insert(k.clone(), v.clone());
        }
        let unknown: Vec<&str> = given.keys().map(String::as_str).filter(|k| schema.key(k).is_none()).collect();
        if !unknown.is_empty() {
            return Err(Error::config(unknown.join(", "), format!("unknown key(s) for `{}`", schema.name)));
        }
        let mut values = BTreeMap::new();
        let mut defaulted = Vec::new();
        for key in schema.keys {
            match (given.remove(key.name), key.default) {
                (Some(v), _) => {
                    check(key, &v)?;
                    values.insert(key.name, v);
                }
                (None, Default::Value(d)) => {
                    values.insert(key.name, d.to_string());
                    defaulted.push(key.name);
                }
                (None, Default::Unset) => {}
                (None, Default::Required) => return Err(Error::config(key.name, "required key is missing")),
            }
        }
        Ok(Self {
            schema,
            values,
            defaulted,
        })
    }

    pub fn load(path: &Path, schema: &'static Schema) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text, schema)
    }

    pub fn schema(&self) -> &'static Schema {
        self.schema
    }

    /// Keys that took their default value.
    pub fn defaulted(&self) -> &[&'static str] {
        &self.defaulted
    }

    /// Overrides a key after parsing, with the same checks.
    pub fn set(&mut self, name: &str, value: &str) -> Result<()> {
        let key = self
            .schema
            .key(name)
            .ok_or_else(|| Error::config(name, format!("unknown key for `{}`", self.schema.name)))?;
        check(key, value)?;
        self.values.insert(key.name, value.to_string());
        self.defaulted.retain(|k| *k != name);
        Ok(())
    }

    pub fn has(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn raw(&self, name: &str) -> Option<&str> {
        self.values.get(name).map(String::as_str)
    }

    fn get(&self, name: &str) -> Result<&str> {
        self.raw(name).ok_or_else(|| Error::config(name, "no value"))
    }

    pub fn f64(&self, name: &str) -> Result<f64> {
        self.get(name).map(|v| parse_f64(v).unwrap())
    }

    pub fn opt_f64(&self, name: &str) -> Result<Option<f64>> {
        Ok(self.raw(name).map(|v| parse_f64(v).unwrap()))
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        self.get(name).map(|v| v.parse().unwrap())
    }

    pub fn usize(&self, name: &str) -> Result<usize> {
        let v = self.u64(name)?;
        usize::try_from(v).map_err(|_| Error::config(name, "value too large"))
    }

    pub fn bool(&self, name: &str) -> Result<bool> {
        self.get(name).map(|v| v == "true")
    }

    pub fn str(&self, name: &str) -> Result<&str> {
        self.get(name)
    }

    pub fn f64_list(&self, name: &str) -> Result<Vec<f64>> {
        self.get(name).map(|v| v.split(',').map(|x| parse_f64(x.trim()).unwrap()).collect())
    }

    /// Canonical text: every key with a value, in schema order.
    pub fn to_text(&self) -> String {
        let mut s = format!("# {} config\n", self.schema.name);
        for key in self.schema.keys {
            if let Some(v) = self.values.get(key.name) {
                s.push_str(&format!("{} = {}\n", key.name, v));
            }
        }
        s
    }
}

/// Human-readable listing of a schema, used by `--help` style output.
pub fn describe(schema: &Schema) -> String {
    let mut s = String::new();
    for k in schema.keys {
        let d = match k.default {
            Default::Required => "required".to_string(),
            Default::Unset => "optional".to_string(),
            Default::Value(v) => format!("default {v}"),
        };
        s.push_str(&format!("  {:<22} {} ({d})\n", k.name, k.doc));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    static TEST: Schema = Schema {
        name: "test",
        keys: &[
            Key {
                name: "n",
                kind: Kind::Int,
                default: Default::Required,
                doc: "",
            },
            Key {
                name: "h",
                kind: Kind::Float,
                default: Default::Value("1/32"),
                doc: "",
            },
            Key {
                name: "list",
                kind: Kind::FloatList,
                default: Default::Unset,
                doc: "",
            },
            Key {
                name: "flag",
                kind: Kind::Bool,
                default: Default::Value("false"),
                doc: "",
            },
        ],
    };

    #[test]
    fn defaults_are_materialized() {
        let c = Config::parse_str("n = 64  # grid\n\n", &TEST).unwrap();
        assert_eq!(c.usize("n").unwrap(), 64);
        assert_eq!(c.f64("h").unwrap(), 1.0 / 32.0);
        assert!(!c.has("list"));
        assert_eq!(c.defaulted(), &["h", "flag"]);
        assert_eq!(c.to_text(), "# test config\nn = 64\nh = 1/32\nflag = false\n");
        let again = Config::parse_str(&c.to_text(), &TEST).unwrap();
        assert_eq!(again.to_text(), c.to_text());
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = Config::parse_str("n = 4\nfoo = 1\nbar = 2", &TEST).unwrap_err();
        match e {
            Error::Config { key, .. } => assert_eq!(key, "bar, foo"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn type_errors_name_the_key() {
        for (text, bad) in [("n = -4", "n"), ("n = 4\nh = x", "h"), ("n = 4\nflag = 1", "flag"), ("n=4\nlist = 1,,2", "list"), ("h = 1", "n")] {
            match Config::parse_str(text, &TEST).unwrap_err() {
                Error::Config { key, .. } => assert_eq!(key, bad, "{text}"),
                e => panic!("{e}"),
            }
        }
        assert!(Config::parse_str("n = 4\nn = 5", &TEST).is_err());
        assert!(Config::parse_str("n 4", &TEST).is_err());
    }

    #[test]
    fn lists_and_overrides() {
        let mut c = Config::parse_str("n = 4\nlist = 1, 1/2 ,3e-1", &TEST).unwrap();
        assert_eq!(c.f64_list("list").unwrap(), vec![1.0, 0.5, 0.3]);
        c.set("h", "0.25").unwrap();
        assert_eq!(c.f64("h").unwrap(), 0.25);
        assert!(c.set("h", "abc").is_err());
        assert!(c.set("zzz", "1").is_err());
    }

    #[test]
    fn command_line_overrides_fill_required_keys() {
        let o = vec![("n".to_string(), "8".to_string()), ("h".to_string(), "0.5".to_string())];
        let c = Config::parse_with("h = 1/4", &TEST, &o).unwrap();
        assert_eq!(c.usize("n").unwrap(), 8);
        assert_eq!(c.f64("h").unwrap(), 0.5);
        let bad = vec![("nope".to_string(), "1".to_string())];
        assert!(Config::parse_with("n = 4", &TEST, &bad).is_err());
    }
}
