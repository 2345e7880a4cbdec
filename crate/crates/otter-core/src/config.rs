//! Flat `key = value` configuration files.
//!
//! One assignment per line; `#` starts a comment. Keys use dotted prefixes
//! for grouping (`augment.mosaic_p`). Parse errors carry the line number.

use std::collections::HashMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct KvMap {
    pairs: Vec<(String, String)>,
    index: HashMap<String, usize>,
    source: String,
}

impl KvMap {
    pub fn new(source: impl Into<String>) -> Self {
        KvMap {
            pairs: Vec::new(),
            index: HashMap::new(),
            source: source.into(),
        }
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut map = KvMap::new(source);
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::parse(
                    source,
                    lineno + 1,
                    format!("expected `key = value`, got '{line}'"),
                ));
            };
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() {
                return Err(Error::parse(source, lineno + 1, "empty key"));
            }
            if map.index.contains_key(key) {
                return Err(Error::parse(
                    source,
                    lineno + 1,
                    format!("duplicate key '{key}'"),
                ));
            }
            map.set(key, value);
        }
        Ok(map)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        match self.index.get(key) {
            Some(&i) => self.pairs[i].1 = value.to_string(),
            None => {
                self.index.insert(key.to_string(), self.pairs.len());
                self.pairs.push((key.to_string(), value.to_string()));
            }
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.index.get(key).map(|&i| self.pairs[i].1.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("{}: missing key '{key}'", self.source)))
    }

    /// Parse `key` if present, else return `default`.
    pub fn field<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| {
                Error::Config(format!("{}: bad value '{v}' for key '{key}'", self.source))
            }),
        }
    }

    /// Parse a required `key`.
    pub fn field_req<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.require(key)?;
        v.parse()
            .map_err(|_| Error::Config(format!("{}: bad value '{v}' for key '{key}'", self.source)))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|(k, _)| k.as_str())
    }

    /// Stable rendering: insertion order, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.pairs {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blank_lines() {
        let text = "# top comment\n\nwidth = 16\nlr = 0.01  # inline\n";
        let map = KvMap::parse(text, "test.cfg").unwrap();
        assert_eq!(map.get("width"), Some("16"));
        assert_eq!(map.field::<f64>("lr", 0.0).unwrap(), 0.01);
    }

    #[test]
    fn error_carries_line_number() {
        let text = "ok = 1\nbroken line\n";
        let err = KvMap::parse(text, "test.cfg").unwrap_err();
        assert!(err.to_string().contains("test.cfg:2:"), "{err}");
    }

    #[test]
    fn duplicate_keys_rejected() {
        let err = KvMap::parse("a = 1\na = 2\n", "d.cfg").unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }

    #[test]
    fn bad_typed_value_reports_key() {
        let map = KvMap::parse("width = banana\n", "t.cfg").unwrap();
        let err = map.field::<usize>("width", 1).unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
    }

    #[test]
    fn round_trip_text() {
        let mut map = KvMap::new("mem");
        map.set("b", 2);
        map.set("a", 1);
        let text = map.to_text();
        assert_eq!(text, "b = 2\na = 1\n");
        let again = KvMap::parse(&text, "mem").unwrap();
        assert_eq!(again.get("a"), Some("1"));
    }
}
