//! Flat `key = value` configuration text.
//!
//! Blank lines and lines starting with `#` are ignored. Every section type
//! claims the keys it knows; a key nobody claims is an error.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// A group of config keys.
pub trait KvSection {
    /// Apply one assignment. `Ok(false)` means the key belongs elsewhere.
    fn set(&mut self, key: &str, value: &str) -> Result<bool>;

    /// Every key with its current value.
    fn pairs(&self) -> Vec<(&'static str, String)>;
}

/// `(line number, key, value)` triples in file order.
pub fn parse_kv(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    let mut seen = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected 'key = value', got '{line}'"),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                msg: "empty key".into(),
            });
        }
        if let Some(prev) = seen.insert(k.to_string(), i + 1) {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("key '{k}' already set on line {prev}"),
            });
        }
        out.push((i + 1, k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Parse `value` for `key`, naming the key on failure.
pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::config(format!("{key}: cannot parse '{value}': {e}")))
}

/// Split a `key=value` override.
pub fn split_override(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::Usage(format!("override '{s}' is not of the form key=value"))),
    }
}

/// Assign `(key, value)` to the first section that claims it.
pub fn dispatch(sections: &mut [&mut dyn KvSection], key: &str, value: &str) -> Result<()> {
    for s in sections.iter_mut() {
        if s.set(key, value)? {
            return Ok(());
        }
    }
    Err(Error::config(format!("{key}: unknown config key")))
}

/// Canonical text: one `key = value` line per key, sorted by key.
pub fn render(sections: &[&dyn KvSection]) -> String {
    let mut all: Vec<(&str, String)> = sections.iter().flat_map(|s| s.pairs()).collect();
    all.sort();
    all.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Default, Debug, PartialEq)]
    struct Toy {
        a: usize,
        b: f64,
    }

    impl KvSection for Toy {
        fn set(&mut self, key: &str, value: &str) -> Result<bool> {
            match key {
                "a" => self.a = parse_value(key, value)?,
                "b" => self.b = parse_value(key, value)?,
                _ => return Ok(false),
            }
            Ok(true)
        }

        fn pairs(&self) -> Vec<(&'static str, String)> {
            vec![("b", self.b.to_string()), ("a", self.a.to_string())]
        }
    }

    #[test]
    fn parse_and_render_round_trip() {
        let kv = parse_kv("# comment\n\na = 3\n b=0.1 \n").unwrap();
        let mut t = Toy::default();
        for (_, k, v) in &kv {
            dispatch(&mut [&mut t], k, v).unwrap();
        }
        assert_eq!(t, Toy { a: 3, b: 0.1 });
        assert_eq!(render(&[&t]), "a = 3\nb = 0.1\n");
    }

    #[test]
    fn errors_name_line_and_key() {
        let err = parse_kv("a = 1\nnonsense\n").unwrap_err();
        assert!(err.to_string().contains('2'), "{err}");
        assert!(parse_kv("a = 1\na = 2\n").is_err());
        let mut t = Toy::default();
        let err = dispatch(&mut [&mut t], "c", "1").unwrap_err();
        assert!(err.to_string().contains("c:"), "{err}");
        let err = dispatch(&mut [&mut t], "a", "x").unwrap_err();
        assert!(err.is_config() && err.to_string().contains("a:"));
    }

    #[test]
    fn overrides_need_an_equals_sign() {
        assert_eq!(split_override("lr=0.1").unwrap(), ("lr".into(), "0.1".into()));
        assert!(split_override("lr").is_err());
    }
}
