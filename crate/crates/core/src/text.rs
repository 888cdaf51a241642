//! Small text helpers shared by the file formats: fixed-precision float
//! formatting and the flat `key = value` config syntax.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

/// 17 significant digits; parses back to the identical `f64`.
pub fn f17(x: f64) -> String {
    format!("{:.16e}", x)
}

/// Rounds to `digits` significant digits and prints the shortest decimal
/// that represents the rounded value (`0`, `1`, `0.123456789`, ...).
pub fn sig(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{}", if x == 0.0 { 0.0 } else { x });
    }
    let s = format!("{:.*e}", digits.saturating_sub(1), x);
    let v: f64 = s.parse().unwrap_or(x);
    format!("{}", v)
}

/// Flat `key = value` text. `#` starts a comment; blank lines are skipped.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (String, usize)>,
    origin: String,
}

impl KeyValues {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(origin, i + 1, format!("expected `key = value`, got `{line}`")))?;
            entries.insert(k.trim().to_string(), (v.trim().to_string(), i + 1));
        }
        Ok(KeyValues {
            entries,
            origin: origin.to_string(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn insert(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), (value.to_string(), 0));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn f64(&self, key: &str) -> Result<Option<f64>> {
        self.typed(key, |v| v.parse::<f64>().ok())
    }

    pub fn u64(&self, key: &str) -> Result<Option<u64>> {
        self.typed(key, |v| v.parse::<u64>().ok())
    }

    pub fn bool(&self, key: &str) -> Result<Option<bool>> {
        self.typed(key, |v| match v {
            "true" | "1" | "yes" => Some(true),
            "false" | "0" | "no" => Some(false),
            _ => None,
        })
    }

    /// Comma- or whitespace-separated list of exactly `N` floats.
    pub fn array<const N: usize>(&self, key: &str) -> Result<Option<[f64; N]>> {
        self.typed(key, |v| {
            let parts: Vec<f64> = v
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .ok()?;
            parts.try_into().ok()
        })
    }

    fn typed<T>(&self, key: &str, conv: impl Fn(&str) -> Option<T>) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, line)) => conv(v)
                .map(Some)
                .ok_or_else(|| Error::parse(&self.origin, *line, format!("bad value for `{key}`: `{v}`"))),
        }
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, (v, _))| format!("{k} = {v}\n")).collect()
    }
}

/// Comma-separated numeric rows with their 1-based line numbers. Fields are
/// trimmed; lines starting with `#` are skipped, as is a first row whose
/// leading field is not a number (a header).
pub(crate) fn csv_rows(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut rows = Vec::new();
    let mut first = true;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(|f| f.trim().to_string()).collect();
        let header = first && fields[0].parse::<f64>().is_err();
        first = false;
        if !header {
            rows.push((i + 1, fields));
        }
    }
    Ok(rows)
}

/// Parses every field of a row as `f64`, requiring exactly `n` of them.
pub(crate) fn parse_floats(path: &Path, line: usize, fields: &[String], n: usize) -> Result<Vec<f64>> {
    if fields.len() != n {
        return Err(Error::parse(
            path,
            line,
            format!("expected {n} fields, found {}", fields.len()),
        ));
    }
    fields
        .iter()
        .map(|f| {
            f.parse::<f64>()
                .map_err(|_| Error::parse(path, line, format!("`{f}` is not a number")))
        })
        .collect()
}
