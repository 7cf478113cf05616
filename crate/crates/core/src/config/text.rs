//! Flat `key = value` text with `[section]` headers.
//!
//! Blank lines and lines starting with `#` or `;` are ignored. Keys are
//! unique within a section and sections are unique within a document.
//! Every error names the offending line, and the key where there is one.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    /// 1-based source line.
    pub line: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    pub line: usize,
    pub entries: Vec<Entry>,
}

impl Section {
    pub fn new(name: impl Into<String>) -> Self {
        Section {
            name: name.into(),
            line: 0,
            entries: Vec::new(),
        }
    }

    pub fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.key == key)
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push(Entry {
            key: key.into(),
            value: value.to_string(),
            line: 0,
        });
    }

    pub fn reader(&self) -> SectionReader<'_> {
        SectionReader {
            section: self,
            used: vec![false; self.entries.len()],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Document {
    pub sections: Vec<Section>,
}

impl Document {
    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: Vec<Section> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.trim();
            if s.is_empty() || s.starts_with('#') || s.starts_with(';') {
                continue;
            }
            if let Some(rest) = s.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::config(format!("line {line}: unterminated section header '{s}'")))?
                    .trim();
                if name.is_empty() || !name.chars().all(is_name_char) {
                    return Err(Error::config(format!("line {line}: invalid section name '{name}'")));
                }
                if let Some(prev) = sections.iter().find(|x| x.name == name) {
                    return Err(Error::config(format!(
                        "line {line}: section [{name}] already opened on line {}",
                        prev.line
                    )));
                }
                sections.push(Section {
                    name: name.to_string(),
                    line,
                    entries: Vec::new(),
                });
                continue;
            }
            let (key, value) = s
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {line}: expected 'key = value', found '{s}'")))?;
            let key = key.trim();
            if key.is_empty() || !key.chars().all(is_name_char) {
                return Err(Error::config(format!("line {line}: invalid key '{key}'")));
            }
            let section = sections
                .last_mut()
                .ok_or_else(|| Error::config(format!("line {line}: key '{key}' appears before any [section]")))?;
            if let Some(prev) = section.get(key) {
                return Err(Error::config(format!(
                    "line {line}: key '{key}' repeated in [{}] (first set on line {})",
                    section.name, prev.line
                )));
            }
            section.entries.push(Entry {
                key: key.to_string(),
                value: value.trim().to_string(),
                line,
            });
        }
        Ok(Document { sections })
    }

    /// Canonical text form; parsing it yields the same sections and entries.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.sections.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "[{}]", s.name);
            for e in &s.entries {
                let _ = writeln!(out, "{} = {}", e.key, e.value);
            }
        }
        out
    }

    /// Re-parses the rendered form so entry line numbers are meaningful.
    pub fn renumbered(&self) -> Result<Self> {
        Document::parse(&self.render())
    }

    /// Sections keyed by name, for callers that only need lookup.
    pub fn by_name(&self) -> BTreeMap<&str, &Section> {
        self.sections.iter().map(|s| (s.name.as_str(), s)).collect()
    }
}

fn is_name_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.'
}

/// Typed access to a section that remembers which keys were consumed, so
/// that leftovers can be reported as unknown keys.
pub struct SectionReader<'a> {
    section: &'a Section,
    used: Vec<bool>,
}

impl SectionReader<'_> {
    fn find(&mut self, key: &str) -> Option<&Entry> {
        let i = self.section.entries.iter().position(|e| e.key == key)?;
        self.used[i] = true;
        Some(&self.section.entries[i])
    }

    fn bad(&self, e: &Entry, why: impl std::fmt::Display) -> Error {
        Error::config(format!(
            "line {}: invalid value '{}' for key '{}' in [{}]: {why}",
            e.line, e.value, e.key, self.section.name
        ))
    }

    pub fn opt<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        let Some(e) = self.find(key).cloned() else {
            return Ok(None);
        };
        e.value.parse::<T>().map(Some).map_err(|err| self.bad(&e, err))
    }

    pub fn or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.opt(key)?.unwrap_or(default))
    }

    pub fn required<T: FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.opt(key)?.ok_or_else(|| {
            Error::config(format!(
                "line {}: section [{}] is missing required key '{key}'",
                self.section.line, self.section.name
            ))
        })
    }

    /// Comma-separated list; an empty value is an empty list.
    pub fn list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        let Some(e) = self.find(key).cloned() else {
            return Ok(None);
        };
        if e.value.trim().is_empty() {
            return Ok(Some(Vec::new()));
        }
        e.value
            .split(',')
            .map(|item| item.trim().parse::<T>().map_err(|err| self.bad(&e, err)))
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Wraps a semantic check failure with the key's line.
    pub fn reject(&self, key: &str, why: impl std::fmt::Display) -> Error {
        match self.section.get(key) {
            Some(e) => self.bad(e, why),
            None => Error::config(format!("[{}] key '{key}': {why}", self.section.name)),
        }
    }

    /// Errors on the first key never read.
    pub fn finish(self) -> Result<()> {
        match self.used.iter().position(|u| !u) {
            None => Ok(()),
            Some(i) => {
                let e = &self.section.entries[i];
                Err(Error::config(format!(
                    "line {}: unknown key '{}' in [{}]",
                    e.line, e.key, self.section.name
                )))
            }
        }
    }
}
