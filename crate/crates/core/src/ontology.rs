//! Cross-dataset category resolution.
//!
//! Labels are matched exactly after normalization against a curated alias
//! file; there is no fuzzy matching.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryAlias {
    pub canonical: String,
    pub source_dataset: String,
    pub source_label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Resolution {
    Class(String),
    NoMatch,
}

impl Resolution {
    pub fn class(&self) -> Option<&str> {
        match self {
            Resolution::Class(c) => Some(c),
            Resolution::NoMatch => None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AliasTable {
    entries: Vec<CategoryAlias>,
    index: BTreeMap<(String, String), usize>,
    canonical_set: BTreeSet<String>,
}

/// Lowercase, map `_`/`-` to spaces, trim, and collapse whitespace runs.
pub fn normalize_label(raw: &str) -> String {
    raw.to_lowercase()
        .replace(['_', '-'], " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn dataset_key(dataset: &str) -> String {
    dataset.trim().to_lowercase()
}

impl AliasTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, canonical: &str, dataset: &str, label: &str) -> Result<()> {
        let canonical = normalize_label(canonical);
        if canonical.is_empty() {
            return Err(Error::Config(format!(
                "empty canonical class for ({dataset}, {label})"
            )));
        }
        let key = (dataset_key(dataset), normalize_label(label));
        if self.index.contains_key(&key) {
            return Err(Error::DuplicateAlias {
                dataset: key.0,
                label: key.1,
            });
        }
        self.index.insert(key.clone(), self.entries.len());
        self.canonical_set.insert(canonical.clone());
        self.entries.push(CategoryAlias {
            canonical,
            source_dataset: key.0,
            source_label: key.1,
        });
        Ok(())
    }

    pub fn resolve(&self, dataset: &str, raw_label: &str) -> Resolution {
        let key = (dataset_key(dataset), normalize_label(raw_label));
        match self.index.get(&key) {
            Some(&i) => Resolution::Class(self.entries[i].canonical.clone()),
            None => Resolution::NoMatch,
        }
    }

    pub fn entries(&self) -> &[CategoryAlias] {
        &self.entries
    }

    pub fn canonical_set(&self) -> &BTreeSet<String> {
        &self.canonical_set
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Canonical classes with at least one alias in each of the two dataset
    /// groups.
    pub fn joinable_classes(&self, visual: &[&str], audio: &[&str]) -> BTreeSet<String> {
        let in_group = |group: &[&str], class: &str| {
            self.entries.iter().any(|e| {
                e.canonical == class && group.iter().any(|g| dataset_key(g) == e.source_dataset)
            })
        };
        self.canonical_set
            .iter()
            .filter(|c| in_group(visual, c) && in_group(audio, c))
            .cloned()
            .collect()
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut table = AliasTable::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Parse {
                    path: origin.to_string(),
                    line: lineno,
                    msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
            }
            if fields.iter().any(|f| f.trim().is_empty()) {
                return Err(Error::Parse {
                    path: origin.to_string(),
                    line: lineno,
                    msg: "empty field".into(),
                });
            }
            table.insert(fields[0], fields[1], fields[2])?;
        }
        Ok(table)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("# canonical\tdataset\tsource_label\n");
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\n", e.canonical, e.source_dataset, e.source_label));
        }
        out
    }
}

pub fn load_alias_table(path: &Path) -> Result<AliasTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    AliasTable::parse(&text, &path.display().to_string())
}
