use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;

/// Long-tail frequency group of a class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    #[serde(alias = "r")]
    Rare,
    #[serde(alias = "c")]
    Common,
    #[serde(alias = "f")]
    Frequent,
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Bucket::Rare => "rare",
            Bucket::Common => "common",
            Bucket::Frequent => "frequent",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: String,
    pub name: String,
    #[serde(default)]
    pub synset: Option<String>,
    pub bucket: Bucket,
    /// Class has image-level (weak) supervision.
    #[serde(default)]
    pub weak: bool,
}

impl ClassEntry {
    pub fn new(id: impl Into<String>, name: impl Into<String>, bucket: Bucket) -> Self {
        Self {
            id: id.into(),
            name: name.into(),
            synset: None,
            bucket,
            weak: false,
        }
    }

    pub fn with_synset(mut self, synset: impl Into<String>) -> Self {
        self.synset = Some(synset.into());
        self
    }

    pub fn with_weak(mut self, weak: bool) -> Self {
        self.weak = weak;
        self
    }
}

/// Ordered set of classes with unique, nonempty ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocabulary {
    entries: Vec<ClassEntry>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(entries: Vec<ClassEntry>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.id.is_empty() {
                return Err(Error::Validation(format!("class {i} has an empty id")));
            }
            if index.insert(e.id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate class id `{}`", e.id)));
            }
        }
        Ok(Self { entries, index })
    }

    /// Vocabulary whose ids and names are `ids`, all in `bucket`.
    pub fn from_ids<I, S>(ids: I, bucket: Bucket) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(
            ids.into_iter()
                .map(|s| {
                    let id: String = s.into();
                    ClassEntry::new(id.clone(), id, bucket)
                })
                .collect(),
        )
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ClassEntry> {
        self.index.get(id).map(|&i| &self.entries[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn parse_jsonl(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ClassEntry = serde_json::from_str(line).map_err(|e| Error::Line {
                line: i + 1,
                message: e.to_string(),
            })?;
            entries.push(e);
        }
        Self::new(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_jsonl(&fs::read_to_string(path)?)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("plain struct"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_jsonl().as_bytes())
    }
}
