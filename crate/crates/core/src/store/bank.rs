//! Embedding banks and their `OVEB` file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "OVEB" | version u16 = 1 | dimension u32 | class count u32
//! per class:  id length u16 | id UTF-8 | record count u32
//!   per record: source tag u8 | augmentation index u16 | dimension x f32
//! ```
//!
//! Classes are written in lexicographic id order, records in insertion order,
//! so equal banks always serialize to identical bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::io::{read_header, write_atomic, Reader, Writer};

pub const BANK_MAGIC: &[u8; 4] = b"OVEB";
pub const BANK_VERSION: u16 = 1;

/// Where an embedding came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceTag {
    In21k,
    DetectionBox,
    Visualgenome,
    ManualAlias,
    Synthetic,
}

impl SourceTag {
    pub const ALL: [SourceTag; 5] = [
        SourceTag::In21k,
        SourceTag::DetectionBox,
        SourceTag::Visualgenome,
        SourceTag::ManualAlias,
        SourceTag::Synthetic,
    ];

    pub fn code(self) -> u8 {
        match self {
            SourceTag::In21k => 0,
            SourceTag::DetectionBox => 1,
            SourceTag::Visualgenome => 2,
            SourceTag::ManualAlias => 3,
            SourceTag::Synthetic => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SourceTag::In21k => "in21k",
            SourceTag::DetectionBox => "detection-box",
            SourceTag::Visualgenome => "visualgenome",
            SourceTag::ManualAlias => "manual-alias",
            SourceTag::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankRecord {
    pub embedding: Vec<f32>,
    pub source: SourceTag,
    pub augmentation: u16,
}

impl BankRecord {
    pub fn new(embedding: Vec<f32>, source: SourceTag, augmentation: u16) -> Self {
        Self {
            embedding,
            source,
            augmentation,
        }
    }
}

/// Class id → embeddings, all of one dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBank {
    dimension: usize,
    classes: BTreeMap<String, Vec<BankRecord>>,
}

impl EmbeddingBank {
    pub fn new(dimension: usize) -> Result<Self> {
        if dimension == 0 || dimension > u32::MAX as usize {
            return Err(Error::Parameter(format!("invalid bank dimension {dimension}")));
        }
        Ok(Self {
            dimension,
            classes: BTreeMap::new(),
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Appends a record, checking its length and finiteness.
    pub fn push(&mut self, class: impl Into<String>, record: BankRecord) -> Result<()> {
        let class = class.into();
        if class.is_empty() {
            return Err(Error::Validation("empty class id".into()));
        }
        let index = self.classes.get(&class).map_or(0, Vec::len);
        check_embedding(&class, index, &record.embedding, self.dimension)?;
        self.classes.entry(class).or_default().push(record);
        Ok(())
    }

    /// Registers a class with no records.
    pub fn insert_empty(&mut self, class: impl Into<String>) {
        self.classes.entry(class.into()).or_default();
    }

    pub fn records(&self, class: &str) -> Option<&[BankRecord]> {
        self.classes.get(class).map(Vec::as_slice)
    }

    pub fn embeddings(&self, class: &str) -> Option<Vec<&[f32]>> {
        self.records(class)
            .map(|rs| rs.iter().map(|r| r.embedding.as_slice()).collect())
    }

    /// Class ids in lexicographic order.
    pub fn class_ids(&self) -> impl Iterator<Item = &str> {
        self.classes.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[BankRecord])> {
        self.classes.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn total_records(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    /// Every class id must exist in `vocab`.
    pub fn validate_against(&self, vocab: &Vocabulary) -> Result<()> {
        for id in self.classes.keys() {
            if !vocab.contains(id) {
                return Err(Error::Validation(format!("bank class `{id}` is not in the vocabulary")));
            }
        }
        Ok(())
    }

    /// Exact serialized size in bytes.
    pub fn encoded_len(&self) -> usize {
        let header = 4 + 2 + 4 + 4;
        let record = 1 + 2 + 4 * self.dimension;
        header
            + self
                .classes
                .iter()
                .map(|(id, rs)| 2 + id.len() + 4 + rs.len() * record)
                .sum::<usize>()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.bytes(BANK_MAGIC);
        w.u16(BANK_VERSION);
        w.u32(self.dimension as u32);
        w.u32(count_u32(self.classes.len(), "class count")?);
        for (id, records) in &self.classes {
            w.str16(id)?;
            w.u32(count_u32(records.len(), "record count")?);
            for r in records {
                w.u8(r.source.code());
                w.u16(r.augmentation);
                w.f32s(&r.embedding);
            }
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        read_header(&mut r, BANK_MAGIC, BANK_VERSION)?;
        let dimension = r.u32()? as usize;
        if dimension == 0 {
            return Err(Error::Corruption("zero dimension in header".into()));
        }
        let n_classes = r.u32()? as usize;
        let mut bank = Self::new(dimension)?;
        for _ in 0..n_classes {
            let id = r.str16()?;
            if id.is_empty() {
                return Err(Error::Corruption("empty class id".into()));
            }
            if bank.classes.contains_key(&id) {
                return Err(Error::Corruption(format!("class `{id}` appears twice")));
            }
            let n = r.u32()? as usize;
            let mut records = Vec::with_capacity(n.min(1 << 16));
            for i in 0..n {
                let code = r.u8()?;
                let source = SourceTag::from_code(code)
                    .ok_or_else(|| Error::Corruption(format!("class `{id}` record {i}: unknown source tag {code}")))?;
                let augmentation = r.u16()?;
                let embedding = r.f32s(dimension)?;
                check_embedding(&id, i, &embedding, dimension)?;
                records.push(BankRecord {
                    embedding,
                    source,
                    augmentation,
                });
            }
            bank.classes.insert(id, records);
        }
        r.finish()?;
        Ok(bank)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn count_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Validation(format!("{what} {n} exceeds u32")))
}

fn check_embedding(class: &str, index: usize, e: &[f32], dimension: usize) -> Result<()> {
    if e.len() != dimension {
        return Err(Error::Validation(format!(
            "class `{class}` record {index}: length {} != dimension {dimension}",
            e.len()
        )));
    }
    if let Some(pos) = e.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "class `{class}` record {index}: non-finite value at component {pos}"
        )));
    }
    Ok(())
}
