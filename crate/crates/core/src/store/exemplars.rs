//! Exemplar sourcing cascade.
//!
//! For every class the candidate pools are consulted in a fixed order:
//!
//! 1. `in21k` items whose synset equals the class synset,
//! 2. `detection-box` items labelled with the class id whose box area is
//!    strictly greater than `min_box_area`,
//! 3. `visualgenome` items whose synset equals the class synset,
//! 4. the manual alias table: items of the synset pools whose synset equals the
//!    class's substitute synset.
//!
//! Stages accumulate. As soon as a stage brings the running total to
//! `min_full` the class is `full` and later stages are skipped; otherwise the
//! class is `reduced` when the total reaches `min_reduced` and `shortfall`
//! below that.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bank::SourceTag;
use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::io::write_atomic;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolKind {
    In21k,
    DetectionBox,
    Visualgenome,
}

impl PoolKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "in21k" => Ok(PoolKind::In21k),
            "detection-box" => Ok(PoolKind::DetectionBox),
            "visualgenome" => Ok(PoolKind::Visualgenome),
            other => Err(Error::Config(format!("unknown source kind `{other}`"))),
        }
    }

    pub fn source_tag(self) -> SourceTag {
        match self {
            PoolKind::In21k => SourceTag::In21k,
            PoolKind::DetectionBox => SourceTag::DetectionBox,
            PoolKind::Visualgenome => SourceTag::Visualgenome,
        }
    }
}

impl<'de> Deserialize<'de> for PoolKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        PoolKind::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// One candidate exemplar. Pixels never enter this crate; `id` is opaque.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area: Option<f64>,
}

impl Candidate {
    pub fn synset(id: impl Into<String>, synset: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            synset: Some(synset.into()),
            class: None,
            area: None,
        }
    }

    pub fn boxed(id: impl Into<String>, class: impl Into<String>, area: f64) -> Self {
        Self {
            id: id.into(),
            synset: None,
            class: Some(class.into()),
            area: Some(area),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub kind: PoolKind,
    pub items: Vec<Candidate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResolveConfig {
    pub min_full: usize,
    pub min_reduced: usize,
    pub min_box_area: f64,
    /// Class id → substitute synset, looked up in the synset pools.
    pub aliases: BTreeMap<String, String>,
}

impl Default for ResolveConfig {
    fn default() -> Self {
        Self {
            min_full: 40,
            min_reduced: 10,
            min_box_area: 32.0 * 32.0,
            aliases: BTreeMap::new(),
        }
    }
}

/// Pools plus resolver settings as stored in a JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolFile {
    pub pools: Vec<CandidatePool>,
    #[serde(default)]
    pub aliases: BTreeMap<String, String>,
}

impl PoolFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| {
            if e.to_string().contains("unknown source kind") {
                Error::Config(e.to_string())
            } else {
                Error::Json(e)
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Shortfall,
    Reduced,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExemplarRef {
    pub id: String,
    pub source: SourceTag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub class: String,
    pub tier: Tier,
    pub count: usize,
    /// Last cascade stage that contributed exemplars.
    pub source: Option<SourceTag>,
    pub per_source: BTreeMap<SourceTag, usize>,
    pub exemplars: Vec<ExemplarRef>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShortfallEntry {
    pub class: String,
    pub count: usize,
    pub per_source: BTreeMap<SourceTag, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExemplarCatalog {
    pub min_full: usize,
    pub min_reduced: usize,
    /// One entry per vocabulary class, vocabulary order.
    pub entries: Vec<CatalogEntry>,
    pub shortfall: Vec<ShortfallEntry>,
    /// Candidates skipped because their id was already attached to the class.
    pub duplicates_dropped: usize,
}

impl ExemplarCatalog {
    pub fn get(&self, class: &str) -> Option<&CatalogEntry> {
        self.entries.iter().find(|e| e.class == class)
    }

    pub fn tier_counts(&self) -> BTreeMap<Tier, usize> {
        let mut m = BTreeMap::new();
        for e in &self.entries {
            *m.entry(e.tier).or_insert(0) += 1;
        }
        m
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data") + "\n"
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_json().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

struct PoolIndex<'a> {
    by_synset: HashMap<PoolKind, HashMap<&'a str, Vec<&'a Candidate>>>,
    by_class: HashMap<&'a str, Vec<&'a Candidate>>,
}

impl<'a> PoolIndex<'a> {
    fn build(pools: &'a [CandidatePool]) -> Result<Self> {
        let mut by_synset: HashMap<PoolKind, HashMap<&str, Vec<&Candidate>>> = HashMap::new();
        let mut by_class: HashMap<_, Vec<_>> = HashMap::new();
        for pool in pools {
            for c in &pool.items {
                match pool.kind {
                    PoolKind::In21k | PoolKind::Visualgenome => {
                        let s = c.synset.as_deref().ok_or_else(|| {
                            Error::Config(format!("{:?} candidate `{}` has no synset", pool.kind, c.id))
                        })?;
                        by_synset.entry(pool.kind).or_default().entry(s).or_default().push(c);
                    }
                    PoolKind::DetectionBox => {
                        let class = c
                            .class
                            .as_deref()
                            .ok_or_else(|| Error::Config(format!("detection-box candidate `{}` has no class", c.id)))?;
                        match c.area {
                            Some(a) if a.is_finite() => {}
                            _ => {
                                return Err(Error::Config(format!(
                                    "detection-box candidate `{}` has no valid area",
                                    c.id
                                )))
                            }
                        }
                        by_class.entry(class).or_default().push(c);
                    }
                }
            }
        }
        Ok(Self { by_synset, by_class })
    }

    fn synset(&self, kind: PoolKind, synset: &str) -> &[&'a Candidate] {
        self.by_synset
            .get(&kind)
            .and_then(|m| m.get(synset))
            .map_or(&[], Vec::as_slice)
    }
}

/// Resolves the exemplar catalog for every class of `vocab`.
pub fn resolve_exemplars(
    vocab: &Vocabulary,
    pools: &[CandidatePool],
    config: &ResolveConfig,
) -> Result<ExemplarCatalog> {
    if config.min_reduced > config.min_full {
        return Err(Error::Config(format!(
            "min_reduced {} exceeds min_full {}",
            config.min_reduced, config.min_full
        )));
    }
    if !(config.min_box_area >= 0.0) {
        return Err(Error::Config("min_box_area must be non-negative".into()));
    }
    for class in config.aliases.keys() {
        if !vocab.contains(class) {
            return Err(Error::Config(format!("alias for unknown class `{class}`")));
        }
    }
    let index = PoolIndex::build(pools)?;

    let mut entries = Vec::with_capacity(vocab.len());
    let mut shortfall = Vec::new();
    let mut duplicates_dropped = 0;

    for class in vocab.entries() {
        let mut stages: Vec<(SourceTag, Vec<&Candidate>)> = Vec::with_capacity(4);
        let synset = class.synset.as_deref();
        stages.push((
            SourceTag::In21k,
            synset.map_or_else(Vec::new, |s| index.synset(PoolKind::In21k, s).to_vec()),
        ));
        stages.push((
            SourceTag::DetectionBox,
            index
                .by_class
                .get(class.id.as_str())
                .map(|v| {
                    v.iter()
                        .copied()
                        .filter(|c| c.area.unwrap_or(0.0) > config.min_box_area)
                        .collect()
                })
                .unwrap_or_default(),
        ));
        stages.push((
            SourceTag::Visualgenome,
            synset.map_or_else(Vec::new, |s| index.synset(PoolKind::Visualgenome, s).to_vec()),
        ));
        stages.push((
            SourceTag::ManualAlias,
            config
                .aliases
                .get(&class.id)
                .map(|s| {
                    let mut v = index.synset(PoolKind::In21k, s).to_vec();
                    v.extend_from_slice(index.synset(PoolKind::Visualgenome, s));
                    v
                })
                .unwrap_or_default(),
        ));

        let mut seen: HashSet<&str> = HashSet::new();
        let mut exemplars = Vec::new();
        let mut per_source = BTreeMap::new();
        let mut last_source = None;
        for (tag, mut cands) in stages {
            cands.sort_by(|a, b| a.id.cmp(&b.id));
            let before = exemplars.len();
            for c in cands {
                if !seen.insert(c.id.as_str()) {
                    duplicates_dropped += 1;
                    continue;
                }
                exemplars.push(ExemplarRef {
                    id: c.id.clone(),
                    source: tag,
                });
            }
            let added = exemplars.len() - before;
            if added > 0 {
                per_source.insert(tag, added);
                last_source = Some(tag);
            }
            if exemplars.len() >= config.min_full {
                break;
            }
        }

        let count = exemplars.len();
        let tier = if count >= config.min_full {
            Tier::Full
        } else if count >= config.min_reduced {
            Tier::Reduced
        } else {
            Tier::Shortfall
        };
        if tier == Tier::Shortfall {
            shortfall.push(ShortfallEntry {
                class: class.id.clone(),
                count,
                per_source: per_source.clone(),
            });
        }
        entries.push(CatalogEntry {
            class: class.id.clone(),
            tier,
            count,
            source: last_source,
            per_source,
            exemplars,
        });
    }

    Ok(ExemplarCatalog {
        min_full: config.min_full,
        min_reduced: config.min_reduced,
        entries,
        shortfall,
        duplicates_dropped,
    })
}
