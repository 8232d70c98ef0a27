//! Text-based classifiers: prompt rendering, description ingestion and
//! averaging of description encodings.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CLASS_SLOT: &str = "{class name}";
pub const ARTICLE_SLOT: &str = "a(n)";
pub const DEFAULT_PATTERN: &str = "What does a(n) {class name} look like?";
pub const DEFAULT_DESCRIPTIONS_PER_CLASS: usize = 10;

/// Question sent to the language model for each class.
///
/// `pattern` must contain exactly one `{class name}` slot. An `a(n)` token, if
/// present, is replaced by the article matching the class name.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pattern: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            pattern: DEFAULT_PATTERN.to_string(),
        }
    }
}

impl PromptTemplate {
    pub fn new(pattern: impl Into<String>) -> Result<Self> {
        let pattern = pattern.into();
        let slots = pattern.matches(CLASS_SLOT).count();
        if slots != 1 {
            return Err(Error::Parameter(format!(
                "prompt template needs exactly one {CLASS_SLOT} slot, found {slots}"
            )));
        }
        Ok(Self { pattern })
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    pub fn render(&self, class_name: &str) -> Result<String> {
        render_prompt(self, class_name)
    }
}

// Words whose pronunciation disagrees with their first letter.
const AN_EXCEPTIONS: &[&str] = &["hour", "honest", "honor", "honour", "heir", "herb", "x-ray"];
const A_EXCEPTIONS: &[&str] = &[
    "uni", "use", "usu", "ute", "uro", "eu", "one", "once", "ewe", "ufo", "uganda", "ukulele",
];
// Letters whose spoken name starts with a vowel sound: "an F-16", "an x-ray".
const VOWEL_SOUND_LETTERS: &str = "aefhilmnorsx";

/// `"a"` or `"an"` for the given phrase.
pub fn indefinite_article(phrase: &str) -> &'static str {
    let lower = phrase.trim().to_lowercase();
    let first_word = lower.split_whitespace().next().unwrap_or("");
    if AN_EXCEPTIONS.iter().any(|w| first_word.starts_with(w)) {
        return "an";
    }
    if A_EXCEPTIONS.iter().any(|w| first_word.starts_with(w)) {
        return "a";
    }
    // a lone letter, or a letter joined by a hyphen, is read by its name
    let head = first_word.split('-').next().unwrap_or("");
    let mut chars = head.chars();
    if let (Some(c), None) = (chars.next(), chars.next()) {
        if c.is_ascii_alphabetic() {
            return if VOWEL_SOUND_LETTERS.contains(c) { "an" } else { "a" };
        }
    }
    match first_word.chars().next() {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

pub fn render_prompt(template: &PromptTemplate, class_name: &str) -> Result<String> {
    let name = class_name.trim();
    if name.is_empty() {
        return Err(Error::Parameter("empty class name".into()));
    }
    let with_article = template.pattern.replace(ARTICLE_SLOT, indefinite_article(name));
    Ok(with_article.replacen(CLASS_SLOT, name, 1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Description {
    pub text: String,
    pub embedding: Option<Vec<f32>>,
}

/// Generated descriptions for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptionSet {
    pub class: String,
    pub descriptions: Vec<Description>,
    /// Number of descriptions requested per class.
    pub target: usize,
}

impl DescriptionSet {
    pub fn len(&self) -> usize {
        self.descriptions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptions.is_empty()
    }

    /// All embeddings, or `None` if any description lacks one.
    pub fn embeddings(&self) -> Option<Vec<&[f32]>> {
        self.descriptions.iter().map(|d| d.embedding.as_deref()).collect()
    }
}

#[derive(Deserialize)]
struct DescriptionLine {
    class: String,
    text: String,
    #[serde(default)]
    embedding: Option<Vec<f32>>,
}

/// Parses description JSONL, grouping lines by class. Duplicate texts are
/// kept. All embeddings present must share one dimension.
pub fn parse_descriptions(text: &str) -> Result<BTreeMap<String, DescriptionSet>> {
    let mut sets: BTreeMap<String, DescriptionSet> = BTreeMap::new();
    let mut dim: Option<usize> = None;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DescriptionLine = serde_json::from_str(line).map_err(|e| Error::Line {
            line: lineno,
            message: e.to_string(),
        })?;
        if rec.class.is_empty() {
            return Err(Error::Line {
                line: lineno,
                message: "empty class id".into(),
            });
        }
        if rec.text.trim().is_empty() {
            return Err(Error::Line {
                line: lineno,
                message: "empty description text".into(),
            });
        }
        if let Some(e) = &rec.embedding {
            let d = *dim.get_or_insert(e.len());
            if e.len() != d || d == 0 {
                return Err(Error::Validation(format!(
                    "line {lineno}: embedding dimension {} != {d}",
                    e.len()
                )));
            }
            if e.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("line {lineno}: non-finite embedding value")));
            }
        }
        sets.entry(rec.class.clone())
            .or_insert_with(|| DescriptionSet {
                class: rec.class.clone(),
                descriptions: Vec::new(),
                target: DEFAULT_DESCRIPTIONS_PER_CLASS,
            })
            .descriptions
            .push(Description {
                text: rec.text,
                embedding: rec.embedding,
            });
    }
    Ok(sets)
}

pub fn ingest_descriptions(path: impl AsRef<Path>) -> Result<BTreeMap<String, DescriptionSet>> {
    parse_descriptions(&fs::read_to_string(path)?)
}

/// Mean of raw description encodings, without normalization.
///
/// Sums are accumulated in `f64`, so reordering the inputs changes the result
/// by at most one `f32` rounding step.
pub fn build_text_classifier<E: AsRef<[f32]>>(embeddings: &[E]) -> Result<Vec<f32>> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::Parameter("no description embeddings".into()))?;
    let d = first.as_ref().len();
    if d == 0 {
        return Err(Error::Validation("zero-length embedding".into()));
    }
    let mut acc = vec![0f64; d];
    for (i, e) in embeddings.iter().enumerate() {
        let e = e.as_ref();
        if e.len() != d {
            return Err(Error::Validation(format!(
                "embedding {i} has dimension {}, expected {d}",
                e.len()
            )));
        }
        for (a, &v) in acc.iter_mut().zip(e) {
            *a += v as f64;
        }
    }
    let m = embeddings.len() as f64;
    Ok(acc.into_iter().map(|s| (s / m) as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_default_prompt() {
        let t = PromptTemplate::default();
        assert_eq!(t.render("dalmatian").unwrap(), "What does a dalmatian look like?");
        assert_eq!(t.render("avocado").unwrap(), "What does an avocado look like?");
        assert_eq!(t.render("x-ray tube").unwrap(), "What does an x-ray tube look like?");
    }

    #[test]
    fn article_exceptions() {
        assert_eq!(indefinite_article("hourglass"), "an");
        assert_eq!(indefinite_article("unicorn"), "a");
        assert_eq!(indefinite_article("umbrella"), "an");
        assert_eq!(indefinite_article("F-16 jet"), "an");
        assert_eq!(indefinite_article("b-boy"), "a");
        assert_eq!(indefinite_article("walrus"), "a");
    }

    #[test]
    fn template_needs_one_slot() {
        assert!(PromptTemplate::new("no slot").is_err());
        assert!(PromptTemplate::new("{class name} {class name}").is_err());
        let t = PromptTemplate::new("How can you identify a(n) {class name}?").unwrap();
        assert_eq!(t.render("owl").unwrap(), "How can you identify an owl?");
        assert!(t.render("  ").is_err());
    }

    #[test]
    fn groups_descriptions_by_class() {
        let text = "{\"class\":\"walrus\",\"text\":\"A walrus is large.\",\"embedding\":[1.0,0.0]}\n\
                    {\"class\":\"walrus\",\"text\":\"A walrus is large.\",\"embedding\":[0.0,1.0]}\n\
                    {\"class\":\"walrus\",\"text\":\"Tusks.\",\"embedding\":null}\n";
        let sets = parse_descriptions(text).unwrap();
        let w = &sets["walrus"];
        assert_eq!(w.len(), 3);
        assert_eq!(w.target, 10);
        assert!(w.embeddings().is_none());
    }

    #[test]
    fn missing_field_names_line() {
        let mut text = String::new();
        for i in 0..16 {
            text.push_str(&format!("{{\"class\":\"c\",\"text\":\"d{i}\"}}\n"));
        }
        text.push_str("{\"class\":\"c\"}\n");
        match parse_descriptions(&text) {
            Err(Error::Line { line, message }) => {
                assert_eq!(line, 17);
                assert!(message.contains("text"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_is_validation_error() {
        let text = "{\"class\":\"a\",\"text\":\"x\",\"embedding\":[1.0,2.0]}\n\
                    {\"class\":\"b\",\"text\":\"y\",\"embedding\":[1.0]}\n";
        assert!(matches!(parse_descriptions(text), Err(Error::Validation(_))));
    }

    #[test]
    fn mean_of_embeddings() {
        assert_eq!(build_text_classifier(&[vec![0.2f32, -0.4]]).unwrap(), vec![0.2, -0.4]);
        assert_eq!(
            build_text_classifier(&[vec![1.0f32, 0.0], vec![0.0, 1.0]]).unwrap(),
            vec![0.5, 0.5]
        );
        assert!(build_text_classifier::<Vec<f32>>(&[]).is_err());
        assert!(matches!(
            build_text_classifier(&[vec![1.0f32, 0.0], vec![1.0]]),
            Err(Error::Validation(_))
        ));
    }
}
