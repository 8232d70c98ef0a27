//! Classifier banks, multi-modal fusion, the mean-vector baseline and TTA
//! job planning.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_header, write_atomic, Reader, Writer};
use crate::store::{ExemplarCatalog, Tier};

pub const CLASSIFIER_MAGIC: &[u8; 4] = b"OVCB";
pub const CLASSIFIER_VERSION: u16 = 1;

/// Fused vectors shorter than this are rejected.
pub const FUSION_COLLAPSE_NORM: f64 = 1e-6;

/// `w_text/‖w_text‖ + w_img/‖w_img‖`, evaluated in `f64`.
///
/// The sum is formed as `a_i + b_i` per component, which is commutative in
/// floating point, so `fuse(a, b) == fuse(b, a)` bit for bit.
pub fn fuse_multimodal(w_text: &[f32], w_img: &[f32]) -> Result<Vec<f32>> {
    if w_text.len() != w_img.len() {
        return Err(Error::Validation(format!(
            "text classifier has dimension {}, vision classifier {}",
            w_text.len(),
            w_img.len()
        )));
    }
    let unit = |v: &[f32], what: &str| -> Result<Vec<f64>> {
        let n = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Parameter(format!(
                "{what} classifier has zero or non-finite norm"
            )));
        }
        Ok(v.iter().map(|&x| x as f64 / n).collect())
    };
    let a = unit(w_text, "text")?;
    let b = unit(w_img, "vision")?;
    let fused: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
    let norm = fused.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < FUSION_COLLAPSE_NORM {
        return Err(Error::Degenerate(format!(
            "antipodal classifiers fuse to norm {norm:e}"
        )));
    }
    Ok(fused.into_iter().map(|x| x as f32).collect())
}

/// Component-wise mean of the exemplar embeddings, L2-normalized.
pub fn mean_baseline<E: AsRef<[f32]>>(embeddings: &[E]) -> Result<Vec<f32>> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::Parameter("mean of an empty embedding list".into()))?;
    let d = first.as_ref().len();
    let mut acc = vec![0.0f64; d];
    for (i, e) in embeddings.iter().enumerate() {
        let e = e.as_ref();
        if e.len() != d {
            return Err(Error::Validation(format!(
                "embedding {i} has dimension {}, expected {d}",
                e.len()
            )));
        }
        for (a, &x) in acc.iter_mut().zip(e) {
            *a += x as f64;
        }
    }
    let m = embeddings.len() as f64;
    let mean: Vec<f64> = acc.iter().map(|a| a / m).collect();
    let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Degenerate("exemplar mean is the zero vector".into()));
    }
    Ok(mean.iter().map(|x| (x / norm) as f32).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Text,
    VisionAgg,
    VisionMean,
    Multimodal,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::Text => 0,
            Modality::VisionAgg => 1,
            Modality::VisionMean => 2,
            Modality::Multimodal => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        [
            Modality::Text,
            Modality::VisionAgg,
            Modality::VisionMean,
            Modality::Multimodal,
        ]
        .into_iter()
        .find(|m| m.code() == code)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::VisionAgg => "vision-agg",
            Modality::VisionMean => "vision-mean",
            Modality::Multimodal => "multimodal",
        }
    }

    /// Accepts the canonical names plus `mm` for multimodal.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Modality::Text),
            "vision-agg" => Ok(Modality::VisionAgg),
            "vision-mean" => Ok(Modality::VisionMean),
            "mm" | "multimodal" => Ok(Modality::Multimodal),
            other => Err(Error::Config(format!("unknown modality `{other}`"))),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEntry {
    pub vector: Vec<f32>,
    pub modality: Modality,
    pub note: String,
}

/// Class id → classifier vector, all of one dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierBank {
    dimension: usize,
    entries: BTreeMap<String, ClassifierEntry>,
}

impl ClassifierBank {
    pub fn new(dimension: usize) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::Parameter("classifier dimension must be positive".into()));
        }
        Ok(Self {
            dimension,
            entries: BTreeMap::new(),
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn insert(
        &mut self,
        class: impl Into<String>,
        vector: Vec<f32>,
        modality: Modality,
        note: impl Into<String>,
    ) -> Result<()> {
        let class = class.into();
        if class.is_empty() {
            return Err(Error::Validation("empty class id".into()));
        }
        let entry = ClassifierEntry {
            vector,
            modality,
            note: note.into(),
        };
        check_entry(&class, &entry, self.dimension)?;
        self.entries.insert(class, entry);
        Ok(())
    }

    pub fn get(&self, class: &str) -> Option<&ClassifierEntry> {
        self.entries.get(class)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in class-id order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &ClassifierEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn class_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.bytes(CLASSIFIER_MAGIC);
        w.u16(CLASSIFIER_VERSION);
        w.u32(self.dimension as u32);
        w.u32(u32::try_from(self.entries.len()).map_err(|_| Error::Validation("too many classes".into()))?);
        for (id, e) in &self.entries {
            w.str16(id)?;
            w.u8(e.modality.code());
            w.str16(&e.note)?;
            w.f32s(&e.vector);
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        read_header(&mut r, CLASSIFIER_MAGIC, CLASSIFIER_VERSION)?;
        let dimension = r.u32()? as usize;
        if dimension == 0 {
            return Err(Error::Corruption("zero dimension in header".into()));
        }
        let n = r.u32()? as usize;
        let mut bank = Self::new(dimension)?;
        for _ in 0..n {
            let id = r.str16()?;
            let code = r.u8()?;
            let modality = Modality::from_code(code)
                .ok_or_else(|| Error::Corruption(format!("class `{id}`: unknown modality {code}")))?;
            let note = r.str16()?;
            let vector = r.f32s(dimension)?;
            if bank.entries.contains_key(&id) {
                return Err(Error::Corruption(format!("class `{id}` appears twice")));
            }
            bank.insert(id, vector, modality, note)?;
        }
        r.finish()?;
        Ok(bank)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let bank: Self = serde_json::from_str(text)?;
        for (id, e) in &bank.entries {
            check_entry(id, e, bank.dimension)?;
        }
        Ok(bank)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_json().as_bytes())
    }
}

fn check_entry(class: &str, e: &ClassifierEntry, dimension: usize) -> Result<()> {
    if e.vector.len() != dimension {
        return Err(Error::Validation(format!(
            "classifier `{class}` has dimension {}, bank {dimension}",
            e.vector.len()
        )));
    }
    if let Some(i) = e.vector.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "classifier `{class}` component {i} is not finite"
        )));
    }
    if e.modality == Modality::Multimodal {
        let n = crate::numerics::l2_norm_f64(&e.vector);
        if n > 2.0 + 1e-6 {
            return Err(Error::Validation(format!(
                "multimodal classifier `{class}` has norm {n} > 2"
            )));
        }
    }
    Ok(())
}

/// Fuses two banks class by class; both must hold the same class ids.
pub fn fuse_banks(text: &ClassifierBank, vision: &ClassifierBank) -> Result<ClassifierBank> {
    if text.dimension() != vision.dimension() {
        return Err(Error::Validation(format!(
            "text bank dimension {} != vision bank dimension {}",
            text.dimension(),
            vision.dimension()
        )));
    }
    let a: Vec<&str> = text.class_ids().collect();
    let b: Vec<&str> = vision.class_ids().collect();
    if a != b {
        let only_text: Vec<&str> = a.iter().filter(|c| vision.get(c).is_none()).copied().collect();
        let only_vision: Vec<&str> = b.iter().filter(|c| text.get(c).is_none()).copied().collect();
        return Err(Error::Validation(format!(
            "class sets differ: only in text {only_text:?}, only in vision {only_vision:?}"
        )));
    }
    let mut out = ClassifierBank::new(text.dimension())?;
    for (class, t) in text.iter() {
        let v = vision.get(class).expect("same class set");
        let fused = fuse_multimodal(&t.vector, &v.vector).map_err(|e| match e {
            Error::Degenerate(m) => Error::Degenerate(format!("class `{class}`: {m}")),
            Error::Parameter(m) => Error::Parameter(format!("class `{class}`: {m}")),
            other => other,
        })?;
        out.insert(
            class,
            fused,
            Modality::Multimodal,
            format!("{}+{}", t.modality, v.modality),
        )?;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecipeName {
    None,
    Harsh,
    Gentle,
}

impl RecipeName {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(RecipeName::None),
            "harsh" => Ok(RecipeName::Harsh),
            "gentle" => Ok(RecipeName::Gentle),
            other => Err(Error::Config(format!("unknown TTA recipe `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtaRecipe {
    pub name: RecipeName,
    pub variants: usize,
    /// Crop area fraction range for the random resized crop.
    pub scale: (f64, f64),
    pub flip: bool,
    /// Jitter strengths; each factor is drawn from `[1 − s, 1 + s]`.
    pub jitter: ColorJitter,
}

impl TtaRecipe {
    pub fn none() -> Self {
        Self {
            name: RecipeName::None,
            variants: 1,
            scale: (1.0, 1.0),
            flip: false,
            jitter: ColorJitter {
                brightness: 0.0,
                contrast: 0.0,
                saturation: 0.0,
            },
        }
    }

    fn augmenting(name: RecipeName, min_scale: f64) -> Self {
        Self {
            name,
            variants: 5,
            scale: (min_scale, 1.0),
            flip: true,
            jitter: ColorJitter {
                brightness: 0.4,
                contrast: 0.4,
                saturation: 0.4,
            },
        }
    }

    pub fn harsh() -> Self {
        Self::augmenting(RecipeName::Harsh, 0.5)
    }

    pub fn gentle() -> Self {
        Self::augmenting(RecipeName::Gentle, 0.8)
    }

    pub fn named(name: RecipeName) -> Self {
        match name {
            RecipeName::None => Self::none(),
            RecipeName::Harsh => Self::harsh(),
            RecipeName::Gentle => Self::gentle(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "crop scale range ({lo}, {hi}) outside 0 < min <= max <= 1"
            )));
        }
        if self.variants == 0 {
            return Err(Error::Config("variants must be at least 1".into()));
        }
        let j = self.jitter;
        for (n, v) in [
            ("brightness", j.brightness),
            ("contrast", j.contrast),
            ("saturation", j.saturation),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{n} jitter {v} outside [0, 1)")));
            }
        }
        if self.name == RecipeName::None && (self.variants != 1 || lo != 1.0 || self.flip) {
            return Err(Error::Config("recipe `none` must be the identity".into()));
        }
        Ok(())
    }
}

/// One augmentation to apply to one exemplar before encoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtaJob {
    pub class: String,
    pub exemplar_id: String,
    pub variant: u16,
    /// Sampled crop area fraction.
    pub scale: f64,
    /// `[x, y, w, h]` as fractions of the image size.
    pub crop: [f64; 4],
    pub flip: bool,
    pub jitter: ColorJitter,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TtaPlan {
    pub jobs: Vec<TtaJob>,
    /// Classes without any exemplar.
    pub skipped: Vec<String>,
}

impl TtaPlan {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for j in &self.jobs {
            out.push_str(&serde_json::to_string(j).expect("plain data"));
            out.push('\n');
        }
        out
    }

    pub fn parse_jsonl(text: &str) -> Result<Vec<TtaJob>> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Line {
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect()
    }
}

const CROP_ATTEMPTS: usize = 10;

/// Crop rectangle as fractions: area `s` and aspect ratio `r` (log-uniform in
/// `[3/4, 4/3]`) give `w = √(s·r)`, `h = √(s/r)`. Ratios that do not fit are
/// retried, then replaced by a square.
fn sample_crop<R: Rng>(rng: &mut R, recipe: &TtaRecipe) -> (f64, [f64; 4]) {
    let (lo, hi) = recipe.scale;
    let s = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let (lr_lo, lr_hi) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    let mut wh = None;
    for _ in 0..CROP_ATTEMPTS {
        let r = rng.random_range(lr_lo..=lr_hi).exp();
        let (w, h) = ((s * r).sqrt(), (s / r).sqrt());
        if w <= 1.0 && h <= 1.0 {
            wh = Some((w, h));
            break;
        }
    }
    let (w, h) = wh.unwrap_or_else(|| (s.sqrt(), s.sqrt()));
    let x = if w < 1.0 { rng.random_range(0.0..=1.0 - w) } else { 0.0 };
    let y = if h < 1.0 { rng.random_range(0.0..=1.0 - h) } else { 0.0 };
    (s, [x, y, w, h])
}

fn factor<R: Rng>(rng: &mut R, strength: f64) -> f64 {
    if strength == 0.0 {
        1.0
    } else {
        rng.random_range(1.0 - strength..=1.0 + strength)
    }
}

/// Emits `variants` jobs per catalogued exemplar, classes in catalog order.
pub fn plan_tta(catalog: &ExemplarCatalog, recipe: &TtaRecipe, seed: u64) -> Result<TtaPlan> {
    recipe.validate()?;
    let variants = u16::try_from(recipe.variants).map_err(|_| Error::Config("too many variants".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plan = TtaPlan::default();
    for entry in &catalog.entries {
        if entry.exemplars.is_empty() {
            debug_assert_eq!(entry.tier, Tier::Shortfall);
            plan.skipped.push(entry.class.clone());
            continue;
        }
        for ex in &entry.exemplars {
            for variant in 0..variants {
                let job = if recipe.name == RecipeName::None {
                    TtaJob {
                        class: entry.class.clone(),
                        exemplar_id: ex.id.clone(),
                        variant,
                        scale: 1.0,
                        crop: [0.0, 0.0, 1.0, 1.0],
                        flip: false,
                        jitter: ColorJitter {
                            brightness: 1.0,
                            contrast: 1.0,
                            saturation: 1.0,
                        },
                    }
                } else {
                    let (scale, crop) = sample_crop(&mut rng, recipe);
                    let flip = recipe.flip && rng.random_bool(0.5);
                    let jitter = ColorJitter {
                        brightness: factor(&mut rng, recipe.jitter.brightness),
                        contrast: factor(&mut rng, recipe.jitter.contrast),
                        saturation: factor(&mut rng, recipe.jitter.saturation),
                    };
                    TtaJob {
                        class: entry.class.clone(),
                        exemplar_id: ex.id.clone(),
                        variant,
                        scale,
                        crop,
                        flip,
                        jitter,
                    }
                };
                plan.jobs.push(job);
            }
        }
    }
    Ok(plan)
}
