//! Deterministic fixtures: Gaussian class clusters and detection cases with
//! known AP.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{Detection, GroundTruth};
use crate::store::{BankRecord, ClassEntry, EmbeddingBank, SourceTag, Vocabulary};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CenterDistribution {
    /// Normalized standard-normal draws: uniform on the unit sphere.
    #[default]
    UnitSphere,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterSpec {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub centers: CenterDistribution,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            classes: 50,
            dim: 32,
            per_class: 20,
            centers: CenterDistribution::UnitSphere,
            sigma: 0.05,
            seed: 0,
        }
    }
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Parameter(format!(
                "cluster dimension must be at least 2, got {}",
                self.dim
            )));
        }
        if self.classes == 0 || self.per_class == 0 {
            return Err(Error::Parameter("class and per-class counts must be at least 1".into()));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::Parameter(format!(
                "sigma must be a finite value >= 0, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    /// Zero-padded ids so lexicographic and numeric order agree.
    pub fn class_id(&self, i: usize) -> String {
        let width = (self.classes.max(2) - 1).to_string().len();
        format!("class{i:0width$}")
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::from_ids(
            (0..self.classes).map(|i| self.class_id(i)),
            crate::store::Bucket::Common,
        )
    }
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Per class: a random unit center, then `normalize(center + σ·ε)` for each
/// record with `ε ~ N(0, I)`. With `σ = 0` every record equals the center.
pub fn gen_cluster_bank(spec: &ClusterSpec) -> Result<EmbeddingBank> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let mut bank = EmbeddingBank::new(spec.dim)?;
    for c in 0..spec.classes {
        let center = unit(&draw(spec.dim));
        let id = spec.class_id(c);
        for _ in 0..spec.per_class {
            let e = if spec.sigma == 0.0 {
                center.clone()
            } else {
                let noise = draw(spec.dim);
                unit(
                    &center
                        .iter()
                        .zip(&noise)
                        .map(|(c, n)| c + spec.sigma * n)
                        .collect::<Vec<_>>(),
                )
            };
            let e = e.into_iter().map(|x| x as f32).collect();
            bank.push(&id, BankRecord::new(e, SourceTag::Synthetic, 0))?;
        }
    }
    Ok(bank)
}

/// Expected metrics of a detection fixture as computed by the brute-force
/// script beside the fixture files.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct ExpectedAp {
    pub map: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub apr: Option<f64>,
    pub apc: Option<f64>,
    pub apf: Option<f64>,
    pub apr_w: Option<f64>,
    pub apr_z: Option<f64>,
    pub per_class: std::collections::BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct DetectionFixture {
    pub name: String,
    pub vocab: Vec<ClassEntry>,
    pub detections: Vec<Detection>,
    pub groundtruth: Vec<GroundTruth>,
    pub expected: ExpectedAp,
}

impl DetectionFixture {
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::new(self.vocab.clone())
    }
}

const FIXTURES: &[(&str, &str)] = &[
    ("perfect", include_str!("../fixtures/detection/perfect.json")),
    ("half", include_str!("../fixtures/detection/half.json")),
    ("buckets", include_str!("../fixtures/detection/buckets.json")),
    ("crowded", include_str!("../fixtures/detection/crowded.json")),
    ("ties", include_str!("../fixtures/detection/ties.json")),
    ("localization", include_str!("../fixtures/detection/localization.json")),
    ("missed", include_str!("../fixtures/detection/missed.json")),
];

pub fn detection_fixture_names() -> impl Iterator<Item = &'static str> {
    FIXTURES.iter().map(|(n, _)| *n)
}

pub fn gen_detection_fixture(case: &str) -> Result<DetectionFixture> {
    let (_, text) = FIXTURES.iter().find(|(n, _)| *n == case).ok_or_else(|| Error::Lookup {
        kind: "detection fixture",
        name: case.to_owned(),
    })?;
    Ok(serde_json::from_str(text)?)
}
