//! Scoring head, retrieval accuracy and box average precision.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::ClassifierBank;
use crate::store::{Bucket, Vocabulary};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `σ(scale · cos(P q, w_c) + bias)` per query and class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoringHead {
    /// Optional `feature_dim x d` projection, one row per input feature.
    pub projection: Option<Vec<Vec<f32>>>,
    pub scale: f64,
    pub bias: f64,
}

impl Default for ScoringHead {
    fn default() -> Self {
        Self {
            projection: None,
            scale: 50.0,
            bias: -2.0,
        }
    }
}

impl ScoringHead {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::Config(format!(
                "head scale must be positive, got {}",
                self.scale
            )));
        }
        if !self.bias.is_finite() {
            return Err(Error::Config("head bias must be finite".into()));
        }
        if let Some(p) = &self.projection {
            let cols = p.first().map_or(0, Vec::len);
            if cols == 0 || p.iter().any(|r| r.len() != cols) {
                return Err(Error::Config(
                    "projection rows must be nonempty and equal length".into(),
                ));
            }
        }
        Ok(())
    }

    fn project(&self, q: &[f32], d: usize) -> Result<Vec<f64>> {
        match &self.projection {
            None => {
                if q.len() != d {
                    return Err(Error::Validation(format!(
                        "query dimension {} != bank dimension {d}",
                        q.len()
                    )));
                }
                Ok(q.iter().map(|&x| x as f64).collect())
            }
            Some(p) => {
                if q.len() != p.len() || p[0].len() != d {
                    return Err(Error::Validation(format!(
                        "projection is {}x{}, query has {} features, bank dimension {d}",
                        p.len(),
                        p[0].len(),
                        q.len()
                    )));
                }
                let mut out = vec![0.0f64; d];
                for (&x, row) in q.iter().zip(p) {
                    for (o, &w) in out.iter_mut().zip(row) {
                        *o += x as f64 * w as f64;
                    }
                }
                Ok(out)
            }
        }
    }
}

/// Queries x classes. `logits` are pre-sigmoid; `classes` is in id order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub classes: Vec<String>,
    pub logits: Vec<Vec<f64>>,
}

impl ScoreMatrix {
    pub fn scores(&self) -> Vec<Vec<f64>> {
        self.logits
            .iter()
            .map(|r| r.iter().map(|&l| sigmoid(l)).collect())
            .collect()
    }

    pub fn class_index(&self, class: &str) -> Option<usize> {
        self.classes.binary_search_by(|c| c.as_str().cmp(class)).ok()
    }

    /// Classes of one query from best to worst; equal logits keep id order.
    pub fn ranking(&self, query: usize) -> Vec<usize> {
        let row = &self.logits[query];
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        idx
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn score_queries<Q: AsRef<[f32]>>(
    features: &[Q],
    bank: &ClassifierBank,
    head: &ScoringHead,
) -> Result<ScoreMatrix> {
    head.validate()?;
    if bank.is_empty() {
        return Err(Error::Parameter("classifier bank is empty".into()));
    }
    let d = bank.dimension();
    let mut classes = Vec::with_capacity(bank.len());
    let mut units = Vec::with_capacity(bank.len());
    for (id, e) in bank.iter() {
        let w: Vec<f64> = e.vector.iter().map(|&x| x as f64).collect();
        let n = norm(&w);
        if n == 0.0 {
            return Err(Error::Validation(format!("classifier `{id}` is the zero vector")));
        }
        classes.push(id.to_owned());
        units.push(w.into_iter().map(|x| x / n).collect::<Vec<_>>());
    }
    let mut logits = Vec::with_capacity(features.len());
    for (i, q) in features.iter().enumerate() {
        let p = head.project(q.as_ref(), d)?;
        let n = norm(&p);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Validation(format!("query {i} has zero or non-finite norm")));
        }
        let row = units
            .iter()
            .map(|w| {
                let cos = w.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>() / n;
                head.scale * cos + head.bias
            })
            .collect();
        logits.push(row);
    }
    Ok(ScoreMatrix { classes, logits })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub top1: f64,
    pub top5: f64,
    pub queries: usize,
}

/// `labels[i]` is the column of query `i`'s true class.
pub fn evaluate_retrieval(scores: &ScoreMatrix, labels: &[usize]) -> Result<RetrievalMetrics> {
    if labels.is_empty() || scores.logits.is_empty() {
        return Err(Error::Parameter("no queries to evaluate".into()));
    }
    if labels.len() != scores.logits.len() {
        return Err(Error::Validation(format!(
            "{} labels for {} queries",
            labels.len(),
            scores.logits.len()
        )));
    }
    let (mut top1, mut top5) = (0usize, 0usize);
    for (row, &t) in scores.logits.iter().zip(labels) {
        if t >= row.len() {
            return Err(Error::Validation(format!(
                "label {t} out of range for {} classes",
                row.len()
            )));
        }
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &l)| l > row[t] || (l == row[t] && j < t))
            .count();
        top1 += usize::from(rank == 0);
        top5 += usize::from(rank < 5);
    }
    let n = labels.len() as f64;
    Ok(RetrievalMetrics {
        top1: top1 as f64 / n,
        top5: top5 as f64 / n,
        queries: labels.len(),
    })
}

/// Axis-aligned box `[x, y, w, h]`.
pub type BoxXywh = [f64; 4];

/// Areas come from the same corner coordinates as the intersection, so a box
/// has IoU exactly 1 with itself.
pub fn iou(a: &BoxXywh, b: &BoxXywh) -> f64 {
    let corners = |v: &BoxXywh| (v[0], v[1], v[0] + v[2], v[1] + v[3]);
    let (ax1, ay1, ax2, ay2) = corners(a);
    let (bx1, by1, bx2, by2) = corners(b);
    let ix = ax2.min(bx2) - ax1.max(bx1);
    let iy = ay2.min(by2) - ay1.max(by1);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    inter / union
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image: String,
    pub class: String,
    #[serde(rename = "box")]
    pub bbox: BoxXywh,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image: String,
    pub class: String,
    #[serde(rename = "box")]
    pub bbox: BoxXywh,
}

fn check_box(what: &str, i: usize, b: &BoxXywh) -> Result<()> {
    if b.iter().any(|v| !v.is_finite()) || b[2] <= 0.0 || b[3] <= 0.0 {
        return Err(Error::Validation(format!("{what} {i} has invalid box {b:?}")));
    }
    Ok(())
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
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

fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it).expect("plain data"));
        out.push('\n');
    }
    out
}

impl Detection {
    pub fn parse_jsonl(text: &str) -> Result<Vec<Self>> {
        parse_jsonl(text)
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<Self>> {
        parse_jsonl(&std::fs::read_to_string(path)?)
    }

    pub fn to_jsonl(items: &[Self]) -> String {
        to_jsonl(items)
    }
}

impl GroundTruth {
    pub fn parse_jsonl(text: &str) -> Result<Vec<Self>> {
        parse_jsonl(text)
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<Self>> {
        parse_jsonl(&std::fs::read_to_string(path)?)
    }

    pub fn to_jsonl(items: &[Self]) -> String {
        to_jsonl(items)
    }
}

/// IoU thresholds `0.50, 0.55, …, 0.95`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

pub const RECALL_POINTS: usize = 101;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ApConfig {
    pub iou_thresholds: Vec<f64>,
    /// Score vocabulary classes without ground truth as AP 0 instead of
    /// leaving them out.
    pub count_missing_as_zero: bool,
}

impl Default for ApConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: coco_thresholds(),
            count_missing_as_zero: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub bucket: Bucket,
    pub weak: bool,
    pub num_gt: usize,
    pub num_detections: usize,
    /// AP averaged over the thresholds.
    pub ap: f64,
    /// AP at each threshold, in threshold order.
    pub per_threshold: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub map: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub apr: Option<f64>,
    pub apc: Option<f64>,
    pub apf: Option<f64>,
    pub apr_w: Option<f64>,
    pub apr_z: Option<f64>,
    pub iou_thresholds: Vec<f64>,
    pub per_class: BTreeMap<String, ClassAp>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top5: Option<f64>,
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x))
}

impl EvalResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data") + "\n"
    }

    /// Two-line summary, values in percent.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>7} {:>7} {:>7} {:>7} {:>7} {:>7}",
            "APr", "APc", "APf", "mAP", "APr-w", "APr-z"
        );
        let _ = writeln!(
            s,
            "{:>7} {:>7} {:>7} {:>7} {:>7} {:>7}",
            fmt_metric(self.apr),
            fmt_metric(self.apc),
            fmt_metric(self.apf),
            fmt_metric(self.map),
            fmt_metric(self.apr_w),
            fmt_metric(self.apr_z)
        );
        if let (Some(t1), Some(t5)) = (self.top1, self.top5) {
            let _ = writeln!(s, "top-1 {:.1}  top-5 {:.1}", 100.0 * t1, 100.0 * t5);
        }
        s
    }
}

/// Interpolated AP from a sequence of TP/FP flags in rank order.
///
/// Precision at recall level `r/100` is the largest precision reached at any
/// rank whose recall is at least `r/100` (0 when none is).
pub fn interpolated_ap(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &h in hits {
        if h {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    // running max from the right gives the precision envelope
    for i in (0..precision.len().saturating_sub(1)).rev() {
        if precision[i + 1] > precision[i] {
            precision[i] = precision[i + 1];
        }
    }
    let mut sum = 0.0;
    let mut j = 0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / 100.0;
        while j < recall.len() && recall[j] < level {
            j += 1;
        }
        if j < recall.len() {
            sum += precision[j];
        }
    }
    sum / RECALL_POINTS as f64
}

/// Greedy matching of score-ordered detections against one class's
/// ground truth. Each detection takes the unmatched box of its image with the
/// highest IoU at or above `threshold` (lowest index on ties).
pub fn match_detections(dets: &[&Detection], gts: &[&GroundTruth], threshold: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut taken = vec![false; gts.len()];
    order
        .into_iter()
        .map(|di| {
            let d = dets[di];
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if taken[gi] || g.image != d.image {
                    continue;
                }
                let o = iou(&d.bbox, &g.bbox);
                if o >= threshold && best.is_none_or(|(_, b)| o > b) {
                    best = Some((gi, o));
                }
            }
            if let Some((gi, _)) = best {
                taken[gi] = true;
                true
            } else {
                false
            }
        })
        .collect()
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

pub fn compute_ap(
    detections: &[Detection],
    groundtruth: &[GroundTruth],
    vocab: &Vocabulary,
    config: &ApConfig,
) -> Result<EvalResult> {
    if config.iou_thresholds.is_empty() {
        return Err(Error::Config("no IoU thresholds".into()));
    }
    if let Some(t) = config.iou_thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
        return Err(Error::Config(format!("IoU threshold {t} outside (0, 1]")));
    }
    let images: HashSet<&str> = groundtruth.iter().map(|g| g.image.as_str()).collect();
    for (i, g) in groundtruth.iter().enumerate() {
        check_box("ground truth", i, &g.bbox)?;
        if !vocab.contains(&g.class) {
            return Err(Error::Validation(format!(
                "ground truth {i} has unknown class `{}`",
                g.class
            )));
        }
    }
    for (i, d) in detections.iter().enumerate() {
        check_box("detection", i, &d.bbox)?;
        if !(0.0..=1.0).contains(&d.score) {
            return Err(Error::Validation(format!(
                "detection {i} score {} outside [0, 1]",
                d.score
            )));
        }
        if !vocab.contains(&d.class) {
            return Err(Error::Validation(format!(
                "detection {i} has unknown class `{}`",
                d.class
            )));
        }
        if !images.contains(d.image.as_str()) {
            return Err(Error::Validation(format!(
                "detection {i} has unknown image `{}`",
                d.image
            )));
        }
    }

    let mut dets_by_class: HashMap<&str, Vec<&Detection>> = HashMap::new();
    for d in detections {
        dets_by_class.entry(&d.class).or_default().push(d);
    }
    let mut gts_by_class: HashMap<&str, Vec<&GroundTruth>> = HashMap::new();
    for g in groundtruth {
        gts_by_class.entry(&g.class).or_default().push(g);
    }

    let mut per_class = BTreeMap::new();
    for entry in vocab.entries() {
        let gts = gts_by_class.get(entry.id.as_str()).map_or(&[][..], Vec::as_slice);
        let dets = dets_by_class.get(entry.id.as_str()).map_or(&[][..], Vec::as_slice);
        if gts.is_empty() && !config.count_missing_as_zero {
            continue;
        }
        let per_threshold: Vec<f64> = config
            .iou_thresholds
            .iter()
            .map(|&t| interpolated_ap(&match_detections(dets, gts, t), gts.len()))
            .collect();
        let ap = mean(per_threshold.iter().copied()).expect("thresholds nonempty");
        per_class.insert(
            entry.id.clone(),
            ClassAp {
                bucket: entry.bucket,
                weak: entry.weak,
                num_gt: gts.len(),
                num_detections: dets.len(),
                ap,
                per_threshold,
            },
        );
    }

    let at = |target: f64| -> Option<f64> {
        let k = config.iou_thresholds.iter().position(|t| (t - target).abs() < 1e-12)?;
        mean(per_class.values().map(|c| c.per_threshold[k]))
    };
    let bucket = |f: &dyn Fn(&ClassAp) -> bool| mean(per_class.values().filter(|c| f(c)).map(|c| c.ap));
    Ok(EvalResult {
        map: mean(per_class.values().map(|c| c.ap)),
        ap50: at(0.5),
        ap75: at(0.75),
        apr: bucket(&|c| c.bucket == Bucket::Rare),
        apc: bucket(&|c| c.bucket == Bucket::Common),
        apf: bucket(&|c| c.bucket == Bucket::Frequent),
        apr_w: bucket(&|c| c.bucket == Bucket::Rare && c.weak),
        apr_z: bucket(&|c| c.bucket == Bucket::Rare && !c.weak),
        iou_thresholds: config.iou_thresholds.clone(),
        per_class,
        top1: None,
        top5: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::Modality;

    #[test]
    fn sigmoid_at_bias_init() {
        assert!((sigmoid(-2.0) - 0.119203).abs() < 1e-6);
        assert!((sigmoid(48.0) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn iou_unit_cases() {
        assert_eq!(iou(&[0.0, 0.0, 2.0, 2.0], &[1.0, 1.0, 2.0, 2.0]), 1.0 / 7.0);
        assert_eq!(iou(&[0.0, 0.0, 2.0, 2.0], &[0.0, 0.0, 2.0, 2.0]), 1.0);
        assert_eq!(iou(&[0.0, 0.0, 1.0, 1.0], &[1.0, 0.0, 1.0, 1.0]), 0.0);
    }

    fn bank() -> ClassifierBank {
        let mut b = ClassifierBank::new(2).unwrap();
        b.insert("a", vec![1.0, 0.0], Modality::Text, "").unwrap();
        b.insert("b", vec![0.0, 1.0], Modality::Text, "").unwrap();
        b
    }

    #[test]
    fn zero_cosine_scores_bias_only() {
        let m = score_queries(&[vec![0.0f32, 3.0]], &bank(), &ScoringHead::default()).unwrap();
        assert!((m.scores()[0][0] - sigmoid(-2.0)).abs() < 1e-15);
        assert!((m.scores()[0][1] - sigmoid(48.0)).abs() < 1e-15);
        assert!(score_queries(&[vec![0.0f32, 0.0]], &bank(), &ScoringHead::default()).is_err());
        assert!(score_queries(&[vec![1.0f32]], &bank(), &ScoringHead::default()).is_err());
    }

    #[test]
    fn projection_is_applied() {
        let head = ScoringHead {
            projection: Some(vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 0.0]]),
            ..Default::default()
        };
        let m = score_queries(&[vec![1.0f32, 0.0, 5.0]], &bank(), &head).unwrap();
        assert_eq!(m.ranking(0), vec![1, 0]);
    }

    #[test]
    fn retrieval_ties_go_to_first_id() {
        let m = ScoreMatrix {
            classes: (0..10).map(|i| format!("c{i}")).collect(),
            logits: vec![vec![0.0; 10]; 4],
        };
        let r = evaluate_retrieval(&m, &[0, 1, 0, 7]).unwrap();
        assert_eq!(r.top1, 0.5);
        assert_eq!(r.top5, 0.75);
        assert!(evaluate_retrieval(&m, &[]).is_err());
    }

    fn gt(image: &str, class: &str, b: BoxXywh) -> GroundTruth {
        GroundTruth {
            image: image.into(),
            class: class.into(),
            bbox: b,
        }
    }

    fn det(image: &str, class: &str, b: BoxXywh, score: f64) -> Detection {
        Detection {
            image: image.into(),
            class: class.into(),
            bbox: b,
            score,
        }
    }

    #[test]
    fn single_match_and_false_positive_first() {
        let vocab = Vocabulary::from_ids(["a"], Bucket::Rare).unwrap();
        let g = [gt("i", "a", [0.0, 0.0, 10.0, 10.0])];
        // IoU 0.7: 7x10 inside 10x10
        let good = det("i", "a", [0.0, 0.0, 7.0, 10.0], 0.9);
        let r = compute_ap(std::slice::from_ref(&good), &g, &vocab, &ApConfig::default()).unwrap();
        assert_eq!(r.ap50, Some(1.0));
        let fp = det("i", "a", [50.0, 50.0, 5.0, 5.0], 0.95);
        let r = compute_ap(&[fp, good], &g, &vocab, &ApConfig::default()).unwrap();
        assert_eq!(r.ap50, Some(0.5 * 101.0 / 101.0));
    }

    #[test]
    fn empty_detections_give_zero_and_unknown_refs_fail() {
        let vocab = Vocabulary::from_ids(["a", "b"], Bucket::Common).unwrap();
        let g = [gt("i", "a", [0.0, 0.0, 1.0, 1.0])];
        let r = compute_ap(&[], &g, &vocab, &ApConfig::default()).unwrap();
        assert_eq!(r.map, Some(0.0));
        assert_eq!(r.per_class.len(), 1);
        let with_zero = ApConfig {
            count_missing_as_zero: true,
            ..Default::default()
        };
        assert_eq!(compute_ap(&[], &g, &vocab, &with_zero).unwrap().per_class.len(), 2);
        let bad_class = det("i", "zebra", [0.0, 0.0, 1.0, 1.0], 0.5);
        assert!(matches!(
            compute_ap(&[bad_class], &g, &vocab, &ApConfig::default()),
            Err(Error::Validation(_))
        ));
        let bad_image = det("nowhere", "a", [0.0, 0.0, 1.0, 1.0], 0.5);
        assert!(matches!(
            compute_ap(&[bad_image], &g, &vocab, &ApConfig::default()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn interpolation_envelope() {
        // TP, FP, TP with 2 GT: P = 1, 1/2, 2/3; R = 1/2, 1/2, 1
        let ap = interpolated_ap(&[true, false, true], 2);
        let expected = (51.0 * 1.0 + 50.0 * (2.0 / 3.0)) / 101.0;
        assert!((ap - expected).abs() < 1e-15);
    }
}
