//! Retrieval benchmark comparing aggregated and mean classifiers.
//!
//! The last `queries_per_class` records of every class are held out as
//! queries; the aggregator is trained on the rest and classifiers use the
//! first `k` remaining exemplars. Aggregated classifiers are matched against
//! queries passed through the aggregator as singleton sets, since training
//! only aligns aggregator outputs with each other. Mean classifiers are
//! matched against the raw query embeddings.

use serde::{Deserialize, Serialize};

use crate::aggregator::AggregatorModel;
use crate::error::{Error, Result};
use crate::eval::{evaluate_retrieval, score_queries, RetrievalMetrics, ScoringHead};
use crate::fusion::ClassifierBank;
use crate::store::EmbeddingBank;
use crate::trainer::{train, TrainConfig, TrainReport};
use crate::visual::{build_visual_bank, VisualMethod};

#[derive(Clone, Debug, PartialEq)]
pub struct QuerySplit {
    pub train: EmbeddingBank,
    /// `(class, embedding)` in class order.
    pub queries: Vec<(String, Vec<f32>)>,
}

pub fn split_queries(bank: &EmbeddingBank, queries_per_class: usize) -> Result<QuerySplit> {
    if queries_per_class == 0 {
        return Err(Error::Parameter("queries_per_class must be at least 1".into()));
    }
    let mut train = EmbeddingBank::new(bank.dimension())?;
    let mut queries = Vec::new();
    for (class, records) in bank.iter() {
        if records.len() <= queries_per_class {
            return Err(Error::Data(format!(
                "class `{class}` has {} records; {queries_per_class} queries leave none for training",
                records.len()
            )));
        }
        let cut = records.len() - queries_per_class;
        for r in &records[..cut] {
            train.push(class, r.clone())?;
        }
        queries.extend(records[cut..].iter().map(|r| (class.to_owned(), r.embedding.clone())));
    }
    Ok(QuerySplit { train, queries })
}

/// Top-1/top-5 of `queries` against `classifiers`, after `encode`.
pub fn retrieval<F>(
    classifiers: &ClassifierBank,
    queries: &[(String, Vec<f32>)],
    head: &ScoringHead,
    encode: F,
) -> Result<RetrievalMetrics>
where
    F: Fn(&[f32]) -> Result<Vec<f32>>,
{
    let features = queries.iter().map(|(_, q)| encode(q)).collect::<Result<Vec<_>>>()?;
    let scores = score_queries(&features, classifiers, head)?;
    let labels = queries
        .iter()
        .map(|(c, _)| {
            scores.class_index(c).ok_or_else(|| Error::Lookup {
                kind: "class",
                name: c.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_retrieval(&scores, &labels)
}

pub fn aggregator_retrieval(
    model: &AggregatorModel,
    split: &QuerySplit,
    k: usize,
    head: &ScoringHead,
) -> Result<RetrievalMetrics> {
    let (bank, _) = build_visual_bank(&split.train, VisualMethod::Aggregator(model), k)?;
    retrieval(&bank, &split.queries, head, |q| model.aggregate(&[q]))
}

pub fn mean_retrieval(split: &QuerySplit, k: usize, head: &ScoringHead) -> Result<RetrievalMetrics> {
    let (bank, _) = build_visual_bank(&split.train, VisualMethod::Mean, k)?;
    retrieval(&bank, &split.queries, head, |q| Ok(q.to_vec()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub k: usize,
    pub aggregator: RetrievalMetrics,
    pub mean: RetrievalMetrics,
    pub report: TrainReport,
}

/// Trains on the split's training part with `config` and scores both
/// methods with `config.k` exemplars per classifier.
pub fn compare_with_mean(
    split: &QuerySplit,
    config: &TrainConfig,
    head: &ScoringHead,
) -> Result<(AggregatorModel, Comparison)> {
    let (model, report) = train(config, &split.train, None)?;
    let aggregator = aggregator_retrieval(&model, split, config.k, head)?;
    let mean = mean_retrieval(split, config.k, head)?;
    Ok((
        model,
        Comparison {
            k: config.k,
            aggregator,
            mean,
            report,
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub aggregator_top1: f64,
    pub aggregator_top5: f64,
    pub mean_top1: f64,
    pub mean_top5: f64,
    pub final_loss: Option<f64>,
}

/// Trains one aggregator per `K` (set sizes drawn from `1..=K`) and
/// evaluates it with `K` exemplars per classifier.
pub fn sweep_k(split: &QuerySplit, ks: &[usize], base: &TrainConfig, head: &ScoringHead) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let config = TrainConfig { k, ..base.clone() };
        let (_, c) = compare_with_mean(split, &config, head)?;
        rows.push(SweepRow {
            k,
            aggregator_top1: c.aggregator.top1,
            aggregator_top5: c.aggregator.top5,
            mean_top1: c.mean.top1,
            mean_top5: c.mean.top5,
            final_loss: c.report.final_loss,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("k,aggregator_top1,aggregator_top5,mean_top1,mean_top5,final_loss\n");
    for r in rows {
        let loss = r.final_loss.map_or_else(String::new, |l| l.to_string());
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.k, r.aggregator_top1, r.aggregator_top5, r.mean_top1, r.mean_top5, loss
        ));
    }
    out
}

/// Counts places where accuracy drops as `k` grows; returns the number of
/// drops and the largest one.
pub fn inversions(rows: &[SweepRow]) -> (usize, f64) {
    let mut count = 0;
    let mut worst = 0.0f64;
    for w in rows.windows(2) {
        let drop = w[0].aggregator_top1 - w[1].aggregator_top1;
        if drop > 0.0 {
            count += 1;
            worst = worst.max(drop);
        }
    }
    (count, worst)
}
