//! Contrastive training of the aggregator.
//!
//! Each step samples `batch_size` distinct classes. For every class a set
//! size `k ∈ [1, K]` is drawn and two exemplar sets of that size are
//! aggregated; the first output is the anchor, the second the positive.
//! Negatives are the other classes' positives in the batch plus every filled
//! queue slot whose class differs from the anchor's. After the AdamW update
//! the positives are pushed into the queue.

use std::collections::HashSet;
use std::path::Path;
use std::time::Instant;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregator::{forward, init_model, AggregatorConfig, AggregatorModel, ModelVars};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::numerics::{l2_norm_f64, AdamWConfig, AdamWState, ParamSet, Scalar, Tape, Tensor, Var};
use crate::store::{EmbeddingBank, Vocabulary};

/// Tolerance on the unit norm of queue entries.
pub const QUEUE_NORM_TOLERANCE: f64 = 1e-5;
/// Tolerance on the unit norm of [`info_nce_loss`] inputs.
pub const LOSS_NORM_TOLERANCE: f64 = 1e-4;

/// How the sizes of the two sets of a training pair are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SetSizes {
    /// One `k` per class, shared by both sets.
    #[default]
    Shared,
    /// Each set draws its own `k`, so classifiers built from few exemplars
    /// are pulled towards those built from many.
    Independent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Largest set size; every set size is drawn from `1..=k`.
    pub k: usize,
    pub set_sizes: SetSizes,
    pub temperature: f64,
    /// Queue capacity in set slots; 0 disables the queue.
    pub queue_capacity: usize,
    /// Upper bound on slots written per step.
    pub queue_update: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Steps per epoch. When absent an epoch is one pass over the classes,
    /// `num_classes / batch_size` steps.
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
    pub aggregator: AggregatorConfig,
    #[serde(flatten)]
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 5,
            set_sizes: SetSizes::Shared,
            temperature: 0.02,
            queue_capacity: 4096,
            queue_update: 512,
            batch_size: 512,
            epochs: 10,
            steps_per_epoch: None,
            seed: 0,
            aggregator: AggregatorConfig::default(),
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.queue_update > self.queue_capacity {
            return Err(Error::Config(format!(
                "queue_update {} exceeds queue_capacity {}",
                self.queue_update, self.queue_capacity
            )));
        }
        if self.queue_capacity > 0 && self.batch_size > self.queue_update {
            return Err(Error::Config(format!(
                "batch_size {} exceeds queue_update {}",
                self.batch_size, self.queue_update
            )));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Config("steps_per_epoch must be positive".into()));
        }
        self.aggregator.validate()?;
        self.optimizer.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }
}

/// Ring buffer of aggregated set outputs used as extra negatives.
///
/// Writes start at the cursor and wrap, so the oldest slots are replaced
/// first.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeQueue {
    capacity: usize,
    max_push: usize,
    slots: Vec<(String, Vec<f32>)>,
    cursor: usize,
}

impl NegativeQueue {
    pub fn new(capacity: usize, max_push: usize) -> Result<Self> {
        if max_push > capacity {
            return Err(Error::Parameter(format!(
                "slots replaced per push ({max_push}) exceed capacity ({capacity})"
            )));
        }
        Ok(Self {
            capacity,
            max_push,
            slots: Vec::with_capacity(capacity),
            cursor: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Filled slots in storage order.
    pub fn entries(&self) -> &[(String, Vec<f32>)] {
        &self.slots
    }

    pub fn push<S: AsRef<str>, E: AsRef<[f32]>>(&mut self, entries: &[(S, E)]) -> Result<()> {
        if entries.len() > self.max_push {
            return Err(Error::Parameter(format!(
                "push of {} entries exceeds the per-step limit {}",
                entries.len(),
                self.max_push
            )));
        }
        for (i, (_, e)) in entries.iter().enumerate() {
            let n = l2_norm_f64(e.as_ref());
            if (n - 1.0).abs() > QUEUE_NORM_TOLERANCE {
                return Err(Error::Validation(format!("queue entry {i} has norm {n}")));
            }
        }
        if self.capacity == 0 {
            return Ok(());
        }
        for (class, e) in entries {
            let slot = (class.as_ref().to_owned(), e.as_ref().to_vec());
            if self.slots.len() < self.capacity {
                self.slots.push(slot);
            } else {
                self.slots[self.cursor] = slot;
            }
            self.cursor = (self.cursor + 1) % self.capacity;
        }
        Ok(())
    }
}

/// Two exemplar sets of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub a: Vec<Vec<f32>>,
    pub b: Vec<Vec<f32>>,
    /// `false` when the class had fewer than `2k` records and both sets were
    /// drawn with replacement.
    pub disjoint: bool,
}

pub fn sample_training_pair<R: Rng + ?Sized>(
    bank: &EmbeddingBank,
    class: &str,
    k: usize,
    rng: &mut R,
) -> Result<TrainingPair> {
    sample_sized_pair(bank, class, k, k, rng)
}

/// Like [`sample_training_pair`] with separate sizes for the two sets; the
/// sets are disjoint whenever the class has `ka + kb` records.
pub fn sample_sized_pair<R: Rng + ?Sized>(
    bank: &EmbeddingBank,
    class: &str,
    ka: usize,
    kb: usize,
    rng: &mut R,
) -> Result<TrainingPair> {
    let records = bank.records(class).ok_or_else(|| Error::Lookup {
        kind: "class",
        name: class.to_owned(),
    })?;
    if records.is_empty() {
        return Err(Error::Data(format!("class `{class}` has no embeddings")));
    }
    if ka == 0 || kb == 0 {
        return Err(Error::Parameter("set size must be at least 1".into()));
    }
    let n = records.len();
    let pick = |i: usize| records[i].embedding.clone();
    if n >= ka + kb {
        let idx = index::sample(rng, n, ka + kb).into_vec();
        Ok(TrainingPair {
            a: idx[..ka].iter().map(|&i| pick(i)).collect(),
            b: idx[ka..].iter().map(|&i| pick(i)).collect(),
            disjoint: true,
        })
    } else {
        let draw = |rng: &mut R, k: usize| (0..k).map(|_| pick(rng.random_range(0..n))).collect::<Vec<_>>();
        let a = draw(rng, ka);
        let b = draw(rng, kb);
        Ok(TrainingPair { a, b, disjoint: false })
    }
}

/// `−log( e^{a·p/τ} / (e^{a·p/τ} + Σₙ e^{a·n/τ}) )`, evaluated with the
/// largest logit subtracted.
pub fn info_nce_loss<N: AsRef<[f64]>>(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[N],
    temperature: f64,
) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if negatives.is_empty() {
        return Err(Error::Config("InfoNCE needs at least one negative".into()));
    }
    let d = anchor.len();
    let check = |name: &str, v: &[f64]| -> Result<()> {
        if v.len() != d {
            return Err(Error::Validation(format!(
                "{name} has dimension {}, anchor {d}",
                v.len()
            )));
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (n - 1.0).abs() > LOSS_NORM_TOLERANCE {
            return Err(Error::Validation(format!("{name} is not unit-norm (norm {n})")));
        }
        Ok(())
    };
    check("anchor", anchor)?;
    check("positive", positive)?;
    for (i, n) in negatives.iter().enumerate() {
        check(&format!("negative {i}"), n.as_ref())?;
    }
    let dot = |v: &[f64]| anchor.iter().zip(v).map(|(x, y)| x * y).sum::<f64>() / temperature;
    let pos = dot(positive);
    let logits: Vec<f64> = std::iter::once(pos)
        .chain(negatives.iter().map(|n| dot(n.as_ref())))
        .collect();
    // log Σ e^{l - mx} = ln_1p(Σ over the non-maximal terms), which keeps
    // precision when the positive dominates and the loss is near zero
    let top = (0..logits.len()).fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
    let mx = logits[top];
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, l)| (l - mx).exp())
        .sum();
    Ok(rest.ln_1p() + (mx - pos))
}

/// Sampled sets for one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub classes: Vec<String>,
    pub pairs: Vec<TrainingPair>,
}

impl TrainBatch {
    pub fn sample<R: Rng + ?Sized>(
        bank: &EmbeddingBank,
        classes: &[String],
        k_max: usize,
        sizes: SetSizes,
        rng: &mut R,
    ) -> Result<Self> {
        let mut pairs = Vec::with_capacity(classes.len());
        for c in classes {
            let ka = rng.random_range(1..=k_max);
            let kb = match sizes {
                SetSizes::Shared => ka,
                SetSizes::Independent => rng.random_range(1..=k_max),
            };
            pairs.push(sample_sized_pair(bank, c, ka, kb, rng)?);
        }
        Ok(Self {
            classes: classes.to_vec(),
            pairs,
        })
    }
}

/// Logit-column validity for every anchor: all in-batch positives, plus the
/// queue slots of a different class.
pub fn negative_mask(classes: &[String], queue: &NegativeQueue) -> Result<Vec<bool>> {
    let b = classes.len();
    let distinct: HashSet<&str> = classes.iter().map(String::as_str).collect();
    if distinct.len() != b {
        return Err(Error::Parameter("batch classes must be distinct".into()));
    }
    let n = b + queue.len();
    let mut mask = vec![true; b * n];
    for (i, c) in classes.iter().enumerate() {
        for (j, (qc, _)) in queue.entries().iter().enumerate() {
            mask[i * n + b + j] = qc != c;
        }
    }
    Ok(mask)
}

/// Records the mean InfoNCE loss of one batch on `tape`.
///
/// `param_vars` are the aggregator parameters bound on the tape in
/// declaration order. Returns the loss and the `B x d` positive outputs.
pub fn record_batch_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    config: &AggregatorConfig,
    param_vars: &[Var],
    batch: &TrainBatch,
    queue: &NegativeQueue,
    temperature: f64,
) -> Result<(Var, Var)> {
    let vars = ModelVars::bind(config, param_vars)?;
    let set_input = |tape: &mut Tape<'_, T>, set: &[Vec<f32>]| -> Result<Var> {
        let data = set.iter().flatten().map(|&v| T::cast_from(v as f64)).collect();
        let x = tape.constant(Tensor::matrix(set.len(), config.dim, data)?)?;
        forward(tape, config, &vars, x)
    };
    let mut anchors = Vec::with_capacity(batch.pairs.len());
    let mut positives = Vec::with_capacity(batch.pairs.len());
    for p in &batch.pairs {
        anchors.push(set_input(tape, &p.a)?);
        positives.push(set_input(tape, &p.b)?);
    }
    let anchors = tape.concat_rows(&anchors)?;
    let positives = tape.concat_rows(&positives)?;
    let keys = if queue.is_empty() {
        positives
    } else {
        let data = queue
            .entries()
            .iter()
            .flat_map(|(_, e)| e.iter().map(|&v| T::cast_from(v as f64)))
            .collect();
        let q = tape.constant(Tensor::matrix(queue.len(), config.dim, data)?)?;
        tape.concat_rows(&[positives, q])?
    };
    let logits = tape.matmul_t(anchors, keys)?;
    let logits = tape.scale(logits, T::cast_from(1.0 / temperature))?;
    let mask = negative_mask(&batch.classes, queue)?;
    let targets: Vec<usize> = (0..batch.classes.len()).collect();
    let loss = tape.masked_cross_entropy(logits, &targets, &mask)?;
    Ok((loss, positives))
}

/// Mean InfoNCE over a batch in either precision, without gradients.
pub fn batch_loss<T: Scalar>(
    config: &AggregatorConfig,
    params: &ParamSet<T>,
    batch: &TrainBatch,
    queue: &NegativeQueue,
    temperature: f64,
) -> Result<T> {
    let mut tape = Tape::new();
    let vars = tape.params(params)?;
    let (loss, _) = record_batch_loss(&mut tape, config, &vars, batch, queue, temperature)?;
    Ok(tape.value(loss).data()[0])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub final_loss: Option<f64>,
    pub steps: usize,
    pub seed: u64,
    pub config: TrainConfig,
    /// Seconds spent in [`train`]. Not serialized, so reports of identical
    /// runs are byte-identical.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data") + "\n"
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss\n");
        for (i, l) in self.epoch_losses.iter().enumerate() {
            out.push_str(&format!("{},{l}\n", i + 1));
        }
        out
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_json().as_bytes())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_csv().as_bytes())
    }
}

pub fn train(
    config: &TrainConfig,
    bank: &EmbeddingBank,
    vocab: Option<&Vocabulary>,
) -> Result<(AggregatorModel, TrainReport)> {
    train_with(config, bank, vocab, |_, _, _| Ok(()))
}

/// Like [`train`], calling `on_epoch(epoch, model, report)` after each epoch
/// (1-based), e.g. to write a checkpoint.
pub fn train_with<F>(
    config: &TrainConfig,
    bank: &EmbeddingBank,
    vocab: Option<&Vocabulary>,
    mut on_epoch: F,
) -> Result<(AggregatorModel, TrainReport)>
where
    F: FnMut(usize, &AggregatorModel, &TrainReport) -> Result<()>,
{
    let started = Instant::now();
    config.validate()?;
    if bank.dimension() != config.aggregator.dim {
        return Err(Error::Config(format!(
            "bank dimension {} != model dimension {}",
            bank.dimension(),
            config.aggregator.dim
        )));
    }
    if let Some(v) = vocab {
        bank.validate_against(v)?;
    }
    let classes: Vec<String> = bank
        .iter()
        .filter(|(_, r)| !r.is_empty())
        .map(|(c, _)| c.to_owned())
        .collect();
    if classes.len() < config.batch_size {
        return Err(Error::Config(format!(
            "bank has {} non-empty classes, batch_size is {}",
            classes.len(),
            config.batch_size
        )));
    }

    let mut model = init_model(config.aggregator)?;
    let mut opt = AdamWState::new(model.params(), config.optimizer)?;
    let mut queue = NegativeQueue::new(config.queue_capacity, config.queue_update)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let steps_per_epoch = config.steps_per_epoch.unwrap_or(classes.len() / config.batch_size);

    let mut order = classes.clone();
    let mut cursor = order.len();
    let mut report = TrainReport {
        epoch_losses: Vec::with_capacity(config.epochs),
        final_loss: None,
        steps: 0,
        seed: config.seed,
        config: config.clone(),
        wall_clock_secs: 0.0,
    };

    for epoch in 1..=config.epochs {
        let mut total = 0.0;
        for _ in 0..steps_per_epoch {
            if cursor + config.batch_size > order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let chosen = &order[cursor..cursor + config.batch_size];
            cursor += config.batch_size;
            let batch = TrainBatch::sample(bank, chosen, config.k, config.set_sizes, &mut rng)?;
            let loss = train_step(
                &mut model,
                &mut opt,
                &mut queue,
                &batch,
                config.temperature,
                report.steps,
            )?;
            total += loss;
            report.steps += 1;
            report.final_loss = Some(loss);
        }
        report.epoch_losses.push(total / steps_per_epoch.max(1) as f64);
        report.wall_clock_secs = started.elapsed().as_secs_f64();
        on_epoch(epoch, &model, &report)?;
    }
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok((model, report))
}

/// One forward/backward/update cycle. Returns the batch loss.
pub fn train_step(
    model: &mut AggregatorModel,
    opt: &mut AdamWState<f32>,
    queue: &mut NegativeQueue,
    batch: &TrainBatch,
    temperature: f64,
    step: usize,
) -> Result<f64> {
    let config = *model.config();
    let diverged = |class: &str| Error::Diverged {
        step,
        class: class.to_owned(),
    };
    let (loss, grads, pushed) = {
        let mut tape = Tape::new();
        let vars = tape.params(model.params())?;
        let recorded = record_batch_loss(&mut tape, &config, &vars, batch, queue, temperature);
        let (loss, positives) = match recorded {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => {
                let bad = tape.last_row_losses().iter().position(|l| !l.is_finite()).unwrap_or(0);
                return Err(diverged(&batch.classes[bad]));
            }
            Err(e) => return Err(e),
        };
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            let bad = tape.last_row_losses().iter().position(|l| !l.is_finite()).unwrap_or(0);
            return Err(diverged(&batch.classes[bad]));
        }
        let grads = tape.backward(loss, model.params())?;
        let pos = tape.value(positives);
        let pushed: Vec<(String, Vec<f32>)> = batch
            .classes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), pos.row(i).to_vec()))
            .collect();
        (value, grads, pushed)
    };
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(diverged(&batch.classes[0]));
    }
    model.params_mut().set_grads(grads)?;
    opt.step(model.params_mut())?;
    queue.push(&pushed)?;
    Ok(loss)
}
