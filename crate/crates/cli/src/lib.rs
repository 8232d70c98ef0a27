//! Command-line front end. [`run`] parses arguments, executes one
//! subcommand and maps the outcome to an exit code: 0 on success, 1 on
//! usage, validation or configuration errors, 2 on I/O errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ovclf::aggregator::{init_model, AggregatorModel};
use ovclf::benchmark::{inversions, split_queries, sweep_csv, sweep_k};
use ovclf::eval::{
    compute_ap, evaluate_retrieval, score_queries, ApConfig, Detection, EvalResult, GroundTruth, ScoringHead,
};
use ovclf::fusion::{fuse_banks, plan_tta, ClassifierBank, Modality, RecipeName, TtaRecipe};
use ovclf::io::write_atomic;
use ovclf::store::{
    resolve_exemplars, Bucket, ClassEntry, EmbeddingBank, ExemplarCatalog, PoolFile, ResolveConfig, Vocabulary,
};
use ovclf::synthetic::{gen_cluster_bank, ClusterSpec};
use ovclf::text::{build_text_classifier, ingest_descriptions, PromptTemplate};
use ovclf::trainer::{train_with, TrainConfig};
use ovclf::visual::{build_visual_bank, VisualMethod};
use ovclf::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_IO: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "ovclf",
    version,
    about = "Build and evaluate open-vocabulary classifier banks"
)]
pub struct Cli {
    /// Seed for every random choice; overrides seeds from config files.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pick exemplars per class from candidate pools.
    ResolveExemplars(ResolveArgs),
    /// Render one description prompt per vocabulary class.
    Prompts(PromptArgs),
    /// Average description embeddings into text classifiers.
    BuildText(BuildTextArgs),
    /// Train the exemplar aggregator contrastively.
    TrainAggregator(TrainArgs),
    /// Build vision classifiers from exemplar embeddings.
    BuildVisual(BuildVisualArgs),
    /// Add normalized text and vision classifiers.
    Fuse(FuseArgs),
    /// Emit augmentation jobs for every catalogued exemplar.
    PlanTta(PlanTtaArgs),
    /// Score queries or detections and report retrieval accuracy or AP.
    Eval(EvalArgs),
    /// Compare aggregator and mean classifiers over several K.
    SweepK(SweepArgs),
    /// Write a Gaussian class-cluster embedding bank.
    GenSynthetic(GenArgs),
}

#[derive(Debug, Args)]
pub struct ResolveArgs {
    #[arg(long)]
    pub vocab: PathBuf,
    /// JSON file with `pools` and optional `aliases`.
    #[arg(long)]
    pub pools: PathBuf,
    /// Resolver settings (JSON); flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub min_full: Option<usize>,
    #[arg(long)]
    pub min_reduced: Option<usize>,
    #[arg(long)]
    pub min_box_area: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PromptArgs {
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub prompt_template: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildTextArgs {
    #[arg(long)]
    pub descriptions: PathBuf,
    /// Output classifier bank.
    #[arg(long, visible_alias = "bank")]
    pub out: PathBuf,
    /// Also write the bank as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Checkpoint, rewritten after every epoch.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BuildVisualArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long, default_value = "vision-agg")]
    pub modality: String,
    /// Aggregator checkpoint, required for `vision-agg`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Exemplars per classifier.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub text: PathBuf,
    #[arg(long)]
    pub vision: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlanTtaArgs {
    #[arg(long)]
    pub catalog: PathBuf,
    #[arg(long, default_value = "gentle")]
    pub recipe: String,
    #[arg(long)]
    pub variants: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Classifier bank.
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Query embeddings: keyed by class id, or by image id with `--gt`.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub detections: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Aggregator used to encode retrieval queries as singleton sets.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Scoring head (JSON).
    #[arg(long)]
    pub head: Option<PathBuf>,
    /// Also score classes without ground truth, as AP 0.
    #[arg(long)]
    pub count_missing_as_zero: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10")]
    pub ks: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub queries_per_class: usize,
    #[arg(long)]
    pub head: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 50)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 20)]
    pub per_class: usize,
    #[arg(long, default_value_t = 0.05)]
    pub sigma: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub vocab_out: Option<PathBuf>,
}

/// Parses `argv` (program name first), runs the command and returns the exit
/// code. Normal output goes to `out`, diagnostics to `err`.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let text = e.render().to_string();
            if code == EXIT_OK {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    match execute(&cli, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_io() {
                EXIT_IO
            } else {
                EXIT_INVALID
            }
        }
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("input file {} not found", path.display()),
        )))
    }
}

fn require_out(path: &Path) -> Result<()> {
    let parent = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    if parent.is_dir() {
        Ok(())
    } else {
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("output directory {} does not exist", parent.display()),
        )))
    }
}

fn check_paths(inputs: &[Option<&Path>], outputs: &[Option<&Path>]) -> Result<()> {
    for p in inputs.iter().flatten() {
        require_file(p)?;
    }
    for p in outputs.iter().flatten() {
        require_out(p)?;
    }
    Ok(())
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn load_head(path: Option<&PathBuf>) -> Result<ScoringHead> {
    let head = match path {
        Some(p) => load_json(p)?,
        None => ScoringHead::default(),
    };
    head.validate()?;
    Ok(head)
}

fn save_bank(bank: &ClassifierBank, out: &Path, json: Option<&PathBuf>) -> Result<()> {
    bank.save(out)?;
    if let Some(j) = json {
        bank.save_json(j)?;
    }
    Ok(())
}

fn execute(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::ResolveExemplars(a) => {
            check_paths(&[Some(&a.vocab), Some(&a.pools), a.config.as_deref()], &[Some(&a.out)])?;
            let vocab = Vocabulary::load(&a.vocab)?;
            let pools = PoolFile::load(&a.pools)?;
            let mut config: ResolveConfig = match &a.config {
                Some(p) => load_json(p)?,
                None => ResolveConfig::default(),
            };
            if let Some(v) = a.min_full {
                config.min_full = v;
            }
            if let Some(v) = a.min_reduced {
                config.min_reduced = v;
            }
            if let Some(v) = a.min_box_area {
                config.min_box_area = v;
            }
            config.aliases.extend(pools.aliases.clone());
            let catalog = resolve_exemplars(&vocab, &pools.pools, &config)?;
            catalog.save(&a.out)?;
            writeln!(out, "seed: {seed}")?;
            for (tier, n) in catalog.tier_counts() {
                writeln!(out, "{tier:?}: {n}")?;
            }
            for s in &catalog.shortfall {
                writeln!(err, "shortfall: {} has {} exemplars", s.class, s.count)?;
            }
            if catalog.duplicates_dropped > 0 {
                writeln!(
                    err,
                    "warning: {} duplicate exemplar ids dropped",
                    catalog.duplicates_dropped
                )?;
            }
        }
        Command::Prompts(a) => {
            check_paths(&[Some(&a.vocab)], &[Some(&a.out)])?;
            let vocab = Vocabulary::load(&a.vocab)?;
            let template = match &a.prompt_template {
                Some(p) => PromptTemplate::new(p.clone())?,
                None => PromptTemplate::default(),
            };
            let mut text = String::new();
            for c in vocab.entries() {
                let line = serde_json::json!({"class": c.id, "prompt": template.render(&c.name)?});
                text.push_str(&line.to_string());
                text.push('\n');
            }
            write_atomic(&a.out, text.as_bytes())?;
            writeln!(out, "seed: {seed}\nprompts: {}", vocab.len())?;
        }
        Command::BuildText(a) => {
            check_paths(&[Some(&a.descriptions)], &[Some(&a.out), a.json.as_deref()])?;
            let sets = ingest_descriptions(&a.descriptions)?;
            let mut bank: Option<ClassifierBank> = None;
            for (class, set) in &sets {
                let embs: Vec<&[f32]> = set.descriptions.iter().filter_map(|d| d.embedding.as_deref()).collect();
                if embs.is_empty() {
                    writeln!(err, "skipped {class}: no description embeddings")?;
                    continue;
                }
                let w = build_text_classifier(&embs)?;
                let b = match &mut bank {
                    Some(b) => b,
                    None => bank.insert(ClassifierBank::new(w.len())?),
                };
                let note = format!("mean of {} of {} descriptions", embs.len(), set.len());
                b.insert(class.clone(), w, Modality::Text, note)?;
            }
            let bank = bank.ok_or_else(|| Error::Data("no class has description embeddings".into()))?;
            save_bank(&bank, &a.out, a.json.as_ref())?;
            writeln!(out, "seed: {seed}\nclasses: {}", bank.len())?;
        }
        Command::TrainAggregator(a) => {
            check_paths(
                &[a.config.as_deref(), Some(&a.bank), a.vocab.as_deref()],
                &[Some(&a.out), a.report.as_deref(), a.csv.as_deref()],
            )?;
            let mut config = match &a.config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = cli.seed {
                config.seed = s;
                config.aggregator.seed = s;
            }
            if let Some(k) = a.k {
                config.k = k;
            }
            if let Some(e) = a.epochs {
                config.epochs = e;
            }
            let bank = EmbeddingBank::load(&a.bank)?;
            let vocab = a.vocab.as_ref().map(Vocabulary::load).transpose()?;
            if config.epochs == 0 {
                config.validate()?;
                init_model(config.aggregator)?.save(&a.out)?;
            }
            let (model, report) = train_with(&config, &bank, vocab.as_ref(), |epoch, model, report| {
                model.save(&a.out)?;
                let loss = report.epoch_losses[epoch - 1];
                let _ = writeln!(err, "epoch {epoch}: mean loss {loss:.6}");
                Ok(())
            })?;
            model.save(&a.out)?;
            if let Some(p) = &a.report {
                report.save_json(p)?;
            }
            if let Some(p) = &a.csv {
                report.save_csv(p)?;
            }
            writeln!(out, "seed: {}\nsteps: {}", config.seed, report.steps)?;
            if let Some(l) = report.final_loss {
                writeln!(out, "final loss: {l}")?;
            }
            writeln!(err, "wall clock: {:.2}s", report.wall_clock_secs)?;
        }
        Command::BuildVisual(a) => {
            check_paths(&[Some(&a.bank), a.model.as_deref()], &[Some(&a.out), a.json.as_deref()])?;
            let modality = Modality::parse(&a.modality)?;
            let bank = EmbeddingBank::load(&a.bank)?;
            let model = a.model.as_ref().map(AggregatorModel::load).transpose()?;
            let method = match (modality, &model) {
                (Modality::VisionAgg, Some(m)) => VisualMethod::Aggregator(m),
                (Modality::VisionAgg, None) => return Err(Error::Config("--modality vision-agg needs --model".into())),
                (Modality::VisionMean, _) => VisualMethod::Mean,
                (m, _) => return Err(Error::Config(format!("build-visual cannot produce `{m}` classifiers"))),
            };
            let (classifiers, skipped) = build_visual_bank(&bank, method, a.k)?;
            for s in &skipped {
                writeln!(err, "skipped {s}: no exemplars")?;
            }
            save_bank(&classifiers, &a.out, a.json.as_ref())?;
            writeln!(out, "seed: {seed}\nclasses: {}", classifiers.len())?;
        }
        Command::Fuse(a) => {
            check_paths(&[Some(&a.text), Some(&a.vision)], &[Some(&a.out), a.json.as_deref()])?;
            let text = ClassifierBank::load(&a.text)?;
            let vision = ClassifierBank::load(&a.vision)?;
            let fused = fuse_banks(&text, &vision)?;
            save_bank(&fused, &a.out, a.json.as_ref())?;
            writeln!(out, "seed: {seed}\nclasses: {}", fused.len())?;
        }
        Command::PlanTta(a) => {
            check_paths(&[Some(&a.catalog)], &[Some(&a.out)])?;
            let catalog = ExemplarCatalog::load(&a.catalog)?;
            let mut recipe = TtaRecipe::named(RecipeName::parse(&a.recipe)?);
            if let Some(v) = a.variants {
                recipe.variants = v;
            }
            let plan = plan_tta(&catalog, &recipe, seed)?;
            write_atomic(&a.out, plan.to_jsonl().as_bytes())?;
            for s in &plan.skipped {
                writeln!(err, "skipped {s}: no exemplars")?;
            }
            writeln!(out, "seed: {seed}\njobs: {}", plan.jobs.len())?;
        }
        Command::Eval(a) => {
            let result = run_eval(a)?;
            write_atomic(&a.out, result.to_json().as_bytes())?;
            writeln!(out, "seed: {seed}")?;
            write!(out, "{}", result.table())?;
        }
        Command::SweepK(a) => {
            check_paths(
                &[Some(&a.bank), a.config.as_deref(), a.head.as_deref()],
                &[Some(&a.out)],
            )?;
            let mut config = match &a.config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = cli.seed {
                config.seed = s;
                config.aggregator.seed = s;
            }
            let head = load_head(a.head.as_ref())?;
            let bank = EmbeddingBank::load(&a.bank)?;
            let split = split_queries(&bank, a.queries_per_class)?;
            let rows = sweep_k(&split, &a.ks, &config, &head)?;
            write_atomic(&a.out, sweep_csv(&rows).as_bytes())?;
            writeln!(out, "seed: {}", config.seed)?;
            for r in &rows {
                writeln!(
                    out,
                    "K={:<3} aggregator top-1 {:.4}  mean top-1 {:.4}",
                    r.k, r.aggregator_top1, r.mean_top1
                )?;
            }
            let (n, worst) = inversions(&rows);
            writeln!(out, "inversions: {n} (largest {:.2} points)", 100.0 * worst)?;
        }
        Command::GenSynthetic(a) => {
            check_paths(&[], &[Some(&a.out), a.vocab_out.as_deref()])?;
            let spec = ClusterSpec {
                classes: a.classes,
                dim: a.dim,
                per_class: a.per_class,
                sigma: a.sigma,
                seed,
                ..Default::default()
            };
            let bank = gen_cluster_bank(&spec)?;
            bank.save(&a.out)?;
            if let Some(p) = &a.vocab_out {
                spec.vocabulary()?.save(p)?;
            }
            writeln!(out, "seed: {seed}\nrecords: {}", bank.total_records())?;
        }
    }
    Ok(())
}

/// Vocabulary from `--vocab`, or every listed class as `common`.
fn vocab_or_default<'a>(path: Option<&PathBuf>, classes: impl Iterator<Item = &'a str>) -> Result<Vocabulary> {
    match path {
        Some(p) => Vocabulary::load(p),
        None => {
            let mut ids: Vec<&str> = classes.collect();
            ids.sort_unstable();
            ids.dedup();
            Vocabulary::new(ids.into_iter().map(|c| ClassEntry::new(c, c, Bucket::Common)).collect())
        }
    }
}

/// The three evaluation modes:
///
/// * `--bank --queries`: retrieval; query classes are the bank keys.
/// * `--bank --queries --gt`: boxes; the query records of an image are the
///   region features of that image's ground-truth boxes, in file order. Every
///   box is scored against every class and the scores feed AP.
/// * `--detections --gt`: AP of precomputed detections.
pub fn run_eval(a: &EvalArgs) -> Result<EvalResult> {
    check_paths(
        &[
            a.bank.as_deref(),
            a.queries.as_deref(),
            a.gt.as_deref(),
            a.detections.as_deref(),
            a.vocab.as_deref(),
            a.model.as_deref(),
            a.head.as_deref(),
        ],
        &[Some(&a.out)],
    )?;
    let ap_config = ApConfig {
        count_missing_as_zero: a.count_missing_as_zero,
        ..Default::default()
    };
    match (&a.bank, &a.queries, &a.gt, &a.detections) {
        (None, None, Some(gt), Some(dets)) => {
            let gts = GroundTruth::load_jsonl(gt)?;
            let dets = Detection::load_jsonl(dets)?;
            let vocab = vocab_or_default(a.vocab.as_ref(), gts.iter().map(|g| g.class.as_str()))?;
            compute_ap(&dets, &gts, &vocab, &ap_config)
        }
        (Some(bank), Some(queries), gt, None) => {
            let head = load_head(a.head.as_ref())?;
            let classifiers = ClassifierBank::load(bank)?;
            let queries = EmbeddingBank::load(queries)?;
            let model = a.model.as_ref().map(AggregatorModel::load).transpose()?;
            let encode = |q: &[f32]| -> Result<Vec<f32>> {
                match &model {
                    Some(m) => m.aggregate(&[q]),
                    None => Ok(q.to_vec()),
                }
            };
            match gt {
                None => {
                    let mut features = Vec::new();
                    let mut labels = Vec::new();
                    let ids: Vec<&str> = classifiers.class_ids().collect();
                    for (class, records) in queries.iter() {
                        let label = ids
                            .binary_search(&class)
                            .map_err(|_| Error::Validation(format!("query class `{class}` has no classifier")))?;
                        for r in records {
                            features.push(encode(&r.embedding)?);
                            labels.push(label);
                        }
                    }
                    let scores = score_queries(&features, &classifiers, &head)?;
                    let m = evaluate_retrieval(&scores, &labels)?;
                    Ok(EvalResult {
                        top1: Some(m.top1),
                        top5: Some(m.top5),
                        ..Default::default()
                    })
                }
                Some(gt) => {
                    let gts = GroundTruth::load_jsonl(gt)?;
                    let vocab = vocab_or_default(a.vocab.as_ref(), classifiers.class_ids())?;
                    let dets = box_detections(&classifiers, &queries, &gts, &head, encode)?;
                    compute_ap(&dets, &gts, &vocab, &ap_config)
                }
            }
        }
        _ => Err(Error::Config(
            "eval needs --bank with --queries (optionally --gt), or --detections with --gt".into(),
        )),
    }
}

/// Scores each ground-truth box's feature against every classifier.
pub fn box_detections<F>(
    classifiers: &ClassifierBank,
    queries: &EmbeddingBank,
    gts: &[GroundTruth],
    head: &ScoringHead,
    encode: F,
) -> Result<Vec<Detection>>
where
    F: Fn(&[f32]) -> Result<Vec<f32>>,
{
    let mut boxes: std::collections::BTreeMap<&str, Vec<&GroundTruth>> = Default::default();
    for g in gts {
        boxes.entry(&g.image).or_default().push(g);
    }
    for (image, _) in queries.iter() {
        if !boxes.contains_key(image) {
            return Err(Error::Validation(format!("query image `{image}` has no ground truth")));
        }
    }
    let mut dets = Vec::new();
    for (image, gt_boxes) in &boxes {
        let records = queries.records(image).unwrap_or(&[]);
        if records.len() != gt_boxes.len() {
            return Err(Error::Validation(format!(
                "image `{image}` has {} ground-truth boxes but {} query features",
                gt_boxes.len(),
                records.len()
            )));
        }
        let features = records
            .iter()
            .map(|r| encode(&r.embedding))
            .collect::<Result<Vec<_>>>()?;
        let scores = score_queries(&features, classifiers, head)?.scores();
        let classes: Vec<&str> = classifiers.class_ids().collect();
        for (g, row) in gt_boxes.iter().zip(&scores) {
            for (class, &s) in classes.iter().zip(row) {
                dets.push(Detection {
                    image: image.to_string(),
                    class: class.to_string(),
                    bbox: g.bbox,
                    score: s,
                });
            }
        }
    }
    Ok(dets)
}
