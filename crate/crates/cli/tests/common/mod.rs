//! Runs the CLI in-process and lays out a small input workspace.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use ovclf::eval::{Detection, GroundTruth};
use ovclf::store::{
    BankRecord, Bucket, Candidate, CandidatePool, ClassEntry, EmbeddingBank, PoolFile, PoolKind, SourceTag, Vocabulary,
};
use ovclf::synthetic::gen_detection_fixture;

pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn run(args: &[&str]) -> Output {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("ovclf").chain(args.iter().copied());
    let code = ovclf_cli::run(argv, &mut out, &mut err);
    Output {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

/// Runs and panics with stderr unless the exit code is 0.
pub fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert_eq!(o.code, 0, "{args:?}\n{}", o.stderr);
    o
}

pub const TRAIN_CONFIG: &str = r#"{
  "k": 3,
  "set_sizes": "independent",
  "queue_capacity": 6,
  "queue_update": 3,
  "batch_size": 3,
  "epochs": 3,
  "learning_rate": 0.001,
  "aggregator": {"blocks": 1, "dim": 16, "mlp_dim": 32, "heads": 2}
}"#;

pub const CLASSES: usize = 6;
pub const DIM: usize = 16;

/// A directory holding every input file the subcommands need. The cluster
/// bank itself comes from `gen-synthetic`, so the layout depends on the CLI.
pub struct Workspace {
    pub dir: tempfile::TempDir,
}

impl Workspace {
    pub fn new() -> Self {
        let ws = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        let (bank, vocab) = (ws.s("bank.ovb"), ws.s("vocab.jsonl"));
        ok(&[
            "--seed",
            "4",
            "gen-synthetic",
            "--classes",
            "6",
            "--dim",
            "16",
            "--per-class",
            "12",
            "--out",
            &bank,
            "--vocab-out",
            &vocab,
        ]);
        ws.write_inputs();
        ws
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn s(&self, name: &str) -> String {
        self.path(name).into_os_string().into_string().unwrap()
    }

    pub fn bank(&self) -> EmbeddingBank {
        EmbeddingBank::load(self.path("bank.ovb")).unwrap()
    }

    fn write(&self, name: &str, text: &str) {
        std::fs::write(self.path(name), text).unwrap();
    }

    fn write_inputs(&self) {
        let bank = self.bank();
        self.write("train.json", TRAIN_CONFIG);

        // descriptions: two per class from the first records; in the
        // partial file class5 has text only and is skipped by build-text
        let mut desc = String::new();
        let mut partial = String::new();
        for (class, records) in bank.iter() {
            for (i, r) in records.iter().take(2).enumerate() {
                let mut line = serde_json::json!({"class": class, "text": format!("{class} description {i}")});
                if class == "class5" {
                    partial.push_str(&line.to_string());
                    partial.push('\n');
                }
                line["embedding"] = serde_json::json!(r.embedding);
                desc.push_str(&line.to_string());
                desc.push('\n');
                if class != "class5" {
                    partial.push_str(&line.to_string());
                    partial.push('\n');
                }
            }
        }
        self.write("descriptions.jsonl", &desc);
        self.write("descriptions_partial.jsonl", &partial);

        // retrieval queries: the last record of every class
        let mut queries = EmbeddingBank::new(DIM).unwrap();
        for (class, records) in bank.iter() {
            queries.push(class, records.last().unwrap().clone()).unwrap();
        }
        queries.save(self.path("queries.ovb")).unwrap();

        // box mode: two images, one ground-truth box per class
        let mut gts = Vec::new();
        let mut feats = EmbeddingBank::new(DIM).unwrap();
        for (c, (class, records)) in bank.iter().enumerate() {
            let image = format!("img{}", c % 2);
            let x = 10.0 * c as f64;
            gts.push(GroundTruth {
                image: image.clone(),
                class: class.to_string(),
                bbox: [x, x, 40.0, 30.0],
            });
            feats
                .push(
                    &image,
                    BankRecord::new(records[10].embedding.clone(), SourceTag::Synthetic, 0),
                )
                .unwrap();
        }
        feats.save(self.path("boxes.ovb")).unwrap();
        self.write("boxes_gt.jsonl", &GroundTruth::to_jsonl(&gts));

        let f = gen_detection_fixture("crowded").unwrap();
        self.write("dets.jsonl", &Detection::to_jsonl(&f.detections));
        self.write("dets_gt.jsonl", &GroundTruth::to_jsonl(&f.groundtruth));
        f.vocabulary().unwrap().save(self.path("dets_vocab.jsonl")).unwrap();

        self.write_resolver_inputs();
    }

    fn write_resolver_inputs(&self) {
        let ids = ["heron", "kettle", "lantern"];
        let vocab = Vocabulary::new(
            ids.iter()
                .map(|&i| ClassEntry::new(i, i, Bucket::Rare).with_synset(format!("{i}.n.01")))
                .collect(),
        )
        .unwrap();
        vocab.save(self.path("resolve_vocab.jsonl")).unwrap();
        let mut in21k = Vec::new();
        let mut boxes = Vec::new();
        let mut vg = Vec::new();
        for (i, id) in ids.iter().enumerate() {
            for j in 0..(45 - 15 * i) {
                in21k.push(Candidate::synset(format!("{id}/a{j}"), format!("{id}.n.01")));
            }
            for j in 0..8 {
                let area = if j % 2 == 0 { 2048.0 } else { 512.0 };
                boxes.push(Candidate::boxed(format!("{id}/b{j}"), *id, area));
            }
            vg.push(Candidate::synset(format!("{id}/v0"), format!("alt_{id}.n.01")));
        }
        let pools = PoolFile {
            pools: vec![
                CandidatePool {
                    kind: PoolKind::In21k,
                    items: in21k,
                },
                CandidatePool {
                    kind: PoolKind::DetectionBox,
                    items: boxes,
                },
                CandidatePool {
                    kind: PoolKind::Visualgenome,
                    items: vg,
                },
            ],
            aliases: [("lantern".to_string(), "alt_lantern.n.01".to_string())].into(),
        };
        self.write("pools.json", &serde_json::to_string_pretty(&pools).unwrap());
    }
}

/// File name and contents.
pub type Files = Vec<(String, Vec<u8>)>;

/// Every file under `dir`, sorted by name, with its bytes.
pub fn snapshot(dir: &Path) -> Files {
    let mut files: Files = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

/// Argument lists for every subcommand, writing into `out/`.
pub fn all_commands(ws: &Workspace, seed: &str) -> Vec<(&'static str, Vec<String>)> {
    let s = |n: &str| ws.s(n);
    let o = |n: &str| ws.path("out").join(n).into_os_string().into_string().unwrap();
    let cmd = |parts: Vec<String>| {
        let mut v = vec!["--seed".to_string(), seed.to_string()];
        v.extend(parts);
        v
    };
    macro_rules! args {
        ($($x:expr),* $(,)?) => { cmd(vec![$($x.to_string()),*]) };
    }
    vec![
        (
            "gen-synthetic",
            args![
                "gen-synthetic",
                "--classes",
                "5",
                "--dim",
                "8",
                "--per-class",
                "4",
                "--out",
                o("gen.ovb"),
                "--vocab-out",
                o("gen_vocab.jsonl")
            ],
        ),
        (
            "resolve-exemplars",
            args![
                "resolve-exemplars",
                "--vocab",
                s("resolve_vocab.jsonl"),
                "--pools",
                s("pools.json"),
                "--out",
                o("catalog.json")
            ],
        ),
        (
            "prompts",
            args!["prompts", "--vocab", s("vocab.jsonl"), "--out", o("prompts.jsonl")],
        ),
        (
            "plan-tta",
            args![
                "plan-tta",
                "--catalog",
                o("catalog.json"),
                "--recipe",
                "harsh",
                "--out",
                o("plan.jsonl")
            ],
        ),
        (
            "build-text",
            args![
                "build-text",
                "--descriptions",
                s("descriptions.jsonl"),
                "--out",
                o("text.ovc"),
                "--json",
                o("text.json")
            ],
        ),
        (
            "train-aggregator",
            args![
                "train-aggregator",
                "--config",
                s("train.json"),
                "--bank",
                s("bank.ovb"),
                "--out",
                o("model.bin"),
                "--report",
                o("report.json"),
                "--csv",
                o("report.csv")
            ],
        ),
        (
            "build-visual",
            args![
                "build-visual",
                "--bank",
                s("bank.ovb"),
                "--model",
                o("model.bin"),
                "--k",
                "3",
                "--out",
                o("vision.ovc"),
                "--json",
                o("vision.json")
            ],
        ),
        (
            "build-visual mean",
            args![
                "build-visual",
                "--bank",
                s("bank.ovb"),
                "--modality",
                "vision-mean",
                "--k",
                "3",
                "--out",
                o("mean.ovc")
            ],
        ),
        (
            "fuse",
            args![
                "fuse",
                "--text",
                o("text.ovc"),
                "--vision",
                o("vision.ovc"),
                "--out",
                o("fused.ovc"),
                "--json",
                o("fused.json")
            ],
        ),
        (
            "eval retrieval",
            args![
                "eval",
                "--bank",
                o("vision.ovc"),
                "--queries",
                s("queries.ovb"),
                "--model",
                o("model.bin"),
                "--out",
                o("eval_retrieval.json")
            ],
        ),
        (
            "eval boxes",
            args![
                "eval",
                "--bank",
                o("mean.ovc"),
                "--queries",
                s("boxes.ovb"),
                "--gt",
                s("boxes_gt.jsonl"),
                "--out",
                o("eval_boxes.json")
            ],
        ),
        (
            "eval detections",
            args![
                "eval",
                "--detections",
                s("dets.jsonl"),
                "--gt",
                s("dets_gt.jsonl"),
                "--vocab",
                s("dets_vocab.jsonl"),
                "--out",
                o("eval_dets.json")
            ],
        ),
        (
            "sweep-k",
            args![
                "sweep-k",
                "--bank",
                s("bank.ovb"),
                "--config",
                s("train.json"),
                "--ks",
                "1,2,3",
                "--out",
                o("sweep.csv")
            ],
        ),
    ]
}

/// Runs every subcommand into a fresh `out/` and returns the outputs.
pub fn run_all(ws: &Workspace, seed: &str) -> (Vec<(&'static str, Output)>, Files) {
    let out_dir = ws.path("out");
    let _ = std::fs::remove_dir_all(&out_dir);
    std::fs::create_dir(&out_dir).unwrap();
    let mut outputs = Vec::new();
    for (name, args) in all_commands(ws, seed) {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        outputs.push((name, run(&refs)));
    }
    (outputs, snapshot(&out_dir))
}
