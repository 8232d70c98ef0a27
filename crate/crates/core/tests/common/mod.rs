//! Helpers and independent oracles shared by the integration tests.

#![allow(dead_code)]

use std::collections::BTreeMap;

use ovclf::aggregator::{init_model, AggregatorConfig};
use ovclf::eval::{iou, Detection, GroundTruth};
use ovclf::numerics::{evaluate, evaluate_with_gradients, ParamSet, Tape, Tensor, Var};
use ovclf::store::{Bucket, EmbeddingBank, Vocabulary};
use ovclf::synthetic::{gen_cluster_bank, ClusterSpec};
use ovclf::trainer::{record_batch_loss, NegativeQueue, SetSizes, TrainBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn unit_f64(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, n);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-3 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

pub fn unit_f32(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    // normalize in f32 so the stored vector has unit norm at f32 precision
    let v: Vec<f32> = unit_f64(rng, n).into_iter().map(|x| x as f32).collect();
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    v.into_iter().map(|x| (x as f64 / norm) as f32).collect()
}

/// Compensated (Kahan) sum.
pub fn kahan_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Mean-then-normalize reference with compensated sums.
pub fn kahan_mean_normalized(vectors: &[Vec<f32>]) -> Vec<f64> {
    let d = vectors[0].len();
    let mean: Vec<f64> = (0..d)
        .map(|j| kahan_sum(vectors.iter().map(|v| v[j] as f64)) / vectors.len() as f64)
        .collect();
    let norm = kahan_sum(mean.iter().map(|x| x * x)).sqrt();
    mean.into_iter().map(|x| x / norm).collect()
}

/// InfoNCE written straight from its definition, no max subtraction:
/// `−ln(num / den) = ln(1 + Σₙ num_n / num)`, the ratio form so that a loss
/// near zero is not lost to rounding in `den`.
pub fn info_nce_direct(anchor: &[f64], positive: &[f64], negatives: &[Vec<f64>], tau: f64) -> f64 {
    let sim = |v: &[f64]| anchor.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    let num = (sim(positive) / tau).exp();
    negatives
        .iter()
        .map(|n| (sim(n) / tau).exp() / num)
        .sum::<f64>()
        .ln_1p()
}

// ---------------------------------------------------------------------------
// Aggregator gradient check

pub struct GradCheck {
    pub max_relative_error: f64,
    pub params: usize,
    pub loss: f64,
    pub masked_queue_slots: usize,
}

/// Analytic vs central-difference gradients of the batch InfoNCE loss for a
/// dim-8, 2-block aggregator, batch 4, full queue of 8 (some slots share a
/// batch class and are masked), computed in f64.
pub fn aggregator_gradient_check(seed: u64, temperature: f64, floor: f64) -> GradCheck {
    let (config, params, batch, queue, masked) = grad_check_setup(seed);
    let graph = |tape: &mut Tape<'_, f64>, vars: &[Var]| {
        record_batch_loss(tape, &config, vars, &batch, &queue, temperature).map(|(l, _)| l)
    };
    let (loss, analytic) = evaluate_with_gradients(&params, graph).unwrap();
    let numeric = five_point_gradient(&params, &graph, 1e-5);
    GradCheck {
        max_relative_error: relative_error(&analytic, &numeric, floor),
        params: params.numel(),
        loss,
        masked_queue_slots: masked,
    }
}

pub fn grad_check_setup(seed: u64) -> (AggregatorConfig, ParamSet<f64>, TrainBatch, NegativeQueue, usize) {
    let config = AggregatorConfig {
        blocks: 2,
        dim: 8,
        mlp_dim: 16,
        heads: 2,
        seed,
    };
    let model = init_model(config).unwrap();
    let params: ParamSet<f64> = model.params().cast();

    let spec = ClusterSpec {
        classes: 6,
        dim: 8,
        per_class: 8,
        sigma: 0.3,
        seed,
        ..Default::default()
    };
    let bank = gen_cluster_bank(&spec).unwrap();
    let classes: Vec<String> = (0..4).map(|i| spec.class_id(i)).collect();
    let mut r = rng(seed ^ 0x5eed);
    let batch = TrainBatch::sample(&bank, &classes, 3, SetSizes::Independent, &mut r).unwrap();

    let mut queue = NegativeQueue::new(8, 8).unwrap();
    let entries: Vec<(String, Vec<f32>)> = (0..8).map(|i| (spec.class_id(i % 6), unit_f32(&mut r, 8))).collect();
    queue.push(&entries).unwrap();
    let masked = entries.iter().filter(|(c, _)| classes.contains(c)).count();
    (config, params, batch, queue, masked)
}

/// Fourth-order central differences
/// `(8(f(θ+h) − f(θ−h)) − (f(θ+2h) − f(θ−2h))) / 12h`. Truncation error is
/// O(h⁴), which leaves room for a step large enough to keep cancellation
/// error small.
pub fn five_point_gradient<F>(params: &ParamSet<f64>, graph: &F, h: f64) -> Vec<Tensor<f64>>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> ovclf::Result<Var>,
{
    let mut work = params.clone();
    let mut out = Vec::new();
    for id in 0..params.len() {
        let mut g = Tensor::zeros(params.value(id).shape());
        for j in 0..params.value(id).len() {
            let orig = params.value(id).data()[j];
            let mut at = |x: f64| {
                work.value_mut(id).data_mut()[j] = x;
                evaluate(&work, graph).unwrap()
            };
            let (p1, m1, p2, m2) = (at(orig + h), at(orig - h), at(orig + 2.0 * h), at(orig - 2.0 * h));
            work.value_mut(id).data_mut()[j] = orig;
            g.data_mut()[j] = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
        }
        out.push(g);
    }
    out
}

pub fn relative_error(a: &[Tensor<f64>], b: &[Tensor<f64>], floor: f64) -> f64 {
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.shape(), y.shape());
        for (&p, &q) in x.data().iter().zip(y.data()) {
            worst = worst.max((p - q).abs() / p.abs().max(q.abs()).max(floor));
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Brute-force AP oracle

/// 101-point interpolated AP from the definition: at each recall level take
/// the best precision among all ranks whose recall reaches it.
pub fn brute_ap(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut pr = Vec::new();
    for i in 0..hits.len() {
        let tp = hits[..=i].iter().filter(|&&h| h).count();
        pr.push((tp as f64 / (i + 1) as f64, tp as f64 / num_gt as f64));
    }
    let mut sum = 0.0;
    for r in 0..101 {
        let level = r as f64 / 100.0;
        let best = pr
            .iter()
            .filter(|(_, rec)| *rec >= level)
            .map(|(p, _)| *p)
            .fold(0.0, f64::max);
        sum += best;
    }
    sum / 101.0
}

/// Matches detections in descending score order (stable on ties); each takes
/// the free same-image box with the largest IoU ≥ `t`, first box on ties.
pub fn brute_hits(dets: &[&Detection], gts: &[&GroundTruth], t: f64) -> Vec<bool> {
    let mut order: Vec<(usize, &Detection)> = dets.iter().copied().enumerate().collect();
    // insertion sort keeps equal scores in input order
    for i in 1..order.len() {
        let mut j = i;
        while j > 0 && order[j - 1].1.score < order[j].1.score {
            order.swap(j - 1, j);
            j -= 1;
        }
    }
    let mut free = vec![true; gts.len()];
    let mut hits = Vec::new();
    for (_, d) in order {
        let mut pick = None;
        let mut best = -1.0;
        for (gi, g) in gts.iter().enumerate() {
            if free[gi] && g.image == d.image {
                let o = iou(&d.bbox, &g.bbox);
                if o >= t && o > best {
                    best = o;
                    pick = Some(gi);
                }
            }
        }
        if let Some(gi) = pick {
            free[gi] = false;
        }
        hits.push(pick.is_some());
    }
    hits
}

pub struct BruteResult {
    pub per_class: BTreeMap<String, f64>,
    pub map: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub apr: Option<f64>,
    pub apc: Option<f64>,
    pub apf: Option<f64>,
}

fn seq_mean(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        let mut s = 0.0;
        for x in v {
            s += x;
        }
        Some(s / v.len() as f64)
    }
}

/// Full AP evaluation at the ten thresholds 0.50:0.05:0.95; classes without
/// ground truth are left out.
pub fn brute_eval(dets: &[Detection], gts: &[GroundTruth], vocab: &Vocabulary) -> BruteResult {
    let thresholds: Vec<f64> = (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect();
    let mut per_class = BTreeMap::new();
    let mut at50 = Vec::new();
    let mut at75 = Vec::new();
    let mut buckets: BTreeMap<Bucket, Vec<f64>> = BTreeMap::new();
    let mut all = Vec::new();
    for c in vocab.entries() {
        let cg: Vec<&GroundTruth> = gts.iter().filter(|g| g.class == c.id).collect();
        if cg.is_empty() {
            continue;
        }
        let cd: Vec<&Detection> = dets.iter().filter(|d| d.class == c.id).collect();
        let per_t: Vec<f64> = thresholds
            .iter()
            .map(|&t| brute_ap(&brute_hits(&cd, &cg, t), cg.len()))
            .collect();
        let ap = seq_mean(&per_t).unwrap();
        at50.push(per_t[0]);
        at75.push(per_t[5]);
        buckets.entry(c.bucket).or_default().push(ap);
        all.push(ap);
        per_class.insert(c.id.clone(), ap);
    }
    let b = |k: Bucket| buckets.get(&k).and_then(|v| seq_mean(v));
    BruteResult {
        per_class,
        map: seq_mean(&all),
        ap50: seq_mean(&at50),
        ap75: seq_mean(&at75),
        apr: b(Bucket::Rare),
        apc: b(Bucket::Common),
        apf: b(Bucket::Frequent),
    }
}

/// Random small detection problem over `classes` classes and `images` images.
pub fn random_detection_problem(
    r: &mut impl Rng,
    classes: usize,
    images: usize,
) -> (Vec<Detection>, Vec<GroundTruth>, Vocabulary) {
    let buckets = [Bucket::Rare, Bucket::Common, Bucket::Frequent];
    let ids: Vec<String> = (0..classes).map(|i| format!("c{i}")).collect();
    let vocab = Vocabulary::new(
        ids.iter()
            .enumerate()
            .map(|(i, id)| ovclf::store::ClassEntry::new(id.clone(), id.clone(), buckets[i % 3]))
            .collect(),
    )
    .unwrap();
    let rand_box = |r: &mut dyn rand::RngCore| {
        [
            r.random_range(0..8) as f64,
            r.random_range(0..8) as f64,
            r.random_range(1..6) as f64,
            r.random_range(1..6) as f64,
        ]
    };
    let mut gts = Vec::new();
    for i in 0..images {
        for _ in 0..r.random_range(1..4) {
            gts.push(GroundTruth {
                image: format!("img{i}"),
                class: ids[r.random_range(0..classes)].clone(),
                bbox: rand_box(r),
            });
        }
    }
    let mut dets = Vec::new();
    for g in &gts {
        // a jittered copy of most boxes, plus clutter
        if r.random_bool(0.8) {
            let mut b = g.bbox;
            b[0] += r.random_range(-1..=1) as f64 * 0.5;
            b[2] += r.random_range(0..=1) as f64;
            dets.push(Detection {
                image: g.image.clone(),
                class: g.class.clone(),
                bbox: b,
                score: (r.random_range(0..20) as f64) / 20.0,
            });
        }
    }
    for _ in 0..r.random_range(0..6) {
        dets.push(Detection {
            image: format!("img{}", r.random_range(0..images)),
            class: ids[r.random_range(0..classes)].clone(),
            bbox: rand_box(r),
            score: (r.random_range(0..20) as f64) / 20.0,
        });
    }
    (dets, gts, vocab)
}

pub fn cluster_bank(classes: usize, dim: usize, per_class: usize, sigma: f64, seed: u64) -> EmbeddingBank {
    gen_cluster_bank(&ClusterSpec {
        classes,
        dim,
        per_class,
        sigma,
        seed,
        ..Default::default()
    })
    .unwrap()
}

// ---------------------------------------------------------------------------
// Exemplar resolver fixture

use ovclf::store::{Candidate, CandidatePool, ClassEntry, PoolKind, ResolveConfig, Tier};

/// Per class: primary synset items, boxes above the area threshold, boxes at
/// or below it, secondary synset items, alias items, how many secondary
/// items reuse primary ids; then the expected tier and count.
/// `(primary, big boxes, small boxes, secondary, alias, duplicates, tier, count)`.
pub type ResolverRow = (usize, usize, usize, usize, usize, usize, Tier, usize);

pub const RESOLVER_ROWS: [ResolverRow; 30] = [
    (45, 0, 0, 0, 0, 0, Tier::Full, 45),
    (40, 0, 0, 0, 0, 0, Tier::Full, 40),
    (39, 0, 0, 0, 0, 0, Tier::Reduced, 39),
    (39, 1, 0, 0, 0, 0, Tier::Full, 40),
    (39, 0, 5, 0, 0, 0, Tier::Reduced, 39),
    (10, 0, 0, 0, 0, 0, Tier::Reduced, 10),
    (9, 0, 0, 0, 0, 0, Tier::Shortfall, 9),
    (9, 0, 3, 0, 0, 0, Tier::Shortfall, 9),
    (9, 1, 0, 0, 0, 0, Tier::Reduced, 10),
    (0, 0, 0, 0, 0, 0, Tier::Shortfall, 0),
    (0, 12, 0, 0, 0, 0, Tier::Reduced, 12),
    (0, 0, 0, 40, 0, 0, Tier::Full, 40),
    (20, 10, 0, 15, 0, 0, Tier::Full, 45),
    (30, 15, 0, 20, 0, 0, Tier::Full, 45),
    (5, 0, 0, 5, 0, 3, Tier::Shortfall, 7),
    (8, 0, 0, 4, 0, 2, Tier::Reduced, 10),
    (0, 0, 0, 0, 12, 0, Tier::Reduced, 12),
    (0, 0, 0, 0, 50, 0, Tier::Full, 50),
    (35, 0, 0, 0, 5, 0, Tier::Full, 40),
    (3, 3, 3, 3, 3, 0, Tier::Reduced, 12),
    (2, 2, 2, 2, 1, 0, Tier::Shortfall, 7),
    (0, 0, 40, 0, 0, 0, Tier::Shortfall, 0),
    (0, 39, 1, 0, 0, 0, Tier::Reduced, 39),
    (100, 0, 0, 0, 0, 0, Tier::Full, 100),
    (0, 0, 0, 9, 0, 0, Tier::Shortfall, 9),
    (0, 0, 0, 10, 0, 0, Tier::Reduced, 10),
    (1, 0, 0, 0, 0, 0, Tier::Shortfall, 1),
    (0, 5, 0, 0, 4, 0, Tier::Shortfall, 9),
    (0, 5, 0, 0, 5, 0, Tier::Reduced, 10),
    (25, 14, 0, 0, 1, 0, Tier::Full, 40),
];

/// Duplicate ids the resolver drops on the fixture (rows 15 and 16).
pub const RESOLVER_DUPLICATES: usize = 5;

pub struct ResolverFixture {
    pub vocab: Vocabulary,
    pub pools: Vec<CandidatePool>,
    pub config: ResolveConfig,
}

pub fn resolver_class(i: usize) -> String {
    format!("class{i:02}")
}

pub fn resolver_fixture() -> ResolverFixture {
    let mut entries = Vec::new();
    let mut in21k = Vec::new();
    let mut boxes = Vec::new();
    let mut vg = Vec::new();
    let mut config = ResolveConfig::default();
    for (i, &(prim, big, small, sec, alias, dup, _, _)) in RESOLVER_ROWS.iter().enumerate() {
        let id = resolver_class(i);
        let synset = format!("cls{i:02}.n.01");
        entries.push(ClassEntry::new(id.clone(), id.clone(), Bucket::Common).with_synset(synset.clone()));
        for j in 0..prim {
            in21k.push(Candidate::synset(format!("{id}/in/{j:03}"), synset.clone()));
        }
        // just above, and well above, the 32² threshold
        for j in 0..big {
            let area = if j % 2 == 0 { 1025.0 } else { 5000.0 };
            boxes.push(Candidate::boxed(format!("{id}/box/{j:03}"), id.clone(), area));
        }
        // exactly at, and below, the threshold
        for j in 0..small {
            let area = if j % 2 == 0 { 1024.0 } else { 100.0 };
            boxes.push(Candidate::boxed(format!("{id}/small/{j:03}"), id.clone(), area));
        }
        for j in 0..sec {
            let cid = if j < dup {
                format!("{id}/in/{j:03}")
            } else {
                format!("{id}/vg/{j:03}")
            };
            vg.push(Candidate::synset(cid, synset.clone()));
        }
        if alias > 0 {
            let alt = format!("alt{i:02}.n.01");
            for j in 0..alias {
                let c = Candidate::synset(format!("{id}/alias/{j:03}"), alt.clone());
                if j % 2 == 0 {
                    in21k.push(c);
                } else {
                    vg.push(c);
                }
            }
            config.aliases.insert(id.clone(), alt);
        }
    }
    ResolverFixture {
        vocab: Vocabulary::new(entries).unwrap(),
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
        config,
    }
}

// ---------------------------------------------------------------------------
// Aggregator permutation invariance

/// Adds random candidates: new ids in any pool, boxes on both sides of the
/// area threshold, and ids that already exist elsewhere.
pub fn augment_resolver_fixture(f: &mut ResolverFixture, r: &mut impl Rng) {
    for _ in 0..r.random_range(1..40) {
        let i = r.random_range(0..30);
        let id = resolver_class(i);
        let fresh = format!("{id}/extra/{}", r.random::<u32>());
        match r.random_range(0..5) {
            0 => f.pools[0]
                .items
                .push(Candidate::synset(fresh, format!("cls{i:02}.n.01"))),
            1 => {
                let area = [100.0, 1024.0, 1025.0, 9000.0][r.random_range(0..4)];
                f.pools[1].items.push(Candidate::boxed(fresh, id, area));
            }
            2 => f.pools[2]
                .items
                .push(Candidate::synset(fresh, format!("cls{i:02}.n.01"))),
            3 => {
                if let Some(alt) = f.config.aliases.get(&id).cloned() {
                    f.pools[2].items.push(Candidate::synset(fresh, alt));
                }
            }
            _ => {
                // an id that already exists in some pool
                let pool = r.random_range(0..3);
                if !f.pools[pool].items.is_empty() {
                    let k = r.random_range(0..f.pools[pool].items.len());
                    let mut c = f.pools[pool].items[k].clone();
                    if f.pools[pool].kind == PoolKind::DetectionBox {
                        c.area = Some(2000.0);
                    }
                    f.pools[pool].items.push(c);
                }
            }
        }
    }
}

/// A random small model and a random set of `k` exemplars; returns the
/// largest component deviation of the f32 output over every reordering
/// tried (all permutations for k ≤ 3, twenty shuffles otherwise).
pub fn permutation_deviation(seed: u64, k: usize) -> f64 {
    use rand::seq::SliceRandom;
    let mut r = rng(seed);
    let (dim, heads) = [(8, 2), (16, 4), (32, 4), (24, 3)][r.random_range(0..4)];
    let config = AggregatorConfig {
        blocks: r.random_range(1..=3),
        dim,
        mlp_dim: 2 * dim,
        heads,
        seed: r.random(),
    };
    let model = init_model(config).unwrap();
    let set: Vec<Vec<f32>> = (0..k).map(|_| unit_f32(&mut r, dim)).collect();
    let base = model.aggregate(&set).unwrap();
    let mut orders: Vec<Vec<usize>> = Vec::new();
    if k <= 3 {
        permutations(&mut (0..k).collect(), 0, &mut orders);
    } else {
        for _ in 0..20 {
            let mut o: Vec<usize> = (0..k).collect();
            o.shuffle(&mut r);
            orders.push(o);
        }
    }
    let mut worst = 0.0f64;
    for o in orders {
        let permuted: Vec<&Vec<f32>> = o.iter().map(|&i| &set[i]).collect();
        let out = model.aggregate(&permuted).unwrap();
        for (a, b) in base.iter().zip(&out) {
            worst = worst.max((a - b).abs() as f64);
        }
    }
    worst
}

fn permutations(v: &mut Vec<usize>, start: usize, out: &mut Vec<Vec<usize>>) {
    if start == v.len() {
        out.push(v.clone());
        return;
    }
    for i in start..v.len() {
        v.swap(start, i);
        permutations(v, start + 1, out);
        v.swap(start, i);
    }
}
