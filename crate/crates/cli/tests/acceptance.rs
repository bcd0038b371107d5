//! Acceptance harness: prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Criteria 5 and 6 train twelve full-width models (about two and a half
//! hours on one CPU core) and only run when `ASR_ACCEPTANCE_FULL=1`;
//! otherwise they print SKIP. Select criteria with
//! `ASR_ACCEPTANCE_ONLY=1,3,7`.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use asr_core::canvas::{write_glyphs, write_kink_distance, Canvas};
use asr_core::constraints::{
    count_marginal_graph, count_match_graph, f1_pairwise_overlap, f_containment, geometry_graph, weighted_geometry_with_grad,
    ConstraintSet, OverlapWeights, SceneConfig,
};
use asr_core::data::{histogram, synth_dataset, Composite, DatasetExample, DatasetSpec, GlyphBank, GlyphSource};
use asr_core::generative::{log_likelihood_graph, ModelConfig};
use asr_core::latent::BoundingBox;
use asr_core::metrics::{count_accuracy, evaluate, iou, miou, squared_error, EvalConfig, EvalReport};
use asr_core::model::{induced_counts_graph, AsrModel};
use asr_core::tape::{Graph, Tensor, Var};
use asr_core::training::{toy, TrainConfig, Trainer};

// Pinned tolerances and budgets.
const C1_SETS: usize = 10_000;
const C1_BOUNDARY: f64 = 1e-9;
const C1_BUDGET: Duration = Duration::from_secs(60);
const C2_POINTS: usize = 100;
const C2_TOL: f64 = 1e-3;
const C2_TOL_GEOMETRY: f64 = 1e-4;
const C2_KINK_MARGIN: f64 = 1e-3;
const C2_STEP: f64 = 1e-6;
const C2_BUDGET: Duration = Duration::from_secs(300);
const C3_SAMPLES: usize = 100_000;
const C3_TOL: f64 = 0.05;
const C3_BUDGET: Duration = Duration::from_secs(120);
const C4_IMAGES: usize = 5_000;
const C4_BUDGET: Duration = Duration::from_secs(60);
const C5_ACC_MIN: f64 = 0.90;
const C5_GAP_MIN: f64 = 0.20;
const C5_GAP_SEEDS: usize = 2;
const C6_MIOU_MIN: f64 = 0.50;
const C6_GAP_MIN: f64 = 0.15;
const SCALED_SEEDS: [u64; 3] = [0, 1, 2];
const SCALED_TRAIN: usize = 5_000;
const SCALED_TEST: usize = 500;
const SCALED_EPOCHS: usize = 50;
const C7_IOU_TOL: f64 = 1e-9;
const C7_BUDGET: Duration = Duration::from_secs(10);

enum Status {
    Pass,
    Fail,
    Skip,
}

struct Outcome {
    status: Status,
    detail: String,
}

impl Outcome {
    fn check(pass: bool, detail: String) -> Self {
        Outcome { status: if pass { Status::Pass } else { Status::Fail }, detail }
    }
}

fn timed(budget: Option<Duration>, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut out = f();
    let t = start.elapsed();
    out.detail = format!("{} [{:.1}s]", out.detail, t.as_secs_f64());
    if let (Some(b), Status::Pass) = (budget, &out.status) {
        if t > b {
            out.status = Status::Fail;
            out.detail = format!("{} exceeds the {}s budget", out.detail, b.as_secs());
        }
    }
    out
}

type Criterion = (u32, &'static str, Box<dyn Fn() -> Outcome>);

fn main() {
    let only: Option<BTreeSet<u32>> =
        std::env::var("ASR_ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let full = std::env::var("ASR_ACCEPTANCE_FULL").is_ok_and(|v| v == "1");
    let criteria: [Criterion; 8] = [
        (1, "overlap functional agrees with raster oracle", Box::new(|| timed(Some(C1_BUDGET), criterion_1))),
        (2, "gradients match central finite differences", Box::new(|| timed(Some(C2_BUDGET), criterion_2))),
        (3, "score-function estimator matches enumeration", Box::new(|| timed(Some(C3_BUDGET), criterion_3))),
        (4, "non-overlap datasets are feasible and balanced", Box::new(|| timed(Some(C4_BUDGET), criterion_4))),
        (5, "count accuracy: constrained beats unconstrained", Box::new(move || scaled(full, criterion_5))),
        (6, "layout mIoU: constrained beats unconstrained", Box::new(move || scaled(full, criterion_6))),
        (7, "metric examples hold exactly", Box::new(|| timed(Some(C7_BUDGET), criterion_7))),
        (8, "re-runs give byte-identical outputs", Box::new(|| timed(None, criterion_8))),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria.iter() {
        if only.as_ref().is_some_and(|o| !o.contains(id)) {
            continue;
        }
        let out = run();
        let tag = match out.status {
            Status::Pass => "PASS",
            Status::Fail => {
                failed += 1;
                "FAIL"
            }
            Status::Skip => "SKIP",
        };
        println!("criterion {id} {tag} {name}: {}", out.detail);
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn scaled(full: bool, f: fn() -> Outcome) -> Outcome {
    if full {
        timed(None, f)
    } else {
        Outcome { status: Status::Skip, detail: "set ASR_ACCEPTANCE_FULL=1 to train the scaled runs".into() }
    }
}

// ---------------------------------------------------------------- criterion 1

/// Coordinates on a 1/8-pixel lattice, painted on a grid of the same pitch:
/// the raster is exact, so any disagreement is a real mismatch.
fn criterion_1() -> Outcome {
    const PITCH: f64 = 0.125;
    const LO: f64 = -10.0;
    const CELLS: usize = 256;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let lattice = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| (rng.gen_range(lo..hi) / PITCH).round() * PITCH;
    let (mut mismatches, mut boundary, mut positives) = (0, 0, 0);
    let paint = |b: &BoundingBox| {
        let mut m = vec![false; CELLS * CELLS];
        let idx = |v: f64| ((v - LO) / PITCH).round() as usize;
        for y in idx(b.y_min())..idx(b.y_max()) {
            for x in idx(b.x_min())..idx(b.x_max()) {
                m[y * CELLS + x] = true;
            }
        }
        m
    };
    for _ in 0..C1_SETS {
        let n = rng.gen_range(0..=5);
        let boxes: Vec<BoundingBox> = (0..n)
            .map(|_| {
                let side = lattice(&mut rng, 0.25, 8.0) * 2.0;
                BoundingBox::new(lattice(&mut rng, 0.0, 12.0), lattice(&mut rng, 0.0, 12.0), side.max(0.25))
            })
            .collect();
        let masks: Vec<Vec<bool>> = boxes.iter().map(paint).collect();
        let mut oracle = false;
        let mut touching = false;
        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = (&boxes[i], &boxes[j]);
                let ox = a.x_max().min(b.x_max()) - a.x_min().max(b.x_min());
                let oy = a.y_max().min(b.y_max()) - a.y_min().max(b.y_min());
                if (ox.abs() <= C1_BOUNDARY && oy >= 0.0) || (oy.abs() <= C1_BOUNDARY && ox >= 0.0) {
                    touching = true;
                }
                oracle |= masks[i].iter().zip(&masks[j]).any(|(p, q)| *p && *q);
            }
        }
        let functional = f1_pairwise_overlap(&boxes) > 0.0;
        positives += oracle as usize;
        boundary += touching as usize;
        mismatches += (functional != oracle) as usize;
    }
    Outcome::check(
        mismatches == 0,
        format!("{mismatches} mismatches over {C1_SETS} sets ({positives} overlapping, {boundary} with edges touching)"),
    )
}

// ---------------------------------------------------------------- criterion 2

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn central_diff(x: &[f64], f: &dyn Fn(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|k| {
            let (mut p, mut m) = (x.to_vec(), x.to_vec());
            p[k] += C2_STEP;
            m[k] -= C2_STEP;
            (f(&p) - f(&m)) / (2.0 * C2_STEP)
        })
        .collect()
}

/// Smallest distance from any hinge, `max` or `|·|` switch in the seven
/// functionals.
fn geometry_kink_distance(boxes: &[BoundingBox], cfg: &SceneConfig) -> f64 {
    let mut d = f64::INFINITY;
    for (i, a) in boxes.iter().enumerate() {
        let h = a.side / 2.0;
        for v in [h - a.cx, a.cx + h - cfg.canvas_size, h - a.cy, a.cy + h - cfg.canvas_size, cfg.c_min - a.side, a.side - cfg.c_max] {
            d = d.min(v.abs());
        }
        for b in &boxes[i + 1..] {
            let (dx, dy) = ((a.cx - b.cx).abs(), (a.cy - b.cy).abs());
            let ds = (a.side - b.side).abs();
            for v in [dx, dy, dx - dy, (a.side + b.side) / 2.0 - dx.max(dy), ds, ds - cfg.epsilon] {
                d = d.min(v.abs());
            }
        }
    }
    d
}

fn flat(boxes: &[BoundingBox]) -> Vec<f64> {
    boxes.iter().flat_map(|b| [b.cx, b.cy, b.side]).collect()
}

fn unflat(x: &[f64]) -> Vec<BoundingBox> {
    x.chunks(3).map(|c| BoundingBox::new(c[0], c[1], c[2])).collect()
}

/// Worst relative error of the seven functionals, each alone, through both
/// the plain evaluator and the graph node used in training.
fn gradient_geometry(rng: &mut ChaCha8Rng) -> f64 {
    let cfg = SceneConfig::default();
    let mut worst: f64 = 0.0;
    for f in 0..7 {
        let mut w = [0.0; 7];
        w[f] = rng.gen_range(0.5..3.0);
        let weights = OverlapWeights(w);
        let mut done = 0;
        while done < C2_POINTS {
            let n = rng.gen_range(2..=4);
            let boxes: Vec<BoundingBox> =
                (0..n).map(|_| BoundingBox::new(rng.gen_range(-5.0..55.0), rng.gen_range(-5.0..55.0), rng.gen_range(5.0..35.0))).collect();
            if geometry_kink_distance(&boxes, &cfg) < C2_KINK_MARGIN {
                continue;
            }
            done += 1;
            let x = flat(&boxes);
            let value = |x: &[f64]| weighted_geometry_with_grad(&unflat(x), &cfg, &weights).0;
            let fd = central_diff(&x, &value);
            let plain: Vec<f64> = weighted_geometry_with_grad(&boxes, &cfg, &weights).1.into_iter().flatten().collect();

            let mut g = Graph::new();
            let vars: Vec<Var> = boxes.iter().map(|b| g.param(Tensor::from_vec(1, 3, vec![b.cx, b.cy, b.side]))).collect();
            let present = vec![vec![true]; n];
            let out = geometry_graph(&mut g, &vars, &present, &cfg, weights);
            let grads = g.backward(out);
            let graph: Vec<f64> = vars.iter().flat_map(|v| grads.get(*v).unwrap().data.clone()).collect();
            worst = worst.max(rel_err(&plain, &fd)).max(rel_err(&graph, &fd));
        }
    }
    worst
}

/// Likelihood of a fixed image under one decoded glyph written into a box,
/// differentiated with respect to the appearance code and the box.
fn gradient_likelihood(rng: &mut ChaCha8Rng) -> f64 {
    let cfg = ModelConfig {
        canvas_size: 20,
        glyph_size: 8,
        app_dim: 4,
        rnn_hidden: 8,
        encoder_hidden: 8,
        mlp_hidden: [16, 16],
        ..ModelConfig::default()
    };
    let model = AsrModel::new(cfg.clone(), 5).unwrap();
    let target: Vec<f64> = (0..cfg.pixels()).map(|_| rng.gen::<f64>()).collect();
    let eval = |x: &[f64], grad: bool| {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, |_| false);
        let img = g.constant(Tensor::from_vec(1, cfg.pixels(), target.clone()));
        let app = Tensor::from_vec(1, 4, x[..4].to_vec());
        let bx = Tensor::from_vec(1, 3, x[4..].to_vec());
        let (app, bx) = if grad { (g.param(app), g.param(bx)) } else { (g.constant(app), g.constant(bx)) };
        let glyph = model.gen.decode(&mut g, &p, app);
        let mean = write_glyphs(&mut g, glyph, bx, cfg.glyph_size, cfg.canvas_size);
        let ll = log_likelihood_graph(&mut g, &cfg, img, mean);
        let ll = g.sum(ll);
        let v = g.value(ll).item();
        let gr = grad.then(|| {
            let grads = g.backward(ll);
            let mut out = grads.get(app).unwrap().data.clone();
            out.extend_from_slice(&grads.get(bx).unwrap().data);
            out
        });
        (v, gr)
    };
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < C2_POINTS {
        let side = rng.gen_range(4.0..16.0);
        let b = BoundingBox::new(rng.gen_range(2.0..18.0), rng.gen_range(2.0..18.0), side);
        if write_kink_distance(&b, cfg.glyph_size, cfg.canvas_size) < C2_KINK_MARGIN {
            continue;
        }
        done += 1;
        let mut x: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        x.extend([b.cx, b.cy, b.side]);
        let fd = central_diff(&x, &|x| eval(x, false).0);
        worst = worst.max(rel_err(&eval(&x, true).1.unwrap(), &fd));
    }
    worst
}

/// Both count penalties through the induced count distribution, with
/// respect to the presence logits of a small batch.
fn gradient_counts(rng: &mut ChaCha8Rng) -> f64 {
    const B: usize = 4;
    const K: usize = 3;
    let allowed = [1usize, 3];
    let eval = |x: &[f64], grad: bool| {
        let mut g = Graph::new();
        let logits: Vec<Var> = (0..K)
            .map(|t| {
                let t = Tensor::from_vec(B, 1, (0..B).map(|b| x[b * K + t]).collect());
                if grad {
                    g.param(t)
                } else {
                    g.constant(t)
                }
            })
            .collect();
        let q = induced_counts_graph(&mut g, &logits);
        let m = count_match_graph(&mut g, q, &allowed);
        let m = g.sum(m);
        let u = count_marginal_graph(&mut g, q, &allowed);
        let m = g.scale(m, 10.0);
        let u = g.scale(u, 100.0);
        let total = g.add(m, u);
        let v = g.value(total).item();
        let qv = g.value(q).clone();
        let gr = grad.then(|| {
            let grads = g.backward(total);
            let mut out = vec![0.0; B * K];
            for (t, l) in logits.iter().enumerate() {
                for b in 0..B {
                    out[b * K + t] = grads.get(*l).unwrap().data[b];
                }
            }
            out
        });
        (v, gr, qv)
    };
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < C2_POINTS {
        let x: Vec<f64> = (0..B * K).map(|_| rng.gen_range(-3.0..3.0)).collect();
        // keep away from ties between allowed counts, where the best count switches
        let q = eval(&x, false).2;
        if (0..B).any(|b| (q.at(b, 1) - q.at(b, 3)).abs() < C2_KINK_MARGIN) {
            continue;
        }
        done += 1;
        let fd = central_diff(&x, &|x| eval(x, false).0);
        worst = worst.max(rel_err(&eval(&x, true).1.unwrap(), &fd));
    }
    worst
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let geo = gradient_geometry(&mut rng);
    let lik = gradient_likelihood(&mut rng);
    let cnt = gradient_counts(&mut rng);
    Outcome::check(
        geo < C2_TOL_GEOMETRY && lik < C2_TOL && cnt < C2_TOL,
        format!("worst relative error: geometry {geo:.2e} (< {C2_TOL_GEOMETRY:e}), likelihood {lik:.2e}, counts {cnt:.2e} (< {C2_TOL:e}); {C2_POINTS} points per path"),
    )
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Outcome {
    let cases = [([0.4, -0.3], 0.6, [-2.0, 1.5, 0.5]), ([-0.8, 0.9], 0.3, [1.0, -1.0, 3.0])];
    let mut worst: f64 = 0.0;
    for (i, (a, p0, f)) in cases.iter().enumerate() {
        let (_, exact) = toy::exact_gradient(*a, *p0, *f);
        let est = toy::estimate_gradient(*a, *p0, *f, C3_SAMPLES, 1000, 30 + i as u64);
        for k in 0..2 {
            worst = worst.max((est[k] - exact[k]).abs() / exact[k].abs());
        }
    }
    Outcome::check(worst < C3_TOL, format!("worst relative error {:.2}% (< {}%) at {C3_SAMPLES} samples", worst * 100.0, C3_TOL * 100.0))
}

// ---------------------------------------------------------------- criterion 4

fn sprites(counts: Vec<(usize, usize)>, non_overlap: bool, seed: u64) -> DatasetSpec {
    DatasetSpec {
        source: GlyphSource::ProceduralSprites,
        counts,
        canvas_size: 50,
        glyph_size: 20,
        non_overlap,
        seed,
        max_attempts: 100_000,
        composite: Composite::Max,
    }
}

fn synth(spec: &DatasetSpec) -> Vec<DatasetExample> {
    synth_dataset(spec, &GlyphBank::load(&spec.source, spec.glyph_size).unwrap()).unwrap()
}

fn criterion_4() -> Outcome {
    let third = C4_IMAGES / 3;
    let spec = sprites(vec![(1, third), (2, third), (3, C4_IMAGES - 2 * third)], true, 4);
    let data = synth(&spec);
    let infeasible = data
        .iter()
        .filter(|e| {
            let (l, r, t, b) = f_containment(&e.boxes, 50.0);
            f1_pairwise_overlap(&e.boxes) != 0.0 || l != 0.0 || r != 0.0 || t != 0.0 || b != 0.0
        })
        .count();
    let hist_ok = histogram(&data) == spec.histogram();
    Outcome::check(
        infeasible == 0 && hist_ok && data.len() == C4_IMAGES,
        format!(
            "{} images, {infeasible} with nonzero overlap or containment, histogram {}",
            data.len(),
            if hist_ok { "exact" } else { "WRONG" }
        ),
    )
}

// ------------------------------------------------------------ criteria 5 and 6

fn train_and_eval(
    model: ModelConfig,
    constraints: ConstraintSet,
    train: &[DatasetExample],
    test: &[DatasetExample],
    seed: u64,
) -> EvalReport {
    let cfg = TrainConfig { epochs: SCALED_EPOCHS, seed, eval_every: 0, ..TrainConfig::default() };
    let mut trainer = Trainer::new(AsrModel::new(model, seed).unwrap(), constraints, cfg).unwrap();
    trainer.train(train, &[], None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 << 40);
    evaluate(&trainer.model, test, &EvalConfig::default(), &mut rng).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn criterion_5() -> Outcome {
    let half = |n: usize| vec![(1, n / 2), (3, n - n / 2)];
    let scene = SceneConfig::default();
    let counts = ConstraintSet::from_weights(&[("count_match".into(), 10.0), ("count_marginal".into(), 100.0)], scene).unwrap();
    let (mut asr, mut pp) = (Vec::new(), Vec::new());
    for &seed in &SCALED_SEEDS {
        let train = synth(&sprites(half(SCALED_TRAIN), false, 100 + seed));
        let test = synth(&sprites(half(SCALED_TEST), false, 200 + seed));
        asr.push(train_and_eval(ModelConfig::default(), counts.clone(), &train, &test, seed));
        pp.push(train_and_eval(ModelConfig::default(), ConstraintSet::default(), &train, &test, seed));
    }
    let acc_asr: Vec<f64> = asr.iter().map(|r| r.acc).collect();
    let acc_pp: Vec<f64> = pp.iter().map(|r| r.acc).collect();
    let gaps = acc_asr.iter().zip(&acc_pp).filter(|(a, p)| *a - *p >= C5_GAP_MIN).count();
    let (nelbo_asr, nelbo_pp) = (median(asr.iter().map(|r| r.nelbo).collect()), median(pp.iter().map(|r| r.nelbo).collect()));
    let med = median(acc_asr.clone());
    Outcome::check(
        med >= C5_ACC_MIN && gaps >= C5_GAP_SEEDS && nelbo_asr <= nelbo_pp,
        format!(
            "ACC constrained {acc_asr:.3?} (median {med:.3} >= {C5_ACC_MIN}), unconstrained {acc_pp:.3?}, gap >= {C5_GAP_MIN} in {gaps}/3 seeds (need {C5_GAP_SEEDS}); median nELBO {nelbo_asr:.1} vs {nelbo_pp:.1}"
        ),
    )
}

fn criterion_6() -> Outcome {
    let ids = ["overlap", "contain_left", "contain_right", "contain_top", "contain_bottom", "scale_band", "scale_similarity"];
    let weights = [1.0, 1.0, 1.0, 1.0, 1.0, 20.0, 10.0];
    let pairs: Vec<(String, f64)> = ids.iter().zip(weights).map(|(i, w)| (i.to_string(), w)).collect();
    let geometry = ConstraintSet::from_weights(&pairs, SceneConfig::default()).unwrap();
    let model = ModelConfig { fixed_steps: true, ..ModelConfig::default() };
    let (mut asr, mut plain) = (Vec::new(), Vec::new());
    for &seed in &SCALED_SEEDS {
        let train = synth(&sprites(vec![(3, SCALED_TRAIN)], true, 300 + seed));
        let test = synth(&sprites(vec![(3, SCALED_TEST)], true, 400 + seed));
        asr.push(train_and_eval(model.clone(), geometry.clone(), &train, &test, seed).miou);
        plain.push(train_and_eval(model.clone(), ConstraintSet::default(), &train, &test, seed).miou);
    }
    let (ma, mp) = (median(asr.clone()), median(plain.clone()));
    Outcome::check(
        ma >= C6_MIOU_MIN && ma - mp >= C6_GAP_MIN,
        format!("mIoU constrained {asr:.3?} (median {ma:.3} >= {C6_MIOU_MIN}), unconstrained {plain:.3?} (median {mp:.3}); gap {:.3} (>= {C6_GAP_MIN})", ma - mp),
    )
}

// ---------------------------------------------------------------- criterion 7

fn criterion_7() -> Outcome {
    let b = BoundingBox::new;
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };
    let x = Canvas::filled(50, 0.3);
    check("se identical", squared_error(&x, &x).unwrap() == 0.0);
    check("se all-0 vs all-1", squared_error(&Canvas::zeros(50), &Canvas::filled(50, 1.0)).unwrap() == 2500.0);
    let (r1, r2) = (Canvas::filled(50, 0.5), Canvas::filled(50, 0.7));
    let (s1, s2) = (squared_error(&x, &r1).unwrap(), squared_error(&x, &r2).unwrap());
    check("se homogeneity", (s2 - 4.0 * s1).abs() <= 1e-9 * s2);
    check("acc equal", count_accuracy(3, 3) == 1.0);
    check("acc unequal", count_accuracy(2, 3) == 0.0);
    let pairs = [(1, 1), (3, 1), (3, 3), (0, 3)];
    check("acc mean", pairs.iter().map(|&(a, g)| count_accuracy(a, g)).sum::<f64>() / 4.0 == 0.5);
    check("iou identical", iou(&b(10.0, 10.0, 10.0), &b(10.0, 10.0, 10.0)) == 1.0);
    check("iou disjoint", iou(&b(10.0, 10.0, 4.0), &b(30.0, 30.0, 4.0)) == 0.0);
    check("iou 3/7", (iou(&b(10.0, 10.0, 10.0), &b(14.0, 10.0, 10.0)) - 3.0 / 7.0).abs() < C7_IOU_TOL);
    let gt = [b(10.0, 10.0, 8.0), b(30.0, 30.0, 8.0)];
    check("miou permuted", miou(&[gt[1], gt[0]], &gt) == 1.0);
    check("miou one of two", miou(&[gt[0]], &gt) == 0.5);
    check("miou spurious", miou(&[gt[0], gt[1], b(45.0, 5.0, 4.0)], &gt) == 2.0 / 3.0);
    check("miou both empty", miou(&[], &[]) == 1.0);
    check("miou one empty", miou(&[], &gt) == 0.0 && miou(&gt, &[]) == 0.0);
    Outcome::check(
        failures.is_empty(),
        if failures.is_empty() { "14 examples exact".into() } else { format!("failed: {}", failures.join(", ")) },
    )
}

// ---------------------------------------------------------------- criterion 8

fn asr(args: &[&str], out: &Path) -> bool {
    Command::new(env!("CARGO_BIN_EXE_asr"))
        .args(args)
        .arg("--out")
        .arg(out)
        .args(TINY)
        .env_remove("ASR_SEED")
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

#[rustfmt::skip]
const TINY: &[&str] = &[
    "--set", "data.train.counts=[[1,24],[3,24]]",
    "--set", "data.test.counts=[[1,8],[3,8]]",
    "--set", "model.rnn_hidden=16",
    "--set", "model.encoder_hidden=16",
    "--set", "model.mlp_hidden=[16,16]",
    "--set", "train.epochs=3",
    "--set", "train.batch_size=16",
    "--set", "train.seed=11",
];

fn criterion_8() -> Outcome {
    let dirs: Vec<_> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    let mut ok = true;
    for d in &dirs {
        let p = d.path();
        ok &= asr(&["synth"], &p.join("data"));
        ok &= asr(&["train"], &p.join("run"));
        let ck = p.join("run/last.asrc");
        let ck = ck.to_str().unwrap();
        ok &= asr(&["eval", "--checkpoint", ck], &p.join("eval"));
        ok &= asr(&["render", "--checkpoint", ck, "--mode", "generate"], &p.join("render"));
        ok &= asr(&["render", "--checkpoint", ck, "--mode", "reconstruct"], &p.join("render"));
    }
    if !ok {
        return Outcome::check(false, "a command failed".into());
    }
    let files = [
        "data/train.asrd",
        "data/test.asrd",
        "run/metrics.csv",
        "run/manifest.toml",
        "run/config.toml",
        "run/last.asrc",
        "eval/eval.csv",
        "render/generate.png",
        "render/reconstruct.png",
    ];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(dirs[0].path().join(f)).ok() != std::fs::read(dirs[1].path().join(f)).ok())
        .collect();
    Outcome::check(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} outputs identical across two runs", files.len())
        } else {
            format!("differ: {}", differing.join(", "))
        },
    )
}
