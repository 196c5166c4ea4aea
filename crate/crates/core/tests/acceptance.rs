//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line.
//!
//! The trend criteria share one set of trained models (3 seeds x 5 arms on a
//! 500/200 synthetic dataset), built on first use.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use metaanchor::anchors::{AnchorEncoding, StandardBox};
use metaanchor::autograd::{FocalParams, Graph, Var};
use metaanchor::data::{self, Sample, SceneSpec, Split};
use metaanchor::detector::{HeadMode, Model, ModelConfig, TrainConfig, Trainer};
use metaanchor::evaluation::average_precision;
use metaanchor::experiment::{self, ExperimentConfig};
use metaanchor::generator::{generate, generate_dd, GeneratorParams, GeneratorVariant};
use metaanchor::inference::{self, greedy_search, nms, Detection, DetectionEvaluator, PredictOptions};
use metaanchor::matching::{decode_reg, encode_reg, BBox, GroundTruthBox, MatchThresholds};
use metaanchor::tensor::Tensor;

/// Writes straight to stderr so the line shows up even when test output is
/// captured.
fn report(criterion: u32, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[acceptance] criterion {criterion:>2}: {verdict}  {detail}");
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(shape: Vec<usize>, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, r)
}

fn random_generator(r: &mut ChaCha8Rng, variant: GeneratorVariant, d: usize, m: usize, d_feat: usize) -> GeneratorParams {
    let theta = random_tensor(vec![d], r);
    let w1 = random_tensor(vec![m, 2], r);
    let w12 = (variant == GeneratorVariant::DataDependent).then(|| random_tensor(vec![m, d_feat], r));
    let w2 = random_tensor(vec![d, m], r);
    GeneratorParams::new(variant, theta, w1, w12, w2).unwrap()
}

// ---------------------------------------------------------------- criterion 1

#[test]
fn c01_generator_identity() {
    let start = Instant::now();
    let mut r = rng(101);
    let mut ok = true;
    for _ in 0..100 {
        let d = r.gen_range(1..=64);
        let m = r.gen_range(1..=8);
        let mut p = random_generator(&mut r, GeneratorVariant::DataIndependent, d, m, 0);
        let out = generate(&p, &AnchorEncoding::STANDARD).unwrap();
        ok &= out.iter().zip(p.theta_star.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        p.w2 = Tensor::zeros(vec![d, m]);
        for _ in 0..5 {
            let b = AnchorEncoding::new(r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0)).unwrap();
            let out = generate(&p, &b).unwrap();
            ok &= out.iter().zip(p.theta_star.data()).all(|(a, t)| a == t);
        }
    }
    let elapsed = start.elapsed();
    let pass = ok && elapsed < Duration::from_secs(1);
    report(1, pass, &format!("100 draws, bit-exact identity {ok}, {elapsed:.2?}"));
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 2

/// `theta* + W2 relu(W1 b + W12 f)` with plain loops.
fn naive_generate(p: &GeneratorParams, b: &AnchorEncoding, pooled: Option<&[f64]>) -> Vec<f64> {
    let m = p.w2.shape()[1];
    let d = p.theta_star.numel();
    let w1 = p.w_enc.data();
    let mut h = vec![0.0; m];
    for j in 0..m {
        let mut s = w1[j * 2] * b.eh + w1[j * 2 + 1] * b.ew;
        if let (Some(w12), Some(f)) = (&p.w_feat, pooled) {
            for (k, fk) in f.iter().enumerate() {
                s += w12.data()[j * f.len() + k] * fk;
            }
        }
        h[j] = if s > 0.0 { s } else { 0.0 };
    }
    (0..d)
        .map(|i| {
            let mut s = 0.0;
            for j in 0..m {
                s += p.w2.data()[i * m + j] * h[j];
            }
            p.theta_star.data()[i] + s
        })
        .collect()
}

#[test]
fn c02_generator_oracle() {
    let mut r = rng(202);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let d = r.gen_range(1..=64);
        let m = r.gen_range(1..=8);
        let b = AnchorEncoding::new(r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0)).unwrap();
        let di = random_generator(&mut r, GeneratorVariant::DataIndependent, d, m, 0);
        let got = generate(&di, &b).unwrap();
        let want = naive_generate(&di, &b, None);
        worst = got.iter().zip(&want).map(|(x, y)| (x - y).abs()).fold(worst, f64::max);

        let c = 1 + case % 4;
        let (fh, fw) = (r.gen_range(1..5), r.gen_range(1..5));
        let feature = random_tensor(vec![c, fh, fw], &mut r);
        let pooled: Vec<f64> = (0..c)
            .map(|k| feature.data()[k * fh * fw..(k + 1) * fh * fw].iter().sum::<f64>() / (fh * fw) as f64)
            .collect();
        let dd = random_generator(&mut r, GeneratorVariant::DataDependent, d, m, c);
        let got = generate_dd(&dd, &b, &feature).unwrap();
        let want = naive_generate(&dd, &b, Some(&pooled));
        worst = got.iter().zip(&want).map(|(x, y)| (x - y).abs()).fold(worst, f64::max);
    }
    let pass = worst <= 1e-12;
    report(2, pass, &format!("50 cases x 2 variants, max deviation {worst:.2e}"));
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 3

struct FdReport {
    name: String,
    worst: f64,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-3)
}

/// Central differences of `sum(R * f(inputs))` for a fixed random `R`.
fn fd_op(name: &str, inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) -> FdReport {
    let mut r = rng(303);
    let probe = |g: &mut Graph, out: Var, weights: &Tensor| -> Var {
        let n = g.value(out).numel();
        let flat = g.reshape(out, vec![n]).unwrap();
        let w = g.constant(weights.clone());
        let y = g.matmul_nt(flat, w).unwrap();
        g.sum(y)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars);
    let n = g.value(out).numel();
    let weights = random_tensor(vec![1, n], &mut r);
    let loss = probe(&mut g, out, &weights);
    let grads = g.gradients(loss, &vars).unwrap();
    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        let l = probe(&mut g, out, &weights);
        g.value(l).item()
    };
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let mut xs = inputs.clone();
            xs[k].data_mut()[i] += eps;
            let up = eval(&xs);
            xs[k].data_mut()[i] -= 2.0 * eps;
            let down = eval(&xs);
            worst = worst.max(rel_err(grads[k].data()[i], (up - down) / (2.0 * eps)));
        }
    }
    FdReport {
        name: name.to_string(),
        worst,
    }
}

fn micro_detector_fd(head: HeadMode) -> FdReport {
    let name = format!("micro detector ({})", match &head {
        HeadMode::Meta { variant, .. } => format!("{variant:?}"),
        HeadMode::Baseline { .. } => "baseline".into(),
    });
    let encs = vec![
        AnchorEncoding::STANDARD,
        AnchorEncoding { eh: 0.35, ew: -0.4 },
        AnchorEncoding { eh: -0.3, ew: 0.25 },
    ];
    let cfg = ModelConfig {
        num_classes: 2,
        feat_channels: 4,
        stem_channels: 4,
        num_levels: 1,
        tower_depth: 1,
        head,
        standard: StandardBox { h: 6.0, w: 6.0, level: 0 },
    };
    let model = Model::new(cfg, &mut rng(31)).unwrap();
    let train = TrainConfig {
        warmup_steps: 0,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(model, encs.clone(), train, MatchThresholds::default(), None).unwrap();
    let mut img = random_tensor(vec![3, 8, 8], &mut rng(32));
    img.data_mut().iter_mut().for_each(|v| *v = 0.5 + 0.5 * *v);
    let gts = vec![
        GroundTruthBox::from_corners(0.5, 1.0, 6.5, 7.0, 0),
        GroundTruthBox::from_corners(3.0, 2.0, 8.0, 5.0, 1),
    ];
    let batch = [(&img, gts.as_slice())];
    let (g, loss, _) = t.batch_loss(&encs, &batch).unwrap();
    t.model.params.zero_grad();
    g.backward(loss, &mut t.model.params).unwrap();
    let names: Vec<String> = t.model.params.names().map(String::from).collect();
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for name in &names {
        let analytic = t.model.params.get(name).unwrap().grad().unwrap().to_vec();
        for (i, a) in analytic.iter().enumerate() {
            let orig = t.model.params.get(name).unwrap().data()[i];
            let mut at = |v: f64| {
                t.model.params.get_mut(name).unwrap().data_mut()[i] = v;
                let (g, l, _) = t.batch_loss(&encs, &batch).unwrap();
                g.value(l).item()
            };
            let fd = (at(orig + eps) - at(orig - eps)) / (2.0 * eps);
            t.model.params.get_mut(name).unwrap().data_mut()[i] = orig;
            worst = worst.max(rel_err(*a, fd));
        }
    }
    FdReport { name, worst }
}

#[test]
fn c03_gradient_suite() {
    let start = Instant::now();
    let mut r = rng(3);
    let mut reports = Vec::new();
    let t = |shape: Vec<usize>, r: &mut ChaCha8Rng| random_tensor(shape, r);
    reports.push(fd_op("conv3x3", vec![t(vec![2, 5, 4], &mut r), t(vec![3, 2, 3, 3], &mut r), t(vec![3], &mut r)], |g, v| {
        g.conv2d_3x3(v[0], v[1], Some(v[2])).unwrap()
    }));
    reports.push(fd_op("matmul_nt", vec![t(vec![3, 4], &mut r), t(vec![5, 4], &mut r)], |g, v| g.matmul_nt(v[0], v[1]).unwrap()));
    reports.push(fd_op("linear", vec![t(vec![4], &mut r), t(vec![3, 4], &mut r), t(vec![3], &mut r)], |g, v| {
        g.linear(v[0], v[1], Some(v[2])).unwrap()
    }));
    reports.push(fd_op("add_row", vec![t(vec![3, 4], &mut r), t(vec![4], &mut r)], |g, v| g.add_row(v[0], v[1]).unwrap()));
    reports.push(fd_op("add", vec![t(vec![2, 3], &mut r), t(vec![2, 3], &mut r)], |g, v| g.add(v[0], v[1]).unwrap()));
    reports.push(fd_op("relu", vec![t(vec![12], &mut r)], |g, v| g.relu(v[0])));
    reports.push(fd_op("sigmoid", vec![t(vec![12], &mut r)], |g, v| g.sigmoid(v[0])));
    reports.push(fd_op("avg_pool2", vec![t(vec![2, 4, 6], &mut r)], |g, v| g.avg_pool2(v[0]).unwrap()));
    reports.push(fd_op("global_avg_pool", vec![t(vec![3, 3, 2], &mut r)], |g, v| g.global_avg_pool(v[0]).unwrap()));
    reports.push(fd_op("col_slice", vec![t(vec![3, 6], &mut r)], |g, v| g.col_slice(v[0], 2, 3).unwrap()));
    reports.push(fd_op("reshape", vec![t(vec![2, 6], &mut r)], |g, v| g.reshape(v[0], vec![3, 4]).unwrap()));
    reports.push(fd_op("sum", vec![t(vec![7], &mut r)], |g, v| g.sum(v[0])));
    reports.push(fd_op("scale", vec![t(vec![5], &mut r)], |g, v| g.scale(v[0], -1.7)));
    let targets: Vec<f64> = (0..10).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let weights: Vec<f64> = (0..10).map(|i| if i == 4 { 0.0 } else { 1.0 }).collect();
    {
        let (tg, wt) = (targets.clone(), weights.clone());
        reports.push(fd_op("focal_loss", vec![t(vec![10], &mut r)], move |g, v| {
            let x = g.scale(v[0], 3.0);
            g.focal_loss(x, &tg, &wt, FocalParams::default(), 3.0).unwrap()
        }));
    }
    {
        let tg: Vec<f64> = (0..10).map(|i| 0.05 * i as f64 - 0.2).collect();
        reports.push(fd_op("smooth_l1", vec![t(vec![10], &mut r)], move |g, v| {
            g.smooth_l1_loss(v[0], &tg, &weights, 0.4, 2.0).unwrap()
        }));
    }
    for head in [
        HeadMode::Meta { variant: GeneratorVariant::DataIndependent, hidden: 5 },
        HeadMode::Meta { variant: GeneratorVariant::DataDependent, hidden: 5 },
        HeadMode::Baseline {
            anchors: vec![
                AnchorEncoding::STANDARD,
                AnchorEncoding { eh: 0.35, ew: -0.4 },
                AnchorEncoding { eh: -0.3, ew: 0.25 },
            ],
        },
    ] {
        reports.push(micro_detector_fd(head));
    }
    let elapsed = start.elapsed();
    let worst = reports.iter().map(|r| r.worst).fold(0.0, f64::max);
    let failing: Vec<&str> = reports.iter().filter(|r| !(r.worst <= 1e-5)).map(|r| r.name.as_str()).collect();
    let pass = failing.is_empty() && elapsed < Duration::from_secs(120);
    report(
        3,
        pass,
        &format!("{} checks, worst relative error {worst:.2e}, failing {failing:?}, {elapsed:.1?}", reports.len()),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 4

/// IoU of integer-cornered boxes by counting unit cells.
fn iou_by_cells(a: [i32; 4], b: [i32; 4]) -> f64 {
    let (mut inter, mut union) = (0, 0);
    for y in 0..8 {
        for x in 0..8 {
            let ina = x >= a[0] && x < a[2] && y >= a[1] && y < a[3];
            let inb = x >= b[0] && x < b[2] && y >= b[1] && y < b[3];
            inter += (ina && inb) as i32;
            union += (ina || inb) as i32;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn nms_reference(dets: &[Detection], thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // insertion sort: score descending, then left edge ascending, stable
    for i in 1..order.len() {
        let mut j = i;
        while j > 0 {
            let (p, q) = (&dets[order[j - 1]], &dets[order[j]]);
            let swap = q.score > p.score || (q.score == p.score && q.bbox[0] < p.bbox[0]);
            if !swap {
                break;
            }
            order.swap(j - 1, j);
            j -= 1;
        }
    }
    let n = dets.len();
    let conflict = |i: usize, j: usize| {
        dets[i].class_id == dets[j].class_id && dets[i].bbox().iou(&dets[j].bbox()) > thresh
    };
    // the unique subset where a box survives iff no earlier survivor conflicts
    let mut hits = Vec::new();
    for mask in 0u32..(1 << n) {
        let on = |i: usize| mask >> i & 1 == 1;
        let consistent = order
            .iter()
            .enumerate()
            .all(|(r, &i)| on(i) == !order[..r].iter().any(|&j| on(j) && conflict(i, j)));
        if consistent {
            hits.push(mask);
        }
    }
    assert_eq!(hits.len(), 1);
    order.into_iter().filter(|&i| hits[0] >> i & 1 == 1).map(|i| dets[i]).collect()
}

/// AP by trying every cut-off: best precision among prefixes reaching each
/// recall level, detections matched to the highest-IoU free GT.
fn ap_reference(dets: &[(BBox, f64)], gts: &[BBox], t: f64) -> f64 {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| dets[b].1.partial_cmp(&dets[a].1).unwrap().then(a.cmp(&b)));
    let mut used = vec![false; gts.len()];
    let mut tp_flags = Vec::new();
    for &i in &idx {
        let mut best: Option<(f64, usize)> = None;
        for (j, g) in gts.iter().enumerate() {
            let v = dets[i].0.iou(g);
            if !used[j] && v >= t && best.map_or(true, |(bv, _)| v > bv) {
                best = Some((v, j));
            }
        }
        if let Some((_, j)) = best {
            used[j] = true;
        }
        tp_flags.push(best.is_some());
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let rt = k as f64 / 100.0;
        let mut p_best: f64 = 0.0;
        for cut in 1..=tp_flags.len() {
            let tp = tp_flags[..cut].iter().filter(|x| **x).count();
            if tp as f64 / gts.len() as f64 >= rt {
                p_best = p_best.max(tp as f64 / cut as f64);
            }
        }
        sum += p_best;
    }
    sum / 101.0
}

#[test]
fn c04_geometry_oracles() {
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |k: &'static str, v: f64| {
        let e = worst.entry(k).or_insert(0.0);
        *e = e.max(v);
    };
    // every pair of integer boxes inside a 4x4 grid
    let mut boxes = Vec::new();
    for x0 in 0..4 {
        for x1 in x0 + 1..=4 {
            for y0 in 0..4 {
                for y1 in y0 + 1..=4 {
                    boxes.push([x0, y0, x1, y1]);
                }
            }
        }
    }
    let to_bbox = |b: [i32; 4]| BBox::from_corners(b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64);
    for &a in &boxes {
        for &b in &boxes {
            note("iou", (to_bbox(a).iou(&to_bbox(b)) - iou_by_cells(a, b)).abs());
        }
    }
    // regression encoding against its formula, and the round trip
    for &a in &boxes {
        for &b in &boxes {
            let (ab, gb) = (to_bbox(a), to_bbox(b));
            let gt = GroundTruthBox { cx: gb.cx, cy: gb.cy, w: gb.w, h: gb.h, class_id: 0 };
            let d = encode_reg(&ab, &gt).unwrap();
            let want = [(gb.cx - ab.cx) / ab.w, (gb.cy - ab.cy) / ab.h, (gb.w / ab.w).ln(), (gb.h / ab.h).ln()];
            note("encode_reg", d.iter().zip(&want).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
            let back = decode_reg(&ab, &d).unwrap();
            note(
                "decode_reg",
                [back.cx - gb.cx, back.cy - gb.cy, back.w - gb.w, back.h - gb.h].iter().map(|v| v.abs()).fold(0.0, f64::max),
            );
        }
    }
    // NMS and AP on random instances of up to 5 boxes
    let mut r = rng(404);
    let pick = |r: &mut ChaCha8Rng| -> BBox {
        let b = boxes[r.gen_range(0..boxes.len())];
        let jitter = r.gen_range(0.0..0.3);
        let bb = to_bbox(b);
        BBox { cx: bb.cx + jitter, ..bb }
    };
    for _ in 0..3000 {
        let n = r.gen_range(0..=5);
        let dets: Vec<Detection> = (0..n)
            .map(|_| Detection {
                bbox: pick(&mut r).corners(),
                score: r.gen_range(1..5) as f64 / 5.0,
                class_id: r.gen_range(0..2),
                source_anchor: AnchorEncoding::STANDARD,
                level: 0,
            })
            .collect();
        let got = nms(&dets, 0.5, true);
        let want = nms_reference(&dets, 0.5);
        note("nms", if got == want { 0.0 } else { 1.0 });

        let ng = r.gen_range(1..=5);
        let gts: Vec<BBox> = (0..ng).map(|_| pick(&mut r)).collect();
        let nd = r.gen_range(0..=5);
        let d: Vec<(BBox, f64)> = (0..nd).map(|_| (pick(&mut r), r.gen_range(1..5) as f64 / 5.0)).collect();
        for t in [0.5, 0.75] {
            let a = average_precision(std::slice::from_ref(&d), std::slice::from_ref(&gts), t).unwrap();
            note("average_precision", (a - ap_reference(&d, &gts, t)).abs());
        }
    }
    let max = worst.values().copied().fold(0.0, f64::max);
    let pass = max <= 1e-9;
    report(4, pass, &format!("max deviation per oracle {worst:?}"));
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 5

#[test]
fn c05_overfit_single_box() {
    let start = Instant::now();
    let spec = SceneSpec {
        image_h: 32,
        image_w: 32,
        min_objects: 1,
        max_objects: 1,
        min_sqrt_hw: 10.0,
        max_sqrt_hw: 14.0,
        seed: 5,
        ..SceneSpec::default()
    };
    let (image, boxes) = data::sample_scene(&spec, 0);
    let cfg = ExperimentConfig::from_toml(
        "seed = 5\n[generator]\nm = 16\n[model]\nnum_levels = 2\n[train]\nsteps = 500\nbatch_size = 1\nwarmup_steps = 20\n",
    )
    .unwrap();
    let sample = Sample {
        path: PathBuf::from("overfit"),
        image,
        boxes: boxes.clone(),
    };
    let samples = vec![sample];
    let mut hit_at = None;
    let mut t = cfg.trainer(spec.num_classes).unwrap();
    let data = vec![(samples[0].image.clone(), boxes.clone())];
    let (anchors, _) = cfg.training_anchors().unwrap();
    let mut ap50 = 0.0;
    for chunk in 0..10 {
        t.fit(&data, 50, |_| {}).unwrap();
        let r = experiment::evaluate(&t.model, &samples, &anchors, &PredictOptions::default()).unwrap();
        ap50 = r.ap50;
        if ap50 == 1.0 {
            hit_at = Some(50 * (chunk + 1));
            break;
        }
    }
    let elapsed = start.elapsed();
    let pass = hit_at.is_some() && elapsed < Duration::from_secs(120);
    report(5, pass, &format!("AP50 = 1.0 reached at step {hit_at:?} (last AP50 {ap50:.3}), {elapsed:.1?}"));
    assert!(pass);
}

// ------------------------------------------------------------ criteria 6 - 10

const SEEDS: [u64; 3] = [0, 1, 2];

const SCENE: &str = r#"
image_h = 64
image_w = 64
num_classes = 3
min_objects = 1
max_objects = 3
min_sqrt_hw = 8.0
max_sqrt_hw = 40.0
val_fraction = 0.2857142857142857
search_subset = 100
seed = 11
"#;

const TRAIN: &str = r#"
[anchors]
n_scales = 5
ratios = [0.3333333333333333, 0.5, 1.0, 2.0, 3.0]
base_size = 8.0
[generator]
m = 32
[train]
steps = 3000
batch_size = 4
lr = 0.01
warmup_steps = 100
"#;

/// Middle third of the log-uniform size range [8, 40].
fn drop_section() -> String {
    let (lo, hi) = (8f64, 40f64);
    let third = (hi / lo).ln() / 3.0;
    format!(
        "[drop_boxes]\nenabled = true\nmin_sqrt_hw = {}\nmax_sqrt_hw = {}\nlog_ratio_bound = 1.0\n",
        lo * third.exp(),
        lo * (2.0 * third).exp()
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Arm {
    Meta,
    Baseline,
    MetaDrop,
    BaselineDrop,
    DataDependent,
}

struct Runs {
    _dir: tempfile::TempDir,
    val: Vec<Sample>,
    search: Vec<Sample>,
    models: BTreeMap<(Arm, u64), Model>,
    config: ExperimentConfig,
}

fn arm_config(arm: Arm, seed: u64) -> ExperimentConfig {
    let mut text = TRAIN.to_string();
    if matches!(arm, Arm::MetaDrop | Arm::BaselineDrop) {
        text.push_str(&drop_section());
    }
    let mut cfg = ExperimentConfig::from_toml(&text).unwrap().with_seed(seed);
    cfg.model.baseline = matches!(arm, Arm::Baseline | Arm::BaselineDrop);
    if arm == Arm::DataDependent {
        cfg.generator.variant = GeneratorVariant::DataDependent;
    }
    cfg
}

fn runs() -> &'static Runs {
    static RUNS: OnceLock<Runs> = OnceLock::new();
    RUNS.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let spec: SceneSpec = toml::from_str(SCENE).unwrap();
        data::generate_dataset(&spec, 700, dir.path()).unwrap();
        let train = data::load_dataset(dir.path(), Split::Train).unwrap();
        let val = data::load_dataset(dir.path(), Split::Val).unwrap();
        let search = data::load_dataset(dir.path(), Split::SearchSubset).unwrap();
        assert_eq!((train.len(), val.len()), (500, 200));
        let mut models = BTreeMap::new();
        for seed in SEEDS {
            for arm in [Arm::Meta, Arm::Baseline, Arm::MetaDrop, Arm::BaselineDrop, Arm::DataDependent] {
                let start = Instant::now();
                let (model, log) = arm_config(arm, seed).train(&train, spec.num_classes, |_| {}).unwrap();
                let _ = writeln!(
                    std::io::stderr(),
                    "[acceptance] trained {arm:?} seed {seed}: loss {:.3} -> {:.3} in {:.0?}",
                    log[0].loss,
                    log.last().unwrap().loss,
                    start.elapsed()
                );
                models.insert((arm, seed), model);
            }
        }
        Runs {
            _dir: dir,
            val,
            search,
            models,
            config: arm_config(Arm::Meta, 0),
        }
    })
}

fn training_anchors(model: &Model) -> Vec<AnchorEncoding> {
    match model.fixed_anchors() {
        Some(a) => a.to_vec(),
        None => experiment::grid_anchors(model, 5, &[1.0 / 3.0, 0.5, 1.0, 2.0, 3.0], 8.0).unwrap(),
    }
}

fn val_mmap(model: &Model, anchors: &[AnchorEncoding]) -> f64 {
    experiment::evaluate(model, &runs().val, anchors, &PredictOptions::default()).unwrap().mmap
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn arm_scores(arm: Arm) -> Vec<f64> {
    SEEDS
        .iter()
        .map(|&s| {
            let m = &runs().models[&(arm, s)];
            val_mmap(m, &training_anchors(m))
        })
        .collect()
}

fn pts(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn fmt_all(xs: &[f64]) -> String {
    xs.iter().map(|x| pts(*x)).collect::<Vec<_>>().join("/")
}

#[test]
fn c06_metaanchor_vs_baseline() {
    let meta = arm_scores(Arm::Meta);
    let base = arm_scores(Arm::Baseline);
    let pass = mean(&meta) >= mean(&base) - 0.005;
    report(
        6,
        pass,
        &format!(
            "mmAP MetaAnchor {} (mean {}) vs baseline {} (mean {}), tolerance 0.5 pt",
            fmt_all(&meta),
            pts(mean(&meta)),
            fmt_all(&base),
            pts(mean(&base))
        ),
    );
    assert!(pass);
}

#[test]
fn c07_more_inference_anchors() {
    let mut s33 = Vec::new();
    let mut s99 = Vec::new();
    for seed in SEEDS {
        let m = &runs().models[&(Arm::Meta, seed)];
        let a33 = experiment::grid_anchors(m, 3, &[0.5, 1.0, 2.0], 8.0).unwrap();
        let a99 = experiment::grid_anchors(m, 9, &[0.2, 0.25, 1.0 / 3.0, 0.5, 1.0, 2.0, 3.0, 4.0, 5.0], 8.0).unwrap();
        s33.push(val_mmap(m, &a33));
        s99.push(val_mmap(m, &a99));
    }
    let pass = mean(&s99) >= mean(&s33) - 0.002;
    report(
        7,
        pass,
        &format!(
            "trained 5x5; inference 9x9 {} (mean {}) vs 3x3 {} (mean {}), tolerance 0.2 pt",
            fmt_all(&s99),
            pts(mean(&s99)),
            fmt_all(&s33),
            pts(mean(&s33))
        ),
    );
    assert!(pass);
}

#[test]
fn c08_greedy_search() {
    let cfg = &runs().config;
    let pairs: Vec<(Tensor, Vec<GroundTruthBox>)> =
        runs().search.iter().map(|s| (s.image.clone(), s.boxes.clone())).collect();
    let mut monotone = true;
    let mut dominates = true;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let m = &runs().models[&(Arm::Meta, seed)];
        let pool = inference::default_search_pool(cfg.anchors.base_size, &m.config.standard).unwrap();
        let mut ev = DetectionEvaluator::new(m, &pool, &pairs, PredictOptions::default()).unwrap();
        let r = greedy_search(pool.len(), &mut ev, seed, None).unwrap();
        monotone &= r.trace.windows(2).all(|w| w[1].best >= w[0].best) && r.trace[0].best >= r.initial_score;
        let best_single = (0..pool.len())
            .map(|i| {
                use metaanchor::inference::CandidateEvaluator;
                ev.evaluate(&[i]).unwrap()
            })
            .fold(f64::NEG_INFINITY, f64::max);
        dominates &= r.score >= best_single;
        lines.push(format!(
            "seed {seed}: {} of {} selected, {} vs best singleton {}",
            r.selected.len(),
            pool.len(),
            pts(r.score),
            pts(best_single)
        ));
    }
    assert!(monotone, "search score trace decreased");
    let pass = monotone && dominates;
    report(8, pass, &format!("trace non-decreasing {monotone}; {}", lines.join("; ")));
    assert!(pass);
}

#[test]
fn c09_drop_box_degradation() {
    let meta_all = arm_scores(Arm::Meta);
    let base_all = arm_scores(Arm::Baseline);
    let meta_drop = arm_scores(Arm::MetaDrop);
    let base_drop = arm_scores(Arm::BaselineDrop);
    let dm = mean(&meta_all) - mean(&meta_drop);
    let db = mean(&base_all) - mean(&base_drop);
    let pass = dm <= db + 0.003;
    report(
        9,
        pass,
        &format!(
            "degradation MetaAnchor {} pt (all {}, drop {}) vs baseline {} pt (all {}, drop {}), tolerance 0.3 pt",
            pts(dm),
            fmt_all(&meta_all),
            fmt_all(&meta_drop),
            pts(db),
            fmt_all(&base_all),
            fmt_all(&base_drop)
        ),
    );
    assert!(pass);
}

#[test]
fn c10_data_dependent_variant() {
    let di = arm_scores(Arm::Meta);
    let dd = arm_scores(Arm::DataDependent);
    let gap = (mean(&dd) - mean(&di)).abs();
    let pass = gap <= 0.01;
    report(
        10,
        pass,
        &format!(
            "mmAP data-dependent {} (mean {}) vs data-independent {} (mean {}), |gap| {} pt, tolerance 1.0 pt",
            fmt_all(&dd),
            pts(mean(&dd)),
            fmt_all(&di),
            pts(mean(&di)),
            pts(gap)
        ),
    );
    assert!(pass);
}

// --------------------------------------------------------------- criterion 11

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_metaanchor")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn c11_cli_determinism() {
    let root = tempfile::tempdir().unwrap();
    let p = |s: &str| root.path().join(s).to_str().unwrap().to_string();
    std::fs::write(
        p("scene.toml"),
        "image_h = 32\nimage_w = 32\nmin_sqrt_hw = 6.0\nmax_sqrt_hw = 20.0\nsearch_subset = 4\nval_fraction = 0.25\n",
    )
    .unwrap();
    std::fs::write(
        p("exp.toml"),
        "[generator]\nm = 8\n[model]\nnum_levels = 2\nfeat_channels = 8\n[train]\nsteps = 15\nbatch_size = 2\n[search]\nk_min = 0\nk_max = 1\n",
    )
    .unwrap();
    std::fs::write(p("pool.json"), r#"{"n_scales": 2, "ratios": [0.5, 1.0, 2.0], "base_size": 8.0}"#).unwrap();
    let commands: Vec<(&str, Vec<String>)> = vec![
        ("data", vec!["gen-data".into(), "--spec".into(), p("scene.toml"), "-n".into(), "12".into(), "--out".into(), p("data"), "--seed".into(), "4".into()]),
        ("train", vec!["train".into(), "--config".into(), p("exp.toml"), "--dataset".into(), p("data"), "--out".into(), p("train"), "--seed".into(), "9".into()]),
        ("base", vec!["train".into(), "--config".into(), p("exp.toml"), "--dataset".into(), p("data"), "--out".into(), p("base"), "--seed".into(), "9".into(), "--baseline".into()]),
        ("eval", vec!["eval".into(), "--checkpoint".into(), p("train/model.bin"), "--dataset".into(), p("data"), "--anchors".into(), p("pool.json"), "--out".into(), p("eval")]),
        ("search", vec!["search".into(), "--checkpoint".into(), p("train/model.bin"), "--dataset".into(), p("data"), "--config".into(), p("exp.toml"), "--seed".into(), "2".into(), "--out".into(), p("search")]),
        ("render", vec!["render".into(), "--checkpoint".into(), p("train/model.bin"), "--image".into(), p("data/images/00000.ppm"), "--anchors".into(), p("pool.json"), "--out".into(), p("render")]),
    ];
    let mut identical = Vec::new();
    for (name, args) in &commands {
        let argv: Vec<&str> = args.iter().map(String::as_str).collect();
        cli(&argv);
        let first = snapshot(&root.path().join(name));
        cli(&argv);
        let second = snapshot(&root.path().join(name));
        identical.push((*name, !first.is_empty() && first == second, first.len()));
    }
    let pass = identical.iter().all(|(_, same, _)| *same);
    report(11, pass, &format!("repeated runs byte-identical (command, identical, files): {identical:?}"));
    assert!(pass);
}
