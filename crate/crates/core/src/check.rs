//! Reference oracles and the self-check suite.
//!
//! The oracles here are deliberately naive and share no code with the
//! implementations they check: rasterized overlap, O(n²) suppression,
//! exhaustive anchor labelling, central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchorer::{assign, generate_anchors, Assignment, AnchorSettings, Label, NEGATIVE_IOU, POSITIVE_IOU};
use crate::autodiff::gradcheck::{check_graph_fn, numeric_gradient, random_tensor, GradCheck};
use crate::autodiff::{Graph, Result as AdResult, Tensor, Var};
use crate::data::{parse_ccpd_name, sample_seed, synth_sample, Preset};
use crate::engine::{anchors_for, nms, Detection};
use crate::geom::{ciou_loss, ciou_terms, iou, iou_loss, BoxCWH, BoxXYXY, Quad};
use crate::loss::{decode_prediction, focal_loss, gather, smooth_l1, total_loss, LossWeights};
use crate::net::{channel_attention, spatial_attention, LevelMaps, NetConfig, PyramidMaps, LEVEL_STRIDES};

/// Cell size of the overlap raster.
pub const RASTER_PITCH: f64 = 0.005;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

// ---- geometry -------------------------------------------------------------

/// Number of raster cells in `[lo, hi)` whose centers fall inside `[a, b)`.
fn covered_cells(a: f64, b: f64, lo: f64, hi: f64, pitch: f64) -> u64 {
    let n = ((hi - lo) / pitch).round() as u64;
    (0..n)
        .filter(|&i| {
            let c = lo + (i as f64 + 0.5) * pitch;
            c >= a && c < b
        })
        .count() as u64
}

/// IoU by counting raster cell centers over the square `[lo, hi)²`. Boxes
/// are rectangles, so each 2-D count factors into two 1-D counts.
pub fn raster_iou(a: &BoxXYXY, b: &BoxXYXY, lo: f64, hi: f64, pitch: f64) -> f64 {
    let count = |x1: f32, y1: f32, x2: f32, y2: f32| {
        covered_cells(x1 as f64, x2 as f64, lo, hi, pitch) * covered_cells(y1 as f64, y2 as f64, lo, hi, pitch)
    };
    let ca = count(a.x1, a.y1, a.x2, a.y2);
    let cb = count(b.x1, b.y1, b.x2, b.y2);
    let ci = count(a.x1.max(b.x1), a.y1.max(b.y1), a.x2.min(b.x2), a.y2.min(b.y2));
    let union = ca + cb - ci;
    if union == 0 {
        0.0
    } else {
        ci as f64 / union as f64
    }
}

/// IoU in f64 straight from the definition.
pub fn reference_iou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.as_array().map(f64::from);
    let [bx1, by1, bx2, by2] = b.as_array().map(f64::from);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    inter / ((ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter)
}

/// A valid box with corners drawn in `[lo, hi]²`, sides at least `min_side`.
pub fn random_box(rng: &mut impl Rng, lo: f32, hi: f32, min_side: f32) -> BoxXYXY {
    loop {
        let (a, b) = (rng.gen_range(lo..hi), rng.gen_range(lo..hi));
        let (c, d) = (rng.gen_range(lo..hi), rng.gen_range(lo..hi));
        let (x1, x2) = (a.min(b), a.max(b));
        let (y1, y2) = (c.min(d), c.max(d));
        if x2 - x1 >= min_side && y2 - y1 >= min_side {
            return BoxXYXY { x1, y1, x2, y2 };
        }
    }
}

/// Two boxes with a positive gap along x or y.
pub fn random_disjoint_pair(rng: &mut impl Rng) -> (BoxXYXY, BoxXYXY) {
    loop {
        let a = random_box(rng, 0.0, 10.0, 0.2);
        let b = random_box(rng, 0.0, 10.0, 0.2);
        let gap_x = b.x1 - a.x2 > 1e-3 || a.x1 - b.x2 > 1e-3;
        let gap_y = b.y1 - a.y2 > 1e-3 || a.y1 - b.y2 > 1e-3;
        if gap_x || gap_y {
            return (a, b);
        }
    }
}

fn cwh64(b: &BoxXYXY) -> [f64; 4] {
    let c = b.to_cwh();
    [c.cx, c.cy, c.w, c.h].map(f64::from)
}

/// IoU against the raster oracle on random pairs in `[0, 10]²`, plus the
/// hand-derived CIoU fixtures.
pub fn geometry_suite(seed: u64, pairs: usize) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let a = random_box(&mut rng, 0.0, 10.0, 0.05);
        let b = random_box(&mut rng, 0.0, 10.0, 0.05);
        let v = iou(&a, &b).expect("valid boxes") as f64;
        worst = worst.max((v - raster_iou(&a, &b, 0.0, 10.0, RASTER_PITCH)).abs());
    }
    let mut out = vec![CheckOutcome::new(
        "iou vs raster oracle",
        worst <= 0.01,
        format!("{pairs} pairs, max |diff| {worst:.5} (tolerance 0.01)"),
    )];
    let bx = |x1, y1, x2, y2| BoxXYXY { x1, y1, x2, y2 };
    let fixtures = [
        (bx(0., 0., 2., 2.), bx(0., 0., 2., 2.), 0.0),
        (bx(0., 0., 2., 2.), bx(2., 0., 4., 2.), 1.2),
        (bx(0., 0., 2., 2.), bx(0., 0., 4., 2.), 0.553_248_1),
    ];
    for (p, g, want) in fixtures {
        let got = ciou_loss(&p, &g).expect("valid fixture").value as f64;
        out.push(CheckOutcome::new(
            format!("ciou fixture {:?} vs {:?}", p.as_array(), g.as_array()),
            (got - want).abs() <= 1e-5,
            format!("value {got:.7}, expected {want}"),
        ));
    }
    out
}

/// Plain IoU loss has no gradient on disjoint pairs; CIoU still pulls the
/// centers together.
pub fn dead_gradient_suite(seed: u64, pairs: usize) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut iou_dead = 0;
    let mut ciou_alive = 0;
    let mut min_center = f32::INFINITY;
    for _ in 0..pairs {
        let (p, g) = random_disjoint_pair(&mut rng);
        if iou_loss(&p, &g).expect("valid").grad.iter().all(|&v| v == 0.0) {
            iou_dead += 1;
        }
        let c = ciou_loss(&p, &g).expect("valid").grad;
        let norm = (c[0] * c[0] + c[1] * c[1]).sqrt();
        min_center = min_center.min(norm);
        if norm > 0.0 {
            ciou_alive += 1;
        }
    }
    vec![
        CheckOutcome::new(
            "iou loss gradient vanishes on disjoint pairs",
            iou_dead == pairs,
            format!("{iou_dead}/{pairs} exactly zero"),
        ),
        CheckOutcome::new(
            "ciou center gradient survives on disjoint pairs",
            ciou_alive == pairs,
            format!("{ciou_alive}/{pairs} nonzero, smallest norm {min_center:.3e}"),
        ),
    ]
}

// ---- NMS ------------------------------------------------------------------

/// Quadratic suppression: repeatedly take the best remaining detection
/// (earliest on ties) and delete everything overlapping it.
pub fn nms_reference(dets: &[Detection], iou_threshold: f32) -> Vec<Detection> {
    let mut alive = vec![true; dets.len()];
    let mut out = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for (i, d) in dets.iter().enumerate() {
            if alive[i] && best.is_none_or(|b| d.score > dets[b].score) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        alive[b] = false;
        out.push(dets[b]);
        for (j, d) in dets.iter().enumerate() {
            if alive[j] && reference_iou(&dets[b].bbox, &d.bbox) > iou_threshold as f64 {
                alive[j] = false;
            }
        }
    }
    out
}

/// Up to `max_n` detections clustered around a few centers so that
/// suppression actually happens. Scores are quantized to force ties.
pub fn random_detections(rng: &mut impl Rng, max_n: usize) -> Vec<Detection> {
    let n = rng.gen_range(0..=max_n);
    let clusters: Vec<[f32; 2]> = (0..rng.gen_range(1..=5))
        .map(|_| [rng.gen_range(10.0..90.0), rng.gen_range(10.0..90.0)])
        .collect();
    (0..n)
        .map(|_| {
            let c = clusters[rng.gen_range(0..clusters.len())];
            let cx = c[0] + rng.gen_range(-6.0..6.0);
            let cy = c[1] + rng.gen_range(-6.0..6.0);
            let w = rng.gen_range(8.0..30.0);
            let h = rng.gen_range(4.0..12.0);
            let bbox = BoxCWH { cx, cy, w, h }.to_xyxy();
            let quad = Quad::new([[bbox.x1, bbox.y1], [bbox.x2, bbox.y1], [bbox.x2, bbox.y2], [bbox.x1, bbox.y2]])
                .expect("axis-aligned rectangle");
            Detection {
                score: rng.gen_range(1..=20) as f32 / 20.0,
                bbox,
                quad,
            }
        })
        .collect()
}

pub fn nms_suite(seed: u64, instances: usize) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agree = 0;
    let mut suppressed = 0;
    for _ in 0..instances {
        let dets = random_detections(&mut rng, 100);
        let got = nms(&dets, 0.4);
        if got == nms_reference(&dets, 0.4) {
            agree += 1;
        }
        suppressed += dets.len() - got.len();
    }
    vec![CheckOutcome::new(
        "nms vs brute force",
        agree == instances,
        format!("{agree}/{instances} identical, {suppressed} detections suppressed in total"),
    )]
}

// ---- anchors --------------------------------------------------------------

/// Closed-form anchor count: `A · Σ (size / stride)²`.
pub fn expected_anchor_count(size: usize, settings: &AnchorSettings) -> usize {
    settings.scales.len() * settings.strides.iter().map(|s| (size / s) * (size / s)).sum::<usize>()
}

/// Exhaustive labelling against an f64 IoU. Returns the threshold labels
/// and every anchor whose IoU is within rounding of the maximum: symmetric
/// anchor placements tie exactly, and f32 picks one of them arbitrarily.
pub fn assign_reference(anchors: &[BoxCWH], gt: &BoxXYXY) -> (Vec<Label>, Vec<usize>) {
    let ious: Vec<f64> = anchors.iter().map(|a| reference_iou(&a.to_xyxy(), gt)).collect();
    let labels = ious
        .iter()
        .map(|&v| {
            if v >= POSITIVE_IOU as f64 {
                Label::Positive
            } else if v < NEGATIVE_IOU as f64 {
                Label::Negative
            } else {
                Label::Ignore
            }
        })
        .collect();
    let max = ious.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let best = (0..ious.len()).filter(|&i| max - ious[i] <= 1e-6).collect();
    (labels, best)
}

/// Whether `labels` equal the reference with exactly one tied-best anchor
/// promoted to positive.
pub fn matches_reference(labels: &[Label], anchors: &[BoxCWH], gt: &BoxXYXY) -> bool {
    let (mut want, best) = assign_reference(anchors, gt);
    if labels.len() != want.len() {
        return false;
    }
    if best.iter().any(|&i| want[i] == Label::Positive) {
        return labels == want.as_slice();
    }
    best.iter().any(|&i| {
        let keep = want[i];
        want[i] = Label::Positive;
        let ok = labels == want.as_slice();
        want[i] = keep;
        ok
    })
}

pub fn anchor_suite(seed: u64, truths: usize) -> Vec<CheckOutcome> {
    let settings = AnchorSettings::default();
    let mut out = Vec::new();
    for size in [32, 64, 128] {
        let got = generate_anchors(size, &settings).map(|s| s.len()).unwrap_or(0);
        let want = expected_anchor_count(size, &settings);
        out.push(CheckOutcome::new(
            format!("anchor count at {size}"),
            got == want,
            format!("{got} generated, {want} expected"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let set = generate_anchors(64, &settings).expect("64 is divisible by every stride");
    let (mut agree, mut with_positive) = (0, 0);
    for _ in 0..truths {
        let gt = random_box(&mut rng, 0.0, 64.0, 2.0);
        let quad = Quad::new([[gt.x1, gt.y1], [gt.x2, gt.y1], [gt.x2, gt.y2], [gt.x1, gt.y2]]).expect("rectangle");
        let asg = assign(&set, &gt, &quad).expect("valid box");
        if matches_reference(&asg.labels, &set.anchors, &gt) {
            agree += 1;
        }
        if asg.positives() >= 1 {
            with_positive += 1;
        }
    }
    out.push(CheckOutcome::new(
        "assignment vs brute force",
        agree == truths,
        format!("{agree}/{truths} identical label vectors"),
    ));
    out.push(CheckOutcome::new(
        "every image has a positive",
        with_positive == truths,
        format!("{with_positive}/{truths}"),
    ));
    out
}

// ---- gradients ------------------------------------------------------------

fn rand_inputs(shapes: &[&[usize]], seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes.iter().map(|s| random_tensor(s, &mut rng)).collect()
}

/// A shuffled evenly spaced sequence: every pair of values is further apart
/// than the finite difference step, so max selection never flips.
fn spread_input(shape: &[usize], seed: u64) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut v: Vec<f32> = (0..n).map(|i| -1.0 + 2.0 * i as f32 / n as f32).collect();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Tensor::new(shape, v).expect("matching length")
}

fn graph_check<F>(name: &str, shapes: &[&[usize]], seed: u64, f: F) -> CheckOutcome
where
    F: Fn(&mut Graph, &[Var]) -> AdResult<Var>,
{
    graph_check_on(name, &rand_inputs(shapes, seed), seed, f)
}

fn graph_check_on<F>(name: &str, inputs: &[Tensor], seed: u64, f: F) -> CheckOutcome
where
    F: Fn(&mut Graph, &[Var]) -> AdResult<Var>,
{
    match check_graph_fn(inputs, seed, f) {
        Ok(checks) => summarize(name, &checks),
        Err(e) => CheckOutcome::new(name, false, e.to_string()),
    }
}

fn summarize(name: &str, checks: &[GradCheck]) -> CheckOutcome {
    let worst_rel = checks.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    let worst_cos = checks.iter().map(|c| c.cosine).fold(1.0, f64::min);
    CheckOutcome::new(
        name,
        checks.iter().all(GradCheck::passes),
        format!("rel err {worst_rel:.2e}, cosine {worst_cos:.6}"),
    )
}

/// Random head maps for `cfg`, scaled by `scale`.
pub fn random_maps(cfg: &NetConfig, batch: usize, scale: f32, seed: u64) -> PyramidMaps {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = cfg.anchors_per_cell;
    let mut mk = |c: usize, hw: usize| {
        let t = random_tensor(&[batch, c, hw, hw], &mut rng);
        Tensor::new(t.shape(), t.data().iter().map(|v| v * scale).collect()).expect("same shape")
    };
    let levels = cfg
        .level_sizes()
        .iter()
        .zip(LEVEL_STRIDES)
        .map(|(&hw, stride)| LevelMaps {
            stride,
            score: mk(a, hw),
            bbox: mk(4 * a, hw),
            corner: mk(8 * a, hw),
        })
        .collect();
    PyramidMaps {
        batch,
        anchors_per_cell: a,
        levels,
    }
}

fn map_tensors_mut(maps: &mut PyramidMaps) -> impl Iterator<Item = &mut Tensor> {
    maps.levels
        .iter_mut()
        .flat_map(|l| [&mut l.score, &mut l.bbox, &mut l.corner])
}

/// All head map values, score/bbox/corner per level.
pub fn flatten_maps(maps: &PyramidMaps) -> Vec<f64> {
    maps.levels
        .iter()
        .flat_map(|l| [&l.score, &l.bbox, &l.corner])
        .flat_map(|t| t.data().iter().map(|&v| v as f64))
        .collect()
}

pub fn unflatten_maps(template: &PyramidMaps, x: &[f64]) -> PyramidMaps {
    let mut out = template.clone();
    let mut values = x.iter();
    for t in map_tensors_mut(&mut out) {
        for v in t.data_mut() {
            *v = *values.next().expect("enough values") as f32;
        }
    }
    out
}

/// CIoU `alpha` of every positive anchor, per image.
pub fn positive_alphas(maps: &PyramidMaps, asg: &[Assignment], cfg: &NetConfig) -> Vec<Vec<f64>> {
    let anchors = anchors_for(cfg).expect("default anchor layout");
    asg.iter()
        .enumerate()
        .map(|(n, a)| {
            let preds = gather(maps, n, &anchors).expect("maps match anchors");
            a.targets
                .iter()
                .map(|t| {
                    let d = decode_prediction(&preds[t.anchor].bbox, &anchors.anchors[t.anchor]);
                    let d = [d.cx, d.cy, d.w, d.h].map(f64::from);
                    ciou_terms(d, cwh64(&a.gt_box), None).1
                })
                .collect()
        })
        .collect()
}

/// Batch total loss with every positive's CIoU `alpha` pinned, the function
/// whose exact gradient the backward pass computes.
pub fn frozen_alpha_total(
    maps: &PyramidMaps,
    asg: &[Assignment],
    cfg: &NetConfig,
    weights: &LossWeights,
    frozen: &[Vec<f64>],
) -> f64 {
    let anchors = anchors_for(cfg).expect("default anchor layout");
    let total = total_loss(maps, asg, &anchors, weights).expect("valid batch").breakdown.total as f64;
    let now = positive_alphas(maps, asg, cfg);
    let mut correction = 0.0;
    for (n, a) in asg.iter().enumerate() {
        let preds = gather(maps, n, &anchors).expect("maps match anchors");
        let k = weights.bbox as f64 / a.targets.len() as f64;
        for (i, t) in a.targets.iter().enumerate() {
            let d = decode_prediction(&preds[t.anchor].bbox, &anchors.anchors[t.anchor]);
            let d = [d.cx, d.cy, d.w, d.h].map(f64::from);
            let gt = cwh64(&a.gt_box);
            let free = ciou_terms(d, gt, None).0;
            let pinned = ciou_terms(d, gt, Some(frozen[n][i])).0;
            debug_assert_eq!(now[n][i], ciou_terms(d, gt, None).1);
            correction += k * (pinned - free);
        }
    }
    total + correction / asg.len() as f64
}

/// Assembled total loss against central differences on every head map
/// element, for a batch of synthetic images.
pub fn total_loss_check(seed: u64) -> CheckOutcome {
    let cfg = NetConfig::default();
    let anchors = anchors_for(&cfg).expect("default anchor layout");
    let preset = Preset::by_name("rotate").expect("built-in preset");
    let asg: Vec<Assignment> = (0..2)
        .map(|i| {
            let s = synth_sample(&preset, sample_seed(seed, i), cfg.input_size).expect("synthetic sample");
            assign(&anchors, &s.gt_box, &s.gt_quad).expect("valid annotation")
        })
        .collect();
    let w = LossWeights::default();
    let maps = random_maps(&cfg, 2, 0.3, seed);
    let out = total_loss(&maps, &asg, &anchors, &w).expect("valid batch");
    let analytic: Vec<f32> = out
        .grads
        .levels
        .iter()
        .flat_map(|(s, b, c)| s.iter().chain(b).chain(c).copied())
        .collect();
    let frozen = positive_alphas(&maps, &asg, &cfg);
    let numeric = numeric_gradient(
        |x| frozen_alpha_total(&unflatten_maps(&maps, x), &asg, &cfg, &w, &frozen),
        &flatten_maps(&maps),
        1e-3,
    );
    summarize("total_loss (head maps)", &[GradCheck::compare(&analytic, &numeric)])
}

fn ciou_gradient_check(seed: u64, pairs: usize) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    for _ in 0..pairs {
        let p = random_box(&mut rng, 0.0, 10.0, 0.5);
        let g = random_box(&mut rng, 0.0, 10.0, 0.5);
        let analytic = ciou_loss(&p, &g).expect("valid").grad;
        let (x, gt) = (cwh64(&p), cwh64(&g));
        let alpha = ciou_terms(x, gt, None).1;
        let f = |v: &[f64]| ciou_terms([v[0], v[1], v[2], v[3]], gt, Some(alpha)).0;
        checks.push(GradCheck::compare(&analytic, &numeric_gradient(f, &x, 1e-6)));
    }
    summarize("ciou_loss", &checks)
}

fn scalar_loss_check(name: &str, seed: u64, f: impl Fn(&[f32]) -> (f32, Vec<f32>), n: usize) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f32> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let (_, analytic) = f(&x);
    let x64: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let numeric = numeric_gradient(
        |v| f(&v.iter().map(|&t| t as f32).collect::<Vec<_>>()).0 as f64,
        &x64,
        1e-3,
    );
    summarize(name, &[GradCheck::compare(&analytic, &numeric)])
}

/// Every differentiable operation plus the assembled loss.
pub fn gradient_suite(seed: u64) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    for (stride, k) in [(1, 3), (2, 3), (1, 1), (2, 1)] {
        out.push(graph_check(
            &format!("conv2d k{k} s{stride}"),
            &[&[1, 2, 5, 5], &[3, 2, k, k], &[3]],
            seed + stride as u64 + k as u64,
            move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, k / 2),
        ));
    }
    for stride in [1, 2] {
        out.push(graph_check(
            &format!("depthwise_conv2d s{stride}"),
            &[&[2, 3, 5, 5], &[3, 1, 3, 3], &[3]],
            seed + 10 + stride as u64,
            move |g, v| g.depthwise_conv2d(v[0], v[1], Some(v[2]), stride, 1),
        ));
    }
    let s = seed + 20;
    out.push(graph_check("group_norm", &[&[1, 8, 4, 4], &[8], &[8]], s, |g, v| {
        g.group_norm(v[0], v[1], v[2], 4, 1e-5)
    }));
    let x: &[&[usize]] = &[&[2, 3, 4, 6]];
    out.push(graph_check("leaky_relu", x, s + 1, |g, v| g.leaky_relu(v[0], 0.1)));
    out.push(graph_check("sigmoid", x, s + 2, |g, v| g.sigmoid(v[0])));
    out.push(graph_check_on("max_pool2", &[spread_input(x[0], s + 3)], s + 3, |g, v| g.max_pool2(v[0])));
    out.push(graph_check("global_avg_pool", x, s + 4, |g, v| g.global_avg_pool(v[0])));
    out.push(graph_check_on("global_max_pool", &[spread_input(x[0], s + 5)], s + 5, |g, v| g.global_max_pool(v[0])));
    out.push(graph_check("channel_mean", x, s + 6, |g, v| g.channel_mean(v[0])));
    out.push(graph_check_on("channel_max", &[spread_input(x[0], s + 7)], s + 7, |g, v| g.channel_max(v[0])));
    out.push(graph_check("upsample_nearest2", &[&[1, 2, 2, 3]], s + 8, |g, v| {
        g.upsample_nearest2(v[0])
    }));
    out.push(graph_check("linear", &[&[3, 5], &[4, 5], &[4]], s + 9, |g, v| {
        g.linear(v[0], v[1], Some(v[2]))
    }));
    out.push(graph_check("add", &[&[2, 3, 2, 2], &[2, 3, 2, 2]], s + 10, |g, v| g.add(v[0], v[1])));
    out.push(graph_check("mul_broadcast channel", &[&[2, 3, 2, 2], &[2, 3, 1, 1]], s + 11, |g, v| {
        g.mul_broadcast(v[0], v[1])
    }));
    out.push(graph_check("mul_broadcast spatial", &[&[2, 3, 2, 2], &[2, 1, 2, 2]], s + 12, |g, v| {
        g.mul_broadcast(v[0], v[1])
    }));
    out.push(graph_check("concat_channels", &[&[2, 1, 2, 3], &[2, 2, 2, 3]], s + 13, |g, v| {
        g.concat_channels(&[v[0], v[1]])
    }));
    out.push(graph_check("reshape", &[&[2, 6]], s + 14, |g, v| {
        let r = g.reshape(v[0], &[2, 6, 1, 1])?;
        g.sigmoid(r)
    }));
    out.push(graph_check(
        "channel attention",
        &[&[2, 8, 3, 3], &[2, 8], &[2], &[8, 2], &[8]],
        s + 15,
        |g, v| {
            let gate = channel_attention(g, v[0], (v[1], v[2]), (v[3], v[4]))?;
            g.mul_broadcast(v[0], gate)
        },
    ));
    out.push(graph_check(
        "spatial attention",
        &[&[2, 4, 4, 4], &[1, 2, 3, 3], &[1]],
        s + 16,
        |g, v| {
            let gate = spatial_attention(g, v[0], (v[1], v[2]))?;
            g.mul_broadcast(v[0], gate)
        },
    ));
    out.push(ciou_gradient_check(seed + 40, 50));
    let labels: Vec<Label> = (0..24)
        .map(|i| match i % 6 {
            0 => Label::Positive,
            5 => Label::Ignore,
            _ => Label::Negative,
        })
        .collect();
    out.push(scalar_loss_check(
        "focal_loss",
        seed + 41,
        |x| focal_loss(x, &labels).expect("some anchor contributes"),
        24,
    ));
    let target: Vec<f32> = (0..16).map(|i| (i as f32 * 0.37).sin() * 2.0).collect();
    out.push(scalar_loss_check(
        "smooth_l1",
        seed + 42,
        |x| smooth_l1(x, &target, 1.0).expect("same length"),
        16,
    ));
    out.push(total_loss_check(seed + 43));
    out
}

// ---- CCPD -----------------------------------------------------------------

/// Random byte strings, plus single-byte mutations of a valid name, fed to
/// the parser. Passing means no panic and every accepted name re-serializes
/// to itself.
pub fn ccpd_fuzz(seed: u64, inputs: usize) -> CheckOutcome {
    const VALID: &str = "025-95_113-154&383_386&473-386&473_177&454_154&383_363&402-0_0_22_27_27_33_16-37-15.jpg";
    const ALPHABET: &[u8] = b"0123456789-_&.jpg";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut accepted = 0;
    let mut mismatched = 0;
    let result = std::panic::catch_unwind(move || {
        for i in 0..inputs {
            let bytes: Vec<u8> = match i % 3 {
                0 => (0..rng.gen_range(0..96)).map(|_| rng.gen()).collect(),
                1 => (0..rng.gen_range(0..96))
                    .map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())])
                    .collect(),
                _ => {
                    let mut b = VALID.as_bytes().to_vec();
                    for _ in 0..rng.gen_range(1..4) {
                        let at = rng.gen_range(0..b.len());
                        match rng.gen_range(0..3) {
                            0 => b[at] = ALPHABET[rng.gen_range(0..ALPHABET.len())],
                            1 => {
                                b.remove(at);
                            }
                            _ => b.insert(at, ALPHABET[rng.gen_range(0..ALPHABET.len())]),
                        }
                    }
                    b
                }
            };
            let parsed = crate::data::ccpd::parse_ccpd_bytes(&bytes);
            if let Ok(ann) = parsed {
                accepted += 1;
                if crate::data::serialize_ccpd_name(&ann).as_bytes() != bytes.as_slice() {
                    mismatched += 1;
                }
            }
        }
        (accepted, mismatched)
    });
    let round_trip = parse_ccpd_name(VALID)
        .map(|a| crate::data::serialize_ccpd_name(&a) == VALID)
        .unwrap_or(false);
    match result {
        Ok((acc, bad)) => CheckOutcome::new(
            "ccpd parser fuzz",
            bad == 0 && round_trip,
            format!("{inputs} inputs, {acc} accepted, {bad} failed to round-trip"),
        ),
        Err(_) => CheckOutcome::new("ccpd parser fuzz", false, "parser panicked"),
    }
}

/// Everything above at its acceptance sizes.
pub fn run_selfcheck(seed: u64) -> Vec<CheckOutcome> {
    let mut out = geometry_suite(seed, 1000);
    out.extend(gradient_suite(seed));
    out.extend(dead_gradient_suite(seed, 100));
    out.extend(nms_suite(seed, 200));
    out.extend(anchor_suite(seed, 100));
    out.push(ccpd_fuzz(seed, 100_000));
    out
}
