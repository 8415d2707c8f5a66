//! Multi-task detection objective: focal classification over non-ignored
//! anchors, CIoU on decoded positive boxes, smooth-L1 on positive corner
//! offsets.

use thiserror::Error;

use crate::anchorer::{AnchorSet, Assignment, Label};
use crate::geom::{self, BoxCWH, GeomError};
use crate::net::PyramidMaps;

pub const FOCAL_ALPHA: f32 = 0.25;
pub const FOCAL_GAMMA: f32 = 2.0;
pub const SMOOTH_L1_BETA: f32 = 1.0;
/// Log-size offsets are clamped before decoding so `exp` stays finite.
pub const MAX_LOG_SCALE: f32 = 8.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("every anchor is ignored; the classification term cannot be normalized")]
    AllIgnored,
    #[error("assignment has no positive anchor")]
    NoPositives,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub cls: f32,
    pub bbox: f32,
    pub corner: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            bbox: 2.0,
            corner: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub cls: f32,
    pub bbox: f32,
    pub corner: f32,
    pub total: f32,
}

impl LossBreakdown {
    fn assemble(cls: f64, bbox: f64, corner: f64, w: &LossWeights) -> Self {
        let total = w.cls as f64 * cls + w.bbox as f64 * bbox + w.corner as f64 * corner;
        Self {
            cls: cls as f32,
            bbox: bbox as f32,
            corner: corner as f32,
            total: total as f32,
        }
    }

    /// Name of the first non-finite component, if any.
    pub fn non_finite_component(&self) -> Option<&'static str> {
        [
            ("cls", self.cls),
            ("box", self.bbox),
            ("corner", self.corner),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

fn softplus(z: f32) -> f32 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Focal loss for one logit; returns `(value, d value / d logit)`.
fn focal_single(x: f32, positive: bool) -> (f32, f32) {
    let p = sigmoid(x);
    let (a, g) = (FOCAL_ALPHA, FOCAL_GAMMA);
    if positive {
        let log_p = -softplus(-x);
        let m = (1.0 - p).powf(g);
        (-a * m * log_p, a * m * (g * p * log_p - (1.0 - p)))
    } else {
        let log_q = -softplus(x);
        let m = p.powf(g);
        ((a - 1.0) * m * log_q, (1.0 - a) * m * (p - g * (1.0 - p) * log_q))
    }
}

/// Focal loss summed over non-ignored anchors and divided by
/// `max(1, #positives)`. Returns the value and per-logit gradient
/// (zero at ignored anchors).
pub fn focal_loss(logits: &[f32], labels: &[Label]) -> Result<(f32, Vec<f32>), LossError> {
    if logits.len() != labels.len() {
        return Err(LossError::Shape(format!("{} logits vs {} labels", logits.len(), labels.len())));
    }
    let positives = labels.iter().filter(|l| **l == Label::Positive).count();
    if labels.iter().all(|l| *l == Label::Ignore) {
        return Err(LossError::AllIgnored);
    }
    let norm = positives.max(1) as f32;
    let mut sum = 0.0f64;
    let mut grad = vec![0.0; logits.len()];
    for (i, (&x, l)) in logits.iter().zip(labels).enumerate() {
        if *l == Label::Ignore {
            continue;
        }
        let (v, d) = focal_single(x, *l == Label::Positive);
        sum += v as f64;
        grad[i] = d / norm;
    }
    Ok(((sum / norm as f64) as f32, grad))
}

/// Elementwise smooth-L1, averaged over all elements.
pub fn smooth_l1(pred: &[f32], target: &[f32], beta: f32) -> Result<(f32, Vec<f32>), LossError> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(LossError::Shape(format!("{} predictions vs {} targets", pred.len(), target.len())));
    }
    let n = pred.len() as f32;
    let mut sum = 0.0f64;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let x = p - t;
            if x.abs() < beta {
                sum += (0.5 * x * x / beta) as f64;
                x / beta / n
            } else {
                sum += (x.abs() - 0.5 * beta) as f64;
                x.signum() / n
            }
        })
        .collect();
    Ok(((sum / n as f64) as f32, grad))
}

/// Head outputs for one anchor.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AnchorPrediction {
    pub logit: f32,
    pub bbox: [f32; 4],
    pub quad: [f32; 8],
}

/// Gradient of the image loss with respect to one anchor's outputs.
pub type AnchorGrad = AnchorPrediction;

fn map_index(c: usize, ch: usize, h: usize, w: usize, n: usize, row: usize, col: usize) -> usize {
    ((n * ch + c) * h + row) * w + col
}

fn check_layout(maps: &PyramidMaps, anchors: &AnchorSet) -> Result<(), LossError> {
    if maps.levels.len() != anchors.levels.len() || maps.anchors_per_cell != anchors.per_cell {
        return Err(LossError::Shape(format!(
            "{} map levels x {} anchors/cell vs {} anchor levels x {}",
            maps.levels.len(),
            maps.anchors_per_cell,
            anchors.levels.len(),
            anchors.per_cell
        )));
    }
    let a = maps.anchors_per_cell;
    for (lm, la) in maps.levels.iter().zip(&anchors.levels) {
        let want = [maps.batch, a, la.height, la.width];
        if lm.score.shape() != want
            || lm.bbox.shape() != [maps.batch, 4 * a, la.height, la.width]
            || lm.corner.shape() != [maps.batch, 8 * a, la.height, la.width]
        {
            return Err(LossError::Shape(format!(
                "level with stride {} has score map {:?}, expected {want:?}",
                la.stride,
                lm.score.shape()
            )));
        }
    }
    Ok(())
}

/// Per-anchor predictions for image `n`, in anchor-set order.
pub fn gather(maps: &PyramidMaps, n: usize, anchors: &AnchorSet) -> Result<Vec<AnchorPrediction>, LossError> {
    check_layout(maps, anchors)?;
    let a = maps.anchors_per_cell;
    let mut out = vec![AnchorPrediction::default(); anchors.len()];
    for (lm, la) in maps.levels.iter().zip(&anchors.levels) {
        let (h, w) = (la.height, la.width);
        let (s, b, c) = (lm.score.data(), lm.bbox.data(), lm.corner.data());
        for row in 0..h {
            for col in 0..w {
                for ai in 0..a {
                    let p = &mut out[la.offset + (row * w + col) * a + ai];
                    p.logit = s[map_index(ai, a, h, w, n, row, col)];
                    for k in 0..4 {
                        p.bbox[k] = b[map_index(ai * 4 + k, 4 * a, h, w, n, row, col)];
                    }
                    for k in 0..8 {
                        p.quad[k] = c[map_index(ai * 8 + k, 8 * a, h, w, n, row, col)];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradient buffers shaped like each level's `(score, bbox, corner)` maps.
#[derive(Debug, Clone, PartialEq)]
pub struct MapGrads {
    pub levels: Vec<(Vec<f32>, Vec<f32>, Vec<f32>)>,
}

impl MapGrads {
    fn zeros_like(maps: &PyramidMaps) -> Self {
        Self {
            levels: maps
                .levels
                .iter()
                .map(|l| {
                    (
                        vec![0.0; l.score.numel()],
                        vec![0.0; l.bbox.numel()],
                        vec![0.0; l.corner.numel()],
                    )
                })
                .collect(),
        }
    }

    fn scatter(&mut self, maps: &PyramidMaps, n: usize, anchors: &AnchorSet, grads: &[AnchorGrad], scale: f32) {
        let a = maps.anchors_per_cell;
        for (buf, la) in self.levels.iter_mut().zip(&anchors.levels) {
            let (h, w) = (la.height, la.width);
            for row in 0..h {
                for col in 0..w {
                    for ai in 0..a {
                        let g = &grads[la.offset + (row * w + col) * a + ai];
                        buf.0[map_index(ai, a, h, w, n, row, col)] += scale * g.logit;
                        for k in 0..4 {
                            buf.1[map_index(ai * 4 + k, 4 * a, h, w, n, row, col)] += scale * g.bbox[k];
                        }
                        for k in 0..8 {
                            buf.2[map_index(ai * 8 + k, 8 * a, h, w, n, row, col)] += scale * g.quad[k];
                        }
                    }
                }
            }
        }
    }
}

/// Decodes predicted offsets against an anchor, clamping log-scales.
pub fn decode_prediction(bbox: &[f32; 4], anchor: &BoxCWH) -> BoxCWH {
    BoxCWH {
        cx: anchor.cx + bbox[0] * anchor.w,
        cy: anchor.cy + bbox[1] * anchor.h,
        w: anchor.w * bbox[2].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp(),
        h: anchor.h * bbox[3].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp(),
    }
}

/// Loss of one image given flat per-anchor predictions aligned with
/// `anchors` and `assignment.labels`.
pub fn anchor_loss(
    preds: &[AnchorPrediction],
    anchors: &[BoxCWH],
    assignment: &Assignment,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Vec<AnchorGrad>), LossError> {
    if preds.len() != anchors.len() || preds.len() != assignment.labels.len() {
        return Err(LossError::Shape(format!(
            "{} predictions, {} anchors, {} labels",
            preds.len(),
            anchors.len(),
            assignment.labels.len()
        )));
    }
    if assignment.targets.is_empty() {
        return Err(LossError::NoPositives);
    }
    let logits: Vec<f32> = preds.iter().map(|p| p.logit).collect();
    let (cls, cls_grad) = focal_loss(&logits, &assignment.labels)?;
    let mut grads: Vec<AnchorGrad> = cls_grad
        .iter()
        .map(|&g| AnchorGrad {
            logit: weights.cls * g,
            ..Default::default()
        })
        .collect();

    let npos = assignment.targets.len() as f32;
    let mut box_sum = 0.0f64;
    let mut corner_pred = Vec::with_capacity(8 * assignment.targets.len());
    let mut corner_target = Vec::with_capacity(8 * assignment.targets.len());
    for t in &assignment.targets {
        let p = &preds[t.anchor];
        let a = &anchors[t.anchor];
        let dec = decode_prediction(&p.bbox, a);
        let l = geom::ciou_loss(&dec.to_xyxy(), &assignment.gt_box)?;
        box_sum += l.value as f64;
        let scale = weights.bbox / npos;
        let g = &mut grads[t.anchor];
        let in_range = |v: f32| if v.abs() < MAX_LOG_SCALE { 1.0 } else { 0.0 };
        g.bbox[0] += scale * l.grad[0] * a.w;
        g.bbox[1] += scale * l.grad[1] * a.h;
        g.bbox[2] += scale * l.grad[2] * dec.w * in_range(p.bbox[2]);
        g.bbox[3] += scale * l.grad[3] * dec.h * in_range(p.bbox[3]);
        corner_pred.extend_from_slice(&p.quad);
        corner_target.extend_from_slice(&t.quad.0);
    }
    let (corner, corner_grad) = smooth_l1(&corner_pred, &corner_target, SMOOTH_L1_BETA)?;
    for (t, cg) in assignment.targets.iter().zip(corner_grad.chunks(8)) {
        for (g, c) in grads[t.anchor].quad.iter_mut().zip(cg) {
            *g += weights.corner * c;
        }
    }
    let bbox = box_sum / npos as f64;
    Ok((LossBreakdown::assemble(cls as f64, bbox, corner as f64, weights), grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Mean over the batch.
    pub breakdown: LossBreakdown,
    pub per_image: Vec<LossBreakdown>,
    /// Gradient of the batch-mean total with respect to every head map.
    pub grads: MapGrads,
}

/// Batch loss: the mean of per-image losses, with gradients into the
/// head maps.
pub fn total_loss(
    maps: &PyramidMaps,
    assignments: &[Assignment],
    anchors: &AnchorSet,
    weights: &LossWeights,
) -> Result<LossOutput, LossError> {
    if assignments.len() != maps.batch {
        return Err(LossError::Shape(format!(
            "{} assignments for a batch of {}",
            assignments.len(),
            maps.batch
        )));
    }
    let mut grads = MapGrads::zeros_like(maps);
    let mut per_image = Vec::with_capacity(maps.batch);
    let scale = 1.0 / maps.batch as f32;
    let mut sums = [0.0f64; 4];
    for (n, asg) in assignments.iter().enumerate() {
        let preds = gather(maps, n, anchors)?;
        let (b, g) = anchor_loss(&preds, &anchors.anchors, asg, weights)?;
        grads.scatter(maps, n, anchors, &g, scale);
        for (s, v) in sums.iter_mut().zip([b.cls, b.bbox, b.corner, b.total]) {
            *s += v as f64;
        }
        per_image.push(b);
    }
    let k = maps.batch as f64;
    Ok(LossOutput {
        breakdown: LossBreakdown {
            cls: (sums[0] / k) as f32,
            bbox: (sums[1] / k) as f32,
            corner: (sums[2] / k) as f32,
            total: (sums[3] / k) as f32,
        },
        per_image,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_fixtures() {
        let (v, _) = focal_loss(&[0.0], &[Label::Positive]).unwrap();
        assert!((v - 0.043_322).abs() < 1e-6, "{v}");
        let logit_09 = (0.9f32 / 0.1).ln();
        let (v, _) = focal_loss(&[logit_09], &[Label::Negative]).unwrap();
        assert!((v - 1.398_82).abs() < 1e-4, "{v}");
        let (v, _) = focal_loss(&[30.0], &[Label::Positive]).unwrap();
        assert!(v < 1e-12);
        assert_eq!(focal_loss(&[0.0, 1.0], &[Label::Ignore, Label::Ignore]), Err(LossError::AllIgnored));
    }

    #[test]
    fn focal_normalizes_by_positive_count() {
        let labels = [Label::Positive, Label::Positive, Label::Negative, Label::Ignore];
        let (v, g) = focal_loss(&[0.0, 0.0, -50.0, 3.0], &labels).unwrap();
        assert!((v - 0.043_322).abs() < 1e-6);
        assert_eq!(g[3], 0.0);
    }

    #[test]
    fn focal_gradient_matches_finite_differences() {
        for &x in &[-3.0f32, -0.7, 0.0, 0.4, 2.5] {
            for pos in [true, false] {
                let (_, d) = focal_single(x, pos);
                let h = 1e-3f64;
                let f = |x: f64| focal_single(x as f32, pos).0 as f64;
                let fd = (f(x as f64 + h) - f(x as f64 - h)) / (2.0 * h);
                assert!((d as f64 - fd).abs() < 1e-3 * (1.0 + fd.abs()), "x={x} pos={pos}: {d} vs {fd}");
            }
        }
    }

    #[test]
    fn smooth_l1_fixtures() {
        assert_eq!(smooth_l1(&[0.0], &[0.0], 1.0).unwrap().0, 0.0);
        assert_eq!(smooth_l1(&[0.5], &[0.0], 1.0).unwrap().0, 0.125);
        assert_eq!(smooth_l1(&[2.0], &[0.0], 1.0).unwrap().0, 1.5);
        assert!(smooth_l1(&[], &[], 1.0).is_err());
    }
}
