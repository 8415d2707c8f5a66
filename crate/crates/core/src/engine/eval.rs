//! Top-1 evaluation: an image counts as correct iff its best detection has
//! IoU above the threshold with the ground truth.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::infer::{detect, DetectConfig, Detection};
use super::{thread_count, EngineError};
use crate::data::Sample;
use crate::geom::iou_unchecked;
use crate::net::Model;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub iou_threshold: f32,
    pub detect: DetectConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.7,
            detect: DetectConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TagMetrics {
    pub total: usize,
    pub correct: usize,
    /// Images with at least one detection.
    pub detected: usize,
    /// Mean top-1 IoU over detected images.
    pub mean_iou: f64,
    /// Mean corner distance over the gt box diagonal, over detected images.
    pub mean_corner_error: f64,
}

impl TagMetrics {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub overall: TagMetrics,
    pub per_tag: BTreeMap<String, TagMetrics>,
}

struct Outcome {
    correct: bool,
    /// `(iou, corner error)` when something was detected.
    scores: Option<(f64, f64)>,
}

fn outcome(sample: &Sample, top: Option<&Detection>, iou_threshold: f32) -> Outcome {
    match top {
        None => Outcome {
            correct: false,
            scores: None,
        },
        Some(d) => {
            let iou = iou_unchecked(&d.bbox, &sample.gt_box);
            let corner = d.quad.mean_corner_distance(&sample.gt_quad) / sample.gt_box.diagonal();
            Outcome {
                correct: iou > iou_threshold,
                scores: Some((iou as f64, corner as f64)),
            }
        }
    }
}

/// Sums in sorted order so the result does not depend on dataset order.
fn sorted_mean(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

fn summarize<'a>(items: impl Iterator<Item = &'a Outcome>) -> TagMetrics {
    let (mut total, mut correct) = (0, 0);
    let (mut ious, mut corners) = (Vec::new(), Vec::new());
    for o in items {
        total += 1;
        correct += o.correct as usize;
        if let Some((i, c)) = o.scores {
            ious.push(i);
            corners.push(c);
        }
    }
    TagMetrics {
        total,
        correct,
        detected: ious.len(),
        mean_iou: sorted_mean(ious),
        mean_corner_error: sorted_mean(corners),
    }
}

/// Scores externally supplied top-1 detections, one slot per sample.
pub fn evaluate_detections(
    samples: &[Sample],
    top1: &[Option<Detection>],
    iou_threshold: f32,
) -> Result<Metrics, EngineError> {
    if samples.is_empty() {
        return Err(EngineError::EmptyDataset);
    }
    assert_eq!(samples.len(), top1.len(), "one detection slot per sample");
    let outcomes: Vec<Outcome> = samples
        .iter()
        .zip(top1)
        .map(|(s, d)| outcome(s, d.as_ref(), iou_threshold))
        .collect();
    let mut tags: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        tags.entry(&s.tag).or_default().push(i);
    }
    Ok(Metrics {
        overall: summarize(outcomes.iter()),
        per_tag: tags
            .into_iter()
            .map(|(t, idx)| (t.to_string(), summarize(idx.iter().map(|&i| &outcomes[i]))))
            .collect(),
    })
}

/// Top-1 detection per sample, fanned out over `STLPD_THREADS` workers.
pub fn top1_detections(model: &Model, samples: &[Sample], cfg: &DetectConfig) -> Result<Vec<Option<Detection>>, EngineError> {
    let size = model.config().input_size;
    for (index, s) in samples.iter().enumerate() {
        if s.image.width != size || s.image.height != size {
            return Err(EngineError::ImageSize {
                index,
                width: s.image.width,
                height: s.image.height,
                expected: size,
            });
        }
    }
    let run = |chunk: &[Sample]| -> Result<Vec<Option<Detection>>, EngineError> {
        chunk
            .iter()
            .map(|s| Ok(detect(model, &s.image, cfg)?.first().copied()))
            .collect()
    };
    let threads = thread_count().min(samples.len()).max(1);
    if threads == 1 {
        return run(samples);
    }
    let chunk = samples.len().div_ceil(threads);
    let parts: Vec<_> = std::thread::scope(|scope| {
        let handles: Vec<_> = samples.chunks(chunk).map(|c| scope.spawn(move || run(c))).collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(samples.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn evaluate(model: &Model, samples: &[Sample], cfg: &EvalConfig) -> Result<Metrics, EngineError> {
    if samples.is_empty() {
        return Err(EngineError::EmptyDataset);
    }
    let top1 = top1_detections(model, samples, &cfg.detect)?;
    evaluate_detections(samples, &top1, cfg.iou_threshold)
}

fn fmt_mean(v: f64) -> String {
    if v.is_nan() {
        "-".to_string()
    } else {
        format!("{v:.4}")
    }
}

/// TSV report: one row per tag, then `all`.
pub fn format_report(m: &Metrics) -> String {
    let mut out = String::from("tag\timages\tcorrect\taccuracy\tdetected\tmean_iou\tmean_corner_error\n");
    let rows = m.per_tag.iter().map(|(t, v)| (t.as_str(), v)).chain([("all", &m.overall)]);
    for (tag, v) in rows {
        let _ = writeln!(
            out,
            "{tag}\t{}\t{}\t{:.3}\t{}\t{}\t{}",
            v.total,
            v.correct,
            v.accuracy(),
            v.detected,
            fmt_mean(v.mean_iou),
            fmt_mean(v.mean_corner_error)
        );
    }
    out
}
