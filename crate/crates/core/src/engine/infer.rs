//! Inference: decode, threshold, NMS.

use super::{anchors_for, EngineError};
use crate::anchorer::AnchorSet;
use crate::data::{images_to_tensor, Image};
use crate::geom::{clamp_box, decode_quad, iou_unchecked, BoxXYXY, Quad, QuadOffsets};
use crate::loss::{decode_prediction, gather};
use crate::net::{Model, PyramidMaps};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub score: f32,
    pub bbox: BoxXYXY,
    pub quad: Quad,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectConfig {
    pub score_threshold: f32,
    pub nms_iou: f32,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.02,
            nms_iou: 0.4,
        }
    }
}

/// Greedy NMS by descending score; ties keep input order. A detection is
/// dropped if its IoU with any kept one exceeds `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f32) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = &dets[i];
        if kept.iter().all(|k| iou_unchecked(&k.bbox, &d.bbox) <= iou_threshold) {
            kept.push(*d);
        }
    }
    kept
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Detections for image `n` of a forward pass, before NMS.
pub fn decode_maps(
    maps: &PyramidMaps,
    n: usize,
    anchors: &AnchorSet,
    size: usize,
    cfg: &DetectConfig,
) -> Result<Vec<Detection>, EngineError> {
    let s = size as f32;
    let mut out = Vec::new();
    for (p, anchor) in gather(maps, n, anchors)?.iter().zip(&anchors.anchors) {
        let score = sigmoid(p.logit);
        if !(score > cfg.score_threshold) {
            continue;
        }
        let Ok(bbox) = clamp_box(&decode_prediction(&p.bbox, anchor).to_xyxy(), s, s) else {
            continue;
        };
        let Ok(quad) = decode_quad(&QuadOffsets(p.quad), anchor) else {
            continue;
        };
        let Ok(quad) = Quad::new(quad.points().map(|[x, y]| [x.clamp(0.0, s), y.clamp(0.0, s)])) else {
            continue;
        };
        out.push(Detection { score, bbox, quad });
    }
    Ok(out)
}

/// Runs the model on one image. Output is sorted by descending score.
pub fn detect(model: &Model, image: &Image, cfg: &DetectConfig) -> Result<Vec<Detection>, EngineError> {
    let size = model.config().input_size;
    if image.width != size || image.height != size {
        return Err(EngineError::ImageSize {
            index: 0,
            width: image.width,
            height: image.height,
            expected: size,
        });
    }
    let anchors = anchors_for(model.config())?;
    let maps = model.predict(&images_to_tensor(&[image]))?;
    let raw = decode_maps(&maps, 0, &anchors, size, cfg)?;
    Ok(nms(&raw, cfg.nms_iou))
}
