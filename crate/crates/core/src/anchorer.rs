//! Dense anchor grids over the pyramid levels and label assignment
//! against the single ground-truth plate.

use thiserror::Error;

use crate::geom::{self, BoxCWH, BoxOffsets, BoxXYXY, GeomError, Quad, QuadOffsets};

pub const POSITIVE_IOU: f32 = 0.5;
pub const NEGATIVE_IOU: f32 = 0.4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnchorError {
    #[error("input size {size} is not divisible by stride {stride}")]
    Indivisible { size: usize, stride: usize },
    #[error("anchor settings: {0}")]
    Settings(String),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSettings {
    pub strides: Vec<usize>,
    /// Anchor size multipliers relative to the stride; one anchor each.
    pub scales: Vec<f32>,
    /// Width over height.
    pub aspect: f32,
}

impl Default for AnchorSettings {
    fn default() -> Self {
        Self {
            strides: vec![8, 16, 32],
            scales: vec![3.0, 4.5],
            aspect: 2.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnchorOrigin {
    pub level: usize,
    pub row: usize,
    pub col: usize,
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelLayout {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    /// Flat index of the level's first anchor.
    pub offset: usize,
}

/// Anchors flattened level-major, then row-major over cells, then by
/// anchor index within the cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub anchors: Vec<BoxCWH>,
    pub origins: Vec<AnchorOrigin>,
    pub levels: Vec<LevelLayout>,
    pub per_cell: usize,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn flat_index(&self, level: usize, row: usize, col: usize, index: usize) -> usize {
        let l = &self.levels[level];
        l.offset + (row * l.width + col) * self.per_cell + index
    }
}

pub fn generate_anchors(input_size: usize, settings: &AnchorSettings) -> Result<AnchorSet, AnchorError> {
    if settings.scales.is_empty() || !(settings.aspect > 0.0) || settings.strides.is_empty() {
        return Err(AnchorError::Settings(format!("{settings:?}")));
    }
    let per_cell = settings.scales.len();
    let root = settings.aspect.sqrt();
    let mut anchors = Vec::new();
    let mut origins = Vec::new();
    let mut levels = Vec::new();
    for (level, &stride) in settings.strides.iter().enumerate() {
        if stride == 0 || !input_size.is_multiple_of(stride) {
            return Err(AnchorError::Indivisible {
                size: input_size,
                stride,
            });
        }
        let cells = input_size / stride;
        levels.push(LevelLayout {
            stride,
            height: cells,
            width: cells,
            offset: anchors.len(),
        });
        let s = stride as f32;
        for row in 0..cells {
            for col in 0..cells {
                for (index, &k) in settings.scales.iter().enumerate() {
                    anchors.push(BoxCWH {
                        cx: s * (col as f32 + 0.5),
                        cy: s * (row as f32 + 0.5),
                        w: k * s * root,
                        h: k * s / root,
                    });
                    origins.push(AnchorOrigin {
                        level,
                        row,
                        col,
                        index,
                    });
                }
            }
        }
    }
    Ok(AnchorSet {
        anchors,
        origins,
        levels,
        per_cell,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub anchor: usize,
    pub bbox: BoxOffsets,
    pub quad: QuadOffsets,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub labels: Vec<Label>,
    /// Encoded targets for the positive anchors, in ascending anchor order.
    pub targets: Vec<Target>,
    pub gt_box: BoxXYXY,
    pub gt_quad: Quad,
}

impl Assignment {
    pub fn positives(&self) -> usize {
        self.targets.len()
    }
}

/// IoU >= 0.5 is positive, < 0.4 negative, otherwise ignored. The single
/// best-overlapping anchor (lowest index on ties) is always positive.
pub fn assign(anchors: &AnchorSet, gt_box: &BoxXYXY, gt_quad: &Quad) -> Result<Assignment, AnchorError> {
    gt_box.validate()?;
    let gt_cwh = gt_box.to_cwh();
    let mut labels = Vec::with_capacity(anchors.len());
    let mut best = (0usize, f32::NEG_INFINITY);
    for (i, a) in anchors.anchors.iter().enumerate() {
        let v = geom::iou_unchecked(&a.to_xyxy(), gt_box);
        if v > best.1 {
            best = (i, v);
        }
        labels.push(if v >= POSITIVE_IOU {
            Label::Positive
        } else if v < NEGATIVE_IOU {
            Label::Negative
        } else {
            Label::Ignore
        });
    }
    if let Some(l) = labels.get_mut(best.0) {
        *l = Label::Positive;
    }
    let mut targets = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        if *l == Label::Positive {
            let a = &anchors.anchors[i];
            targets.push(Target {
                anchor: i,
                bbox: geom::encode_box(&gt_cwh, a)?,
                quad: geom::encode_quad(gt_quad, a)?,
            });
        }
    }
    Ok(Assignment {
        labels,
        targets,
        gt_box: *gt_box,
        gt_quad: *gt_quad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_centers() {
        let s = AnchorSettings::default();
        assert_eq!(generate_anchors(64, &s).unwrap().len(), 168);
        assert_eq!(generate_anchors(32, &s).unwrap().len(), 42);
        let a = generate_anchors(64, &s).unwrap();
        assert_eq!((a.anchors[0].cx, a.anchors[0].cy), (4.0, 4.0));
        assert!(matches!(
            generate_anchors(40, &s),
            Err(AnchorError::Indivisible { size: 40, stride: 16 })
        ));
    }

    #[test]
    fn exact_anchor_match_is_positive_with_zero_offsets() {
        let set = generate_anchors(64, &AnchorSettings::default()).unwrap();
        let i = 37;
        let b = set.anchors[i].to_xyxy();
        let q = Quad::new([[b.x1, b.y1], [b.x2, b.y1], [b.x2, b.y2], [b.x1, b.y2]]).unwrap();
        let asg = assign(&set, &b, &q).unwrap();
        assert_eq!(asg.labels[i], Label::Positive);
        let t = asg.targets.iter().find(|t| t.anchor == i).unwrap();
        assert_eq!(
            t.bbox,
            BoxOffsets {
                tx: 0.,
                ty: 0.,
                tw: 0.,
                th: 0.
            }
        );
    }

    #[test]
    fn low_overlap_still_gets_one_forced_positive() {
        let set = generate_anchors(64, &AnchorSettings::default()).unwrap();
        // a small square plate: best IoU is far below 0.4
        let b = BoxXYXY::new(30., 30., 34., 34.).unwrap();
        let q = Quad::new([[30., 30.], [34., 30.], [34., 34.], [30., 34.]]).unwrap();
        let asg = assign(&set, &b, &q).unwrap();
        assert_eq!(asg.positives(), 1);
        assert_eq!(asg.labels.iter().filter(|l| **l == Label::Ignore).count(), 0);
    }

    #[test]
    fn flat_index_round_trip() {
        let set = generate_anchors(128, &AnchorSettings::default()).unwrap();
        for (i, o) in set.origins.iter().enumerate() {
            assert_eq!(set.flat_index(o.level, o.row, o.col, o.index), i);
        }
    }
}
