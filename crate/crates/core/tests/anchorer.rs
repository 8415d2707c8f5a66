use proptest::prelude::*;
use stlpd::anchorer::{assign, generate_anchors, AnchorSettings, Label};
use stlpd::check::{expected_anchor_count, matches_reference, reference_iou};
use stlpd::geom::{decode_box, decode_quad, BoxXYXY, Quad};

fn rect(b: &BoxXYXY) -> Quad {
    Quad::new([[b.x1, b.y1], [b.x2, b.y1], [b.x2, b.y2], [b.x1, b.y2]]).unwrap()
}

#[test]
fn counts_follow_the_formula() {
    let s = AnchorSettings::default();
    for size in [32, 64, 96, 128, 256] {
        let set = generate_anchors(size, &s).unwrap();
        assert_eq!(set.len(), expected_anchor_count(size, &s));
        assert_eq!(set.origins.len(), set.len());
    }
}

#[test]
fn layout_is_level_then_row_then_anchor() {
    let set = generate_anchors(64, &AnchorSettings::default()).unwrap();
    let mut k = 0;
    for (level, l) in set.levels.iter().enumerate() {
        assert_eq!(l.offset, k);
        for row in 0..l.height {
            for col in 0..l.width {
                for index in 0..set.per_cell {
                    let o = set.origins[k];
                    assert_eq!((o.level, o.row, o.col, o.index), (level, row, col, index));
                    assert_eq!(set.flat_index(level, row, col, index), k);
                    let a = set.anchors[k];
                    assert_eq!((a.cx, a.cy), ((col as f32 + 0.5) * l.stride as f32, (row as f32 + 0.5) * l.stride as f32));
                    k += 1;
                }
            }
        }
    }
    assert_eq!(k, set.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn assignment_matches_brute_force(x in 0.0f32..60.0, y in 0.0f32..60.0, w in 2.0f32..64.0, h in 2.0f32..40.0) {
        let set = generate_anchors(64, &AnchorSettings::default()).unwrap();
        let gt = BoxXYXY { x1: x, y1: y, x2: (x + w).min(64.0), y2: (y + h).min(64.0) };
        let a = assign(&set, &gt, &rect(&gt)).unwrap();
        prop_assert!(matches_reference(&a.labels, &set.anchors, &gt));
        prop_assert!(a.positives() >= 1);
        let positives: Vec<usize> = (0..set.len()).filter(|&i| a.labels[i] == Label::Positive).collect();
        prop_assert_eq!(positives, a.targets.iter().map(|t| t.anchor).collect::<Vec<_>>());
        for t in &a.targets {
            let anchor = &set.anchors[t.anchor];
            let b = decode_box(&t.bbox, anchor).unwrap().to_xyxy();
            prop_assert!(reference_iou(&b, &gt) > 0.999);
            prop_assert!(decode_quad(&t.quad, anchor).unwrap().mean_corner_distance(&a.gt_quad) < 1e-3);
        }
    }
}
