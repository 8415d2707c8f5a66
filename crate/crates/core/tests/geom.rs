use proptest::prelude::*;
use stlpd::check::{raster_iou, reference_iou, RASTER_PITCH};
use stlpd::geom::{
    ciou_loss, ciou_value, clamp_box, decode_box, decode_quad, encode_box, encode_quad, iou, quad_to_aabb, BoxCWH,
    BoxXYXY, Quad,
};

fn arb_box() -> impl Strategy<Value = BoxXYXY> {
    (0.0f32..9.0, 0.0f32..9.0, 0.05f32..5.0, 0.05f32..5.0).prop_map(|(x, y, w, h)| BoxXYXY {
        x1: x,
        y1: y,
        x2: (x + w).min(10.0),
        y2: (y + h).min(10.0),
    })
}

fn arb_anchor() -> impl Strategy<Value = BoxCWH> {
    (0.0f32..64.0, 0.0f32..64.0, 2.0f32..60.0, 2.0f32..30.0).prop_map(|(cx, cy, w, h)| BoxCWH { cx, cy, w, h })
}

fn arb_quad() -> impl Strategy<Value = Quad> {
    (4.0f32..60.0, 4.0f32..60.0, 3.0f32..20.0, 2.0f32..10.0, -0.3f32..0.3).prop_map(|(cx, cy, w, h, t)| {
        let (s, c) = t.sin_cos();
        let pts = [[-w, -h], [w, -h], [w, h], [-w, h]].map(|[x, y]| [cx + x * c - y * s, cy + x * s + y * c]);
        Quad::new(pts).unwrap()
    })
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let ab = iou(&a, &b).unwrap();
        prop_assert_eq!(ab, iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou(&a, &a).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn iou_agrees_with_oracles(a in arb_box(), b in arb_box()) {
        let v = iou(&a, &b).unwrap() as f64;
        prop_assert!((v - reference_iou(&a, &b)).abs() < 1e-5);
        prop_assert!((v - raster_iou(&a, &b, 0.0, 10.0, RASTER_PITCH)).abs() <= 0.01);
    }

    #[test]
    fn iou_is_translation_invariant(a in arb_box(), b in arb_box(), dx in -3.0f32..3.0, dy in -3.0f32..3.0) {
        let moved = iou(&a.translate(dx, dy), &b.translate(dx, dy)).unwrap();
        prop_assert!((moved - iou(&a, &b).unwrap()).abs() < 1e-4);
    }

    #[test]
    fn ciou_bounds(a in arb_box(), b in arb_box()) {
        let l = ciou_loss(&a, &b).unwrap();
        prop_assert!(l.value.is_finite() && l.grad.iter().all(|g| g.is_finite()));
        // 1 - IoU <= 1, rho^2/c^2 < 1 and alpha*v = v^2/(1 - IoU + v) <= 1/2.
        prop_assert!(l.value >= -1e-6 && l.value < 2.5);
        prop_assert!(l.value + 1e-5 >= 1.0 - iou(&a, &b).unwrap());
        let c = |b: &BoxXYXY| { let c = b.to_cwh(); [c.cx, c.cy, c.w, c.h].map(f64::from) };
        prop_assert!((l.value as f64 - ciou_value(c(&a), c(&b))).abs() < 1e-4);
    }

    #[test]
    fn box_codec_round_trips(gt in arb_anchor(), anchor in arb_anchor()) {
        let back = decode_box(&encode_box(&gt, &anchor).unwrap(), &anchor).unwrap();
        for (x, y) in [(back.cx, gt.cx), (back.cy, gt.cy), (back.w, gt.w), (back.h, gt.h)] {
            prop_assert!((x - y).abs() <= 1e-4 * y.abs().max(1.0));
        }
    }

    #[test]
    fn quad_codec_round_trips(q in arb_quad(), anchor in arb_anchor()) {
        let back = decode_quad(&encode_quad(&q, &anchor).unwrap(), &anchor).unwrap();
        prop_assert!(back.mean_corner_distance(&q) < 1e-3);
    }

    #[test]
    fn quad_hull_contains_corners(q in arb_quad()) {
        let h = quad_to_aabb(&q);
        for p in q.points() {
            prop_assert!(p[0] >= h.x1 && p[0] <= h.x2 && p[1] >= h.y1 && p[1] <= h.y2);
        }
    }

    #[test]
    fn clamped_boxes_stay_inside(a in arb_box(), w in 1.0f32..10.0, h in 1.0f32..10.0) {
        if let Ok(c) = clamp_box(&a, w, h) {
            prop_assert!(c.x1 >= 0.0 && c.y1 >= 0.0 && c.x2 <= w && c.y2 <= h);
            prop_assert!(c.x1 < c.x2 && c.y1 < c.y2);
        }
    }
}
