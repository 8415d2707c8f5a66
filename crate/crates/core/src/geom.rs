//! Box and quad geometry, the IoU/CIoU loss family, and anchor-relative
//! encoding of boxes and plate corners.
//!
//! Loss gradients are always taken with respect to the predicted box in
//! `(cx, cy, w, h)` form. The fixed Jacobian from corner form is
//! `d/dcx = d/dx1 + d/dx2`, `d/dw = (d/dx2 - d/dx1) / 2` (same for y/h).

use num_traits::Float;
use thiserror::Error;

/// Guards the α denominator and the enclosing-box diagonal only.
pub const CIOU_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeomError {
    #[error("degenerate box ({x1}, {y1}, {x2}, {y2}): extents must be positive and finite")]
    DegenerateBox { x1: f32, y1: f32, x2: f32, y2: f32 },
    #[error("non-positive size {w}x{h}")]
    NonPositiveSize { w: f32, h: f32 },
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("quad hull is degenerate")]
    DegenerateQuad,
    #[error("box lies entirely outside the {width}x{height} image")]
    EmptyAfterClamp { width: f32, height: f32 },
}

/// Corner-form axis-aligned box in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxXYXY {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

/// Center-form axis-aligned box in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxCWH {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxOffsets {
    pub tx: f32,
    pub ty: f32,
    pub tw: f32,
    pub th: f32,
}

/// Per-corner `(x - ax) / aw, (y - ay) / ah`, in quad corner order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadOffsets(pub [f32; 8]);

impl BoxXYXY {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Result<Self, GeomError> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if !finite || self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(GeomError::DegenerateBox {
                x1: self.x1,
                y1: self.y1,
                x2: self.x2,
                y2: self.y2,
            });
        }
        Ok(())
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f32 {
        self.width() * self.height()
    }

    pub fn diagonal(&self) -> f32 {
        self.width().hypot(self.height())
    }

    pub fn to_cwh(&self) -> BoxCWH {
        BoxCWH {
            cx: 0.5 * (self.x1 + self.x2),
            cy: 0.5 * (self.y1 + self.y2),
            w: self.x2 - self.x1,
            h: self.y2 - self.y1,
        }
    }

    pub fn translate(&self, dx: f32, dy: f32) -> Self {
        Self {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    pub fn as_array(&self) -> [f32; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl BoxCWH {
    pub fn new(cx: f32, cy: f32, w: f32, h: f32) -> Result<Self, GeomError> {
        let b = Self { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(GeomError::NonFinite);
        }
        if !(self.w > 0.0 && self.h > 0.0 && self.w.is_finite() && self.h.is_finite()) {
            return Err(GeomError::NonPositiveSize { w: self.w, h: self.h });
        }
        Ok(())
    }

    pub fn to_xyxy(&self) -> BoxXYXY {
        BoxXYXY {
            x1: self.cx - 0.5 * self.w,
            y1: self.cy - 0.5 * self.h,
            x2: self.cx + 0.5 * self.w,
            y2: self.cy + 0.5 * self.h,
        }
    }
}

/// Four plate corners in canonical order: top-left, top-right,
/// bottom-right, bottom-left.
///
/// Canonical order is clockwise on screen (y pointing down) starting from
/// the corner with the smallest `x + y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quad {
    pts: [[f32; 2]; 4],
}

impl Quad {
    /// Canonicalizes the given corners. Fails if any coordinate is
    /// non-finite or the axis-aligned hull has zero extent.
    pub fn new(points: [[f32; 2]; 4]) -> Result<Self, GeomError> {
        Ok(Self {
            pts: canonical_order(points)?.0,
        })
    }

    /// Canonicalizes and also reports, for each input position, the
    /// canonical slot it landed in.
    pub fn with_order(points: [[f32; 2]; 4]) -> Result<(Self, [usize; 4]), GeomError> {
        let (pts, order) = canonical_order(points)?;
        Ok((Self { pts }, order))
    }

    pub fn points(&self) -> &[[f32; 2]; 4] {
        &self.pts
    }

    pub fn flat(&self) -> [f32; 8] {
        let mut out = [0.0; 8];
        for (i, p) in self.pts.iter().enumerate() {
            out[2 * i] = p[0];
            out[2 * i + 1] = p[1];
        }
        out
    }

    pub fn from_flat(v: [f32; 8]) -> Result<Self, GeomError> {
        Self::new([[v[0], v[1]], [v[2], v[3]], [v[4], v[5]], [v[6], v[7]]])
    }

    /// Mean Euclidean distance between corresponding corners.
    pub fn mean_corner_distance(&self, other: &Quad) -> f32 {
        self.pts
            .iter()
            .zip(other.pts.iter())
            .map(|(a, b)| (a[0] - b[0]).hypot(a[1] - b[1]))
            .sum::<f32>()
            / 4.0
    }
}

fn canonical_order(points: [[f32; 2]; 4]) -> Result<([[f32; 2]; 4], [usize; 4]), GeomError> {
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(GeomError::NonFinite);
    }
    let hull = hull_of(&points);
    if hull.x1 >= hull.x2 || hull.y1 >= hull.y2 {
        return Err(GeomError::DegenerateQuad);
    }
    let cx = points.iter().map(|p| p[0]).sum::<f32>() / 4.0;
    let cy = points.iter().map(|p| p[1]).sum::<f32>() / 4.0;
    let mut idx = [0usize, 1, 2, 3];
    // Ascending screen angle (y down) is clockwise as displayed.
    idx.sort_by(|&a, &b| {
        let ta = (points[a][1] - cy).atan2(points[a][0] - cx);
        let tb = (points[b][1] - cy).atan2(points[b][0] - cx);
        ta.total_cmp(&tb).then(a.cmp(&b))
    });
    let start = (0..4)
        .min_by(|&i, &j| {
            let si = points[idx[i]][0] + points[idx[i]][1];
            let sj = points[idx[j]][0] + points[idx[j]][1];
            si.total_cmp(&sj).then(i.cmp(&j))
        })
        .unwrap_or(0);
    let mut out = [[0.0; 2]; 4];
    let mut order = [0usize; 4];
    for k in 0..4 {
        let src = idx[(start + k) % 4];
        out[k] = points[src];
        order[src] = k;
    }
    Ok((out, order))
}

fn hull_of(points: &[[f32; 2]; 4]) -> BoxXYXY {
    let mut b = BoxXYXY {
        x1: f32::INFINITY,
        y1: f32::INFINITY,
        x2: f32::NEG_INFINITY,
        y2: f32::NEG_INFINITY,
    };
    for p in points {
        b.x1 = b.x1.min(p[0]);
        b.y1 = b.y1.min(p[1]);
        b.x2 = b.x2.max(p[0]);
        b.y2 = b.y2.max(p[1]);
    }
    b
}

pub fn quad_to_aabb(q: &Quad) -> BoxXYXY {
    hull_of(&q.pts)
}

/// Clamps to `[0, width] x [0, height]`. A box that collapses is rejected.
pub fn clamp_box(b: &BoxXYXY, width: f32, height: f32) -> Result<BoxXYXY, GeomError> {
    b.validate()?;
    let c = BoxXYXY {
        x1: b.x1.clamp(0.0, width),
        y1: b.y1.clamp(0.0, height),
        x2: b.x2.clamp(0.0, width),
        y2: b.y2.clamp(0.0, height),
    };
    if c.x1 >= c.x2 || c.y1 >= c.y2 {
        return Err(GeomError::EmptyAfterClamp { width, height });
    }
    Ok(c)
}

pub fn iou(a: &BoxXYXY, b: &BoxXYXY) -> Result<f32, GeomError> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

pub(crate) fn iou_unchecked(a: &BoxXYXY, b: &BoxXYXY) -> f32 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Loss value and its gradient with respect to the prediction in
/// `(cx, cy, w, h)` order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossGrad {
    pub value: f32,
    pub grad: [f32; 4],
}

struct Overlap {
    iou: f32,
    /// d IoU / d (cx, cy, w, h) of pred.
    d_iou: [f32; 4],
}

fn overlap_with_grad(p: &BoxXYXY, g: &BoxXYXY) -> Overlap {
    let iw_raw = p.x2.min(g.x2) - p.x1.max(g.x1);
    let ih_raw = p.y2.min(g.y2) - p.y1.max(g.y1);
    let (pw, ph) = (p.width(), p.height());
    if iw_raw <= 0.0 || ih_raw <= 0.0 {
        return Overlap {
            iou: 0.0,
            d_iou: [0.0; 4],
        };
    }
    let inter = iw_raw * ih_raw;
    let union = pw * ph + g.area() - inter;
    let iou = inter / union;

    // Partial derivatives of the intersection extents w.r.t. pred corners.
    let diw_dx2 = if p.x2 <= g.x2 { 1.0 } else { 0.0 };
    let diw_dx1 = if p.x1 >= g.x1 { -1.0 } else { 0.0 };
    let dih_dy2 = if p.y2 <= g.y2 { 1.0 } else { 0.0 };
    let dih_dy1 = if p.y1 >= g.y1 { -1.0 } else { 0.0 };

    let diw_dcx = diw_dx1 + diw_dx2;
    let diw_dw = 0.5 * (diw_dx2 - diw_dx1);
    let dih_dcy = dih_dy1 + dih_dy2;
    let dih_dh = 0.5 * (dih_dy2 - dih_dy1);

    let dinter = [
        ih_raw * diw_dcx,
        iw_raw * dih_dcy,
        ih_raw * diw_dw,
        iw_raw * dih_dh,
    ];
    let darea = [0.0, 0.0, ph, pw];
    let k_inter = (union + inter) / (union * union);
    let k_area = inter / (union * union);
    let mut d_iou = [0.0; 4];
    for i in 0..4 {
        d_iou[i] = k_inter * dinter[i] - k_area * darea[i];
    }
    Overlap { iou, d_iou }
}

/// Plain `1 - IoU`. Its gradient vanishes whenever the boxes are disjoint.
pub fn iou_loss(pred: &BoxXYXY, gt: &BoxXYXY) -> Result<LossGrad, GeomError> {
    pred.validate()?;
    gt.validate()?;
    let o = overlap_with_grad(pred, gt);
    Ok(LossGrad {
        value: 1.0 - o.iou,
        grad: o.d_iou.map(|d| -d),
    })
}

/// Complete-IoU loss `1 - IoU + ρ²/c² + α·v` with α treated as a constant
/// in the backward pass.
pub fn ciou_loss(pred: &BoxXYXY, gt: &BoxXYXY) -> Result<LossGrad, GeomError> {
    pred.validate()?;
    gt.validate()?;
    let eps = CIOU_EPS as f32;
    let o = overlap_with_grad(pred, gt);
    let pc = pred.to_cwh();
    let gc = gt.to_cwh();

    let dx = pc.cx - gc.cx;
    let dy = pc.cy - gc.cy;
    let rho2 = dx * dx + dy * dy;

    let cw = pred.x2.max(gt.x2) - pred.x1.min(gt.x1);
    let ch = pred.y2.max(gt.y2) - pred.y1.min(gt.y1);
    let c2 = cw * cw + ch * ch + eps;

    let dcw_dx2 = if pred.x2 > gt.x2 { 1.0 } else { 0.0 };
    let dcw_dx1 = if pred.x1 < gt.x1 { -1.0 } else { 0.0 };
    let dch_dy2 = if pred.y2 > gt.y2 { 1.0 } else { 0.0 };
    let dch_dy1 = if pred.y1 < gt.y1 { -1.0 } else { 0.0 };
    let dc2 = [
        2.0 * cw * (dcw_dx1 + dcw_dx2),
        2.0 * ch * (dch_dy1 + dch_dy2),
        2.0 * cw * 0.5 * (dcw_dx2 - dcw_dx1),
        2.0 * ch * 0.5 * (dch_dy2 - dch_dy1),
    ];
    let drho2 = [2.0 * dx, 2.0 * dy, 0.0, 0.0];

    let k = 4.0 / (std::f32::consts::PI * std::f32::consts::PI);
    let dangle = (gc.w / gc.h).atan() - (pc.w / pc.h).atan();
    let v = k * dangle * dangle;
    let alpha = v / ((1.0 - o.iou) + v + eps);
    let s = pc.w * pc.w + pc.h * pc.h;
    // d atan(w/h)/dw = h/s, d/dh = -w/s
    let dv = [
        0.0,
        0.0,
        -2.0 * k * dangle * (pc.h / s),
        2.0 * k * dangle * (pc.w / s),
    ];

    let value = 1.0 - o.iou + rho2 / c2 + alpha * v;
    let mut grad = [0.0; 4];
    for i in 0..4 {
        grad[i] = -o.d_iou[i] + drho2[i] / c2 - rho2 / (c2 * c2) * dc2[i] + alpha * dv[i];
    }
    Ok(LossGrad { value, grad })
}

/// The CIoU value evaluated in any float type from center-form inputs.
/// Used by the finite-difference harness at 64-bit precision.
pub fn ciou_value<T: Float>(pred: [T; 4], gt: [T; 4]) -> T {
    ciou_terms(pred, gt, None).0
}

/// `(value, alpha)`. With `alpha` pinned, the value is the function whose
/// exact gradient [`ciou_loss`] returns.
pub fn ciou_terms<T: Float>(pred: [T; 4], gt: [T; 4], alpha: Option<T>) -> (T, T) {
    let two = T::one() + T::one();
    let half = T::one() / two;
    let corners = |b: [T; 4]| {
        [
            b[0] - half * b[2],
            b[1] - half * b[3],
            b[0] + half * b[2],
            b[1] + half * b[3],
        ]
    };
    let p = corners(pred);
    let g = corners(gt);
    let iw = (p[2].min(g[2]) - p[0].max(g[0])).max(T::zero());
    let ih = (p[3].min(g[3]) - p[1].max(g[1])).max(T::zero());
    let inter = iw * ih;
    let union = pred[2] * pred[3] + gt[2] * gt[3] - inter;
    let iou = inter / union;
    let rho2 = (pred[0] - gt[0]).powi(2) + (pred[1] - gt[1]).powi(2);
    let eps = T::from(CIOU_EPS).unwrap_or_else(T::epsilon);
    let cw = p[2].max(g[2]) - p[0].min(g[0]);
    let ch = p[3].max(g[3]) - p[1].min(g[1]);
    let c2 = cw * cw + ch * ch + eps;
    let pi = T::from(std::f64::consts::PI).unwrap_or_else(T::one);
    let four = two + two;
    let v = four / (pi * pi) * ((gt[2] / gt[3]).atan() - (pred[2] / pred[3]).atan()).powi(2);
    let alpha = alpha.unwrap_or_else(|| v / ((T::one() - iou) + v + eps));
    (T::one() - iou + rho2 / c2 + alpha * v, alpha)
}

pub fn encode_box(gt: &BoxCWH, anchor: &BoxCWH) -> Result<BoxOffsets, GeomError> {
    gt.validate()?;
    anchor.validate()?;
    Ok(BoxOffsets {
        tx: (gt.cx - anchor.cx) / anchor.w,
        ty: (gt.cy - anchor.cy) / anchor.h,
        tw: (gt.w / anchor.w).ln(),
        th: (gt.h / anchor.h).ln(),
    })
}

pub fn decode_box(off: &BoxOffsets, anchor: &BoxCWH) -> Result<BoxCWH, GeomError> {
    anchor.validate()?;
    let b = BoxCWH {
        cx: anchor.cx + off.tx * anchor.w,
        cy: anchor.cy + off.ty * anchor.h,
        w: anchor.w * off.tw.exp(),
        h: anchor.h * off.th.exp(),
    };
    b.validate()?;
    Ok(b)
}

pub fn encode_quad(q: &Quad, anchor: &BoxCWH) -> Result<QuadOffsets, GeomError> {
    anchor.validate()?;
    let mut out = [0.0; 8];
    for (i, p) in q.points().iter().enumerate() {
        out[2 * i] = (p[0] - anchor.cx) / anchor.w;
        out[2 * i + 1] = (p[1] - anchor.cy) / anchor.h;
    }
    Ok(QuadOffsets(out))
}

pub fn decode_quad(off: &QuadOffsets, anchor: &BoxCWH) -> Result<Quad, GeomError> {
    anchor.validate()?;
    let mut pts = [[0.0; 2]; 4];
    for (i, p) in pts.iter_mut().enumerate() {
        p[0] = anchor.cx + off.0[2 * i] * anchor.w;
        p[1] = anchor.cy + off.0[2 * i + 1] * anchor.h;
    }
    Quad::new(pts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f32, y1: f32, x2: f32, y2: f32) -> BoxXYXY {
        BoxXYXY::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_fixtures() {
        assert_eq!(iou(&bx(0., 0., 2., 2.), &bx(0., 0., 2., 2.)).unwrap(), 1.0);
        assert_eq!(iou(&bx(0., 0., 1., 1.), &bx(2., 2., 3., 3.)).unwrap(), 0.0);
        let v = iou(&bx(0., 0., 2., 2.), &bx(1., 1., 3., 3.)).unwrap();
        assert!((v - 1.0 / 7.0).abs() < 1e-6);
    }

    #[test]
    fn degenerate_rejected() {
        let flat = BoxXYXY {
            x1: 0.,
            y1: 0.,
            x2: 0.,
            y2: 1.,
        };
        assert!(matches!(
            iou(&flat, &bx(0., 0., 1., 1.)),
            Err(GeomError::DegenerateBox { .. })
        ));
        assert!(ciou_loss(&bx(0., 0., 1., 1.), &flat).is_err());
        let nan = BoxXYXY {
            x1: f32::NAN,
            ..bx(0., 0., 1., 1.)
        };
        assert!(iou_loss(&nan, &bx(0., 0., 1., 1.)).is_err());
    }

    #[test]
    fn ciou_fixtures() {
        let z = ciou_loss(&bx(0., 0., 2., 2.), &bx(0., 0., 2., 2.)).unwrap();
        assert!(z.value.abs() < 1e-6);
        let a = ciou_loss(&bx(0., 0., 2., 2.), &bx(2., 0., 4., 2.)).unwrap();
        assert!((a.value - 1.2).abs() < 1e-5);
        let b = ciou_loss(&bx(0., 0., 2., 2.), &bx(0., 0., 4., 2.)).unwrap();
        assert!((b.value - 0.553_248_1).abs() < 1e-5, "{}", b.value);
    }

    #[test]
    fn disjoint_iou_loss_has_dead_gradient() {
        let p = bx(0., 0., 1., 1.);
        let g = bx(3., 2., 5., 4.);
        let l = iou_loss(&p, &g).unwrap();
        assert_eq!(l.value, 1.0);
        assert_eq!(l.grad, [0.0; 4]);
        let c = ciou_loss(&p, &g).unwrap();
        assert!(c.grad[0] != 0.0 && c.grad[1] != 0.0);
        // Moving toward the target lowers the loss.
        assert!(c.grad[0] < 0.0 && c.grad[1] < 0.0);
    }

    #[test]
    fn box_codec_fixture() {
        let a = BoxCWH::new(10., 10., 4., 2.).unwrap();
        let g = BoxCWH::new(12., 11., 8., 2.).unwrap();
        let o = encode_box(&g, &a).unwrap();
        assert!((o.tx - 0.5).abs() < 1e-6);
        assert!((o.ty - 0.5).abs() < 1e-6);
        assert!((o.tw - std::f32::consts::LN_2).abs() < 1e-6);
        assert_eq!(o.th, 0.0);
        assert_eq!(
            encode_box(&a, &a).unwrap(),
            BoxOffsets {
                tx: 0.,
                ty: 0.,
                tw: 0.,
                th: 0.
            }
        );
        let bad = BoxCWH {
            w: 0.0,
            ..a
        };
        assert!(matches!(
            encode_box(&bad, &a),
            Err(GeomError::NonPositiveSize { .. })
        ));
    }

    #[test]
    fn quad_codec_fixture() {
        let a = BoxCWH::new(10., 10., 4., 2.).unwrap();
        let corners = Quad::new([[8., 9.], [12., 9.], [12., 11.], [8., 11.]]).unwrap();
        let o = encode_quad(&corners, &a).unwrap();
        assert_eq!(o.0, [-0.5, -0.5, 0.5, -0.5, 0.5, 0.5, -0.5, 0.5]);
        // the (12, 11) corner is bottom-right, slot 2
        assert_eq!(&o.0[4..6], &[0.5, 0.5]);
    }

    #[test]
    fn hull_and_clamp() {
        let q = Quad::new([[0., 0.], [4., 0.], [4., 2.], [0., 2.]]).unwrap();
        assert_eq!(quad_to_aabb(&q), bx(0., 0., 4., 2.));
        let r = Quad::new([[1., 0.], [2., 1.], [1., 2.], [0., 1.]]).unwrap();
        assert_eq!(quad_to_aabb(&r), bx(0., 0., 2., 2.));
        assert_eq!(
            clamp_box(&bx(-5., -5., 3., 3.), 4., 4.).unwrap(),
            bx(0., 0., 3., 3.)
        );
        assert!(matches!(
            clamp_box(&bx(5., 5., 7., 7.), 4., 4.),
            Err(GeomError::EmptyAfterClamp { .. })
        ));
    }

    #[test]
    fn quad_canonical_order() {
        // Given in CCPD order (BR, BL, TL, TR).
        let (q, order) =
            Quad::with_order([[386., 473.], [177., 454.], [154., 383.], [363., 402.]]).unwrap();
        assert_eq!(q.points()[0], [154., 383.]);
        assert_eq!(q.points()[1], [363., 402.]);
        assert_eq!(q.points()[2], [386., 473.]);
        assert_eq!(q.points()[3], [177., 454.]);
        assert_eq!(order, [2, 3, 0, 1]);
        assert!(Quad::new([[0., 0.], [1., 0.], [2., 0.], [3., 0.]]).is_err());
    }

    #[test]
    fn ciou_generic_matches_f32_path() {
        let p = bx(1., 2., 4., 3.5);
        let g = bx(2., 1., 6., 4.);
        let pc = p.to_cwh();
        let gc = g.to_cwh();
        let v64 = ciou_value::<f64>(
            [pc.cx as f64, pc.cy as f64, pc.w as f64, pc.h as f64],
            [gc.cx as f64, gc.cy as f64, gc.w as f64, gc.h as f64],
        );
        let v32 = ciou_loss(&p, &g).unwrap().value;
        assert!((v64 as f32 - v32).abs() < 1e-5);
    }
}
