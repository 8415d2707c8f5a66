//! CCPD filename annotations.
//!
//! Grammar (fields separated by `-`, points joined by `&`, lists by `_`):
//!
//! ```text
//! <area>-<tiltH>_<tiltV>-<x1>&<y1>_<x2>&<y2>-<v1>_<v2>_<v3>_<v4>-<i0>_..._<in>-<brightness>-<blur>.jpg
//! ```
//!
//! Integers other than the area are canonical decimal (no leading zeros);
//! the area keeps its zero padding so names round-trip exactly.

use std::fmt;

use thiserror::Error;

use crate::geom::{BoxXYXY, GeomError, Quad};

const FIELDS: usize = 7;
const EXTENSION: &[u8] = b".jpg";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CcpdErrorKind {
    MissingExtension,
    FieldCount(usize),
    Empty,
    NotANumber,
    LeadingZero,
    Overflow,
    MalformedPoint,
    ListLength { expected: usize, got: usize },
    DegenerateBox,
    DegenerateQuad,
}

impl fmt::Display for CcpdErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::MissingExtension => write!(f, "name must end in .jpg"),
            Self::FieldCount(n) => write!(f, "expected {FIELDS} '-'-separated fields, found {n}"),
            Self::Empty => write!(f, "empty token"),
            Self::NotANumber => write!(f, "non-numeric token"),
            Self::LeadingZero => write!(f, "integer has a leading zero"),
            Self::Overflow => write!(f, "integer out of range"),
            Self::MalformedPoint => write!(f, "point must be <x>&<y>"),
            Self::ListLength { expected, got } => write!(f, "expected {expected} items, found {got}"),
            Self::DegenerateBox => write!(f, "bounding box has no area"),
            Self::DegenerateQuad => write!(f, "vertices span no area"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("CCPD name, byte {offset}: {kind}")]
pub struct CcpdError {
    pub offset: usize,
    pub kind: CcpdErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CcpdAnnotation {
    pub area: u32,
    /// Width of the zero-padded area token.
    pub area_digits: usize,
    /// Horizontal and vertical tilt in degrees.
    pub tilt: (u32, u32),
    pub bbox: [[u32; 2]; 2],
    /// Vertices in canonical order (TL, TR, BR, BL).
    pub vertices: [[u32; 2]; 4],
    /// `vertex_order[i]` is the canonical slot of the i-th stored vertex.
    pub vertex_order: [usize; 4],
    pub plate_code: Vec<u32>,
    pub brightness: u32,
    pub blur: u32,
}

impl CcpdAnnotation {
    /// Area token read as a decimal fraction, e.g. `025` -> 0.025.
    pub fn area_ratio(&self) -> f64 {
        self.area as f64 / 10f64.powi(self.area_digits as i32)
    }

    pub fn gt_box(&self) -> Result<BoxXYXY, GeomError> {
        let [a, b] = self.bbox;
        BoxXYXY::new(a[0] as f32, a[1] as f32, b[0] as f32, b[1] as f32)
    }

    pub fn gt_quad(&self) -> Result<Quad, GeomError> {
        Quad::new(self.vertices.map(|p| [p[0] as f32, p[1] as f32]))
    }

    /// Vertices in the order they appear in the filename.
    pub fn stored_vertices(&self) -> [[u32; 2]; 4] {
        self.vertex_order.map(|slot| self.vertices[slot])
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    base: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, at: usize, kind: CcpdErrorKind) -> CcpdError {
        CcpdError {
            offset: self.base + at,
            kind,
        }
    }

    /// Splits on `sep`, yielding sub-cursors with absolute offsets.
    fn split(&self, sep: u8) -> Vec<Cursor<'a>> {
        let mut out = Vec::new();
        let mut start = 0;
        for (i, &b) in self.bytes.iter().enumerate() {
            if b == sep {
                out.push(Cursor {
                    bytes: &self.bytes[start..i],
                    base: self.base + start,
                });
                start = i + 1;
            }
        }
        out.push(Cursor {
            bytes: &self.bytes[start..],
            base: self.base + start,
        });
        out
    }

    fn digits(&self) -> Result<u32, CcpdError> {
        if self.bytes.is_empty() {
            return Err(self.err(0, CcpdErrorKind::Empty));
        }
        let mut v: u32 = 0;
        for (i, &b) in self.bytes.iter().enumerate() {
            if !b.is_ascii_digit() {
                return Err(self.err(i, CcpdErrorKind::NotANumber));
            }
            v = v
                .checked_mul(10)
                .and_then(|v| v.checked_add((b - b'0') as u32))
                .ok_or_else(|| self.err(0, CcpdErrorKind::Overflow))?;
        }
        Ok(v)
    }

    fn int(&self) -> Result<u32, CcpdError> {
        let v = self.digits()?;
        if self.bytes.len() > 1 && self.bytes[0] == b'0' {
            return Err(self.err(0, CcpdErrorKind::LeadingZero));
        }
        Ok(v)
    }

    fn list(&self, expected: Option<usize>) -> Result<Vec<Cursor<'a>>, CcpdError> {
        let items = self.split(b'_');
        if let Some(n) = expected {
            if items.len() != n {
                return Err(self.err(
                    0,
                    CcpdErrorKind::ListLength {
                        expected: n,
                        got: items.len(),
                    },
                ));
            }
        }
        Ok(items)
    }

    fn point(&self) -> Result<[u32; 2], CcpdError> {
        let parts = self.split(b'&');
        if parts.len() != 2 {
            return Err(self.err(0, CcpdErrorKind::MalformedPoint));
        }
        Ok([parts[0].int()?, parts[1].int()?])
    }
}

pub fn parse_ccpd_bytes(name: &[u8]) -> Result<CcpdAnnotation, CcpdError> {
    if !name.ends_with(EXTENSION) {
        return Err(CcpdError {
            offset: name.len(),
            kind: CcpdErrorKind::MissingExtension,
        });
    }
    let stem = Cursor {
        bytes: &name[..name.len() - EXTENSION.len()],
        base: 0,
    };
    let fields = stem.split(b'-');
    if fields.len() != FIELDS {
        let at = fields.get(FIELDS).map_or(stem.bytes.len(), |f| f.base);
        return Err(CcpdError {
            offset: at,
            kind: CcpdErrorKind::FieldCount(fields.len()),
        });
    }
    let area = fields[0].digits()?;
    let tilt = fields[1].list(Some(2))?;
    let tilt = (tilt[0].int()?, tilt[1].int()?);
    let bb = fields[2].list(Some(2))?;
    let bbox = [bb[0].point()?, bb[1].point()?];
    if bbox[0][0] >= bbox[1][0] || bbox[0][1] >= bbox[1][1] {
        return Err(fields[2].err(0, CcpdErrorKind::DegenerateBox));
    }
    let vs = fields[3].list(Some(4))?;
    let stored = [vs[0].point()?, vs[1].point()?, vs[2].point()?, vs[3].point()?];
    let plate_code = fields[4].list(None)?.iter().map(Cursor::int).collect::<Result<Vec<_>, _>>()?;
    let brightness = fields[5].int()?;
    let blur = fields[6].int()?;

    let (_, order) = Quad::with_order(stored.map(|p| [p[0] as f32, p[1] as f32]))
        .map_err(|_| fields[3].err(0, CcpdErrorKind::DegenerateQuad))?;
    let mut vertices = [[0u32; 2]; 4];
    for (i, p) in stored.iter().enumerate() {
        vertices[order[i]] = *p;
    }
    Ok(CcpdAnnotation {
        area,
        area_digits: fields[0].bytes.len(),
        tilt,
        bbox,
        vertices,
        vertex_order: order,
        plate_code,
        brightness,
        blur,
    })
}

pub fn parse_ccpd_name(name: &str) -> Result<CcpdAnnotation, CcpdError> {
    parse_ccpd_bytes(name.as_bytes())
}

pub fn serialize_ccpd_name(ann: &CcpdAnnotation) -> String {
    let pt = |p: [u32; 2]| format!("{}&{}", p[0], p[1]);
    let verts: Vec<String> = ann.stored_vertices().into_iter().map(pt).collect();
    let codes: Vec<String> = ann.plate_code.iter().map(u32::to_string).collect();
    format!(
        "{:0width$}-{}_{}-{}_{}-{}-{}-{}-{}.jpg",
        ann.area,
        ann.tilt.0,
        ann.tilt.1,
        pt(ann.bbox[0]),
        pt(ann.bbox[1]),
        verts.join("_"),
        codes.join("_"),
        ann.brightness,
        ann.blur,
        width = ann.area_digits
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    const NAME: &str = "025-95_113-154&383_386&473-386&473_177&454_154&383_363&402-0_0_22_27_27_33_16-37-15.jpg";

    #[test]
    fn parses_reference_name() {
        let a = parse_ccpd_name(NAME).unwrap();
        assert_eq!((a.area, a.area_digits), (25, 3));
        assert_eq!(a.tilt, (95, 113));
        assert_eq!(a.bbox, [[154, 383], [386, 473]]);
        assert_eq!(a.stored_vertices(), [[386, 473], [177, 454], [154, 383], [363, 402]]);
        assert_eq!(a.vertices, [[154, 383], [363, 402], [386, 473], [177, 454]]);
        assert_eq!(a.plate_code, vec![0, 0, 22, 27, 27, 33, 16]);
        assert_eq!((a.brightness, a.blur), (37, 15));
        assert_eq!(serialize_ccpd_name(&a), NAME);
        assert!((a.area_ratio() - 0.025).abs() < 1e-12);
    }

    #[test]
    fn structured_errors_carry_offsets() {
        let e = parse_ccpd_name("025-95_113.jpg").unwrap_err();
        assert_eq!(e.kind, CcpdErrorKind::FieldCount(2));
        let e = parse_ccpd_name(&NAME.replace("37-15", "3x-15")).unwrap_err();
        assert_eq!(e.kind, CcpdErrorKind::NotANumber);
        assert_eq!(e.offset, NAME.find("37-15").unwrap() + 1);
        let e = parse_ccpd_name(&NAME.replace("154&383_386", "154_383_386")).unwrap_err();
        assert!(matches!(e.kind, CcpdErrorKind::ListLength { expected: 2, .. }));
        let e = parse_ccpd_name(&NAME.replace("386&473-", "386473-")).unwrap_err();
        assert_eq!(e.kind, CcpdErrorKind::MalformedPoint);
        let e = parse_ccpd_name(&NAME.replace(".jpg", ".png")).unwrap_err();
        assert_eq!(e.kind, CcpdErrorKind::MissingExtension);
        let e = parse_ccpd_name(&NAME.replace("-37-", "-037-")).unwrap_err();
        assert_eq!(e.kind, CcpdErrorKind::LeadingZero);
    }
}
