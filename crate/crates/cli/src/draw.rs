//! Direct pixel drawing of detections onto an image.

use stlpd::data::Image;
use stlpd::engine::Detection;

const BOX_COLOR: [f32; 3] = [1.0, 0.0, 0.0];
const CORNER_COLOR: [f32; 3] = [0.0, 1.0, 0.0];
const CROSS_ARM: i64 = 3;

fn put(img: &mut Image, x: i64, y: i64, rgb: [f32; 3]) {
    if x >= 0 && y >= 0 && (x as usize) < img.width && (y as usize) < img.height {
        img.set_pixel(x as usize, y as usize, rgb);
    }
}

/// 2-px box outline drawn inward from the box edges, then a cross on each
/// quad corner.
pub fn annotate(img: &mut Image, d: &Detection) {
    let b = d.bbox;
    let (x1, y1) = (b.x1.floor() as i64, b.y1.floor() as i64);
    let (x2, y2) = (b.x2.ceil() as i64 - 1, b.y2.ceil() as i64 - 1);
    for t in 0..2 {
        for x in x1..=x2 {
            put(img, x, y1 + t, BOX_COLOR);
            put(img, x, y2 - t, BOX_COLOR);
        }
        for y in y1..=y2 {
            put(img, x1 + t, y, BOX_COLOR);
            put(img, x2 - t, y, BOX_COLOR);
        }
    }
    for p in d.quad.points() {
        let (cx, cy) = (p[0].round() as i64, p[1].round() as i64);
        for k in -CROSS_ARM..=CROSS_ARM {
            put(img, cx + k, cy, CORNER_COLOR);
            put(img, cx, cy + k, CORNER_COLOR);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use stlpd::geom::{BoxXYXY, Quad};

    #[test]
    fn outline_is_two_pixels_and_interior_untouched() {
        let mut img = Image::new(16, 16);
        let bbox = BoxXYXY::new(2.0, 3.0, 12.0, 11.0).unwrap();
        let quad = Quad::new([[2.0, 3.0], [12.0, 3.0], [12.0, 11.0], [2.0, 11.0]]).unwrap();
        annotate(&mut img, &Detection { score: 1.0, bbox, quad });
        assert_eq!(img.pixel(7, 3), BOX_COLOR);
        assert_eq!(img.pixel(7, 4), BOX_COLOR);
        assert_eq!(img.pixel(7, 5), [0.0; 3]);
        assert_eq!(img.pixel(11, 7), BOX_COLOR);
        assert_eq!(img.pixel(10, 7), BOX_COLOR);
        assert_eq!(img.pixel(9, 7), [0.0; 3]);
        assert_eq!(img.pixel(2, 3), CORNER_COLOR);
        assert_eq!(img.pixel(12, 8), CORNER_COLOR);
        assert_eq!(img.pixel(0, 0), [0.0; 3]);
    }
}
