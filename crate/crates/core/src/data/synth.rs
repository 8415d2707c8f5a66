//! Procedural plate scenes whose presets mimic the qualitative character
//! of the CCPD splits (base, rotate, tilt, weather, fn, db, challenge).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DataError, Image, Sample};
use crate::geom::{quad_to_aabb, Quad};

pub const MAX_PLACEMENT_TRIES: usize = 100;
const PLATE_ASPECT: Span = Span { lo: 2.6, hi: 3.2 };
const SUPERSAMPLE: usize = 3;
const GLYPHS: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Span {
    pub lo: f32,
    pub hi: f32,
}

impl Span {
    const fn new(lo: f32, hi: f32) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, v: f32) -> bool {
        v >= self.lo && v <= self.hi
    }

    fn draw(&self, rng: &mut impl Rng) -> f32 {
        if self.hi > self.lo {
            rng.gen_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }

    /// Magnitude from the span with a random sign.
    fn draw_signed(&self, rng: &mut impl Rng) -> f32 {
        let m = self.draw(rng);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    }
}

/// Parameter ranges for one scene family. Rotation and shear spans are
/// magnitudes; the sign is drawn uniformly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub rotation_deg: Span,
    pub shear: Span,
    pub blur_sigma: Span,
    pub gain: Span,
    /// Plate width as a fraction of the image width.
    pub scale: Span,
    /// Standard deviation of additive pixel noise.
    pub noise: Span,
}

const BASE: Preset = Preset {
    name: "base",
    rotation_deg: Span::new(0.0, 5.0),
    shear: Span::new(0.0, 0.05),
    blur_sigma: Span::new(0.0, 0.5),
    gain: Span::new(0.9, 1.1),
    scale: Span::new(0.35, 0.6),
    noise: Span::new(0.0, 0.02),
};

pub const PRESETS: [Preset; 7] = [
    BASE,
    Preset {
        name: "rotate",
        rotation_deg: Span::new(20.0, 50.0),
        scale: Span::new(0.3, 0.5),
        ..BASE
    },
    Preset {
        name: "tilt",
        rotation_deg: Span::new(0.0, 10.0),
        shear: Span::new(0.2, 0.5),
        scale: Span::new(0.3, 0.55),
        ..BASE
    },
    Preset {
        name: "weather",
        blur_sigma: Span::new(1.0, 2.0),
        gain: Span::new(0.7, 1.0),
        noise: Span::new(0.03, 0.08),
        ..BASE
    },
    Preset {
        name: "fn",
        scale: Span::new(0.08, 0.5),
        ..BASE
    },
    Preset {
        name: "db",
        gain: Span::new(0.4, 1.8),
        ..BASE
    },
    Preset {
        name: "challenge",
        rotation_deg: Span::new(0.0, 50.0),
        shear: Span::new(0.0, 0.5),
        blur_sigma: Span::new(0.0, 2.0),
        gain: Span::new(0.4, 1.8),
        scale: Span::new(0.08, 0.6),
        noise: Span::new(0.0, 0.08),
    },
];

impl Preset {
    pub fn by_name(name: &str) -> Result<Preset, DataError> {
        PRESETS
            .iter()
            .find(|p| p.name == name)
            .copied()
            .ok_or_else(|| DataError::UnknownPreset(name.to_string()))
    }

    pub fn names() -> impl Iterator<Item = &'static str> {
        PRESETS.iter().map(|p| p.name)
    }

    /// Whether applied parameters lie inside this preset's ranges.
    pub fn contains(&self, p: &SynthParams) -> bool {
        self.rotation_deg.contains(p.rotation_deg.abs())
            && self.shear.contains(p.shear.abs())
            && self.blur_sigma.contains(p.blur_sigma)
            && self.gain.contains(p.gain)
            && self.scale.contains(p.scale)
            && self.noise.contains(p.noise)
            && PLATE_ASPECT.contains(p.aspect)
    }
}

/// The transform and photometric parameters actually applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub rotation_deg: f32,
    pub shear: f32,
    pub blur_sigma: f32,
    pub gain: f32,
    pub scale: f32,
    pub noise: f32,
    pub aspect: f32,
    pub center: [f32; 2],
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-sample seed derived from a dataset seed and the sample index.
pub fn sample_seed(global: u64, index: u64) -> u64 {
    splitmix64(global ^ splitmix64(index))
}

/// Linear map plate-local -> image offsets: rotation after horizontal shear.
fn plate_matrix(rotation_deg: f32, shear: f32) -> [[f32; 2]; 2] {
    let (s, c) = rotation_deg.to_radians().sin_cos();
    [[c, c * shear - s], [s, s * shear + c]]
}

fn invert(m: [[f32; 2]; 2]) -> [[f32; 2]; 2] {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]]
}

fn apply(m: &[[f32; 2]; 2], p: [f32; 2]) -> [f32; 2] {
    [m[0][0] * p[0] + m[0][1] * p[1], m[1][0] * p[0] + m[1][1] * p[1]]
}

struct PlateStyle {
    base: [f32; 3],
    ink: [f32; 3],
    frame: [f32; 3],
    glyphs: [[bool; 15]; GLYPHS],
}

impl PlateStyle {
    fn draw(rng: &mut impl Rng) -> Self {
        let level = rng.gen_range(0.78..0.95);
        let base = [
            level * rng.gen_range(0.95..1.0),
            level * rng.gen_range(0.95..1.0),
            level * rng.gen_range(0.9..1.0),
        ];
        let ink_level = rng.gen_range(0.05..0.22);
        let ink = [ink_level, ink_level, ink_level * rng.gen_range(0.8..1.3)];
        let frame = base.map(|v| v * 0.55);
        let mut glyphs = [[false; 15]; GLYPHS];
        for g in glyphs.iter_mut() {
            loop {
                for cell in g.iter_mut() {
                    *cell = rng.gen_bool(0.55);
                }
                if g.iter().filter(|c| **c).count() >= 6 {
                    break;
                }
            }
        }
        Self {
            base,
            ink,
            frame,
            glyphs,
        }
    }

    /// Color at plate coordinates `(u, v)` in the unit square.
    fn color(&self, u: f32, v: f32) -> [f32; 3] {
        if !(0.03..=0.97).contains(&u) || !(0.08..=0.92).contains(&v) {
            return self.frame;
        }
        let (left, span) = (0.06, 0.88);
        let slot_w = span / GLYPHS as f32;
        let rel = (u - left) / slot_w;
        if rel >= 0.0 && rel < GLYPHS as f32 && (0.2..0.8).contains(&v) {
            let slot = rel as usize;
            let gu = (rel - slot as f32 - 0.15) / 0.7;
            if (0.0..1.0).contains(&gu) {
                let col = (gu * 3.0) as usize;
                let row = ((v - 0.2) / 0.6 * 5.0) as usize;
                if self.glyphs[slot][row.min(4) * 3 + col.min(2)] {
                    return self.ink;
                }
            }
        }
        self.base
    }
}

fn background(size: usize, rng: &mut impl Rng) -> Image {
    let grid = 6;
    let ctrl: Vec<[f32; 3]> = (0..(grid + 1) * (grid + 1))
        .map(|_| {
            let l = rng.gen_range(0.1..0.7);
            [
                l * rng.gen_range(0.7..1.3),
                l * rng.gen_range(0.7..1.3),
                l * rng.gen_range(0.7..1.3),
            ]
        })
        .collect();
    let mut img = Image::new(size, size);
    let cell = size as f32 / grid as f32;
    for y in 0..size {
        for x in 0..size {
            let gx = (x as f32 + 0.5) / cell;
            let gy = (y as f32 + 0.5) / cell;
            let (ix, iy) = ((gx as usize).min(grid - 1), (gy as usize).min(grid - 1));
            let (fx, fy) = (gx - ix as f32, gy - iy as f32);
            let at = |i: usize, j: usize| ctrl[j * (grid + 1) + i];
            let mut rgb = [0.0; 3];
            for (c, out) in rgb.iter_mut().enumerate() {
                let top = at(ix, iy)[c] * (1.0 - fx) + at(ix + 1, iy)[c] * fx;
                let bot = at(ix, iy + 1)[c] * (1.0 - fx) + at(ix + 1, iy + 1)[c] * fx;
                *out = top * (1.0 - fy) + bot * fy + rng.gen_range(-0.03..0.03);
            }
            img.set_pixel(x, y, rgb);
        }
    }
    img
}

fn fill_rect(img: &mut Image, x0: f32, y0: f32, x1: f32, y1: f32, rgb: [f32; 3]) {
    let clip = |v: f32, hi: usize| (v.max(0.0) as usize).min(hi);
    for y in clip(y0, img.height)..clip(y1, img.height) {
        for x in clip(x0, img.width)..clip(x1, img.width) {
            img.set_pixel(x, y, rgb);
        }
    }
}

fn gaussian_blur(img: &mut Image, sigma: f32) {
    if sigma < 0.05 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let (w, h) = (img.width as isize, img.height as isize);
    for horizontal in [true, false] {
        let src = img.data.clone();
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f32; 3];
                for (ki, k) in kernel.iter().enumerate() {
                    let d = ki as isize - radius;
                    let (sx, sy) = if horizontal {
                        ((x + d).clamp(0, w - 1), y)
                    } else {
                        (x, (y + d).clamp(0, h - 1))
                    };
                    let i = 3 * (sy * w + sx) as usize;
                    for c in 0..3 {
                        acc[c] += k * src[i + c];
                    }
                }
                let i = 3 * (y * w + x) as usize;
                img.data[i..i + 3].copy_from_slice(&acc);
            }
        }
    }
}

fn draw_params(preset: &Preset, rng: &mut impl Rng) -> SynthParams {
    SynthParams {
        rotation_deg: preset.rotation_deg.draw_signed(rng),
        shear: preset.shear.draw_signed(rng),
        blur_sigma: preset.blur_sigma.draw(rng),
        gain: preset.gain.draw(rng),
        scale: preset.scale.draw(rng),
        noise: preset.noise.draw(rng),
        aspect: PLATE_ASPECT.draw(rng),
        center: [0.0, 0.0],
    }
}

/// Generates one scene. Fully determined by `(preset, seed, size)`.
pub fn synth_sample(preset: &Preset, seed: u64, size: usize) -> Result<Sample, DataError> {
    if size == 0 || !size.is_multiple_of(32) {
        return Err(DataError::Size(size));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f32;
    let margin = 1.0;
    let mut placed = None;
    for _ in 0..MAX_PLACEMENT_TRIES {
        let mut p = draw_params(preset, &mut rng);
        let pw = p.scale * s;
        let ph = pw / p.aspect;
        let m = plate_matrix(p.rotation_deg, p.shear);
        let local = [
            [-pw / 2.0, -ph / 2.0],
            [pw / 2.0, -ph / 2.0],
            [pw / 2.0, ph / 2.0],
            [-pw / 2.0, ph / 2.0],
        ];
        let offs = local.map(|q| apply(&m, q));
        let hx = offs.iter().map(|o| o[0].abs()).fold(0.0, f32::max);
        let hy = offs.iter().map(|o| o[1].abs()).fold(0.0, f32::max);
        let (lo_x, hi_x) = (hx + margin, s - hx - margin);
        let (lo_y, hi_y) = (hy + margin, s - hy - margin);
        if lo_x >= hi_x || lo_y >= hi_y {
            continue;
        }
        p.center = [rng.gen_range(lo_x..hi_x), rng.gen_range(lo_y..hi_y)];
        placed = Some((p, pw, ph, m, offs));
        break;
    }
    let (params, pw, ph, m, offs) = placed.ok_or(DataError::Placement(MAX_PLACEMENT_TRIES))?;
    let [cx, cy] = params.center;
    let corners = offs.map(|o| [o[0] + cx, o[1] + cy]);
    let quad = Quad::new(corners)?;
    let gt_box = quad_to_aabb(&quad);

    let mut img = background(size, &mut rng);
    // distractor patches and a car-body panel around the plate
    for _ in 0..2 {
        let w = rng.gen_range(0.1..0.35) * s;
        let h = rng.gen_range(0.05..0.2) * s;
        let x = rng.gen_range(0.0..s - w);
        let y = rng.gen_range(0.0..s - h);
        let l = rng.gen_range(0.2..0.8);
        fill_rect(&mut img, x, y, x + w, y + h, [l, l * rng.gen_range(0.8..1.2), l]);
    }
    let body_w = (gt_box.width() * rng.gen_range(1.4..2.6)).min(s);
    let body_h = (gt_box.height() * rng.gen_range(1.6..3.5)).min(s);
    let body_l = rng.gen_range(0.12..0.6);
    let body = [
        body_l * rng.gen_range(0.6..1.4),
        body_l * rng.gen_range(0.6..1.4),
        body_l * rng.gen_range(0.6..1.4),
    ];
    let bx = cx + rng.gen_range(-0.15..0.15) * body_w;
    let by = cy + rng.gen_range(-0.1..0.3) * body_h;
    fill_rect(&mut img, bx - body_w / 2.0, by - body_h / 2.0, bx + body_w / 2.0, by + body_h / 2.0, body);

    let style = PlateStyle::draw(&mut rng);
    let inv = invert(m);
    let x_range = (gt_box.x1.floor().max(0.0) as usize)..(gt_box.x2.ceil() as usize).min(size);
    let y_range = (gt_box.y1.floor().max(0.0) as usize)..(gt_box.y2.ceil() as usize).min(size);
    for py in y_range {
        for px in x_range.clone() {
            let bg = img.pixel(px, py);
            let mut acc = [0.0f32; 3];
            for j in 0..SUPERSAMPLE {
                for i in 0..SUPERSAMPLE {
                    let sx = px as f32 + (i as f32 + 0.5) / SUPERSAMPLE as f32 - cx;
                    let sy = py as f32 + (j as f32 + 0.5) / SUPERSAMPLE as f32 - cy;
                    let l = apply(&inv, [sx, sy]);
                    let (u, v) = (l[0] / pw + 0.5, l[1] / ph + 0.5);
                    let rgb = if (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v) {
                        style.color(u, v)
                    } else {
                        bg
                    };
                    for c in 0..3 {
                        acc[c] += rgb[c];
                    }
                }
            }
            let k = (SUPERSAMPLE * SUPERSAMPLE) as f32;
            img.set_pixel(px, py, acc.map(|v| v / k));
        }
    }

    gaussian_blur(&mut img, params.blur_sigma);
    let noise = Normal::new(0.0f32, params.noise.max(1e-12)).expect("finite std");
    for v in img.data.iter_mut() {
        let n = if params.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        *v = (*v * params.gain + n).clamp(0.0, 1.0);
    }

    Ok(Sample {
        image: img,
        gt_box,
        gt_quad: quad,
        tag: preset.name.to_string(),
        source: format!("synth:{}:{seed:016x}", preset.name),
        params: Some(params),
    })
}
