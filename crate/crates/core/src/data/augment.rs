//! Training-time augmentation: horizontal flip and brightness jitter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Image, Sample};
use crate::geom::{BoxXYXY, GeomError, Quad};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f32,
    /// Brightness is scaled by `1 + U(-jitter, jitter)`.
    pub jitter: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            jitter: 0.1,
        }
    }
}

/// Mirrors a sample left to right. Corners are re-canonicalized.
pub fn flip_horizontal(sample: &Sample) -> Result<Sample, GeomError> {
    let img = &sample.image;
    let mut image = Image::new(img.width, img.height);
    for y in 0..img.height {
        for x in 0..img.width {
            image.set_pixel(img.width - 1 - x, y, img.pixel(x, y));
        }
    }
    let w = img.width as f32;
    let b = &sample.gt_box;
    let gt_box = BoxXYXY::new(w - b.x2, b.y1, w - b.x1, b.y2)?;
    let gt_quad = Quad::new(sample.gt_quad.points().map(|[x, y]| [w - x, y]))?;
    Ok(Sample {
        image,
        gt_box,
        gt_quad,
        ..sample.clone()
    })
}

/// Deterministic in `seed`.
pub fn augment(sample: &Sample, seed: u64, cfg: &AugmentConfig) -> Result<Sample, GeomError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flip = rng.gen::<f32>() < cfg.flip_prob;
    let gain = if cfg.jitter > 0.0 {
        1.0 + rng.gen_range(-cfg.jitter..cfg.jitter)
    } else {
        1.0
    };
    let mut out = if flip { flip_horizontal(sample)? } else { sample.clone() };
    if gain != 1.0 {
        for v in &mut out.image.data {
            *v = (*v * gain).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_sample, Preset};

    fn sample(seed: u64) -> Sample {
        synth_sample(&Preset::by_name("rotate").unwrap(), seed, 64).unwrap()
    }

    #[test]
    fn double_flip_is_identity() {
        for seed in 0..5 {
            let s = sample(seed);
            let back = flip_horizontal(&flip_horizontal(&s).unwrap()).unwrap();
            assert_eq!(back.image, s.image);
            for (a, b) in back.gt_box.as_array().iter().zip(s.gt_box.as_array()) {
                assert!((a - b).abs() < 1e-4);
            }
            for (a, b) in back.gt_quad.flat().iter().zip(s.gt_quad.flat()) {
                assert!((a - b).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn flipped_samples_keep_invariants() {
        for seed in 0..20 {
            let f = flip_horizontal(&sample(seed)).unwrap();
            f.check_invariants().unwrap();
            let p = f.gt_quad.points();
            // top-left stays the corner with smallest x + y
            assert!(p.iter().all(|q| p[0][0] + p[0][1] <= q[0] + q[1]));
        }
    }

    #[test]
    fn zero_config_is_identity() {
        let s = sample(3);
        let cfg = AugmentConfig {
            flip_prob: 0.0,
            jitter: 0.0,
        };
        assert_eq!(augment(&s, 11, &cfg).unwrap(), s);
    }

    #[test]
    fn deterministic_per_seed() {
        let s = sample(4);
        let cfg = AugmentConfig::default();
        assert_eq!(augment(&s, 9, &cfg).unwrap(), augment(&s, 9, &cfg).unwrap());
        let flips = (0..200)
            .filter(|&k| augment(&s, k, &cfg).unwrap().gt_box != s.gt_box)
            .count();
        assert!((60..140).contains(&flips), "{flips}");
    }
}
