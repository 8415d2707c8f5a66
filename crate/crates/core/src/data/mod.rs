//! Images, annotated samples, and the on-disk dataset formats.

pub mod augment;
pub mod ccpd;
pub mod index;
pub mod ppm;
pub mod synth;

use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::Tensor;
use crate::geom::{quad_to_aabb, BoxXYXY, GeomError, Quad};

pub use augment::{augment, AugmentConfig};
pub use ccpd::{parse_ccpd_name, serialize_ccpd_name, CcpdAnnotation, CcpdError};
pub use index::{load_samples, read_index, save_samples, write_index, IndexRow, INDEX_FILE, INDEX_HEADER};
pub use ppm::{decode_ppm, encode_ppm, read_ppm, write_ppm};
pub use synth::{sample_seed, synth_sample, Preset, SynthParams};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("PPM: {0}")]
    Ppm(String),
    #[error("index {path} line {line}: {msg}")]
    Index { path: PathBuf, line: usize, msg: String },
    #[error("unknown preset `{0}` (expected one of base, rotate, tilt, weather, fn, db, challenge)")]
    UnknownPreset(String),
    #[error("image size {0} must be a positive multiple of 32")]
    Size(usize),
    #[error("could not place the plate inside the image after {0} attempts")]
    Placement(usize),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

impl DataError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

/// RGB image, row-major, interleaved, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Rounds every channel to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        Self {
            data: self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect(),
            ..self.clone()
        }
    }
}

/// Stacks same-sized images into an `[N, 3, H, W]` tensor.
pub fn images_to_tensor(images: &[&Image]) -> Tensor {
    let (w, h) = (images[0].width, images[0].height);
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        assert_eq!((img.width, img.height), (w, h), "batch images must share a size");
        for c in 0..3 {
            data.extend(img.data.iter().skip(c).step_by(3));
        }
    }
    Tensor::new(&[images.len(), 3, h, w], data).expect("batch tensor shape")
}

/// One annotated image.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub gt_box: BoxXYXY,
    pub gt_quad: Quad,
    pub tag: String,
    pub source: String,
    /// Generator parameters, for synthetic samples.
    pub params: Option<SynthParams>,
}

impl Sample {
    /// Hull within 0.5 px of the box and every corner inside the image.
    pub fn check_invariants(&self) -> Result<(), String> {
        let hull = quad_to_aabb(&self.gt_quad);
        let dev = hull
            .as_array()
            .iter()
            .zip(self.gt_box.as_array())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        if dev > 0.5 {
            return Err(format!("quad hull {hull:?} deviates from box {:?} by {dev}", self.gt_box));
        }
        let (w, h) = (self.image.width as f32, self.image.height as f32);
        for p in self.gt_quad.points() {
            if p[0] < 0.0 || p[1] < 0.0 || p[0] > w || p[1] > h {
                return Err(format!("corner {p:?} outside the {w}x{h} image"));
            }
        }
        Ok(())
    }
}
