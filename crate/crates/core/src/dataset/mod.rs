//! Synthetic rubbing-like detection images, clean font-library glyphs, and their
//! on-disk form (8-bit PGM files plus one `annotations.json`).

mod io;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::netcore::Tensor;

pub use io::{load_dataset, read_pgm, save_dataset, write_pgm, Annotations, AnnotationEntry};
pub use synth::{gen_font, gen_rubbing, GenSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    #[default]
    Rubbing,
    FontLibrary,
}

/// Row-major grayscale image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    /// `1 x H x W` network input.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, self.height, self.width], self.pixels.clone())
            .expect("image buffer matches its dimensions")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub image: GrayImage,
    pub boxes: Vec<BBox>,
    pub source: Source,
}

impl ImageSample {
    /// Checks the box/bounds invariants.
    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.image.width as f64, self.image.height as f64);
        for b in &self.boxes {
            b.validate()?;
            if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > w || b.y2 > h {
                return Err(Error::input(format!("box {b:?} outside {w}x{h} image")));
            }
        }
        match self.source {
            Source::Rubbing if self.boxes.is_empty() => {
                Err(Error::input("rubbing sample without boxes"))
            }
            Source::FontLibrary if self.boxes.len() != 1 => {
                Err(Error::input("font sample must have exactly one box"))
            }
            _ => Ok(()),
        }
    }
}

/// Generates `count` samples of one kind, indices `0..count`.
pub fn generate(kind: Source, spec: &GenSpec, count: usize) -> Result<Vec<ImageSample>> {
    (0..count)
        .map(|i| match kind {
            Source::Rubbing => gen_rubbing(spec, i),
            Source::FontLibrary => gen_font(spec, i),
        })
        .collect()
}
