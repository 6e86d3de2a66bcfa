use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GrayImage, ImageSample, Source};
use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const ANNOTATIONS_FILE: &str = "annotations.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationEntry {
    pub file: String,
    pub boxes: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Annotations {
    pub images: Vec<AnnotationEntry>,
    /// Which generator produced the images; absent means rubbing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<Source>,
}

/// Binary 8-bit PGM (`P5`).
pub fn write_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(
        img.pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

/// Parses a binary PGM with maxval <= 255; values are scaled to `[0, 1]`.
pub fn read_pgm(bytes: &[u8], file: &Path) -> Result<GrayImage> {
    let fail = |offset: usize, message: &str| Error::Format {
        file: file.to_path_buf(),
        offset,
        message: message.to_string(),
    };
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(fail(0, "missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(fail(pos, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(fail(pos, "expected a number in header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fail(start, "header number out of range"))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(fail(pos, "zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(fail(pos, "only 8-bit PGM (maxval 1..=255) is supported"));
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(fail(pos, "missing whitespace after header"));
    }
    pos += 1;
    let need = width * height;
    let body = &bytes[pos..];
    if body.len() < need {
        return Err(fail(
            bytes.len(),
            &format!("truncated pixel data: need {need} bytes, found {}", body.len()),
        ));
    }
    let scale = maxval as f64;
    Ok(GrayImage {
        width,
        height,
        pixels: body[..need].iter().map(|&b| (b as f64 / scale).min(1.0)).collect(),
    })
}

/// Writes `NNNNN.pgm` images plus `annotations.json` into `dir` (created if needed).
pub fn save_dataset(samples: &[ImageSample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut ann = Annotations {
        images: Vec::with_capacity(samples.len()),
        source: samples.first().map(|s| s.source),
    };
    for (i, s) in samples.iter().enumerate() {
        let name = format!("{i:05}.pgm");
        let path = dir.join(&name);
        fs::write(&path, write_pgm(&s.image)).map_err(|e| Error::io(&path, e))?;
        ann.images.push(AnnotationEntry {
            file: name,
            boxes: s.boxes.iter().map(BBox::to_array).collect(),
        });
    }
    let path = dir.join(ANNOTATIONS_FILE);
    let mut text = serde_json::to_string_pretty(&ann).expect("annotations serialize");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let before: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    before + column.saturating_sub(1)
}

/// Loads a dataset written by [`save_dataset`]. A directory without an annotation file
/// is an empty dataset.
pub fn load_dataset(dir: &Path) -> Result<Vec<ImageSample>> {
    if !dir.is_dir() {
        return Err(Error::input(format!("dataset directory {} does not exist", dir.display())));
    }
    let ann_path = dir.join(ANNOTATIONS_FILE);
    if !ann_path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let ann: Annotations = serde_json::from_str(&text).map_err(|e| Error::Format {
        file: ann_path.clone(),
        offset: byte_offset(&text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let source = ann.source.unwrap_or_default();
    ann.images
        .iter()
        .map(|entry| {
            let path = dir.join(&entry.file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let image = read_pgm(&bytes, &path)?;
            let boxes = entry
                .boxes
                .iter()
                .map(|b| {
                    BBox::new(b[0], b[1], b[2], b[3]).map_err(|e| Error::Format {
                        file: ann_path.clone(),
                        offset: 0,
                        message: format!("{}: {e}", entry.file),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ImageSample { image, boxes, source })
        })
        .collect()
}
