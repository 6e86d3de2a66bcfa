//! RoI Align pooling of boxes from a feature map into flat descriptors.
//!
//! Box corners are mapped to feature coordinates by `x / stride` with no half-pixel
//! offset. Each of the `out_size x out_size` bins averages a 2x2 grid of bilinear
//! samples. Samples farther than one cell outside the map read as zero; samples in the
//! one-cell border band are clamped onto the edge, so a constant map pools to that
//! constant for any box inside the image.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::netcore::{FeatureMap, Tensor};

pub const DEFAULT_OUT_SIZE: usize = 4;
const SAMPLES_PER_AXIS: usize = 2;
const NORM_EPS: f64 = 1e-12;

/// Flattened (channel-major) pooled descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub normalized: bool,
    /// Set when the box missed the map entirely or normalization saw a zero vector.
    pub degenerate: bool,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Self {
        FeatureVector {
            values,
            normalized: false,
            degenerate: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Bilinear taps `(cell index, weight)` for every output bin of one box.
#[derive(Debug, Clone)]
pub struct RoiSampler {
    out_size: usize,
    map_cells: usize,
    bins: Vec<Vec<(usize, f64)>>,
    degenerate: bool,
}

fn bilinear_taps(y: f64, x: f64, h: usize, w: usize, weight: f64, taps: &mut Vec<(usize, f64)>) -> bool {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return false;
    }
    let (y, x) = (y.max(0.0), x.max(0.0));
    let (mut y0, mut x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1);
    let (ly, lx);
    if y0 >= h - 1 {
        y0 = h - 1;
        y1 = h - 1;
        ly = 0.0;
    } else {
        y1 = y0 + 1;
        ly = y - y0 as f64;
    }
    if x0 >= w - 1 {
        x0 = w - 1;
        x1 = w - 1;
        lx = 0.0;
    } else {
        x1 = x0 + 1;
        lx = x - x0 as f64;
    }
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    for (cell, wt) in [
        (y0 * w + x0, hy * hx),
        (y0 * w + x1, hy * lx),
        (y1 * w + x0, ly * hx),
        (y1 * w + x1, ly * lx),
    ] {
        if wt != 0.0 {
            taps.push((cell, wt * weight));
        }
    }
    true
}

impl RoiSampler {
    pub fn new(map_h: usize, map_w: usize, stride: usize, b: &BBox, out_size: usize) -> Result<Self> {
        b.validate()?;
        if out_size == 0 || map_h == 0 || map_w == 0 || stride == 0 {
            return Err(Error::input("roi_align needs positive output size, map dims and stride"));
        }
        let s = stride as f64;
        let (x1, y1) = (b.x1 / s, b.y1 / s);
        let bin_w = (b.x2 / s - x1) / out_size as f64;
        let bin_h = (b.y2 / s - y1) / out_size as f64;
        let n = SAMPLES_PER_AXIS as f64;
        let weight = 1.0 / (n * n);
        let mut bins = Vec::with_capacity(out_size * out_size);
        let mut any_inside = false;
        for py in 0..out_size {
            for px in 0..out_size {
                let mut taps = Vec::with_capacity(16);
                for iy in 0..SAMPLES_PER_AXIS {
                    let y = y1 + (py as f64 + (iy as f64 + 0.5) / n) * bin_h;
                    for ix in 0..SAMPLES_PER_AXIS {
                        let x = x1 + (px as f64 + (ix as f64 + 0.5) / n) * bin_w;
                        any_inside |= bilinear_taps(y, x, map_h, map_w, weight, &mut taps);
                    }
                }
                bins.push(taps);
            }
        }
        Ok(RoiSampler {
            out_size,
            map_cells: map_h * map_w,
            bins,
            degenerate: !any_inside,
        })
    }

    pub fn for_map(map: &FeatureMap, b: &BBox, out_size: usize) -> Result<Self> {
        Self::new(map.height(), map.width(), map.stride, b, out_size)
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn pool(&self, map: &FeatureMap) -> FeatureVector {
        let data = map.tensor.data();
        let nb = self.out_size * self.out_size;
        let mut values = vec![0.0; map.channels() * nb];
        for c in 0..map.channels() {
            let plane = &data[c * self.map_cells..(c + 1) * self.map_cells];
            for (bi, taps) in self.bins.iter().enumerate() {
                values[c * nb + bi] = taps.iter().map(|&(cell, w)| w * plane[cell]).sum();
            }
        }
        FeatureVector {
            values,
            normalized: false,
            degenerate: self.degenerate,
        }
    }

    /// Adds the pooled-output gradient `grad` into `grad_map` (same shape as the map).
    pub fn accumulate_grad(&self, grad: &[f64], grad_map: &mut Tensor) {
        let nb = self.out_size * self.out_size;
        let channels = grad_map.shape()[0];
        debug_assert_eq!(grad.len(), channels * nb);
        let data = grad_map.data_mut();
        for c in 0..channels {
            let plane = &mut data[c * self.map_cells..(c + 1) * self.map_cells];
            for (bi, taps) in self.bins.iter().enumerate() {
                let g = grad[c * nb + bi];
                if g == 0.0 {
                    continue;
                }
                for &(cell, w) in taps {
                    plane[cell] += w * g;
                }
            }
        }
    }
}

/// Pools `b` from `map` into an unnormalized `channels * out_size^2` vector.
pub fn roi_align(map: &FeatureMap, b: &BBox, out_size: usize) -> Result<FeatureVector> {
    Ok(RoiSampler::for_map(map, b, out_size)?.pool(map))
}

/// Scales to unit length; vectors with norm below `1e-12` come back as zeros, flagged.
pub fn l2_normalize(v: &FeatureVector) -> FeatureVector {
    let norm = v.norm();
    if norm < NORM_EPS {
        return FeatureVector {
            values: vec![0.0; v.dim()],
            normalized: true,
            degenerate: true,
        };
    }
    FeatureVector {
        values: v.values.iter().map(|x| x / norm).collect(),
        normalized: true,
        degenerate: v.degenerate,
    }
}

/// Gradient of `x / |x|` at `raw`, given the gradient on the normalized output.
pub fn l2_normalize_backward(raw: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < NORM_EPS {
        return vec![0.0; raw.len()];
    }
    let proj: f64 = raw.iter().zip(grad_out).map(|(x, g)| x * g).sum::<f64>() / norm;
    raw.iter()
        .zip(grad_out)
        .map(|(x, g)| (g - (x / norm) * proj) / norm)
        .collect()
}

/// Which pipeline group a feature came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureRole {
    /// Positive anchors on rubbing images.
    Sample,
    /// Positive anchors on font-library images.
    Positive,
    /// Negative anchors on rubbing images.
    Negative,
}

impl fmt::Display for FeatureRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureRole::Sample => "sample",
            FeatureRole::Positive => "positive",
            FeatureRole::Negative => "negative",
        })
    }
}

impl FromStr for FeatureRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample" => Ok(FeatureRole::Sample),
            "positive" => Ok(FeatureRole::Positive),
            "negative" => Ok(FeatureRole::Negative),
            other => Err(Error::input(format!("unknown feature role {other:?}"))),
        }
    }
}

/// Writes `role,f0,..,f{d-1}` with a header line.
pub fn write_feature_csv<W: Write>(mut out: W, rows: &[(FeatureRole, FeatureVector)]) -> std::io::Result<()> {
    let dim = rows.first().map_or(0, |(_, v)| v.dim());
    write!(out, "role")?;
    for i in 0..dim {
        write!(out, ",f{i}")?;
    }
    writeln!(out)?;
    for (role, v) in rows {
        write!(out, "{role}")?;
        for x in &v.values {
            write!(out, ",{x}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn save_feature_csv(path: &Path, rows: &[(FeatureRole, FeatureVector)]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_feature_csv(&mut w, rows).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a feature dump; a leading `role,...` header is optional.
pub fn load_feature_csv(path: &Path) -> Result<Vec<(FeatureRole, FeatureVector)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut rows = Vec::new();
    let mut offset = 0usize;
    let mut dim = None;
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line_len = line.len() + 1;
        let fail = |message: String| Error::Format {
            file: path.to_path_buf(),
            offset,
            message,
        };
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with("role,") || trimmed == "role" {
            offset += line_len;
            continue;
        }
        let mut fields = trimmed.split(',');
        let role: FeatureRole = fields
            .next()
            .unwrap_or_default()
            .parse()
            .map_err(|e: Error| fail(e.to_string()))?;
        let values = fields
            .map(|f| f.trim().parse::<f64>().map_err(|_| fail(format!("bad number {f:?}"))))
            .collect::<Result<Vec<_>>>()?;
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(fail(format!("row has {} values, expected {d}", values.len())))
            }
            _ => {}
        }
        rows.push((role, FeatureVector::new(values)));
        offset += line_len;
    }
    Ok(rows)
}
