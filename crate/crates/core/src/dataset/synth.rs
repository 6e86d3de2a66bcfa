//! Seeded image synthesis.
//!
//! Rubbings: dark textured background, bright thick polyline glyphs in non-overlapping
//! boxes, thin bright random-walk cracks (unlabeled), salt-and-pepper noise.
//! Font library: one dark glyph on a clean white background.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GrayImage, ImageSample, Source};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::netcore::STRIDE;
use crate::seeding::{self, Domain};

const PLACEMENT_ATTEMPTS: usize = 100;
const GLYPH_MARGIN: usize = 3;
const GLYPH_RADIUS: f64 = 1.3;
const CRACK_RADIUS: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenSpec {
    /// Side of the square image, a multiple of 8.
    pub image_size: usize,
    /// Inclusive range of glyphs per rubbing.
    pub glyphs_per_image: (usize, usize),
    /// Inclusive range of cracks per rubbing.
    pub crack_count: (usize, usize),
    pub noise_density: f64,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            image_size: 128,
            glyphs_per_image: (2, 5),
            crack_count: (1, 3),
            noise_density: 0.02,
            seed: 0,
        }
    }
}

impl GenSpec {
    /// Defaults for font-library images: smaller canvas, no clutter.
    pub fn font_default() -> Self {
        GenSpec {
            image_size: 64,
            glyphs_per_image: (1, 1),
            crack_count: (0, 0),
            noise_density: 0.0,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 || self.image_size % STRIDE != 0 {
            return Err(Error::input(format!(
                "image_size must be a multiple of {STRIDE} and >= 32, got {}",
                self.image_size
            )));
        }
        if self.glyphs_per_image.0 > self.glyphs_per_image.1 || self.crack_count.0 > self.crack_count.1 {
            return Err(Error::input("count ranges must satisfy min <= max"));
        }
        if !(0.0..=1.0).contains(&self.noise_density) {
            return Err(Error::input("noise_density must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Paints discs of `radius` along a polyline; returns the painted pixels' bounds
/// `(min_x, min_y, max_x, max_y)`, inclusive.
fn draw_polyline(
    img: &mut GrayImage,
    points: &[(f64, f64)],
    radius: f64,
    value: f64,
) -> Option<(usize, usize, usize, usize)> {
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    let r2 = radius * radius;
    let mut stamp = |cx: f64, cy: f64, img: &mut GrayImage| {
        let x0 = (cx - radius - 0.5).floor().max(0.0) as usize;
        let y0 = (cy - radius - 0.5).floor().max(0.0) as usize;
        let x1 = ((cx + radius).ceil() as usize).min(img.width - 1);
        let y1 = ((cy + radius).ceil() as usize).min(img.height - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                if dx * dx + dy * dy <= r2 {
                    img.set(x, y, value);
                    bounds = Some(match bounds {
                        None => (x, y, x, y),
                        Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
                    });
                }
            }
        }
    };
    for seg in points.windows(2) {
        let (ax, ay) = seg[0];
        let (bx, by) = seg[1];
        let len = ((bx - ax).powi(2) + (by - ay).powi(2)).sqrt();
        let steps = (len * 4.0).ceil().max(1.0) as usize;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            stamp(ax + t * (bx - ax), ay + t * (by - ay), img);
        }
    }
    bounds
}

/// Random connected polyline of 3..=6 segments inside `[x0, x1) x [y0, y1)` that spans
/// most of the region.
fn glyph_points(rng: &mut ChaCha8Rng, x0: f64, y0: f64, x1: f64, y1: f64, inset: f64) -> Vec<(f64, f64)> {
    let (lx, ly, hx, hy) = (x0 + inset, y0 + inset, x1 - inset, y1 - inset);
    let segments = rng.gen_range(3..=6);
    for _ in 0..50 {
        let pts: Vec<(f64, f64)> = (0..=segments)
            .map(|_| (rng.gen_range(lx..hx), rng.gen_range(ly..hy)))
            .collect();
        let span = |f: fn(&(f64, f64)) -> f64| {
            let lo = pts.iter().map(f).fold(f64::INFINITY, f64::min);
            let hi = pts.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
            hi - lo
        };
        if span(|p| p.0) >= 0.6 * (hx - lx) && span(|p| p.1) >= 0.6 * (hy - ly) {
            return pts;
        }
    }
    // fallback: a zig-zag across the region
    let mut pts = vec![(lx, ly), (hx, hy)];
    for _ in 1..segments {
        pts.push((rng.gen_range(lx..hx), rng.gen_range(ly..hy)));
    }
    pts
}

fn draw_glyph(
    img: &mut GrayImage,
    rng: &mut ChaCha8Rng,
    region: (usize, usize, usize, usize),
    value: f64,
) -> BBox {
    let (x0, y0, w, h) = region;
    let pts = glyph_points(
        rng,
        x0 as f64,
        y0 as f64,
        (x0 + w) as f64,
        (y0 + h) as f64,
        GLYPH_RADIUS + 0.5,
    );
    let (bx0, by0, bx1, by1) =
        draw_polyline(img, &pts, GLYPH_RADIUS, value).expect("glyph stroke paints pixels");
    BBox {
        x1: bx0 as f64,
        y1: by0 as f64,
        x2: (bx1 + 1) as f64,
        y2: (by1 + 1) as f64,
    }
}

fn overlaps(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize), margin: usize) -> bool {
    let (ax, ay, aw, ah) = a;
    let (bx, by, bw, bh) = b;
    ax < bx + bw + margin && bx < ax + aw + margin && ay < by + bh + margin && by < ay + ah + margin
}

/// Coarse value noise, bilinearly upsampled.
fn smooth_noise(rng: &mut ChaCha8Rng, size: usize, cell: usize) -> Vec<f64> {
    let g = size / cell + 2;
    let grid: Vec<f64> = (0..g * g).map(|_| rng.gen::<f64>()).collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let fy = y as f64 / cell as f64;
        let (iy, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..size {
            let fx = x as f64 / cell as f64;
            let (ix, tx) = (fx.floor() as usize, fx.fract());
            let v = |i: usize, j: usize| grid[i * g + j];
            out[y * size + x] = (1.0 - ty) * ((1.0 - tx) * v(iy, ix) + tx * v(iy, ix + 1))
                + ty * ((1.0 - tx) * v(iy + 1, ix) + tx * v(iy + 1, ix + 1));
        }
    }
    out
}

fn draw_crack(img: &mut GrayImage, rng: &mut ChaCha8Rng, value: f64) {
    let size = img.width as f64;
    // start on an edge, head inward
    let (mut x, mut y, mut angle) = match rng.gen_range(0..4) {
        0 => (0.0, rng.gen_range(0.0..size), 0.0),
        1 => (size - 1.0, rng.gen_range(0.0..size), std::f64::consts::PI),
        2 => (rng.gen_range(0.0..size), 0.0, std::f64::consts::FRAC_PI_2),
        _ => (rng.gen_range(0.0..size), size - 1.0, -std::f64::consts::FRAC_PI_2),
    };
    angle += rng.gen_range(-0.5..0.5);
    let steps = rng.gen_range((size * 0.7) as usize..=(size * 1.6) as usize);
    let mut pts = vec![(x, y)];
    for _ in 0..steps {
        angle += rng.gen_range(-0.35..0.35);
        x += angle.cos() * 1.5;
        y += angle.sin() * 1.5;
        if x < 0.0 || y < 0.0 || x >= size || y >= size {
            break;
        }
        pts.push((x, y));
    }
    draw_polyline(img, &pts, CRACK_RADIUS, value);
}

/// Rubbing-like detection image number `index`; a pure function of `(spec, index)`.
pub fn gen_rubbing(spec: &GenSpec, index: usize) -> Result<ImageSample> {
    spec.validate()?;
    let size = spec.image_size;
    let mut rng = seeding::stream(spec.seed, Domain::Rubbing, index as u64);

    let base = rng.gen_range(0.08..0.16);
    let blotch = smooth_noise(&mut rng, size, 16);
    let mut img = GrayImage::filled(size, size, 0.0);
    for (p, b) in img.pixels.iter_mut().zip(&blotch) {
        *p = base + 0.08 * b + rng.gen_range(0.0..0.05);
    }

    let ink = rng.gen_range(0.8..0.95);
    let n_glyphs = rng.gen_range(spec.glyphs_per_image.0..=spec.glyphs_per_image.1);
    let (min_side, max_side) = (size * 9 / 64, size * 17 / 64);
    let mut regions: Vec<(usize, usize, usize, usize)> = Vec::new();
    for _ in 0..n_glyphs {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let w = rng.gen_range(min_side..=max_side);
            let h = rng.gen_range(min_side..=max_side);
            let x = rng.gen_range(2..size - w - 2);
            let y = rng.gen_range(2..size - h - 2);
            let cand = (x, y, w, h);
            if regions.iter().all(|&r| !overlaps(r, cand, GLYPH_MARGIN)) {
                regions.push(cand);
                break;
            }
        }
    }
    let boxes: Vec<BBox> = regions
        .iter()
        .map(|&r| draw_glyph(&mut img, &mut rng, r, ink))
        .collect();

    let n_cracks = rng.gen_range(spec.crack_count.0..=spec.crack_count.1);
    for _ in 0..n_cracks {
        draw_crack(&mut img, &mut rng, ink);
    }

    if spec.noise_density > 0.0 {
        for p in img.pixels.iter_mut() {
            if rng.gen::<f64>() < spec.noise_density {
                *p = if rng.gen::<bool>() { 1.0 } else { 0.0 };
            }
        }
    }

    Ok(ImageSample {
        image: img,
        boxes,
        source: Source::Rubbing,
    })
}

/// Clean font-library glyph number `index`: dark strokes on white, tight box.
pub fn gen_font(spec: &GenSpec, index: usize) -> Result<ImageSample> {
    spec.validate()?;
    let size = spec.image_size;
    let mut rng = seeding::stream(spec.seed, Domain::Font, index as u64);
    let mut img = GrayImage::filled(size, size, 1.0);
    let (min_side, max_side) = (size * 5 / 16, size * 9 / 16);
    let w = rng.gen_range(min_side..=max_side);
    let h = rng.gen_range(min_side..=max_side);
    let x = rng.gen_range(2..size - w - 2);
    let y = rng.gen_range(2..size - h - 2);
    let mut draw_rng = seeding::stream(spec.seed, Domain::FontDraw, index as u64);
    let b = draw_glyph(&mut img, &mut draw_rng, (x, y, w, h), 0.0);
    Ok(ImageSample {
        image: img,
        boxes: vec![b],
        source: Source::FontLibrary,
    })
}
