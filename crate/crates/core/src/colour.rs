//! Colour representations: RGB images, hexcone HSV, the cone embedding used
//! for HSV distances, and the 8×40 WCS stimulus grid.

use std::f64::consts::{PI, TAU};

use crate::error::{input_err, Result};

/// An RGB image stored row-major as `H×W×3` values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RgbImage {
    /// Builds an image, rejecting empty dimensions, wrong buffer lengths and
    /// out-of-range or non-finite channel values.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(input_err(format!("image must be non-empty, got {height}x{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(input_err(format!(
                "expected {} channel values for a {height}x{width} image, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(input_err(format!("channel value {bad} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    /// Builds an image from arbitrary values, clamping every channel into `[0, 1]`.
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    pub fn from_pixels(height: usize, width: usize, pixels: &[[f64; 3]]) -> Result<Self> {
        Self::new(height, width, pixels.iter().flatten().copied().collect())
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Result<Self> {
        let data = img.as_raw().iter().map(|&b| f64::from(b) / 255.0).collect();
        Self::new(img.height() as usize, img.width() as usize, data)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self.data.iter().map(|&v| to_byte(v)).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let o = (row * self.width + col) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    /// Reflect-pads bottom and right edges so both dimensions become
    /// multiples of `multiple`.
    pub fn reflect_pad_to_multiple(&self, multiple: usize) -> RgbImage {
        let h = self.height.div_ceil(multiple) * multiple;
        let w = self.width.div_ceil(multiple) * multiple;
        if h == self.height && w == self.width {
            return self.clone();
        }
        let mut data = Vec::with_capacity(h * w * 3);
        for r in 0..h {
            let sr = reflect_index(r, self.height);
            for c in 0..w {
                let sc = reflect_index(c, self.width);
                data.extend_from_slice(&self.pixel(sr, sc));
            }
        }
        RgbImage { height: h, width: w, data }
    }

    /// Top-left `height×width` window.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<RgbImage> {
        if top + height > self.height || left + width > self.width {
            return Err(input_err("crop window exceeds image bounds"));
        }
        let mut data = Vec::with_capacity(height * width * 3);
        for r in top..top + height {
            let o = (r * self.width + left) * 3;
            data.extend_from_slice(&self.data[o..o + width * 3]);
        }
        RgbImage::new(height, width, data)
    }

    pub fn flip_horizontal(&self) -> RgbImage {
        let mut data = Vec::with_capacity(self.data.len());
        for r in 0..self.height {
            for c in (0..self.width).rev() {
                data.extend_from_slice(&self.pixel(r, c));
            }
        }
        RgbImage { height: self.height, width: self.width, data }
    }

    /// Mean squared error against another image of the same size.
    pub fn mse(&self, other: &RgbImage) -> Result<f64> {
        if self.height != other.height || self.width != other.width {
            return Err(input_err("image dimensions differ"));
        }
        let sum: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(sum / self.data.len() as f64)
    }
}

/// Mirror index without repeating the edge pixel (`reflect` padding).
pub(crate) fn reflect_index(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let m = i % period;
    if m < len {
        m
    } else {
        period - m
    }
}

pub(crate) fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// A hexcone HSV pixel with hue in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HsvPixel {
    pub h: f64,
    pub s: f64,
    pub v: f64,
}

impl HsvPixel {
    /// Normalises hue into `[0, 2π)` and clamps saturation and value.
    pub fn new(h: f64, s: f64, v: f64) -> Self {
        let mut h = h.rem_euclid(TAU);
        if h >= TAU {
            h = 0.0;
        }
        Self { h, s: s.clamp(0.0, 1.0), v: v.clamp(0.0, 1.0) }
    }
}

pub fn rgb_pixel_to_hsv(rgb: [f64; 3]) -> HsvPixel {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let sector = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    HsvPixel::new(sector * PI / 3.0, s, v)
}

pub fn hsv_pixel_to_rgb(p: HsvPixel) -> [f64; 3] {
    let c = p.v * p.s;
    let hp = p.h / (PI / 3.0);
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = p.v - c;
    [r + m, g + m, b + m]
}

/// Converts every pixel to HSV, row-major.
pub fn rgb_to_hsv(img: &RgbImage) -> Vec<HsvPixel> {
    img.pixels().map(rgb_pixel_to_hsv).collect()
}

/// Squared distance between two HSV pixels on the colour cone:
/// `(v2−v1)² + s1²v1² + s2²v2² − 2·s1·s2·v1·v2·cos(h2−h1)`.
pub fn hsv_squared_distance(a: HsvPixel, b: HsvPixel) -> f64 {
    let dv = b.v - a.v;
    let ra = a.s * a.v;
    let rb = b.s * b.v;
    let d = dv * dv + (ra * ra + rb * rb) - 2.0 * (ra * rb) * (b.h - a.h).cos();
    d.max(0.0)
}

/// Embeds a pixel on the cone as `(s·v·cos h, s·v·sin h, v)`.
pub fn hsv_to_cone(p: HsvPixel) -> [f64; 3] {
    let r = p.s * p.v;
    [r * p.h.cos(), r * p.h.sin(), p.v]
}

/// Inverse of [`hsv_to_cone`] for points inside the cone. Hue of an
/// achromatic point is reported as 0.
pub fn cone_to_hsv(c: [f64; 3]) -> HsvPixel {
    let radius = c[0].hypot(c[1]);
    let v = c[2];
    let s = if v > 0.0 { radius / v } else { 0.0 };
    let h = if radius > 0.0 { c[1].atan2(c[0]) } else { 0.0 };
    HsvPixel::new(h, s, v)
}

/// A chip on the WCS stimulus grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Chip {
    pub row: usize,
    pub col: usize,
}

impl Chip {
    pub fn flat(self) -> usize {
        self.row * WcsGrid::COLS + self.col
    }

    pub fn from_flat(i: usize) -> Self {
        Self { row: i / WcsGrid::COLS, col: i % WcsGrid::COLS }
    }
}

/// The 8 value rows × 40 hue columns stimulus grid. Row 0 is the darkest
/// value bin; column 0 starts at hue 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WcsGrid;

impl WcsGrid {
    pub const ROWS: usize = 8;
    pub const COLS: usize = 40;
    pub const CHIPS: usize = Self::ROWS * Self::COLS;

    /// Hue centre of column `col`: `(2k+1)π/40`.
    pub fn hue_center(col: usize) -> f64 {
        (2 * col + 1) as f64 * PI / Self::COLS as f64
    }

    /// Value centre of row `row`: `(2r+1)/16`.
    pub fn value_center(row: usize) -> f64 {
        (2 * row + 1) as f64 / (2 * Self::ROWS) as f64
    }

    /// Centre of a chip as an HSV pixel at full saturation.
    pub fn chip_center(chip: Chip) -> HsvPixel {
        HsvPixel::new(Self::hue_center(chip.col), 1.0, Self::value_center(chip.row))
    }

    /// Hue expressed in column units, `[0, 40)`.
    pub fn hue_position(h: f64) -> f64 {
        (h.rem_euclid(TAU) * Self::COLS as f64 / TAU).min(Self::COLS as f64 - f64::EPSILON * 64.0)
    }

    /// Circular distance, in column units, from hue position `t` to the
    /// centre of column `col`. Working in column units keeps seam ties exact.
    pub fn hue_bin_distance(t: f64, col: usize) -> f64 {
        let d = (t - (col as f64 + 0.5)).abs();
        d.min(Self::COLS as f64 - d)
    }

    pub fn chips() -> impl Iterator<Item = Chip> {
        (0..Self::CHIPS).map(Chip::from_flat)
    }

    /// Nearest chip by (hue, value); hue compared circularly. Ties go to the
    /// lower column, then the lower row. Saturation is ignored.
    pub fn pixel_to_chip(p: HsvPixel) -> Chip {
        let t = Self::hue_position(p.h);
        let base = (t.floor() as usize).min(Self::COLS - 1);
        let col = nearest_of(
            [(base + Self::COLS - 1) % Self::COLS, base, (base + 1) % Self::COLS],
            |c| Self::hue_bin_distance(t, c),
        );
        let row_base = ((p.v * Self::ROWS as f64).floor() as isize).clamp(0, Self::ROWS as isize - 1) as usize;
        let row = nearest_of(
            [row_base.saturating_sub(1), row_base, (row_base + 1).min(Self::ROWS - 1)],
            |r| (p.v - Self::value_center(r)).abs(),
        );
        Chip { row, col }
    }
}

fn nearest_of(candidates: [usize; 3], dist: impl Fn(usize) -> f64) -> usize {
    let mut best = candidates[0];
    let mut best_d = dist(best);
    for &c in &candidates[1..] {
        let d = dist(c);
        if d < best_d || (d == best_d && c < best) {
            best = c;
            best_d = d;
        }
    }
    best
}

/// Absolute angular difference folded into `[0, π]`.
pub fn circular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}
