//! Static accuracy-vs-bits curve. No text rendering: series colours follow
//! the row order of `curves.csv`.

use cqlab::colour::RgbImage;

const W: usize = 480;
const H: usize = 320;
const MARGIN: usize = 32;
const SERIES: [[f64; 3]; 6] =
    [[0.12, 0.47, 0.71], [1.0, 0.5, 0.05], [0.17, 0.63, 0.17], [0.84, 0.15, 0.16], [0.58, 0.4, 0.74], [0.55, 0.34, 0.29]];

struct Canvas {
    data: Vec<f64>,
}

impl Canvas {
    fn put(&mut self, x: i64, y: i64, c: [f64; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < W && (y as usize) < H {
            let at = (y as usize * W + x as usize) * 3;
            self.data[at..at + 3].copy_from_slice(&c);
        }
    }

    fn line(&mut self, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: [f64; 3]) {
        let steps = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
            self.put(x.round() as i64, y.round() as i64, c);
        }
    }

    fn dot(&mut self, (x, y): (f64, f64), c: [f64; 3]) {
        for dy in -2..=2 {
            for dx in -2..=2 {
                self.put(x.round() as i64 + dx, y.round() as i64 + dy, c);
            }
        }
    }
}

/// `series`: per method, `(bits, accuracy)` points sorted by bits.
pub fn render_curves(series: &[Vec<(u32, f64)>]) -> RgbImage {
    let mut cv = Canvas { data: vec![1.0; W * H * 3] };
    let all_bits: Vec<u32> = series.iter().flatten().map(|p| p.0).collect();
    let lo = all_bits.iter().copied().min().unwrap_or(1) as f64;
    let hi = (all_bits.iter().copied().max().unwrap_or(1) as f64).max(lo + 1.0);
    let (left, right, top, bottom) = (MARGIN as f64, (W - MARGIN) as f64, MARGIN as f64 / 2.0, (H - MARGIN) as f64);
    let to_px = |b: u32, acc: f64| (left + (b as f64 - lo) / (hi - lo) * (right - left), bottom - acc.clamp(0.0, 1.0) * (bottom - top));

    let axis = [0.2; 3];
    let grid = [0.88; 3];
    for k in 1..=4 {
        let y = bottom - k as f64 / 4.0 * (bottom - top);
        cv.line((left, y), (right, y), grid);
    }
    cv.line((left, bottom), (right, bottom), axis);
    cv.line((left, bottom), (left, top), axis);
    for b in lo as u32..=hi as u32 {
        let (x, _) = to_px(b, 0.0);
        cv.line((x, bottom), (x, bottom + 5.0), axis);
    }

    for (i, s) in series.iter().enumerate() {
        let c = SERIES[i % SERIES.len()];
        for w in s.windows(2) {
            cv.line(to_px(w[0].0, w[0].1), to_px(w[1].0, w[1].1), c);
        }
        for &(b, a) in s {
            cv.dot(to_px(b, a), c);
        }
    }
    RgbImage::new(H, W, cv.data).expect("canvas colours are in range")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_series_colours() {
        let img = render_curves(&[vec![(1, 0.5), (2, 0.9)], vec![(1, 0.1)]]);
        assert_eq!((img.height(), img.width()), (H, W));
        let has = |c: [f64; 3]| img.pixels().any(|p| p == c);
        assert!(has(SERIES[0]) && has(SERIES[1]));
    }
}
