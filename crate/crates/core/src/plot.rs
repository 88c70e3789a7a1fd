//! Minimal line charts rendered straight to PNG.
//!
//! Charts have a white background, gray axes with five labeled ticks per
//! axis and one polyline with point markers per series. Tick labels use a
//! built-in 3×5 pixel font covering digits, `.`, `-` and `e`.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub points: Vec<(f64, f64)>,
    pub color: [u8; 3],
}

/// Distinct colors for successive series.
pub const PALETTE: [[u8; 3]; 4] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [148, 103, 189],
];

const MARGIN_LEFT: i64 = 44;
const MARGIN_RIGHT: i64 = 12;
const MARGIN_TOP: i64 = 12;
const MARGIN_BOTTOM: i64 = 24;
const TICKS: usize = 5;
const AXIS: [u8; 3] = [90, 90, 90];
const GRID: [u8; 3] = [225, 225, 225];

/// 3×5 glyphs, one row per `u8` (low three bits, left pixel in bit 2).
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        '-' => [0, 0, 7, 0, 0],
        'e' => [0, 7, 7, 4, 7],
        _ => return None,
    })
}

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = ((x1 - x0).signum(), (y1 - y0).signum());
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, c);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn marker(&mut self, x: i64, y: i64, c: [u8; 3]) {
        for dy in -2..=2 {
            for dx in -2..=2 {
                self.put(x + dx, y + dy, c);
            }
        }
    }

    /// Draws `text` with its top-left corner at `(x, y)`; unknown characters
    /// leave a gap.
    fn text(&mut self, x: i64, y: i64, text: &str, c: [u8; 3]) {
        for (i, ch) in text.chars().enumerate() {
            if let Some(rows) = glyph(ch) {
                for (r, bits) in rows.iter().enumerate() {
                    for b in 0..3 {
                        if bits >> (2 - b) & 1 == 1 {
                            self.put(x + i as i64 * 4 + b, y + r as i64, c);
                        }
                    }
                }
            }
        }
    }
}

/// Axis range padded so that a constant series still spans a visible band.
fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = if lo.abs() > 0.0 { lo.abs() * 0.1 } else { 0.5 };
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

/// Short tick label: up to three significant digits.
fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(1e-3..1e5).contains(&a) {
        return format!("{v:.1e}");
    }
    let decimals = (2 - a.log10().floor() as i64).clamp(0, 3) as usize;
    let s = format!("{v:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Draws every series into a `width × height` chart. Non-finite points are
/// skipped.
pub fn line_chart(series: &[Series], width: u32, height: u32) -> Result<RgbImage> {
    if (width as i64) < MARGIN_LEFT + MARGIN_RIGHT + 10
        || (height as i64) < MARGIN_TOP + MARGIN_BOTTOM + 10
    {
        return Err(Error::InvalidParameter(format!(
            "chart size {width}x{height} is too small"
        )));
    }
    let finite = || {
        series
            .iter()
            .flat_map(|s| s.points.iter())
            .filter(|(x, y)| x.is_finite() && y.is_finite())
    };
    let (x0, x1) = range(finite().map(|p| p.0));
    let (y0, y1) = range(finite().map(|p| p.1));
    let mut c = Canvas {
        img: RgbImage::from_pixel(width, height, Rgb([255, 255, 255])),
    };
    let (left, right) = (MARGIN_LEFT, width as i64 - MARGIN_RIGHT);
    let (top, bottom) = (MARGIN_TOP, height as i64 - MARGIN_BOTTOM);
    let px = |x: f64| left + ((x - x0) / (x1 - x0) * (right - left) as f64).round() as i64;
    let py = |y: f64| bottom - ((y - y0) / (y1 - y0) * (bottom - top) as f64).round() as i64;
    for i in 0..TICKS {
        let f = i as f64 / (TICKS - 1) as f64;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (gx, gy) = (px(xv), py(yv));
        c.line((gx, top), (gx, bottom), GRID);
        c.line((left, gy), (right, gy), GRID);
        let xl = tick_label(xv);
        c.text(gx - xl.len() as i64 * 2, bottom + 6, &xl, AXIS);
        let yl = tick_label(yv);
        c.text(left - 4 - yl.len() as i64 * 4, gy - 2, &yl, AXIS);
    }
    c.line((left, bottom), (right, bottom), AXIS);
    c.line((left, top), (left, bottom), AXIS);
    for s in series {
        let pts: Vec<(i64, i64)> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| (px(x), py(y)))
            .collect();
        for w in pts.windows(2) {
            c.line(w[0], w[1], s.color);
        }
        for &(x, y) in &pts {
            c.marker(x, y, s.color);
        }
    }
    Ok(c.img)
}

pub fn save_line_chart(
    series: &[Series],
    width: u32,
    height: u32,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    line_chart(series, width, height)?
        .save(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tick_labels() {
        assert_eq!(tick_label(0.0), "0");
        assert_eq!(tick_label(0.5), "0.5");
        assert_eq!(tick_label(12.0), "12");
        assert_eq!(tick_label(0.125), "0.125");
        assert_eq!(tick_label(-2.5), "-2.5");
        assert_eq!(tick_label(2.5e6), "2.5e6");
    }

    #[test]
    fn series_pixels_are_drawn() {
        let s = Series {
            points: vec![(0.0, 0.0), (1.0, 1.0)],
            color: [255, 0, 0],
        };
        let img = line_chart(&[s], 200, 120).unwrap();
        // End points land on the plot corners.
        assert_eq!(
            img.get_pixel(MARGIN_LEFT as u32, 120 - MARGIN_BOTTOM as u32)
                .0,
            [255, 0, 0]
        );
        assert_eq!(
            img.get_pixel(200 - MARGIN_RIGHT as u32, MARGIN_TOP as u32)
                .0,
            [255, 0, 0]
        );
        assert!(img.pixels().filter(|p| p.0 == [255, 0, 0]).count() > 100);
    }

    #[test]
    fn degenerate_input_still_renders() {
        let constant = Series {
            points: vec![(3.0, 0.7)],
            color: [0, 0, 255],
        };
        assert!(line_chart(&[constant], 160, 100).is_ok());
        assert!(line_chart(&[], 160, 100).is_ok());
        assert!(line_chart(&[], 20, 20).is_err());
    }
}
