//! Minimal raster plots written as PNG: loss curves, accuracy bars and
//! sample grids. Axis extremes are labelled with a 3x5 bitmap font.

use clab::imageio::{encode_rgb8_png, Image};
use clab::Result;

pub type Rgb = [u8; 3];

pub const PALETTE: [Rgb; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

const WHITE: Rgb = [255, 255, 255];
const AXIS: Rgb = [60, 60, 60];
const GRID: Rgb = [225, 225, 225];

pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Canvas {
    pub fn new(width: usize, height: usize, bg: Rgb) -> Self {
        Self {
            width,
            height,
            rgb: bg.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    pub fn set(&mut self, x: i64, y: i64, c: Rgb) {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            return;
        }
        let o = (y as usize * self.width + x as usize) * 3;
        self.rgb[o..o + 3].copy_from_slice(&c);
    }

    pub fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.set(x, y, c);
            }
        }
    }

    /// Bresenham segment.
    pub fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, c);
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

    /// Draws `s` with its top-left corner at `(x, y)`; unknown characters
    /// render as blanks.
    pub fn text(&mut self, x: i64, y: i64, s: &str, scale: i64, c: Rgb) {
        for (i, ch) in s.chars().enumerate() {
            let g = glyph(ch);
            for (row, bits) in g.iter().enumerate() {
                for col in 0..3 {
                    if bits >> (2 - col) & 1 == 1 {
                        let (px, py) = (x + (i as i64 * 4 + col) * scale, y + row as i64 * scale);
                        self.fill_rect(px, py, px + scale - 1, py + scale - 1, c);
                    }
                }
            }
        }
    }

    pub fn png(&self) -> Result<Vec<u8>> {
        encode_rgb8_png(self.width, self.height, &self.rgb)
    }
}

fn glyph(c: char) -> [u8; 5] {
    match c {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 3, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 2, 2],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        '-' => [0, 0, 7, 0, 0],
        '+' => [0, 2, 7, 2, 0],
        'e' => [0, 7, 7, 4, 7],
        _ => [0; 5],
    }
}

fn label(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e6 {
        format!("{v:.0}")
    } else if v.abs() < 1e-2 || v.abs() >= 1e4 {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

/// One polyline of `(x, y)` points.
pub struct Series {
    pub points: Vec<(f64, f64)>,
    pub color: Rgb,
}

const MARGIN_L: i64 = 44;
const MARGIN_R: i64 = 10;
const MARGIN_T: i64 = 14;
const MARGIN_B: i64 = 22;

/// Line chart over the joint extent of all series; non-finite points are
/// skipped.
pub fn line_plot(series: &[Series], width: usize, height: usize) -> Result<Vec<u8>> {
    let mut c = Canvas::new(width, height, WHITE);
    let pts = || series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts() {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let (pl, pr, pt, pb) = (MARGIN_L, width as i64 - MARGIN_R, MARGIN_T, height as i64 - MARGIN_B);
    let map = |x: f64, y: f64| {
        let px = pl as f64 + (x - x0) / (x1 - x0) * (pr - pl) as f64;
        let py = pb as f64 - (y - y0) / (y1 - y0) * (pb - pt) as f64;
        (px.round() as i64, py.round() as i64)
    };
    for k in 1..4 {
        let y = pt + (pb - pt) * k / 4;
        c.line((pl, y), (pr, y), GRID);
    }
    for s in series {
        let mut prev = None;
        for &(x, y) in s.points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()) {
            let p = map(x, y);
            if let Some(q) = prev {
                c.line(q, p, s.color);
            }
            prev = Some(p);
        }
    }
    c.line((pl, pt), (pl, pb), AXIS);
    c.line((pl, pb), (pr, pb), AXIS);
    c.text(2, pt - 4, &label(y1), 1, AXIS);
    c.text(2, pb - 4, &label(y0), 1, AXIS);
    c.text(pl, pb + 6, &label(x0), 1, AXIS);
    let xl = label(x1);
    c.text(pr - 4 * xl.len() as i64, pb + 6, &xl, 1, AXIS);
    c.png()
}

/// Grouped bars in `[0, 1]`: one group per entry, one bar per value,
/// colours from [`PALETTE`]. `reference` draws a horizontal line (e.g. a
/// chance rate).
pub fn bar_chart(groups: &[Vec<f64>], reference: Option<f64>, width: usize, height: usize) -> Result<Vec<u8>> {
    let mut c = Canvas::new(width, height, WHITE);
    let (pl, pr, pt, pb) = (MARGIN_L, width as i64 - MARGIN_R, MARGIN_T, height as i64 - MARGIN_B);
    let ymap = |v: f64| pb - (v.clamp(0.0, 1.0) * (pb - pt) as f64).round() as i64;
    for k in 1..=4 {
        let y = ymap(k as f64 / 4.0);
        c.line((pl, y), (pr, y), GRID);
    }
    let n = groups.len().max(1) as i64;
    let slot = (pr - pl) / n;
    for (g, vals) in groups.iter().enumerate() {
        let m = vals.len().max(1) as i64;
        let bw = ((slot - 6) / m).max(1);
        let gx = pl + g as i64 * slot + 3;
        for (i, &v) in vals.iter().enumerate() {
            let x = gx + i as i64 * bw;
            if v.is_finite() && v > 0.0 {
                c.fill_rect(x, ymap(v), x + bw - 2, pb - 1, PALETTE[i % PALETTE.len()]);
            }
        }
        c.text(gx, pb + 6, &(g + 1).to_string(), 1, AXIS);
    }
    if let Some(r) = reference {
        let y = ymap(r);
        for x in (pl..pr).step_by(4) {
            c.line((x, y), (x + 1, y), [0, 0, 0]);
        }
    }
    c.line((pl, pt), (pl, pb), AXIS);
    c.line((pl, pb), (pr, pb), AXIS);
    c.text(2, pt - 2, "1.000", 1, AXIS);
    c.text(2, pb - 4, "0.000", 1, AXIS);
    c.png()
}

/// Tiles equally sized images row-major with a 1-pixel gray gutter.
pub fn image_grid(images: &[Image], cols: usize) -> Result<Image> {
    let (w, h) = images.first().map_or((1, 1), |i| (i.width, i.height));
    let cols = cols.clamp(1, images.len().max(1));
    let rows = images.len().div_ceil(cols).max(1);
    let (gw, gh) = (cols * (w + 1) + 1, rows * (h + 1) + 1);
    let mut grid = Image::new(gw, gh, vec![0.5; gw * gh * 3])?;
    for (k, img) in images.iter().enumerate() {
        if (img.width, img.height) != (w, h) {
            return Err(clab::Error::shape("image_grid", &[h, w], &[img.height, img.width]));
        }
        let (ox, oy) = (1 + (k % cols) * (w + 1), 1 + (k / cols) * (h + 1));
        for y in 0..h {
            for x in 0..w {
                grid.set(ox + x, oy + y, img.get(x, y));
            }
        }
    }
    Ok(grid)
}
