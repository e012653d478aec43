//! Minimal PNG line charts (axes, ticks, numeric labels, colored series).

use crate::error::Result;
use image::{Rgb, RgbImage};
use std::path::Path;

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const COLORS: [[u8; 3]; 6] = [
    [214, 69, 65],
    [31, 119, 180],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [23, 190, 207],
];

// 3x5 bitmap glyphs for the characters needed on tick labels.
fn glyph(c: char) -> Option<[u8; 5]> {
    let g = match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        _ => return None,
    };
    Some(g)
}

fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, color: [u8; 3]) {
    let mut cx = x;
    for c in text.chars() {
        if let Some(g) = glyph(c) {
            for (ri, row) in g.iter().enumerate() {
                for ci in 0..3 {
                    if row >> (2 - ci) & 1 == 1 {
                        put(img, cx + ci as i64, y + ri as i64, color);
                    }
                }
            }
        }
        cx += 4;
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(color));
    }
}

fn draw_line(img: &mut RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, color: [u8; 3]) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()) as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        put(
            img,
            (x0 + (x1 - x0) * t).round() as i64,
            (y0 + (y1 - y0) * t).round() as i64,
            color,
        );
    }
}

/// Renders the series as a line chart with axes and tick labels.
pub fn render_line_chart(path: &Path, series: &[Series]) -> Result<()> {
    let (w, h) = (640u32, 420u32);
    let (ml, mr, mt, mb) = (56.0, 16.0, 16.0, 36.0);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));

    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (mut x0, mut x1) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (mut y0, mut y1) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
    if !x0.is_finite() || x0 == x1 {
        x0 -= 0.5;
        x1 = x0 + 1.0;
    }
    if !y0.is_finite() || y0 == y1 {
        y0 -= 0.5;
        y1 = y0 + 1.0;
    }
    let px = |x: f64| ml + (x - x0) / (x1 - x0) * (w as f64 - ml - mr);
    let py = |y: f64| (h as f64 - mb) - (y - y0) / (y1 - y0) * (h as f64 - mt - mb);

    let axis = [60, 60, 60];
    let grid = [225, 225, 225];
    for i in 0..=5 {
        let t = i as f64 / 5.0;
        let gx = px(x0 + t * (x1 - x0));
        let gy = py(y0 + t * (y1 - y0));
        draw_line(&mut img, gx, mt, gx, h as f64 - mb, grid);
        draw_line(&mut img, ml, gy, w as f64 - mr, gy, grid);
        draw_text(
            &mut img,
            gx as i64 - 8,
            (h as f64 - mb) as i64 + 6,
            &format!("{:.2}", x0 + t * (x1 - x0)),
            axis,
        );
        draw_text(
            &mut img,
            8,
            gy as i64 - 2,
            &format!("{:.2}", y0 + t * (y1 - y0)),
            axis,
        );
    }
    draw_line(&mut img, ml, h as f64 - mb, w as f64 - mr, h as f64 - mb, axis);
    draw_line(&mut img, ml, mt, ml, h as f64 - mb, axis);

    for (si, s) in series.iter().enumerate() {
        let color = COLORS[si % COLORS.len()];
        for pair in s.points.windows(2) {
            draw_line(
                &mut img,
                px(pair[0].0),
                py(pair[0].1),
                px(pair[1].0),
                py(pair[1].1),
                color,
            );
        }
        for p in &s.points {
            for dx in -1i64..=1 {
                for dy in -1i64..=1 {
                    put(&mut img, px(p.0) as i64 + dx, py(p.1) as i64 + dy, color);
                }
            }
        }
        // Legend swatch, one row per series (labels are in the CSV).
        let ly = mt as i64 + 10 * si as i64;
        for dx in 0..14 {
            put(&mut img, (w as f64 - mr) as i64 - 40 + dx, ly, color);
        }
    }

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_file_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        render_line_chart(
            &path,
            &[Series {
                label: "a".into(),
                points: vec![(0.0, 0.1), (0.1, 0.5), (0.2, 0.4)],
            }],
        )
        .unwrap();
        let img = image::open(&path).unwrap();
        assert_eq!(img.width(), 640);
    }
}
