//! Training curve images with their CSV twin, and augmentation QC montages.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;

use crate::train::HistoryRow;

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const GREY: Rgb<u8> = Rgb([170, 170, 170]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const BLUE: Rgb<u8> = Rgb([31, 119, 180]);
const ORANGE: Rgb<u8> = Rgb([255, 127, 14]);

/// 3×5 glyphs, one row per 3-bit group, top row first.
fn glyph(c: char) -> [u8; 5] {
    match c.to_ascii_lowercase() {
        'a' => [2, 5, 7, 5, 5],
        'b' => [6, 5, 6, 5, 6],
        'c' => [3, 4, 4, 4, 3],
        'd' => [6, 5, 5, 5, 6],
        'e' => [7, 4, 6, 4, 7],
        'f' => [7, 4, 6, 4, 4],
        'g' => [3, 4, 5, 5, 3],
        'h' => [5, 5, 7, 5, 5],
        'i' => [7, 2, 2, 2, 7],
        'j' => [1, 1, 1, 5, 2],
        'k' => [5, 5, 6, 5, 5],
        'l' => [4, 4, 4, 4, 7],
        'm' => [5, 7, 7, 5, 5],
        'n' => [6, 5, 5, 5, 5],
        'o' => [2, 5, 5, 5, 2],
        'p' => [6, 5, 6, 4, 4],
        'q' => [2, 5, 5, 6, 3],
        'r' => [6, 5, 6, 5, 5],
        's' => [3, 4, 2, 1, 6],
        't' => [7, 2, 2, 2, 2],
        'u' => [5, 5, 5, 5, 7],
        'v' => [5, 5, 5, 5, 2],
        'w' => [5, 5, 7, 7, 5],
        'x' => [5, 5, 2, 5, 5],
        'y' => [5, 5, 2, 2, 2],
        'z' => [7, 1, 2, 4, 7],
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [6, 1, 2, 4, 7],
        '3' => [6, 1, 2, 1, 6],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 6, 1, 6],
        '6' => [3, 4, 7, 5, 7],
        '7' => [7, 1, 1, 2, 2],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 6],
        '_' => [0, 0, 0, 0, 7],
        '-' => [0, 0, 7, 0, 0],
        '.' => [0, 0, 0, 0, 2],
        ',' => [0, 0, 0, 2, 4],
        _ => [0; 5],
    }
}

fn draw_text(img: &mut RgbImage, x0: u32, y0: u32, text: &str, color: Rgb<u8>) {
    for (i, c) in text.chars().enumerate() {
        let rows = glyph(c);
        for (r, bits) in rows.iter().enumerate() {
            for col in 0..3 {
                if bits & (4 >> col) != 0 {
                    let (x, y) = (x0 + i as u32 * 4 + col, y0 + r as u32);
                    if x < img.width() && y < img.height() {
                        img.put_pixel(x, y, color);
                    }
                }
            }
        }
    }
}

fn draw_line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        for (dx, dy) in [(0i64, 0i64), (1, 0), (0, 1)] {
            let (px, py) = (x.round() as i64 + dx, y.round() as i64 + dy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, color);
            }
        }
    }
}

fn plot(series: &[(&str, Vec<f64>, Rgb<u8>)], path: &Path) -> Result<(), String> {
    let (w, h, pad) = (480u32, 300u32, 30.0);
    let mut img = RgbImage::from_pixel(w, h, WHITE);
    let finite = series.iter().flat_map(|(_, v, _)| v.iter().copied()).filter(|v| v.is_finite());
    let (mut lo, mut hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let n = series.iter().map(|(_, v, _)| v.len()).max().unwrap_or(1);
    let sx = |i: usize| pad + (w as f64 - 2.0 * pad) * if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
    let sy = |v: f64| h as f64 - pad - (h as f64 - 2.0 * pad) * (v - lo) / (hi - lo);
    draw_line(&mut img, (pad, h as f64 - pad), (w as f64 - pad, h as f64 - pad), GREY);
    draw_line(&mut img, (pad, pad), (pad, h as f64 - pad), GREY);
    draw_text(&mut img, 2, pad as u32 - 8, &format!("{hi:.3}"), BLACK);
    draw_text(&mut img, 2, h - pad as u32 + 4, &format!("{lo:.3}"), BLACK);
    draw_text(&mut img, w - pad as u32 - 40, h - 10, &format!("epoch {n}"), BLACK);
    for (k, (name, values, color)) in series.iter().enumerate() {
        draw_text(&mut img, pad as u32 + 10, 6 + 8 * k as u32, name, *color);
        for i in 1..values.len() {
            if values[i - 1].is_finite() && values[i].is_finite() {
                draw_line(&mut img, (sx(i - 1), sy(values[i - 1])), (sx(i), sy(values[i])), *color);
            }
        }
        if values.len() == 1 && values[0].is_finite() {
            draw_line(&mut img, (sx(0) - 2.0, sy(values[0])), (sx(0) + 2.0, sy(values[0])), *color);
        }
    }
    img.save(path).map_err(|e| format!("{}: {e}", path.display()))
}

/// Writes `curves.csv`, `loss_curves.png` and `metric_curves.png` into
/// `dir`. The CSV carries the exact history values.
pub fn render_training_curves(history: &[HistoryRow], dir: &Path) -> Result<(), String> {
    if history.is_empty() {
        return Err("empty training history".into());
    }
    fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    let mut csv = String::from("epoch,train_loss,val_loss,val_dice\n");
    for r in history {
        csv.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.val_dice));
    }
    let p = dir.join("curves.csv");
    fs::write(&p, csv).map_err(|e| format!("{}: {e}", p.display()))?;
    let col = |f: fn(&HistoryRow) -> f64| history.iter().map(f).collect::<Vec<f64>>();
    plot(
        &[("train loss", col(|r| r.train_loss), BLUE), ("validation loss", col(|r| r.val_loss), ORANGE)],
        &dir.join("loss_curves.png"),
    )?;
    plot(&[("validation dice", col(|r| r.val_dice), BLUE)], &dir.join("metric_curves.png"))
}

/// One montage row: a slice before and after augmentation.
#[derive(Debug, Clone)]
pub struct QcPanel {
    pub before: Array2<f32>,
    pub after: Array2<f32>,
    pub title: String,
}

fn gray(v: f32, lo: f32, hi: f32) -> Rgb<u8> {
    let t = if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.0 };
    let g = (t * 255.0).round() as u8;
    Rgb([g, g, g])
}

/// Grid image with one row per panel, before on the left and after on the
/// right, both scaled with the range of the `before` slice.
pub fn qc_montage(panels: &[QcPanel], path: &Path) -> Result<(), String> {
    if panels.is_empty() {
        return Err("no panels".into());
    }
    let cell_w = panels.iter().map(|p| p.before.ncols().max(p.after.ncols())).max().unwrap() as u32;
    let cell_h = panels.iter().map(|p| p.before.nrows().max(p.after.nrows())).max().unwrap() as u32;
    let (gap, header) = (4u32, 9u32);
    let w = 2 * cell_w + 3 * gap;
    let h = panels.len() as u32 * (cell_h + header + gap) + gap;
    let mut img = RgbImage::from_pixel(w.max(60), h, BLACK);
    for (row, p) in panels.iter().enumerate() {
        let y0 = gap + row as u32 * (cell_h + header + gap);
        draw_text(&mut img, gap, y0 + 1, &p.title, WHITE);
        let lo = p.before.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = p.before.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        for (k, arr) in [&p.before, &p.after].into_iter().enumerate() {
            let x0 = gap + k as u32 * (cell_w + gap);
            for ((i, j), v) in arr.indexed_iter() {
                img.put_pixel(x0 + j as u32, y0 + header + i as u32, gray(*v, lo, hi));
            }
        }
    }
    img.save(path).map_err(|e| format!("{}: {e}", path.display()))
}
