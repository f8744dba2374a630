//! PNG exports: detection overlays and per-object attention heatmaps.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::cvmf::{argmax_cell, AttentionMap};
use crate::data::AnnotatedPair;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::model::{Model, Sample};
use crate::params::ParamStore;

pub const GT_COLOR: Rgb<u8> = Rgb([0, 220, 0]);
pub const PRED_COLOR: Rgb<u8> = Rgb([30, 60, 255]);

/// 3x5 bitmaps for the digits 0-9, one row per byte, high bit on the left.
const DIGITS: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
];

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// One-pixel outline of the pixels covered by `b`.
pub fn draw_box(img: &mut RgbImage, b: &BBox, c: Rgb<u8>) {
    let (x0, y0) = (b.x0().floor() as i64, b.y0().floor() as i64);
    let (x1, y1) = ((b.x1().ceil() as i64 - 1).max(x0), (b.y1().ceil() as i64 - 1).max(y0));
    for x in x0..=x1 {
        put(img, x, y0, c);
        put(img, x, y1, c);
    }
    for y in y0..=y1 {
        put(img, x0, y, c);
        put(img, x1, y, c);
    }
}

/// Draws the decimal digits of `n` with the top-left corner at `(x, y)`.
pub fn draw_number(img: &mut RgbImage, n: usize, x: i64, y: i64, c: Rgb<u8>) {
    for (k, ch) in n.to_string().bytes().enumerate() {
        let glyph = DIGITS[(ch - b'0') as usize];
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..3 {
                if bits & (0b100 >> col) != 0 {
                    put(img, x + 4 * k as i64 + col, y + row as i64, c);
                }
            }
        }
    }
}

/// Reference image with ground-truth (green) and predicted (blue) boxes,
/// each labelled with its object index.
pub fn overlay(reference: &RgbImage, gts: &[BBox], preds: &[BBox]) -> RgbImage {
    let mut img = reference.clone();
    for (boxes, color) in [(gts, GT_COLOR), (preds, PRED_COLOR)] {
        for (j, b) in boxes.iter().enumerate() {
            draw_box(&mut img, b, color);
            draw_number(&mut img, j, b.x0().floor() as i64 + 2, b.y0().floor() as i64 + 2, color);
        }
    }
    img
}

/// Blue -> cyan -> yellow -> red ramp over `[0, 1]`.
pub fn ramp(t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    let stops = [[0.0, 0.0, 0.5], [0.0, 0.8, 1.0], [1.0, 0.9, 0.0], [0.8, 0.0, 0.0]];
    let s = t * 3.0;
    let i = (s.floor() as usize).min(2);
    let f = s - i as f64;
    let c = [0, 1, 2].map(|k| ((stops[i][k] * (1.0 - f) + stops[i + 1][k] * f) * 255.0).round() as u8);
    Rgb(c)
}

/// Attention map min-max normalized to [`ramp`], each cell drawn as a
/// `cell x cell` square. Returns the image and the `(min, max)` bounds.
pub fn heatmap(map: &AttentionMap, cell: u32) -> (RgbImage, f64, f64) {
    let (h, w) = map.values.hw();
    let lo = map.values.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.values.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let img = RgbImage::from_fn(w as u32 * cell, h as u32 * cell, |x, y| {
        let v = map.values.data()[(y / cell) as usize * w + (x / cell) as usize];
        ramp(if span > 0.0 { (v - lo) / span } else { 0.5 })
    });
    (img, lo, hi)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapFile {
    pub path: PathBuf,
    pub min: f64,
    pub max: f64,
    /// Highest-attention cell `(row, col)`.
    pub peak_cell: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VizOutput {
    pub overlay: PathBuf,
    pub heatmaps: Vec<HeatmapFile>,
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `<pair>_overlay.png` and one
/// `<pair>_obj<j>_attn_min<lo>_max<hi>.png` per object into `out`.
pub fn visualize(model: &Model, params: &ParamStore, pair: &AnnotatedPair, out: &Path) -> Result<VizOutput> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let s = Sample::from_pair(pair);
    let loc = model.localize_tensors(params, &s.query, &s.reference, &s.clicks)?;
    let preds: Vec<BBox> = loc.detections.iter().map(|d| d.bbox).collect();
    let overlay_path = out.join(format!("{}_overlay.png", pair.pair_id));
    save(&overlay(&pair.reference, &s.boxes, &preds), &overlay_path)?;
    let stride = model.cfg.encoder.stride as u32;
    let mut heatmaps = Vec::new();
    for (j, map) in loc.attention.iter().enumerate() {
        let (img, lo, hi) = heatmap(map, stride);
        let path = out.join(format!("{}_obj{j}_attn_min{lo:.4}_max{hi:.4}.png", pair.pair_id));
        save(&img, &path)?;
        heatmaps.push(HeatmapFile {
            path,
            min: lo,
            max: hi,
            peak_cell: argmax_cell(&map.values),
        });
    }
    Ok(VizOutput {
        overlay: overlay_path,
        heatmaps,
    })
}
