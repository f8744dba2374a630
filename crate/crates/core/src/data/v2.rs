use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Alignment, AnnotatedPair};
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Sampling ranges for the V2 reference transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformConfig {
    /// Side fraction of the crop window, within `[0.6, 1.0]`.
    pub crop: (f64, f64),
    /// Output scale, within `[0.75, 1.33]`.
    pub scale: (f64, f64),
    pub flip_prob: f64,
    /// Resampling attempts when a transform would drop every object.
    pub max_attempts: usize,
    /// Background noise amplitude for canvas areas outside the source image.
    pub noise: f64,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            crop: (0.6, 1.0),
            scale: (0.75, 1.33),
            flip_prob: 0.5,
            max_attempts: 32,
            noise: 0.08,
        }
    }
}

impl TransformConfig {
    pub fn validate(&self) -> Result<()> {
        let in_range = |(lo, hi): (f64, f64), a: f64, b: f64| lo <= hi && lo >= a && hi <= b;
        if !in_range(self.crop, 0.6, 1.0) {
            return Err(Error::Config(format!("crop range {:?} outside [0.6, 1.0]", self.crop)));
        }
        if !in_range(self.scale, 0.75, 1.33) {
            return Err(Error::Config(format!("scale range {:?} outside [0.75, 1.33]", self.scale)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config("flip probability outside [0, 1]".into()));
        }
        if self.max_attempts == 0 {
            return Err(Error::Config("max_attempts must be positive".into()));
        }
        Ok(())
    }
}

/// The affine map from V1 reference pixels to V2 reference pixels.
///
/// `x' = zoom * (f(x) - x0)`, `y' = zoom * (y - y0)` where `f` is the
/// optional mirror `x -> src_w - x` and `zoom = scale / crop`. The crop
/// window `[x0, x0 + crop * src_w] x [y0, y0 + crop * src_h]` lives in
/// mirrored source coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub flip: bool,
    pub crop: f64,
    pub scale: f64,
    pub x0: f64,
    pub y0: f64,
    pub src_w: f64,
    pub src_h: f64,
}

impl TransformRecord {
    pub fn identity(src_w: f64, src_h: f64) -> Self {
        Self {
            flip: false,
            crop: 1.0,
            scale: 1.0,
            x0: 0.0,
            y0: 0.0,
            src_w,
            src_h,
        }
    }

    pub fn zoom(&self) -> f64 {
        self.scale / self.crop
    }

    fn mirror(&self, x: f64) -> f64 {
        if self.flip {
            self.src_w - x
        } else {
            x
        }
    }

    pub fn apply_point(&self, x: f64, y: f64) -> (f64, f64) {
        let z = self.zoom();
        (z * (self.mirror(x) - self.x0), z * (y - self.y0))
    }

    pub fn invert_point(&self, x: f64, y: f64) -> (f64, f64) {
        let z = self.zoom();
        (self.mirror(x / z + self.x0), y / z + self.y0)
    }

    /// Exact image of a box (no clipping).
    pub fn apply_box(&self, b: &BBox) -> BBox {
        let (cx, cy) = self.apply_point(b.cx, b.cy);
        BBox::new(cx, cy, b.w * self.zoom(), b.h * self.zoom())
    }

    pub fn invert_box(&self, b: &BBox) -> BBox {
        let (cx, cy) = self.invert_point(b.cx, b.cy);
        BBox::new(cx, cy, b.w / self.zoom(), b.h / self.zoom())
    }

    /// Output-canvas region that shows source content: `[0, vw] x [0, vh]`.
    pub fn visible_region(&self) -> (f64, f64, f64, f64) {
        let s = self.scale.min(1.0);
        (0.0, 0.0, s * self.src_w, s * self.src_h)
    }

    /// The visible region pulled back into V1 coordinates, as `(x0, y0, x1, y1)`.
    pub fn source_region(&self) -> (f64, f64, f64, f64) {
        let (_, _, vw, vh) = self.visible_region();
        let (ax, ay) = self.invert_point(0.0, 0.0);
        let (bx, by) = self.invert_point(vw, vh);
        (ax.min(bx), ay.min(by), ax.max(bx), ay.max(by))
    }

    pub fn is_visible(&self, x: f64, y: f64) -> bool {
        let (x0, y0, x1, y1) = self.visible_region();
        x >= x0 && x < x1 && y >= y0 && y < y1
    }

    /// Remaps a V1 box: `None` when its center leaves the visible region,
    /// otherwise the image clipped to that region.
    pub fn remap_box(&self, b: &BBox) -> Option<BBox> {
        let m = self.apply_box(b);
        if !self.is_visible(m.cx, m.cy) {
            return None;
        }
        let (x0, y0, x1, y1) = self.visible_region();
        m.clip_to(x0, y0, x1, y1)
    }

    fn sample<R: Rng + ?Sized>(cfg: &TransformConfig, src_w: f64, src_h: f64, rng: &mut R) -> Self {
        let crop = uniform(rng, cfg.crop);
        let scale = uniform(rng, cfg.scale);
        let flip = rng.gen_bool(cfg.flip_prob);
        let x0 = rng.gen::<f64>() * (1.0 - crop) * src_w;
        let y0 = rng.gen::<f64>() * (1.0 - crop) * src_h;
        Self {
            flip,
            crop,
            scale,
            x0,
            y0,
            src_w,
            src_h,
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

fn render<R: Rng + ?Sized>(src: &RgbImage, t: &TransformRecord, noise: f64, rng: &mut R) -> RgbImage {
    let (w, h) = (src.width(), src.height());
    let mut out = RgbImage::new(w, h);
    for v in 0..h {
        for u in 0..w {
            let (px, py) = (u as f64 + 0.5, v as f64 + 0.5);
            let (sx, sy) = t.invert_point(px, py);
            let inside = t.is_visible(px, py) && sx >= 0.0 && sy >= 0.0 && sx < w as f64 && sy < h as f64;
            let pixel = if inside {
                *src.get_pixel(sx.floor() as u32, sy.floor() as u32)
            } else {
                let c = [0.42, 0.45, 0.38].map(|b: f64| b + noise * rng.gen_range(-1.0..1.0));
                Rgb(c.map(|x| (x.clamp(0.0, 1.0) * 255.0).round() as u8))
            };
            out.put_pixel(u, v, pixel);
        }
    }
    out
}

/// Applies `record` to a V1 pair. Returns `None` when no object survives.
pub(crate) fn apply_transform<R: Rng + ?Sized>(
    pair: &AnnotatedPair,
    record: TransformRecord,
    noise: f64,
    rng: &mut R,
) -> Option<AnnotatedPair> {
    let objects: Vec<_> = pair
        .objects
        .iter()
        .filter_map(|o| record.remap_box(&o.bbox).map(|bbox| super::ObjectAnnotation { bbox, ..*o }))
        .collect();
    if objects.is_empty() {
        return None;
    }
    Some(AnnotatedPair {
        pair_id: pair.pair_id.clone(),
        query: pair.query.clone(),
        reference: render(&pair.reference, &record, noise, rng),
        objects,
        alignment: Alignment::V2,
        transform: Some(record),
    })
}

/// Random crop, flip and rescale of the reference image of a V1 pair.
///
/// Objects whose remapped center leaves the visible region are dropped;
/// boxes that only partly leave it are clipped. The query side of retained
/// objects is untouched.
pub fn transform_to_v2<R: Rng + ?Sized>(
    pair: &AnnotatedPair,
    rng: &mut R,
    cfg: &TransformConfig,
) -> Result<AnnotatedPair> {
    cfg.validate()?;
    if pair.alignment != Alignment::V1 {
        return Err(Error::Config(format!("pair {} is not V1", pair.pair_id)));
    }
    let (w, h) = (pair.reference.width() as f64, pair.reference.height() as f64);
    for _ in 0..cfg.max_attempts {
        let record = TransformRecord::sample(cfg, w, h, rng);
        if let Some(out) = apply_transform(pair, record, cfg.noise, rng) {
            return Ok(out);
        }
    }
    Err(Error::TransformExhausted {
        pair_id: pair.pair_id.clone(),
        attempts: cfg.max_attempts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_pair, SceneConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_keeps_boxes_exactly() {
        let pair = generate_pair(3, 4, &SceneConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = apply_transform(&pair, TransformRecord::identity(128.0, 128.0), 0.0, &mut rng).unwrap();
        assert_eq!(out.boxes(), pair.boxes());
        assert_eq!(out.reference, pair.reference);
        assert_eq!(out.alignment, Alignment::V2);
    }

    #[test]
    fn flip_reflects_center() {
        let t = TransformRecord {
            flip: true,
            ..TransformRecord::identity(128.0, 128.0)
        };
        let b = BBox::new(30.0, 40.0, 10.0, 6.0);
        let m = t.apply_box(&b);
        assert_eq!((m.cx, m.cy, m.w, m.h), (128.0 - 30.0, 40.0, 10.0, 6.0));
    }

    #[test]
    fn inverse_recovers_random_boxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = TransformConfig::default();
        for _ in 0..200 {
            let t = TransformRecord::sample(&cfg, 128.0, 128.0, &mut rng);
            let b = BBox::new(rng.gen_range(0.0..128.0), rng.gen_range(0.0..128.0), 7.0, 9.5);
            let back = t.invert_box(&t.apply_box(&b));
            for (x, y) in [(back.cx, b.cx), (back.cy, b.cy), (back.w, b.w), (back.h, b.h)] {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn out_of_range_params_rejected() {
        let pair = generate_pair(3, 2, &SceneConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = TransformConfig {
            crop: (0.3, 1.0),
            ..TransformConfig::default()
        };
        assert!(transform_to_v2(&pair, &mut rng, &bad).is_err());
    }

    #[test]
    fn v2_input_rejected() {
        let pair = generate_pair(3, 2, &SceneConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v2 = transform_to_v2(&pair, &mut rng, &TransformConfig::default()).unwrap();
        assert!(transform_to_v2(&v2, &mut rng, &TransformConfig::default()).is_err());
    }
}
