//! Localization metrics: `acc@t`, per-image `accI@t`, object-count bins and
//! the patch-retrieval protocol.
//!
//! All threshold comparisons are strict: an object is localized when its
//! IoU is greater than `t`.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cvmf::DetectionRecord;
use crate::data::AnnotatedPair;
use crate::error::{Error, Result};
pub use crate::geometry::iou;
use crate::geometry::BBox;

/// Thresholds reported by [`evaluate`].
pub const THRESHOLDS: [f64; 2] = [0.25, 0.5];

/// How a per-image verdict is derived from per-object IoUs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ImageRule {
    /// Correct when every object's IoU exceeds `t`.
    #[default]
    AllExceed,
    /// The literal case split: correct when no object's IoU exceeds `t`.
    Literal,
}

impl ImageRule {
    pub fn image_correct(self, ious: &[f64], t: f64) -> bool {
        match self {
            ImageRule::AllExceed => ious.iter().all(|&v| v > t),
            ImageRule::Literal => !ious.iter().any(|&v| v > t),
        }
    }
}

/// Fraction of objects whose predicted box has IoU greater than `t`.
pub fn acc_at(preds: &[BBox], gts: &[BBox], t: f64) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::shape("acc_at", format!("{} boxes", gts.len()), preds.len()));
    }
    if preds.is_empty() {
        return Err(Error::Empty("acc_at input"));
    }
    let hits = preds.iter().zip(gts).filter(|(p, g)| iou(p, g) > t).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Fraction of images judged correct under `rule`.
pub fn acc_i_at(per_image: &[Vec<f64>], t: f64, rule: ImageRule) -> Result<f64> {
    if per_image.is_empty() {
        return Err(Error::Empty("accI input"));
    }
    if per_image.iter().any(|v| v.is_empty()) {
        return Err(Error::Empty("image with no objects"));
    }
    let hits = per_image.iter().filter(|v| rule.image_correct(v, t)).count();
    Ok(hits as f64 / per_image.len() as f64)
}

/// Box of patch `(row, col)` in a grid of `patch`-pixel squares.
pub fn patch_box(cell: (usize, usize), patch: usize) -> BBox {
    let p = patch as f64;
    BBox::new((cell.1 as f64 + 0.5) * p, (cell.0 as f64 + 0.5) * p, p, p)
}

/// Retrieval-style localization: an object counts when any of its `k`
/// best-ranked patches has IoU greater than `t` with the ground truth.
///
/// `ranked[j]` lists patch `(row, col)` indices for object `j`, best first.
pub fn retrieval_protocol(
    ranked: &[Vec<(usize, usize)>],
    gts: &[BBox],
    image_size: (usize, usize),
    patch: usize,
    t: f64,
    k: usize,
) -> Result<f64> {
    let (w, h) = image_size;
    if patch == 0 || w % patch != 0 || h % patch != 0 {
        return Err(Error::Config(format!("{patch}-pixel patches do not tile a {w}x{h} image")));
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if ranked.len() != gts.len() {
        return Err(Error::shape("retrieval_protocol", format!("{} rankings", gts.len()), ranked.len()));
    }
    if gts.is_empty() {
        return Err(Error::Empty("retrieval input"));
    }
    let (rows, cols) = (h / patch, w / patch);
    let mut hits = 0;
    for (list, gt) in ranked.iter().zip(gts) {
        if let Some(&(r, c)) = list.iter().find(|&&(r, c)| r >= rows || c >= cols) {
            return Err(Error::Config(format!("patch ({r}, {c}) outside the {rows}x{cols} patch grid")));
        }
        if list.iter().take(k).any(|&cell| iou(&patch_box(cell, patch), gt) > t) {
            hits += 1;
        }
    }
    Ok(hits as f64 / gts.len() as f64)
}

/// Object-count categories: `N <= 3`, `3 < N <= 6`, `N > 6`.
pub fn count_bin(n: usize) -> usize {
    match n {
        0..=3 => 0,
        4..=6 => 1,
        _ => 2,
    }
}

pub const BIN_LABELS: [&str; 3] = ["I (N<=3)", "II (3<N<=6)", "III (N>6)"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub pair_id: String,
    pub ious: Vec<f64>,
    /// Verdict at each of [`THRESHOLDS`].
    pub correct: [bool; 2],
}

/// Rates over one subset of images; `None` when the subset is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub acc_025: f64,
    pub acc_05: f64,
    pub acc_i_025: f64,
    pub acc_i_05: f64,
    pub n_images: usize,
    pub n_objects: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Rates,
    pub bins: [Option<Rates>; 3],
    pub per_image: Vec<ImageResult>,
    pub rule: ImageRule,
}

fn rates(images: &[&ImageResult], rule: ImageRule) -> Option<Rates> {
    if images.is_empty() {
        return None;
    }
    let n_objects: usize = images.iter().map(|r| r.ious.len()).sum();
    let acc = |t: f64| images.iter().flat_map(|r| &r.ious).filter(|&&v| v > t).count() as f64 / n_objects as f64;
    let acc_i = |t: f64| images.iter().filter(|r| rule.image_correct(&r.ious, t)).count() as f64 / images.len() as f64;
    Some(Rates {
        acc_025: acc(0.25),
        acc_05: acc(0.5),
        acc_i_025: acc_i(0.25),
        acc_i_05: acc_i(0.5),
        n_images: images.len(),
        n_objects,
    })
}

/// Scores detections against every object of every pair.
///
/// Fails with the full list of `(pair_id, object_index)` entries that have no
/// detection. Record order does not matter.
pub fn evaluate(pairs: &[AnnotatedPair], detections: &[DetectionRecord], rule: ImageRule) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let index: HashMap<(&str, usize), &DetectionRecord> = detections
        .iter()
        .map(|d| ((d.pair_id.as_str(), d.object_index), d))
        .collect();
    let mut missing = Vec::new();
    let mut per_image = Vec::with_capacity(pairs.len());
    for p in pairs {
        let mut ious = Vec::with_capacity(p.objects.len());
        for (j, o) in p.objects.iter().enumerate() {
            match index.get(&(p.pair_id.as_str(), j)) {
                Some(d) => ious.push(iou(&d.bbox, &o.bbox)),
                None => missing.push((p.pair_id.clone(), j)),
            }
        }
        let correct = THRESHOLDS.map(|t| rule.image_correct(&ious, t));
        per_image.push(ImageResult {
            pair_id: p.pair_id.clone(),
            ious,
            correct,
        });
    }
    if !missing.is_empty() {
        return Err(Error::MissingDetections(missing));
    }
    let all: Vec<&ImageResult> = per_image.iter().collect();
    let overall = rates(&all, rule).expect("non-empty");
    let bins = [0, 1, 2].map(|b| {
        let sub: Vec<&ImageResult> = per_image.iter().filter(|r| count_bin(r.ious.len()) == b).collect();
        rates(&sub, rule)
    });
    Ok(EvalReport {
        overall,
        bins,
        per_image,
        rule,
    })
}

impl EvalReport {
    /// `acc@0.25 acc@0.5 accI@0.25 accI@0.5`, four decimals each.
    pub fn summary_line(&self) -> String {
        let r = &self.overall;
        format!("{:.4} {:.4} {:.4} {:.4}", r.acc_025, r.acc_05, r.acc_i_025, r.acc_i_05)
    }

    /// Human-readable report: totals, object-count bins, per-image IoUs.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let r = &self.overall;
        let _ = writeln!(s, "images {} objects {} rule {:?}", r.n_images, r.n_objects, self.rule);
        let _ = writeln!(s, "acc@0.25 acc@0.5 accI@0.25 accI@0.5");
        let _ = writeln!(s, "{}", self.summary_line());
        let _ = writeln!(s, "bin images objects acc@0.25 acc@0.5 accI@0.25 accI@0.5");
        for (label, bin) in BIN_LABELS.iter().zip(&self.bins) {
            match bin {
                Some(b) => {
                    let _ = writeln!(
                        s,
                        "{label} {} {} {:.4} {:.4} {:.4} {:.4}",
                        b.n_images, b.n_objects, b.acc_025, b.acc_05, b.acc_i_025, b.acc_i_05
                    );
                }
                None => {
                    let _ = writeln!(s, "{label} 0 0 - - - -");
                }
            }
        }
        let _ = writeln!(s, "pair_id correct@0.25 correct@0.5 ious");
        for img in &self.per_image {
            let ious: Vec<String> = img.ious.iter().map(|v| format!("{v:.4}")).collect();
            let _ = writeln!(
                s,
                "{} {} {} {}",
                img.pair_id,
                img.correct[0] as u8,
                img.correct[1] as u8,
                ious.join(" ")
            );
        }
        s
    }
}

/// Expected `acc@t` of picking a uniformly random cell and decoding it with
/// zero offsets (cell-centred box of anchor size).
pub fn random_cell_baseline(pairs: &[AnnotatedPair], stride: usize, anchor: (f64, f64), t: f64) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for p in pairs {
        let (gw, gh) = (p.reference.width() as usize / stride, p.reference.height() as usize / stride);
        if gw == 0 || gh == 0 {
            return Err(Error::shape("random_cell_baseline", "reference at least one cell", "empty grid"));
        }
        let (iw, ih) = (p.reference.width() as f64, p.reference.height() as f64);
        for o in &p.objects {
            let mut hits = 0;
            for r in 0..gh {
                for c in 0..gw {
                    let s = stride as f64;
                    let b = BBox::new((c as f64 + 0.5) * s, (r as f64 + 0.5) * s, anchor.0, anchor.1);
                    let b = b.clip_to(0.0, 0.0, iw, ih).unwrap_or(b);
                    if iou(&b, &o.bbox) > t {
                        hits += 1;
                    }
                }
            }
            total += hits as f64 / (gw * gh) as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("baseline input"));
    }
    Ok(total / n as f64)
}
