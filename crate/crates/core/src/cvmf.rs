//! Cross-view fusion and the grid detection head.
//!
//! A query-object vector is compared by cosine similarity with every
//! reference location. The resulting attention map scales the reference
//! features, is appended to them as one extra channel, and a small
//! convolutional head predicts a confidence logit and box offsets per cell.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{concat_channels, cosine_map_forward, mul_broadcast, Graph, Var};
use crate::encoders::{unflatten_reference, FeatureMap};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::mope::QueryObjectVector;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{sigmoid, Activation, ConvGeom, Tensor};

/// Cosine similarity of one query object against every reference cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    /// `[H', W']`, every entry in `[-1, 1]`.
    pub values: Tensor,
    pub object_index: usize,
}

fn check_same_grid(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?}"), format!("{b:?}")));
    }
    Ok(())
}

/// Cosine of the normalized `v_q` with each normalized row of `v_r`
/// (`(H'·W') x d`), reshaped row-major to `grid`. Zero vectors normalize to zero.
pub fn attention(v_q: &QueryObjectVector, v_r: &Tensor, grid: (usize, usize)) -> Result<AttentionMap> {
    let (rows, d) = v_r.hw();
    if v_q.values.len() != d {
        return Err(Error::shape("attention", format!("query length {d}"), v_q.values.len()));
    }
    let f = unflatten_reference(v_r, grid.0, grid.1, 1)?;
    debug_assert_eq!(rows, grid.0 * grid.1);
    let values = cosine_map_forward(&v_q.values, &f.values);
    assert!(
        values.data().iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)),
        "cosine outside [-1, 1]"
    );
    Ok(AttentionMap {
        values,
        object_index: v_q.object_index,
    })
}

/// `F'_r = F_a ⊙ F_r`, the attention broadcast over channels.
pub fn modulate(f_a: &AttentionMap, f_r: &FeatureMap) -> Result<FeatureMap> {
    check_same_grid("modulate", f_r.grid(), f_a.values.hw())?;
    Ok(FeatureMap {
        values: mul_broadcast(&f_r.values, &f_a.values),
        ..f_r.clone()
    })
}

/// Appends `F_a` as the last channel of `F'_r`.
pub fn fuse_and_concat(f_r: &FeatureMap, f_a: &AttentionMap) -> Result<FeatureMap> {
    check_same_grid("fuse_and_concat", f_r.grid(), f_a.values.hw())?;
    Ok(FeatureMap {
        values: concat_channels(&f_r.values, &f_a.values),
        ..f_r.clone()
    })
}

/// Per-cell head output over the reference grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPrediction {
    /// `[H', W']`.
    pub conf_logit: Tensor,
    /// `[4, H', W']`: `t_x, t_y, t_w, t_h`.
    pub box_params: Tensor,
    /// `(a_w, a_h)` in pixels.
    pub anchor: (f64, f64),
    pub stride: usize,
}

impl GridPrediction {
    /// Splits a `[5, H', W']` head output.
    pub fn from_head_output(t: &Tensor, anchor: (f64, f64), stride: usize) -> Self {
        let (c, h, w) = t.chw();
        assert_eq!(c, 5, "head output must have 5 channels");
        assert!(anchor.0 > 0.0 && anchor.1 > 0.0, "anchor must be positive");
        let hw = h * w;
        Self {
            conf_logit: Tensor::new(vec![h, w], t.data()[..hw].to_vec()),
            box_params: Tensor::new(vec![4, h, w], t.data()[hw..].to_vec()),
            anchor,
            stride,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        self.conf_logit.hw()
    }

    /// `(t_x, t_y, t_w, t_h)` at `cell`.
    pub fn params_at(&self, cell: (usize, usize)) -> [f64; 4] {
        let (h, w) = self.grid();
        let at = |k: usize| self.box_params.data()[(k * h + cell.0) * w + cell.1];
        [at(0), at(1), at(2), at(3)]
    }

    /// Image extent covered by the grid.
    pub fn image_size(&self) -> (f64, f64) {
        let (h, w) = self.grid();
        ((w * self.stride) as f64, (h * self.stride) as f64)
    }
}

/// Box at `cell`: center `((w + σ(t_x)) S, (h + σ(t_y)) S)`, size
/// `(a_w e^{t_w}, a_h e^{t_h})`, clipped to the image.
pub fn decode_box(pred: &GridPrediction, cell: (usize, usize)) -> BBox {
    let (gh, gw) = pred.grid();
    assert!(cell.0 < gh && cell.1 < gw, "cell outside grid");
    let [tx, ty, tw, th] = pred.params_at(cell);
    let s = pred.stride as f64;
    let raw = BBox::new(
        (cell.1 as f64 + sigmoid(tx)) * s,
        (cell.0 as f64 + sigmoid(ty)) * s,
        pred.anchor.0 * tw.exp(),
        pred.anchor.1 * th.exp(),
    );
    let (iw, ih) = pred.image_size();
    // the center is inside the image, so the clipped box is never empty
    raw.clip_to(0.0, 0.0, iw, ih).unwrap_or(raw)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    /// `σ(conf_logit)` at the selected cell.
    pub confidence: f64,
    pub object_index: usize,
    pub cell: (usize, usize),
}

/// Highest-logit cell; ties go to the smallest row-major index.
pub fn argmax_cell(logits: &Tensor) -> (usize, usize) {
    let (_, w) = logits.hw();
    let mut best = 0;
    for (i, &v) in logits.data().iter().enumerate() {
        if v > logits.data()[best] {
            best = i;
        }
    }
    (best / w, best % w)
}

pub fn select(pred: &GridPrediction, object_index: usize) -> Detection {
    let cell = argmax_cell(&pred.conf_logit);
    let (_, w) = pred.grid();
    Detection {
        bbox: decode_box(pred, cell),
        confidence: sigmoid(pred.conf_logit.data()[cell.0 * w + cell.1]),
        object_index,
        cell,
    }
}

/// Shape of the detection head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden: usize,
    pub activation: Activation,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            activation: Activation::Silu,
        }
    }
}

const SAME3: ConvGeom = ConvGeom {
    kernel: 3,
    stride: 1,
    pad: 1,
};
const POINTWISE: ConvGeom = ConvGeom {
    kernel: 1,
    stride: 1,
    pad: 0,
};

/// Two 3x3 convolutions with a pointwise nonlinearity, then a 1x1
/// convolution to five channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    layers: [(ParamId, ParamId, ConvGeom); 3],
    activation: Activation,
    in_channels: usize,
}

impl Head {
    pub fn init<R: Rng>(in_channels: usize, cfg: HeadConfig, params: &mut ParamStore, rng: &mut R) -> Self {
        let h = cfg.hidden;
        let mut layer = |i: usize, cin: usize, cout: usize, geom: ConvGeom, rng: &mut R| {
            let fan_in = cin * geom.kernel * geom.kernel;
            let w = params.insert_he(
                format!("head.conv{i}.weight"),
                &[cout, cin, geom.kernel, geom.kernel],
                fan_in,
                rng,
            );
            let b = params.insert_zeros(format!("head.conv{i}.bias"), &[cout]);
            (w, b, geom)
        };
        let l0 = layer(0, in_channels, h, SAME3, rng);
        let l1 = layer(1, h, h, SAME3, rng);
        let l2 = layer(2, h, 5, POINTWISE, rng);
        Self {
            layers: [l0, l1, l2],
            activation: cfg.activation,
            in_channels,
        }
    }

    pub fn num_params(in_channels: usize, hidden: usize) -> usize {
        (in_channels * 9 + 1) * hidden + (hidden * 9 + 1) * hidden + (hidden + 1) * 5
    }

    /// `[C_in, H', W'] -> [5, H', W']`.
    pub(crate) fn forward_var(&self, g: &mut Graph, mut x: Var) -> Var {
        for (i, &(w, b, geom)) in self.layers.iter().enumerate() {
            let (w, b) = (g.param(w), g.param(b));
            x = g.conv2d(x, w, Some(b), geom);
            if i < 2 {
                x = g.act(x, self.activation);
            }
        }
        x
    }

    pub fn detect(&self, params: &ParamStore, f: &FeatureMap, anchor: (f64, f64)) -> Result<GridPrediction> {
        if f.channels() != self.in_channels {
            return Err(Error::shape("detect", format!("{} channels", self.in_channels), f.channels()));
        }
        let mut g = Graph::new(params);
        let x = g.input(f.values.clone());
        let y = self.forward_var(&mut g, x);
        Ok(GridPrediction::from_head_output(g.value(y), anchor, f.stride))
    }
}

/// One line of a detection file.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub pair_id: String,
    pub object_index: usize,
    pub bbox: BBox,
    pub confidence: f64,
}

/// `pair_id obj_index cx cy w h confidence`, reals with four decimals.
pub fn format_detections(records: &[DetectionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let b = r.bbox;
        writeln!(
            out,
            "{} {} {:.4} {:.4} {:.4} {:.4} {:.4}",
            r.pair_id, r.object_index, b.cx, b.cy, b.w, b.h, r.confidence
        )
        .expect("writing to a String");
    }
    out
}

pub fn write_detections(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    std::fs::write(path, format_detections(records)).map_err(|e| Error::io(path, e))
}

pub fn parse_detections(text: &str, path: &Path) -> Result<Vec<DetectionRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: msg.to_string(),
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 {
            return Err(err("expected 7 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| err("bad number"));
        out.push(DetectionRecord {
            pair_id: f[0].to_string(),
            object_index: f[1].parse().map_err(|_| err("bad object index"))?,
            bbox: BBox::new(num(f[2])?, num(f[3])?, num(f[4])?, num(f[5])?),
            confidence: num(f[6])?,
        });
    }
    Ok(out)
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections(&text, path)
}
