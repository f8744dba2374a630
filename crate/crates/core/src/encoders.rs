//! Dual-branch feature extraction with an exact stride contract.
//!
//! Each branch is a stack of strided convolutions whose strides multiply to
//! `stride`. The reference branch ends in a per-location linear projection
//! to `embed_dim` channels so its grid can be matched against query vectors.

use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Activation, ConvGeom, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Total downsampling factor `S`.
    pub stride: usize,
    /// Per-stage strides; their product must equal `stride`.
    pub stage_strides: Vec<usize>,
    /// Output width of each query stage; the last is the query channel count `C`.
    pub query_widths: Vec<usize>,
    /// Output width of each reference stage before the projection.
    pub reference_widths: Vec<usize>,
    /// Reference embedding dimension `d`.
    pub embed_dim: usize,
    pub activation: Activation,
}

impl Default for EncoderConfig {
    /// Full-width settings: `S = 16`, `C = 256`, `d = 512`.
    fn default() -> Self {
        Self {
            stride: 16,
            stage_strides: vec![2, 2, 2, 2],
            query_widths: vec![32, 64, 128, 256],
            reference_widths: vec![32, 64, 128, 256],
            embed_dim: 512,
            activation: Activation::Silu,
        }
    }
}

impl EncoderConfig {
    /// Small widths that train in seconds on a CPU.
    pub fn desk() -> Self {
        Self {
            stride: 16,
            stage_strides: vec![2, 2, 4],
            query_widths: vec![8, 16, 32],
            reference_widths: vec![8, 16, 32],
            embed_dim: 32,
            activation: Activation::Silu,
        }
    }

    pub fn query_channels(&self) -> usize {
        *self.query_widths.last().expect("validated")
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_strides.is_empty() || self.stage_strides.contains(&0) {
            return Err(Error::Config("encoder needs at least one stage with positive stride".into()));
        }
        let product: usize = self.stage_strides.iter().product();
        if product != self.stride {
            return Err(Error::Config(format!(
                "stage strides {:?} multiply to {product}, not {}",
                self.stage_strides, self.stride
            )));
        }
        let n = self.stage_strides.len();
        if self.query_widths.len() != n || self.reference_widths.len() != n {
            return Err(Error::Config("one width per stage is required for both branches".into()));
        }
        if self.embed_dim == 0 || self.query_widths.contains(&0) || self.reference_widths.contains(&0) {
            return Err(Error::Config("channel widths and embed_dim must be positive".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count of both branches.
    pub fn num_params(&self) -> usize {
        let branch = |widths: &[usize]| {
            let mut cin = 3;
            let mut n = 0;
            for (&s, &cout) in self.stage_strides.iter().zip(widths) {
                let k = stage_geom(s).kernel;
                n += (cin * k * k + 1) * cout;
                cin = cout;
            }
            n
        };
        let hidden = *self.reference_widths.last().unwrap_or(&0);
        branch(&self.query_widths) + branch(&self.reference_widths) + (hidden + 1) * self.embed_dim
    }
}

/// Kernel/padding for a stage of the given stride; every choice maps an
/// input dimension divisible by `s` to exactly `n / s`.
pub fn stage_geom(s: usize) -> ConvGeom {
    match s {
        1 | 2 => ConvGeom { kernel: 3, stride: s, pad: 1 },
        _ => ConvGeom { kernel: s, stride: s, pad: 0 },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Frame {
    Query,
    Reference,
}

/// A `[C, H', W']` feature grid produced by one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: Tensor,
    pub stride: usize,
    pub frame: Frame,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.values.chw().0
    }

    pub fn grid(&self) -> (usize, usize) {
        let (_, h, w) = self.values.chw();
        (h, w)
    }
}

/// `[3, H, W]` tensor with intensities shifted to `[-0.5, 0.5]`.
pub fn image_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p.0[c] as f64 / 255.0 - 0.5;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

fn check_divisible(h: usize, w: usize, stride: usize) -> Result<()> {
    if h % stride != 0 || w % stride != 0 || h == 0 || w == 0 {
        return Err(Error::shape(
            "encode",
            format!("image dimensions divisible by {stride}"),
            format!("{w}x{h}"),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
struct Branch {
    stages: Vec<(ParamId, ParamId, ConvGeom)>,
    proj: Option<(ParamId, ParamId)>,
}

impl Branch {
    fn forward(&self, g: &mut Graph, mut x: Var, act: Activation) -> Var {
        for &(w, b, geom) in &self.stages {
            let (w, b) = (g.param(w), g.param(b));
            x = g.conv2d(x, w, Some(b), geom);
            x = g.act(x, act);
        }
        if let Some((w, b)) = self.proj {
            let (w, b) = (g.param(w), g.param(b));
            x = g.conv2d(x, w, Some(b), ConvGeom { kernel: 1, stride: 1, pad: 0 });
        }
        x
    }
}

/// Parameter handles for both branches.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoders {
    pub cfg: EncoderConfig,
    query: Branch,
    reference: Branch,
}

impl Encoders {
    pub fn init<R: Rng>(cfg: &EncoderConfig, params: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let branch = |name: &str, widths: &[usize], params: &mut ParamStore, rng: &mut R| {
            let mut cin = 3;
            let mut stages = Vec::new();
            for (i, (&s, &cout)) in cfg.stage_strides.iter().zip(widths).enumerate() {
                let geom = stage_geom(s);
                let fan_in = cin * geom.kernel * geom.kernel;
                let w = params.insert_he(
                    format!("encoder.{name}.stage{i}.weight"),
                    &[cout, cin, geom.kernel, geom.kernel],
                    fan_in,
                    rng,
                );
                let b = params.insert_zeros(format!("encoder.{name}.stage{i}.bias"), &[cout]);
                stages.push((w, b, geom));
                cin = cout;
            }
            (stages, cin)
        };
        let (qs, _) = branch("query", &cfg.query_widths, params, rng);
        let (rs, hidden) = branch("reference", &cfg.reference_widths, params, rng);
        let pw = params.insert_he("encoder.reference.proj.weight", &[cfg.embed_dim, hidden, 1, 1], hidden, rng);
        let pb = params.insert_zeros("encoder.reference.proj.bias", &[cfg.embed_dim]);
        Ok(Self {
            cfg: cfg.clone(),
            query: Branch { stages: qs, proj: None },
            reference: Branch {
                stages: rs,
                proj: Some((pw, pb)),
            },
        })
    }

    pub(crate) fn query_forward(&self, g: &mut Graph, img: &Tensor) -> Result<Var> {
        let (_, h, w) = img.chw();
        check_divisible(h, w, self.cfg.stride)?;
        let x = g.input(img.clone());
        let out = self.query.forward(g, x, self.cfg.activation);
        Ok(out)
    }

    pub(crate) fn reference_forward(&self, g: &mut Graph, img: &Tensor) -> Result<Var> {
        let (_, h, w) = img.chw();
        check_divisible(h, w, self.cfg.stride)?;
        let x = g.input(img.clone());
        let out = self.reference.forward(g, x, self.cfg.activation);
        Ok(out)
    }

    fn run(&self, params: &ParamStore, img: &RgbImage, frame: Frame) -> Result<FeatureMap> {
        let t = image_to_tensor(img);
        let mut g = Graph::new(params);
        let v = match frame {
            Frame::Query => self.query_forward(&mut g, &t)?,
            Frame::Reference => self.reference_forward(&mut g, &t)?,
        };
        let values = g.value(v).clone();
        let (_, gh, gw) = values.chw();
        assert_eq!(
            (gh * self.cfg.stride, gw * self.cfg.stride),
            (img.height() as usize, img.width() as usize),
            "stride contract"
        );
        Ok(FeatureMap {
            values,
            stride: self.cfg.stride,
            frame,
        })
    }

    /// Query features `F_q`, `[C, H/S, W/S]`.
    pub fn encode_query(&self, params: &ParamStore, img: &RgbImage) -> Result<FeatureMap> {
        self.run(params, img, Frame::Query)
    }

    /// Reference features `F_r`, `[d, H/S, W/S]`.
    pub fn encode_reference(&self, params: &ParamStore, img: &RgbImage) -> Result<FeatureMap> {
        self.run(params, img, Frame::Reference)
    }
}

/// Reshapes `[d, H', W']` into an `(H'·W') x d` matrix, rows row-major over `(h, w)`.
pub fn flatten_reference(f: &FeatureMap) -> Result<Tensor> {
    if f.frame != Frame::Reference {
        return Err(Error::shape("flatten_reference", "reference frame", "query frame"));
    }
    let (d, h, w) = f.values.chw();
    let hw = h * w;
    let mut out = vec![0.0; hw * d];
    for c in 0..d {
        for l in 0..hw {
            out[l * d + c] = f.values.data()[c * hw + l];
        }
    }
    Ok(Tensor::new(vec![hw, d], out))
}

/// Inverse of [`flatten_reference`].
pub fn unflatten_reference(m: &Tensor, h: usize, w: usize, stride: usize) -> Result<FeatureMap> {
    let (rows, d) = m.hw();
    if rows != h * w {
        return Err(Error::shape("unflatten_reference", format!("{} rows", h * w), rows));
    }
    let mut out = vec![0.0; rows * d];
    for l in 0..rows {
        for c in 0..d {
            out[c * rows + l] = m.data()[l * d + c];
        }
    }
    Ok(FeatureMap {
        values: Tensor::new(vec![d, h, w], out),
        stride,
        frame: Frame::Reference,
    })
}
