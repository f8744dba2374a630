//! Multi-object position encoding.
//!
//! Each click becomes a one-hot mask over the query feature grid. The mask
//! is appended to the query features as an extra channel, mixed back to `C`
//! channels by a 1x1 convolution, multiplied by the mask again so only the
//! clicked cell survives, projected to `d` channels and sum-pooled.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::encoders::{Frame, FeatureMap};
use crate::error::{Error, Result};
use crate::geometry::ClickPoint;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Activation, ConvGeom, Tensor};

const POINTWISE: ConvGeom = ConvGeom {
    kernel: 1,
    stride: 1,
    pad: 0,
};

/// One-hot mask over an `H' x W'` feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpulseMask {
    values: Tensor,
    hot_cell: (usize, usize),
}

impl ImpulseMask {
    /// `[H', W']` array with a single 1.
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// `(row, column)` of the hot entry.
    pub fn hot_cell(&self) -> (usize, usize) {
        self.hot_cell
    }

    pub fn grid(&self) -> (usize, usize) {
        self.values.hw()
    }
}

/// Mask hot at `(floor(y / S), floor(x / S))`, clamped into the grid.
pub fn build_mask(p: &ClickPoint, grid: (usize, usize), stride: usize) -> ImpulseMask {
    let (gh, gw) = grid;
    assert!(gh > 0 && gw > 0 && stride > 0, "empty grid or zero stride");
    let cell = |v: f64, n: usize| ((v.max(0.0) / stride as f64).floor() as usize).min(n - 1);
    let hot_cell = (cell(p.y, gh), cell(p.x, gw));
    let mut values = Tensor::zeros(&[gh, gw]);
    values.data_mut()[hot_cell.0 * gw + hot_cell.1] = 1.0;
    ImpulseMask { values, hot_cell }
}

/// A `d`-dimensional descriptor of one clicked object.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryObjectVector {
    pub values: Vec<f64>,
    pub object_index: usize,
}

fn check_grid(op: &'static str, f: &FeatureMap, e: &ImpulseMask) -> Result<()> {
    if f.grid() != e.grid() {
        return Err(Error::shape(op, format!("{:?}", f.grid()), format!("{:?}", e.grid())));
    }
    Ok(())
}

/// `F''(c, h, w) = F'(c, h, w) * E(h, w)`.
pub fn sharpen(f: &FeatureMap, e: &ImpulseMask) -> Result<FeatureMap> {
    check_grid("sharpen", f, e)?;
    Ok(FeatureMap {
        values: crate::autograd::mul_broadcast(&f.values, &e.values),
        ..f.clone()
    })
}

/// Learned parameters of the position encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Mope {
    fuse_w: ParamId,
    fuse_b: ParamId,
    proj_w: ParamId,
    activation: Activation,
    channels: usize,
    embed_dim: usize,
}

impl Mope {
    /// `channels` is the query channel count `C`; the projection maps to
    /// `embed_dim`. `activation` is applied after the fusing 1x1 map.
    pub fn init<R: Rng>(
        channels: usize,
        embed_dim: usize,
        activation: Activation,
        params: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let c = channels;
        let fuse_w = params.insert_he("mope.fuse.weight", &[c, c + 1, 1, 1], c + 1, rng);
        let fuse_b = params.insert_zeros("mope.fuse.bias", &[c]);
        let proj_w = params.insert_he("mope.proj.weight", &[embed_dim, c, 1, 1], c, rng);
        Self {
            fuse_w,
            fuse_b,
            proj_w,
            activation,
            channels,
            embed_dim,
        }
    }

    pub fn num_params(channels: usize, embed_dim: usize) -> usize {
        (channels + 1) * channels + channels + channels * embed_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub(crate) fn fuse_var(&self, g: &mut Graph, fq: Var, mask: &ImpulseMask) -> Var {
        let m = g.input(mask.values.clone());
        let cat = g.concat_channels(fq, m);
        let (w, b) = (g.param(self.fuse_w), g.param(self.fuse_b));
        let y = g.conv2d(cat, w, Some(b), POINTWISE);
        g.act(y, self.activation)
    }

    /// Projects `[C, H, W]` to `[d, H, W]` and sums over the grid: `[d, 1, 1]`.
    pub(crate) fn pool_var(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.proj_w);
        let y = g.conv2d(x, w, None, POINTWISE);
        g.sum_spatial(y)
    }

    /// Full chain for one click: fuse, sharpen, pool. Returns `[d, 1, 1]`.
    pub(crate) fn object_var(&self, g: &mut Graph, fq: Var, mask: &ImpulseMask) -> Var {
        let fused = self.fuse_var(g, fq, mask);
        let sharp = g.mul_mask(fused, mask.values.clone());
        self.pool_var(g, sharp)
    }

    /// Position-free replacement: global average pooling of `F_q`, then the
    /// same projection. Every object of an image gets the same vector.
    pub(crate) fn global_var(&self, g: &mut Graph, fq: Var) -> Var {
        let pooled = g.mean_spatial(fq);
        let w = g.param(self.proj_w);
        g.conv2d(pooled, w, None, POINTWISE)
    }

    fn check_channels(&self, f: &FeatureMap) -> Result<()> {
        if f.channels() != self.channels {
            return Err(Error::shape("mope", format!("{} channels", self.channels), f.channels()));
        }
        Ok(())
    }

    /// `F'_q = act(conv1x1([F_q || E]))`, back to `C` channels.
    pub fn fuse_position(&self, params: &ParamStore, fq: &FeatureMap, e: &ImpulseMask) -> Result<FeatureMap> {
        check_grid("fuse_position", fq, e)?;
        self.check_channels(fq)?;
        let mut g = Graph::new(params);
        let x = g.input(fq.values.clone());
        let y = self.fuse_var(&mut g, x, e);
        Ok(FeatureMap {
            values: g.value(y).clone(),
            ..fq.clone()
        })
    }

    /// Per-location projection to `d` channels followed by a global sum.
    pub fn pool_to_vector(&self, params: &ParamStore, f: &FeatureMap, object_index: usize) -> Result<QueryObjectVector> {
        self.check_channels(f)?;
        let mut g = Graph::new(params);
        let x = g.input(f.values.clone());
        let v = self.pool_var(&mut g, x);
        Ok(QueryObjectVector {
            values: g.value(v).data().to_vec(),
            object_index,
        })
    }

    /// One vector per click, in click order, all sharing the same parameters.
    pub fn encode_objects(
        &self,
        params: &ParamStore,
        fq: &FeatureMap,
        clicks: &[ClickPoint],
    ) -> Result<Vec<QueryObjectVector>> {
        if clicks.is_empty() {
            return Err(Error::Empty("click list"));
        }
        if fq.frame != Frame::Query {
            return Err(Error::shape("encode_objects", "query frame", "reference frame"));
        }
        self.check_channels(fq)?;
        let mut g = Graph::new(params);
        let x = g.input(fq.values.clone());
        clicks
            .iter()
            .enumerate()
            .map(|(j, p)| {
                let mask = build_mask(p, fq.grid(), fq.stride);
                let v = self.object_var(&mut g, x, &mask);
                Ok(QueryObjectVector {
                    values: g.value(v).data().to_vec(),
                    object_index: j,
                })
            })
            .collect()
    }
}
