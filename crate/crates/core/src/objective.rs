//! Training objective: confidence, regression and attention-separation terms.
//!
//! The plain functions here evaluate the loss on finished predictions; the
//! model builds the same terms on an autograd [`Graph`] through
//! [`GraphObjective`], sharing the scalar kernels.

use serde::{Deserialize, Serialize};

use crate::autograd::{conf_loss_forward, reg_loss_forward, similarity_loss_forward, Graph, NegativeAggregation, Var};
use crate::cvmf::{AttentionMap, GridPrediction};
use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cn: f64,
    pub reg: f64,
    pub s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cn: 1.0,
            reg: 1.0,
            s: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    pub use_similarity_loss: bool,
    pub aggregation: NegativeAggregation,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            use_similarity_loss: true,
            aggregation: NegativeAggregation::Mean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cn: f64,
    pub l_reg: f64,
    pub l_s: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `total = w_cn l_cn + w_reg l_reg + w_s l_s`, summed in that order.
    pub fn new(l_cn: f64, l_reg: f64, l_s: f64, w: LossWeights) -> Self {
        let mut total = 0.0;
        total += w.cn * l_cn;
        total += w.reg * l_reg;
        total += w.s * l_s;
        Self { l_cn, l_reg, l_s, total }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_cn, self.l_reg, self.l_s, self.total].iter().all(|v| v.is_finite())
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [("l_cn", self.l_cn), ("l_reg", self.l_reg), ("l_s", self.l_s), ("total", self.total)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

/// Grid cell containing the box center, clamped into the grid.
pub fn positive_cell(gt: &BBox, grid: (usize, usize), stride: usize) -> (usize, usize) {
    let cell = |v: f64, n: usize| ((v.max(0.0) / stride as f64).floor() as usize).min(n - 1);
    (cell(gt.cy, grid.0), cell(gt.cx, grid.1))
}

/// Encoded regression target at `cell`: `(g_x, g_y, ln(g_w/a_w), ln(g_h/a_h))`,
/// where `(g_x, g_y)` is the center's fractional offset within the cell.
pub fn regression_target(gt: &BBox, cell: (usize, usize), stride: usize, anchor: (f64, f64)) -> Result<[f64; 4]> {
    if !(gt.w > 0.0 && gt.h > 0.0) {
        return Err(Error::DegenerateBox { w: gt.w, h: gt.h });
    }
    let s = stride as f64;
    Ok([
        gt.cx / s - cell.1 as f64,
        gt.cy / s - cell.0 as f64,
        (gt.w / anchor.0).ln(),
        (gt.h / anchor.1).ln(),
    ])
}

/// Mean per-cell binary cross-entropy against a one-hot target at the cell
/// holding the box center.
pub fn confidence_loss(pred: &GridPrediction, gt: &BBox) -> f64 {
    let grid = pred.grid();
    let (h, w) = positive_cell(gt, grid, pred.stride);
    conf_loss_forward(pred.conf_logit.data(), h * grid.1 + w)
}

/// Squared error of the four encoded box parameters at the positive cell.
pub fn regression_loss(pred: &GridPrediction, gt: &BBox) -> Result<f64> {
    let cell = positive_cell(gt, pred.grid(), pred.stride);
    let target = regression_target(gt, cell, pred.stride, pred.anchor)?;
    Ok(reg_loss_forward(pred.params_at(cell), target))
}

/// `Σ_k ln(1 + exp(d_pos - d_neg))` with `d_pos = 0` (a map against itself)
/// and `d_neg` aggregated over every other map in the batch.
pub fn similarity_loss(maps: &[AttentionMap], aggregation: NegativeAggregation) -> Result<f64> {
    if let Some(first) = maps.first() {
        let grid = first.values.hw();
        if let Some(bad) = maps.iter().find(|m| m.values.hw() != grid) {
            return Err(Error::shape("similarity_loss", format!("{grid:?}"), format!("{:?}", bad.values.hw())));
        }
    }
    let vals: Vec<_> = maps.iter().map(|m| &m.values).collect();
    Ok(similarity_loss_forward(&vals, aggregation))
}

/// Loss over a batch: `l_cn`, `l_reg` are means over objects, `l_s` spans
/// every map in the batch.
pub fn total_loss(
    preds: &[GridPrediction],
    gts: &[BBox],
    maps: &[AttentionMap],
    cfg: &ObjectiveConfig,
) -> Result<LossBreakdown> {
    if preds.len() != gts.len() || preds.len() != maps.len() {
        return Err(Error::shape(
            "total_loss",
            format!("{} aligned entries", preds.len()),
            format!("{} boxes, {} maps", gts.len(), maps.len()),
        ));
    }
    if preds.is_empty() {
        return Err(Error::Empty("loss batch"));
    }
    let n = preds.len() as f64;
    let mut l_cn = 0.0;
    let mut l_reg = 0.0;
    for (p, gt) in preds.iter().zip(gts) {
        l_cn += confidence_loss(p, gt) / n;
        l_reg += regression_loss(p, gt)? / n;
    }
    let l_s = if cfg.use_similarity_loss {
        similarity_loss(maps, cfg.aggregation)?
    } else {
        0.0
    };
    Ok(LossBreakdown::new(l_cn, l_reg, l_s, cfg.weights))
}

/// Accumulates loss terms on a graph, mirroring [`total_loss`].
#[derive(Debug, Default)]
pub(crate) struct GraphObjective {
    cn: Vec<Var>,
    reg: Vec<Var>,
    maps: Vec<Var>,
}

pub(crate) struct GraphLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

impl GraphObjective {
    /// Adds one object's prediction `[5, H', W']` and attention map `[H', W']`.
    pub fn push(&mut self, g: &mut Graph, pred: Var, map: Var, gt: &BBox, stride: usize, anchor: (f64, f64)) -> Result<()> {
        let (_, h, w) = g.value(pred).chw();
        let cell = positive_cell(gt, (h, w), stride);
        let target = regression_target(gt, cell, stride, anchor)?;
        self.cn.push(g.conf_loss(pred, cell));
        self.reg.push(g.reg_loss(pred, cell, target));
        self.maps.push(map);
        Ok(())
    }

    pub fn finish(self, g: &mut Graph, cfg: &ObjectiveConfig) -> Result<GraphLoss> {
        if self.cn.is_empty() {
            return Err(Error::Empty("loss batch"));
        }
        let inv = 1.0 / self.cn.len() as f64;
        let l_cn = g.weighted_sum(self.cn.iter().map(|&v| (v, inv)).collect());
        let l_reg = g.weighted_sum(self.reg.iter().map(|&v| (v, inv)).collect());
        let w = cfg.weights;
        let mut terms = vec![(l_cn, w.cn), (l_reg, w.reg)];
        let mut l_s_value = 0.0;
        if cfg.use_similarity_loss {
            let l_s = g.sim_loss(self.maps, cfg.aggregation);
            l_s_value = g.value(l_s).item();
            terms.push((l_s, w.s));
        }
        let breakdown = LossBreakdown::new(g.value(l_cn).item(), g.value(l_reg).item(), l_s_value, w);
        let total = g.weighted_sum(terms);
        Ok(GraphLoss { total, breakdown })
    }
}
