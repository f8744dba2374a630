//! A small reverse-mode tape over [`Tensor`] values.
//!
//! Every differentiable computation in the model is recorded on a [`Graph`]
//! as a sequence of coarse operations (convolution, masking, cosine maps,
//! the three loss terms). `backward` walks the tape once in reverse and
//! accumulates parameter gradients into a [`Gradients`] buffer.

use std::collections::HashMap;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{self, sigmoid, softplus, Activation, ConvGeom, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How the negative distance of one attention map is aggregated over the
/// other maps in the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum NegativeAggregation {
    #[default]
    Mean,
    Min,
}

#[derive(Debug)]
enum Op {
    Param(ParamId),
    Input,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Concat {
        a: Var,
        b: Var,
    },
    MulMask {
        x: Var,
        mask: Tensor,
    },
    MulBroadcast {
        x: Var,
        a: Var,
    },
    SumSpatial {
        x: Var,
    },
    MeanSpatial {
        x: Var,
    },
    CosineMap {
        q: Var,
        r: Var,
    },
    ConfLoss {
        pred: Var,
        cell: (usize, usize),
    },
    RegLoss {
        pred: Var,
        cell: (usize, usize),
        target: [f64; 4],
    },
    SimLoss {
        maps: Vec<Var>,
        agg: NegativeAggregation,
    },
    WeightedSum {
        terms: Vec<(Var, f64)>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

fn l2_normalize(v: &[f64]) -> (Vec<f64>, f64) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        (vec![0.0; v.len()], 0.0)
    } else {
        (v.iter().map(|x| x / norm).collect(), norm)
    }
}

/// Backward of `u = v / |v|`: `dv = (du - u (u . du)) / |v|`; zero for `v = 0`.
fn l2_normalize_backward(u: &[f64], norm: f64, du: &[f64]) -> Vec<f64> {
    if norm == 0.0 {
        return vec![0.0; u.len()];
    }
    let dot: f64 = u.iter().zip(du).map(|(a, b)| a * b).sum();
    u.iter().zip(du).map(|(ui, di)| (di - ui * dot) / norm).collect()
}

/// Gathers the `d`-vector at each location of a `[d, H, W]` tensor.
fn locations(r: &Tensor) -> Vec<Vec<f64>> {
    let (d, h, w) = r.chw();
    let hw = h * w;
    (0..hw)
        .map(|l| (0..d).map(|c| r.data()[c * hw + l]).collect())
        .collect()
}

pub(crate) fn cosine_map_forward(q: &[f64], r: &Tensor) -> Tensor {
    let (d, h, w) = r.chw();
    assert_eq!(q.len(), d, "cosine map: query dim does not match reference channels");
    let (qn, _) = l2_normalize(q);
    let vals = locations(r)
        .iter()
        .map(|loc| {
            let (rn, _) = l2_normalize(loc);
            qn.iter().zip(&rn).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect();
    Tensor::new(vec![h, w], vals)
}

fn pairwise_distances(maps: &[&Tensor]) -> Vec<Vec<f64>> {
    let n = maps.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let s: f64 = maps[i]
                .data()
                .iter()
                .zip(maps[j].data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d[i][j] = s.sqrt();
            d[j][i] = d[i][j];
        }
    }
    d
}

/// Per-map negative distance and (for `Min`) the index attaining it.
fn negative_distances(dist: &[Vec<f64>], agg: NegativeAggregation) -> Vec<(f64, Option<usize>)> {
    let n = dist.len();
    (0..n)
        .map(|k| {
            let others = (0..n).filter(|&j| j != k);
            match agg {
                NegativeAggregation::Mean => {
                    (others.map(|j| dist[k][j]).sum::<f64>() / (n - 1) as f64, None)
                }
                NegativeAggregation::Min => {
                    let j = others
                        .min_by(|&a, &b| dist[k][a].total_cmp(&dist[k][b]))
                        .expect("at least two maps");
                    (dist[k][j], Some(j))
                }
            }
        })
        .collect()
}

/// Softplus separation over attention maps; see [`crate::objective::similarity_loss`].
pub(crate) fn similarity_loss_forward(maps: &[&Tensor], agg: NegativeAggregation) -> f64 {
    if maps.len() < 2 {
        return 0.0;
    }
    let dist = pairwise_distances(maps);
    negative_distances(&dist, agg)
        .iter()
        .enumerate()
        .map(|(k, &(d_neg, _))| {
            let d_pos = dist[k][k];
            softplus(d_pos - d_neg)
        })
        .sum()
}

pub(crate) fn conf_loss_forward(logits: &[f64], positive: usize) -> f64 {
    let n = logits.len() as f64;
    logits
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            let y = if i == positive { 1.0 } else { 0.0 };
            softplus(z) - y * z
        })
        .sum::<f64>()
        / n
}

pub(crate) fn reg_loss_forward(t: [f64; 4], target: [f64; 4]) -> f64 {
    let ex = sigmoid(t[0]) - target[0];
    let ey = sigmoid(t[1]) - target[1];
    let ew = t[2] - target[2];
    let eh = t[3] - target[3];
    ex * ex + ey * ey + ew * ew + eh * eh
}

fn pred_cell(pred: &Tensor, cell: (usize, usize)) -> [f64; 4] {
    let (_, h, w) = pred.chw();
    let idx = |c: usize| pred.data()[(c * h + cell.0) * w + cell.1];
    [idx(1), idx(2), idx(3), idx(4)]
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.get(id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(Tensor::scalar(0.0), Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let out = tensor::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geom);
        self.push(out, Op::Conv2d { x, w, b, geom })
    }

    pub fn act(&mut self, x: Var, kind: Activation) -> Var {
        if kind == Activation::Identity {
            return x;
        }
        let out = kind.map(self.value(x));
        self.push(out, Op::Act { x, kind })
    }

    /// Channel concatenation. A `[H, W]` operand is treated as one channel.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let out = concat_channels(self.value(a), self.value(b));
        self.push(out, Op::Concat { a, b })
    }

    /// Multiplies every channel of `x: [C, H, W]` by a constant `[H, W]` mask.
    pub fn mul_mask(&mut self, x: Var, mask: Tensor) -> Var {
        let out = mul_broadcast(self.value(x), &mask);
        self.push(out, Op::MulMask { x, mask })
    }

    /// Multiplies every channel of `x: [C, H, W]` by a differentiable `[H, W]` map.
    pub fn mul_broadcast(&mut self, x: Var, a: Var) -> Var {
        let out = mul_broadcast(self.value(x), self.value(a));
        self.push(out, Op::MulBroadcast { x, a })
    }

    /// Sum over `(h, w)`, producing `[C, 1, 1]`.
    pub fn sum_spatial(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let data = self.value(x).data().chunks(h * w).map(|ch| ch.iter().sum()).collect();
        self.push(Tensor::new(vec![c, 1, 1], data), Op::SumSpatial { x })
    }

    /// Mean over `(h, w)`, producing `[C, 1, 1]`.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let n = (h * w) as f64;
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|ch| ch.iter().sum::<f64>() / n)
            .collect();
        self.push(Tensor::new(vec![c, 1, 1], data), Op::MeanSpatial { x })
    }

    /// Cosine similarity of the vector `q` (any shape with `d` elements)
    /// against every location of `r: [d, H, W]`, giving `[H, W]`.
    pub fn cosine_map(&mut self, q: Var, r: Var) -> Var {
        let out = cosine_map_forward(self.value(q).data(), self.value(r));
        self.push(out, Op::CosineMap { q, r })
    }

    /// Mean binary cross-entropy of channel 0 of `pred: [5, H, W]` against a
    /// one-hot target at `cell`.
    pub fn conf_loss(&mut self, pred: Var, cell: (usize, usize)) -> Var {
        let p = self.value(pred);
        let (_, h, w) = p.chw();
        let v = conf_loss_forward(&p.data()[..h * w], cell.0 * w + cell.1);
        self.push(Tensor::scalar(v), Op::ConfLoss { pred, cell })
    }

    /// Squared error of the encoded box channels 1..5 at `cell`.
    pub fn reg_loss(&mut self, pred: Var, cell: (usize, usize), target: [f64; 4]) -> Var {
        let v = reg_loss_forward(pred_cell(self.value(pred), cell), target);
        self.push(Tensor::scalar(v), Op::RegLoss { pred, cell, target })
    }

    pub fn sim_loss(&mut self, maps: Vec<Var>, agg: NegativeAggregation) -> Var {
        let vals: Vec<&Tensor> = maps.iter().map(|&m| self.value(m)).collect();
        let v = similarity_loss_forward(&vals, agg);
        self.push(Tensor::scalar(v), Op::SimLoss { maps, agg })
    }

    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        let mut v = 0.0;
        for &(t, k) in &terms {
            v += k * self.value(t).item();
        }
        self.push(Tensor::scalar(v), Op::WeightedSum { terms })
    }

    /// Reverse pass from a scalar node; returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut out = Gradients::zeros_like(self.params);
        self.backward_into(loss, &mut out);
        out
    }

    /// Reverse pass that accumulates into an existing gradient buffer.
    pub fn backward_into(&self, loss: Var, out: &mut Gradients) {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Param(id) => out.accumulate(*id, &g),
                Op::Input => {}
                Op::Conv2d { x, w, b, geom } => {
                    let (dx, dw, db) =
                        tensor::conv2d_backward(self.value(*x), self.value(*w), &g, *geom);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    if let Some(b) = b {
                        acc(&mut grads, *b, db);
                    }
                }
                Op::Act { x, kind } => {
                    let xv = self.value(*x);
                    let d = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xi, &gi)| gi * kind.derivative(xi))
                        .collect();
                    acc(&mut grads, *x, Tensor::new(xv.shape().to_vec(), d));
                }
                Op::Concat { a, b } => {
                    let na = self.value(*a).len();
                    let (ga, gb) = g.data().split_at(na);
                    acc(&mut grads, *a, Tensor::new(self.value(*a).shape().to_vec(), ga.to_vec()));
                    acc(&mut grads, *b, Tensor::new(self.value(*b).shape().to_vec(), gb.to_vec()));
                }
                Op::MulMask { x, mask } => {
                    acc(&mut grads, *x, mul_broadcast(&g, mask));
                }
                Op::MulBroadcast { x, a } => {
                    let av = self.value(*a);
                    let xv = self.value(*x);
                    let (c, h, w) = xv.chw();
                    let hw = h * w;
                    let mut da = vec![0.0; hw];
                    for ci in 0..c {
                        for l in 0..hw {
                            da[l] += g.data()[ci * hw + l] * xv.data()[ci * hw + l];
                        }
                    }
                    acc(&mut grads, *x, mul_broadcast(&g, av));
                    acc(&mut grads, *a, Tensor::new(av.shape().to_vec(), da));
                }
                Op::SumSpatial { x } | Op::MeanSpatial { x } => {
                    let (c, h, w) = self.value(*x).chw();
                    let scale = match self.nodes[i].op {
                        Op::MeanSpatial { .. } => 1.0 / (h * w) as f64,
                        _ => 1.0,
                    };
                    let mut d = Vec::with_capacity(c * h * w);
                    for ci in 0..c {
                        d.extend(std::iter::repeat(g.data()[ci] * scale).take(h * w));
                    }
                    acc(&mut grads, *x, Tensor::new(vec![c, h, w], d));
                }
                Op::CosineMap { q, r } => {
                    let qv = self.value(*q);
                    let rv = self.value(*r);
                    let (d, h, w) = rv.chw();
                    let hw = h * w;
                    let (qn, qnorm) = l2_normalize(qv.data());
                    let mut dqn = vec![0.0; d];
                    let mut dr = vec![0.0; d * hw];
                    for (l, loc) in locations(rv).iter().enumerate() {
                        let gl = g.data()[l];
                        let (rn, rnorm) = l2_normalize(loc);
                        for c in 0..d {
                            dqn[c] += gl * rn[c];
                        }
                        let drn: Vec<f64> = qn.iter().map(|x| gl * x).collect();
                        let dloc = l2_normalize_backward(&rn, rnorm, &drn);
                        for c in 0..d {
                            dr[c * hw + l] = dloc[c];
                        }
                    }
                    let dq = l2_normalize_backward(&qn, qnorm, &dqn);
                    acc(&mut grads, *q, Tensor::new(qv.shape().to_vec(), dq));
                    acc(&mut grads, *r, Tensor::new(rv.shape().to_vec(), dr));
                }
                Op::ConfLoss { pred, cell } => {
                    let p = self.value(*pred);
                    let (_, h, w) = p.chw();
                    let n = (h * w) as f64;
                    let pos = cell.0 * w + cell.1;
                    let mut d = vec![0.0; p.len()];
                    for (l, slot) in d[..h * w].iter_mut().enumerate() {
                        let y = if l == pos { 1.0 } else { 0.0 };
                        *slot = g.item() * (sigmoid(p.data()[l]) - y) / n;
                    }
                    acc(&mut grads, *pred, Tensor::new(p.shape().to_vec(), d));
                }
                Op::RegLoss { pred, cell, target } => {
                    let p = self.value(*pred);
                    let (_, h, w) = p.chw();
                    let t = pred_cell(p, *cell);
                    let sx = sigmoid(t[0]);
                    let sy = sigmoid(t[1]);
                    let local = [
                        2.0 * (sx - target[0]) * sx * (1.0 - sx),
                        2.0 * (sy - target[1]) * sy * (1.0 - sy),
                        2.0 * (t[2] - target[2]),
                        2.0 * (t[3] - target[3]),
                    ];
                    let mut d = vec![0.0; p.len()];
                    for (k, lv) in local.iter().enumerate() {
                        d[((k + 1) * h + cell.0) * w + cell.1] = g.item() * lv;
                    }
                    acc(&mut grads, *pred, Tensor::new(p.shape().to_vec(), d));
                }
                Op::SimLoss { maps, agg } => {
                    let n = maps.len();
                    if n < 2 {
                        continue;
                    }
                    let vals: Vec<&Tensor> = maps.iter().map(|&m| self.value(m)).collect();
                    let dist = pairwise_distances(&vals);
                    let negs = negative_distances(&dist, *agg);
                    let mut dm: Vec<Vec<f64>> = vals.iter().map(|t| vec![0.0; t.len()]).collect();
                    // d term_k / d d_neg_k = -sigmoid(-d_neg_k)
                    let mut add_pair = |k: usize, j: usize, coeff: f64| {
                        if dist[k][j] == 0.0 {
                            return;
                        }
                        let s = coeff / dist[k][j];
                        for (idx, (a, b)) in vals[k].data().iter().zip(vals[j].data()).enumerate() {
                            dm[k][idx] += s * (a - b);
                            dm[j][idx] -= s * (a - b);
                        }
                    };
                    for (k, &(d_neg, arg)) in negs.iter().enumerate() {
                        let dterm = -g.item() * sigmoid(-d_neg);
                        match arg {
                            None => {
                                let c = dterm / (n - 1) as f64;
                                for j in (0..n).filter(|&j| j != k) {
                                    add_pair(k, j, c);
                                }
                            }
                            Some(j) => add_pair(k, j, dterm),
                        }
                    }
                    for (m, d) in maps.iter().zip(dm) {
                        acc(&mut grads, *m, Tensor::new(self.value(*m).shape().to_vec(), d));
                    }
                }
                Op::WeightedSum { terms } => {
                    for &(t, k) in terms {
                        acc(&mut grads, t, Tensor::scalar(g.item() * k));
                    }
                }
            }
        }
    }
}

pub(crate) fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (ha, wa) = (a.shape()[a.shape().len() - 2], a.shape()[a.shape().len() - 1]);
    let (hb, wb) = (b.shape()[b.shape().len() - 2], b.shape()[b.shape().len() - 1]);
    assert_eq!((ha, wa), (hb, wb), "concat grid mismatch");
    let ca = a.len() / (ha * wa);
    let cb = b.len() / (hb * wb);
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(vec![ca + cb, ha, wa], data)
}

pub(crate) fn mul_broadcast(x: &Tensor, a: &Tensor) -> Tensor {
    let (c, h, w) = x.chw();
    assert_eq!(a.len(), h * w, "broadcast map grid mismatch");
    let mut data = x.data().to_vec();
    for ci in 0..c {
        for (v, m) in data[ci * h * w..(ci + 1) * h * w].iter_mut().zip(a.data()) {
            *v *= m;
        }
    }
    Tensor::new(vec![c, h, w], data)
}
