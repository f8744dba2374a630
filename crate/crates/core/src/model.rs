//! The full localization network and its differentiable batch loss.

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::cvmf::{select, AttentionMap, Detection, GridPrediction, Head, HeadConfig};
use crate::data::AnnotatedPair;
use crate::encoders::{image_to_tensor, EncoderConfig, Encoders};
use crate::error::{Error, Result};
use crate::geometry::{BBox, ClickPoint};
use crate::mope::{build_mask, Mope};
use crate::objective::{GraphObjective, LossBreakdown, ObjectiveConfig};
use crate::params::{Gradients, ParamStore};
use crate::tensor::{Activation, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    /// Applied after the position-fusing 1x1 map.
    pub fuse_activation: Activation,
    /// `(a_w, a_h)` in pixels.
    pub anchor: (f64, f64),
    /// When off, query vectors come from global average pooling of `F_q`.
    pub use_mope: bool,
    /// When off, the head sees the modulated features without the attention channel.
    pub use_cvmf_concat: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
            fuse_activation: Activation::Identity,
            anchor: (32.0, 32.0),
            use_mope: true,
            use_cvmf_concat: true,
        }
    }
}

impl ModelConfig {
    /// Small widths for CPU-scale experiments.
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            head: HeadConfig {
                hidden: 32,
                activation: Activation::Silu,
            },
            anchor: (20.0, 20.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.head.hidden == 0 {
            return Err(Error::Config("head width must be positive".into()));
        }
        if !(self.anchor.0 > 0.0 && self.anchor.1 > 0.0) {
            return Err(Error::Config(format!("anchor {:?} must be positive", self.anchor)));
        }
        Ok(())
    }

    fn head_inputs(&self) -> usize {
        self.encoder.embed_dim + usize::from(self.use_cvmf_concat)
    }

    /// Closed-form parameter count over every configured layer.
    pub fn num_params(&self) -> usize {
        self.encoder.num_params()
            + Mope::num_params(self.encoder.query_channels(), self.encoder.embed_dim)
            + Head::num_params(self.head_inputs(), self.head.hidden)
    }
}

/// A pair with its images converted to network input once.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub pair_id: String,
    pub query: Tensor,
    pub reference: Tensor,
    pub clicks: Vec<ClickPoint>,
    pub boxes: Vec<BBox>,
}

impl Sample {
    pub fn from_pair(p: &AnnotatedPair) -> Self {
        Self {
            pair_id: p.pair_id.clone(),
            query: image_to_tensor(&p.query),
            reference: image_to_tensor(&p.reference),
            clicks: p.clicks(),
            boxes: p.boxes(),
        }
    }
}

/// Everything the forward pass produces for one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    pub detections: Vec<Detection>,
    pub attention: Vec<AttentionMap>,
    pub predictions: Vec<GridPrediction>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    encoders: Encoders,
    mope: Mope,
    head: Head,
}

/// Per-object graph outputs: `[5, H', W']` prediction and `[H', W']` attention.
struct ObjectVars {
    pred: Var,
    map: Var,
}

impl Model {
    /// Builds the network with parameters drawn from a stream seeded by `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoders = Encoders::init(&cfg.encoder, &mut params, &mut rng)?;
        let mope = Mope::init(
            cfg.encoder.query_channels(),
            cfg.encoder.embed_dim,
            cfg.fuse_activation,
            &mut params,
            &mut rng,
        );
        let head = Head::init(cfg.head_inputs(), cfg.head, &mut params, &mut rng);
        let model = Self {
            cfg: cfg.clone(),
            encoders,
            mope,
            head,
        };
        Ok((model, params))
    }

    pub fn encoders(&self) -> &Encoders {
        &self.encoders
    }

    pub fn mope(&self) -> &Mope {
        &self.mope
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    fn forward_pair(&self, g: &mut Graph, query: &Tensor, reference: &Tensor, clicks: &[ClickPoint]) -> Result<Vec<ObjectVars>> {
        if clicks.is_empty() {
            return Err(Error::Empty("click list"));
        }
        let fq = self.encoders.query_forward(g, query)?;
        let fr = self.encoders.reference_forward(g, reference)?;
        let (_, qh, qw) = g.value(fq).chw();
        let stride = self.cfg.encoder.stride;
        let global = (!self.cfg.use_mope).then(|| self.mope.global_var(g, fq));
        let mut out = Vec::with_capacity(clicks.len());
        for p in clicks {
            let v = match global {
                Some(v) => v,
                None => self.mope.object_var(g, fq, &build_mask(p, (qh, qw), stride)),
            };
            let map = g.cosine_map(v, fr);
            let modulated = g.mul_broadcast(fr, map);
            let fused = if self.cfg.use_cvmf_concat {
                g.concat_channels(modulated, map)
            } else {
                modulated
            };
            let pred = self.head.forward_var(g, fused);
            out.push(ObjectVars { pred, map });
        }
        Ok(out)
    }

    /// Forward pass on prepared tensors; one detection per click, in order.
    pub fn localize_tensors(
        &self,
        params: &ParamStore,
        query: &Tensor,
        reference: &Tensor,
        clicks: &[ClickPoint],
    ) -> Result<Localization> {
        let mut g = Graph::new(params);
        let vars = self.forward_pair(&mut g, query, reference, clicks)?;
        let mut loc = Localization {
            detections: Vec::with_capacity(vars.len()),
            attention: Vec::with_capacity(vars.len()),
            predictions: Vec::with_capacity(vars.len()),
        };
        for (j, ov) in vars.iter().enumerate() {
            let map = g.value(ov.map);
            assert!(map.data().iter().all(|v| v.abs() <= 1.0 + 1e-12), "cosine outside [-1, 1]");
            let pred = GridPrediction::from_head_output(g.value(ov.pred), self.cfg.anchor, self.cfg.encoder.stride);
            loc.detections.push(select(&pred, j));
            loc.attention.push(AttentionMap {
                values: map.clone(),
                object_index: j,
            });
            loc.predictions.push(pred);
        }
        Ok(loc)
    }

    pub fn localize(
        &self,
        params: &ParamStore,
        query: &RgbImage,
        reference: &RgbImage,
        clicks: &[ClickPoint],
    ) -> Result<Vec<Detection>> {
        let q = image_to_tensor(query);
        let r = image_to_tensor(reference);
        Ok(self.localize_tensors(params, &q, &r, clicks)?.detections)
    }

    /// Loss over every object of every sample in `batch`. When `grads` is
    /// given, the gradient of the total is accumulated into it.
    pub fn batch_loss(
        &self,
        params: &ParamStore,
        batch: &[&Sample],
        objective: &ObjectiveConfig,
        grads: Option<&mut Gradients>,
    ) -> Result<LossBreakdown> {
        let mut g = Graph::new(params);
        let mut terms = GraphObjective::default();
        for s in batch {
            if s.clicks.len() != s.boxes.len() {
                return Err(Error::shape("batch_loss", format!("{} boxes", s.clicks.len()), s.boxes.len()));
            }
            let vars = self.forward_pair(&mut g, &s.query, &s.reference, &s.clicks)?;
            for (ov, gt) in vars.iter().zip(&s.boxes) {
                terms.push(&mut g, ov.pred, ov.map, gt, self.cfg.encoder.stride, self.cfg.anchor)?;
            }
        }
        let loss = terms.finish(&mut g, objective)?;
        if let Some(out) = grads {
            g.backward_into(loss.total, out);
        }
        Ok(loss.breakdown)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cvmf::{fuse_and_concat, modulate, attention};
    use crate::encoders::flatten_reference;
    use crate::data::{generate_pair, SceneConfig};

    fn tiny() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                stride: 16,
                stage_strides: vec![4, 4],
                query_widths: vec![3, 4],
                reference_widths: vec![3, 4],
                embed_dim: 5,
                activation: Activation::Silu,
            },
            head: HeadConfig {
                hidden: 4,
                activation: Activation::Silu,
            },
            ..ModelConfig::desk()
        }
    }

    #[test]
    fn param_count_is_closed_form() {
        for cfg in [tiny(), ModelConfig::desk(), ModelConfig { use_cvmf_concat: false, ..ModelConfig::desk() }] {
            let (_, params) = Model::init(&cfg, 0).unwrap();
            assert_eq!(params.num_scalars(), cfg.num_params());
        }
    }

    #[test]
    fn single_object_matches_manual_path() {
        let cfg = ModelConfig::desk();
        let (m, params) = Model::init(&cfg, 3).unwrap();
        let pair = generate_pair(4, 3, &SceneConfig::default()).unwrap();
        let clicks = &pair.clicks()[1..2];
        let det = m.localize(&params, &pair.query, &pair.reference, clicks).unwrap();

        let fq = m.encoders().encode_query(&params, &pair.query).unwrap();
        let fr = m.encoders().encode_reference(&params, &pair.reference).unwrap();
        let v = m.mope().encode_objects(&params, &fq, clicks).unwrap();
        let a = attention(&v[0], &flatten_reference(&fr).unwrap(), fr.grid()).unwrap();
        let fused = fuse_and_concat(&modulate(&a, &fr).unwrap(), &a).unwrap();
        let pred = m.head().detect(&params, &fused, cfg.anchor).unwrap();
        assert_eq!(det[0], select(&pred, 0));
    }

    #[test]
    fn clicks_permute_detections() {
        let (m, params) = Model::init(&ModelConfig::desk(), 3).unwrap();
        let pair = generate_pair(5, 4, &SceneConfig::default()).unwrap();
        let clicks = pair.clicks();
        let a = m.localize(&params, &pair.query, &pair.reference, &clicks).unwrap();
        let rev: Vec<_> = clicks.iter().rev().copied().collect();
        let b = m.localize(&params, &pair.query, &pair.reference, &rev).unwrap();
        for j in 0..4 {
            assert_eq!(a[j].bbox, b[3 - j].bbox);
        }
    }

    #[test]
    fn similarity_toggle_only_touches_l_s() {
        let (m, params) = Model::init(&ModelConfig::desk(), 1).unwrap();
        let samples: Vec<_> = (0..2)
            .map(|s| Sample::from_pair(&generate_pair(s, 3, &SceneConfig::default()).unwrap()))
            .collect();
        let batch: Vec<&Sample> = samples.iter().collect();
        let on = m.batch_loss(&params, &batch, &ObjectiveConfig::default(), None).unwrap();
        let off_cfg = ObjectiveConfig {
            use_similarity_loss: false,
            ..ObjectiveConfig::default()
        };
        let off = m.batch_loss(&params, &batch, &off_cfg, None).unwrap();
        assert_eq!((off.l_cn, off.l_reg, off.l_s), (on.l_cn, on.l_reg, 0.0));
        assert!(on.l_s > 0.0);
        assert_eq!(on.total, on.l_cn + on.l_reg + on.l_s);
    }

    #[test]
    fn without_mope_all_objects_share_a_vector() {
        let cfg = ModelConfig {
            use_mope: false,
            ..ModelConfig::desk()
        };
        let (m, params) = Model::init(&cfg, 2).unwrap();
        let pair = generate_pair(6, 3, &SceneConfig::default()).unwrap();
        let q = image_to_tensor(&pair.query);
        let r = image_to_tensor(&pair.reference);
        let loc = m.localize_tensors(&params, &q, &r, &pair.clicks()).unwrap();
        assert_eq!(loc.attention[0].values, loc.attention[2].values);
        assert_eq!(loc.detections[0].bbox, loc.detections[1].bbox);
    }
}
