//! Training loop, checkpoints and the evaluation, ablation and timing drivers.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{AnchorSetting, TrainConfig};
use crate::cvmf::DetectionRecord;
use crate::data::{read_dataset, AnnotatedPair, SplitName};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, ImageRule};
use crate::model::{Model, ModelConfig, Sample};
use crate::objective::LossBreakdown;
use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;

/// ChaCha stream used for the data order; parameters are drawn from stream 0.
const ORDER_STREAM: u64 = 1;

pub const CHECKPOINT_HEADER: &[u8] = b"mogeo-ckpt-v1\n";

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            beta1,
            beta2,
            epsilon,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = grads.get(id).data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.epsilon);
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    train: TrainConfig,
    step: usize,
    /// Position of the data-order stream, as a decimal string.
    rng_word_pos: String,
    params: Vec<(String, Vec<usize>)>,
}

/// Parameters plus everything needed to rebuild the network and resume the data order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub step: usize,
    pub rng_word_pos: u128,
    pub params: ParamStore,
}

impl Checkpoint {
    /// Header line, a little-endian `u64` length, JSON metadata, then every
    /// parameter as raw little-endian `f64` in store order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = CheckpointMeta {
            model: self.model.clone(),
            train: self.train.clone(),
            step: self.step,
            rng_word_pos: self.rng_word_pos.to_string(),
            params: self.params.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect(),
        };
        let json = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut out = Vec::with_capacity(CHECKPOINT_HEADER.len() + 8 + json.len() + 8 * self.params.num_scalars());
        out.extend_from_slice(CHECKPOINT_HEADER);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        let rest = bytes
            .strip_prefix(CHECKPOINT_HEADER)
            .ok_or_else(|| bad("missing mogeo-ckpt-v1 header"))?;
        if rest.len() < 8 {
            return Err(bad("truncated length"));
        }
        let (len, rest) = rest.split_at(8);
        let len = u64::from_le_bytes(len.try_into().expect("8 bytes")) as usize;
        if rest.len() < len {
            return Err(bad("truncated metadata"));
        }
        let (json, mut raw) = rest.split_at(len);
        let meta: CheckpointMeta = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut params = ParamStore::new();
        for (name, shape) in &meta.params {
            let n: usize = shape.iter().product();
            if raw.len() < 8 * n {
                return Err(bad("truncated parameter data"));
            }
            let (chunk, tail) = raw.split_at(8 * n);
            raw = tail;
            let data = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            params.insert(name.clone(), Tensor::new(shape.clone(), data));
        }
        if !raw.is_empty() {
            return Err(bad("trailing bytes after parameters"));
        }
        Ok(Self {
            model: meta.model,
            train: meta.train,
            step: meta.step,
            rng_word_pos: meta.rng_word_pos.parse().map_err(|_| bad("bad rng position"))?,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the network, checking that every stored array matches the
    /// configured layer shapes.
    pub fn restore(&self) -> Result<(Model, ParamStore)> {
        let (model, fresh) = Model::init(&self.model, 0)?;
        let names = |s: &ParamStore| s.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect::<Vec<_>>();
        if names(&fresh) != names(&self.params) {
            return Err(Error::Checkpoint("stored parameters do not match the model configuration".into()));
        }
        Ok((model, self.params.clone()))
    }
}

/// Mean ground-truth box size over `pairs`.
pub fn mean_box_size(pairs: &[AnnotatedPair]) -> Result<(f64, f64)> {
    let boxes: Vec<_> = pairs.iter().flat_map(|p| p.boxes()).collect();
    if boxes.is_empty() {
        return Err(Error::Empty("anchor statistics"));
    }
    let n = boxes.len() as f64;
    Ok((
        boxes.iter().map(|b| b.w).sum::<f64>() / n,
        boxes.iter().map(|b| b.h).sum::<f64>() / n,
    ))
}

pub fn resolve_anchor(cfg: &TrainConfig, train_pairs: &[AnnotatedPair]) -> Result<(f64, f64)> {
    match cfg.anchor {
        AnchorSetting::Auto => mean_box_size(train_pairs),
        AnchorSetting::Fixed(w, h) => Ok((w, h)),
    }
}

pub fn log_line(step: usize, l: &LossBreakdown) -> String {
    format!("{step} {:.6} {:.6} {:.6} {:.6}", l.l_cn, l.l_reg, l.l_s, l.total)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub checkpoint: Checkpoint,
    /// Loss of every step, before its update.
    pub history: Vec<LossBreakdown>,
}

impl TrainOutcome {
    pub fn params(&self) -> &ParamStore {
        &self.checkpoint.params
    }
}

/// Trains on `pairs`, writing one `step l_cn l_reg l_s total` line per step to `log`.
///
/// Each epoch visits the pairs in a fresh order drawn from the seeded
/// data-order stream, in batches of `batch_size` (the last may be short).
pub fn train(cfg: &TrainConfig, pairs: &[AnnotatedPair], log: &mut dyn Write) -> Result<TrainOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let anchor = resolve_anchor(cfg, pairs)?;
    let model_cfg = cfg.model_config(anchor);
    let (model, mut params) = Model::init(&model_cfg, cfg.seed)?;
    let objective = cfg.objective();
    let samples: Vec<Sample> = pairs.iter().map(Sample::from_pair).collect();
    let mut adam = Adam::new(&params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(ORDER_STREAM);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::new();
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);

    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(cfg.batch_size) {
            if history.len() >= max_steps {
                break 'epochs;
            }
            let step = history.len() + 1;
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let mut grads = Gradients::zeros_like(&params);
            let loss = model.batch_loss(&params, &batch, &objective, Some(&mut grads))?;
            if let Some(term) = loss.non_finite_term() {
                return Err(Error::NonFinite { term, step });
            }
            if !grads.is_finite() {
                return Err(Error::NonFinite { term: "gradient", step });
            }
            writeln!(log, "{}", log_line(step, &loss)).map_err(|e| Error::io("<training log>", e))?;
            adam.step(&mut params, &grads);
            history.push(loss);
        }
    }

    let checkpoint = Checkpoint {
        model: model_cfg,
        train: cfg.clone(),
        step: history.len(),
        rng_word_pos: order_rng.get_word_pos(),
        params,
    };
    Ok(TrainOutcome {
        model,
        checkpoint,
        history,
    })
}

/// Pairs of `split`, in manifest order.
pub fn split_pairs(pairs: &[AnnotatedPair], split: &crate::data::DatasetSplit, name: SplitName) -> Vec<AnnotatedPair> {
    let ids = split.ids(name);
    pairs.iter().filter(|p| ids.contains(&p.pair_id)).cloned().collect()
}

/// Trains on the train split of a dataset directory and writes
/// `checkpoint.bin` and `train_log.txt` into `out`.
pub fn train_cmd(cfg: &TrainConfig, data_root: &Path, out: &Path) -> Result<TrainOutcome> {
    let (pairs, split) = read_dataset(data_root)?;
    let train_pairs = split_pairs(&pairs, &split, SplitName::Train);
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join("train_log.txt");
    let file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = std::io::BufWriter::new(file);
    let outcome = train(cfg, &train_pairs, &mut log)?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    outcome.checkpoint.save(&out.join("checkpoint.bin"))?;
    Ok(outcome)
}

/// One detection record per object of every pair.
pub fn detect_all(model: &Model, params: &ParamStore, pairs: &[AnnotatedPair]) -> Result<Vec<DetectionRecord>> {
    let mut out = Vec::new();
    for p in pairs {
        let dets = model.localize(params, &p.query, &p.reference, &p.clicks())?;
        out.extend(dets.into_iter().map(|d| DetectionRecord {
            pair_id: p.pair_id.clone(),
            object_index: d.object_index,
            bbox: d.bbox,
            confidence: d.confidence,
        }));
    }
    Ok(out)
}

pub fn evaluate_model(model: &Model, params: &ParamStore, pairs: &[AnnotatedPair], rule: ImageRule) -> Result<(EvalReport, Vec<DetectionRecord>)> {
    let records = detect_all(model, params, pairs)?;
    Ok((evaluate(pairs, &records, rule)?, records))
}

/// Loads a checkpoint and scores it on one split of a dataset directory.
pub fn evaluate_cmd(ckpt: &Path, data_root: &Path, split: SplitName, rule: ImageRule) -> Result<(EvalReport, Vec<DetectionRecord>)> {
    let (model, params) = Checkpoint::load(ckpt)?.restore()?;
    let (pairs, splits) = read_dataset(data_root)?;
    let subset = split_pairs(&pairs, &splits, split);
    if subset.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    evaluate_model(&model, &params, &subset, rule)
}

/// The four model variants compared in the ablation study.
pub fn ablation_rows(base: &TrainConfig) -> [(&'static str, TrainConfig); 4] {
    let full = TrainConfig {
        use_mope: true,
        use_cvmf_concat: true,
        use_similarity_loss: true,
        ..base.clone()
    };
    [
        ("full", full.clone()),
        (
            "w/o L_s",
            TrainConfig {
                use_similarity_loss: false,
                ..full.clone()
            },
        ),
        (
            "w/o CVMF",
            TrainConfig {
                use_cvmf_concat: false,
                ..full.clone()
            },
        ),
        ("w/o MOPE", TrainConfig { use_mope: false, ..full }),
    ]
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub name: &'static str,
    pub report: EvalReport,
    pub final_loss: LossBreakdown,
}

/// Trains every ablation variant on `train_pairs` and scores it on `eval_pairs`.
pub fn ablate(base: &TrainConfig, train_pairs: &[AnnotatedPair], eval_pairs: &[AnnotatedPair]) -> Result<Vec<AblationRow>> {
    ablation_rows(base)
        .into_iter()
        .map(|(name, cfg)| {
            let outcome = train(&cfg, train_pairs, &mut std::io::sink())?;
            let (report, _) = evaluate_model(&outcome.model, outcome.params(), eval_pairs, ImageRule::AllExceed)?;
            Ok(AblationRow {
                name,
                report,
                final_loss: *outcome.history.last().expect("at least one step"),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingReport {
    pub param_count: usize,
    pub analytic_param_count: usize,
    pub n_pairs: usize,
    pub mean_seconds: f64,
}

/// Parameter count and mean wall time of one forward pass per pair.
pub fn timing_report(model: &Model, params: &ParamStore, pairs: &[AnnotatedPair]) -> Result<TimingReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("timing set"));
    }
    let start = Instant::now();
    for p in pairs {
        model.localize(params, &p.query, &p.reference, &p.clicks())?;
    }
    Ok(TimingReport {
        param_count: params.num_scalars(),
        analytic_param_count: model.cfg.num_params(),
        n_pairs: pairs.len(),
        mean_seconds: start.elapsed().as_secs_f64() / pairs.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_pair, SceneConfig};

    fn pairs(n: u64) -> Vec<AnnotatedPair> {
        (0..n).map(|s| generate_pair(s, 2, &SceneConfig::default()).unwrap()).collect()
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            max_steps: Some(2),
            learning_rate: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..quick()
        };
        let data = pairs(4);
        let out = train(&cfg, &data, &mut std::io::sink()).unwrap();
        let (_, init) = Model::init(&out.checkpoint.model, cfg.seed).unwrap();
        assert_eq!(out.history.len(), 2);
        assert!(out.params().bits_equal(&init));
    }

    #[test]
    fn log_has_one_line_per_step() {
        let mut log = Vec::new();
        let out = train(&quick(), &pairs(4), &mut log).unwrap();
        let text = String::from_utf8(log).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], log_line(1, &out.history[0]));
        assert_eq!(lines[1].split_whitespace().count(), 5);
    }

    #[test]
    fn checkpoint_bytes_round_trip() {
        let out = train(&quick(), &pairs(4), &mut std::io::sink()).unwrap();
        let back = Checkpoint::from_bytes(&out.checkpoint.to_bytes()).unwrap();
        assert_eq!(back, out.checkpoint);
        let (model, params) = back.restore().unwrap();
        let p = &pairs(1)[0];
        assert_eq!(
            model.localize(&params, &p.query, &p.reference, &p.clicks()).unwrap(),
            out.model.localize(out.params(), &p.query, &p.reference, &p.clicks()).unwrap()
        );
        assert!(Checkpoint::from_bytes(b"not a checkpoint").is_err());
        let mut cut = out.checkpoint.to_bytes();
        cut.pop();
        assert!(Checkpoint::from_bytes(&cut).is_err());
    }

    #[test]
    fn mismatched_configuration_is_rejected() {
        let out = train(&quick(), &pairs(2), &mut std::io::sink()).unwrap();
        let mut ck = out.checkpoint.clone();
        ck.model.use_cvmf_concat = false;
        assert!(ck.restore().is_err());
    }

    #[test]
    fn auto_anchor_is_mean_box() {
        let data = pairs(3);
        let (w, h) = mean_box_size(&data).unwrap();
        let all: Vec<_> = data.iter().flat_map(|p| p.boxes()).collect();
        assert!((w - all.iter().map(|b| b.w).sum::<f64>() / all.len() as f64).abs() < 1e-12);
        assert!(h > 0.0);
    }
}
