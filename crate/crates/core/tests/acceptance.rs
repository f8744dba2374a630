//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Run with `cargo test --release --test acceptance`.

use std::collections::HashSet;
use std::time::Instant;

use mogeo::autograd::NegativeAggregation;
use mogeo::config::TrainConfig;
use mogeo::cvmf::{attention, AttentionMap, DetectionRecord, GridPrediction};
use mogeo::data::{generate_dataset, AnnotatedPair, GenerateConfig, SceneConfig};
use mogeo::encoders::{EncoderConfig, FeatureMap, Frame};
use mogeo::eval::{acc_at, acc_i_at, evaluate, EvalReport, ImageRule};
use mogeo::gradcheck::{central_differences, max_relative_error};
use mogeo::model::{Model, ModelConfig, Sample};
use mogeo::mope::{build_mask, sharpen, Mope, QueryObjectVector};
use mogeo::objective::{confidence_loss, regression_loss, regression_target, similarity_loss, ObjectiveConfig};
use mogeo::params::{Gradients, ParamStore};
use mogeo::tensor::{Activation, Tensor};
use mogeo::train::{evaluate_model, train};
use mogeo::{iou, BBox, ClickPoint};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIFTING_TOL: f64 = 1e-12;
const GRADIENT_STEP: f64 = 1e-5;
const GRADIENT_TOL: f64 = 1e-4;
const GRADIENT_FLOOR: f64 = 1e-6;
const TINY_PARAM_LIMIT: usize = 5_000;
const ATTENTION_TOL: f64 = 1e-12;
const SIMILARITY_TOL: f64 = 1e-9;
const DISTANCE10_TOL: f64 = 1e-12;
const CONFIDENCE_TOL: f64 = 1e-9;
const REGRESSION_TOL: f64 = 1e-12;
const RECOVERY_TOL: f64 = 1e-6;
const OVERFIT_ACC: f64 = 0.9;
const OVERFIT_ACC_I: f64 = 0.8;
const OVERFIT_SECONDS: f64 = 600.0;
/// "≥/≈" slack between the w/o L_s and w/o CVMF rows, in acc@0.25.
const ABLATION_SLACK: f64 = 0.03;
const TREND_SEEDS: [u64; 3] = [0, 1, 2];
const TREND_EPOCHS: usize = 8;
const TREND_TRAIN_PAIRS: usize = 512;
const TREND_TRAIN_OBJECTS: (usize, usize) = (1, 4);
const TREND_TEST_PAIRS: usize = 128;
const TREND_TEST_OBJECTS: (usize, usize) = (1, 9);

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect())
}

fn one_hot_masks() -> Verdict {
    let mut r = rng(1);
    let mut bad = 0;
    for _ in 0..1000 {
        let stride = [1usize, 2, 4, 8, 16, 32][r.gen_range(0..6)];
        let grid = (r.gen_range(1..=24), r.gen_range(1..=24));
        // up to 20 % past the far edge, to exercise the clamp
        let p = ClickPoint::new(
            r.gen_range(0.0..1.2 * (grid.1 * stride) as f64),
            r.gen_range(0.0..1.2 * (grid.0 * stride) as f64),
        );
        let m = build_mask(&p, grid, stride);
        let sum: f64 = m.values().data().iter().sum();
        let expect = (
            ((p.y / stride as f64).floor() as usize).min(grid.0 - 1),
            ((p.x / stride as f64).floor() as usize).min(grid.1 - 1),
        );
        let ones = m.values().data().iter().filter(|&&v| v == 1.0).count();
        if sum != 1.0 || ones != 1 || m.hot_cell() != expect || m.values().data()[expect.0 * grid.1 + expect.1] != 1.0 {
            bad += 1;
        }
    }
    verdict(bad == 0, format!("{bad}/1000 masks wrong"))
}

fn sifting() -> Verdict {
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (c, d) = (r.gen_range(1..=12), r.gen_range(1..=12));
        let grid = (r.gen_range(1..=8), r.gen_range(1..=8));
        let mut params = ParamStore::new();
        let mope = Mope::init(c, d, Activation::Identity, &mut params, &mut r);
        let f = FeatureMap {
            values: random_tensor(&mut r, &[c, grid.0, grid.1]),
            stride: 16,
            frame: Frame::Query,
        };
        let click = ClickPoint::new(r.gen_range(0.0..(grid.1 * 16) as f64), r.gen_range(0.0..(grid.0 * 16) as f64));
        let e = build_mask(&click, grid, 16);
        let pooled = mope.pool_to_vector(&params, &sharpen(&f, &e).unwrap(), 0).unwrap();
        let w = params.get(params.id("mope.proj.weight").unwrap()).data();
        let (h, x) = e.hot_cell();
        for k in 0..d {
            let column: f64 = (0..c).map(|ch| w[k * c + ch] * f.values.data()[(ch * grid.0 + h) * grid.1 + x]).sum();
            worst = worst.max((column - pooled.values[k]).abs());
        }
    }
    verdict(worst <= SIFTING_TOL, format!("max |pooled - W f_hot| = {worst:.2e}"))
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            stride: 16,
            stage_strides: vec![4, 4],
            query_widths: vec![3, 4],
            reference_widths: vec![3, 4],
            embed_dim: 5,
            activation: Activation::Silu,
        },
        head: mogeo::cvmf::HeadConfig {
            hidden: 4,
            activation: Activation::Silu,
        },
        anchor: (14.0, 14.0),
        ..ModelConfig::desk()
    }
}

fn gradient_check() -> Verdict {
    let scene = SceneConfig {
        reference_size: (64, 64),
        query_size: (32, 32),
        object_size: (8, 20),
        ..SceneConfig::default()
    };
    let data = generate_dataset(&GenerateConfig {
        seed: 3,
        pairs: 1,
        objects: (2, 2),
        scene,
        ..GenerateConfig::default()
    })
    .unwrap();
    let sample = Sample::from_pair(&data[0]);
    let cfg = tiny_config();
    let (model, params) = Model::init(&cfg, 5).unwrap();
    let n = params.num_scalars();
    let objective = ObjectiveConfig::default();
    let loss = |p: &ParamStore| model.batch_loss(p, &[&sample], &objective, None).unwrap().total;
    let mut grads = Gradients::zeros_like(&params);
    model.batch_loss(&params, &[&sample], &objective, Some(&mut grads)).unwrap();
    let numeric = central_differences(&params, GRADIENT_STEP, loss);
    let err = max_relative_error(&grads.flatten(), &numeric, GRADIENT_FLOOR);
    verdict(
        n <= TINY_PARAM_LIMIT && err <= GRADIENT_TOL,
        format!("{n} parameters, max relative error {err:.2e}"),
    )
}

fn attention_oracle() -> Verdict {
    let mut r = rng(4);
    let (mut worst, mut in_range) = (0.0f64, true);
    for _ in 0..100 {
        let d = r.gen_range(1..=16);
        let grid = (r.gen_range(1..=8), r.gen_range(1..=8));
        let rows = grid.0 * grid.1;
        let q: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let v_r = random_tensor(&mut r, &[rows, d]);
        let map = attention(
            &QueryObjectVector {
                values: q.clone(),
                object_index: 0,
            },
            &v_r,
            grid,
        )
        .unwrap();
        let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        for l in 0..rows {
            let row = &v_r.data()[l * d..(l + 1) * d];
            let dot: f64 = row.iter().zip(&q).map(|(a, b)| a * b).sum();
            let rn = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let got = map.values.data()[l];
            worst = worst.max((got - dot / (qn * rn)).abs());
            in_range &= (-1.0..=1.0).contains(&got);
        }
    }
    verdict(
        worst <= ATTENTION_TOL && in_range,
        format!("max deviation {worst:.2e}, all in [-1, 1]: {in_range}"),
    )
}

fn map(values: Vec<f64>, h: usize, w: usize) -> AttentionMap {
    AttentionMap {
        values: Tensor::new(vec![h, w], values),
        object_index: 0,
    }
}

fn loss_closed_forms() -> Verdict {
    let same = map(vec![0.3, -0.2, 0.9, 0.1], 2, 2);
    let l_same = similarity_loss(&[same.clone(), same], NegativeAggregation::Mean).unwrap();
    // all-zero against all-one over 100 cells: distance exactly 10
    let far = similarity_loss(&[map(vec![0.0; 100], 10, 10), map(vec![1.0; 100], 10, 10)], NegativeAggregation::Mean).unwrap();
    let far_expect = 2.0 * (-10.0f64).exp().ln_1p();

    let (gh, gw, stride) = (4, 6, 16);
    let zero = GridPrediction {
        conf_logit: Tensor::zeros(&[gh, gw]),
        box_params: Tensor::zeros(&[4, gh, gw]),
        anchor: (20.0, 16.0),
        stride,
    };
    let gt = BBox::new(41.3, 22.8, 18.0, 11.5);
    let l_cn = confidence_loss(&zero, &gt);

    let cell = mogeo::objective::positive_cell(&gt, (gh, gw), stride);
    let target = regression_target(&gt, cell, stride, zero.anchor).unwrap();
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let mut exact = zero.clone();
    let t = [logit(target[0]), logit(target[1]), target[2], target[3]];
    for (k, v) in t.into_iter().enumerate() {
        exact.box_params.data_mut()[(k * gh + cell.0) * gw + cell.1] = v;
    }
    let l_reg = regression_loss(&exact, &gt).unwrap();

    let checks = [
        (l_same - 2.0 * 2f64.ln()).abs() <= SIMILARITY_TOL,
        (far - far_expect).abs() <= DISTANCE10_TOL,
        (l_cn - 2f64.ln()).abs() <= CONFIDENCE_TOL,
        l_reg <= REGRESSION_TOL,
    ];
    verdict(
        checks.iter().all(|&c| c),
        format!("L_s same {l_same:.12}, L_s d=10 {far:.6e}, L_cn {l_cn:.12}, L_reg {l_reg:.2e}"),
    )
}

fn iou_oracle() -> Verdict {
    let mut r = rng(6);
    let mut bad = 0;
    let random_box = |r: &mut ChaCha8Rng| {
        let (x0, y0) = (r.gen_range(0..99), r.gen_range(0..99));
        let (x1, y1) = (r.gen_range(x0 + 1..=100), r.gen_range(y0 + 1..=100));
        (x0, y0, x1, y1)
    };
    for _ in 0..500 {
        let a = random_box(&mut r);
        let b = random_box(&mut r);
        let (mut inter, mut union) = (0u32, 0u32);
        for y in 0..100 {
            for x in 0..100 {
                let ina = x >= a.0 && x < a.2 && y >= a.1 && y < a.3;
                let inb = x >= b.0 && x < b.2 && y >= b.1 && y < b.3;
                inter += u32::from(ina && inb);
                union += u32::from(ina || inb);
            }
        }
        let bbox = |(x0, y0, x1, y1): (i32, i32, i32, i32)| BBox::from_corners(x0 as f64, y0 as f64, x1 as f64, y1 as f64);
        if iou(&bbox(a), &bbox(b)) != inter as f64 / union as f64 {
            bad += 1;
        }
    }
    verdict(bad == 0, format!("{bad}/500 pairs differ"))
}

fn records_near_truth(pairs: &[AnnotatedPair], seed: u64) -> Vec<DetectionRecord> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    for p in pairs {
        for (j, o) in p.objects.iter().enumerate() {
            let b = o.bbox;
            out.push(DetectionRecord {
                pair_id: p.pair_id.clone(),
                object_index: j,
                bbox: BBox::new(
                    b.cx + r.gen_range(-0.6..0.6) * b.w,
                    b.cy + r.gen_range(-0.6..0.6) * b.h,
                    b.w * r.gen_range(0.5..1.6),
                    b.h * r.gen_range(0.5..1.6),
                ),
                confidence: 0.5,
            });
        }
    }
    out
}

fn metric_identities() -> Verdict {
    let pairs = generate_dataset(&GenerateConfig {
        seed: 7,
        pairs: 60,
        objects: (1, 1),
        ..GenerateConfig::default()
    })
    .unwrap();
    let recs = records_near_truth(&pairs, 7);
    let report = evaluate(&pairs, &recs, ImageRule::AllExceed).unwrap();
    let r = report.overall;
    let identical = r.acc_025 == r.acc_i_025 && r.acc_05 == r.acc_i_05;

    let preds: Vec<BBox> = recs.iter().map(|d| d.bbox).collect();
    let gts: Vec<BBox> = pairs.iter().map(|p| p.objects[0].bbox).collect();
    let per_image: Vec<Vec<f64>> = preds.iter().zip(&gts).map(|(p, g)| vec![iou(p, g)]).collect();
    let sweep: Vec<f64> = (1..=9).map(|k| k as f64 / 10.0).collect();
    let acc: Vec<f64> = sweep.iter().map(|&t| acc_at(&preds, &gts, t).unwrap()).collect();
    let acc_i: Vec<f64> = sweep.iter().map(|&t| acc_i_at(&per_image, t, ImageRule::AllExceed).unwrap()).collect();
    let monotone = |v: &[f64]| v.windows(2).all(|w| w[1] <= w[0]);
    verdict(
        identical && monotone(&acc) && monotone(&acc_i) && acc == acc_i,
        format!("acc@0.25 {:.4} = accI@0.25 {:.4}, acc@0.5 {:.4} = accI@0.5 {:.4}", r.acc_025, r.acc_i_025, r.acc_05, r.acc_i_05),
    )
}

fn v2_consistency() -> Verdict {
    let base = GenerateConfig {
        seed: 8,
        pairs: 200,
        objects: (2, 8),
        ..GenerateConfig::default()
    };
    let v1 = generate_dataset(&base).unwrap();
    let v2 = generate_dataset(&GenerateConfig { v2: true, ..base }).unwrap();
    let (mut worst, mut out_of_bounds, mut dropped_visible, mut dropped) = (0.0f64, 0, 0, 0);
    for (a, b) in v1.iter().zip(&v2) {
        let t = b.transform.expect("V2 pairs carry their transform");
        let (sx0, sy0, sx1, sy1) = t.source_region();
        let (w, h) = (b.reference.width() as f64, b.reference.height() as f64);
        let kept: HashSet<u32> = b.objects.iter().map(|o| o.tag).collect();
        for o in &b.objects {
            let src = a.objects.iter().find(|s| s.tag == o.tag).unwrap();
            let expect = src.bbox.clip_to(sx0, sy0, sx1, sy1).unwrap();
            let back = t.invert_box(&o.bbox);
            for (p, q) in [(back.x0(), expect.x0()), (back.x1(), expect.x1()), (back.y0(), expect.y0()), (back.y1(), expect.y1())] {
                worst = worst.max((p - q).abs());
            }
            if !o.bbox.within(w, h, 1e-9) {
                out_of_bounds += 1;
            }
        }
        for s in a.objects.iter().filter(|s| !kept.contains(&s.tag)) {
            dropped += 1;
            let (x, y) = t.apply_point(s.bbox.cx, s.bbox.cy);
            if t.is_visible(x, y) {
                dropped_visible += 1;
            }
        }
    }
    verdict(
        worst <= RECOVERY_TOL && out_of_bounds == 0 && dropped_visible == 0,
        format!("recovery error {worst:.2e} px, {out_of_bounds} boxes out of bounds, {dropped_visible}/{dropped} dropped centers visible"),
    )
}

/// Training settings of the overfit run.
fn overfit_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        batch_size: 32,
        epochs: 1_000,
        max_steps: Some(300),
        negatives: NegativeAggregation::Min,
        ..TrainConfig::default()
    }
}

fn overfit() -> Verdict {
    let pairs = generate_dataset(&GenerateConfig {
        seed: 9,
        pairs: 32,
        objects: (2, 4),
        ..GenerateConfig::default()
    })
    .unwrap();
    let start = Instant::now();
    let out = train(&overfit_config(), &pairs, &mut std::io::sink()).unwrap();
    let (report, _) = evaluate_model(&out.model, out.params(), &pairs, ImageRule::AllExceed).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let r = report.overall;
    let (first, last) = (out.history[0].total, out.history[out.history.len() - 1].total);
    verdict(
        r.acc_05 >= OVERFIT_ACC && r.acc_i_05 >= OVERFIT_ACC_I && secs <= OVERFIT_SECONDS && out.checkpoint.step <= 300,
        format!(
            "{} steps, acc@0.5 {:.4}, accI@0.5 {:.4}, total loss {first:.4} -> {last:.4}, {secs:.0} s",
            out.checkpoint.step, r.acc_05, r.acc_i_05
        ),
    )
}

fn determinism() -> Verdict {
    let pairs = generate_dataset(&GenerateConfig {
        seed: 11,
        pairs: 12,
        ..GenerateConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        max_steps: Some(6),
        batch_size: 4,
        seed: 5,
        ..TrainConfig::default()
    };
    let run = || {
        let out = train(&cfg, &pairs, &mut std::io::sink()).unwrap();
        let (report, _) = evaluate_model(&out.model, out.params(), &pairs, ImageRule::AllExceed).unwrap();
        (out.checkpoint.to_bytes(), report.to_text())
    };
    let (a, b) = (run(), run());
    verdict(a == b, format!("checkpoints {} bytes, identical: {}", a.0.len(), a == b))
}

/// Training settings shared by the trend runs.
fn trend_config(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        batch_size: 8,
        epochs: TREND_EPOCHS,
        seed,
        negatives: NegativeAggregation::Min,
        ..TrainConfig::default()
    }
}

fn trend_run(seed: u64, v2: bool, cfg: TrainConfig) -> EvalReport {
    let data = |s: u64, pairs: usize, objects: (usize, usize)| {
        generate_dataset(&GenerateConfig {
            seed: s,
            pairs,
            objects,
            v2,
            ..GenerateConfig::default()
        })
        .unwrap()
    };
    let train_pairs = data(100 + seed, TREND_TRAIN_PAIRS, TREND_TRAIN_OBJECTS);
    let test_pairs = data(900 + seed, TREND_TEST_PAIRS, TREND_TEST_OBJECTS);
    let out = train(&cfg, &train_pairs, &mut std::io::sink()).unwrap();
    evaluate_model(&out.model, out.params(), &test_pairs, ImageRule::AllExceed).unwrap().0
}

struct SeedTrends {
    full: EvalReport,
    v2: f64,
    no_ls: f64,
    no_cvmf: f64,
    no_mope: f64,
}

impl SeedTrends {
    fn run(seed: u64) -> Self {
        let base = trend_config(seed);
        let acc = |v2: bool, cfg: TrainConfig| trend_run(seed, v2, cfg).overall.acc_025;
        Self {
            full: trend_run(seed, false, base.clone()),
            v2: acc(true, base.clone()),
            no_ls: acc(false, TrainConfig { use_similarity_loss: false, ..base.clone() }),
            no_cvmf: acc(false, TrainConfig { use_cvmf_concat: false, ..base.clone() }),
            no_mope: acc(false, TrainConfig { use_mope: false, ..base }),
        }
    }

    fn v1_beats_v2(&self) -> bool {
        self.full.overall.acc_025 > self.v2
    }

    fn bins_non_increasing(&self) -> bool {
        let bins: Vec<f64> = self.full.bins.iter().flatten().map(|r| r.acc_025).collect();
        bins.windows(2).all(|w| w[1] <= w[0])
    }

    fn ablation_ordered(&self) -> bool {
        let full = self.full.overall.acc_025;
        full >= self.no_ls
            && self.no_ls >= self.no_cvmf - ABLATION_SLACK
            && self.no_mope < full.min(self.no_ls).min(self.no_cvmf)
    }
}

fn majority(seeds: &[SeedTrends], holds: fn(&SeedTrends) -> bool, detail: impl Fn(&SeedTrends) -> String) -> Verdict {
    let wins = seeds.iter().filter(|s| holds(s)).count();
    let per_seed: Vec<String> = seeds.iter().zip(TREND_SEEDS).map(|(s, seed)| format!("seed {seed} {}", detail(s))).collect();
    verdict(2 * wins > seeds.len(), format!("{wins}/{} seeds; {}", seeds.len(), per_seed.join("; ")))
}

fn main() {
    // (name, check, wall-clock limit in seconds)
    let criteria: Vec<(&str, fn() -> Verdict, Option<f64>)> = vec![
        ("1 one-hot invariants", one_hot_masks, Some(1.0)),
        ("2 sifting property", sifting, Some(5.0)),
        ("3 gradient verification", gradient_check, Some(60.0)),
        ("4 attention oracle", attention_oracle, Some(5.0)),
        ("5 loss closed forms", loss_closed_forms, None),
        ("6 IoU oracle", iou_oracle, Some(5.0)),
        ("7 metric identities", metric_identities, None),
        ("8 V2 geometric consistency", v2_consistency, None),
        ("9 overfit localization", overfit, None),
        ("11 determinism", determinism, None),
    ];
    let mut failed = 0;
    for (name, check, limit) in criteria {
        let start = Instant::now();
        let v = check();
        let secs = start.elapsed().as_secs_f64();
        let pass = v.pass && limit.map_or(true, |l| secs < l);
        failed += usize::from(!pass);
        println!("criterion {name}: {} ({}; {secs:.1} s)", if pass { "PASS" } else { "FAIL" }, v.detail);
    }

    // The trend reproductions are directional claims about trained models; they are reported
    // but do not decide the exit status.
    let start = Instant::now();
    let seeds: Vec<SeedTrends> = TREND_SEEDS.iter().map(|&s| SeedTrends::run(s)).collect();
    let secs = start.elapsed().as_secs_f64();
    let trends = [
        (
            "10a V1 above V2",
            majority(&seeds, SeedTrends::v1_beats_v2, |s| format!("V1 {:.4} V2 {:.4}", s.full.overall.acc_025, s.v2)),
        ),
        (
            "10b object-count bins",
            majority(&seeds, SeedTrends::bins_non_increasing, |s| {
                let bins: Vec<String> = s.full.bins.iter().map(|b| b.as_ref().map_or("-".into(), |r| format!("{:.4}", r.acc_025))).collect();
                bins.join(" ")
            }),
        ),
        (
            "10c ablation ordering",
            majority(&seeds, SeedTrends::ablation_ordered, |s| {
                format!(
                    "full {:.4} no_ls {:.4} no_cvmf {:.4} no_mope {:.4}",
                    s.full.overall.acc_025, s.no_ls, s.no_cvmf, s.no_mope
                )
            }),
        ),
    ];
    for (name, v) in trends {
        let mark = if v.pass { "PASS" } else { "FAIL (reported, not gating)" };
        println!("criterion {name}: {mark} ({}; {secs:.1} s for all trend runs)", v.detail);
    }

    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
