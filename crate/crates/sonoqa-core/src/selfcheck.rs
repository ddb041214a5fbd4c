//! Built-in verification: gradient checks, normalization invariants,
//! metric-oracle agreement and pooling invariance.
//!
//! These routines back the `selfcheck` command and the acceptance suite.
//! Gradient checks run at 64-bit with central differences (eps 1e-5,
//! relative tolerance 1e-4); sampling redraws any point whose distance to a
//! kink (relu, clamp, pooling tie) is too small for the probe step.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::anatomy::{structure_by_abbrev, Section};
use crate::classifier::{focal_loss, focal_multiclass_loss};
use crate::detector::{generate_anchors, iou, BBox, FpnConfig};
use crate::error::{Error, Result};
use crate::metrics::{
    average_precision, confusion, iou_quartiles, oracle, roc_auc, EvalDetection, EvalGroundTruth,
};
use crate::model::{Model, ModelConfig};
use crate::phantom::Annotation;
use crate::preprocess::GrayImage;
use crate::relation::{relation_weights, RelationConfig, RelationParams, RoiFeatureSet, RoiGeometry};
use crate::rng::Rng;
use crate::tensor::{grad_check_multi, Tape, Tensor};
use crate::trainer::{total_loss, TrainConfig, TrainSample};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRAD_EPS: f64 = 1e-5;
/// Minimum distance to a kink for a point to be finite-difference safe. A
/// probe step of 1e-5 moves any pre-activation by at most a few 1e-5, so
/// 2e-4 of slack keeps every relu/clamp/argmax from flipping inside ±eps.
const KINK_MARGIN: f64 = 2e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        CheckOutcome { name: name.into(), passed, detail }
    }
}

fn random_values(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.range_f64(lo, hi)).collect()
}

/// Run a gradient check at `points` random points, redrawing draws that
/// land too close to a kink.
fn checked_gradients<F>(
    name: &str,
    points: usize,
    seed: u64,
    make: F,
) -> Result<CheckOutcome>
where
    F: Fn(&mut Rng) -> Result<(Vec<(Vec<usize>, Vec<f64>)>, BuildFn)>,
{
    let mut worst = 0.0f64;
    for point in 0..points {
        let mut attempt = 0u64;
        let err = loop {
            let mut rng = Rng::new(seed).fork(point as u64).fork(attempt);
            let (inputs, build) = make(&mut rng)?;
            // margin probe: evaluate once and inspect kink distances
            let probe: Tape<f64> = Tape::new();
            let staged: Vec<Tensor> = inputs
                .iter()
                .map(|(s, v)| probe.variable(s, v.clone()))
                .collect::<Result<_>>()?;
            build(&probe, &staged)?;
            if probe.min_kink_margin() < KINK_MARGIN {
                attempt += 1;
                if attempt > 50 {
                    return Err(Error::Contract(format!(
                        "{name}: no kink-safe point found"
                    )));
                }
                continue;
            }
            break grad_check_multi(|g, ins| build(g, ins), &inputs, GRAD_EPS)?;
        };
        worst = worst.max(err);
    }
    Ok(CheckOutcome::new(
        name,
        worst <= GRAD_TOLERANCE,
        format!("max relative error {worst:.3e} over {points} points"),
    ))
}

type BuildFn = alloc::boxed::Box<dyn Fn(&Tape<f64>, &[Tensor]) -> Result<Tensor>>;

/// Gradient checks of every differentiable operation (10 random 64-bit
/// points each).
pub fn gradient_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();

    out.push(checked_gradients("grad conv2d", 10, seed ^ 0xC0, |rng| {
        let input = (vec![2, 4, 4], random_values(rng, 32, -1.0, 1.0));
        let kernels = (vec![3, 2, 3, 3], random_values(rng, 54, -0.5, 0.5));
        let bias = (vec![3], random_values(rng, 3, -0.5, 0.5));
        Ok((
            vec![input, kernels, bias],
            alloc::boxed::Box::new(|g, ins| {
                let y = g.conv2d(ins[0], ins[1], ins[2], 2, 1)?;
                g.sum(g.mul(y, y)?)
            }),
        ))
    })?);

    out.push(checked_gradients("grad relu", 10, seed ^ 0x1e, |rng| {
        // sample away from the kink at 0
        let vals: Vec<f64> = (0..12)
            .map(|_| {
                let v = rng.range_f64(0.05, 1.0);
                if rng.chance(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        Ok((
            vec![(vec![12], vals)],
            alloc::boxed::Box::new(|g, ins| {
                let y = g.relu(ins[0])?;
                g.sum(g.mul(y, y)?)
            }),
        ))
    })?);

    out.push(checked_gradients("grad global_avg_pool", 10, seed ^ 0x9a, |rng| {
        Ok((
            vec![(vec![3, 4, 4], random_values(rng, 48, -1.0, 1.0))],
            alloc::boxed::Box::new(|g, ins| {
                let y = g.global_avg_pool(ins[0])?;
                g.sum(g.mul(y, y)?)
            }),
        ))
    })?);

    out.push(checked_gradients("grad spp", 10, seed ^ 0x59, |rng| {
        Ok((
            vec![(vec![2, 5, 5], random_values(rng, 50, -1.0, 1.0))],
            alloc::boxed::Box::new(|g, ins| {
                let y = g.spp(ins[0], &[1, 2])?;
                g.sum(g.mul(y, y)?)
            }),
        ))
    })?);

    out.push(checked_gradients("grad softmax+log", 10, seed ^ 0x50, |rng| {
        Ok((
            vec![(vec![2, 5], random_values(rng, 10, -2.0, 2.0))],
            alloc::boxed::Box::new(|g, ins| {
                let p = g.softmax(ins[0], 1)?;
                let lp = g.ln(g.clamp_min(p, 1e-7)?)?;
                g.mean(g.mul(lp, p)?)
            }),
        ))
    })?);

    // relation module: gradients w.r.t. features and all four maps
    out.push(checked_gradients("grad relation", 10, seed ^ 0x4e, |rng| {
        let cfg = RelationConfig { d_f: 6, d_k: 4, d_g: 16, epsilon_norm: 1e-9 };
        let n = 3usize;
        let features = (vec![n, cfg.d_f], random_values(rng, n * cfg.d_f, -1.0, 1.0));
        let w_g = (vec![cfg.d_g, 1], random_values(rng, cfg.d_g, -0.7, 0.7));
        let w_k = (vec![cfg.d_f, cfg.d_k], random_values(rng, cfg.d_f * cfg.d_k, -0.7, 0.7));
        let w_q = (vec![cfg.d_f, cfg.d_k], random_values(rng, cfg.d_f * cfg.d_k, -0.7, 0.7));
        let w_v = (vec![cfg.d_f, cfg.d_f], random_values(rng, cfg.d_f * cfg.d_f, -0.7, 0.7));
        let geoms = vec![
            RoiGeometry { cx: 20.0, cy: 30.0, w: 10.0, h: 8.0 },
            RoiGeometry { cx: 44.0, cy: 28.0, w: 6.0, h: 12.0 },
            RoiGeometry { cx: 33.0, cy: 52.0, w: 9.0, h: 9.0 },
        ];
        Ok((
            vec![features, w_g, w_k, w_q, w_v],
            alloc::boxed::Box::new(move |g, ins| {
                let p = crate::relation::RelationTensors {
                    w_g: ins[1],
                    w_k: ins[2],
                    w_q: ins[3],
                    w_v: ins[4],
                };
                let fused = crate::relation::fuse(g, &p, ins[0], &geoms, &cfg)?;
                g.sum(g.mul(fused, fused)?)
            }),
        ))
    })?);

    // focal loss through the classification head
    out.push(checked_gradients("grad focal-classify", 10, seed ^ 0xF0, |rng| {
        let d_f = 8usize;
        let n = 3usize;
        let feats = (vec![n, d_f], random_values(rng, n * d_f, -1.0, 1.0));
        let head = (
            vec![crate::anatomy::NUM_CLASSES, d_f],
            random_values(rng, crate::anatomy::NUM_CLASSES * d_f, -0.5, 0.5),
        );
        let bias = (
            vec![crate::anatomy::NUM_CLASSES],
            random_values(rng, crate::anatomy::NUM_CLASSES, -0.2, 0.2),
        );
        Ok((
            vec![feats, head, bias],
            alloc::boxed::Box::new(|g, ins| {
                let logits = g.add_row_broadcast(g.matmul_tb(ins[0], ins[1])?, ins[2])?;
                focal_multiclass_loss(g, logits, &[0, 5, 12], 2.0)
            }),
        ))
    })?);

    out.push(total_loss_gradient_check(seed ^ 0x70)?);
    Ok(out)
}

/// Tiny end-to-end configuration for the total-loss gradient probe.
fn tiny_model(seed: u64) -> Result<Model<f64>> {
    let config = ModelConfig {
        fen: crate::backbone::FenConfig { channel_scale: 128, input_channels: 1 },
        fpn: FpnConfig { channels: 8, ..FpnConfig::default() },
        relation: RelationConfig { d_f: 16, d_k: 4, d_g: 16, epsilon_norm: 1e-9 },
        ..ModelConfig::default()
    };
    Model::init(config, seed)
}

fn tiny_sample(seed: u64) -> Result<TrainSample> {
    let mut rng = Rng::new(seed).fork(0x7a);
    let data = (0..32 * 32).map(|_| rng.range_f64(0.1, 0.9)).collect();
    Ok(TrainSample {
        image: GrayImage::new(32, 32, data)?,
        section: Section::Head,
        annotations: vec![
            Annotation {
                class_id: structure_by_abbrev("BM")?.id,
                bbox: BBox::new(6.0, 6.0, 16.0, 18.0)?,
                flag: 1,
            },
            Annotation {
                class_id: structure_by_abbrev("CP")?.id,
                bbox: BBox::new(18.0, 14.0, 28.0, 24.0)?,
                flag: 0,
            },
        ],
    })
}

/// Central-difference check of the combined multi-task loss at 10 random
/// parameter probes (20 coordinates each, drawn across all groups).
pub fn total_loss_gradient_check(seed: u64) -> Result<CheckOutcome> {
    let train_cfg = TrainConfig::default();
    let sample = tiny_sample(seed)?;
    let mut worst = 0.0f64;

    for point in 0..10u64 {
        let mut attempt = 0u64;
        let (model, sampler_seed) = loop {
            let model = tiny_model(seed ^ (point * 1031 + attempt * 7))?;
            let sampler_seed = Rng::new(seed).fork(point).fork(attempt).next_u64();
            // margin probe
            let g: Tape<f64> = Tape::new();
            let tensors = model.stage(&g, true)?;
            let anchors =
                generate_anchors(sample.image.width(), sample.image.height(), &model.config.fpn);
            let gts: Vec<BBox> = sample.annotations.iter().map(|a| a.bbox).collect();
            let boxes: Vec<BBox> = anchors.iter().map(|a| a.bbox).collect();
            let assigns = crate::detector::assign(&boxes, &gts, 0.5)?;
            total_loss(
                &g,
                &tensors,
                &model.config,
                &train_cfg,
                &sample,
                &anchors,
                &assigns,
                sampler_seed,
            )?;
            if g.min_kink_margin() >= KINK_MARGIN {
                break (model, sampler_seed);
            }
            attempt += 1;
            if attempt > 30 {
                return Err(Error::Contract("no kink-safe total-loss point".into()));
            }
        };

        let anchors =
            generate_anchors(sample.image.width(), sample.image.height(), &model.config.fpn);
        let gts: Vec<BBox> = sample.annotations.iter().map(|a| a.bbox).collect();
        let boxes: Vec<BBox> = anchors.iter().map(|a| a.bbox).collect();
        let assigns = crate::detector::assign(&boxes, &gts, 0.5)?;

        let loss_of = |m: &Model<f64>| -> Result<f64> {
            let g: Tape<f64> = Tape::new();
            let tensors = m.stage(&g, false)?;
            let terms = total_loss(
                &g,
                &tensors,
                &m.config,
                &train_cfg,
                &sample,
                &anchors,
                &assigns,
                sampler_seed,
            )?;
            g.value(terms.total)
        };

        // analytic gradients
        let g: Tape<f64> = Tape::new();
        let tensors = model.stage(&g, true)?;
        let terms = total_loss(
            &g,
            &tensors,
            &model.config,
            &train_cfg,
            &sample,
            &anchors,
            &assigns,
            sampler_seed,
        )?;
        g.backward(terms.total)?;
        let param_tensors = tensors.param_tensors();
        let grads: Vec<Vec<f64>> = param_tensors
            .iter()
            .map(|t| g.grad(*t).unwrap_or_else(|| vec![0.0; g.values(*t).len()]))
            .collect();

        // 20 random coordinates across parameter groups
        let mut pick = Rng::new(seed).fork(0xC0DE).fork(point);
        for _ in 0..20 {
            let group = pick.below(grads.len());
            let elem = pick.below(grads[group].len().max(1));
            let analytic = grads[group][elem];

            let perturb = |delta: f64| -> Result<f64> {
                let mut m = model.clone();
                let mut idx = 0usize;
                m.for_each_param_mut(|_, values| {
                    if idx == group {
                        values[elem] += delta;
                    }
                    idx += 1;
                });
                loss_of(&m)
            };
            let fd = (perturb(GRAD_EPS)? - perturb(-GRAD_EPS)?) / (2.0 * GRAD_EPS);
            let err = (analytic - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(CheckOutcome::new(
        "grad total-loss",
        worst <= GRAD_TOLERANCE,
        format!("max relative error {worst:.3e} over 10 probes"),
    ))
}

/// Relation-weight normalization over random ROI sets, including forced
/// all-zero-geometry degenerate cases.
pub fn relation_normalization_check(seed: u64, n_sets: usize) -> Result<CheckOutcome> {
    let mut failures = 0usize;
    let mut rng = Rng::new(seed).fork(0x4e17);
    for set_idx in 0..n_sets {
        let cfg = RelationConfig { d_f: 8, d_k: 4, d_g: 16, epsilon_norm: 1e-9 };
        let mut params: RelationParams<f64> = RelationParams::init(cfg, &mut rng)?;
        if set_idx % 10 == 0 {
            params.w_g = vec![0.0; cfg.d_g];
        }
        let n = 1 + rng.below(8);
        let set = RoiFeatureSet {
            features: (0..n).map(|_| random_values(&mut rng, cfg.d_f, -2.0, 2.0)).collect(),
            geometry: (0..n)
                .map(|_| RoiGeometry {
                    cx: rng.range_f64(5.0, 120.0),
                    cy: rng.range_f64(5.0, 120.0),
                    w: rng.range_f64(2.0, 40.0),
                    h: rng.range_f64(2.0, 40.0),
                })
                .collect(),
        };
        let w = relation_weights(&set, &params)?;
        for j in 0..n {
            let col: f64 = (0..n).map(|m| w[m * n + j]).sum();
            let non_negative = (0..n).all(|m| w[m * n + j] >= 0.0);
            if (col - 1.0).abs() > 1e-9 || !non_negative {
                failures += 1;
            }
        }
    }
    Ok(CheckOutcome::new(
        "relation normalization",
        failures == 0,
        format!("{failures} bad columns over {n_sets} random ROI sets"),
    ))
}

/// γ=0 reduces to cross-entropy within 1e-12 on a 99-point grid, and the
/// loss is strictly decreasing in p_t for γ ∈ {0, 1, 2, 5}.
pub fn focal_reduction_check() -> Result<CheckOutcome> {
    let mut worst = 0.0f64;
    for i in 1..100 {
        let pt = i as f64 / 100.0;
        let diff = (focal_loss(pt, 0.0)? - (-libm::log(pt))).abs();
        worst = worst.max(diff);
    }
    let mut monotone = true;
    for gamma in [0.0, 1.0, 2.0, 5.0] {
        let mut prev = f64::INFINITY;
        for i in 1..100 {
            let v = focal_loss(i as f64 / 100.0, gamma)?;
            if v >= prev {
                monotone = false;
            }
            prev = v;
        }
    }
    Ok(CheckOutcome::new(
        "focal-loss reduction",
        worst <= 1e-12 && monotone,
        format!("max |FL(γ=0) + ln p_t| = {worst:.3e}, monotone = {monotone}"),
    ))
}

/// Exact IoU fixture and the pyramid anchor-count arithmetic.
pub fn iou_anchor_check() -> Result<CheckOutcome> {
    let a = BBox::new(0.0, 0.0, 2.0, 2.0)?;
    let b = BBox::new(1.0, 1.0, 3.0, 3.0)?;
    // intersection 1 and union 7 are exact integers in f64, so the
    // quotient must be bit-equal to the rational 1/7
    let iou_exact = iou(a, b) == 1.0 / 7.0;

    let cfg = FpnConfig::default();
    let anchors = generate_anchors(256, 256, &cfg);
    let expected = 3 * (32 * 32 + 16 * 16 + 8 * 8 + 4 * 4 + 2 * 2);
    let count_ok = anchors.len() == expected;
    let level3 = anchors.iter().filter(|x| x.level == 3).count() == 3072;
    Ok(CheckOutcome::new(
        "iou/anchor arithmetic",
        iou_exact && count_ok && level3,
        format!(
            "iou==1/7: {iou_exact}, anchors {} (expected {expected}), level-3 3072: {level3}",
            anchors.len()
        ),
    ))
}

fn random_box(rng: &mut Rng) -> BBox {
    // snap half the boxes to a coarse grid to provoke IoU ties
    let snap = rng.chance(0.5);
    let mut coord = |lo: f64, hi: f64| {
        let v = rng.range_f64(lo, hi);
        if snap {
            libm::round(v / 5.0) * 5.0
        } else {
            v
        }
    };
    let x0 = coord(0.0, 80.0);
    let y0 = coord(0.0, 80.0);
    let w = coord(5.0, 30.0).max(5.0);
    let h = coord(5.0, 30.0).max(5.0);
    BBox::new(x0, y0, x0 + w, y0 + h).expect("positive extents")
}

/// AP against the threshold-enumeration oracle and AUC against pair
/// counting, bit-exactly, on random small instances; plus the formula
/// fixtures.
pub fn metrics_oracle_check(seed: u64, instances: usize) -> Result<CheckOutcome> {
    let mut rng = Rng::new(seed).fork(0x0a);
    let mut ap_fail = 0usize;
    for _ in 0..instances {
        let n_det = rng.below(7);
        let n_gt = rng.below(4);
        let dets: Vec<EvalDetection> = (0..n_det)
            .map(|_| EvalDetection {
                image: rng.below(2),
                bbox: random_box(&mut rng),
                score: (1 + rng.below(9)) as f64 / 10.0, // quantized: ties happen
            })
            .collect();
        let gts: Vec<EvalGroundTruth> = (0..n_gt)
            .map(|_| EvalGroundTruth { image: rng.below(2), bbox: random_box(&mut rng) })
            .collect();
        let fast = average_precision(&dets, &gts, 0.5)?.ap;
        let slow = oracle::ap_by_threshold_enumeration(&dets, &gts, 0.5)?;
        if fast != slow {
            ap_fail += 1;
        }
    }

    let mut auc_fail = 0usize;
    for _ in 0..instances {
        let n = 2 + rng.below(49);
        let scores: Vec<f64> = (0..n).map(|_| (rng.below(20) as f64) / 20.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.chance(0.5)).collect();
        // ensure both classes occur
        labels[0] = true;
        labels[1] = false;
        let (fast, _) = roc_auc(&scores, &labels)?;
        let slow = oracle::auc_by_pair_counting(&scores, &labels)?;
        if fast != slow {
            auc_fail += 1;
        }
    }

    // formula fixtures
    let c = confusion(
        &[vec![true; 10], vec![false; 10]].concat(),
        &{
            let mut t = vec![true; 9];
            t.push(false);
            t.push(true);
            t.extend(vec![false; 9]);
            t
        },
    )?;
    let fixtures_ok = [c.accuracy(), c.specificity(), c.sensitivity(), c.precision(), c.f1()]
        .iter()
        .all(|m| *m == Some(0.9))
        && {
            let q = iou_quartiles(&[1.0, 2.0, 3.0, 4.0])?;
            q.q1 == 1.75 && q.q3 == 3.25
        };

    Ok(CheckOutcome::new(
        "metric oracles",
        ap_fail == 0 && auc_fail == 0 && fixtures_ok,
        format!(
            "AP mismatches {ap_fail}/{instances}, AUC mismatches {auc_fail}/{instances}, fixtures ok: {fixtures_ok}"
        ),
    ))
}

/// SPP output length is independent of the input extent.
pub fn spp_invariance_check(seed: u64) -> Result<CheckOutcome> {
    let mut rng = Rng::new(seed).fork(0x59);
    let levels = [1usize, 2, 4, 16];
    let expected = 3 * 277;
    let mut lengths = Vec::new();
    for size in [32usize, 64, 128, 256] {
        let g: Tape<f64> = Tape::new();
        let m = g.constant(
            &[3, size, size],
            (0..3 * size * size).map(|_| rng.next_f64()).collect(),
        )?;
        lengths.push(g.values(g.spp(m, &levels)?).len());
    }
    let ok = lengths.iter().all(|&l| l == expected);
    Ok(CheckOutcome::new(
        "spp size invariance",
        ok,
        format!("lengths {lengths:?}, expected {expected}"),
    ))
}

/// Full self-verification battery.
pub fn run_all(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = gradient_checks(seed)?;
    out.push(relation_normalization_check(seed, 1000)?);
    out.push(focal_reduction_check()?);
    out.push(iou_anchor_check()?);
    out.push(metrics_oracle_check(seed, 500)?);
    out.push(spp_invariance_check(seed)?);
    Ok(out)
}
