//! Named gradient and metric checks, runnable from the command line.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::databench::{auroc, average_precision};
use crate::dssl::{pbsd_loss, sample_patch_boxes, similarity, Label, MemoryQueue};
use crate::encoders::{BackboneConfig, BackboneFeatures, LmConfig, MultiLevelFeatures, VisualEncoderConfig};
use crate::error::{Error, Result};
use crate::ltc::{Ltc, Projector, ResamplerConfig};
use crate::numcore::{
    grad_check, grad_check_split, grad_check_with_params, named_rng, GradCheckOptions, Graph, Init, ParamStore, Tensor,
    Var,
};
use crate::seghead::{seg_loss, total_loss, LossWeights, SegHead, SegHeadConfig, SegPrompt};

use super::config::{ModelConfig, ProjectorKind};
use super::model::{Example, Model};

/// Instances per check.
pub const INSTANCES: u64 = 20;
/// Largest accepted relative gradient error.
pub const GRAD_TOL: f64 = 1e-4;

type Instance = dyn Fn(u64) -> Result<f64> + Send + Sync;

/// A named check: `run(i)` returns the error measure of instance `i`.
pub struct Check {
    pub name: String,
    pub instances: u64,
    pub tol: f64,
    run: Box<Instance>,
}

impl Check {
    pub fn new(
        name: impl Into<String>,
        instances: u64,
        tol: f64,
        run: impl Fn(u64) -> Result<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            instances,
            tol,
            run: Box::new(run),
        }
    }

    /// A gradient check of `f` over `INSTANCES` random input sets.
    pub fn grad<M, F>(name: &str, make: M, f: F) -> Self
    where
        M: Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>> + Send + Sync + 'static,
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Send + Sync + 'static,
    {
        Self::new(name, INSTANCES, GRAD_TOL, move |i| {
            let mut rng = ChaCha8Rng::seed_from_u64(i * 7919 + 1);
            let inputs = make(&mut rng);
            let report = grad_check(
                |g, xs| {
                    let y = f(g, xs)?;
                    weighted_sum(g, y, i)
                },
                &inputs,
                &GradCheckOptions::default(),
            )?;
            Ok(report.max_rel_err)
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub instances: u64,
    pub max_err: f64,
    pub tol: f64,
    pub passed: bool,
    pub error: Option<String>,
    pub seconds: f64,
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(
            f,
            "{status} {:<28} n={:<3} max_err={:.3e} tol={:.0e} ({:.2}s)",
            self.name, self.instances, self.max_err, self.tol, self.seconds
        )?;
        if let Some(e) = &self.error {
            write!(f, " error: {e}")?;
        }
        Ok(())
    }
}

pub fn run_check(c: &Check) -> CheckOutcome {
    let t0 = Instant::now();
    let mut max_err = 0.0f64;
    let mut error = None;
    for i in 0..c.instances {
        match (c.run)(i) {
            Ok(e) if e.is_finite() => max_err = max_err.max(e),
            Ok(e) => {
                error = Some(format!("instance {i}: non-finite error measure {e}"));
                break;
            }
            Err(e) => {
                error = Some(format!("instance {i}: {e}"));
                break;
            }
        }
    }
    CheckOutcome {
        name: c.name.clone(),
        instances: c.instances,
        max_err,
        tol: c.tol,
        passed: error.is_none() && max_err < c.tol,
        error,
        seconds: t0.elapsed().as_secs_f64(),
    }
}

/// Runs every check, calling `report` after each.
pub fn run_checks(checks: &[Check], mut report: impl FnMut(&CheckOutcome)) -> Vec<CheckOutcome> {
    checks
        .iter()
        .map(|c| {
            let o = run_check(c);
            report(&o);
            o
        })
        .collect()
}

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

fn positive(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(0.5..2.0)).collect()).expect("shape")
}

fn normal(shape: &[usize], seed: u64, name: &str) -> Tensor<f64> {
    Init::Normal { std: 1.0 }.sample(shape, &mut named_rng(seed, name))
}

fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = random(g.shape(y), &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let w = g.constant(w)?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

/// One check per differentiable kernel.
pub fn op_checks() -> Vec<Check> {
    vec![
        Check::grad(
            "op.add",
            |r| vec![random(&[3, 4], r), random(&[3, 4], r)],
            |g, x| g.add(x[0], x[1]),
        ),
        Check::grad(
            "op.add_broadcast",
            |r| vec![random(&[3, 4], r), random(&[4], r)],
            |g, x| g.add(x[0], x[1]),
        ),
        Check::grad(
            "op.sub",
            |r| vec![random(&[5], r), random(&[5], r)],
            |g, x| g.sub(x[0], x[1]),
        ),
        Check::grad(
            "op.mul",
            |r| vec![random(&[2, 3], r), random(&[3], r)],
            |g, x| g.mul(x[0], x[1]),
        ),
        Check::grad(
            "op.div",
            |r| vec![random(&[2, 3], r), positive(&[3], r)],
            |g, x| g.div(x[0], x[1]),
        ),
        Check::grad("op.scale", |r| vec![random(&[4], r)], |g, x| g.scale(x[0], -1.7)),
        Check::grad(
            "op.add_scalar",
            |r| vec![random(&[4], r)],
            |g, x| g.add_scalar(x[0], 0.3),
        ),
        Check::grad("op.relu", |r| vec![random(&[3, 5], r)], |g, x| g.relu(x[0])),
        Check::grad("op.sigmoid", |r| vec![random(&[7], r)], |g, x| g.sigmoid(x[0])),
        Check::grad("op.exp", |r| vec![random(&[7], r)], |g, x| g.exp(x[0])),
        Check::grad("op.ln", |r| vec![positive(&[7], r)], |g, x| g.ln(x[0])),
        Check::grad("op.clamp", |r| vec![random(&[9], r)], |g, x| g.clamp(x[0], -0.5, 0.5)),
        Check::grad(
            "op.matmul",
            |r| vec![random(&[3, 4], r), random(&[4, 2], r)],
            |g, x| g.matmul(x[0], x[1]),
        ),
        Check::grad(
            "op.matmul_transposed",
            |r| vec![random(&[4, 3], r), random(&[2, 4], r)],
            |g, x| g.matmul_t(x[0], true, x[1], true),
        ),
        Check::grad(
            "op.bmm",
            |r| vec![random(&[2, 3, 4], r), random(&[2, 5, 4], r)],
            |g, x| g.bmm(x[0], x[1], true),
        ),
        Check::grad("op.transpose", |r| vec![random(&[3, 4], r)], |g, x| g.transpose(x[0])),
        Check::grad(
            "op.linear",
            |r| vec![random(&[3, 4], r), random(&[4, 2], r), random(&[2], r)],
            |g, x| g.linear(x[0], x[1], Some(x[2])),
        ),
        Check::grad(
            "op.softmax",
            |r| vec![random(&[3, 5], r)],
            |g, x| g.softmax(x[0], 1, 0.3),
        ),
        Check::grad(
            "op.sum_axis",
            |r| vec![random(&[2, 3, 4], r)],
            |g, x| g.sum_axis(x[0], 1),
        ),
        Check::grad(
            "op.mean_axis",
            |r| vec![random(&[2, 3, 4], r)],
            |g, x| g.mean_axis(x[0], 2),
        ),
        Check::grad("op.mean", |r| vec![random(&[2, 3], r)], |g, x| g.mean(x[0])),
        Check::grad(
            "op.layer_norm",
            |r| vec![random(&[4, 6], r), random(&[6], r), random(&[6], r)],
            |g, x| g.layer_norm(x[0], x[1], x[2], 1e-5),
        ),
        Check::grad(
            "op.l2_normalize",
            |r| vec![random(&[3, 5], r)],
            |g, x| g.l2_normalize(x[0]),
        ),
        Check::grad(
            "op.cross_entropy",
            |r| vec![random(&[4, 6], r)],
            |g, x| g.cross_entropy(x[0], &[0, 5, 2, 2]),
        ),
        Check::grad(
            "op.conv2d",
            |r| vec![random(&[6, 5, 3], r), random(&[3, 3, 3, 2], r), random(&[2], r)],
            |g, x| g.conv2d(x[0], x[1], Some(x[2]), 2, 1),
        ),
        Check::grad(
            "op.adaptive_avg_pool",
            |r| vec![random(&[5, 7, 2], r)],
            |g, x| g.adaptive_avg_pool(x[0], 2, 3),
        ),
        Check::grad(
            "op.global_avg_pool",
            |r| vec![random(&[3, 4, 2], r)],
            |g, x| g.global_avg_pool(x[0]),
        ),
        Check::grad(
            "op.bilinear_sample",
            |r| {
                let pts: Vec<f64> = (0..10).map(|_| r.gen_range(-0.5..4.5)).collect();
                vec![random(&[4, 5, 3], r), Tensor::new(&[5, 2], pts).expect("points")]
            },
            |g, x| g.bilinear_sample(x[0], x[1]),
        ),
        Check::grad(
            "op.gather_rows",
            |r| vec![random(&[5, 3], r)],
            |g, x| g.gather_rows(x[0], &[4, 0, 4, 2]),
        ),
        Check::grad(
            "op.embedding",
            |r| vec![random(&[6, 2], r)],
            |g, x| g.embedding(x[0], &[1, 1, 5]),
        ),
        Check::grad(
            "op.concat",
            |r| vec![random(&[2, 3], r), random(&[2, 1], r)],
            |g, x| g.concat(&[x[0], x[1]], 1),
        ),
        Check::grad(
            "op.reshape",
            |r| vec![random(&[2, 6], r)],
            |g, x| g.reshape(x[0], &[3, 4]),
        ),
        Check::grad(
            "op.residual_block",
            |r| {
                vec![
                    random(&[4, 4, 3], r),
                    random(&[3, 3, 3, 3], r),
                    random(&[3], r),
                    random(&[3], r),
                    random(&[3, 3, 3, 3], r),
                ]
            },
            |g, x| {
                let h = g.conv2d(x[0], x[1], None, 1, 1)?;
                let h = g.layer_norm(h, x[2], x[3], 1e-5)?;
                let h = g.relu(h)?;
                let h = g.conv2d(h, x[4], None, 1, 1)?;
                g.add(h, x[0])
            },
        ),
    ]
}

fn ltc_project_check() -> Check {
    Check::new("ltc.project", INSTANCES, GRAD_TOL, |i| {
        let c = 4;
        let cfg = ResamplerConfig {
            rho: 2,
            lc: 1,
            n: 2,
            k: 4,
            stride: 1.0,
            d: 4,
        };
        let mut s = ParamStore::<f64>::new();
        let ltc = Ltc::new(&mut s, 100 + i, &cfg, c, 3)?;
        // Non-zero fusion and offsets so every branch carries gradient.
        s.set_value(ltc.fuse_layer().linear.w, normal(&[2 * c, c], i, "selfcheck.fuse"))?;
        for layer in ltc.deformable_layers() {
            let off = Init::Normal { std: 0.3 }.sample(&[c, 8], &mut named_rng(i, "selfcheck.offset"));
            s.set_value(layer.offset.w, off)?;
        }
        let inputs: Vec<Tensor<f64>> = (0..4)
            .map(|l| normal(&[16, c], i * 8 + l, "selfcheck.levels"))
            .collect();
        let report = grad_check_with_params(
            &s,
            &inputs,
            |g, s, xs| {
                let f = MultiLevelFeatures {
                    levels: xs.to_vec(),
                    grid_h: 4,
                    grid_w: 4,
                    channels: c,
                };
                let y = ltc.project(g, s, &f)?;
                weighted_sum(g, y, i)
            },
            &GradCheckOptions {
                seed: i,
                ..Default::default()
            },
        )?;
        Ok(report.max_rel_err)
    })
}

fn pbsd_check() -> Check {
    Check::new("dssl.pbsd_loss", INSTANCES, GRAD_TOL, |i| {
        let p0 = {
            let mut g = Graph::new();
            let x = g.constant(normal(&[3, 4], i, "selfcheck.v"))?;
            let z = g.constant(normal(&[5, 4], i, "selfcheck.z"))?;
            let p = similarity(&mut g, x, z, 0.5)?;
            g.value(p).clone()
        };
        let report = grad_check(
            |g, xs| {
                let p = g.constant(p0.clone())?;
                let q = similarity(g, xs[0], xs[1], 0.5)?;
                pbsd_loss(g, p, q, &[0, 2, 3])
            },
            &[normal(&[3, 4], i, "selfcheck.t"), normal(&[5, 4], i, "selfcheck.theta")],
            &GradCheckOptions::default(),
        )?;
        Ok(report.max_rel_err)
    })
}

fn seg_loss_check() -> Check {
    Check::new("seghead.seg_loss", INSTANCES, GRAD_TOL, |i| {
        let c = 4;
        let mut s = ParamStore::<f64>::new();
        let head = SegHead::new(&mut s, 200 + i, &SegHeadConfig { blocks: 1 }, 6, c)?;
        let gt: Vec<f64> = normal(&[64], i, "selfcheck.gt")
            .data()
            .iter()
            .map(|v| if *v > 0.5 { 1.0 } else { 0.0 })
            .collect();
        let gt = Tensor::new(&[8, 8], gt)?;
        let w = LossWeights::default();
        let report = grad_check_with_params(
            &s,
            &[normal(&[1, 6], i, "selfcheck.h"), normal(&[2, 2, c], i, "selfcheck.f")],
            |g, s, xs| {
                let prompt = SegPrompt {
                    h: head.gamma.forward(g, s, xs[0])?,
                    position: 0,
                };
                let f = BackboneFeatures {
                    f: xs[1],
                    h: 2,
                    w: 2,
                    channels: c,
                };
                let pred = head.decode_mask(g, s, &prompt, &f, 8, 8)?;
                seg_loss(g, &pred, &gt, &w)
            },
            &GradCheckOptions {
                max_coords_per_tensor: Some(6),
                seed: i,
                ..Default::default()
            },
        )?;
        Ok(report.max_rel_err)
    })
}

/// Tiny end-to-end model used by the total-loss check.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        encoder: VisualEncoderConfig {
            image_size: 16,
            patch: 4,
            width: 8,
            levels: 4,
        },
        backbone: BackboneConfig { width: 4 },
        lm: LmConfig {
            width: 8,
            blocks: 1,
            context: 64,
        },
        projector: ProjectorKind::Ltc,
        ltc: ResamplerConfig {
            rho: 2,
            lc: 1,
            n: 2,
            k: 4,
            stride: 1.0,
            d: 4,
        },
        seghead: SegHeadConfig { blocks: 1 },
        ..ModelConfig::default()
    }
}

fn total_loss_check() -> Check {
    Check::new("pipeline.total_loss", INSTANCES, GRAD_TOL, |i| {
        let cfg = tiny_model_config();
        let (model, mut s) = Model::build::<f64>(300 + i, &cfg)?;
        // Zero offsets put every sample on a pixel centre, where bilinear
        // interpolation has a kink; move off it as in the projector check.
        if let Projector::Ltc(ltc) = &model.projector {
            let c = cfg.encoder.width;
            s.set_value(ltc.fuse_layer().linear.w, normal(&[2 * c, c], i, "selfcheck.fuse"))?;
            for layer in ltc.deformable_layers() {
                let shape = s.value(layer.offset.w).shape().to_vec();
                let off = Init::Normal { std: 0.3 }.sample(&shape, &mut named_rng(i, "selfcheck.offset"));
                s.set_value(layer.offset.w, off)?;
            }
        }
        let s = s;
        let size = cfg.encoder.image_size;
        let mut rng = ChaCha8Rng::seed_from_u64(i);
        let image = Tensor::new(
            &[size, size, 3],
            (0..size * size * 3).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )?;
        let mask = Tensor::new(
            &[size, size],
            (0..size * size)
                .map(|k| if k % size < 5 && k / size < 6 { 1.0 } else { 0.0 })
                .collect(),
        )?;
        let normal_text = "a normal tile has a uniform striped texture .";
        let mut entries = (Vec::new(), Vec::new());
        for _ in 0..3 {
            let img = Tensor::new(
                &[size, size, 3],
                (0..size * size * 3).map(|_| rng.gen_range(0.0..1.0)).collect(),
            )?;
            let (z, t) = model.queue_entry(&s, &img, normal_text)?;
            entries.0.extend(z);
            entries.1.extend(t);
        }
        let queue = MemoryQueue::new(
            0,
            0,
            vec![0, 1, 2],
            vec![Label::Normal, Label::Normal, Label::Abnormal],
            Tensor::new(&[3, cfg.backbone.width], entries.0)?,
            Tensor::new(&[3, cfg.lm.width], entries.1)?,
        )?;
        let boxes = sample_patch_boxes(size, size, 2, 0.25, 0.5, i)?;
        let instruction = format!(
            "{normal_text} are there any abnormalities in the tile ? please output the defect segmentation result ."
        );
        let w = LossWeights::default();
        let ex = Example {
            image: &image,
            mask: &mask,
            instruction: &instruction,
            answer: "it is <seg>",
            normal_text,
            has_seg: true,
        };
        // The visual distribution is a detached teacher; finite differences
        // must see it frozen at its unperturbed value.
        let p0 = {
            let mut g = Graph::new();
            let x = g.constant(image.clone())?;
            let bf = model.backbone.forward(&mut g, &s, x)?;
            let p = model.pbsd_visual(&mut g, &s, &bf, &boxes, &queue)?;
            g.value(p).clone()
        };
        let report = grad_check_split(
            &s,
            &[],
            |g, s, _| {
                let c = model.example_losses(g, s, &ex, Some(&queue), &boxes, &w)?;
                total_loss(g, &c, &w)
            },
            |g, s, _| {
                let mut c = model.example_losses(g, s, &ex, None, &boxes, &w)?;
                let p = g.constant(p0.clone())?;
                let q = model.pbsd_textual(g, s, &image, &boxes, &queue)?;
                c.pbsd = Some(pbsd_loss(g, p, q, &queue.positives())?);
                total_loss(g, &c, &w)
            },
            &GradCheckOptions {
                max_coords_per_tensor: Some(2),
                seed: i,
                skip_kinks: true,
                ..Default::default()
            },
        )?;
        // ReLU kinks inside the backbone and residual blocks are skipped; a
        // handful per instance is expected, a large share is not.
        if report.skipped * 20 > report.checked + report.skipped {
            return Err(Error::contract(format!(
                "{} of {} coordinates sit on a kink",
                report.skipped,
                report.checked + report.skipped
            )));
        }
        Ok(report.max_rel_err)
    })
}

/// Gradient checks of the composed pipelines.
pub fn pipeline_checks() -> Vec<Check> {
    vec![ltc_project_check(), pbsd_check(), seg_loss_check(), total_loss_check()]
}

fn pair_count_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &a) in scores.iter().enumerate() {
        for (j, &b) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if a > b {
                    wins += 1.0;
                } else if a == b {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn sweep_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let mut ts: Vec<f64> = scores.to_vec();
    ts.sort_by(|a, b| b.total_cmp(a));
    ts.dedup();
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for t in ts {
        let tp = scores.iter().zip(labels).filter(|(s, l)| **s >= t && **l).count() as f64;
        let fp = scores.iter().zip(labels).filter(|(s, l)| **s >= t && !**l).count() as f64;
        let recall = tp / pos;
        ap += (recall - prev_recall) * tp / (tp + fp);
        prev_recall = recall;
    }
    ap
}

/// Random scores on a coarse grid (so ties occur) with both labels present.
fn scored_instance(i: u64) -> (Vec<f64>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa0c ^ i);
    let n = rng.gen_range(2..=64);
    let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
    labels[0] = true;
    labels[1] = false;
    let scores = (0..n).map(|_| rng.gen_range(0..10) as f64 / 10.0).collect();
    (scores, labels)
}

/// Metric implementations against brute-force oracles.
pub fn metric_checks() -> Vec<Check> {
    vec![
        Check::new("metric.auroc_vs_pair_count", 200, 1e-9, |i| {
            let (s, l) = scored_instance(i);
            Ok((auroc(&s, &l)? - pair_count_auroc(&s, &l)).abs())
        }),
        Check::new("metric.ap_vs_threshold_sweep", 200, 1e-9, |i| {
            let (s, l) = scored_instance(i);
            Ok((average_precision(&s, &l)? - sweep_ap(&s, &l)).abs())
        }),
    ]
}

/// The full suite: kernels, composed pipelines and metrics.
pub fn default_suite() -> Vec<Check> {
    let mut all = op_checks();
    all.extend(pipeline_checks());
    all.extend(metric_checks());
    all
}
