use proptest::prelude::*;

use super::*;
use crate::encoders::{Backbone, BackboneConfig, LmConfig, TinyLm, Vocab};
use crate::numcore::{grad_check, grad_check_with_params, named_rng, GradCheckOptions, Init};

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    Init::Normal { std: 1.0 }.sample(shape, &mut named_rng(seed, "seg-test"))
}

fn features(g: &mut Graph<f64>, t: Tensor<f64>) -> BackboneFeatures {
    let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    BackboneFeatures {
        f: g.leaf(t, true).unwrap(),
        h,
        w,
        channels: c,
    }
}

fn head(c: usize) -> (ParamStore<f64>, SegHead) {
    let mut s = ParamStore::new();
    let h = SegHead::new(&mut s, 5, &SegHeadConfig::default(), 8, c).unwrap();
    (s, h)
}

fn prompt(g: &mut Graph<f64>, t: Tensor<f64>) -> SegPrompt {
    SegPrompt {
        h: g.leaf(t, true).unwrap(),
        position: 0,
    }
}

// ---- extraction ----

fn vocab() -> Vocab {
    Vocab::new(["is there a defect ?", "it is <seg>", "yes no"])
}

fn seq(v: &Vocab, answer: &str) -> TokenSequence {
    TokenSequence::new(
        2,
        &v.tokenize("is there a defect ?").unwrap(),
        &v.tokenize(answer).unwrap(),
    )
    .unwrap()
}

#[test]
fn missing_seg_is_a_signal_not_an_error() {
    let (s, h) = head(4);
    let v = vocab();
    let sq = seq(&v, "no");
    let mut g = Graph::new();
    let hidden = g.constant(random(&[sq.len(), 8], 1)).unwrap();
    assert!(h.extract_seg_embedding(&mut g, &s, hidden, &sq).unwrap().is_none());
}

#[test]
fn seg_embedding_is_deterministic_and_positioned() {
    let (s, h) = head(4);
    let v = vocab();
    let sq = seq(&v, "it is <seg>");
    let hidden = random(&[sq.len(), 8], 2);
    let run = || {
        let mut g = Graph::new();
        let x = g.constant(hidden.clone()).unwrap();
        let p = h.extract_seg_embedding(&mut g, &s, x, &sq).unwrap().unwrap();
        (p.position, g.value(p.h).data().to_vec())
    };
    let (pos, a) = run();
    assert_eq!(pos, sq.len() - 1);
    assert_eq!(a.len(), 4);
    assert_eq!(run(), (pos, a));
}

#[test]
fn mask_loss_reaches_language_model_parameters() {
    let v = vocab();
    let mut s = ParamStore::new();
    let lm = TinyLm::new(
        &mut s,
        1,
        &LmConfig {
            width: 8,
            blocks: 1,
            context: 16,
        },
        v.len(),
    )
    .unwrap();
    let h = SegHead::new(&mut s, 2, &SegHeadConfig { blocks: 1 }, 8, 3).unwrap();
    let ids: Vec<_> = s
        .iter()
        .filter(|(_, p)| !p.name().starts_with("lm.block0.attn"))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        s.set_requires_grad(id, false);
    }
    let sq = seq(&v, "it is <seg>");
    let gt = Tensor::from_f64(
        &[8, 8],
        &(0..64).map(|i| ((i % 8) < 3) as u8 as f64).collect::<Vec<_>>(),
    )
    .unwrap();
    let report = grad_check_with_params(
        &s,
        &[random(&[2, 8], 3), random(&[2, 2, 3], 4)],
        |g, s, xs| {
            let out = lm.forward(g, s, &sq, Some(xs[0]))?;
            let p = h.extract_seg_embedding(g, s, out.hidden, &sq)?.unwrap();
            let f = BackboneFeatures {
                f: xs[1],
                h: 2,
                w: 2,
                channels: 3,
            };
            let pred = h.decode_mask(g, s, &p, &f, 8, 8)?;
            seg_loss(g, &pred, &gt, &LossWeights::default())
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

// ---- decoder ----

#[test]
fn zero_weight_decoder_gives_constant_logits() {
    let (mut s, h) = head(4);
    let ids: Vec<_> = s
        .iter()
        .filter(|(_, p)| p.name().starts_with("seg.input") || p.name().starts_with("seg.block"))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let shape = s.value(id).shape().to_vec();
        s.set_value(id, Tensor::zeros(&shape)).unwrap();
    }
    let mut g = Graph::new();
    let f = features(&mut g, random(&[4, 4, 4], 1));
    let p = prompt(&mut g, random(&[1, 4], 2));
    let pred = h.decode_mask(&mut g, &s, &p, &f, 16, 16).unwrap();
    let v = g.value(pred.logits).data().to_vec();
    assert!(v.iter().all(|x| *x == v[0]));
}

#[test]
fn output_matches_image_dims_and_rejects_mismatch() {
    let (s, h) = head(4);
    let mut g = Graph::new();
    let f = features(&mut g, random(&[3, 5, 4], 1));
    let p = prompt(&mut g, random(&[1, 4], 2));
    let pred = h.decode_mask(&mut g, &s, &p, &f, 12, 20).unwrap();
    assert_eq!(g.shape(pred.logits), [12, 20]);
    assert_eq!(g.shape(pred.coarse), [3, 5]);
    assert!(matches!(
        h.decode_mask(&mut g, &s, &p, &f, 16, 20),
        Err(Error::Shape(_))
    ));
    let bad = features(&mut g, random(&[3, 5, 6], 1));
    assert!(matches!(
        h.decode_mask(&mut g, &s, &p, &bad, 12, 20),
        Err(Error::Shape(_))
    ));
}

#[test]
fn decoder_grad_check() {
    let (s, h) = head(3);
    for seed in 0..20 {
        let w = random(&[8, 8], 100 + seed);
        let report = grad_check_with_params(
            &s,
            &[random(&[2, 2, 3], seed), random(&[1, 3], 50 + seed)],
            |g, s, xs| {
                let f = BackboneFeatures {
                    f: xs[0],
                    h: 2,
                    w: 2,
                    channels: 3,
                };
                let p = SegPrompt { h: xs[1], position: 0 };
                let pred = h.decode_mask(g, s, &p, &f, 8, 8)?;
                let wv = g.constant(w.clone())?;
                let y = g.mul(pred.logits, wv)?;
                g.sum(y)
            },
            &GradCheckOptions {
                max_coords_per_tensor: Some(4),
                seed,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}

#[test]
fn decoder_commutes_with_cyclic_shifts() {
    let (s, h) = head(4);
    let (fh, fw, c) = (5, 6, 4);
    let base = random(&[fh, fw, c], 9);
    let mut rolled = Tensor::zeros(&[fh, fw, c]);
    for i in 0..fh {
        for j in 0..fw {
            let src = &base.data()[(i * fw + j) * c..][..c];
            let (di, dj) = ((i + 1) % fh, (j + 1) % fw);
            rolled.data_mut()[(di * fw + dj) * c..][..c].copy_from_slice(src);
        }
    }
    let pv = random(&[1, 4], 10);
    let run = |t: Tensor<f64>| {
        let mut g = Graph::new();
        let f = features(&mut g, t);
        let p = prompt(&mut g, pv.clone());
        let pred = h.decode_mask(&mut g, &s, &p, &f, fh * 4, fw * 4).unwrap();
        g.value(pred.coarse).clone()
    };
    let (a, b) = (run(base), run(rolled));
    for i in 0..fh {
        for j in 0..fw {
            let x = a.data()[i * fw + j];
            let y = b.data()[((i + 1) % fh) * fw + (j + 1) % fw];
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }
}

#[test]
fn backbone_to_mask_translation_on_interior() {
    let mut s = ParamStore::new();
    let bb = Backbone::new(&mut s, 1, &BackboneConfig { width: 4 }).unwrap();
    let h = SegHead::new(&mut s, 2, &SegHeadConfig::default(), 8, 4).unwrap();
    let img = random(&[128, 128, 3], 3);
    let mut shifted = Tensor::zeros(&[128, 128, 3]);
    for y in 0..128 {
        for x in 0..128 {
            let (sy, sx) = ((y + 124) % 128, (x + 124) % 128);
            let px = &img.data()[(sy * 128 + sx) * 3..][..3];
            shifted.data_mut()[(y * 128 + x) * 3..][..3].copy_from_slice(px);
        }
    }
    let pv = random(&[1, 4], 4);
    let run = |t: Tensor<f64>| {
        let mut g = Graph::new();
        let x = g.constant(t).unwrap();
        let f = bb.forward(&mut g, &s, x).unwrap();
        let p = SegPrompt {
            h: g.constant(pv.clone()).unwrap(),
            position: 0,
        };
        let pred = h.decode_mask(&mut g, &s, &p, &f, 128, 128).unwrap();
        (g.value(pred.coarse).clone(), g.value(f.f).clone())
    };
    let (a, fa) = run(img);
    let (b, fb) = run(shifted);
    // A one-cell shift of the backbone map moves interior features exactly.
    for i in 8..23 {
        for j in 8..23 {
            let x = &fa.data()[(i * 32 + j) * 4..][..4];
            let y = &fb.data()[((i + 1) * 32 + j + 1) * 4..][..4];
            for (u, v) in x.iter().zip(y) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }
    // The prompt sees the whole map, so logits only agree up to the border cells' influence.
    let corr = {
        let cells: Vec<(usize, usize)> = (8..23).flat_map(|i| (8..23).map(move |j| (i, j))).collect();
        let xs: Vec<f64> = cells.iter().map(|&(i, j)| a.data()[i * 32 + j]).collect();
        let ys: Vec<f64> = cells.iter().map(|&(i, j)| b.data()[(i + 1) * 32 + j + 1]).collect();
        let n = cells.len() as f64;
        let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    };
    assert!(corr > 0.9, "{corr}");
}

// ---- losses ----

fn probs_var(g: &mut Graph<f64>, v: &[f64], shape: &[usize]) -> Var {
    g.leaf(Tensor::from_f64(shape, v).unwrap(), true).unwrap()
}

#[test]
fn perfect_prediction_losses() {
    let gt = Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
    let mut g = Graph::new();
    let p = probs_var(&mut g, gt.data(), &[2, 2]);
    let d = dice_loss(&mut g, p, &gt).unwrap();
    let b = bce_loss(&mut g, p, &gt).unwrap();
    assert!(g.value(d).item().abs() < 1e-15);
    assert!(g.value(b).item() < 1e-6);
}

#[test]
fn dice_hand_example() {
    let gt = Tensor::from_f64(&[2, 2], &[1.0, 1.0, 0.0, 0.0]).unwrap();
    let mut g = Graph::new();
    let p = probs_var(&mut g, &[1.0; 4], &[2, 2]);
    let d = dice_loss(&mut g, p, &gt).unwrap();
    assert!((g.value(d).item() - 2.0 / 7.0).abs() < 1e-12);
}

#[test]
fn empty_mask_and_zero_probs_give_zero_dice() {
    let gt = Tensor::zeros(&[3, 3]);
    let mut g = Graph::new();
    let p = probs_var(&mut g, &[0.0; 9], &[3, 3]);
    let d = dice_loss(&mut g, p, &gt).unwrap();
    assert_eq!(g.value(d).item(), 0.0);
}

#[test]
fn non_binary_mask_is_rejected() {
    let gt = Tensor::from_f64(&[1, 2], &[0.5, 1.0]).unwrap();
    let mut g = Graph::new();
    let p = probs_var(&mut g, &[0.3, 0.3], &[1, 2]);
    assert!(matches!(dice_loss(&mut g, p, &gt), Err(Error::Contract(_))));
    assert!(matches!(bce_loss(&mut g, p, &gt), Err(Error::Contract(_))));
    let wrong = Tensor::zeros(&[2, 1]);
    assert!(matches!(bce_loss(&mut g, p, &wrong), Err(Error::Shape(_))));
}

#[test]
fn seg_loss_grad_check() {
    for seed in 0..20 {
        let gt = Tensor::from_f64(
            &[3, 4],
            &random(&[12], 200 + seed)
                .data()
                .iter()
                .map(|v| (*v > 0.0) as u8 as f64)
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let report = grad_check(
            |g, xs| {
                let pred = MaskPrediction {
                    logits: xs[0],
                    coarse: xs[0],
                };
                seg_loss(g, &pred, &gt, &LossWeights::default())
            },
            &[random(&[3, 4], seed)],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn seg_losses_are_bounded(
        logits in prop::collection::vec(-30.0f64..30.0, 16),
        bits in prop::collection::vec(any::<bool>(), 16),
    ) {
        let gt = Tensor::<f64>::from_f64(&[4, 4], &bits.iter().map(|&b| b as u8 as f64).collect::<Vec<_>>()).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_f64(&[4, 4], &logits).unwrap()).unwrap();
        let p = g.sigmoid(x).unwrap();
        let d = dice_loss(&mut g, p, &gt).unwrap();
        let b = bce_loss(&mut g, p, &gt).unwrap();
        let d = g.value(d).item();
        prop_assert!((0.0..1.0).contains(&d), "{}", d);
        prop_assert!(g.value(b).item() >= 0.0);
        let pred = MaskPrediction { logits: x, coarse: x };
        let l = seg_loss(&mut g, &pred, &gt, &LossWeights::default()).unwrap();
        prop_assert!(g.value(l).item().is_finite());
    }
}

#[test]
fn text_loss_examples() {
    let mut g = Graph::new();
    // Vocabulary of one: the only token is certain.
    let single = TokenSequence {
        ids: vec![0, 0, 0],
        tags: vec![crate::encoders::Segment::Text; 3],
        answer_start: 1,
    };
    let l = g.constant(random(&[3, 1], 1)).unwrap();
    let t = text_loss(&mut g, l, &single).unwrap();
    assert_eq!(g.value(t).item(), 0.0);

    let v = vocab();
    let sq = seq(&v, "it is <seg>");
    let u = g.constant(Tensor::zeros(&[sq.len(), v.len()])).unwrap();
    let t = text_loss(&mut g, u, &sq).unwrap();
    assert!((g.value(t).item() - (v.len() as f64).ln()).abs() < 1e-12);

    let empty = TokenSequence::new(2, &v.tokenize("yes").unwrap(), &[]).unwrap();
    let l = g.constant(Tensor::zeros(&[empty.len(), v.len()])).unwrap();
    assert!(matches!(text_loss(&mut g, l, &empty), Err(Error::Contract(_))));
}

#[test]
fn text_loss_ignores_instruction_targets() {
    let v = vocab();
    let a = seq(&v, "it is <seg>");
    let mut b = a.clone();
    for i in b.num_visual()..b.answer_start {
        b.ids[i] = v.id("yes").unwrap();
    }
    let mut g = Graph::new();
    let l = g.constant(random(&[a.len(), v.len()], 3)).unwrap();
    let la = text_loss(&mut g, l, &a).unwrap();
    let lb = text_loss(&mut g, l, &b).unwrap();
    assert_eq!(g.value(la).item(), g.value(lb).item());
}

#[test]
fn total_loss_arithmetic_and_errors() {
    let mut g = Graph::<f64>::new();
    let c = LossComponents {
        txt: Some(g.scalar(0.5).unwrap()),
        seg: Some(g.scalar(0.2).unwrap()),
        pbsd: Some(g.scalar(0.3).unwrap()),
    };
    let ones = LossWeights {
        txt: 1.0,
        seg: 1.0,
        pbsd: 1.0,
        ..Default::default()
    };
    let t = total_loss(&mut g, &c, &ones).unwrap();
    assert!((g.value(t).item() - 1.0).abs() < 1e-15);
    let only_txt = LossWeights {
        txt: 1.0,
        seg: 0.0,
        pbsd: 0.0,
        ..Default::default()
    };
    let t = total_loss(&mut g, &c, &only_txt).unwrap();
    assert_eq!(g.value(t).item(), 0.5);
    let zeros = LossComponents {
        txt: Some(g.scalar(0.0).unwrap()),
        seg: Some(g.scalar(0.0).unwrap()),
        pbsd: Some(g.scalar(0.0).unwrap()),
    };
    let t = total_loss(&mut g, &zeros, &ones).unwrap();
    assert_eq!(g.value(t).item(), 0.0);
    let neg = g.scalar(-1.0).unwrap();
    match loss_term("seg", g.ln(neg)) {
        Err(Error::NonFiniteLoss(name)) => assert_eq!(name, "seg"),
        other => panic!("{other:?}"),
    }
    let ok = g.scalar(0.2).unwrap();
    assert_eq!(loss_term("seg", Ok(ok)).unwrap(), ok);
    assert!(LossWeights {
        txt: 0.0,
        seg: 0.0,
        pbsd: 0.0,
        bce: 0.0,
        dice: 0.0
    }
    .validate()
    .is_err());
    assert!(LossWeights {
        txt: -1.0,
        ..Default::default()
    }
    .validate()
    .is_err());
    LossWeights::default().validate().unwrap();
}

/// Full objective on one toy sample.
fn composite(
    g: &mut Graph<f64>,
    s: &ParamStore<f64>,
    lm: &TinyLm,
    h: &SegHead,
    sq: &TokenSequence,
    visual: Var,
    f: Var,
    gt: &Tensor<f64>,
    w: &LossWeights,
) -> Result<Var> {
    let out = lm.forward(g, s, sq, Some(visual))?;
    let txt = text_loss(g, out.logits, sq)?;
    let p = h.extract_seg_embedding(g, s, out.hidden, sq)?.unwrap();
    let fe = BackboneFeatures {
        f,
        h: 2,
        w: 2,
        channels: 3,
    };
    let pred = h.decode_mask(g, s, &p, &fe, 8, 8)?;
    let seg = seg_loss(g, &pred, gt, w)?;
    let pb = g.scalar(0.25)?;
    total_loss(
        g,
        &LossComponents {
            txt: Some(txt),
            seg: Some(seg),
            pbsd: Some(pb),
        },
        w,
    )
}

fn toy_model() -> (ParamStore<f64>, TinyLm, SegHead, Vocab) {
    let v = vocab();
    let mut s = ParamStore::new();
    let lm = TinyLm::new(
        &mut s,
        1,
        &LmConfig {
            width: 8,
            blocks: 1,
            context: 16,
        },
        v.len(),
    )
    .unwrap();
    let h = SegHead::new(&mut s, 2, &SegHeadConfig { blocks: 1 }, 8, 3).unwrap();
    (s, lm, h, v)
}

#[test]
fn zero_seg_weight_leaves_decoder_without_gradient() {
    let (mut s, lm, h, v) = toy_model();
    let sq = seq(&v, "it is <seg>");
    let gt = Tensor::from_f64(&[8, 8], &(0..64).map(|i| (i < 10) as u8 as f64).collect::<Vec<_>>()).unwrap();
    let w = LossWeights {
        seg: 0.0,
        ..Default::default()
    };
    let mut g = Graph::new();
    let vis = g.constant(random(&[2, 8], 1)).unwrap();
    let f = g.constant(random(&[2, 2, 3], 2)).unwrap();
    let l = composite(&mut g, &s, &lm, &h, &sq, vis, f, &gt, &w).unwrap();
    g.backward(l).unwrap();
    s.zero_grad();
    g.accumulate_param_grads(&mut s);
    assert_eq!(s.grad_norm_sq("seg."), 0.0);
    assert!(s.grad_norm_sq("lm.") > 0.0);
}

#[test]
fn composite_objective_grad_check() {
    let (s, lm, h, v) = toy_model();
    let sq = seq(&v, "it is <seg>");
    for seed in 0..20 {
        let gt = Tensor::from_f64(
            &[8, 8],
            &random(&[64], 300 + seed)
                .data()
                .iter()
                .map(|x| (*x > 0.5) as u8 as f64)
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let w = LossWeights::default();
        let report = grad_check_with_params(
            &s,
            &[random(&[2, 8], seed), random(&[2, 2, 3], 40 + seed)],
            |g, s, xs| composite(g, s, &lm, &h, &sq, xs[0], xs[1], &gt, &w),
            &GradCheckOptions {
                max_coords_per_tensor: Some(3),
                seed,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
