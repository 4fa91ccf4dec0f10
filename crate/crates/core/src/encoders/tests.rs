use super::*;
use crate::nn::Linear;
use crate::numcore::{grad_check_with_params, named_rng, GradCheckOptions, Graph, Init, ParamStore, Tensor};

fn random_image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut rng = named_rng(seed, "image");
    Init::FanIn { fan_in: 1 }.sample(&[h, w, 3], &mut rng)
}

fn small_encoder(store: &mut ParamStore<f64>, levels: usize) -> VisualEncoder {
    let cfg = VisualEncoderConfig {
        image_size: 16,
        patch: 4,
        width: 8,
        levels,
    };
    VisualEncoder::new(store, 3, &cfg).unwrap()
}

#[test]
fn encoder_level_shapes() {
    let mut s = ParamStore::<f32>::new();
    let enc = VisualEncoder::new(
        &mut s,
        0,
        &VisualEncoderConfig {
            image_size: 64,
            patch: 8,
            width: 16,
            levels: 6,
        },
    )
    .unwrap();
    let mut g = Graph::new();
    let img = g.constant(Tensor::full(&[64, 64, 3], 0.5)).unwrap();
    let f = enc.encode(&mut g, &s, img).unwrap();
    assert_eq!(f.levels.len(), 6);
    for &l in &f.levels {
        assert_eq!(g.shape(l), [64, 16]);
    }
}

#[test]
fn encoder_rejects_indivisible_image() {
    let mut s = ParamStore::<f64>::new();
    let enc = small_encoder(&mut s, 3);
    let mut g = Graph::new();
    let img = g.constant(Tensor::zeros(&[18, 16, 3])).unwrap();
    assert!(matches!(enc.encode(&mut g, &s, img), Err(crate::Error::Shape(_))));
    assert!(VisualEncoderConfig {
        image_size: 20,
        patch: 8,
        width: 4,
        levels: 3
    }
    .validate()
    .is_err());
}

#[test]
fn zero_image_with_zero_final_norm_is_finite() {
    let mut s = ParamStore::<f64>::new();
    let enc = small_encoder(&mut s, 4);
    let n = enc.final_norm();
    s.set_value(n.gamma, Tensor::zeros(&[8])).unwrap();
    let mut g = Graph::new();
    let img = g.constant(Tensor::zeros(&[16, 16, 3])).unwrap();
    let f = enc.encode(&mut g, &s, img).unwrap();
    for &l in &f.levels {
        assert!(g.value(l).is_finite());
    }
    assert!(g.value(f.last()).data().iter().all(|&v| v == 0.0));
}

#[test]
fn level_zero_is_local_to_the_changed_patch() {
    let mut s = ParamStore::<f64>::new();
    let enc = small_encoder(&mut s, 3);
    let a = random_image(16, 16, 1);
    let mut b = a.clone();
    // Patch (1, 2): rows 4..8, cols 8..12.
    for y in 4..8 {
        for x in 8..12 {
            b.data_mut()[(y * 16 + x) * 3 + 1] += 0.5;
        }
    }
    let mut g = Graph::new();
    let ia = g.constant(a).unwrap();
    let ib = g.constant(b).unwrap();
    let fa = enc.encode(&mut g, &s, ia).unwrap();
    let fb = enc.encode(&mut g, &s, ib).unwrap();
    let (la, lb) = (g.value(fa.levels[0]), g.value(fb.levels[0]));
    for tok in 0..16 {
        let same = la.row(tok) == lb.row(tok);
        assert_eq!(same, tok != 4 + 2, "token {tok}");
    }
}

fn backbone(store: &mut ParamStore<f64>, width: usize) -> Backbone {
    Backbone::new(store, 5, &BackboneConfig { width }).unwrap()
}

#[test]
fn backbone_quarter_resolution() {
    let mut s = ParamStore::<f64>::new();
    let bb = backbone(&mut s, 6);
    let mut g = Graph::new();
    let img = g.constant(random_image(64, 64, 2)).unwrap();
    let f = bb.forward(&mut g, &s, img).unwrap();
    assert_eq!(g.shape(f.f), [16, 16, 6]);
    assert_eq!((f.h, f.w, f.channels), (16, 16, 6));
}

#[test]
fn backbone_translation_equivariance() {
    let mut s = ParamStore::<f64>::new();
    let bb = backbone(&mut s, 4);
    let (h, w) = (64, 64);
    let a = random_image(h, w, 3);
    let mut b = Tensor::<f64>::zeros(&[h, w, 3]);
    // b(y, x) = a(y, x - 4): shift right by one backbone cell.
    for y in 0..h {
        for x in 4..w {
            for c in 0..3 {
                b.data_mut()[(y * w + x) * 3 + c] = a.data()[(y * w + x - 4) * 3 + c];
            }
        }
    }
    let mut g = Graph::new();
    let ia = g.constant(a).unwrap();
    let ib = g.constant(b).unwrap();
    let fa = bb.forward(&mut g, &s, ia).unwrap();
    let fb = bb.forward(&mut g, &s, ib).unwrap();
    let (va, vb) = (g.value(fa.f), g.value(fb.f));
    let (fh, fw, c) = (16, 16, 4);
    // The receptive field reaches about 7 cells; compare cells far from borders.
    let margin = 7;
    for y in margin..fh - margin {
        for x in margin + 1..fw - margin {
            for k in 0..c {
                let pa = va.data()[(y * fw + x - 1) * c + k];
                let pb = vb.data()[(y * fw + x) * c + k];
                assert!((pa - pb).abs() < 1e-12, "cell ({y},{x}) ch {k}: {pa} vs {pb}");
            }
        }
    }
}

#[test]
fn backbone_constant_image_gives_constant_interior() {
    let mut s = ParamStore::<f64>::new();
    let bb = backbone(&mut s, 4);
    let mut g = Graph::new();
    let img = g.constant(Tensor::full(&[128, 128, 3], 0.3)).unwrap();
    let f = bb.forward(&mut g, &s, img).unwrap();
    let v = g.value(f.f);
    let at = |y: usize, x: usize| &v.data()[(y * 32 + x) * 4..][..4];
    let reference = at(16, 16).to_vec();
    for y in 8..24 {
        for x in 8..24 {
            for (a, b) in at(y, x).iter().zip(&reference) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

fn lm_fixture(vocab_size: usize) -> (ParamStore<f64>, TinyLm) {
    let mut s = ParamStore::new();
    let lm = TinyLm::new(
        &mut s,
        11,
        &LmConfig {
            width: 8,
            blocks: 2,
            context: 16,
        },
        vocab_size,
    )
    .unwrap();
    (s, lm)
}

fn text_seq(ids: &[usize]) -> TokenSequence {
    TokenSequence {
        ids: ids.to_vec(),
        tags: vec![Segment::Text; ids.len()],
        answer_start: 0,
    }
}

#[test]
fn lm_appending_tokens_keeps_earlier_logits() {
    let (s, lm) = lm_fixture(9);
    let base = [3, 4, 5, 6];
    let mut g = Graph::new();
    let short = lm.forward(&mut g, &s, &text_seq(&base), None).unwrap();
    let short = g.value(short.logits).clone();
    for extra in [[7usize, 8], [2, 2], [8, 3]] {
        let mut ids = base.to_vec();
        ids.extend(extra);
        let mut g = Graph::new();
        let long = lm.forward(&mut g, &s, &text_seq(&ids), None).unwrap();
        let long = g.value(long.logits);
        assert_eq!(&long.data()[..short.numel()], short.data());
    }
}

#[test]
fn lm_perturbing_later_tokens_keeps_earlier_logits() {
    let (s, lm) = lm_fixture(9);
    let a = [3, 4, 5, 6, 7, 8];
    for j in 1..a.len() {
        let mut b = a;
        b[j] = (b[j] + 1) % 9;
        let mut g = Graph::new();
        let oa = lm.forward(&mut g, &s, &text_seq(&a), None).unwrap();
        let ob = lm.forward(&mut g, &s, &text_seq(&b), None).unwrap();
        for i in 0..j {
            assert_eq!(g.value(oa.logits).row(i), g.value(ob.logits).row(i), "i={i} j={j}");
        }
    }
}

#[test]
fn lm_single_token_and_capacity() {
    let (s, lm) = lm_fixture(9);
    let mut g = Graph::new();
    let out = lm.forward(&mut g, &s, &text_seq(&[4]), None).unwrap();
    assert_eq!(g.shape(out.logits), [1, 9]);
    assert_eq!(g.shape(out.hidden), [1, 8]);
    let long = text_seq(&[4; 17]);
    assert!(matches!(
        lm.forward(&mut g, &s, &long, None),
        Err(crate::Error::Capacity { len: 17, limit: 16 })
    ));
}

#[test]
fn lm_single_word_vocabulary_has_zero_loss() {
    let (s, lm) = lm_fixture(1);
    let mut g = Graph::new();
    let out = lm.forward(&mut g, &s, &text_seq(&[0, 0, 0]), None).unwrap();
    let l = g.cross_entropy(out.logits, &[0, 0, 0]).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
}

#[test]
fn embed_text_properties() {
    let vocab = Vocab::new(["the wood is smooth", "the metal is smooth"]);
    let (s, lm) = lm_fixture(vocab.len());
    let mut g = Graph::new();
    let (ia, ea) = lm.embed_text(&mut g, &s, &vocab, "the wood is smooth").unwrap();
    let (ib, eb) = lm.embed_text(&mut g, &s, &vocab, "the wood is smooth").unwrap();
    let (_, ec) = lm.embed_text(&mut g, &s, &vocab, "the metal is smooth").unwrap();
    assert_eq!(ia, ib);
    assert_eq!(g.value(ea).data(), g.value(eb).data());
    assert_ne!(g.value(ea).data(), g.value(ec).data());
    assert_eq!(g.shape(ea), [8]);
    assert!(matches!(
        lm.embed_text(&mut g, &s, &vocab, ""),
        Err(crate::Error::EmptyText)
    ));
    assert!(matches!(
        lm.embed_text(&mut g, &s, &vocab, "the glass is smooth"),
        Err(crate::Error::OutOfVocabulary(_))
    ));
}

#[test]
fn greedy_generation_is_deterministic_and_stops() {
    let (s, lm) = lm_fixture(9);
    let seq = text_seq(&[3, 4]);
    let a = lm.generate(&s, &seq, None, 5).unwrap();
    let b = lm.generate(&s, &seq, None, 5).unwrap();
    assert_eq!(a, b);
    assert!(a.len() <= 7);
    let last = *a.ids.last().unwrap();
    assert!(a.len() == 7 || last == Vocab::SEG || last == Vocab::EOS);
}

#[test]
fn encoder_to_lm_is_differentiable() {
    let mut s = ParamStore::<f64>::new();
    let enc = VisualEncoder::new(
        &mut s,
        1,
        &VisualEncoderConfig {
            image_size: 8,
            patch: 4,
            width: 4,
            levels: 2,
        },
    )
    .unwrap();
    let lm = TinyLm::new(
        &mut s,
        2,
        &LmConfig {
            width: 4,
            blocks: 1,
            context: 4,
        },
        5,
    )
    .unwrap();
    let proj = Linear::new(&mut s, 3, "proj", 4, 4, true).unwrap();
    let seq = TokenSequence::new(1, &[], &[3]).unwrap();
    let img = random_image(8, 8, 9);
    let report = grad_check_with_params(
        &s,
        &[img],
        |g, s, xs| {
            let f = enc.encode(g, s, xs[0])?;
            let pooled = g.mean_axis(f.last(), 0)?;
            let pooled = g.reshape(pooled, &[1, 4])?;
            let v = proj.forward(g, s, pooled)?;
            let out = lm.forward(g, s, &seq, Some(v))?;
            g.cross_entropy(out.logits, &[3, 4])
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}
