use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::encoders::{Backbone, BackboneConfig, LmConfig, VisualEncoderConfig};
use crate::ltc::{Ltc, ResamplerConfig};
use crate::numcore::{grad_check, named_rng, GradCheckOptions, Init};

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    Init::Normal { std: 1.0 }.sample(shape, &mut named_rng(seed, "dssl-test"))
}

fn unit_rows(m: usize, d: usize, seed: u64) -> Tensor<f64> {
    let mut t = random(&[m, d], seed);
    for r in 0..m {
        let row = &mut t.data_mut()[r * d..][..d];
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    t
}

// ---- boxes ----

#[test]
fn boxes_are_deterministic_and_in_range() {
    let a = sample_patch_boxes(64, 64, 8, 0.25, 0.5, 42).unwrap();
    let b = sample_patch_boxes(64, 64, 8, 0.25, 0.5, 42).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 8);
    assert_ne!(a, sample_patch_boxes(64, 64, 8, 0.25, 0.5, 43).unwrap());
    for seed in 0..50 {
        for bx in sample_patch_boxes(64, 64, 8, 0.25, 0.5, seed).unwrap() {
            assert!((16..=32).contains(&bx.width()), "{bx:?}");
            assert!((16..=32).contains(&bx.height()), "{bx:?}");
            bx.validate(64, 64).unwrap();
        }
    }
}

#[test]
fn zero_boxes_is_a_parameter_error() {
    assert!(matches!(
        sample_patch_boxes(64, 64, 0, 0.25, 0.5, 1),
        Err(Error::Param(_))
    ));
}

#[test]
fn full_box_crop_is_identity() {
    let img = random(&[8, 8, 3], 1);
    let out = crop_resize(&img, &PatchBox::full(8, 8), 8).unwrap();
    assert_eq!(out.data(), img.data());
    assert!(crop_resize(
        &img,
        &PatchBox {
            x0: 3,
            y0: 0,
            x1: 3,
            y1: 4
        },
        8
    )
    .is_err());
}

// ---- visual branch ----

struct Visual {
    s: ParamStore<f64>,
    heads: DsslHeads,
}

fn visual(cf: usize) -> Visual {
    let mut s = ParamStore::new();
    let heads = DsslHeads::new(&mut s, 3, cf, 4, 8).unwrap();
    Visual { s, heads }
}

fn feature_map(g: &mut Graph<f64>, t: Tensor<f64>) -> BackboneFeatures {
    let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    BackboneFeatures {
        f: g.constant(t).unwrap(),
        h,
        w,
        channels: c,
    }
}

#[test]
fn full_box_roi_equals_global_feature() {
    let v = visual(5);
    let mut g = Graph::new();
    let f = feature_map(&mut g, random(&[4, 4, 5], 2));
    let pe = patch_embed_visual(&mut g, &v.s, &v.heads, &f, &[PatchBox::full(16, 16)], 16, 16).unwrap();
    let z = global_normalized(&mut g, &v.s, &v.heads.g_alpha, f.f).unwrap();
    for (a, b) in g.value(pe).data().iter().zip(g.value(z).data()) {
        assert!((a - b).abs() < 1e-12);
    }
    // Identical initial heads: the same holds through g_beta.
    let zb = global_normalized(&mut g, &v.s, &v.heads.g_beta, f.f).unwrap();
    assert_eq!(g.value(z).data(), g.value(zb).data());
}

#[test]
fn constant_features_give_identical_patch_vectors() {
    let v = visual(5);
    let mut g = Graph::new();
    let f = feature_map(&mut g, Tensor::full(&[4, 4, 5], 0.3));
    let boxes = sample_patch_boxes(16, 16, 6, 0.25, 0.5, 1).unwrap();
    let pe = patch_embed_visual(&mut g, &v.s, &v.heads, &f, &boxes, 16, 16).unwrap();
    let val = g.value(pe);
    for r in 1..6 {
        for (a, b) in val.row(r).iter().zip(val.row(0)) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}

#[test]
fn patch_vectors_are_unit_norm() {
    let v = visual(6);
    let mut g = Graph::new();
    let f = feature_map(&mut g, random(&[16, 16, 6], 3));
    for seed in 0..10 {
        let boxes = sample_patch_boxes(64, 64, 8, 0.25, 0.5, seed).unwrap();
        let pe = patch_embed_visual(&mut g, &v.s, &v.heads, &f, &boxes, 64, 64).unwrap();
        for r in 0..8 {
            let n: f64 = g.value(pe).row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn tiny_box_snaps_to_nearest_cell() {
    let w = roi_weights::<f64>(
        &[PatchBox {
            x0: 5,
            y0: 9,
            x1: 6,
            y1: 10,
        }],
        16,
        16,
        4,
        4,
    );
    // Centre (9.5, 5.5) lies in cell (2, 1).
    let hot: Vec<usize> = (0..16).filter(|&i| w.data()[i] != 0.0).collect();
    assert_eq!(hot, vec![2 * 4 + 1]);
    assert_eq!(w.data()[9], 1.0);
}

#[test]
fn roi_averages_covered_cell_centres() {
    // Box [0, 8) x [0, 8) on a 16x16 image with 4x4 cells covers centres 2 and 6.
    let w = roi_weights::<f64>(
        &[PatchBox {
            x0: 0,
            y0: 0,
            x1: 8,
            y1: 8,
        }],
        16,
        16,
        4,
        4,
    );
    let hot: Vec<usize> = (0..16).filter(|&i| w.data()[i] != 0.0).collect();
    assert_eq!(hot, vec![0, 1, 4, 5]);
    assert!(hot.iter().all(|&i| w.data()[i] == 0.25));
}

#[test]
fn global_normalized_contract_and_gradient() {
    let v = visual(4);
    let mut g = Graph::new();
    let x = random(&[3, 3, 4], 4);
    let a = g.constant(x.clone()).unwrap();
    let b = g.constant(x.clone()).unwrap();
    let za = global_normalized(&mut g, &v.s, &v.heads.g_beta, a).unwrap();
    let zb = global_normalized(&mut g, &v.s, &v.heads.g_beta, b).unwrap();
    assert_eq!(g.value(za).data(), g.value(zb).data());
    let n: f64 = g.value(za).data().iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!((n - 1.0).abs() < 1e-6);

    let report = crate::numcore::grad_check_with_params(
        &v.s,
        &[x],
        |g, s, xs| {
            let z = global_normalized(g, s, &v.heads.g_beta, xs[0])?;
            let w = g.constant(random(&[1, 4], 5))?;
            let y = g.mul(z, w)?;
            g.sum(y)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

// ---- queues ----

fn population(normal: usize, abnormal: usize, classes: usize) -> Vec<QueueSample> {
    let mut out = Vec::new();
    for c in 0..classes {
        for i in 0..normal + abnormal {
            out.push(QueueSample {
                index: out.len(),
                class: c,
                label: if i < normal { Label::Normal } else { Label::Abnormal },
            });
        }
    }
    out
}

#[test]
fn queue_fraction_of_forty_and_forty() {
    let pop = population(40, 40, 3);
    let m = select_members(&pop, 1.0 / 20.0, 2, 7, 0).unwrap();
    assert_eq!(m.len(), 3);
    for (c, picks) in &m {
        let labels: Vec<Label> = picks.iter().map(|&p| pop[p].label).collect();
        assert_eq!(
            labels,
            vec![Label::Normal, Label::Normal, Label::Abnormal, Label::Abnormal]
        );
        assert!(picks.iter().all(|&p| pop[p].class == *c));
    }
    assert_eq!(m, select_members(&pop, 1.0 / 20.0, 2, 7, 0).unwrap());
    assert_ne!(m, select_members(&pop, 1.0 / 20.0, 2, 7, 1).unwrap());
}

#[test]
fn queue_minimum_and_missing_normals() {
    let pop = population(5, 1, 1);
    let m = select_members(&pop, 0.05, 2, 1, 0).unwrap();
    assert_eq!(m[&0].len(), 3);
    let only_bad = population(0, 4, 1);
    assert!(matches!(
        select_members(&only_bad, 0.05, 2, 1, 0),
        Err(Error::Dataset(_))
    ));
}

fn toy_queue(m: usize, seed: u64) -> MemoryQueue<f64> {
    let labels = (0..m)
        .map(|i| if i % 2 == 0 { Label::Normal } else { Label::Abnormal })
        .collect();
    MemoryQueue::new(
        0,
        0,
        (0..m).collect(),
        labels,
        unit_rows(m, 4, seed),
        random(&[m, 6], seed + 1),
    )
    .unwrap()
}

#[test]
fn queue_build_is_deterministic() {
    let pop = population(6, 6, 2);
    let picks = select_members(&pop, 0.5, 2, 3, 0).unwrap();
    let embed = |s: &QueueSample| {
        let z = unit_rows(1, 4, s.index as u64).into_data();
        let t = random(&[6], s.index as u64).into_data();
        Ok((z, t))
    };
    let a = MemoryQueue::<f64>::build_all(&pop, &picks, 0, embed).unwrap();
    let b = MemoryQueue::<f64>::build_all(&pop, &picks, 0, embed).unwrap();
    assert_eq!(a, b);
    assert_eq!(a[&1].positives(), vec![0, 1, 2]);
    assert!(MemoryQueue::new(
        0,
        0,
        vec![0],
        vec![Label::Normal],
        random(&[1, 4], 1),
        random(&[1, 2], 1)
    )
    .is_err());
}

#[test]
fn queue_dump_has_one_line_per_entry_and_branch() {
    let q = toy_queue(4, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("queue.tsv");
    let mut all = std::collections::BTreeMap::new();
    all.insert(0, q);
    write_queue_dump(&all, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 8);
    assert!(text.lines().next().unwrap().starts_with("0\tnormal\tvisual\t"));
}

// ---- similarity ----

fn dist(dots: &[f64], tau: f64) -> Vec<f64> {
    // x = e_0 and entries carry the dot products in their first coordinate.
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[1, 1], vec![1.0]).unwrap()).unwrap();
    let e = g
        .constant(Tensor::new(&[dots.len(), 1], dots.to_vec()).unwrap())
        .unwrap();
    let p = similarity(&mut g, x, e, tau).unwrap();
    g.value(p).data().to_vec()
}

#[test]
fn similarity_examples() {
    assert_eq!(dist(&[0.3, 0.3], 0.1), vec![0.5, 0.5]);
    let p = dist(&[1.0, 0.0], 1.0);
    assert!((p[0] - 0.7311).abs() < 1e-4 && (p[1] - 0.2689).abs() < 1e-4);
    let sharp = dist(&[1.0, 0.0, 0.5], 0.1);
    let soft = dist(&[1.0, 0.0, 0.5], 1.0);
    assert!(sharp[0] > soft[0]);
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 2])).unwrap();
    assert!(matches!(similarity(&mut g, x, x, 0.0), Err(Error::Param(_))));
    assert!(matches!(similarity(&mut g, x, x, -1.0), Err(Error::Param(_))));
}

#[test]
fn temperature_monotonicity() {
    let dots = [0.9, -0.2, 0.4, 0.1];
    let taus = [2.0, 1.0, 0.5, 0.25, 0.1, 0.05, 0.01];
    let maxes: Vec<f64> = taus
        .iter()
        .map(|&t| dist(&dots, t).into_iter().fold(0.0, f64::max))
        .collect();
    for w in maxes.windows(2) {
        assert!(w[1] >= w[0], "{maxes:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn similarity_is_a_permutation_equivariant_distribution(
        m in 2usize..10, seed in any::<u64>(), tau in 0.05f64..2.0,
    ) {
        let queue = unit_rows(m, 4, seed);
        let v = unit_rows(3, 4, seed ^ 5);
        let mut perm: Vec<usize> = (0..m).collect();
        let mut rng = named_rng(seed, "perm");
        for i in (1..m).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let mut g = Graph::new();
        let q = g.constant(queue).unwrap();
        let qp = g.gather_rows(q, &perm).unwrap();
        let x = g.constant(v).unwrap();
        let a = similarity(&mut g, x, q, tau).unwrap();
        let b = similarity(&mut g, x, qp, tau).unwrap();
        let (a, b) = (g.value(a), g.value(b));
        for r in 0..3 {
            prop_assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(a.row(r).iter().all(|&p| p > 0.0 && p < 1.0));
            for (i, &pi) in perm.iter().enumerate() {
                let (x, y) = (b.row(r)[i], a.row(r)[pi]);
                prop_assert!((x - y).abs() <= 1e-12 * y.abs().max(1e-300), "{} vs {}", x, y);
            }
        }
    }
}

// ---- loss ----

fn pbsd_value(p: Tensor<f64>, q: Tensor<f64>, pos: &[usize]) -> f64 {
    let mut g = Graph::new();
    let p = g.constant(p).unwrap();
    let q = g.constant(q).unwrap();
    let l = pbsd_loss(&mut g, p, q, pos).unwrap();
    g.value(l).item()
}

#[test]
fn uniform_two_entry_loss_is_ln2() {
    let u = Tensor::new(&[3, 2], vec![0.5; 6]).unwrap();
    let l = pbsd_value(u.clone(), u, &[0, 1]);
    assert!((l - 2f64.ln()).abs() < 1e-9);
}

#[test]
fn confident_agreement_drives_loss_to_zero() {
    let mut last = f64::INFINITY;
    for eps in [1e-2, 1e-4, 1e-6, 1e-9] {
        let p = Tensor::new(&[1, 2], vec![1.0 - eps, eps]).unwrap();
        let l = pbsd_value(p.clone(), p, &[0]);
        assert!(l > 0.0 && l < last);
        last = l;
    }
    assert!(last < 1e-8);
}

#[test]
fn pbsd_errors_and_clamp() {
    let u = Tensor::new(&[1, 2], vec![0.5; 2]).unwrap();
    let mut g = Graph::new();
    let p = g.constant(u.clone()).unwrap();
    assert!(matches!(pbsd_loss(&mut g, p, p, &[]), Err(Error::Contract(_))));
    let q = g.constant(Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
    let l = pbsd_loss(&mut g, p, q, &[1]).unwrap();
    assert!((g.value(l).item() - 0.5 * -(Q_FLOOR.ln())).abs() < 1e-9);
}

#[test]
fn pbsd_is_non_negative_on_random_instances() {
    let mut rng = named_rng(17, "pbsd");
    for i in 0..500 {
        let b = rng.gen_range(1..5);
        let m = rng.gen_range(1..8);
        let mut g = Graph::new();
        let x = g.constant(random(&[b, 3], i)).unwrap();
        let e = g.constant(random(&[m, 3], i + 1000)).unwrap();
        let tau = rng.gen_range(0.05..2.0);
        let p = similarity(&mut g, x, e, tau).unwrap();
        let y = g.constant(random(&[b, 3], i + 2000)).unwrap();
        let q = similarity(&mut g, y, e, tau).unwrap();
        let pos: Vec<usize> = (0..m).filter(|_| rng.gen_bool(0.6)).collect();
        let pos = if pos.is_empty() { vec![0] } else { pos };
        let l = pbsd_loss(&mut g, p, q, &pos).unwrap();
        assert!(g.value(l).item() >= 0.0);
    }
}

#[test]
fn pbsd_grad_check_through_text_branch() {
    let p0 = {
        let mut g = Graph::new();
        let x = g.constant(random(&[3, 4], 1)).unwrap();
        let e = g.constant(random(&[5, 4], 2)).unwrap();
        let p = similarity(&mut g, x, e, 0.5).unwrap();
        g.value(p).clone()
    };
    for seed in 0..20 {
        let report = grad_check(
            |g, xs| {
                let p = g.constant(p0.clone())?;
                let q = similarity(g, xs[0], xs[1], 0.5)?;
                pbsd_loss(g, p, q, &[0, 2, 3])
            },
            &[random(&[3, 4], 10 + seed), random(&[5, 4], 40 + seed)],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}

// ---- LLM-space tokens ----

struct Mllm {
    s: ParamStore<f64>,
    enc: VisualEncoder,
    proj: Projector,
    lm: TinyLm,
    heads: DsslHeads,
    vocab: Vocab,
}

fn mllm() -> Mllm {
    let mut s = ParamStore::new();
    let enc = VisualEncoder::new(
        &mut s,
        1,
        &VisualEncoderConfig {
            image_size: 16,
            patch: 4,
            width: 8,
            levels: 4,
        },
    )
    .unwrap();
    let rc = ResamplerConfig {
        rho: 2,
        lc: 1,
        n: 2,
        k: 4,
        stride: 1.0,
        d: 8,
    };
    let proj = Projector::Ltc(Ltc::new(&mut s, 2, &rc, 8, 16).unwrap());
    let vocab = Vocab::new(["the wood should be smooth", "the metal should be shiny"]);
    let lm = TinyLm::new(
        &mut s,
        3,
        &LmConfig {
            width: 16,
            blocks: 1,
            context: 32,
        },
        vocab.len(),
    )
    .unwrap();
    let heads = DsslHeads::new(&mut s, 4, 5, 8, 16).unwrap();
    Mllm {
        s,
        enc,
        proj,
        lm,
        heads,
        vocab,
    }
}

#[test]
fn patch_tokens_full_box_matches_whole_image() {
    let m = mllm();
    let img = random(&[16, 16, 3], 3);
    let mut g = Graph::new();
    let t = patch_tokens_llm(&mut g, &m.s, &img, &[PatchBox::full(16, 16)], &m.enc, &m.proj).unwrap();
    assert_eq!(g.shape(t), [1, 16]);
    let x = g.constant(img).unwrap();
    let f = m.enc.encode(&mut g, &m.s, x).unwrap();
    let tokens = m.proj.project(&mut g, &m.s, &f).unwrap();
    let mean = g.mean_axis(tokens, 0).unwrap();
    assert_eq!(g.value(t).data(), g.value(mean).data());
}

#[test]
fn distinct_constant_crops_give_distinct_tokens() {
    let m = mllm();
    let mut img = Tensor::full(&[16, 16, 3], 0.2);
    for y in 0..16 {
        for x in 8..16 {
            img.data_mut()[(y * 16 + x) * 3..][..3].fill(0.8);
        }
    }
    let boxes = [
        PatchBox {
            x0: 0,
            y0: 0,
            x1: 8,
            y1: 8,
        },
        PatchBox {
            x0: 8,
            y0: 8,
            x1: 16,
            y1: 16,
        },
    ];
    let mut g = Graph::new();
    let t = patch_tokens_llm(&mut g, &m.s, &img, &boxes, &m.enc, &m.proj).unwrap();
    assert_eq!(g.shape(t), [2, 16]);
    assert_ne!(g.value(t).row(0), g.value(t).row(1));
}

#[test]
fn semantic_token_properties() {
    let mut m = mllm();
    let img = random(&[16, 16, 3], 5);
    let theta = |m: &Mllm, text: Option<&str>| -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let x = g.constant(img.clone())?;
        let f = m.enc.encode(&mut g, &m.s, x)?;
        let t = semantic_token(&mut g, &m.s, &m.heads, &m.lm, &m.vocab, &f, text)?;
        Ok(g.value(t).data().to_vec())
    };
    let a = theta(&m, Some("the wood should be smooth")).unwrap();
    assert_eq!(a, theta(&m, Some("the wood should be smooth")).unwrap());
    assert_ne!(a, theta(&m, Some("the metal should be shiny")).unwrap());
    assert!(matches!(theta(&m, None), Err(Error::Contract(_))));

    let fc2 = m.heads.meta.fc2;
    let shape = m.s.value(fc2.w).shape().to_vec();
    m.s.set_value(fc2.w, Tensor::zeros(&shape)).unwrap();
    let mut g = Graph::new();
    let x = g.constant(img.clone()).unwrap();
    let f = m.enc.encode(&mut g, &m.s, x).unwrap();
    let t = semantic_token(
        &mut g,
        &m.s,
        &m.heads,
        &m.lm,
        &m.vocab,
        &f,
        Some("the wood should be smooth"),
    )
    .unwrap();
    let z = global_normalized(&mut g, &m.s, &m.heads.g_beta_enc, f.last()).unwrap();
    let pz = m.heads.psi_proj.forward(&mut g, &m.s, z).unwrap();
    assert_eq!(g.value(t).data(), g.value(pz).data());
}

#[test]
fn pbsd_gradient_reaches_only_the_text_branch() {
    let mut m = mllm();
    let bb = Backbone::new(&mut m.s, 9, &BackboneConfig { width: 5 }).unwrap();
    let img = random(&[16, 16, 3], 6);
    let queue = toy_queue(4, 7);
    let theta = unit_rows(4, 16, 8);
    let boxes = sample_patch_boxes(16, 16, 3, 0.25, 0.5, 9).unwrap();

    let mut g = Graph::new();
    let x = g.constant(img.clone()).unwrap();
    let f = bb.forward(&mut g, &m.s, x).unwrap();
    let v = patch_embed_visual(&mut g, &m.s, &m.heads, &f, &boxes, 16, 16).unwrap();
    let zq = g.constant(unit_rows(4, 5, 10)).unwrap();
    let p = similarity(&mut g, v, zq, 0.1).unwrap();
    let tv = patch_tokens_llm(&mut g, &m.s, &img, &boxes, &m.enc, &m.proj).unwrap();
    let th = g.constant(theta).unwrap();
    let q = similarity(&mut g, tv, th, 0.1).unwrap();
    let l = pbsd_loss(&mut g, p, q, &queue.positives()).unwrap();
    g.backward(l).unwrap();
    assert!(g.grad(zq).is_none() && g.grad(th).is_none());
    m.s.zero_grad();
    g.accumulate_param_grads(&mut m.s);
    for prefix in ["bb.", "dssl.g_alpha", "dssl.g_beta"] {
        assert_eq!(m.s.grad_norm_sq(prefix), 0.0, "{prefix}");
    }
    assert!(m.s.grad_norm_sq("ltc.") > 0.0);
    assert!(m.s.grad_norm_sq("enc.") > 0.0);
}
