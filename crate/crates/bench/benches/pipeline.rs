use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use vmad_bench::{sample, smoke_model};
use vmad_core::pipeline::{Example, Model, ProjectorKind};
use vmad_core::seghead::{total_loss, LossWeights};
use vmad_core::Graph;

fn projectors(c: &mut Criterion) {
    let mut group = c.benchmark_group("projector");
    for (name, kind) in [("ltc", ProjectorKind::Ltc), ("mlp", ProjectorKind::Mlp)] {
        let cfg = smoke_model(kind);
        let (model, store) = Model::build::<f32>(0, &cfg).unwrap();
        let s = sample(cfg.encoder.image_size).unwrap();
        group.bench_function(name, |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let x = g.constant(s.image.clone()).unwrap();
                let (_, tokens) = model.visual_tokens(&mut g, &store, x).unwrap();
                black_box(g.value(tokens).data()[0])
            })
        });
    }
    group.finish();
}

fn training_step(c: &mut Criterion) {
    let cfg = smoke_model(ProjectorKind::Ltc);
    let (model, mut store) = Model::build::<f32>(0, &cfg).unwrap();
    let s = sample(cfg.encoder.image_size).unwrap();
    let w = LossWeights::default();
    let ex = Example {
        image: &s.image,
        mask: &s.mask,
        instruction: &s.instruction,
        answer: &s.answer,
        normal_text: &s.normal_text,
        has_seg: true,
    };
    c.bench_function("step/seg_forward_backward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let parts = model.example_losses(&mut g, &store, &ex, None, &[], &w).unwrap();
            let loss = total_loss(&mut g, &parts, &w).unwrap();
            g.backward(loss).unwrap();
            g.accumulate_param_grads(&mut store);
            store.zero_grad();
        })
    });
}

fn prediction(c: &mut Criterion) {
    let cfg = smoke_model(ProjectorKind::Ltc);
    let (model, store) = Model::build::<f32>(0, &cfg).unwrap();
    let s = sample(cfg.encoder.image_size).unwrap();
    c.bench_function("predict/greedy_16", |b| {
        b.iter(|| {
            black_box(
                model
                    .predict(&store, &s.image, &s.instruction, 16)
                    .unwrap()
                    .answer
                    .len(),
            )
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = projectors, training_step, prediction
}
criterion_main!(benches);
