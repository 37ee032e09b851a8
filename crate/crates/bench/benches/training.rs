use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use ldam_bench::{batch, benchmark_data, logits, model};
use ldam_core::data::ClassCounts;
use ldam_core::experiment::ExperimentConfig;
use ldam_core::losses::{batch_loss, compute_ldam_margins, LossFn};
use ldam_core::schedule::{run_deferred_training, RebalanceMode};

fn losses(c: &mut Criterion) {
    let (z, y) = logits(128, 10);
    let w = vec![1.0; y.len()];
    let counts = ClassCounts::new((0..10).map(|j| 5000 >> (j / 2)).collect()).unwrap();
    let margins = compute_ldam_margins(&counts, 0.5, 0.25).unwrap().scaled(10.0);
    let fns = [
        ("batch_loss/cross_entropy", LossFn::CrossEntropy),
        ("batch_loss/ldam_softmax", LossFn::MarginSoftmax(margins.clone())),
        ("batch_loss/ldam_hinge", LossFn::MarginHinge(margins)),
        ("batch_loss/focal", LossFn::Focal { gamma: 1.0 }),
    ];
    for (name, f) in &fns {
        c.bench_function(name, |b| b.iter(|| batch_loss(f, black_box(z.view()), &y, &w).unwrap()));
    }
}

fn forward_backward(c: &mut Criterion) {
    let (x, y) = batch(128, 32, 10);
    let w = vec![1.0; y.len()];
    for hidden in [0, 64] {
        let m = model(32, 10, hidden);
        c.bench_function(&format!("forward_backward/hidden_{hidden}"), |b| {
            b.iter(|| {
                let (z, cache) = m.forward(black_box(x.view())).unwrap();
                let (_, g) = batch_loss(&LossFn::CrossEntropy, z.view(), &y, &w).unwrap();
                m.backward(&cache, g.view())
            })
        });
    }
}

fn training_epoch(c: &mut Criterion) {
    let (train, val) = benchmark_data();
    let mut cfg = ExperimentConfig::benchmark();
    cfg.schedule.epochs = 1;
    cfg.schedule.stage_boundary = Some(1);
    cfg.rebalance.mode = RebalanceMode::Always;
    let plan = cfg.plan();
    let schedule = cfg.lr_schedule();
    let init = model(train.dim(), train.k, 0);
    let mut group = c.benchmark_group("epoch");
    group.sample_size(20);
    group.bench_function("ldam_drw_benchmark", |b| {
        b.iter_batched(
            || init.clone(),
            |m| run_deferred_training(&plan, &train, &val, m, &schedule).unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, losses, forward_backward, training_epoch);
criterion_main!(benches);
