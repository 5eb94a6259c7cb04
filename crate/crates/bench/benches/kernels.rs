use criterion::{criterion_group, criterion_main, Criterion};
use relvox_bench::{fixture_net, fixture_volumes};
use relvox_core::attribution::{canonize, lrp_backward, Anchor, RuleConfig};
use relvox_core::graph::Tape;
use relvox_core::net::{forward, forward_tape, BnMode, NetworkSpec};
use relvox_core::ops::{conv3d, PadMode};
use relvox_core::stats::auc;
use relvox_core::Tensor;

fn bench_conv3d(c: &mut Criterion) {
    let x = Tensor::<f32>::from_fn(vec![16, 16, 16, 16], |i| (i % 97) as f32 / 97.0);
    let w = Tensor::<f32>::from_fn(vec![4, 16, 3, 3, 3], |i| ((i % 13) as f32 - 6.0) / 13.0);
    c.bench_function("conv3d 16ch 16^3 k3 replicate", |b| {
        b.iter(|| conv3d(&x, &w, None, [1, 1, 1], [1, 1, 1], PadMode::Replicate).unwrap())
    });
}

fn bench_forward(c: &mut Criterion) {
    let spec = NetworkSpec::micro();
    let params = fixture_net(&spec);
    let vols = fixture_volumes(&spec, 3);
    c.bench_function("micro-net traced forward", |b| {
        b.iter(|| forward(&params, &vols, 50.0).unwrap())
    });
    c.bench_function("micro-net train step (tape fwd+bwd)", |b| {
        b.iter(|| {
            let mut tape = Tape::<f32>::new();
            let refs =
                forward_tape(&mut tape, &params, &vols, 50.0, BnMode::Train, true).unwrap();
            let loss = tape.bce_logit(refs.logit, true, 1.5).unwrap();
            tape.backward(loss).unwrap();
        })
    });
}

fn bench_lrp(c: &mut Criterion) {
    let spec = NetworkSpec::micro();
    let params = canonize(&fixture_net(&spec)).unwrap();
    let vols = fixture_volumes(&spec, 5);
    let out = forward(&params, &vols, 50.0).unwrap();
    let rules = RuleConfig::default();
    c.bench_function("micro-net relevance pass (logit anchor)", |b| {
        b.iter(|| lrp_backward(&out.trace, &params, Anchor::Logit, &rules).unwrap())
    });
}

fn bench_auc(c: &mut Criterion) {
    let scores: Vec<f64> = (0..2000).map(|i| ((i * 37) % 101) as f64 / 101.0).collect();
    let labels: Vec<bool> = (0..2000).map(|i| i % 3 == 0).collect();
    c.bench_function("auc 2000 scores with ties", |b| {
        b.iter(|| auc(&scores, &labels).unwrap())
    });
}

criterion_group!(benches, bench_conv3d, bench_forward, bench_lrp, bench_auc);
criterion_main!(benches);
