use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;
use tep_core::metrics::roc_auc;
use tep_core::nets::layers::attention;
use tep_core::nets::{tep_forward, ModelParams, Mode, Net, NetConfig, TepConfig};
use tep_core::rng::named_rng;
use tep_core::shapley::{shapley_values, ShapleyGame};
use tep_core::tensor::{Tape, Tensor};

fn matmul(c: &mut Criterion) {
    let mut rng = named_rng(0, "bench-matmul");
    let mut group = c.benchmark_group("matmul");
    for n in [32, 128, 256] {
        let x = Tensor::randn(&[n, n], &mut rng);
        let w = Tensor::randn(&[n, n], &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| {
                let mut tape = Tape::new();
                let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
                black_box(tape.matmul(xv, wv).unwrap());
            })
        });
    }
    group.finish();
}

fn attention_fwd_bwd(c: &mut Criterion) {
    let mut rng = named_rng(1, "bench-attention");
    let (batch, steps, width) = (64, 12, 18);
    let q = Tensor::randn(&[batch, steps, width], &mut rng);
    let k = Tensor::randn(&[batch, steps, width], &mut rng);
    let v = Tensor::randn(&[batch, steps, width], &mut rng);
    c.bench_function("attention forward+backward 64x12x18", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let (qv, kv, vv) = (tape.variable(q.clone()), tape.variable(k.clone()), tape.variable(v.clone()));
            let (_, out) = attention(&mut tape, qv, kv, vv).unwrap();
            let loss = tape.sum(out).unwrap();
            black_box(tape.backward(loss).unwrap());
        })
    });
}

fn tep_panel(c: &mut Criterion) {
    let mut rng = named_rng(2, "bench-tep");
    let config = NetConfig::Tep(TepConfig { model_size: 72, layers: 2, heads: 4, ..TepConfig::default() });
    let params = ModelParams::init(Net::new(config, 12, 10).unwrap(), &mut rng).unwrap();
    let panel = Tensor::randn(&[12, 10], &mut rng);
    c.bench_function("tep forward 12x10 panel", |b| b.iter(|| black_box(tep_forward(&panel, &params, Mode::Eval).unwrap())));
}

fn auc(c: &mut Criterion) {
    let mut rng = named_rng(3, "bench-auc");
    let n = 100_000;
    let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.05)).collect();
    c.bench_function("roc_auc n=100000", |b| b.iter(|| black_box(roc_auc(&scores, &labels).unwrap())));
}

fn shapley(c: &mut Criterion) {
    let mut rng = named_rng(4, "bench-shapley");
    let mut group = c.benchmark_group("shapley_values");
    for players in [4usize, 8, 12] {
        let table: Vec<f64> = (0..1usize << players).map(|_| rng.random::<f64>()).collect();
        let game = ShapleyGame::from_fn((0..players).map(|i| format!("g{i}")).collect(), |m| table[m as usize]).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(players), &game, |b, g| b.iter(|| black_box(shapley_values(g).unwrap())));
    }
    group.finish();
}

criterion_group!(benches, matmul, attention_fwd_bwd, tep_panel, auc, shapley);
criterion_main!(benches);
