//! Parallel vs sequential execution of the hot paths: a conv layer forward and
//! backward, and a full training-mode pass of the scaled network.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sarcnet_core::model::{Forward, SarcNetConfig, SarcNetParams};
use sarcnet_core::parallel;
use sarcnet_core::tensor::{Graph, NormMode, Tensor};

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn run<R>(mode: &str, f: impl FnOnce() -> R) -> R {
    if mode == "sequential" {
        parallel::sequential(f)
    } else {
        f()
    }
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = uniform(&mut rng, &[40, 16, 16, 16]);
    let w = uniform(&mut rng, &[16, 16, 3, 3]);
    let mut group = c.benchmark_group("conv3x3_fwd_bwd");
    for mode in ["parallel", "sequential"] {
        group.bench_function(BenchmarkId::from_parameter(mode), |b| {
            b.iter(|| {
                run(mode, || {
                    let mut g = Graph::<f32>::new();
                    let (xv, wv) = (g.param(x.clone()), g.param(w.clone()));
                    let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
                    let l = g.sum(y);
                    g.backward(l).unwrap();
                    g.grad(wv).map(|t| t.data()[0])
                })
            })
        });
    }
    group.finish();
}

fn network(c: &mut Criterion) {
    let cfg = SarcNetConfig::scaled();
    let params = SarcNetParams::<f32>::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = cfg.input_size;
    let images = uniform(&mut rng, &[40, 3, s, s]);
    let feats = uniform(&mut rng, &[40, cfg.feature_dim()]);
    let targets = uniform(&mut rng, &[40, 1]);
    let mut group = c.benchmark_group("network_train_pass");
    group.sample_size(10);
    for mode in ["parallel", "sequential"] {
        group.bench_function(BenchmarkId::from_parameter(mode), |b| {
            b.iter(|| {
                run(mode, || {
                    let mut g = Graph::<f32>::new();
                    let bound = params.bind(&mut g, true);
                    let (x, f, y) = (
                        g.constant(images.clone()),
                        g.constant(feats.clone()),
                        g.constant(targets.clone()),
                    );
                    let mut fwd = Forward::new(&params, &bound, NormMode::Train);
                    let out = fwd.sarcnet(&mut g, x, f).unwrap();
                    let loss = g.mse_loss(out.score, y).unwrap();
                    g.backward(loss).unwrap();
                    g.value(loss).data()[0]
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, conv, network);
criterion_main!(benches);
