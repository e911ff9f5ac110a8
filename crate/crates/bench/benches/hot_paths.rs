//! Benchmarks for the numeric hot paths: the convolution kernel, the dense
//! matvec, and whole model steps (inference-only and with backward).

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use aissm_core::event::EventFrame;
use aissm_core::model::{Model, ModelConfig, ModelKind};
use aissm_core::tape::{SampleMode, Tape};

fn random_frame(rng: &mut ChaCha8Rng, w: usize, h: usize, n: usize) -> EventFrame {
    let mut f = EventFrame::empty(w, h, 0, 50_000);
    for _ in 0..n {
        let x = rng.random_range(0..w) as u16;
        let y = rng.random_range(0..h) as u16;
        f.bump(x, y);
    }
    f
}

/// First trunk convolution at the default sensor: 1 -> 8 channels over
/// 160x120, stride 2.
fn bench_conv2d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x_data: Vec<f64> = (0..120 * 160).map(|_| rng.random()).collect();
    let w_data: Vec<f64> = (0..8 * 9).map(|_| rng.random::<f64>() - 0.5).collect();
    c.bench_function("conv2d_160x120_1to8_s2", |b| {
        b.iter(|| {
            let mut t = Tape::new();
            let x = t.constant(vec![1, 120, 160], x_data.clone());
            let w = t.constant(vec![8, 1, 3, 3], w_data.clone());
            let bias = t.constant(vec![8], vec![0.0; 8]);
            let y = t.conv2d(x, w, bias, 2, 1).unwrap();
            black_box(t.value(y)[0])
        })
    });
}

/// The widest dense layer of the default encoder: 2560 -> 128.
fn bench_matvec(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w_data: Vec<f64> = (0..128 * 2560).map(|_| rng.random::<f64>() - 0.5).collect();
    let x_data: Vec<f64> = (0..2560).map(|_| rng.random()).collect();
    c.bench_function("matvec_2560to128", |b| {
        b.iter(|| {
            let mut t = Tape::new();
            let w = t.constant(vec![128, 2560], w_data.clone());
            let x = t.constant(vec![2560], x_data.clone());
            let y = t.matvec(w, x).unwrap();
            black_box(t.value(y)[0])
        })
    });
}

/// One inference step of the default ~500k-parameter model on a 160x120
/// frame: build tape, run every sub-network, read the prediction.
fn bench_infer_step(c: &mut Criterion) {
    let cfg = ModelConfig::default_for(ModelKind::Aissm);
    let model = Model::new(ModelKind::Aissm, cfg, 160, 120, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let frame = random_frame(&mut rng, 160, 120, 1200);
    let carried = model.zero_carried();
    let mut group = c.benchmark_group("model");
    group.sample_size(20);
    group.bench_function("infer_step_160x120", |b| {
        b.iter(|| {
            let mut r = ChaCha8Rng::seed_from_u64(0);
            black_box(
                model
                    .infer_frame(&frame, &carried, SampleMode::Argmax, &mut r)
                    .unwrap()
                    .0,
            )
        })
    });
    group.finish();
}

/// One training step (forward + backward through the task loss) of the
/// small-sensor ~500k configuration used for end-to-end experiments.
fn bench_train_step(c: &mut Criterion) {
    let cfg = ModelConfig {
        conv_channels: vec![4, 8, 16, 16],
        mlp_widths: vec![700],
        ..ModelConfig::default_for(ModelKind::Aissm)
    };
    let model = Model::new(ModelKind::Aissm, cfg, 80, 60, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let frame = random_frame(&mut rng, 80, 60, 500);
    let latent = model.cfg.latent_dim();
    let d_r = model.cfg.d_r;
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    group.bench_function("train_step_80x60", |b| {
        b.iter(|| {
            let mut t = Tape::new();
            let bind = model.bind(&mut t).unwrap();
            let x = t.constant(vec![1, 60, 80], frame.binary_plane());
            let s = t.constant(vec![latent], vec![0.0; latent]);
            let h = t.constant(vec![d_r], vec![0.0; d_r]);
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let out = model
                .step(&mut t, &bind, x, Some(s), Some(h), SampleMode::Stochastic, &mut r)
                .unwrap();
            let loss = t.huber_sum(out.pred, &[0.4, 0.6], 1.0).unwrap();
            let grads = t.backward(loss).unwrap();
            black_box(t.param_grads(&grads).len())
        })
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_conv2d,
    bench_matvec,
    bench_infer_step,
    bench_train_step
);
criterion_main!(benches);
