//! Criterion benchmarks for the hot paths: full forward pass, window
//! attention, convolution and grid sampling.

use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::{Array4, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use lgca::config::Config;
use lgca::lca::{ContextMode, LcaStage, StageSpec};
use lgca::model::SegModel;
use lgca::nn::{Bindings, Registry};
use lgca::tensor::{Arr, FactorLayout, Tape};

fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
    Arr::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
}

fn desk_model() -> SegModel {
    let cfg = Config::desk();
    SegModel::new(&cfg).unwrap()
}

fn bench_forward(c: &mut Criterion) {
    let model = desk_model();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let images = Array4::from_shape_fn((1, 3, 128, 128), |_| rng.random_range(0.0..1.0));
    c.bench_function("model_forward_128px", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let out = model.forward(&tape, black_box(&images)).unwrap();
            black_box(out.logits.value());
        })
    });
}

fn bench_forward_backward(c: &mut Criterion) {
    let model = desk_model();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let images = Array4::from_shape_fn((1, 3, 128, 128), |_| rng.random_range(0.0..1.0));
    let masks = ndarray::Array3::<i64>::from_shape_fn((1, 128, 128), |_| rng.random_range(0..4));
    c.bench_function("model_forward_backward_128px", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let out = model.forward(&tape, black_box(&images)).unwrap();
            let loss = lgca::loss::total_loss(
                &out.logits,
                &out.aux,
                &masks,
                lgca::loss::LossWeights::new(1.0, 0.8).unwrap(),
            )
            .unwrap();
            tape.backward(&loss);
            black_box(loss.scalar());
        })
    });
}

fn bench_window_attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut reg = Registry::new();
    let stage = LcaStage::new(
        &mut reg,
        "bench",
        StageSpec {
            mode: ContextMode::LocalGlobal,
            channels: 64,
            value_in: 96,
            classes: 4,
            heads: 8,
            patches: (4, 4),
            atb: Some(FactorLayout::new(true, true, true)),
            atb_slope: 0.01,
            tie_value_heads: false,
            identity_init: false,
        },
        &mut rng,
    )
    .unwrap();
    let x = rand_arr(&mut rng, &[1, 64, 32, 32]);
    let cg = rand_arr(&mut rng, &[1, 4, 96]);
    c.bench_function("lca_stage_32x32x64", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let mut bind = Bindings::new();
            let xv = tape.leaf(x.clone());
            let cgv = tape.leaf(cg.clone());
            let (out, _) = stage.forward(&xv, Some(&cgv), &mut bind, None).unwrap();
            black_box(out.value());
        })
    });
}

fn bench_conv_and_sampling(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_arr(&mut rng, &[4, 32, 32, 32]);
    let w = rand_arr(&mut rng, &[32, 32, 3, 3]);
    c.bench_function("conv2d_3x3_32ch_32px_b4", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let wv = tape.leaf(w.clone());
            black_box(xv.conv2d(&wv, None, 1, 1).value());
        })
    });
    let plane = rand_arr(&mut rng, &[1, 64, 32, 32]);
    let grid = Arr::from_shape_fn(IxDyn(&[1, 1024, 2]), |_| rng.random_range(0.0..31.0));
    c.bench_function("grid_sample_1k_points_64ch", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let pv = tape.leaf(plane.clone());
            let gv = tape.leaf(grid.clone());
            black_box(pv.grid_sample_points(&gv).value());
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_forward, bench_forward_backward, bench_window_attention, bench_conv_and_sampling
}
criterion_main!(benches);
