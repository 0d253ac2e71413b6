use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hseq_bench::{bench_params, mixed_inputs};
use hseq_core::flow::FlowSchedule;
use hseq_core::infer::generate_latent_sequence;
use hseq_core::layout::compile_mask;
use hseq_core::model::forward_graph;
use hseq_core::numerics::{Tape, Tensor};
use hseq_core::trainer::{train_step, Moments, StepSettings, TrainSchedule};
use hseq_core::worldgen::{build_dataset, Codec, DatasetConfig, ShapeFamily};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn quick() -> Criterion {
    Criterion::default()
        .sample_size(10)
        .warm_up_time(Duration::from_millis(300))
        .measurement_time(Duration::from_millis(1500))
}

fn bench_mask_compile(c: &mut Criterion) {
    let mut group = c.benchmark_group("mask_compile");
    for &(blocks, size) in &[(8usize, 8usize), (8, 64)] {
        let (layout, _) = mixed_inputs(blocks, size);
        let n = layout.total_len();
        group.bench_function(BenchmarkId::from_parameter(format!("{n}_tokens")), |b| {
            b.iter(|| compile_mask(&layout).unwrap())
        });
    }
    group.finish();
}

fn bench_forward(c: &mut Criterion) {
    let params = bench_params(0);
    let mut group = c.benchmark_group("forward_graph");
    for &(blocks, size) in &[(4usize, 8usize), (2, 32)] {
        let (layout, inputs) = mixed_inputs(blocks, size);
        let label = format!("{}x{}", blocks, size);
        group.bench_function(BenchmarkId::from_parameter(label), |b| {
            b.iter(|| {
                let mut tape: Tape<f32> = Tape::new();
                forward_graph(&mut tape, &params, &layout, &inputs, false).unwrap()
            })
        });
    }
    group.finish();
}

fn bench_training_step(c: &mut Criterion) {
    let mut params = bench_params(0);
    let mut moments = Moments::zeros_like(&params);
    let dataset = build_dataset(
        &DatasetConfig {
            families: ShapeFamily::ALL.to_vec(),
            samples_per_family: 2,
            points_per_shape: 16,
            block_size: 8,
            seed: 3,
        },
        &Codec::fixed(),
    )
    .unwrap();
    let schedule = TrainSchedule::default();
    let settings = StepSettings {
        lr: 1e-4,
        dropout_p: 0.1,
        caption_fraction: 0.5,
        flow: schedule.flow,
        optimizer: schedule.optimizer,
        clip_norm: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);

    let mut group = c.benchmark_group("train");
    group.bench_function("step_batch2", |b| {
        b.iter(|| {
            train_step(&mut params, &mut moments, &dataset[..2], &settings, &mut rng).unwrap()
        })
    });
    group.finish();
}

fn bench_block_decode(c: &mut Criterion) {
    let params = bench_params(0);
    let schedule = FlowSchedule { num_steps: 4, cfg_scale: 1.0, ..FlowSchedule::default() };
    let total = 32usize;

    let mut group = c.benchmark_group("block_decode");
    for &block in &[1usize, 8, 32] {
        group.bench_function(BenchmarkId::from_parameter(format!("b{block}")), |b| {
            b.iter(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(1);
                generate_latent_sequence(
                    &params,
                    None,
                    total / block,
                    block,
                    &schedule,
                    &mut rng,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for &n in &[64usize, 128] {
        let a = Tensor::<f32>::full(&[n, n], 0.5);
        let bm = Tensor::<f32>::full(&[n, n], 0.25);
        group.bench_function(BenchmarkId::from_parameter(format!("{n}x{n}")), |bch| {
            bch.iter(|| {
                let mut tape: Tape<f32> = Tape::new();
                let ia = tape.leaf(a.clone());
                let ib = tape.leaf(bm.clone());
                let out = tape.matmul(ia, ib).unwrap();
                tape.value(out).data()[0]
            })
        });
    }
    group.finish();
}

fn benches(c: &mut Criterion) {
    bench_mask_compile(c);
    bench_forward(c);
    bench_training_step(c);
    bench_block_decode(c);
    bench_matmul(c);
}

criterion_group! {
    name = engine;
    config = quick();
    targets = benches
}
criterion_main!(engine);
