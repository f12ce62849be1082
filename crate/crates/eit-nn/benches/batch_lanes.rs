//! Batched-graph inference and training-step benchmarks: one wide graph per
//! batch (single GEMM per convolution) against the per-sample loop it
//! replaced. Run alongside the eit-core lane suite when profiling.

use criterion::{criterion_group, criterion_main, Criterion};
use eit_nn::graph::Graph;
use eit_nn::resnet::{InputMode, ResNetConfig, ResNetModel};
use eit_nn::tensor::Tensor;
use eit_nn::unet::{UnetConfig, UnetModel};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.gen::<f64>() - 0.5).collect()).unwrap()
}

fn bench_resnet_step(c: &mut Criterion) {
    let config = ResNetConfig {
        image_size: 32,
        base_channels: 8,
        n_res_blocks: 8,
        n_down_blocks: 2,
        input_mode: InputMode::InitialGuess,
    };
    let model = ResNetModel::new(config, 3).unwrap();
    let batch = random_tensor(&[8, 1, 32, 32], 1);
    let target = random_tensor(&[8, 1, 32, 32], 2);
    let mut group = c.benchmark_group("resnet_fwd_bwd");
    group.bench_function("batched_8", |b| {
        b.iter(|| {
            let mut g = Graph::new(&model.store);
            let x = g.input(batch.clone());
            let y = model.forward(&mut g, x).unwrap();
            let t = g.input(target.clone());
            let loss = g.mse_loss(y, t).unwrap();
            g.backward(loss).unwrap()
        })
    });
    group.bench_function("per_sample_8", |b| {
        b.iter(|| {
            for i in 0..8 {
                let mut g = Graph::new(&model.store);
                let x = g.input(
                    Tensor::from_vec(
                        &[1, 1, 32, 32],
                        batch.data()[i * 1024..(i + 1) * 1024].to_vec(),
                    )
                    .unwrap(),
                );
                let y = model.forward(&mut g, x).unwrap();
                let t = g.input(
                    Tensor::from_vec(
                        &[1, 1, 32, 32],
                        target.data()[i * 1024..(i + 1) * 1024].to_vec(),
                    )
                    .unwrap(),
                );
                let loss = g.mse_loss(y, t).unwrap();
                g.backward(loss).unwrap();
            }
        })
    });
    group.finish();
}

fn bench_unet_forward(c: &mut Criterion) {
    let config = UnetConfig {
        image_size: 32,
        in_channels: 2,
        base_channels: 12,
        channel_mults: vec![1, 2, 2],
        blocks_per_level: 1,
        time_embed_dim: 64,
    };
    let model = UnetModel::new(config, 5).unwrap();
    let batch = random_tensor(&[10, 2, 32, 32], 9);
    c.bench_function("unet_forward/batched_10", |b| {
        b.iter(|| model.predict(&batch, &[40; 10]).unwrap())
    });
}

criterion_group! {
    name = batches;
    config = Criterion::default().sample_size(10);
    targets = bench_resnet_step, bench_unet_forward
}
criterion_main!(batches);
