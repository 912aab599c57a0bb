use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use distl_core::distill::{distl_step, positive_scores, Checkpoint, DistillConfig};
use distl_core::model::{build_model, forward, ModelSpec};
use distl_core::par::Execution;
use distl_core::pipeline::ImageTensor;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn toy_spec() -> ModelSpec {
    ModelSpec {
        input_side: 32,
        patch_side: 4,
        depth: 2,
        heads: 2,
        embed_dim: 32,
        num_classes: 2,
        proj_dim: 64,
        head_hidden: 64,
        bottleneck_dim: 32,
        mlp_ratio: 2,
    }
}

fn images(n: usize, rng: &mut ChaCha8Rng) -> Vec<ImageTensor> {
    (0..n)
        .map(|_| ImageTensor(Array2::from_shape_fn((32, 32), |_| rng.random::<f64>())))
        .collect()
}

fn bench_forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = build_model(&toy_spec(), &mut rng).unwrap();
    let batch = images(32, &mut rng);
    let refs: Vec<&ImageTensor> = batch.iter().collect();
    let mut group = c.benchmark_group("forward_32");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| forward(&params, &batch, exec).unwrap())
        });
    }
    group.finish();
    let mut group = c.benchmark_group("scores_32");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| positive_scores(&params, &refs, exec).unwrap())
        });
    }
    group.finish();
}

fn bench_distl_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = build_model(&toy_spec(), &mut rng).unwrap();
    let batch = images(16, &mut rng);
    let refs: Vec<&ImageTensor> = batch.iter().collect();
    let mut group = c.benchmark_group("distl_step_16");
    group.sample_size(10);
    for (name, exec) in MODES {
        let cfg = DistillConfig {
            local_crops: 2,
            execution: exec,
            ..DistillConfig::default()
        };
        let ckpt = Checkpoint::new(params.clone(), ChaCha8Rng::seed_from_u64(3));
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter_batched(
                || ckpt.clone(),
                |mut ck| distl_step(&mut ck, &refs, &cfg, 1e-4, 0.996).unwrap(),
                criterion::BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, bench_forward, bench_distl_step);
criterion_main!(benches);
