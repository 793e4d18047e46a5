use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use segxal_core::dataset::SyntheticBenchmark;
use segxal_core::ebu::entropy_map;
use segxal_core::eem::fuse;
use segxal_core::metrics::compute_metrics;
use segxal_core::model::{train, ModelConfig, UNet};
use segxal_core::pae::{prox_gradcam, DepthProvider, PaeOptions};
use segxal_core::par::Execution;
use segxal_core::types::Sample;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn data() -> Vec<Sample> {
    SyntheticBenchmark {
        n_train: 16,
        n_val: 0,
        width: 64,
        height: 32,
        ..SyntheticBenchmark::default()
    }
    .generate()
    .unwrap()
    .0
}

fn model() -> UNet<f32> {
    UNet::new(ModelConfig {
        levels: 2,
        base_channels: 8,
        ..ModelConfig::desk(5, 32, 64)
    })
    .unwrap()
}

fn training(c: &mut Criterion) {
    let samples = data();
    let pairs: Vec<_> = samples.iter().map(|s| (&s.image, s.gt.as_ref().unwrap())).collect();
    let mut g = c.benchmark_group("train_one_epoch");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter_batched(model, |mut m| train(&mut m, &pairs, 1, 7, exec).unwrap(), criterion::BatchSize::LargeInput)
        });
    }
    g.finish();
}

fn evaluation(c: &mut Criterion) {
    let samples = data();
    let m = model();
    let mut g = c.benchmark_group("evaluate");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| compute_metrics(&m, &samples, exec).unwrap()));
    }
    g.finish();
}

fn explanation(c: &mut Criterion) {
    let samples = data();
    let m = model();
    let provider = DepthProvider::synthetic();
    let opts = PaeOptions::default();
    let mut g = c.benchmark_group("explanation_maps");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                exec.map(&samples, |s| {
                    let (ent, _) = entropy_map(&m.predict_probs(&s.image).unwrap(), None).unwrap();
                    let prox = prox_gradcam(&m, s, &provider, 0.5, &opts).unwrap();
                    fuse(&prox.map, &ent, 0.5, 0.5).unwrap()
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, training, evaluation, explanation);
criterion_main!(benches);
