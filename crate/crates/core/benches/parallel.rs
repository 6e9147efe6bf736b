use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use wrtsam::metrics::MetricsReport;
use wrtsam::model::{forward, ModelConfig, ModelState, Stage};
use wrtsam::synth::{generate_sample, ScenarioSpec};
use wrtsam::train::example_gradients;
use wrtsam::Execution;

const PATHS: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn setup() -> (ModelConfig, ModelState, Vec<wrtsam::synth::Sample>) {
    let cfg = ModelConfig::default();
    let mut state = ModelState::init(&cfg, 7).unwrap();
    state.set_stage(Stage::Adapt, &cfg);
    let spec = ScenarioSpec::preset("scenario-b").unwrap();
    let samples = (0..8).map(|i| generate_sample(&spec, i).unwrap()).collect();
    (cfg, state, samples)
}

fn batch_gradients(c: &mut Criterion) {
    let (cfg, state, samples) = setup();
    let mut group = c.benchmark_group("batch_gradients_4");
    group.sample_size(10);
    for (name, exec) in PATHS {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| exec.try_map_range(4, |i| example_gradients(&state, &cfg, &samples[i].image, &samples[i].mask)).unwrap())
        });
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let (cfg, state, samples) = setup();
    let mut group = c.benchmark_group("forward_and_metrics_8");
    group.sample_size(10);
    for (name, exec) in PATHS {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let probs = exec.try_map_range(samples.len(), |i| forward(&samples[i].image, &state, &cfg)).unwrap();
                let probs: Vec<_> = probs.into_iter().map(|l| l.map(wrtsam::tensor_core::sigmoid)).collect();
                let gts: Vec<_> = samples.iter().map(|s| s.mask.clone()).collect();
                black_box(MetricsReport::from_predictions(&probs, &gts, 0.5, exec).unwrap())
            })
        });
    }
    group.finish();
}

fn synthesis(c: &mut Criterion) {
    let spec = ScenarioSpec::preset("wide-640").unwrap();
    let mut group = c.benchmark_group("synth_wide_16");
    group.sample_size(10);
    for (name, exec) in PATHS {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| exec.try_map_range(16, |i| generate_sample(&spec, i as u64)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, batch_gradients, evaluation, synthesis);
criterion_main!(benches);
