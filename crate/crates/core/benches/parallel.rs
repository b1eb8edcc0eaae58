use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use xdvmr_core::eval::{evaluate, EvalConfig};
use xdvmr_core::gradsuite::{run_suite, SuiteOptions};
use xdvmr_core::synth::{generate_with_latents, GenConfig};
use xdvmr_core::{Execution, ModelConfig, ModelParams};

fn modes() -> Vec<(&'static str, Execution)> {
    let mut m = vec![("sequential", Execution::Sequential)];
    #[cfg(feature = "parallel")]
    m.push(("parallel", Execution::Parallel));
    m
}

fn generation(c: &mut Criterion) {
    let config = GenConfig::default();
    let mut group = c.benchmark_group("generate");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| generate_with_latents(&config, exec).unwrap())
        });
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let config = GenConfig::default();
    let data = generate_with_latents(&config, Execution::Sequential).unwrap();
    let model = ModelParams::new(ModelConfig {
        vocab_size: config.vocab_size(),
        ..ModelConfig::default()
    })
    .unwrap();
    let eval = EvalConfig::default();
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| evaluate(&data.target, &model, &eval, exec).unwrap())
        });
    }
    group.finish();
}

fn grad_suite(c: &mut Criterion) {
    let mut group = c.benchmark_group("grad_suite");
    group.sample_size(10);
    for (name, exec) in modes() {
        let opts = SuiteOptions {
            instances: 5,
            exec,
            ..SuiteOptions::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(name), &opts, |b, opts| {
            b.iter(|| run_suite(opts).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, generation, evaluation, grad_suite);
criterion_main!(benches);
