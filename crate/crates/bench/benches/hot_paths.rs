//! Benchmarks for the paths that dominate experiment wall time: rollout
//! sampling, response-gradient accumulation, feature extraction, probe
//! refits, exact covariance enumeration, and a full training step.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use poise_bench::{arith_fixture, bandit_fixture};
use poise_core::env::sample_prompt;
use poise_core::features::{extract_features, FeatureConfig};
use poise_core::policy::{logprob_grad, sample_rollout};
use poise_core::probe::{ProbeModel, ValueExample};
use poise_core::rng;
use poise_core::trainer::{run_training, Method, TrainConfig};
use poise_core::variance_lab::exact_sigma;

fn bench_rollout_sampling(c: &mut Criterion) {
    let (spec, pcfg, params) = arith_fixture();
    let max_len = spec.max_rollout_len();
    c.bench_function("sample_rollout_arith", |b| {
        let mut i = 0u64;
        b.iter(|| {
            let mut prompt_rng = rng::stream(1, rng::tag::PROMPT, i, 0);
            let prompt = sample_prompt(&spec, &mut prompt_rng);
            let mut rollout_rng = rng::stream(1, rng::tag::ROLLOUT, i, 0);
            i = (i + 1) % (1 << 20);
            black_box(sample_rollout(&params, &pcfg, &spec, &prompt, max_len, &mut rollout_rng))
        })
    });
}

fn bench_logprob_grad(c: &mut Criterion) {
    let (spec, pcfg, params) = arith_fixture();
    let mut prompt_rng = rng::stream(2, rng::tag::PROMPT, 0, 0);
    let prompt = sample_prompt(&spec, &mut prompt_rng);
    let mut rollout_rng = rng::stream(2, rng::tag::ROLLOUT, 0, 0);
    let record = sample_rollout(&params, &pcfg, &spec, &prompt, spec.max_rollout_len(), &mut rollout_rng)
        .expect("rollout samples");
    c.bench_function("logprob_grad_one_rollout", |b| {
        b.iter(|| black_box(logprob_grad(&params, &pcfg, &record.prompt.tokens, &record.generated)))
    });
}

fn bench_feature_extraction(c: &mut Criterion) {
    let (spec, pcfg, params) = arith_fixture();
    let fcfg = FeatureConfig::default_for_layers(pcfg.num_layers);
    let mut prompt_rng = rng::stream(3, rng::tag::PROMPT, 0, 0);
    let prompt = sample_prompt(&spec, &mut prompt_rng);
    let mut rollout_rng = rng::stream(3, rng::tag::ROLLOUT, 0, 0);
    let record = sample_rollout(&params, &pcfg, &spec, &prompt, spec.max_rollout_len(), &mut rollout_rng)
        .expect("rollout samples");
    c.bench_function("extract_features", |b| {
        b.iter(|| black_box(extract_features(&record, &fcfg)))
    });
}

fn bench_probe_fit(c: &mut Criterion) {
    // Window-sized refit at the default feature dimension.
    let dim = 67;
    let examples: Vec<ValueExample> = (0..1280)
        .map(|i| {
            let values: Vec<f64> = (0..dim)
                .map(|j| ((i * dim + j) as f64 * 0.37).sin())
                .collect();
            let target = 0.5 + 0.4 * ((i as f64) * 0.11).sin();
            ValueExample::new(values, target, 0).expect("valid example")
        })
        .collect();
    c.bench_function("probe_fit_1280x67", |b| {
        b.iter(|| black_box(ProbeModel::fit(&examples, 0.01)))
    });
}

fn bench_exact_sigma(c: &mut Criterion) {
    let (spec, pcfg, params) = bandit_fixture(6, 6);
    let zero = |_: usize, _: usize| 0.0;
    c.bench_function("exact_sigma_6x6", |b| {
        b.iter(|| black_box(exact_sigma(&params, &pcfg, &spec, &zero)))
    });
}

fn bench_training_step(c: &mut Criterion) {
    let (spec, _, _) = arith_fixture();
    let pcfg = poise_core::policy::PolicyConfig::for_vocab(spec.vocab_size, 7);
    let fcfg = FeatureConfig::default_for_layers(pcfg.num_layers);
    let mut cfg = TrainConfig::defaults(Method::Poise);
    cfg.prompts_per_batch = 16;
    cfg.steps = 1;
    c.bench_function("training_step_poise_m16", |b| {
        b.iter(|| black_box(run_training(&spec, &pcfg, &fcfg, &cfg, None)))
    });
}

criterion_group!(
    benches,
    bench_rollout_sampling,
    bench_logprob_grad,
    bench_feature_extraction,
    bench_probe_fit,
    bench_exact_sigma,
    bench_training_step
);
criterion_main!(benches);
