//! Shared fixtures for the benchmarks: one arithmetic task and one
//! enumerable bandit, each with a matching policy at the default
//! desk-scale shape.

use poise_core::env::TaskSpec;
use poise_core::policy::{init_params, PolicyConfig, PolicyParams};

pub fn arith_fixture() -> (TaskSpec, PolicyConfig, PolicyParams) {
    let spec = TaskSpec::mod_arith_default(7);
    let pcfg = PolicyConfig::for_vocab(spec.vocab_size, 7);
    let params = init_params(&pcfg);
    (spec, pcfg, params)
}

pub fn bandit_fixture(contexts: usize, actions: usize) -> (TaskSpec, PolicyConfig, PolicyParams) {
    let spec = TaskSpec::table_bandit(contexts, actions, 0.5, 13).expect("valid bandit");
    let pcfg = PolicyConfig {
        vocab_size: spec.vocab_size,
        embed_dim: 8,
        hidden_dim: 16,
        num_layers: 1,
        seed: 13,
    };
    let params = init_params(&pcfg);
    (spec, pcfg, params)
}
