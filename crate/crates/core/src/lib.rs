//! Desk-scale laboratory for probe-baselined policy-gradient training on
//! synthetic verifiable-reward tasks.
//!
//! The crate has two halves. The training half implements a tiny recurrent
//! policy, binary-reward environments, an internal-state value probe fitted
//! by ridge regression, and four advantage estimators (no baseline, group
//! mean, group z-score with resampling, and cross-rollout probe baselines)
//! driven by a clipped-surrogate update loop. The analysis half enumerates
//! small bandit instances exactly to check estimator bias and the
//! within/between decomposition of gradient-estimator covariance against
//! Monte-Carlo measurements.

pub mod env;
pub mod error;
pub mod estimators;
pub mod features;
pub mod metrics;
pub mod numerics;
pub mod policy;
pub mod probe;
pub mod rng;
pub mod trainer;
pub mod variance_lab;

pub use env::{enumerate_outcomes, sample_prompt, verify, PromptInstance, TaskFamily, TaskSpec, Token};
pub use error::{CoreError, Result};
pub use estimators::{
    critic_fit, critic_predict, cross_rollout_advantage, dapo_lite_advantage, grpo_baseline,
    reinforce_advantage, self_rollout_advantage, AdvantageBatch, AdvantageEntry, CriticConfig,
    CriticModel, DapoOutcome, EstimatorKind,
};
pub use features::{extract_features, feature_dim, FeatureConfig, FeatureMask, FeatureVector};
pub use metrics::{avg_at_k, mae, pearson, variance_reduction_ratio};
pub use policy::{
    entropy_stats, forward_logits, init_params, logprob_grad, sample_rollout, EntropyStats,
    HiddenTrace, PolicyConfig, PolicyParams, RolloutRecord,
};
pub use probe::{loo_target, probe_eval, ProbeEvalReport, ProbeModel, ValueBuffer, ValueExample};
pub use trainer::{run_training, LossNorm, Method, StepReport, TrainConfig, TrainRun};
pub use variance_lab::{allocation_sweep, bias_probe, empirical_cov, exact_sigma, AllocationRow, BiasMode, BiasReport, EmpiricalCov, SigmaPair};
