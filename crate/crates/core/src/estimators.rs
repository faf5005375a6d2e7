//! Advantage estimators: shared-baseline variants over groups of rollouts,
//! the cross-rollout probe baseline, its deliberately biased self-rollout
//! twin, and a small logistic critic used as a learned-value control.

use crate::error::{CoreError, Result};
use crate::features::{extract_features, FeatureConfig};
use crate::numerics::{dot, mean, pairwise_sum, population_std};
use crate::policy::RolloutRecord;
use crate::probe::ProbeModel;

/// Which rule produced an advantage batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    /// No baseline: advantage equals raw reward.
    Reinforce,
    /// Group-mean baseline over sibling rollouts.
    GroupMean,
    /// Group z-score: (reward - mean) / population std.
    GroupZScore,
    /// Probe prediction on the partner rollout's features.
    CrossRollout,
    /// Probe prediction on the rollout's own features (biased control).
    SelfRollout,
}

impl EstimatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::Reinforce => "reinforce",
            EstimatorKind::GroupMean => "group-mean",
            EstimatorKind::GroupZScore => "group-zscore",
            EstimatorKind::CrossRollout => "cross-rollout",
            EstimatorKind::SelfRollout => "self-rollout",
        }
    }
}

/// One rollout's slot in an advantage batch. `rollout` indexes into
/// whatever collection the caller passed in, in the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageEntry {
    pub rollout: usize,
    pub reward: f64,
    pub baseline: f64,
    pub advantage: f64,
}

/// Advantages for one group of rollouts that share a prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageBatch {
    pub estimator: EstimatorKind,
    pub entries: Vec<AdvantageEntry>,
}

impl AdvantageBatch {
    pub fn advantages(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.advantage).collect()
    }

    pub fn baseline_mean(&self) -> f64 {
        mean(&self.entries.iter().map(|e| e.baseline).collect::<Vec<_>>())
    }
}

/// Raw-reward advantages: the no-baseline estimator.
pub fn reinforce_advantage(rewards: &[f64]) -> Result<AdvantageBatch> {
    if rewards.is_empty() {
        return Err(CoreError::EmptyInput("reward group is empty".into()));
    }
    let entries = rewards
        .iter()
        .enumerate()
        .map(|(i, &r)| AdvantageEntry {
            rollout: i,
            reward: r,
            baseline: 0.0,
            advantage: r,
        })
        .collect();
    Ok(AdvantageBatch {
        estimator: EstimatorKind::Reinforce,
        entries,
    })
}

/// Group-mean baseline: every rollout in the group is measured against the
/// mean reward of the whole group, itself included. Advantages sum to zero.
pub fn grpo_baseline(rewards: &[f64]) -> Result<AdvantageBatch> {
    if rewards.len() < 2 {
        return Err(CoreError::InsufficientGroup {
            required: 2,
            got: rewards.len(),
        });
    }
    let b = mean(rewards);
    let entries = rewards
        .iter()
        .enumerate()
        .map(|(i, &r)| AdvantageEntry {
            rollout: i,
            reward: r,
            baseline: b,
            advantage: r - b,
        })
        .collect();
    Ok(AdvantageBatch {
        estimator: EstimatorKind::GroupMean,
        entries,
    })
}

/// Result of the z-score estimator on one group: either a usable batch or a
/// marker that the group had zero reward variance and must be discarded.
#[derive(Debug, Clone, PartialEq)]
pub enum DapoOutcome {
    Advantages(AdvantageBatch),
    /// All rewards in the group were identical; no scale exists.
    Degenerate,
}

/// Group z-score advantages (r - mean) / std with the population std and no
/// epsilon floor. Constant-reward groups come back as [`DapoOutcome::Degenerate`]
/// instead of silently dividing by zero.
pub fn dapo_lite_advantage(rewards: &[f64]) -> Result<DapoOutcome> {
    if rewards.len() < 2 {
        return Err(CoreError::InsufficientGroup {
            required: 2,
            got: rewards.len(),
        });
    }
    let m = mean(rewards);
    let s = population_std(rewards);
    if s == 0.0 {
        return Ok(DapoOutcome::Degenerate);
    }
    let entries = rewards
        .iter()
        .enumerate()
        .map(|(i, &r)| AdvantageEntry {
            rollout: i,
            reward: r,
            baseline: m,
            advantage: (r - m) / s,
        })
        .collect();
    Ok(DapoOutcome::Advantages(AdvantageBatch {
        estimator: EstimatorKind::GroupZScore,
        entries,
    }))
}

/// Cross-rollout baseline for a pair of rollouts from the same prompt: each
/// rollout's baseline is the probe's prediction on the *other* rollout's
/// features, so the baseline never depends on the rollout it corrects.
pub fn cross_rollout_advantage(
    first: &RolloutRecord,
    second: &RolloutRecord,
    probe: &ProbeModel,
    feature_cfg: &FeatureConfig,
) -> Result<AdvantageBatch> {
    if !probe.is_fitted() {
        return Err(CoreError::ProbeNotFitted);
    }
    let phi1 = extract_features(first, feature_cfg)?;
    let phi2 = extract_features(second, feature_cfg)?;
    let b1 = probe.predict(&phi1.values)?;
    let b2 = probe.predict(&phi2.values)?;
    // Swap: rollout 0 is corrected by the prediction on rollout 1's state.
    let entries = vec![
        AdvantageEntry {
            rollout: 0,
            reward: first.reward,
            baseline: b2,
            advantage: first.reward - b2,
        },
        AdvantageEntry {
            rollout: 1,
            reward: second.reward,
            baseline: b1,
            advantage: second.reward - b1,
        },
    ];
    Ok(AdvantageBatch {
        estimator: EstimatorKind::CrossRollout,
        entries,
    })
}

/// Self-rollout baseline: the probe predicts from the rollout's *own*
/// features. Kept as an executable negative control; the baseline is
/// correlated with the score function and the estimator is biased.
pub fn self_rollout_advantage(
    record: &RolloutRecord,
    probe: &ProbeModel,
    feature_cfg: &FeatureConfig,
) -> Result<AdvantageEntry> {
    if !probe.is_fitted() {
        return Err(CoreError::ProbeNotFitted);
    }
    let phi = extract_features(record, feature_cfg)?;
    let b = probe.predict(&phi.values)?;
    Ok(AdvantageEntry {
        rollout: 0,
        reward: record.reward,
        baseline: b,
        advantage: record.reward - b,
    })
}

/// Hyperparameters for the logistic critic control.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticConfig {
    pub step_size: f64,
    pub iterations: usize,
}

impl Default for CriticConfig {
    fn default() -> Self {
        CriticConfig {
            step_size: 0.1,
            iterations: 500,
        }
    }
}

/// Logistic value head sigma(w . h) trained by full-batch gradient descent
/// on mean binary cross-entropy. No intercept: callers append a constant
/// feature if they want one.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticModel {
    pub weights: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Fit the logistic critic on (representation, label) pairs with labels in
/// [0, 1]. Weights start at zero and move along the full-batch gradient of
/// mean cross-entropy for a fixed number of iterations.
pub fn critic_fit(reps: &[Vec<f64>], labels: &[f64], cfg: &CriticConfig) -> Result<CriticModel> {
    if reps.is_empty() {
        return Err(CoreError::EmptyInput("critic training set is empty".into()));
    }
    if reps.len() != labels.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "{} representations vs {} labels",
            reps.len(),
            labels.len()
        )));
    }
    let dim = reps[0].len();
    if dim == 0 {
        return Err(CoreError::EmptyInput("critic representations are empty".into()));
    }
    for (i, r) in reps.iter().enumerate() {
        if r.len() != dim {
            return Err(CoreError::ShapeMismatch(format!(
                "representation {i} has dim {} but the first has {dim}",
                r.len()
            )));
        }
    }
    for &y in labels {
        if !(0.0..=1.0).contains(&y) || !y.is_finite() {
            return Err(CoreError::InvalidConfig(format!(
                "critic label {y} outside [0, 1]"
            )));
        }
    }
    if cfg.step_size <= 0.0 || !cfg.step_size.is_finite() {
        return Err(CoreError::InvalidConfig(format!(
            "critic step size {} must be positive",
            cfg.step_size
        )));
    }
    let n = reps.len() as f64;
    let mut w = vec![0.0; dim];
    for _ in 0..cfg.iterations {
        let mut grad = vec![0.0; dim];
        for (r, &y) in reps.iter().zip(labels) {
            let err = sigmoid(dot(&w, r)) - y;
            for (g, &x) in grad.iter_mut().zip(r) {
                *g += err * x;
            }
        }
        for (wi, g) in w.iter_mut().zip(&grad) {
            *wi -= cfg.step_size * *g / n;
        }
    }
    if w.iter().any(|x| !x.is_finite()) {
        return Err(CoreError::Numeric("critic weights diverged".into()));
    }
    Ok(CriticModel { weights: w })
}

/// Critic prediction sigma(w . h) for one representation.
pub fn critic_predict(model: &CriticModel, rep: &[f64]) -> Result<f64> {
    if rep.len() != model.weights.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "representation dim {} vs critic dim {}",
            rep.len(),
            model.weights.len()
        )));
    }
    Ok(sigmoid(dot(&model.weights, rep)))
}

/// Convenience: mean advantage magnitude of a batch, used in diagnostics.
pub fn mean_abs_advantage(batch: &AdvantageBatch) -> f64 {
    let total = pairwise_sum(
        &batch
            .entries
            .iter()
            .map(|e| e.advantage.abs())
            .collect::<Vec<_>>(),
    );
    total / batch.entries.len() as f64
}
