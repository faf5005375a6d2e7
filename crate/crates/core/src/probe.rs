//! Internal-state value probe: z-scored features into ridge regression.
//!
//! Targets come from leave-one-out reward means across the sibling rollouts
//! of a prompt, so the probe learns prompt difficulty without a ground-truth
//! value function. Standardization statistics are recomputed from scratch at
//! every refit and stored with the weights.

use nalgebra::{DMatrix, DVector};

use crate::error::{CoreError, Result};
use crate::numerics;

pub const DEFAULT_RIDGE_ALPHA: f64 = 0.01;
pub const DEFAULT_BUFFER_WINDOW: u64 = 10;

/// One probe training example: rollout features, a value target in [0, 1],
/// and the training step that produced it (for window eviction).
#[derive(Debug, Clone)]
pub struct ValueExample {
    pub features: Vec<f64>,
    pub target: f64,
    pub step: u64,
}

impl ValueExample {
    pub fn new(features: Vec<f64>, target: f64, step: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&target) {
            return Err(CoreError::InvalidConfig(format!(
                "value target {target} outside [0, 1]"
            )));
        }
        if features.is_empty() {
            return Err(CoreError::EmptyInput("value example has no features".into()));
        }
        Ok(ValueExample {
            features,
            target,
            step,
        })
    }
}

/// Leave-one-out value target: the mean reward of every sibling rollout of
/// the same prompt. Needs at least two rollouts; with exactly two, the
/// target for one rollout is simply the other's reward.
pub fn loo_target(rewards: &[f64], index: usize) -> Result<f64> {
    if rewards.len() < 2 {
        return Err(CoreError::InsufficientRollouts {
            required: 2,
            got: rewards.len(),
        });
    }
    if index >= rewards.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "rollout index {index} out of range for {} rewards",
            rewards.len()
        )));
    }
    let others: Vec<f64> = rewards
        .iter()
        .enumerate()
        .filter_map(|(j, &r)| (j != index).then_some(r))
        .collect();
    Ok(numerics::mean(&others))
}

#[derive(Debug, Clone)]
struct FittedProbe {
    means: Vec<f64>,
    stds: Vec<f64>,
    weights: Vec<f64>,
    intercept: f64,
}

/// Ridge probe over standardized features with an unpenalized intercept.
#[derive(Debug, Clone)]
pub struct ProbeModel {
    pub alpha: f64,
    fitted: Option<FittedProbe>,
}

impl ProbeModel {
    pub fn unfitted(alpha: f64) -> Self {
        ProbeModel { alpha, fitted: None }
    }

    pub fn is_fitted(&self) -> bool {
        self.fitted.is_some()
    }

    pub fn dim(&self) -> Option<usize> {
        self.fitted.as_ref().map(|f| f.weights.len())
    }

    /// Fit on the given examples. Features are z-scored with population
    /// statistics (a constant column gets std 1), the intercept is the
    /// target mean, and the weights solve the ridge normal equations
    /// (Z'Z + alpha I) w = Z'(y - mean(y)) on the standardized matrix.
    pub fn fit(examples: &[ValueExample], alpha: f64) -> Result<ProbeModel> {
        if examples.len() < 2 {
            return Err(CoreError::InsufficientRollouts {
                required: 2,
                got: examples.len(),
            });
        }
        if alpha < 0.0 {
            return Err(CoreError::InvalidConfig(format!("ridge alpha {alpha} is negative")));
        }
        let dim = examples[0].features.len();
        for (i, ex) in examples.iter().enumerate() {
            if ex.features.len() != dim {
                return Err(CoreError::ShapeMismatch(format!(
                    "example {i} has {} features, expected {dim}",
                    ex.features.len()
                )));
            }
        }
        let n = examples.len();
        let mut means = vec![0.0; dim];
        for ex in examples {
            for (m, v) in means.iter_mut().zip(&ex.features) {
                *m += v;
            }
        }
        for m in &mut means {
            *m /= n as f64;
        }
        let mut stds = vec![0.0; dim];
        for ex in examples {
            for ((s, v), m) in stds.iter_mut().zip(&ex.features).zip(&means) {
                *s += (v - m) * (v - m);
            }
        }
        for s in &mut stds {
            *s = (*s / n as f64).sqrt();
            if *s == 0.0 {
                *s = 1.0;
            }
        }

        let intercept = {
            let targets: Vec<f64> = examples.iter().map(|e| e.target).collect();
            numerics::mean(&targets)
        };
        let z = DMatrix::from_fn(n, dim, |i, j| (examples[i].features[j] - means[j]) / stds[j]);
        let yc = DVector::from_fn(n, |i, _| examples[i].target - intercept);
        let zt = z.transpose();
        let mut gram = &zt * &z;
        for j in 0..dim {
            gram[(j, j)] += alpha;
        }
        let rhs = &zt * &yc;
        let weights = match gram.clone().cholesky() {
            Some(chol) => chol.solve(&rhs),
            None => gram
                .lu()
                .solve(&rhs)
                .ok_or_else(|| CoreError::Numeric("ridge normal equations are singular".into()))?,
        };
        Ok(ProbeModel {
            alpha,
            fitted: Some(FittedProbe {
                means,
                stds,
                weights: weights.iter().cloned().collect(),
                intercept,
            }),
        })
    }

    /// Predicted value, clipped to [0, 1].
    pub fn predict(&self, features: &[f64]) -> Result<f64> {
        let fitted = self.fitted.as_ref().ok_or(CoreError::ProbeNotFitted)?;
        if features.len() != fitted.weights.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "{} features, probe expects {}",
                features.len(),
                fitted.weights.len()
            )));
        }
        let mut z = fitted.intercept;
        for i in 0..features.len() {
            z += fitted.weights[i] * (features[i] - fitted.means[i]) / fitted.stds[i];
        }
        Ok(numerics::clip01(z))
    }
}

/// Sliding window of probe training examples, evicted by step age.
#[derive(Debug, Clone)]
pub struct ValueBuffer {
    pub window: u64,
    examples: Vec<ValueExample>,
}

impl ValueBuffer {
    pub fn new(window: u64) -> Self {
        ValueBuffer {
            window,
            examples: Vec::new(),
        }
    }

    pub fn examples(&self) -> &[ValueExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Append this step's examples, then drop everything older than the
    /// window. Insertion order is preserved.
    pub fn push_and_evict(&mut self, new_examples: Vec<ValueExample>, current_step: u64) {
        self.examples.extend(new_examples);
        let cutoff = current_step.saturating_sub(self.window);
        self.examples.retain(|ex| ex.step >= cutoff);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeEvalReport {
    pub mae: f64,
    /// Missing when predictions or targets are constant.
    pub pearson: Option<f64>,
    pub count: usize,
}

/// MAE and Pearson correlation of probe predictions against the examples'
/// targets.
pub fn probe_eval(probe: &ProbeModel, examples: &[ValueExample]) -> Result<ProbeEvalReport> {
    if examples.len() < 2 {
        return Err(CoreError::InsufficientRollouts {
            required: 2,
            got: examples.len(),
        });
    }
    let mut predictions = Vec::with_capacity(examples.len());
    let mut targets = Vec::with_capacity(examples.len());
    for ex in examples {
        predictions.push(probe.predict(&ex.features)?);
        targets.push(ex.target);
    }
    Ok(ProbeEvalReport {
        mae: crate::metrics::mae(&predictions, &targets)?,
        pearson: crate::metrics::pearson(&predictions, &targets)?,
        count: examples.len(),
    })
}

const PROBE_CHECKPOINT_HEADER: &str = "probe-checkpoint v1";

fn join_floats(values: &[f64]) -> String {
    values.iter().map(|v| numerics::fmt_f64(*v)).collect::<Vec<_>>().join(" ")
}

fn parse_floats(line: &str, name: &str) -> Result<Vec<f64>> {
    if line.is_empty() {
        return Ok(Vec::new());
    }
    line.split(' ')
        .map(|p| {
            p.parse()
                .map_err(|e| CoreError::Parse(format!("{name} value {p:?}: {e}")))
        })
        .collect()
}

/// Versioned textual checkpoint: alpha, intercept, then the standardization
/// statistics and weights as full-precision arrays.
pub fn save_probe(path: &std::path::Path, probe: &ProbeModel) -> Result<()> {
    let fitted = probe.fitted.as_ref().ok_or(CoreError::ProbeNotFitted)?;
    let mut out = String::new();
    out.push_str(PROBE_CHECKPOINT_HEADER);
    out.push('\n');
    out.push_str(&format!("alpha={}\n", numerics::fmt_f64(probe.alpha)));
    out.push_str(&format!("intercept={}\n", numerics::fmt_f64(fitted.intercept)));
    out.push_str(&format!("dim={}\n", fitted.weights.len()));
    out.push_str(&format!("means={}\n", join_floats(&fitted.means)));
    out.push_str(&format!("stds={}\n", join_floats(&fitted.stds)));
    out.push_str(&format!("weights={}\n", join_floats(&fitted.weights)));
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_probe(path: &std::path::Path) -> Result<ProbeModel> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != PROBE_CHECKPOINT_HEADER {
        return Err(CoreError::Parse(format!(
            "unrecognized probe checkpoint header: {header:?}"
        )));
    }
    let mut field = |name: &str| -> Result<String> {
        let line = lines
            .next()
            .ok_or_else(|| CoreError::Parse(format!("missing field {name}")))?;
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CoreError::Parse(format!("malformed line {line:?}")))?;
        if key != name {
            return Err(CoreError::Parse(format!("expected field {name}, got {key}")));
        }
        Ok(value.to_string())
    };
    let alpha: f64 = field("alpha")?
        .parse()
        .map_err(|e| CoreError::Parse(format!("alpha: {e}")))?;
    let intercept: f64 = field("intercept")?
        .parse()
        .map_err(|e| CoreError::Parse(format!("intercept: {e}")))?;
    let dim: usize = field("dim")?
        .parse()
        .map_err(|e| CoreError::Parse(format!("dim: {e}")))?;
    let means = parse_floats(&field("means")?, "means")?;
    let stds = parse_floats(&field("stds")?, "stds")?;
    let weights = parse_floats(&field("weights")?, "weights")?;
    if means.len() != dim || stds.len() != dim || weights.len() != dim {
        return Err(CoreError::ShapeMismatch(format!(
            "probe checkpoint arrays disagree with dim {dim}"
        )));
    }
    if stds.iter().any(|&s| s <= 0.0) {
        return Err(CoreError::Parse("probe checkpoint has non-positive stds".into()));
    }
    Ok(ProbeModel {
        alpha,
        fitted: Some(FittedProbe {
            means,
            stds,
            weights,
            intercept,
        }),
    })
}
