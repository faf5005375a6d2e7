//! Exact-enumeration variance laboratory.
//!
//! On the table bandit the outcome space is small enough to walk
//! exhaustively, so the per-sample gradient estimate
//! Z(x, y) = grad log pi(y | x) * (R(x, y) - b(x, y)) has closed-form
//! within-prompt and between-prompt covariance components:
//!
//!   Sigma_w = E_x[ Cov(Z | x) ]      Sigma_b = Cov_x( E[Z | x] )
//!
//! and a batch of n prompts with m rollouts each has
//! Cov(g_hat) = (1/B) Sigma_w + (m/B) Sigma_b with B = n * m. The module
//! computes both sides: the exact decomposition by enumeration, and the
//! empirical covariance trace by Monte-Carlo batches, with a jackknife
//! standard error so the two can be compared honestly.

use crate::env::{self, TaskSpec};
use crate::error::{CoreError, Result};
use crate::features::{extract_features, FeatureConfig};
use crate::numerics::{dot, l2_norm, pairwise_sum};
use crate::policy::{
    forward_logits, layout, logprob_grad, softmax, teacher_forced_record, PolicyConfig,
    PolicyParams,
};
use crate::probe::ProbeModel;
use crate::rng;

/// Dense covariance matrices are materialized only up to this parameter
/// dimension; traces are always computed.
pub const DENSE_DIM_LIMIT: usize = 200;

/// Per-context pair enumeration is capped at this many actions.
pub const PAIR_ACTION_LIMIT: usize = 100;

/// Exact within/between covariance decomposition of the per-sample
/// gradient estimate. Matrices are row-major `dim * dim` and symmetric.
#[derive(Debug, Clone)]
pub struct SigmaPair {
    pub dim: usize,
    pub trace_w: f64,
    pub trace_b: f64,
    pub sigma_w: Option<Vec<f64>>,
    pub sigma_b: Option<Vec<f64>>,
    /// Always true for values produced by [`exact_sigma`]; recorded so
    /// downstream tables can state how the numbers were obtained.
    pub computed_exactly: bool,
}

impl SigmaPair {
    /// Predicted covariance trace for n prompts with m rollouts each.
    pub fn predicted_trace(&self, n: usize, m: usize) -> f64 {
        let b = (n * m) as f64;
        (self.trace_w + m as f64 * self.trace_b) / b
    }
}

/// Empirical covariance trace over Monte-Carlo batches with a jackknife
/// standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmpiricalCov {
    pub trace: f64,
    pub se: f64,
    pub trials: usize,
}

/// One allocation in a fixed-budget sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationRow {
    pub budget: usize,
    pub n: usize,
    pub m: usize,
    pub predicted_trace: f64,
    pub empirical_trace: f64,
    pub se: f64,
    pub trials: usize,
}

/// Which estimator the bias probe evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasMode {
    /// Baseline evaluated on an independent partner rollout.
    CrossRollout,
    /// Baseline evaluated on the rollout's own outcome.
    SelfRollout,
}

impl BiasMode {
    pub fn name(&self) -> &'static str {
        match self {
            BiasMode::CrossRollout => "cross",
            BiasMode::SelfRollout => "self",
        }
    }
}

/// Exact bias of a baselined estimator against the true gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasReport {
    pub mode: BiasMode,
    /// L2 norm of (estimator mean - true gradient).
    pub bias_norm: f64,
    /// L2 norm of the true gradient, for scale.
    pub grad_norm: f64,
}

/// Everything enumeration needs, computed once: action probabilities,
/// score gradients, and rewards for every (context, action) cell.
struct OutcomeTable {
    dim: usize,
    contexts: usize,
    actions: usize,
    probs: Vec<Vec<f64>>,
    grads: Vec<Vec<Vec<f64>>>,
    rewards: Vec<Vec<f64>>,
}

fn outcome_table(
    params: &PolicyParams,
    pcfg: &PolicyConfig,
    spec: &TaskSpec,
) -> Result<OutcomeTable> {
    let outcomes = env::enumerate_outcomes(spec)?;
    let dim = layout(pcfg).total;
    let mut probs = Vec::with_capacity(spec.context_count);
    let mut grads = Vec::with_capacity(spec.context_count);
    let mut rewards = vec![vec![0.0; spec.action_count]; spec.context_count];
    for (c, a, r) in outcomes {
        rewards[c][a] = r;
    }
    for c in 0..spec.context_count {
        let prompt = env::bandit_prompt(spec, c);
        let (logits, _) = forward_logits(params, pcfg, &prompt.tokens)?;
        probs.push(softmax(&logits));
        let mut row = Vec::with_capacity(spec.action_count);
        for a in 0..spec.action_count {
            let (_, g) = logprob_grad(params, pcfg, &prompt.tokens, &[a])?;
            row.push(g);
        }
        grads.push(row);
    }
    Ok(OutcomeTable {
        dim,
        contexts: spec.context_count,
        actions: spec.action_count,
        probs,
        grads,
        rewards,
    })
}

fn z_table(table: &OutcomeTable, baseline: &dyn Fn(usize, usize) -> f64) -> Vec<Vec<Vec<f64>>> {
    let mut z = Vec::with_capacity(table.contexts);
    for c in 0..table.contexts {
        let mut row = Vec::with_capacity(table.actions);
        for a in 0..table.actions {
            let scale = table.rewards[c][a] - baseline(c, a);
            row.push(table.grads[c][a].iter().map(|g| g * scale).collect());
        }
        z.push(row);
    }
    z
}

/// Exact Sigma_w / Sigma_b by enumeration, for the per-sample estimate
/// Z(c, a) = grad log pi(a | c) * (R(c, a) - baseline(c, a)) with contexts
/// drawn uniformly. Dense matrices appear only below [`DENSE_DIM_LIMIT`].
pub fn exact_sigma(
    params: &PolicyParams,
    pcfg: &PolicyConfig,
    spec: &TaskSpec,
    baseline: &dyn Fn(usize, usize) -> f64,
) -> Result<SigmaPair> {
    let table = outcome_table(params, pcfg, spec)?;
    let z = z_table(&table, baseline);
    let dim = table.dim;
    let dense = dim <= DENSE_DIM_LIMIT;
    let cn = table.contexts as f64;

    let mut mus: Vec<Vec<f64>> = Vec::with_capacity(table.contexts);
    let mut trace_w = 0.0;
    let mut sigma_w = if dense { Some(vec![0.0; dim * dim]) } else { None };
    for c in 0..table.contexts {
        let mut mu = vec![0.0; dim];
        let mut second_trace = 0.0;
        for a in 0..table.actions {
            let p = table.probs[c][a];
            let zv = &z[c][a];
            for (slot, v) in mu.iter_mut().zip(zv) {
                *slot += p * v;
            }
            second_trace += p * dot(zv, zv);
            if let Some(mat) = sigma_w.as_mut() {
                for i in 0..dim {
                    let pz = p * zv[i];
                    let row = &mut mat[i * dim..(i + 1) * dim];
                    for (slot, vj) in row.iter_mut().zip(zv) {
                        *slot += pz * vj;
                    }
                }
            }
        }
        trace_w += (second_trace - dot(&mu, &mu)) / cn;
        if let Some(mat) = sigma_w.as_mut() {
            for i in 0..dim {
                let mi = mu[i];
                let row = &mut mat[i * dim..(i + 1) * dim];
                for (slot, mj) in row.iter_mut().zip(&mu) {
                    *slot -= mi * mj;
                }
            }
        }
        mus.push(mu);
    }
    if let Some(mat) = sigma_w.as_mut() {
        for v in mat.iter_mut() {
            *v /= cn;
        }
    }

    let mut mu_bar = vec![0.0; dim];
    for mu in &mus {
        for (slot, v) in mu_bar.iter_mut().zip(mu) {
            *slot += v / cn;
        }
    }
    let mut trace_b = -dot(&mu_bar, &mu_bar);
    for mu in &mus {
        trace_b += dot(mu, mu) / cn;
    }
    let mut sigma_b = if dense { Some(vec![0.0; dim * dim]) } else { None };
    if let Some(mat) = sigma_b.as_mut() {
        for mu in &mus {
            for i in 0..dim {
                let mi = mu[i] / cn;
                let row = &mut mat[i * dim..(i + 1) * dim];
                for (slot, mj) in row.iter_mut().zip(mu) {
                    *slot += mi * mj;
                }
            }
        }
        for i in 0..dim {
            let bi = mu_bar[i];
            let row = &mut mat[i * dim..(i + 1) * dim];
            for (slot, bj) in row.iter_mut().zip(&mu_bar) {
                *slot -= bi * bj;
            }
        }
    }

    // Enumeration builds both matrices symmetrically up to rounding;
    // average with the transpose so downstream eigen checks see exact
    // symmetry.
    for mat in [sigma_w.as_mut(), sigma_b.as_mut()].into_iter().flatten() {
        for i in 0..dim {
            for j in (i + 1)..dim {
                let s = 0.5 * (mat[i * dim + j] + mat[j * dim + i]);
                mat[i * dim + j] = s;
                mat[j * dim + i] = s;
            }
        }
    }

    Ok(SigmaPair {
        dim,
        trace_w,
        trace_b,
        sigma_w,
        sigma_b,
        computed_exactly: true,
    })
}

fn draw_action(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (a, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return a;
        }
    }
    probs.len() - 1
}

/// One Monte-Carlo batch gradient from the cached Z table. The trial's
/// stream is fully determined by (seed, trial, salt), so a second pass can
/// regenerate the same batch.
fn trial_gradient(
    z: &[Vec<Vec<f64>>],
    probs: &[Vec<f64>],
    contexts: usize,
    n: usize,
    m: usize,
    dim: usize,
    seed: u64,
    trial: u64,
    salt: u64,
) -> Vec<f64> {
    use rand::Rng;
    let mut rng = rng::stream(seed, rng::tag::TRIAL, trial, salt);
    let mut acc = vec![0.0; dim];
    for _ in 0..n {
        let c = rng.gen_range(0..contexts);
        for _ in 0..m {
            let a = draw_action(&probs[c], rng.gen::<f64>());
            for (slot, v) in acc.iter_mut().zip(&z[c][a]) {
                *slot += v;
            }
        }
    }
    let scale = 1.0 / (n * m) as f64;
    for slot in &mut acc {
        *slot *= scale;
    }
    acc
}

/// Empirical covariance trace of the batch gradient over `trials`
/// independent batches of n prompts and m rollouts per prompt.
///
/// Uses the unbiased estimator tr(Cov) = (sum_t ||g_t - g_bar||^2) / (T-1)
/// in a two-pass streaming form that never stores per-trial gradients, and
/// a leave-one-out jackknife for the standard error. `salt` separates the
/// trial streams of different sweep rows under one seed.
pub fn empirical_cov(
    params: &PolicyParams,
    pcfg: &PolicyConfig,
    spec: &TaskSpec,
    baseline: &dyn Fn(usize, usize) -> f64,
    n: usize,
    m: usize,
    trials: usize,
    seed: u64,
    salt: u64,
) -> Result<EmpiricalCov> {
    if n == 0 || m == 0 {
        return Err(CoreError::InvalidConfig(
            "batch shape needs n >= 1 and m >= 1".into(),
        ));
    }
    if trials < 100 {
        return Err(CoreError::InvalidConfig(format!(
            "need at least 100 trials for a stable jackknife, got {trials}"
        )));
    }
    if trials as u64 >= (1 << 28) {
        return Err(CoreError::InvalidConfig(format!(
            "trials {trials} exceeds the stream index range"
        )));
    }
    let table = outcome_table(params, pcfg, spec)?;
    let z = z_table(&table, baseline);
    let dim = table.dim;
    let t = trials as f64;

    // Pass 1: batch-gradient sum and per-trial squared norms.
    let mut s1 = vec![0.0; dim];
    let mut sq_norms = Vec::with_capacity(trials);
    for trial in 0..trials {
        let g = trial_gradient(
            &z,
            &table.probs,
            table.contexts,
            n,
            m,
            dim,
            seed,
            trial as u64,
            salt,
        );
        for (slot, v) in s1.iter_mut().zip(&g) {
            *slot += v;
        }
        sq_norms.push(dot(&g, &g));
    }
    let s2 = pairwise_sum(&sq_norms);
    let s1_sq = dot(&s1, &s1);
    let trace = (s2 - s1_sq / t) / (t - 1.0);

    // Pass 2: regenerate each trial for its projection on the sum, which
    // yields the leave-one-out traces without storing any gradient.
    let mut loo = Vec::with_capacity(trials);
    for trial in 0..trials {
        let g = trial_gradient(
            &z,
            &table.probs,
            table.contexts,
            n,
            m,
            dim,
            seed,
            trial as u64,
            salt,
        );
        let proj = dot(&s1, &g);
        let a = sq_norms[trial];
        let s2_t = s2 - a;
        let s1_t_sq = s1_sq - 2.0 * proj + a;
        loo.push((s2_t - s1_t_sq / (t - 1.0)) / (t - 2.0));
    }
    let loo_mean = pairwise_sum(&loo) / t;
    let dev: Vec<f64> = loo.iter().map(|v| (v - loo_mean) * (v - loo_mean)).collect();
    let se = ((t - 1.0) / t * pairwise_sum(&dev)).sqrt();

    Ok(EmpiricalCov { trace, se, trials })
}

/// Fixed-budget allocation sweep: for each m (which must divide the
/// budget), predict the covariance trace from the exact decomposition and
/// measure it empirically.
pub fn allocation_sweep(
    params: &PolicyParams,
    pcfg: &PolicyConfig,
    spec: &TaskSpec,
    baseline: &dyn Fn(usize, usize) -> f64,
    budget: usize,
    m_values: &[usize],
    trials: usize,
    seed: u64,
) -> Result<(SigmaPair, Vec<AllocationRow>)> {
    if budget == 0 || m_values.is_empty() {
        return Err(CoreError::InvalidConfig(
            "allocation sweep needs a positive budget and at least one group size".into(),
        ));
    }
    for &m in m_values {
        if m == 0 || budget % m != 0 {
            return Err(CoreError::InvalidConfig(format!(
                "group size {m} does not divide the budget {budget}"
            )));
        }
    }
    let sigma = exact_sigma(params, pcfg, spec, baseline)?;
    let mut rows = Vec::with_capacity(m_values.len());
    for (idx, &m) in m_values.iter().enumerate() {
        let n = budget / m;
        let emp = empirical_cov(params, pcfg, spec, baseline, n, m, trials, seed, idx as u64)?;
        rows.push(AllocationRow {
            budget,
            n,
            m,
            predicted_trace: sigma.predicted_trace(n, m),
            empirical_trace: emp.trace,
            se: emp.se,
            trials: emp.trials,
        });
    }
    Ok((sigma, rows))
}

/// Exact bias of the baselined estimator in the chosen mode, by full
/// enumeration of outcome pairs per context.
///
/// Cross mode computes sum over (y, y') of
/// pi(y) pi(y') (R(y) - v(y')) grad log pi(y) per context; self mode
/// evaluates v on the same outcome it corrects. The report compares the
/// estimator mean against the exact gradient E[R grad log pi].
pub fn bias_probe(
    params: &PolicyParams,
    pcfg: &PolicyConfig,
    spec: &TaskSpec,
    value_fn: &dyn Fn(usize, usize) -> f64,
    mode: BiasMode,
) -> Result<BiasReport> {
    if spec.action_count > PAIR_ACTION_LIMIT {
        return Err(CoreError::OutcomeSpaceTooLarge {
            size: spec.action_count * spec.action_count,
            limit: PAIR_ACTION_LIMIT * PAIR_ACTION_LIMIT,
        });
    }
    let table = outcome_table(params, pcfg, spec)?;
    let dim = table.dim;
    let cn = table.contexts as f64;

    let mut true_grad = vec![0.0; dim];
    for c in 0..table.contexts {
        for a in 0..table.actions {
            let w = table.probs[c][a] * table.rewards[c][a] / cn;
            for (slot, g) in true_grad.iter_mut().zip(&table.grads[c][a]) {
                *slot += w * g;
            }
        }
    }

    let mut est = vec![0.0; dim];
    match mode {
        BiasMode::CrossRollout => {
            for c in 0..table.contexts {
                for a1 in 0..table.actions {
                    for a2 in 0..table.actions {
                        let w = table.probs[c][a1]
                            * table.probs[c][a2]
                            * (table.rewards[c][a1] - value_fn(c, a2))
                            / cn;
                        for (slot, g) in est.iter_mut().zip(&table.grads[c][a1]) {
                            *slot += w * g;
                        }
                    }
                }
            }
        }
        BiasMode::SelfRollout => {
            for c in 0..table.contexts {
                for a in 0..table.actions {
                    let w = table.probs[c][a] * (table.rewards[c][a] - value_fn(c, a)) / cn;
                    for (slot, g) in est.iter_mut().zip(&table.grads[c][a]) {
                        *slot += w * g;
                    }
                }
            }
        }
    }

    let bias: Vec<f64> = est.iter().zip(&true_grad).map(|(e, t)| e - t).collect();
    Ok(BiasReport {
        mode,
        bias_norm: l2_norm(&bias),
        grad_norm: l2_norm(&true_grad),
    })
}

/// Probe predictions for every (context, action) cell, via teacher-forced
/// rollout records. Wraps a fitted probe as a value table for the exact
/// enumeration functions.
pub fn probe_value_table(
    params: &PolicyParams,
    pcfg: &PolicyConfig,
    spec: &TaskSpec,
    fcfg: &FeatureConfig,
    probe: &ProbeModel,
) -> Result<Vec<Vec<f64>>> {
    env::enumerate_outcomes(spec)?;
    let mut values = Vec::with_capacity(spec.context_count);
    for c in 0..spec.context_count {
        let prompt = env::bandit_prompt(spec, c);
        let mut row = Vec::with_capacity(spec.action_count);
        for a in 0..spec.action_count {
            let rec = teacher_forced_record(params, pcfg, spec, &prompt, &[a])?;
            let phi = extract_features(&rec, fcfg)?;
            row.push(probe.predict(&phi.values)?);
        }
        values.push(row);
    }
    Ok(values)
}

/// Exact state values V(c) = sum_a pi(a | c) R(c, a).
pub fn exact_state_values(
    params: &PolicyParams,
    pcfg: &PolicyConfig,
    spec: &TaskSpec,
) -> Result<Vec<f64>> {
    let table = outcome_table(params, pcfg, spec)?;
    Ok((0..table.contexts)
        .map(|c| {
            let terms: Vec<f64> = (0..table.actions)
                .map(|a| table.probs[c][a] * table.rewards[c][a])
                .collect();
            pairwise_sum(&terms)
        })
        .collect())
}
