//! Training loop: clipped-surrogate policy updates over batches whose
//! advantages come from one of the estimator families, plus the probe
//! refit cycle for the cross-rollout method.
//!
//! Per-step order for the probe method: sample rollouts, compute baselines
//! with the probe as it stood *before* the step, update the policy, then
//! refit the probe and advance the replay window. The probe therefore never
//! sees the rollouts it is about to correct.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::env::{self, TaskSpec};
use crate::error::{CoreError, Result};
use crate::estimators::{
    cross_rollout_advantage, dapo_lite_advantage, grpo_baseline, reinforce_advantage, DapoOutcome,
};
use crate::features::{extract_features, FeatureConfig};
use crate::metrics::{variance_reduction_ratio, Cell, CsvWriter};
use crate::numerics::{l2_norm, mean};
use crate::policy::{
    entropy_stats, init_params, logprob_grad_with, sample_rollout, save_policy, token_logprobs,
    PolicyConfig, PolicyParams, RolloutRecord,
};
use crate::probe::{loo_target, save_probe, ProbeModel, ValueBuffer, ValueExample};
use crate::rng;

/// Which advantage estimator drives the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Reinforce,
    Grpo,
    DapoLite,
    Poise,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Reinforce => "reinforce",
            Method::Grpo => "grpo",
            Method::DapoLite => "dapo-lite",
            Method::Poise => "poise",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reinforce" => Ok(Method::Reinforce),
            "grpo" => Ok(Method::Grpo),
            "dapo-lite" => Ok(Method::DapoLite),
            "poise" => Ok(Method::Poise),
            other => Err(CoreError::Parse(format!(
                "unknown method {other:?}; expected reinforce, grpo, dapo-lite, or poise"
            ))),
        }
    }
}

/// How per-token surrogate terms are averaged into the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossNorm {
    /// Mean over rollouts of per-rollout token means.
    Sequence,
    /// Single mean over all tokens in the batch.
    Token,
}

impl LossNorm {
    pub fn name(&self) -> &'static str {
        match self {
            LossNorm::Sequence => "sequence",
            LossNorm::Token => "token",
        }
    }
}

impl std::str::FromStr for LossNorm {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequence" => Ok(LossNorm::Sequence),
            "token" => Ok(LossNorm::Token),
            other => Err(CoreError::Parse(format!(
                "unknown loss normalization {other:?}; expected sequence or token"
            ))),
        }
    }
}

/// Hyperparameters for one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    /// Prompts drawn per step (M).
    pub prompts_per_batch: usize,
    /// Rollouts per prompt (m). The cross-rollout method requires exactly 2.
    pub rollouts_per_prompt: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub clip_eps_low: f64,
    pub clip_eps_high: f64,
    pub inner_epochs: usize,
    pub minibatch_size: usize,
    pub loss_norm: LossNorm,
    pub probe_alpha: f64,
    pub probe_window: u64,
    pub checkpoint_interval: u64,
    pub seed: u64,
    pub threads: usize,
}

impl TrainConfig {
    /// Per-method defaults. Group methods draw fewer prompts with larger
    /// groups; the pairwise methods draw more prompts with two rollouts.
    pub fn defaults(method: Method) -> Self {
        let (prompts, rollouts) = match method {
            Method::Reinforce | Method::Poise => (64, 2),
            Method::Grpo | Method::DapoLite => (16, 8),
        };
        let loss_norm = match method {
            Method::DapoLite => LossNorm::Token,
            _ => LossNorm::Sequence,
        };
        TrainConfig {
            method,
            prompts_per_batch: prompts,
            rollouts_per_prompt: rollouts,
            steps: 300,
            learning_rate: 3e-3,
            clip_eps_low: 0.2,
            clip_eps_high: 0.28,
            inner_epochs: 1,
            minibatch_size: 16,
            loss_norm,
            probe_alpha: crate::probe::DEFAULT_RIDGE_ALPHA,
            probe_window: crate::probe::DEFAULT_BUFFER_WINDOW,
            checkpoint_interval: 100,
            seed: 0,
            threads: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompts_per_batch == 0 {
            return Err(CoreError::InvalidConfig("prompts_per_batch must be >= 1".into()));
        }
        match self.method {
            Method::Poise => {
                if self.rollouts_per_prompt != 2 {
                    return Err(CoreError::InvalidConfig(format!(
                        "the cross-rollout method needs exactly 2 rollouts per prompt, got {}",
                        self.rollouts_per_prompt
                    )));
                }
            }
            Method::Grpo | Method::DapoLite => {
                if self.rollouts_per_prompt < 2 {
                    return Err(CoreError::InvalidConfig(format!(
                        "group baselines need at least 2 rollouts per prompt, got {}",
                        self.rollouts_per_prompt
                    )));
                }
            }
            Method::Reinforce => {
                if self.rollouts_per_prompt == 0 {
                    return Err(CoreError::InvalidConfig(
                        "rollouts_per_prompt must be >= 1".into(),
                    ));
                }
            }
        }
        if self.steps >= (1 << 28) {
            return Err(CoreError::InvalidConfig(format!(
                "steps {} exceeds the stream index range",
                self.steps
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(CoreError::InvalidConfig(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.clip_eps_low) || self.clip_eps_low == 0.0 {
            return Err(CoreError::InvalidConfig(format!(
                "clip_eps_low {} must lie in (0, 1)",
                self.clip_eps_low
            )));
        }
        if !(self.clip_eps_high.is_finite() && self.clip_eps_high > 0.0) {
            return Err(CoreError::InvalidConfig(format!(
                "clip_eps_high {} must be positive",
                self.clip_eps_high
            )));
        }
        if self.inner_epochs == 0 || self.minibatch_size == 0 {
            return Err(CoreError::InvalidConfig(
                "inner_epochs and minibatch_size must be >= 1".into(),
            ));
        }
        if self.probe_alpha < 0.0 {
            return Err(CoreError::InvalidConfig(format!(
                "probe_alpha {} is negative",
                self.probe_alpha
            )));
        }
        if self.threads == 0 {
            return Err(CoreError::InvalidConfig("threads must be >= 1".into()));
        }
        Ok(())
    }
}

/// Diagnostics for one completed step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub reward_mean: f64,
    pub baseline_mean: f64,
    /// L2 norm of the full-batch surrogate gradient before the update.
    pub grad_norm: f64,
    /// Probe MAE against leave-one-out targets, missing until the probe
    /// has been fitted at least once.
    pub online_mae: Option<f64>,
    /// Var(advantages) / Var(rewards); missing when rewards are constant.
    pub adv_var_ratio: Option<f64>,
    pub entropy_mean: f64,
    /// Every sampled rollout, including ones discarded as degenerate.
    pub rollouts_consumed: u64,
    /// True when degenerate-group resampling ran out of its prompt budget.
    pub degenerate_cap_hit: bool,
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub reports: Vec<StepReport>,
    pub params: PolicyParams,
    pub probe: ProbeModel,
    pub buffer: ValueBuffer,
}

/// Clipped surrogate for one token: min(r * A, clip(r) * A).
pub fn ppo_surrogate_term(ratio: f64, advantage: f64, eps_low: f64, eps_high: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps_low, 1.0 + eps_high);
    (ratio * advantage).min(clipped * advantage)
}

/// Derivative weight of the surrogate w.r.t. the token's log-prob: zero when
/// the active min branch is the clipped constant, ratio * A otherwise.
pub fn clipped_token_coeff(ratio: f64, advantage: f64, eps_low: f64, eps_high: f64) -> f64 {
    let clipped_out = (advantage >= 0.0 && ratio > 1.0 + eps_high)
        || (advantage < 0.0 && ratio < 1.0 - eps_low);
    if clipped_out {
        0.0
    } else {
        ratio * advantage
    }
}

/// Current-over-behavior probability ratios per generated token.
pub fn token_ratios(
    params: &PolicyParams,
    cfg: &PolicyConfig,
    record: &RolloutRecord,
) -> Result<Vec<f64>> {
    let now = token_logprobs(params, cfg, &record.prompt.tokens, &record.generated)?;
    Ok(now
        .iter()
        .zip(&record.behavior_logprobs)
        .map(|(n, b)| (n - b).exp())
        .collect())
}

/// Gradient of the clipped surrogate loss over a batch of rollouts with
/// fixed advantages. `records` and `advantages` are parallel slices.
pub fn surrogate_gradient(
    params: &PolicyParams,
    pcfg: &PolicyConfig,
    records: &[RolloutRecord],
    advantages: &[f64],
    cfg: &TrainConfig,
    parallel: bool,
) -> Result<Vec<f64>> {
    if records.len() != advantages.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "{} records vs {} advantages",
            records.len(),
            advantages.len()
        )));
    }
    let dim = crate::policy::layout(pcfg).total;
    if records.is_empty() {
        return Ok(vec![0.0; dim]);
    }
    let total_tokens: usize = records.iter().map(|r| r.generated.len()).sum();
    if total_tokens == 0 {
        return Ok(vec![0.0; dim]);
    }
    let n = records.len() as f64;

    let one = |idx: usize| -> Result<Vec<f64>> {
        let rec = &records[idx];
        let adv = advantages[idx];
        let scale = match cfg.loss_norm {
            LossNorm::Sequence => {
                if rec.generated.is_empty() {
                    0.0
                } else {
                    1.0 / (n * rec.generated.len() as f64)
                }
            }
            LossNorm::Token => 1.0 / total_tokens as f64,
        };
        let behavior = rec.behavior_logprobs.clone();
        let out = logprob_grad_with(params, pcfg, &rec.prompt.tokens, &rec.generated, |lps| {
            lps.iter()
                .zip(&behavior)
                .map(|(now, was)| {
                    let ratio = (now - was).exp();
                    scale * clipped_token_coeff(ratio, adv, cfg.clip_eps_low, cfg.clip_eps_high)
                })
                .collect()
        })?;
        Ok(out.grad)
    };

    // Per-rollout gradients are computed independently (possibly in
    // parallel) and reduced in index order, so the sum is identical for
    // any thread count.
    let per_rollout: Vec<Vec<f64>> = if parallel {
        (0..records.len())
            .into_par_iter()
            .map(one)
            .collect::<Result<Vec<_>>>()?
    } else {
        (0..records.len()).map(one).collect::<Result<Vec<_>>>()?
    };
    let mut grad = vec![0.0; dim];
    for g in &per_rollout {
        for (slot, v) in grad.iter_mut().zip(g) {
            *slot += v;
        }
    }
    Ok(grad)
}

/// One policy update: report the full-batch gradient norm, then take
/// ascent steps over shuffled minibatches for the configured epochs.
pub fn policy_update(
    params: &mut PolicyParams,
    pcfg: &PolicyConfig,
    records: &[RolloutRecord],
    advantages: &[f64],
    cfg: &TrainConfig,
    step: u64,
    parallel: bool,
) -> Result<f64> {
    for a in advantages {
        if !a.is_finite() {
            return Err(CoreError::Numeric(format!("non-finite advantage {a}")));
        }
    }
    let full = surrogate_gradient(params, pcfg, records, advantages, cfg, parallel)?;
    let grad_norm = l2_norm(&full);
    if !grad_norm.is_finite() {
        return Err(CoreError::Numeric(format!(
            "full-batch gradient norm {grad_norm} at step {step}"
        )));
    }

    let mut order: Vec<usize> = (0..records.len()).collect();
    for epoch in 0..cfg.inner_epochs {
        let mut rng = rng::stream(cfg.seed, rng::tag::SHUFFLE, step, epoch as u64);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.minibatch_size) {
            let recs: Vec<RolloutRecord> = chunk.iter().map(|&i| records[i].clone()).collect();
            let advs: Vec<f64> = chunk.iter().map(|&i| advantages[i]).collect();
            let g = surrogate_gradient(params, pcfg, &recs, &advs, cfg, parallel)?;
            for (p, gi) in params.values.iter_mut().zip(&g) {
                *p += cfg.learning_rate * gi;
                if !p.is_finite() {
                    return Err(CoreError::Numeric(format!(
                        "parameter became non-finite at step {step}"
                    )));
                }
            }
        }
    }
    Ok(grad_norm)
}

/// Everything one step's sampling produced. `advantages` is either parallel
/// to `records` or empty, the latter meaning the step has nothing to train
/// on (every group came back degenerate) and `records` only feeds stats.
struct BatchOutcome {
    records: Vec<RolloutRecord>,
    advantages: Vec<f64>,
    rewards: Vec<f64>,
    baselines: Vec<f64>,
    rollouts_consumed: u64,
    degenerate_cap_hit: bool,
    new_examples: Vec<ValueExample>,
    online_mae: Option<f64>,
}

fn sample_group(
    params: &PolicyParams,
    pcfg: &PolicyConfig,
    spec: &TaskSpec,
    cfg: &TrainConfig,
    step: u64,
    draw_index: u64,
) -> Result<Vec<RolloutRecord>> {
    let mut prompt_rng = rng::stream(cfg.seed, rng::tag::PROMPT, step, draw_index);
    let prompt = env::sample_prompt(spec, &mut prompt_rng);
    let mut rollout_rng = rng::stream(cfg.seed, rng::tag::ROLLOUT, step, draw_index);
    (0..cfg.rollouts_per_prompt)
        .map(|_| {
            sample_rollout(
                params,
                pcfg,
                spec,
                &prompt,
                spec.max_rollout_len(),
                &mut rollout_rng,
            )
        })
        .collect()
}

fn collect_batch(
    params: &PolicyParams,
    pcfg: &PolicyConfig,
    spec: &TaskSpec,
    fcfg: &FeatureConfig,
    cfg: &TrainConfig,
    probe: &ProbeModel,
    step: u64,
) -> Result<BatchOutcome> {
    let mut out = BatchOutcome {
        records: Vec::new(),
        advantages: Vec::new(),
        rewards: Vec::new(),
        baselines: Vec::new(),
        rollouts_consumed: 0,
        degenerate_cap_hit: false,
        new_examples: Vec::new(),
        online_mae: None,
    };

    match cfg.method {
        Method::Poise => {
            let mut mae_terms = Vec::new();
            for i in 0..cfg.prompts_per_batch {
                let group = sample_group(params, pcfg, spec, cfg, step, i as u64)?;
                out.rollouts_consumed += group.len() as u64;
                let rewards: Vec<f64> = group.iter().map(|r| r.reward).collect();
                if probe.is_fitted() {
                    let batch = cross_rollout_advantage(&group[0], &group[1], probe, fcfg)?;
                    for (rec, entry) in group.iter().zip(&batch.entries) {
                        out.rewards.push(entry.reward);
                        out.baselines.push(entry.baseline);
                        out.advantages.push(entry.advantage);
                        out.records.push(rec.clone());
                    }
                    // Probe quality against leave-one-out targets: the
                    // prediction on a rollout's own state vs its partner's
                    // reward.
                    for (j, rec) in group.iter().enumerate() {
                        let phi = extract_features(rec, fcfg)?;
                        let pred = probe.predict(&phi.values)?;
                        mae_terms.push((pred - loo_target(&rewards, j)?).abs());
                        out.new_examples.push(ValueExample::new(
                            phi.values,
                            loo_target(&rewards, j)?,
                            step,
                        )?);
                    }
                } else {
                    // Cold start: the partner's raw reward is the baseline.
                    for (j, rec) in group.iter().enumerate() {
                        let partner = loo_target(&rewards, j)?;
                        out.rewards.push(rec.reward);
                        out.baselines.push(partner);
                        out.advantages.push(rec.reward - partner);
                        out.records.push(rec.clone());
                        let phi = extract_features(rec, fcfg)?;
                        out.new_examples
                            .push(ValueExample::new(phi.values, partner, step)?);
                    }
                }
            }
            if !mae_terms.is_empty() {
                out.online_mae = Some(mean(&mae_terms));
            }
        }
        Method::Reinforce => {
            for i in 0..cfg.prompts_per_batch {
                let group = sample_group(params, pcfg, spec, cfg, step, i as u64)?;
                out.rollouts_consumed += group.len() as u64;
                let rewards: Vec<f64> = group.iter().map(|r| r.reward).collect();
                let batch = reinforce_advantage(&rewards)?;
                for (rec, entry) in group.into_iter().zip(batch.entries) {
                    out.rewards.push(entry.reward);
                    out.baselines.push(entry.baseline);
                    out.advantages.push(entry.advantage);
                    out.records.push(rec);
                }
            }
        }
        Method::Grpo => {
            for i in 0..cfg.prompts_per_batch {
                let group = sample_group(params, pcfg, spec, cfg, step, i as u64)?;
                out.rollouts_consumed += group.len() as u64;
                let rewards: Vec<f64> = group.iter().map(|r| r.reward).collect();
                let batch = grpo_baseline(&rewards)?;
                for (rec, entry) in group.into_iter().zip(batch.entries) {
                    out.rewards.push(entry.reward);
                    out.baselines.push(entry.baseline);
                    out.advantages.push(entry.advantage);
                    out.records.push(rec);
                }
            }
        }
        Method::DapoLite => {
            // Degenerate groups are discarded and replaced by fresh prompts
            // until the batch is full or the prompt budget (8x the batch
            // size) runs out. Discarded rollouts still count as consumed.
            let cap = 8 * cfg.prompts_per_batch as u64;
            let mut accepted = 0;
            let mut draws = 0u64;
            let mut fallback: Vec<RolloutRecord> = Vec::new();
            let mut fallback_means: Vec<f64> = Vec::new();
            while accepted < cfg.prompts_per_batch && draws < cap {
                let group = sample_group(params, pcfg, spec, cfg, step, draws)?;
                draws += 1;
                out.rollouts_consumed += group.len() as u64;
                let rewards: Vec<f64> = group.iter().map(|r| r.reward).collect();
                match dapo_lite_advantage(&rewards)? {
                    DapoOutcome::Advantages(batch) => {
                        accepted += 1;
                        for (rec, entry) in group.into_iter().zip(batch.entries) {
                            out.rewards.push(entry.reward);
                            out.baselines.push(entry.baseline);
                            out.advantages.push(entry.advantage);
                            out.records.push(rec);
                        }
                    }
                    DapoOutcome::Degenerate => {
                        let gm = mean(&rewards);
                        for rec in group {
                            fallback.push(rec);
                            fallback_means.push(gm);
                        }
                    }
                }
            }
            out.degenerate_cap_hit = accepted < cfg.prompts_per_batch;
            if accepted == 0 {
                // Nothing to train on; keep the sampled rollouts for stats.
                for (rec, gm) in fallback.into_iter().zip(fallback_means) {
                    out.rewards.push(rec.reward);
                    out.baselines.push(gm);
                    out.records.push(rec);
                }
                out.advantages.clear();
            }
        }
    }
    debug_assert!(out.advantages.is_empty() || out.advantages.len() == out.records.len());
    Ok(out)
}

/// Full-batch surrogate gradient for a freshly sampled batch at the given
/// params, without updating anything. Stream indices are keyed by `step`,
/// so distinct steps give independent batches.
pub fn batch_gradient(
    params: &PolicyParams,
    pcfg: &PolicyConfig,
    spec: &TaskSpec,
    fcfg: &FeatureConfig,
    cfg: &TrainConfig,
    probe: &ProbeModel,
    step: u64,
) -> Result<Vec<f64>> {
    let batch = collect_batch(params, pcfg, spec, fcfg, cfg, probe, step)?;
    if batch.advantages.is_empty() {
        return Ok(vec![0.0; crate::policy::layout(pcfg).total]);
    }
    surrogate_gradient(
        params,
        pcfg,
        &batch.records,
        &batch.advantages,
        cfg,
        cfg.threads > 1,
    )
}

/// Trace of the sample covariance of full-batch gradients across
/// independently sampled batches at fixed parameters.
pub fn gradient_variance_trace(
    params: &PolicyParams,
    pcfg: &PolicyConfig,
    spec: &TaskSpec,
    fcfg: &FeatureConfig,
    cfg: &TrainConfig,
    probe: &ProbeModel,
    batches: usize,
    step_base: u64,
) -> Result<f64> {
    if batches < 2 {
        return Err(CoreError::InvalidConfig(format!(
            "covariance needs at least 2 batches, got {batches}"
        )));
    }
    let mut grads = Vec::with_capacity(batches);
    for b in 0..batches {
        grads.push(batch_gradient(
            params,
            pcfg,
            spec,
            fcfg,
            cfg,
            probe,
            step_base + b as u64,
        )?);
    }
    let dim = grads[0].len();
    let mut center = vec![0.0; dim];
    for g in &grads {
        for (c, v) in center.iter_mut().zip(g) {
            *c += v;
        }
    }
    for c in &mut center {
        *c /= batches as f64;
    }
    let mut total = 0.0;
    for g in &grads {
        for (c, v) in center.iter().zip(g) {
            let d = v - c;
            total += d * d;
        }
    }
    Ok(total / (batches as f64 - 1.0))
}

struct RunSink {
    steps: CsvWriter,
    checkpoint_dir: std::path::PathBuf,
}

const STEP_COLUMNS: [&str; 8] = [
    "step",
    "reward_mean",
    "baseline_mean",
    "grad_norm",
    "online_mae",
    "adv_var_ratio",
    "entropy_mean",
    "rollouts_consumed",
];

fn open_sink(out_dir: &Path) -> Result<RunSink> {
    std::fs::create_dir_all(out_dir)?;
    let checkpoint_dir = out_dir.join("checkpoints");
    std::fs::create_dir_all(&checkpoint_dir)?;
    let steps = CsvWriter::create(&out_dir.join("steps.csv"), "train-steps", 1, &STEP_COLUMNS)?;
    Ok(RunSink {
        steps,
        checkpoint_dir,
    })
}

fn write_checkpoint(
    sink: &RunSink,
    pcfg: &PolicyConfig,
    params: &PolicyParams,
    probe: &ProbeModel,
    completed: u64,
) -> Result<()> {
    let policy_path = sink.checkpoint_dir.join(format!("policy_step{completed:06}.txt"));
    save_policy(&policy_path, pcfg, params)?;
    if probe.is_fitted() {
        let probe_path = sink.checkpoint_dir.join(format!("probe_step{completed:06}.txt"));
        save_probe(&probe_path, probe)?;
    }
    Ok(())
}

fn report_row(report: &StepReport) -> Vec<Cell> {
    vec![
        Cell::U64(report.step),
        Cell::F64(report.reward_mean),
        Cell::F64(report.baseline_mean),
        Cell::F64(report.grad_norm),
        Cell::opt(report.online_mae),
        Cell::opt(report.adv_var_ratio),
        Cell::F64(report.entropy_mean),
        Cell::U64(report.rollouts_consumed),
    ]
}

/// Run a full training loop. When `out_dir` is given, a per-step CSV and
/// policy/probe checkpoints are written under it; checkpoints always cover
/// step 0 and the final step.
pub fn run_training(
    spec: &TaskSpec,
    pcfg: &PolicyConfig,
    fcfg: &FeatureConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainRun> {
    spec.validate()?;
    pcfg.validate()?;
    fcfg.validate()?;
    cfg.validate()?;
    if pcfg.vocab_size != spec.vocab_size {
        return Err(CoreError::InvalidConfig(format!(
            "policy vocab {} does not match task vocab {}",
            pcfg.vocab_size, spec.vocab_size
        )));
    }

    let pool = if cfg.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.threads)
                .build()
                .map_err(|e| CoreError::InvalidConfig(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };

    let mut params = init_params(pcfg);
    let mut probe = ProbeModel::unfitted(cfg.probe_alpha);
    let mut buffer = ValueBuffer::new(cfg.probe_window);
    let mut sink = match out_dir {
        Some(dir) => Some(open_sink(dir)?),
        None => None,
    };
    if let Some(s) = &sink {
        write_checkpoint(s, pcfg, &params, &probe, 0)?;
    }

    let mut reports = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let run_step = |parallel: bool| -> Result<(BatchOutcome, f64, PolicyParams)> {
            let batch = collect_batch(&params, pcfg, spec, fcfg, cfg, &probe, step)?;
            let mut next = params.clone();
            let grad_norm = if batch.advantages.is_empty() {
                0.0
            } else {
                policy_update(
                    &mut next,
                    pcfg,
                    &batch.records,
                    &batch.advantages,
                    cfg,
                    step,
                    parallel,
                )?
            };
            Ok((batch, grad_norm, next))
        };
        let (batch, grad_norm, next_params) = match &pool {
            Some(p) => p.install(|| run_step(true))?,
            None => run_step(false)?,
        };
        params = next_params;

        if cfg.method == Method::Poise {
            let mut training_set = buffer.examples().to_vec();
            training_set.extend(batch.new_examples.iter().cloned());
            probe = ProbeModel::fit(&training_set, cfg.probe_alpha)?;
            buffer.push_and_evict(batch.new_examples.clone(), step);
        }

        let entropy_terms = batch
            .records
            .iter()
            .map(|r| entropy_stats(r).map(|s| s.mean))
            .collect::<Result<Vec<f64>>>()?;
        let adv_var_ratio = if batch.advantages.len() >= 2 {
            variance_reduction_ratio(&batch.rewards, &batch.advantages)?
                .map(|reduction| 1.0 - reduction)
        } else {
            None
        };
        let report = StepReport {
            step,
            reward_mean: mean(&batch.rewards),
            baseline_mean: mean(&batch.baselines),
            grad_norm,
            online_mae: batch.online_mae,
            adv_var_ratio,
            entropy_mean: mean(&entropy_terms),
            rollouts_consumed: batch.rollouts_consumed,
            degenerate_cap_hit: batch.degenerate_cap_hit,
        };
        if let Some(s) = &mut sink {
            s.steps.write_row(&report_row(&report))?;
        }
        reports.push(report);

        let completed = step + 1;
        if completed % cfg.checkpoint_interval.max(1) == 0 && completed != cfg.steps {
            if let Some(s) = &sink {
                write_checkpoint(s, pcfg, &params, &probe, completed)?;
            }
        }
    }
    if cfg.steps > 0 {
        if let Some(s) = &sink {
            write_checkpoint(s, pcfg, &params, &probe, cfg.steps)?;
        }
    }
    if let Some(s) = sink {
        s.steps.finish()?;
    }
    Ok(TrainRun {
        reports,
        params,
        probe,
        buffer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::TaskSpec;
    use crate::features::FeatureConfig;
    use crate::policy::{forward_logits, load_policy, softmax, weighted_logprob_grad};
    use crate::probe::load_probe;

    fn bandit_spec() -> TaskSpec {
        // One context, four actions, only action 2 pays.
        TaskSpec::table_bandit_with_table(vec![vec![0, 0, 1, 0]], 3).unwrap()
    }

    fn bandit_policy(spec: &TaskSpec, seed: u64) -> PolicyConfig {
        PolicyConfig {
            vocab_size: spec.vocab_size,
            embed_dim: 4,
            hidden_dim: 8,
            num_layers: 1,
            seed,
        }
    }

    fn quick_cfg(method: Method) -> TrainConfig {
        let mut cfg = TrainConfig::defaults(method);
        cfg.prompts_per_batch = 4;
        cfg.steps = 3;
        cfg.checkpoint_interval = 2;
        cfg
    }

    #[test]
    fn defaults_follow_method() {
        let poise = TrainConfig::defaults(Method::Poise);
        assert_eq!(poise.prompts_per_batch, 64);
        assert_eq!(poise.rollouts_per_prompt, 2);
        assert_eq!(poise.loss_norm, LossNorm::Sequence);
        let dapo = TrainConfig::defaults(Method::DapoLite);
        assert_eq!(dapo.rollouts_per_prompt, 8);
        assert_eq!(dapo.loss_norm, LossNorm::Token);
        assert!(poise.validate().is_ok());
    }

    #[test]
    fn validation_rejects_bad_shapes() {
        let mut cfg = TrainConfig::defaults(Method::Poise);
        cfg.rollouts_per_prompt = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::defaults(Method::Grpo);
        cfg.rollouts_per_prompt = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::defaults(Method::Reinforce);
        cfg.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::defaults(Method::Reinforce);
        cfg.clip_eps_low = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in [Method::Reinforce, Method::Grpo, Method::DapoLite, Method::Poise] {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("ppo".parse::<Method>().is_err());
        for n in [LossNorm::Sequence, LossNorm::Token] {
            assert_eq!(n.name().parse::<LossNorm>().unwrap(), n);
        }
    }

    #[test]
    fn surrogate_term_and_coeff_cover_all_branches() {
        let (el, eh) = (0.2, 0.28);
        // Inside the trust band the term is linear and the coeff is r * A.
        assert_eq!(ppo_surrogate_term(1.0, 2.0, el, eh), 2.0);
        assert_eq!(clipped_token_coeff(1.0, 2.0, el, eh), 2.0);
        // Positive advantage, ratio too high: value saturates, coeff dies.
        assert_eq!(ppo_surrogate_term(1.5, 1.0, el, eh), 1.28);
        assert_eq!(clipped_token_coeff(1.5, 1.0, el, eh), 0.0);
        // Positive advantage, ratio low: min picks the unclipped branch.
        assert_eq!(ppo_surrogate_term(0.5, 1.0, el, eh), 0.5);
        assert_eq!(clipped_token_coeff(0.5, 1.0, el, eh), 0.5);
        // Negative advantage, ratio low: saturates at the low clip.
        assert_eq!(ppo_surrogate_term(0.5, -1.0, el, eh), -0.8);
        assert_eq!(clipped_token_coeff(0.5, -1.0, el, eh), 0.0);
        // Negative advantage, ratio high: unclipped branch is smaller.
        assert_eq!(ppo_surrogate_term(1.5, -1.0, el, eh), -1.5);
        assert_eq!(clipped_token_coeff(1.5, -1.0, el, eh), -1.5);
    }

    #[test]
    fn coeff_matches_numeric_derivative_of_term() {
        // d term / d logratio = coeff at non-kink points.
        let (el, eh) = (0.2, 0.28);
        let h = 1e-6;
        for &(ratio, adv) in &[
            (1.0, 0.7),
            (0.9, -0.4),
            (1.5, 0.3),
            (0.5, 0.3),
            (1.5, -0.3),
            (0.5, -0.3),
        ] {
            let rho = (ratio as f64).ln();
            let up = ppo_surrogate_term((rho + h).exp(), adv, el, eh);
            let down = ppo_surrogate_term((rho - h).exp(), adv, el, eh);
            let numeric = (up - down) / (2.0 * h);
            let analytic = clipped_token_coeff(ratio, adv, el, eh);
            assert!(
                (numeric - analytic).abs() < 1e-5,
                "ratio {ratio} adv {adv}: numeric {numeric} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn fresh_batch_ratios_are_one() {
        let spec = TaskSpec::mod_arith_default(0);
        let pcfg = PolicyConfig::for_vocab(spec.vocab_size, 11);
        let params = init_params(&pcfg);
        let cfg = TrainConfig::defaults(Method::Poise);
        let group = sample_group(&params, &pcfg, &spec, &cfg, 0, 0).unwrap();
        for rec in &group {
            for r in token_ratios(&params, &pcfg, rec).unwrap() {
                assert!((r - 1.0).abs() < 1e-10, "ratio {r}");
            }
        }
    }

    #[test]
    fn surrogate_gradient_matches_weighted_grad_at_sampling_params() {
        // With ratios equal to 1 the surrogate gradient reduces to the
        // advantage-weighted log-prob gradient under the chosen norm.
        let spec = TaskSpec::mod_arith_default(0);
        let pcfg = PolicyConfig::for_vocab(spec.vocab_size, 7);
        let params = init_params(&pcfg);
        let mut cfg = TrainConfig::defaults(Method::Reinforce);
        cfg.prompts_per_batch = 3;
        cfg.rollouts_per_prompt = 1;
        let mut records = Vec::new();
        for i in 0..3 {
            records.extend(sample_group(&params, &pcfg, &spec, &cfg, 0, i).unwrap());
        }
        let advantages = [0.7, -0.3, 1.1];

        for norm in [LossNorm::Sequence, LossNorm::Token] {
            cfg.loss_norm = norm;
            let got = surrogate_gradient(&params, &pcfg, &records, &advantages, &cfg, false).unwrap();
            let total_tokens: usize = records.iter().map(|r| r.generated.len()).sum();
            let mut want = vec![0.0; got.len()];
            for (rec, adv) in records.iter().zip(advantages) {
                let scale = match norm {
                    LossNorm::Sequence => 1.0 / (records.len() as f64 * rec.generated.len() as f64),
                    LossNorm::Token => 1.0 / total_tokens as f64,
                };
                let weights = vec![scale * adv; rec.generated.len()];
                let out = weighted_logprob_grad(
                    &params,
                    &pcfg,
                    &rec.prompt.tokens,
                    &rec.generated,
                    &weights,
                )
                .unwrap();
                for (w, g) in want.iter_mut().zip(&out.grad) {
                    *w += g;
                }
            }
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{norm:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn sequence_and_token_norms_disagree_on_ragged_batches() {
        let spec = TaskSpec::mod_arith_default(0);
        let pcfg = PolicyConfig::for_vocab(spec.vocab_size, 19);
        let params = init_params(&pcfg);
        let mut cfg = TrainConfig::defaults(Method::Reinforce);
        cfg.prompts_per_batch = 4;
        cfg.rollouts_per_prompt = 1;
        let mut records = Vec::new();
        for i in 0..4 {
            records.extend(sample_group(&params, &pcfg, &spec, &cfg, 1, i).unwrap());
        }
        let lens: Vec<usize> = records.iter().map(|r| r.generated.len()).collect();
        if lens.iter().all(|&l| l == lens[0]) {
            // Equal lengths make the two norms provably proportional; this
            // seed produces ragged lengths, so reaching here is a bug.
            panic!("expected ragged rollout lengths, got {lens:?}");
        }
        let advantages = vec![1.0; records.len()];
        cfg.loss_norm = LossNorm::Sequence;
        let seq = surrogate_gradient(&params, &pcfg, &records, &advantages, &cfg, false).unwrap();
        cfg.loss_norm = LossNorm::Token;
        let tok = surrogate_gradient(&params, &pcfg, &records, &advantages, &cfg, false).unwrap();
        let diff: f64 = seq.iter().zip(&tok).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-8, "norms should differ on ragged batches");
    }

    #[test]
    fn update_moves_toward_rewarded_action() {
        let spec = bandit_spec();
        let pcfg = bandit_policy(&spec, 5);
        let mut cfg = TrainConfig::defaults(Method::Reinforce);
        cfg.prompts_per_batch = 16;
        cfg.learning_rate = 0.5;
        let mut params = init_params(&pcfg);
        let prompt = env::bandit_prompt(&spec, 0);
        let before = softmax(&forward_logits(&params, &pcfg, &prompt.tokens).unwrap().0)[2];
        for step in 0..5 {
            let batch =
                collect_batch(&params, &pcfg, &spec, &FeatureConfig::default_for_layers(1), &cfg, &ProbeModel::unfitted(0.01), step)
                    .unwrap();
            policy_update(&mut params, &pcfg, &batch.records, &batch.advantages, &cfg, step, false)
                .unwrap();
        }
        let after = softmax(&forward_logits(&params, &pcfg, &prompt.tokens).unwrap().0)[2];
        assert!(
            after > before,
            "P(rewarded action) fell from {before} to {after}"
        );
    }

    #[test]
    fn poise_learns_the_bandit() {
        let spec = bandit_spec();
        let pcfg = bandit_policy(&spec, 1);
        let fcfg = FeatureConfig::default_for_layers(pcfg.num_layers);
        let mut cfg = TrainConfig::defaults(Method::Poise);
        cfg.prompts_per_batch = 8;
        cfg.steps = 120;
        cfg.learning_rate = 0.1;
        cfg.checkpoint_interval = 1000;
        let run = run_training(&spec, &pcfg, &fcfg, &cfg, None).unwrap();
        let tail: Vec<f64> = run.reports[100..].iter().map(|r| r.reward_mean).collect();
        assert!(
            mean(&tail) > 0.7,
            "late reward {} after 120 steps",
            mean(&tail)
        );
        // The probe ends up fitted and the online MAE is eventually present.
        assert!(run.probe.is_fitted());
        assert!(run.reports[0].online_mae.is_none());
        assert!(run.reports[10].online_mae.is_some());
    }

    #[test]
    fn grpo_learns_the_bandit() {
        let spec = bandit_spec();
        let pcfg = bandit_policy(&spec, 2);
        let fcfg = FeatureConfig::default_for_layers(pcfg.num_layers);
        let mut cfg = TrainConfig::defaults(Method::Grpo);
        cfg.prompts_per_batch = 4;
        cfg.rollouts_per_prompt = 4;
        cfg.steps = 120;
        cfg.learning_rate = 0.1;
        cfg.checkpoint_interval = 1000;
        let run = run_training(&spec, &pcfg, &fcfg, &cfg, None).unwrap();
        let tail: Vec<f64> = run.reports[100..].iter().map(|r| r.reward_mean).collect();
        assert!(mean(&tail) > 0.7, "late reward {}", mean(&tail));
        // Group baselines mean advantages sum to zero per group, so the
        // variance ratio should eventually drop below 1.
        let ratios: Vec<f64> = run.reports[20..]
            .iter()
            .filter_map(|r| r.adv_var_ratio)
            .collect();
        assert!(!ratios.is_empty());
    }

    #[test]
    fn dapo_discards_and_resamples_degenerate_groups() {
        // Constant rewards: every group is degenerate, the cap is hit, and
        // no update happens, but consumption is still accounted.
        let spec = TaskSpec::table_bandit_with_table(vec![vec![1, 1, 1, 1]], 3).unwrap();
        let pcfg = bandit_policy(&spec, 4);
        let fcfg = FeatureConfig::default_for_layers(pcfg.num_layers);
        let mut cfg = TrainConfig::defaults(Method::DapoLite);
        cfg.prompts_per_batch = 2;
        cfg.rollouts_per_prompt = 2;
        cfg.steps = 1;
        let run = run_training(&spec, &pcfg, &fcfg, &cfg, None).unwrap();
        let report = &run.reports[0];
        assert!(report.degenerate_cap_hit);
        assert_eq!(report.rollouts_consumed, 8 * 2 * 2);
        assert_eq!(report.grad_norm, 0.0);
        assert_eq!(report.reward_mean, 1.0);
        assert_eq!(report.adv_var_ratio, None);
    }

    #[test]
    fn dapo_consumption_counts_only_what_it_draws() {
        // Mixed-reward bandit: most groups are non-degenerate, so the cap
        // is rarely approached, but consumed >= accepted * group size.
        let spec = TaskSpec::table_bandit_with_table(vec![vec![1, 0, 1, 0]], 3).unwrap();
        let pcfg = bandit_policy(&spec, 6);
        let fcfg = FeatureConfig::default_for_layers(pcfg.num_layers);
        let mut cfg = TrainConfig::defaults(Method::DapoLite);
        cfg.prompts_per_batch = 4;
        cfg.rollouts_per_prompt = 4;
        cfg.steps = 2;
        let run = run_training(&spec, &pcfg, &fcfg, &cfg, None).unwrap();
        for r in &run.reports {
            assert!(r.rollouts_consumed >= 16);
            assert!(r.rollouts_consumed <= 8 * 4 * 4);
            assert_eq!(r.rollouts_consumed % 4, 0);
        }
    }

    #[test]
    fn poise_consumes_exactly_two_per_prompt() {
        let spec = bandit_spec();
        let pcfg = bandit_policy(&spec, 7);
        let fcfg = FeatureConfig::default_for_layers(pcfg.num_layers);
        let mut cfg = quick_cfg(Method::Poise);
        cfg.checkpoint_interval = 100;
        let run = run_training(&spec, &pcfg, &fcfg, &cfg, None).unwrap();
        for r in &run.reports {
            assert_eq!(r.rollouts_consumed, 2 * 4);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let spec = TaskSpec::mod_arith_default(0);
        let pcfg = PolicyConfig::for_vocab(spec.vocab_size, 9);
        let fcfg = FeatureConfig::default_for_layers(pcfg.num_layers);
        let mut cfg = quick_cfg(Method::Poise);
        cfg.prompts_per_batch = 3;
        let a = run_training(&spec, &pcfg, &fcfg, &cfg, None).unwrap();
        let b = run_training(&spec, &pcfg, &fcfg, &cfg, None).unwrap();
        assert_eq!(a.reports, b.reports);
        assert_eq!(a.params.values, b.params.values);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let spec = TaskSpec::mod_arith_default(0);
        let pcfg = PolicyConfig::for_vocab(spec.vocab_size, 9);
        let fcfg = FeatureConfig::default_for_layers(pcfg.num_layers);
        let mut cfg = quick_cfg(Method::Grpo);
        cfg.prompts_per_batch = 2;
        cfg.rollouts_per_prompt = 4;
        let serial = run_training(&spec, &pcfg, &fcfg, &cfg, None).unwrap();
        cfg.threads = 3;
        let pooled = run_training(&spec, &pcfg, &fcfg, &cfg, None).unwrap();
        assert_eq!(serial.reports, pooled.reports);
        assert_eq!(serial.params.values, pooled.params.values);
    }

    #[test]
    fn run_writes_csv_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let spec = bandit_spec();
        let pcfg = bandit_policy(&spec, 8);
        let fcfg = FeatureConfig::default_for_layers(pcfg.num_layers);
        let mut cfg = quick_cfg(Method::Poise);
        cfg.steps = 5;
        cfg.checkpoint_interval = 2;
        let run = run_training(&spec, &pcfg, &fcfg, &cfg, Some(dir.path())).unwrap();

        let table = crate::metrics::read_csv(&dir.path().join("steps.csv")).unwrap();
        assert_eq!(table.schema, "train-steps");
        assert_eq!(table.rows.len(), 5);
        assert_eq!(table.columns, STEP_COLUMNS.to_vec());
        // The cold-start step has no probe MAE.
        let mae_col = table.column_index("online_mae").unwrap();
        assert_eq!(table.rows[0][mae_col], "NA");
        assert_ne!(table.rows[4][mae_col], "NA");

        let ck = dir.path().join("checkpoints");
        for name in [
            "policy_step000000.txt",
            "policy_step000002.txt",
            "policy_step000004.txt",
            "policy_step000005.txt",
            "probe_step000005.txt",
        ] {
            assert!(ck.join(name).exists(), "missing {name}");
        }
        // Step 0 has no probe yet.
        assert!(!ck.join("probe_step000000.txt").exists());

        let (loaded_cfg, loaded_params) = load_policy(&ck.join("policy_step000005.txt")).unwrap();
        assert_eq!(loaded_cfg, pcfg);
        assert_eq!(loaded_params.values, run.params.values);
        let loaded_probe = load_probe(&ck.join("probe_step000005.txt")).unwrap();
        let phi = vec![0.1; run.probe.dim().unwrap()];
        assert_eq!(
            loaded_probe.predict(&phi).unwrap(),
            run.probe.predict(&phi).unwrap()
        );
    }

    #[test]
    fn zero_steps_still_checkpoints_the_init() {
        let dir = tempfile::tempdir().unwrap();
        let spec = bandit_spec();
        let pcfg = bandit_policy(&spec, 12);
        let fcfg = FeatureConfig::default_for_layers(pcfg.num_layers);
        let mut cfg = quick_cfg(Method::Reinforce);
        cfg.steps = 0;
        let run = run_training(&spec, &pcfg, &fcfg, &cfg, Some(dir.path())).unwrap();
        assert!(run.reports.is_empty());
        assert!(dir
            .path()
            .join("checkpoints/policy_step000000.txt")
            .exists());
        let table = crate::metrics::read_csv(&dir.path().join("steps.csv")).unwrap();
        assert!(table.rows.is_empty());
    }

    #[test]
    fn variance_trace_is_deterministic_and_positive() {
        let spec = bandit_spec();
        let pcfg = bandit_policy(&spec, 13);
        let fcfg = FeatureConfig::default_for_layers(pcfg.num_layers);
        let mut cfg = TrainConfig::defaults(Method::Grpo);
        cfg.prompts_per_batch = 2;
        cfg.rollouts_per_prompt = 4;
        let params = init_params(&pcfg);
        let probe = ProbeModel::unfitted(0.01);
        let a =
            gradient_variance_trace(&params, &pcfg, &spec, &fcfg, &cfg, &probe, 8, 1_000_000)
                .unwrap();
        let b =
            gradient_variance_trace(&params, &pcfg, &spec, &fcfg, &cfg, &probe, 8, 1_000_000)
                .unwrap();
        assert_eq!(a, b);
        assert!(a > 0.0);
        assert!(gradient_variance_trace(&params, &pcfg, &spec, &fcfg, &cfg, &probe, 1, 0).is_err());
    }

    #[test]
    fn mismatched_vocab_is_rejected() {
        let spec = bandit_spec();
        let pcfg = PolicyConfig {
            vocab_size: spec.vocab_size + 1,
            embed_dim: 4,
            hidden_dim: 8,
            num_layers: 1,
            seed: 0,
        };
        let fcfg = FeatureConfig::default_for_layers(1);
        let cfg = quick_cfg(Method::Reinforce);
        assert!(run_training(&spec, &pcfg, &fcfg, &cfg, None).is_err());
    }
}
