//! Run configuration: a TOML file with one section per concern, parsed
//! strictly (unknown keys are errors) and resolved against per-method
//! defaults. Every command persists the fully resolved configuration next
//! to its outputs so a run can be reproduced from the artifact directory
//! alone.
//!
//! Output-directory precedence: `--output-dir` flag, then the
//! `POISE_OUTPUT_DIR` environment variable, then the `output_dir` config
//! key. That variable is the only environment input the binary reads.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use poise_core::env::{TaskFamily, TaskSpec};
use poise_core::features::{feature_dim, FeatureConfig, FeatureMask};
use poise_core::policy::PolicyConfig;
use poise_core::trainer::{LossNorm, Method, TrainConfig};

use crate::error::{CliError, Result};

/// Environment variable that overrides the configured output directory.
pub const OUTPUT_DIR_ENV: &str = "POISE_OUTPUT_DIR";

/// Name of the resolved-config artifact written into every run directory.
pub const RESOLVED_NAME: &str = "config.resolved";

// ---------------------------------------------------------------------------
// Raw (file) layer: everything optional, unknown keys rejected.
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub task: Option<RawTask>,
    pub policy: Option<RawPolicy>,
    pub features: Option<RawFeatures>,
    pub train: Option<RawTrain>,
    pub variance_lab: Option<RawVarianceLab>,
    pub probe_eval: Option<RawProbeEval>,
    pub ablate: Option<RawAblate>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawTask {
    /// "mod-arith" or "table-bandit".
    pub family: Option<String>,
    pub modulus: Option<usize>,
    pub vocab_size: Option<usize>,
    pub max_reasoning_len: Option<usize>,
    pub context_count: Option<usize>,
    pub action_count: Option<usize>,
    pub reward_density: Option<f64>,
    /// Task-level seed (reward table, prompt distribution). Defaults to the
    /// top-level seed.
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawPolicy {
    pub embed_dim: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub num_layers: Option<usize>,
    /// Parameter-init seed. Defaults to the top-level seed.
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawFeatures {
    pub layer: Option<usize>,
    pub prompt_pool: Option<usize>,
    pub reasoning_pool: Option<usize>,
    /// Mask label: "full" or a '+'-joined subset of
    /// prompt/reasoning/entropy/length.
    pub mask: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawTrain {
    /// "reinforce", "grpo", "dapo-lite", or "poise".
    pub method: Option<String>,
    pub prompts_per_batch: Option<usize>,
    pub rollouts_per_prompt: Option<usize>,
    pub steps: Option<u64>,
    pub learning_rate: Option<f64>,
    pub clip_eps_low: Option<f64>,
    pub clip_eps_high: Option<f64>,
    pub inner_epochs: Option<usize>,
    pub minibatch_size: Option<usize>,
    /// "sequence" or "token".
    pub loss_norm: Option<String>,
    pub probe_alpha: Option<f64>,
    pub probe_window: Option<u64>,
    pub checkpoint_interval: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawVarianceLab {
    pub budget: Option<usize>,
    pub m_values: Option<Vec<usize>>,
    pub trials: Option<usize>,
    /// "zero" or "state-value": baseline subtracted inside the estimator.
    pub baseline: Option<String>,
    /// Empirical-vs-predicted gate in jackknife standard errors.
    pub tolerance_se: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawProbeEval {
    pub features_path: Option<PathBuf>,
    pub targets_path: Option<PathBuf>,
    pub train_fraction: Option<f64>,
    pub alpha: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawAblate {
    pub num_prompts: Option<usize>,
    pub rollouts_per_prompt: Option<usize>,
    /// Feature-mask axis: list of mask labels.
    pub masks: Option<Vec<String>>,
    /// Probe-layer axis: list of 1-based layer indices.
    pub layers: Option<Vec<usize>>,
    /// Pooling-window axis: list of window sizes applied to both pools.
    pub pools: Option<Vec<usize>>,
    pub train_fraction: Option<f64>,
    pub alpha: Option<f64>,
    /// Optional policy checkpoint to probe; defaults to a fresh init.
    pub policy_path: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// Resolved layer: concrete values, serialized into config.resolved.
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct ResolvedConfig {
    pub seed: u64,
    pub threads: usize,
    pub output_dir: String,
    pub task: ResolvedTask,
    pub policy: ResolvedPolicy,
    pub features: ResolvedFeatures,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<ResolvedTrain>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variance_lab: Option<ResolvedVarianceLab>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe_eval: Option<ResolvedProbeEval>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ablate: Option<ResolvedAblate>,
}

#[derive(Debug, Serialize)]
pub struct ResolvedTask {
    pub family: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub modulus: Option<usize>,
    pub vocab_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_reasoning_len: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub context_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub action_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reward_density: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct ResolvedPolicy {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub seed: u64,
}

#[derive(Debug, Serialize)]
pub struct ResolvedFeatures {
    pub layer: usize,
    pub prompt_pool: usize,
    pub reasoning_pool: usize,
    pub mask: String,
    pub dim: usize,
}

#[derive(Debug, Serialize)]
pub struct ResolvedTrain {
    pub method: String,
    pub prompts_per_batch: usize,
    pub rollouts_per_prompt: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub clip_eps_low: f64,
    pub clip_eps_high: f64,
    pub inner_epochs: usize,
    pub minibatch_size: usize,
    pub loss_norm: String,
    pub probe_alpha: f64,
    pub probe_window: u64,
    pub checkpoint_interval: u64,
}

#[derive(Debug, Serialize)]
pub struct ResolvedVarianceLab {
    pub budget: usize,
    pub m_values: Vec<usize>,
    pub trials: usize,
    pub baseline: String,
    pub tolerance_se: f64,
}

#[derive(Debug, Serialize)]
pub struct ResolvedProbeEval {
    pub features_path: String,
    pub targets_path: String,
    pub train_fraction: f64,
    pub alpha: f64,
}

#[derive(Debug, Serialize)]
pub struct ResolvedAblate {
    pub num_prompts: usize,
    pub rollouts_per_prompt: usize,
    pub masks: Vec<String>,
    pub layers: Vec<usize>,
    pub pools: Vec<usize>,
    pub train_fraction: f64,
    pub alpha: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy_path: Option<String>,
}

// ---------------------------------------------------------------------------
// Working resolution handed to the commands.
// ---------------------------------------------------------------------------

/// Baseline choice for the variance lab sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepBaseline {
    Zero,
    StateValue,
}

impl SweepBaseline {
    pub fn name(self) -> &'static str {
        match self {
            SweepBaseline::Zero => "zero",
            SweepBaseline::StateValue => "state-value",
        }
    }
}

#[derive(Debug, Clone)]
pub struct VarianceLabSettings {
    pub budget: usize,
    pub m_values: Vec<usize>,
    pub trials: usize,
    pub baseline: SweepBaseline,
    pub tolerance_se: f64,
}

#[derive(Debug, Clone)]
pub struct ProbeEvalSettings {
    pub features_path: PathBuf,
    pub targets_path: PathBuf,
    pub train_fraction: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct AblateSettings {
    pub num_prompts: usize,
    pub rollouts_per_prompt: usize,
    pub masks: Vec<FeatureMask>,
    pub layers: Vec<usize>,
    pub pools: Vec<usize>,
    pub train_fraction: f64,
    pub alpha: f64,
    pub policy_path: Option<PathBuf>,
}

/// Everything a command needs: concrete core configs plus the serializable
/// resolved snapshot.
#[derive(Debug)]
pub struct Resolution {
    pub seed: u64,
    pub threads: usize,
    pub config_output_dir: Option<PathBuf>,
    pub task: TaskSpec,
    /// Reward density the bandit table was drawn with, echoed into the
    /// snapshot (the table itself is reproducible from the task seed).
    pub task_density: Option<f64>,
    pub policy: PolicyConfig,
    pub features: FeatureConfig,
    pub train: Option<TrainConfig>,
    pub variance_lab: Option<VarianceLabSettings>,
    pub probe_eval: Option<ProbeEvalSettings>,
    pub ablate: Option<AblateSettings>,
}

/// Which command section must be resolved in addition to the common ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Needs {
    Train,
    VarianceLab,
    ProbeEval,
    Ablate,
}

pub fn load_raw(path: &Path) -> Result<RawConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text)
        .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
}

fn parse_family(label: &str) -> Result<TaskFamily> {
    match label {
        "mod-arith" => Ok(TaskFamily::ModArith),
        "table-bandit" => Ok(TaskFamily::TableBandit),
        other => Err(CliError::Config(format!(
            "unknown task family {other:?}; expected mod-arith or table-bandit"
        ))),
    }
}

fn family_label(family: TaskFamily) -> &'static str {
    match family {
        TaskFamily::ModArith => "mod-arith",
        TaskFamily::TableBandit => "table-bandit",
    }
}

fn resolve_task(raw: Option<&RawTask>, top_seed: u64) -> Result<(TaskSpec, Option<f64>)> {
    let default = RawTask::default();
    let raw = raw.unwrap_or(&default);
    let seed = raw.seed.unwrap_or(top_seed);
    let family = match &raw.family {
        Some(label) => parse_family(label)?,
        None => TaskFamily::ModArith,
    };
    match family {
        TaskFamily::ModArith => {
            for (key, set) in [
                ("context_count", raw.context_count.is_some()),
                ("action_count", raw.action_count.is_some()),
                ("reward_density", raw.reward_density.is_some()),
            ] {
                if set {
                    return Err(CliError::Config(format!(
                        "task.{key} only applies to the table-bandit family"
                    )));
                }
            }
            let modulus = raw.modulus.unwrap_or(7);
            let vocab = raw.vocab_size.unwrap_or(16);
            let reasoning = raw.max_reasoning_len.unwrap_or(8);
            let spec = TaskSpec::mod_arith(modulus, vocab, reasoning, seed)?;
            Ok((spec, None))
        }
        TaskFamily::TableBandit => {
            for (key, set) in [
                ("modulus", raw.modulus.is_some()),
                ("vocab_size", raw.vocab_size.is_some()),
                ("max_reasoning_len", raw.max_reasoning_len.is_some()),
            ] {
                if set {
                    return Err(CliError::Config(format!(
                        "task.{key} only applies to the mod-arith family"
                    )));
                }
            }
            let contexts = raw.context_count.unwrap_or(6);
            let actions = raw.action_count.unwrap_or(6);
            let density = raw.reward_density.unwrap_or(0.5);
            let spec = TaskSpec::table_bandit(contexts, actions, density, seed)?;
            Ok((spec, Some(density)))
        }
    }
}

fn resolve_policy(raw: Option<&RawPolicy>, vocab: usize, top_seed: u64) -> PolicyConfig {
    let default = RawPolicy::default();
    let raw = raw.unwrap_or(&default);
    let mut cfg = PolicyConfig::for_vocab(vocab, raw.seed.unwrap_or(top_seed));
    if let Some(v) = raw.embed_dim {
        cfg.embed_dim = v;
    }
    if let Some(v) = raw.hidden_dim {
        cfg.hidden_dim = v;
    }
    if let Some(v) = raw.num_layers {
        cfg.num_layers = v;
    }
    cfg
}

fn resolve_features(raw: Option<&RawFeatures>, num_layers: usize) -> Result<FeatureConfig> {
    let default = RawFeatures::default();
    let raw = raw.unwrap_or(&default);
    let mut cfg = FeatureConfig::default_for_layers(num_layers);
    if let Some(v) = raw.layer {
        cfg.layer = v;
    }
    if let Some(v) = raw.prompt_pool {
        cfg.prompt_pool = v;
    }
    if let Some(v) = raw.reasoning_pool {
        cfg.reasoning_pool = v;
    }
    if let Some(label) = &raw.mask {
        cfg.mask = FeatureMask::from_label(label)?;
    }
    Ok(cfg)
}

fn resolve_train(raw: Option<&RawTrain>, seed: u64, threads: usize) -> Result<TrainConfig> {
    let default = RawTrain::default();
    let raw = raw.unwrap_or(&default);
    let method: Method = raw.method.as_deref().unwrap_or("poise").parse()?;
    let mut cfg = TrainConfig::defaults(method);
    cfg.seed = seed;
    cfg.threads = threads;
    if let Some(v) = raw.prompts_per_batch {
        cfg.prompts_per_batch = v;
    }
    if let Some(v) = raw.rollouts_per_prompt {
        cfg.rollouts_per_prompt = v;
    }
    if let Some(v) = raw.steps {
        cfg.steps = v;
    }
    if let Some(v) = raw.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = raw.clip_eps_low {
        cfg.clip_eps_low = v;
    }
    if let Some(v) = raw.clip_eps_high {
        cfg.clip_eps_high = v;
    }
    if let Some(v) = raw.inner_epochs {
        cfg.inner_epochs = v;
    }
    if let Some(v) = raw.minibatch_size {
        cfg.minibatch_size = v;
    }
    if let Some(label) = &raw.loss_norm {
        cfg.loss_norm = label.parse::<LossNorm>()?;
    }
    if let Some(v) = raw.probe_alpha {
        cfg.probe_alpha = v;
    }
    if let Some(v) = raw.probe_window {
        cfg.probe_window = v;
    }
    if let Some(v) = raw.checkpoint_interval {
        cfg.checkpoint_interval = v;
    }
    Ok(cfg)
}

fn resolve_variance_lab(raw: Option<&RawVarianceLab>) -> Result<VarianceLabSettings> {
    let default = RawVarianceLab::default();
    let raw = raw.unwrap_or(&default);
    let baseline = match raw.baseline.as_deref().unwrap_or("zero") {
        "zero" => SweepBaseline::Zero,
        "state-value" => SweepBaseline::StateValue,
        other => {
            return Err(CliError::Config(format!(
                "unknown variance_lab baseline {other:?}; expected zero or state-value"
            )))
        }
    };
    let settings = VarianceLabSettings {
        budget: raw.budget.unwrap_or(8),
        m_values: raw.m_values.clone().unwrap_or_else(|| vec![1, 2, 4, 8]),
        trials: raw.trials.unwrap_or(100_000),
        baseline,
        tolerance_se: raw.tolerance_se.unwrap_or(3.0),
    };
    if settings.trials < 2 {
        return Err(CliError::Config(
            "variance_lab.trials must be at least 2 for a jackknife standard error".into(),
        ));
    }
    if !(settings.tolerance_se.is_finite() && settings.tolerance_se > 0.0) {
        return Err(CliError::Config(
            "variance_lab.tolerance_se must be positive and finite".into(),
        ));
    }
    Ok(settings)
}

fn check_fraction(fraction: f64, key: &str) -> Result<()> {
    if !(fraction.is_finite() && 0.0 < fraction && fraction < 1.0) {
        return Err(CliError::Config(format!(
            "{key} must lie strictly between 0 and 1, got {fraction}"
        )));
    }
    Ok(())
}

fn resolve_probe_eval(
    raw: Option<&RawProbeEval>,
    features_flag: Option<PathBuf>,
    targets_flag: Option<PathBuf>,
) -> Result<ProbeEvalSettings> {
    let default = RawProbeEval::default();
    let raw = raw.unwrap_or(&default);
    let features_path = features_flag
        .or_else(|| raw.features_path.clone())
        .ok_or_else(|| {
            CliError::Config(
                "probe-eval needs a features CSV: pass --features or set probe_eval.features_path"
                    .into(),
            )
        })?;
    let targets_path = targets_flag
        .or_else(|| raw.targets_path.clone())
        .ok_or_else(|| {
            CliError::Config(
                "probe-eval needs a targets CSV: pass --targets or set probe_eval.targets_path"
                    .into(),
            )
        })?;
    let train_fraction = raw.train_fraction.unwrap_or(0.8);
    check_fraction(train_fraction, "probe_eval.train_fraction")?;
    let alpha = raw.alpha.unwrap_or(0.01);
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(CliError::Config(format!(
            "probe_eval.alpha must be non-negative, got {alpha}"
        )));
    }
    Ok(ProbeEvalSettings {
        features_path,
        targets_path,
        train_fraction,
        alpha,
    })
}

fn resolve_ablate(raw: Option<&RawAblate>) -> Result<AblateSettings> {
    let default = RawAblate::default();
    let raw = raw.unwrap_or(&default);
    let mask_labels = raw.masks.clone().unwrap_or_else(|| {
        vec![
            "full".to_string(),
            "prompt".to_string(),
            "reasoning".to_string(),
            "entropy".to_string(),
        ]
    });
    let masks = mask_labels
        .iter()
        .map(|label| FeatureMask::from_label(label).map_err(CliError::from))
        .collect::<Result<Vec<_>>>()?;
    let layers = raw.layers.clone().unwrap_or_default();
    let pools = raw.pools.clone().unwrap_or_default();
    if masks.is_empty() && layers.is_empty() && pools.is_empty() {
        return Err(CliError::Config(
            "ablate needs at least one non-empty axis (masks, layers, or pools)".into(),
        ));
    }
    let settings = AblateSettings {
        num_prompts: raw.num_prompts.unwrap_or(64),
        rollouts_per_prompt: raw.rollouts_per_prompt.unwrap_or(4),
        masks,
        layers,
        pools,
        train_fraction: raw.train_fraction.unwrap_or(0.8),
        alpha: raw.alpha.unwrap_or(0.01),
        policy_path: raw.policy_path.clone(),
    };
    if settings.num_prompts == 0 {
        return Err(CliError::Config("ablate.num_prompts must be positive".into()));
    }
    if settings.rollouts_per_prompt < 2 {
        return Err(CliError::Config(
            "ablate.rollouts_per_prompt must be at least 2 so leave-one-out targets exist".into(),
        ));
    }
    check_fraction(settings.train_fraction, "ablate.train_fraction")?;
    if !(settings.alpha.is_finite() && settings.alpha >= 0.0) {
        return Err(CliError::Config(format!(
            "ablate.alpha must be non-negative, got {}",
            settings.alpha
        )));
    }
    Ok(settings)
}

/// Resolve a parsed file against defaults. `features_flag`/`targets_flag`
/// carry the probe-eval command-line overrides and are ignored by other
/// commands.
pub fn resolve(
    raw: &RawConfig,
    needs: Needs,
    features_flag: Option<PathBuf>,
    targets_flag: Option<PathBuf>,
) -> Result<Resolution> {
    let seed = raw.seed.unwrap_or(0);
    let threads = raw.threads.unwrap_or(1);
    if threads == 0 {
        return Err(CliError::Config("threads must be at least 1".into()));
    }
    let (task, density) = resolve_task(raw.task.as_ref(), seed)?;
    let policy = resolve_policy(raw.policy.as_ref(), task.vocab_size, seed);
    policy.validate().map_err(CliError::from)?;
    let features = resolve_features(raw.features.as_ref(), policy.num_layers)?;
    features.validate().map_err(CliError::from)?;
    if features.layer > policy.num_layers {
        return Err(CliError::Config(format!(
            "features.layer {} exceeds policy.num_layers {}",
            features.layer, policy.num_layers
        )));
    }

    let mut resolution = Resolution {
        seed,
        threads,
        config_output_dir: raw.output_dir.clone(),
        task,
        task_density: density,
        policy,
        features,
        train: None,
        variance_lab: None,
        probe_eval: None,
        ablate: None,
    };
    match needs {
        Needs::Train => {
            let cfg = resolve_train(raw.train.as_ref(), seed, threads)?;
            cfg.validate().map_err(CliError::from)?;
            resolution.train = Some(cfg);
        }
        Needs::VarianceLab => {
            resolution.variance_lab = Some(resolve_variance_lab(raw.variance_lab.as_ref())?);
        }
        Needs::ProbeEval => {
            resolution.probe_eval = Some(resolve_probe_eval(
                raw.probe_eval.as_ref(),
                features_flag,
                targets_flag,
            )?);
        }
        Needs::Ablate => {
            let settings = resolve_ablate(raw.ablate.as_ref())?;
            for &layer in &settings.layers {
                if layer == 0 || layer > resolution.policy.num_layers {
                    return Err(CliError::Config(format!(
                        "ablate layer {} outside 1..={}",
                        layer, resolution.policy.num_layers
                    )));
                }
            }
            resolution.ablate = Some(settings);
        }
    }
    Ok(resolution)
}

impl Resolution {
    /// Serializable snapshot, with the effective output directory filled in.
    pub fn snapshot(&self, output_dir: &Path) -> ResolvedConfig {
        let task = ResolvedTask {
            family: family_label(self.task.family).to_string(),
            seed: self.task.seed,
            modulus: (self.task.family == TaskFamily::ModArith).then_some(self.task.modulus),
            vocab_size: self.task.vocab_size,
            max_reasoning_len: (self.task.family == TaskFamily::ModArith)
                .then_some(self.task.max_reasoning_len),
            context_count: (self.task.family == TaskFamily::TableBandit)
                .then_some(self.task.context_count),
            action_count: (self.task.family == TaskFamily::TableBandit)
                .then_some(self.task.action_count),
            reward_density: self.task_density,
        };
        ResolvedConfig {
            seed: self.seed,
            threads: self.threads,
            output_dir: output_dir.display().to_string(),
            task,
            policy: ResolvedPolicy {
                embed_dim: self.policy.embed_dim,
                hidden_dim: self.policy.hidden_dim,
                num_layers: self.policy.num_layers,
                seed: self.policy.seed,
            },
            features: ResolvedFeatures {
                layer: self.features.layer,
                prompt_pool: self.features.prompt_pool,
                reasoning_pool: self.features.reasoning_pool,
                mask: self.features.mask.label(),
                dim: feature_dim(&self.features, self.policy.hidden_dim),
            },
            train: self.train.as_ref().map(|cfg| ResolvedTrain {
                method: cfg.method.name().to_string(),
                prompts_per_batch: cfg.prompts_per_batch,
                rollouts_per_prompt: cfg.rollouts_per_prompt,
                steps: cfg.steps,
                learning_rate: cfg.learning_rate,
                clip_eps_low: cfg.clip_eps_low,
                clip_eps_high: cfg.clip_eps_high,
                inner_epochs: cfg.inner_epochs,
                minibatch_size: cfg.minibatch_size,
                loss_norm: cfg.loss_norm.name().to_string(),
                probe_alpha: cfg.probe_alpha,
                probe_window: cfg.probe_window,
                checkpoint_interval: cfg.checkpoint_interval,
            }),
            variance_lab: self.variance_lab.as_ref().map(|s| ResolvedVarianceLab {
                budget: s.budget,
                m_values: s.m_values.clone(),
                trials: s.trials,
                baseline: s.baseline.name().to_string(),
                tolerance_se: s.tolerance_se,
            }),
            probe_eval: self.probe_eval.as_ref().map(|s| ResolvedProbeEval {
                features_path: s.features_path.display().to_string(),
                targets_path: s.targets_path.display().to_string(),
                train_fraction: s.train_fraction,
                alpha: s.alpha,
            }),
            ablate: self.ablate.as_ref().map(|s| ResolvedAblate {
                num_prompts: s.num_prompts,
                rollouts_per_prompt: s.rollouts_per_prompt,
                masks: s.masks.iter().map(|m| m.label()).collect(),
                layers: s.layers.clone(),
                pools: s.pools.clone(),
                train_fraction: s.train_fraction,
                alpha: s.alpha,
                policy_path: s.policy_path.as_ref().map(|p| p.display().to_string()),
            }),
        }
    }
}

/// Effective output directory: flag beats environment beats config key.
pub fn output_dir(flag: Option<PathBuf>, resolution: &Resolution) -> Result<PathBuf> {
    if let Some(dir) = flag {
        return Ok(dir);
    }
    if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
        if !dir.is_empty() {
            return Ok(PathBuf::from(dir));
        }
    }
    resolution.config_output_dir.clone().ok_or_else(|| {
        CliError::Config(format!(
            "no output directory: pass --output-dir, set {OUTPUT_DIR_ENV}, or add output_dir to the config"
        ))
    })
}

/// Create the run directory and persist the resolved snapshot.
pub fn prepare_run_dir(dir: &Path, snapshot: &ResolvedConfig) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
    let text = toml::to_string_pretty(snapshot)
        .map_err(|e| CliError::Config(format!("serializing resolved config: {e}")))?;
    std::fs::write(dir.join(RESOLVED_NAME), text)
        .map_err(|e| CliError::Config(format!("writing {RESOLVED_NAME}: {e}")))?;
    Ok(())
}
