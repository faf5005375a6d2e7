//! `ablate`: probe-quality sweep over feature masks, probe layers, and
//! pooling windows.
//!
//! The command samples one shared set of rollouts (either from a policy
//! checkpoint or a fresh seeded init), computes leave-one-out value targets
//! from sibling rewards, and then refits the probe once per cell, varying
//! exactly one feature-extraction knob from the reference configuration.
//! Because targets and the train/test split are shared, rows differ only
//! in what the probe is allowed to see.

use std::path::{Path, PathBuf};

use poise_core::env::sample_prompt;
use poise_core::features::{extract_features, FeatureConfig, FeatureMask};
use poise_core::metrics::{Cell, CsvWriter};
use poise_core::policy::{init_params, load_policy, sample_rollout, PolicyConfig, PolicyParams, RolloutRecord};
use poise_core::probe::{loo_target, probe_eval, ProbeModel, ValueExample};
use poise_core::rng;

use crate::commands::probe_eval::split;
use crate::config::{self, Needs};
use crate::error::{CliError, Result};

pub fn run(config_path: &Path, output_flag: Option<PathBuf>) -> Result<()> {
    let raw = config::load_raw(config_path)?;
    let res = config::resolve(&raw, Needs::Ablate, None, None)?;
    let out = config::output_dir(output_flag, &res)?;
    config::prepare_run_dir(&out, &res.snapshot(&out))?;

    let settings = res.ablate.as_ref().expect("ablate section resolved");
    let (pcfg, params): (PolicyConfig, PolicyParams) = match &settings.policy_path {
        Some(path) => {
            let (cfg, params) = load_policy(path)?;
            if cfg.vocab_size != res.task.vocab_size {
                return Err(CliError::Config(format!(
                    "checkpoint vocab {} does not match task vocab {}",
                    cfg.vocab_size, res.task.vocab_size
                )));
            }
            (cfg, params)
        }
        None => (res.policy.clone(), init_params(&res.policy)),
    };
    for &layer in &settings.layers {
        if layer == 0 || layer > pcfg.num_layers {
            return Err(CliError::Config(format!(
                "ablate layer {layer} outside 1..={} for the probed policy",
                pcfg.num_layers
            )));
        }
    }
    let reference = FeatureConfig {
        mask: FeatureMask::full(),
        ..res.features
    };
    if reference.layer > pcfg.num_layers {
        return Err(CliError::Config(format!(
            "features.layer {} exceeds the probed policy's {} layers",
            reference.layer, pcfg.num_layers
        )));
    }

    let (records, targets) = collect_rollouts(&res, settings, &pcfg, &params)?;

    let mut writer = CsvWriter::create(
        &out.join("probe_eval.csv"),
        "probe-eval",
        1,
        &["axis", "value", "n_train", "n_test", "mae", "pearson"],
    )?;
    let mut cells: Vec<(String, String, FeatureConfig)> = Vec::new();
    cells.push(("reference".into(), reference.mask.label(), reference.clone()));
    for mask in &settings.masks {
        cells.push(("mask".into(), mask.label(), FeatureConfig { mask: *mask, ..reference }));
    }
    for &layer in &settings.layers {
        cells.push(("layer".into(), layer.to_string(), FeatureConfig { layer, ..reference }));
    }
    for &pool in &settings.pools {
        let cfg = FeatureConfig {
            prompt_pool: pool,
            reasoning_pool: pool,
            ..reference
        };
        cells.push(("pool".into(), pool.to_string(), cfg));
    }

    for (axis, value, cfg) in &cells {
        cfg.validate()?;
        let mut examples = Vec::with_capacity(records.len());
        for (record, &target) in records.iter().zip(&targets) {
            let vector = extract_features(record, cfg)?;
            examples.push(ValueExample::new(vector.values, target, 0)?);
        }
        let (train, test) = split(&examples, settings.train_fraction, res.seed)?;
        let probe = ProbeModel::fit(&train, settings.alpha)?;
        let report = probe_eval(&probe, &test)?;
        writer.write_row(&[
            Cell::Str(axis.clone()),
            Cell::Str(value.clone()),
            Cell::U64(train.len() as u64),
            Cell::U64(test.len() as u64),
            Cell::F64(report.mae),
            Cell::opt(report.pearson),
        ])?;
        let pearson = match report.pearson {
            Some(r) => format!("{r:.4}"),
            None => "NA".to_string(),
        };
        println!("ablate: axis={axis} value={value} mae={:.6} pearson={pearson}", report.mae);
    }
    writer.finish()?;
    println!("ablate: {} cells -> {}", cells.len(), out.display());
    Ok(())
}

/// Sample `num_prompts * rollouts_per_prompt` rollouts from dedicated
/// evaluation streams and pair each with its leave-one-out sibling target.
fn collect_rollouts(
    res: &config::Resolution,
    settings: &config::AblateSettings,
    pcfg: &PolicyConfig,
    params: &PolicyParams,
) -> Result<(Vec<RolloutRecord>, Vec<f64>)> {
    let max_len = res.task.max_rollout_len();
    let mut records = Vec::with_capacity(settings.num_prompts * settings.rollouts_per_prompt);
    let mut targets = Vec::with_capacity(records.capacity());
    for i in 0..settings.num_prompts {
        let mut prompt_rng = rng::stream(res.seed, rng::tag::EVAL, i as u64, 0);
        let prompt = sample_prompt(&res.task, &mut prompt_rng);
        let mut group = Vec::with_capacity(settings.rollouts_per_prompt);
        for j in 0..settings.rollouts_per_prompt {
            let mut rollout_rng = rng::stream(res.seed, rng::tag::EVAL, i as u64, (j + 1) as u64);
            group.push(sample_rollout(params, pcfg, &res.task, &prompt, max_len, &mut rollout_rng)?);
        }
        let rewards: Vec<f64> = group.iter().map(|r| r.reward).collect();
        for (j, record) in group.into_iter().enumerate() {
            targets.push(loo_target(&rewards, j)?);
            records.push(record);
        }
    }
    Ok((records, targets))
}
