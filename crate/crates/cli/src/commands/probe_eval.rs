//! `probe-eval`: fit the value probe on one split of a feature/target CSV
//! pair and score the held-out remainder.
//!
//! Input formats are headerless CSV. Feature rows are `id,v0,v1,...`;
//! target rows are `id,value` with values in [0, 1]. The two files must
//! list the same ids in the same order. The train/test split is a seeded
//! shuffle, so identical inputs and seed give identical reports.

use std::path::{Path, PathBuf};

use poise_core::features::FeatureVector;
use poise_core::metrics::{Cell, CsvWriter};
use poise_core::probe::{probe_eval, ProbeModel, ValueExample};

use crate::commands::split_order;
use crate::config::{self, Needs};
use crate::error::{CliError, Result};

pub fn run(
    config_path: &Path,
    output_flag: Option<PathBuf>,
    features_flag: Option<PathBuf>,
    targets_flag: Option<PathBuf>,
) -> Result<()> {
    let raw = config::load_raw(config_path)?;
    let res = config::resolve(&raw, Needs::ProbeEval, features_flag, targets_flag)?;
    let out = config::output_dir(output_flag, &res)?;
    config::prepare_run_dir(&out, &res.snapshot(&out))?;

    let settings = res.probe_eval.as_ref().expect("probe_eval section resolved");
    let features = read_features(&settings.features_path)?;
    let targets = read_targets(&settings.targets_path)?;
    if features.len() != targets.len() {
        return Err(CliError::Config(format!(
            "{} feature rows but {} target rows",
            features.len(),
            targets.len()
        )));
    }
    let mut examples = Vec::with_capacity(features.len());
    for (row, (vector, (id, value))) in features.into_iter().zip(targets).enumerate() {
        if vector.source_rollout_id != id {
            return Err(CliError::Config(format!(
                "row {row}: feature id {} does not match target id {id}",
                vector.source_rollout_id
            )));
        }
        let example = ValueExample::new(vector.values, value, 0)
            .map_err(|e| CliError::Config(format!("target row {row}: {e}")))?;
        examples.push(example);
    }

    let (train, test) = split(&examples, settings.train_fraction, res.seed)?;
    let probe = ProbeModel::fit(&train, settings.alpha)?;
    let report = probe_eval(&probe, &test)?;

    let mut writer = CsvWriter::create(
        &out.join("probe_eval.csv"),
        "probe-eval",
        1,
        &["axis", "value", "n_train", "n_test", "mae", "pearson"],
    )?;
    writer.write_row(&[
        Cell::Str("split".to_string()),
        Cell::Str("held-out".to_string()),
        Cell::U64(train.len() as u64),
        Cell::U64(test.len() as u64),
        Cell::F64(report.mae),
        Cell::opt(report.pearson),
    ])?;
    writer.finish()?;

    let pearson = match report.pearson {
        Some(r) => format!("{r:.6}"),
        None => "NA".to_string(),
    };
    println!(
        "probe-eval: n_train={} n_test={} mae={:.6} pearson={pearson} -> {}",
        train.len(),
        test.len(),
        report.mae,
        out.display()
    );
    Ok(())
}

fn read_features(path: &Path) -> Result<Vec<FeatureVector>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read features {}: {e}", path.display())))?;
    text.lines()
        .filter(|line| !line.trim().is_empty())
        .map(|line| FeatureVector::from_csv_line(line).map_err(CliError::from))
        .collect()
}

fn read_targets(path: &Path) -> Result<Vec<(u64, f64)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read targets {}: {e}", path.display())))?;
    text.lines()
        .filter(|line| !line.trim().is_empty())
        .map(|line| {
            let (id, value) = line.split_once(',').ok_or_else(|| {
                CliError::Config(format!("target row {line:?} is not id,value"))
            })?;
            let id = id
                .parse()
                .map_err(|e| CliError::Config(format!("target id {id:?}: {e}")))?;
            let value = value
                .parse()
                .map_err(|e| CliError::Config(format!("target value {value:?}: {e}")))?;
            Ok((id, value))
        })
        .collect()
}

/// Seeded shuffle split shared with `ablate`: the first
/// floor(fraction * n) shuffled rows train the probe, the rest score it.
pub(crate) fn split(
    examples: &[ValueExample],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<ValueExample>, Vec<ValueExample>)> {
    let n = examples.len();
    let n_train = (fraction * n as f64).floor() as usize;
    if n_train < 2 || n - n_train < 1 {
        return Err(CliError::Config(format!(
            "split of {n} rows at fraction {fraction} leaves {n_train} train rows and {} test rows; need at least 2 and 1",
            n - n_train
        )));
    }
    let order = split_order(n, seed);
    let train = order[..n_train].iter().map(|&i| examples[i].clone()).collect();
    let test = order[n_train..].iter().map(|&i| examples[i].clone()).collect();
    Ok((train, test))
}
