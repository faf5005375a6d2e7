//! `variance-lab`: exact covariance decomposition vs Monte-Carlo
//! measurement on an enumerable bandit, plus the cross/self bias table.
//!
//! Writes allocations.csv and bias.csv, then gates the exit code on the
//! decomposition check: every group size must have its empirical trace
//! within `tolerance_se` jackknife standard errors of the prediction.

use std::path::{Path, PathBuf};

use poise_core::env::TaskFamily;
use poise_core::metrics::{Cell, CsvWriter};
use poise_core::policy::init_params;
use poise_core::variance_lab::{allocation_sweep, bias_probe, exact_state_values, BiasMode};

use crate::config::{self, Needs, SweepBaseline};
use crate::error::{CliError, Result};

pub fn run(config_path: &Path, output_flag: Option<PathBuf>) -> Result<()> {
    let raw = config::load_raw(config_path)?;
    let res = config::resolve(&raw, Needs::VarianceLab, None, None)?;
    if res.task.family != TaskFamily::TableBandit {
        return Err(CliError::Config(
            "variance-lab needs an enumerable task: set task.family = \"table-bandit\"".into(),
        ));
    }
    let out = config::output_dir(output_flag, &res)?;
    config::prepare_run_dir(&out, &res.snapshot(&out))?;

    let settings = res.variance_lab.as_ref().expect("variance_lab section resolved");
    let params = init_params(&res.policy);

    let state_values = match settings.baseline {
        SweepBaseline::Zero => None,
        SweepBaseline::StateValue => {
            Some(exact_state_values(&params, &res.policy, &res.task)?)
        }
    };
    let baseline = |context: usize, _action: usize| -> f64 {
        match &state_values {
            Some(values) => values[context],
            None => 0.0,
        }
    };

    let (sigma, rows) = allocation_sweep(
        &params,
        &res.policy,
        &res.task,
        &baseline,
        settings.budget,
        &settings.m_values,
        settings.trials,
        res.seed,
    )?;

    let mut writer = CsvWriter::create(
        &out.join("allocations.csv"),
        "allocations",
        1,
        &["budget", "n", "m", "predicted_trace", "empirical_trace", "se", "trials"],
    )?;
    for row in &rows {
        writer.write_row(&[
            Cell::U64(row.budget as u64),
            Cell::U64(row.n as u64),
            Cell::U64(row.m as u64),
            Cell::F64(row.predicted_trace),
            Cell::F64(row.empirical_trace),
            Cell::F64(row.se),
            Cell::U64(row.trials as u64),
        ])?;
    }
    writer.finish()?;

    // Frozen value function for the bias table: the exact reward table, the
    // strongest reward-correlated probe an enumerable bandit admits. Cross
    // evaluation must stay unbiased even against it; self evaluation must
    // not.
    let table = res.task.reward_table.clone();
    let value_fn = |context: usize, action: usize| -> f64 { f64::from(table[context][action]) };
    let mut bias_writer = CsvWriter::create(
        &out.join("bias.csv"),
        "bias",
        1,
        &["mode", "bias_norm", "grad_norm"],
    )?;
    for mode in [BiasMode::CrossRollout, BiasMode::SelfRollout] {
        let report = bias_probe(&params, &res.policy, &res.task, &value_fn, mode)?;
        bias_writer.write_row(&[
            Cell::Str(report.mode.name().to_string()),
            Cell::F64(report.bias_norm),
            Cell::F64(report.grad_norm),
        ])?;
        println!(
            "variance-lab: bias mode={} norm={:.3e} (true gradient norm {:.3e})",
            report.mode.name(),
            report.bias_norm,
            report.grad_norm
        );
    }
    bias_writer.finish()?;

    println!(
        "variance-lab: dim={} tr_within={:.6e} tr_between={:.6e} exact={}",
        sigma.dim, sigma.trace_w, sigma.trace_b, sigma.computed_exactly
    );
    let mut failures = Vec::new();
    for row in &rows {
        let gap = (row.empirical_trace - row.predicted_trace).abs();
        let allowed = settings.tolerance_se * row.se;
        let ok = gap <= allowed;
        println!(
            "variance-lab: m={} n={} predicted={:.6e} empirical={:.6e} se={:.2e} {}",
            row.m,
            row.n,
            row.predicted_trace,
            row.empirical_trace,
            row.se,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failures.push(format!(
                "m={}: |{:.6e} - {:.6e}| = {gap:.3e} > {allowed:.3e}",
                row.m, row.empirical_trace, row.predicted_trace
            ));
        }
    }
    if !failures.is_empty() {
        return Err(CliError::Numeric(format!(
            "covariance decomposition outside {} standard errors: {}",
            settings.tolerance_se,
            failures.join("; ")
        )));
    }
    println!("variance-lab: all {} allocations within tolerance -> {}", rows.len(), out.display());
    Ok(())
}
