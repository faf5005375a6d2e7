//! `report`: read-only summary of the artifacts in a run directory.
//!
//! Prints a deterministic digest of whichever of steps.csv,
//! allocations.csv, bias.csv, and probe_eval.csv are present. Purely
//! informational: it never regrades tolerances, so it exits 0 whenever at
//! least one artifact exists and parses.

use std::path::Path;

use poise_core::metrics::{read_csv, CsvTable};

use crate::error::{CliError, Result};

pub fn run(run_dir: &Path) -> Result<()> {
    let mut found = 0usize;
    if run_dir.join(crate::config::RESOLVED_NAME).is_file() {
        println!("report: resolved config present");
        found += 1;
    }
    if let Some(table) = load(run_dir, "steps.csv")? {
        summarize_steps(&table)?;
        found += 1;
    }
    if let Some(table) = load(run_dir, "allocations.csv")? {
        summarize_allocations(&table)?;
        found += 1;
    }
    if let Some(table) = load(run_dir, "bias.csv")? {
        echo(&table, "bias");
        found += 1;
    }
    if let Some(table) = load(run_dir, "probe_eval.csv")? {
        echo(&table, "probe-eval");
        found += 1;
    }
    if found == 0 {
        return Err(CliError::Config(format!(
            "no run artifacts found in {}",
            run_dir.display()
        )));
    }
    Ok(())
}

fn load(dir: &Path, name: &str) -> Result<Option<CsvTable>> {
    let path = dir.join(name);
    if !path.is_file() {
        return Ok(None);
    }
    Ok(Some(read_csv(&path)?))
}

fn column_f64(table: &CsvTable, row: &[String], name: &str) -> Result<Option<f64>> {
    let cell = &row[table.column_index(name)?];
    if cell == "NA" {
        return Ok(None);
    }
    cell.parse::<f64>()
        .map(Some)
        .map_err(|e| CliError::Config(format!("cell {cell:?} in column {name}: {e}")))
}

fn summarize_steps(table: &CsvTable) -> Result<()> {
    if table.rows.is_empty() {
        println!("report: steps.csv has no data rows");
        return Ok(());
    }
    let rewards = table
        .rows
        .iter()
        .map(|row| {
            column_f64(table, row, "reward_mean")?
                .ok_or_else(|| CliError::Config("reward_mean is NA".into()))
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = rewards.len();
    let tail = n.div_ceil(10).max(1);
    let tail_mean: f64 = rewards[n - tail..].iter().sum::<f64>() / tail as f64;
    let best = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let last_row = table.rows.last().expect("nonempty");
    let grad = column_f64(table, last_row, "grad_norm")?;
    let mae = column_f64(table, last_row, "online_mae")?;
    println!(
        "report: steps={} first_reward={:.4} final_reward={:.4} best_reward={:.4} last_{}_mean={:.4}",
        n,
        rewards[0],
        rewards[n - 1],
        best,
        tail,
        tail_mean
    );
    match (grad, mae) {
        (Some(g), Some(m)) => println!("report: final grad_norm={g:.4e} online_mae={m:.4}"),
        (Some(g), None) => println!("report: final grad_norm={g:.4e} online_mae=NA"),
        _ => {}
    }
    Ok(())
}

fn summarize_allocations(table: &CsvTable) -> Result<()> {
    println!("report: allocations ({} rows)", table.rows.len());
    for row in &table.rows {
        let m = &row[table.column_index("m")?];
        let predicted = column_f64(table, row, "predicted_trace")?
            .ok_or_else(|| CliError::Config("predicted_trace is NA".into()))?;
        let empirical = column_f64(table, row, "empirical_trace")?
            .ok_or_else(|| CliError::Config("empirical_trace is NA".into()))?;
        let se = column_f64(table, row, "se")?
            .ok_or_else(|| CliError::Config("se is NA".into()))?;
        let sigmas = if se > 0.0 { (empirical - predicted).abs() / se } else { 0.0 };
        println!(
            "report:   m={m} predicted={predicted:.6e} empirical={empirical:.6e} gap={sigmas:.2} se"
        );
    }
    Ok(())
}

fn echo(table: &CsvTable, label: &str) {
    println!("report: {label} ({} rows)", table.rows.len());
    for row in &table.rows {
        println!("report:   {}", row.join(" "));
    }
}
