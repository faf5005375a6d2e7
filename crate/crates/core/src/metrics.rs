//! Evaluation metrics and bit-stable tabular writers.
//!
//! Population variance throughout; a ratio whose denominator has zero
//! variance is reported as missing rather than silently patched with an
//! epsilon. Writers serialize floats with 17 significant digits so files
//! from identical runs are byte-identical.

use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::numerics;

/// Mean over problems of the mean reward of each problem's first k samples.
pub fn avg_at_k(rewards_per_problem: &[Vec<f64>], k: usize) -> Result<f64> {
    if rewards_per_problem.is_empty() {
        return Err(CoreError::EmptyInput("avg@k needs at least one problem".into()));
    }
    if k == 0 {
        return Err(CoreError::InvalidConfig("avg@k needs k >= 1".into()));
    }
    let mut per_problem = Vec::with_capacity(rewards_per_problem.len());
    for (i, row) in rewards_per_problem.iter().enumerate() {
        if row.len() < k {
            return Err(CoreError::ShapeMismatch(format!(
                "problem {i} has {} samples, avg@{k} needs {k}",
                row.len()
            )));
        }
        per_problem.push(numerics::mean(&row[..k]));
    }
    Ok(numerics::mean(&per_problem))
}

/// 1 - Var(advantages) / Var(rewards). Missing when the rewards batch has
/// zero variance.
pub fn variance_reduction_ratio(rewards: &[f64], advantages: &[f64]) -> Result<Option<f64>> {
    if rewards.len() != advantages.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "{} rewards vs {} advantages",
            rewards.len(),
            advantages.len()
        )));
    }
    if rewards.len() < 2 {
        return Err(CoreError::EmptyInput("variance ratio needs at least 2 samples".into()));
    }
    let var_r = numerics::population_variance(rewards);
    if var_r == 0.0 {
        return Ok(None);
    }
    Ok(Some(1.0 - numerics::population_variance(advantages) / var_r))
}

/// Pearson correlation; missing when either side is constant.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<Option<f64>> {
    if xs.len() != ys.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "{} xs vs {} ys",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(CoreError::EmptyInput("correlation needs at least 2 points".into()));
    }
    let mx = numerics::mean(xs);
    let my = numerics::mean(ys);
    let cov: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).collect();
    let sx = numerics::population_std(xs);
    let sy = numerics::population_std(ys);
    if sx == 0.0 || sy == 0.0 {
        return Ok(None);
    }
    Ok(Some(numerics::pairwise_sum(&cov) / (xs.len() as f64 * sx * sy)))
}

pub fn mae(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "{} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if predictions.is_empty() {
        return Err(CoreError::EmptyInput("MAE needs at least one pair".into()));
    }
    let abs: Vec<f64> = predictions.iter().zip(targets).map(|(p, t)| (p - t).abs()).collect();
    Ok(numerics::mean(&abs))
}

/// One table cell. Missing values serialize as NA (CSV) or null (JSONL).
#[derive(Debug, Clone)]
pub enum Cell {
    F64(f64),
    U64(u64),
    Str(String),
    Missing,
}

impl Cell {
    pub fn opt(value: Option<f64>) -> Cell {
        match value {
            Some(v) => Cell::F64(v),
            None => Cell::Missing,
        }
    }

    fn csv(&self) -> Result<String> {
        match self {
            Cell::F64(v) => Ok(numerics::fmt_f64(*v)),
            Cell::U64(v) => Ok(v.to_string()),
            Cell::Str(s) => {
                if s.contains(',') || s.contains('\n') || s.contains('"') {
                    return Err(CoreError::InvalidConfig(format!(
                        "cell {s:?} needs quoting, which this writer does not do"
                    )));
                }
                Ok(s.clone())
            }
            Cell::Missing => Ok("NA".to_string()),
        }
    }

    fn json(&self) -> Result<String> {
        match self {
            Cell::F64(v) => Ok(numerics::fmt_f64(*v)),
            Cell::U64(v) => Ok(v.to_string()),
            Cell::Str(s) => {
                if s.chars().any(|c| c == '"' || c == '\\' || c.is_control()) {
                    return Err(CoreError::InvalidConfig(format!(
                        "cell {s:?} needs JSON escaping, which this writer does not do"
                    )));
                }
                Ok(format!("\"{s}\""))
            }
            Cell::Missing => Ok("null".to_string()),
        }
    }
}

/// CSV writer with a versioned schema line before the column header:
/// `#schema=<name> version=<n>`.
pub struct CsvWriter {
    out: BufWriter<std::fs::File>,
    columns: Vec<String>,
}

impl CsvWriter {
    pub fn create(path: &Path, schema: &str, version: u32, columns: &[&str]) -> Result<Self> {
        let mut out = BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "#schema={schema} version={version}")?;
        writeln!(out, "{}", columns.join(","))?;
        Ok(CsvWriter {
            out,
            columns: columns.iter().map(|c| c.to_string()).collect(),
        })
    }

    pub fn write_row(&mut self, cells: &[Cell]) -> Result<()> {
        if cells.len() != self.columns.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "{} cells for {} columns",
                cells.len(),
                self.columns.len()
            )));
        }
        let rendered = cells.iter().map(Cell::csv).collect::<Result<Vec<_>>>()?;
        writeln!(self.out, "{}", rendered.join(","))?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// JSONL writer; the first line is a schema record, every later line one row.
pub struct JsonlWriter {
    out: BufWriter<std::fs::File>,
    columns: Vec<String>,
}

impl JsonlWriter {
    pub fn create(path: &Path, schema: &str, version: u32, columns: &[&str]) -> Result<Self> {
        let mut out = BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "{{\"schema\":\"{schema}\",\"version\":{version}}}")?;
        Ok(JsonlWriter {
            out,
            columns: columns.iter().map(|c| c.to_string()).collect(),
        })
    }

    pub fn write_row(&mut self, cells: &[Cell]) -> Result<()> {
        if cells.len() != self.columns.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "{} cells for {} columns",
                cells.len(),
                self.columns.len()
            )));
        }
        let mut parts = Vec::with_capacity(cells.len());
        for (name, cell) in self.columns.iter().zip(cells) {
            parts.push(format!("\"{name}\":{}", cell.json()?));
        }
        writeln!(self.out, "{{{}}}", parts.join(","))?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Parsed CSV produced by [`CsvWriter`].
pub struct CsvTable {
    pub schema: String,
    pub version: u32,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| CoreError::Parse(format!("missing column {name}")))
    }
}

pub fn read_csv(path: &Path) -> Result<CsvTable> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let meta = lines
        .next()
        .ok_or_else(|| CoreError::Parse("empty CSV file".into()))?;
    let meta = meta
        .strip_prefix("#schema=")
        .ok_or_else(|| CoreError::Parse(format!("missing schema line, got {meta:?}")))?;
    let (schema, version) = meta
        .split_once(" version=")
        .ok_or_else(|| CoreError::Parse("malformed schema line".into()))?;
    let version = version
        .parse()
        .map_err(|e| CoreError::Parse(format!("schema version: {e}")))?;
    let header = lines
        .next()
        .ok_or_else(|| CoreError::Parse("missing CSV header".into()))?;
    let columns: Vec<String> = header.split(',').map(str::to_string).collect();
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let row: Vec<String> = line.split(',').map(str::to_string).collect();
        if row.len() != columns.len() {
            return Err(CoreError::Parse(format!(
                "row has {} cells, header has {}",
                row.len(),
                columns.len()
            )));
        }
        rows.push(row);
    }
    Ok(CsvTable {
        schema: schema.to_string(),
        version,
        columns,
        rows,
    })
}
