//! Variant matrices: alignment strength and Argmax quantization frequency.
//!
//! Each cell is trained and evaluated once per seed; the summary table has
//! one row per score and a mean / std column pair per cell.

use std::io::Write;
use std::path::Path;

use crate::activations::{NeckNormMode, NormKind};
use crate::config::RunConfig;
use crate::data::Split;
use crate::error::Result;
use crate::eval::evaluate;
use crate::losses::AlignSchedule;
use crate::metrics::{aggregate, write_metrics_csv, Aggregate, MetricsReport};
use crate::neck::ArgmaxSchedule;
use crate::train::train;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Constant alignment coefficient.
    Align,
    /// Percentage of training images normalized with Argmax.
    Quantization,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Align => "align",
            Axis::Quantization => "quantization",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub axis: Axis,
    pub value: f64,
}

impl Cell {
    pub fn label(&self) -> String {
        format!("{}={}", self.axis.name(), self.value)
    }

    /// The base config with this cell's setting applied.
    pub fn config(&self, base: &RunConfig) -> Result<RunConfig> {
        let mut cfg = base.clone();
        match self.axis {
            Axis::Align => cfg.align_coef = AlignSchedule::Constant(self.value),
            Axis::Quantization => cfg.argmax_schedule = ArgmaxSchedule::new(self.value, self.value)?,
        }
        Ok(cfg)
    }

    /// Normalization used to evaluate the cell: Argmax only for models trained
    /// with Argmax on every image.
    pub fn eval_mode(&self, cfg: &RunConfig) -> NeckNormMode {
        if self.axis == Axis::Quantization && self.value >= 100.0 {
            cfg.norm_mode().with_kind(NormKind::Argmax)
        } else {
            cfg.norm_mode()
        }
    }
}

/// Alignment cells first, then quantization cells, in config order.
pub fn cells(cfg: &RunConfig) -> Vec<Cell> {
    let align = cfg.sweep_align.iter().map(|&value| Cell { axis: Axis::Align, value });
    let quant = cfg.sweep_quantization.iter().map(|&value| Cell {
        axis: Axis::Quantization,
        value,
    });
    align.chain(quant).collect()
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub cell: Cell,
    pub reports: Vec<MetricsReport>,
    pub summary: Aggregate,
}

/// Trains and evaluates one cell for every seed. With `out`, artifacts go to
/// `{out}/{label}/seed_{s}` and the per-seed rows to `{out}/{label}/metrics.csv`.
pub fn run_cell(base: &RunConfig, cell: Cell, seeds: &[u64], out: Option<&Path>) -> Result<CellResult> {
    let cfg = cell.config(base)?;
    let dir = out.map(|o| o.join(cell.label()));
    let mut reports = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let run = train(&cfg, seed, dir.as_deref())?;
        reports.push(evaluate(&run.model, &cfg, Split::Val, cfg.val_size, cell.eval_mode(&cfg))?);
    }
    if let Some(d) = &dir {
        write_metrics_csv(std::io::BufWriter::new(std::fs::File::create(d.join("metrics.csv"))?), &reports)?;
    }
    let summary = aggregate(&reports);
    Ok(CellResult { cell, reports, summary })
}

/// Runs every cell of `base` and writes `{out}/sweep.csv`.
pub fn run_sweep(base: &RunConfig, seeds: &[u64], out: &Path) -> Result<Vec<CellResult>> {
    base.validate()?;
    std::fs::create_dir_all(out)?;
    let results = cells(base)
        .into_iter()
        .map(|c| run_cell(base, c, seeds, Some(out)))
        .collect::<Result<Vec<_>>>()?;
    let f = std::fs::File::create(out.join("sweep.csv"))?;
    write_sweep_csv(std::io::BufWriter::new(f), &results, &base.hash())?;
    Ok(results)
}

pub fn write_sweep_csv(mut out: impl Write, results: &[CellResult], config_hash: &str) -> Result<()> {
    let mut header = vec!["score".to_string()];
    for r in results {
        header.push(format!("{}_mean", r.cell.label()));
        header.push(format!("{}_std", r.cell.label()));
    }
    header.push("config_hash".into());
    writeln!(out, "{}", header.join(","))?;
    if results.is_empty() {
        return Ok(());
    }
    let rows: [(&str, fn(&Aggregate) -> (f64, f64)); 6] = [
        ("ee", |a| a.ee),
        ("ae", |a| a.ae),
        ("px", |a| a.px),
        ("aap", |a| a.aap),
        ("map_50_95", |a| a.map_50_95),
        ("map_50", |a| a.map_50),
    ];
    for (name, get) in rows {
        let mut line = vec![name.to_string()];
        for r in results {
            let (m, s) = get(&r.summary);
            line.push(format!("{m:.12e}"));
            line.push(format!("{s:.12e}"));
        }
        line.push(config_hash.to_string());
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}
