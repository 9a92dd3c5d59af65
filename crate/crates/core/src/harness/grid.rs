//! Model-seed × split-seed variance study.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::TrafficDataset;
use crate::error::{Error, Result};
use crate::pipeline::{run_pipeline, PipelineConfig};

pub const SEED_GRID: &str = "seed_grid.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub model_seed: u64,
    pub split_seed: u64,
    /// Horizon-averaged MAE on set I; absent when the cell failed.
    pub mae: Option<f64>,
    pub error: Option<String>,
}

/// Rows are model seeds, columns split seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedGrid {
    pub model_seeds: Vec<u64>,
    pub split_seeds: Vec<u64>,
    pub cells: Vec<GridCell>,
    /// Spread across split seeds for each model seed.
    pub row_std: Vec<Option<f64>>,
    /// Spread across model seeds for each split seed.
    pub col_std: Vec<Option<f64>>,
}

/// Sample standard deviation; absent below two values.
pub fn sample_std(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Some((values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

impl SeedGrid {
    pub fn cell(&self, row: usize, col: usize) -> &GridCell {
        &self.cells[row * self.split_seeds.len() + col]
    }

    fn from_cells(model_seeds: Vec<u64>, split_seeds: Vec<u64>, cells: Vec<GridCell>) -> Self {
        let (r, c) = (model_seeds.len(), split_seeds.len());
        let row_std = (0..r)
            .map(|i| sample_std(&cells[i * c..(i + 1) * c].iter().filter_map(|x| x.mae).collect::<Vec<_>>()))
            .collect();
        let col_std =
            (0..c).map(|j| sample_std(&(0..r).filter_map(|i| cells[i * c + j].mae).collect::<Vec<_>>())).collect();
        Self { model_seeds, split_seeds, cells, row_std, col_std }
    }

    /// Matrix with a trailing `row_std` column and a final `col_std` row;
    /// failed cells and undefined deviations are left empty.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut out = String::from("model_seed\\split_seed");
        for s in &self.split_seeds {
            write!(out, ",{s}").unwrap();
        }
        out.push_str(",row_std\n");
        for (i, m) in self.model_seeds.iter().enumerate() {
            write!(out, "{m}").unwrap();
            for j in 0..self.split_seeds.len() {
                write!(out, ",{}", fmt(self.cell(i, j).mae)).unwrap();
            }
            writeln!(out, ",{}", fmt(self.row_std[i])).unwrap();
        }
        out.push_str("col_std");
        for s in &self.col_std {
            write!(out, ",{}", fmt(*s)).unwrap();
        }
        out.push_str(",\n");
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Runs the whole pipeline per cell. Cell failures are recorded, not propagated.
pub fn seed_grid(
    ds: &TrafficDataset,
    base: &PipelineConfig,
    model_seeds: &[u64],
    split_seeds: &[u64],
) -> Result<SeedGrid> {
    if model_seeds.is_empty() || split_seeds.is_empty() {
        return Err(Error::Config("seed grid needs at least one model seed and one split seed".into()));
    }
    base.validate()?;
    let mut cells = Vec::with_capacity(model_seeds.len() * split_seeds.len());
    for &m in model_seeds {
        for &s in split_seeds {
            let (mae, error) = match run_pipeline(ds, &base.with_seeds(m, s)) {
                Ok(out) => (Some(out.report.average.mae), None),
                Err(e) => (None, Some(e.to_string())),
            };
            cells.push(GridCell { model_seed: m, split_seed: s, mae, error });
        }
    }
    Ok(SeedGrid::from_cells(model_seeds.to_vec(), split_seeds.to_vec(), cells))
}
