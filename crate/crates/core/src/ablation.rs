//! The normalization x coupling grid plus single-branch baselines, trained and
//! evaluated per seed and summarized by medians.

use serde::Serialize;

use crate::config::RunConfig;
use crate::coupling::{CouplingConfig, Normalization, Strategy};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::heads::Model;
use crate::synth::Dataset;
use crate::train::run_training;

/// Published VOC07 values for the grid, `None` where no value exists.
pub fn reference_map(cell: &CouplingConfig) -> Option<f64> {
    match cell.label().as_str() {
        "none+sum" => Some(81.1),
        "none+max" => Some(80.7),
        "l2+sum" => Some(80.3),
        "l2+prod" => Some(63.5),
        "l2+max" => Some(78.2),
        "conv+sum" => Some(81.7),
        "conv+max" => Some(81.3),
        "global-only" => Some(78.5),
        "local-only" => Some(78.6),
        _ => None,
    }
}

fn row_name(n: Normalization) -> &'static str {
    match n {
        Normalization::None => "eltwise",
        Normalization::L2 => "L2+eltwise",
        Normalization::LearnedScale => "1x1 conv+eltwise",
    }
}

/// All grid cells, row-major over normalization then strategy, then the two baselines.
pub fn all_cells() -> Vec<CouplingConfig> {
    let mut cells: Vec<CouplingConfig> = Normalization::ALL
        .iter()
        .flat_map(|&n| Strategy::ALL.iter().map(move |&s| CouplingConfig::coupled(n, s)))
        .collect();
    cells.push(CouplingConfig::local_only());
    cells.push(CouplingConfig::global_only());
    cells
}

/// Cells named in `filter` (by label), in grid order; all cells when `None`.
pub fn select_cells(filter: Option<&[String]>) -> Result<Vec<CouplingConfig>> {
    let all = all_cells();
    let Some(names) = filter else {
        return Ok(all);
    };
    for n in names {
        if !all.iter().any(|c| &c.label() == n) {
            let known: Vec<String> = all.iter().map(|c| c.label()).collect();
            return Err(Error::Config(format!("unknown ablation cell {n:?} (known: {})", known.join(", "))));
        }
    }
    Ok(all.into_iter().filter(|c| names.contains(&c.label())).collect())
}

/// Outcome of one (cell, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum RunResult {
    Finished { map: f64, per_class_ap: Vec<Option<f64>> },
    Diverged { iteration: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellResult {
    pub label: String,
    pub coupling: CouplingConfig,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunResult>,
}

impl CellResult {
    pub fn finished_maps(&self) -> Vec<f64> {
        self.runs
            .iter()
            .filter_map(|r| match r {
                RunResult::Finished { map, .. } => Some(*map),
                RunResult::Diverged { .. } => None,
            })
            .collect()
    }

    pub fn diverged(&self) -> usize {
        self.runs.len() - self.finished_maps().len()
    }

    /// Median mAP over finished runs; `None` if every run diverged.
    pub fn median_map(&self) -> Option<f64> {
        median(&self.finished_maps())
    }

    /// Median AP of class `label` (1-based) over finished runs that have it.
    pub fn median_class_ap(&self, label: usize) -> Option<f64> {
        let v: Vec<f64> = self
            .runs
            .iter()
            .filter_map(|r| match r {
                RunResult::Finished { per_class_ap, .. } => per_class_ap.get(label - 1).copied().flatten(),
                RunResult::Diverged { .. } => None,
            })
            .collect();
        median(&v)
    }
}

/// Median; the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Trains and evaluates one model; divergence is an outcome, other errors propagate.
pub fn run_cell(base: &RunConfig, dataset: &Dataset, coupling: CouplingConfig, seed: u64) -> Result<RunResult> {
    let mut cfg = base.clone();
    cfg.model.coupling = coupling;
    cfg.seed = seed;
    cfg.validate()?;
    let model = Model::new(cfg.model.clone(), seed)?;
    match run_training(dataset, model, &cfg.train, &cfg.proposals, seed, |_| {}) {
        Ok(out) => {
            let (report, _) = evaluate(&out.model, &dataset.test, &dataset.config.render, &cfg.proposals, seed, &cfg.eval)?;
            Ok(RunResult::Finished {
                map: report.map,
                per_class_ap: report.per_class_ap,
            })
        }
        Err(Error::Diverged { iteration, detail }) => {
            log::warn!("{} seed {seed} diverged at iteration {iteration}: {detail}", coupling.label());
            Ok(RunResult::Diverged { iteration })
        }
        Err(e) => Err(e),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub cells: Vec<CellResult>,
}

impl AblationReport {
    pub fn cell(&self, label: &str) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.label == label)
    }

    fn fmt_cell(&self, c: &CouplingConfig) -> String {
        let Some(cell) = self.cell(&c.label()) else {
            return "-".into();
        };
        let value = match cell.median_map() {
            None => "diverged".to_string(),
            Some(m) if cell.diverged() > 0 => format!("{:.1} ({}/{} diverged)", 100.0 * m, cell.diverged(), cell.runs.len()),
            Some(m) => format!("{:.1}", 100.0 * m),
        };
        match reference_map(c) {
            Some(r) => format!("{value} [{r:.1}]"),
            None => format!("{value} [-]"),
        }
    }

    /// Markdown: the normalization x strategy table, then the single-branch baselines.
    /// Values are median mAP@0.5 in percent; published VOC07 numbers in brackets.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        s.push_str(&format!(
            "Median mAP@0.5 (%) over seeds {}; published VOC07 values in brackets.\n\n",
            seeds.join(", ")
        ));
        s.push_str("| Normalization methods | SUM | PROD | MAX |\n|---|---|---|---|\n");
        for n in Normalization::ALL {
            let row: Vec<CouplingConfig> = Strategy::ALL.iter().map(|&st| CouplingConfig::coupled(n, st)).collect();
            if !row.iter().any(|c| self.cell(&c.label()).is_some()) {
                continue;
            }
            s.push_str(&format!("| {} |", row_name(n)));
            for c in &row {
                s.push_str(&format!(" {} |", self.fmt_cell(c)));
            }
            s.push('\n');
        }
        let baselines = [
            ("Local FCN (local branch only)", CouplingConfig::local_only()),
            ("Global FCN (global branch only)", CouplingConfig::global_only()),
        ];
        if baselines.iter().any(|(_, c)| self.cell(&c.label()).is_some()) {
            s.push_str("\n| Single branch | mAP |\n|---|---|\n");
            for (name, c) in baselines {
                if self.cell(&c.label()).is_some() {
                    s.push_str(&format!("| {name} | {} |\n", self.fmt_cell(&c)));
                }
            }
        }
        s
    }

    /// CSV with one line per (cell, seed) run.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("cell,normalization,strategy,seed,status,map\n");
        for cell in &self.cells {
            let (n, st) = if cell.coupling.both_enabled() {
                (cell.coupling.normalization.as_str(), cell.coupling.strategy.as_str())
            } else {
                ("-", "-")
            };
            for (seed, run) in cell.seeds.iter().zip(&cell.runs) {
                match run {
                    RunResult::Finished { map, .. } => {
                        s.push_str(&format!("{},{n},{st},{seed},finished,{:.6}\n", cell.label, map))
                    }
                    RunResult::Diverged { iteration } => {
                        s.push_str(&format!("{},{n},{st},{seed},diverged@{iteration},\n", cell.label))
                    }
                }
            }
        }
        s
    }
}

/// Trains every selected cell for every seed. Cells are independent and run on
/// the rayon pool; results come back in grid order.
pub fn run_ablation(base: &RunConfig, dataset: &Dataset, cells: &[CouplingConfig], seeds: &[u64]) -> Result<AblationReport> {
    use rayon::prelude::*;
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let results: Vec<RunResult> = jobs
        .par_iter()
        .map(|&(c, s)| run_cell(base, dataset, cells[c], s))
        .collect::<Result<_>>()?;
    let cells = cells
        .iter()
        .enumerate()
        .map(|(ci, c)| CellResult {
            label: c.label(),
            coupling: *c,
            seeds: seeds.to_vec(),
            runs: results[ci * seeds.len()..(ci + 1) * seeds.len()].to_vec(),
        })
        .collect();
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        cells,
    })
}
