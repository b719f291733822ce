//! Ablation sweeps: one axis, a grid of full runs, one summary CSV.
//!
//! Each cell clones the base config, applies its variation, runs the
//! complete task stream into its own subdirectory, and contributes one
//! row to `sweep_summary.csv`. Four axes exist: expert capacity, the
//! cumulative loss-term ladder, component knock-outs (valve / library),
//! and task-order permutations.

use crate::config::{RunConfig, TrainBackbone};
use crate::data::Family;
use crate::error::{Error, Result};
use crate::harness::{run_continual, RunOutcome};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Experts,
    Losses,
    Components,
    Order,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<SweepAxis> {
        match s {
            "experts" => Ok(SweepAxis::Experts),
            "losses" => Ok(SweepAxis::Losses),
            "components" => Ok(SweepAxis::Components),
            "order" => Ok(SweepAxis::Order),
            other => Err(Error::Config(format!(
                "unknown sweep axis {other:?}; expected experts|losses|components|order"
            ))),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            SweepAxis::Experts => "experts",
            SweepAxis::Losses => "losses",
            SweepAxis::Components => "components",
            SweepAxis::Order => "order",
        };
        f.write_str(name)
    }
}

/// One row of `sweep_summary.csv`.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub cell: String,
    pub tasks: usize,
    pub experts: usize,
    pub mean_final_psnr: f64,
    pub mean_final_ssim: f64,
    /// Worst per-task PSNR drift (negative = forgetting); absent for
    /// single-task runs.
    pub min_forgetting: Option<f64>,
}

/// Expert-capacity grid.
pub const CAPACITY_GRID: [usize; 5] = [15, 20, 25, 30, 35];

fn cells_for(axis: SweepAxis, base: &RunConfig) -> Vec<(String, RunConfig)> {
    match axis {
        SweepAxis::Experts => CAPACITY_GRID
            .iter()
            .map(|&cap| {
                let mut c = base.clone();
                c.expert_capacity = cap;
                (cap.to_string(), c)
            })
            .collect(),
        // Cumulative ladder: start from reconstruction only, add one
        // term per cell in the order distillation, projection,
        // regularization, then contrast + diversity together.
        SweepAxis::Losses => {
            let mut cells = Vec::new();
            let mut c = base.clone();
            c.loss_contrast = false;
            c.loss_distillation = false;
            c.loss_projection = false;
            c.loss_regularization = false;
            c.loss_diversity = false;
            cells.push(("C5".to_string(), c.clone()));
            c.loss_distillation = true;
            cells.push(("C6".to_string(), c.clone()));
            c.loss_projection = true;
            cells.push(("C7".to_string(), c.clone()));
            c.loss_regularization = true;
            cells.push(("C8".to_string(), c.clone()));
            c.loss_contrast = true;
            c.loss_diversity = true;
            cells.push(("C9".to_string(), c));
            cells
        }
        // Knock out the valve (every episode forced new) and the
        // library (plain shared backbone, trained on every task so the
        // arm can learn at all).
        SweepAxis::Components => {
            let mut baseline = base.clone();
            baseline.valve_enabled = false;
            baseline.library_enabled = false;
            baseline.train_backbone = TrainBackbone::Always;
            let mut valve_only = base.clone();
            valve_only.valve_enabled = true;
            valve_only.library_enabled = false;
            valve_only.train_backbone = TrainBackbone::Always;
            let mut library_only = base.clone();
            library_only.valve_enabled = false;
            library_only.library_enabled = true;
            let mut full = base.clone();
            full.valve_enabled = true;
            full.library_enabled = true;
            vec![
                ("baseline".to_string(), baseline),
                ("valve".to_string(), valve_only),
                ("library".to_string(), library_only),
                ("full".to_string(), full),
            ]
        }
        SweepAxis::Order => {
            let fams = [Family::Haze, Family::Rain, Family::Snow];
            const PERMS: [[usize; 3]; 6] =
                [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            PERMS
                .iter()
                .map(|perm| {
                    let seq: Vec<Family> = perm.iter().map(|&i| fams[i]).collect();
                    let label = seq
                        .iter()
                        .map(|f| f.to_string())
                        .collect::<Vec<_>>()
                        .join("-");
                    let mut c = base.clone();
                    c.task_sequence = seq;
                    (label, c)
                })
                .collect()
        }
    }
}

fn summarize(label: &str, outcome: &RunOutcome) -> SweepRow {
    let tasks = &outcome.summary.tasks;
    let n = tasks.len() as f64;
    SweepRow {
        cell: label.to_string(),
        tasks: tasks.len(),
        experts: outcome.summary.library_experts,
        mean_final_psnr: tasks.iter().map(|t| t.final_psnr).sum::<f64>() / n,
        mean_final_ssim: tasks.iter().map(|t| t.final_ssim).sum::<f64>() / n,
        min_forgetting: outcome.summary.forgetting.as_ref().map(|f| f.min),
    }
}

/// Run every cell of `axis` under `out_dir` and write
/// `sweep_summary.csv` there. Rows come back in cell order.
pub fn run_ablation_sweep(
    base: &RunConfig,
    axis: SweepAxis,
    out_dir: &Path,
) -> Result<Vec<SweepRow>> {
    base.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    let mut csv = String::from("cell,tasks,experts,mean_final_psnr,mean_final_ssim,min_forgetting\n");
    for (label, mut config) in cells_for(axis, base) {
        config.out_dir = Some(out_dir.join(format!("cell-{label}")));
        let outcome = run_continual(&config)?;
        let row = summarize(&label, &outcome);
        let forgetting = row.min_forgetting.map(|v| v.to_string()).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.cell, row.tasks, row.experts, row.mean_final_psnr, row.mean_final_ssim, forgetting
        ));
        rows.push(row);
    }
    std::fs::write(out_dir.join("sweep_summary.csv"), csv)?;
    Ok(rows)
}
