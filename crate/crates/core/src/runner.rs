//! End-to-end runs driven by an [`ExperimentConfig`]: federated and
//! centralized training, run summaries and the ablation grid.

use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::federation::{DataPlan, Experiment, FedConfig, GlobalState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Federated,
    Centralized,
}

pub struct RunOutcome {
    pub mode: Mode,
    pub experiment: Experiment,
    pub state: GlobalState,
    pub wall_time_s: f64,
}

/// Loads the data named by `cfg`, prepares the experiment and trains it.
/// Centralized runs use a single client regardless of `fed.clients`.
pub fn run(cfg: &ExperimentConfig, mode: Mode) -> Result<RunOutcome> {
    let start = Instant::now();
    let records = cfg.load_records()?;
    let fed = match mode {
        Mode::Federated => cfg.fed.clone(),
        Mode::Centralized => {
            if cfg.fed.clients != 1 {
                warn!("centralized run ignores fed.clients = {}", cfg.fed.clients);
            }
            FedConfig {
                clients: 1,
                ..cfg.fed.clone()
            }
        }
    };
    let partition = cfg.partition_spec();
    let plan = DataPlan {
        records: &records,
        partition: &partition,
        eval_frac: cfg.data.eval_frac,
    };
    let experiment = Experiment::prepare(&cfg.model, &cfg.lora, &fed, &plan)?;
    let state = match mode {
        Mode::Federated => experiment.run_federated()?,
        Mode::Centralized => experiment.run_centralized()?,
    };
    Ok(RunOutcome {
        mode,
        experiment,
        state,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: Mode,
    pub clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub final_accuracy: f64,
    pub final_f1: f64,
    /// Mean client-local eval accuracy in the last round, when available.
    pub final_client_accuracy: Option<f64>,
    pub total_uplink_bytes: u64,
    pub total_downlink_bytes: u64,
    pub total_bytes: u64,
    pub adapter_params: usize,
    pub head_params: usize,
    pub trainable_params: usize,
    pub total_params: usize,
    pub trainable_ratio: f64,
    pub theta_l2_norm: f64,
    pub wall_time_s: f64,
}

impl Summary {
    pub fn from_outcome(outcome: &RunOutcome) -> Result<Self> {
        let last = outcome
            .state
            .history
            .last()
            .ok_or_else(|| Error::State("no completed rounds to summarize".into()))?;
        let breakdown = outcome.experiment.model().trainable_param_count();
        let fed = outcome.experiment.fed_config();
        let up: u64 = outcome.state.history.iter().map(|r| r.uplink_bytes).sum();
        let down: u64 = outcome.state.history.iter().map(|r| r.downlink_bytes).sum();
        Ok(Self {
            mode: outcome.mode,
            clients: fed.clients,
            rounds: outcome.state.round,
            local_epochs: fed.local_epochs,
            final_accuracy: last.eval_accuracy,
            final_f1: last.eval_f1,
            final_client_accuracy: last.mean_client_accuracy(),
            total_uplink_bytes: up,
            total_downlink_bytes: down,
            total_bytes: up + down,
            adapter_params: breakdown.adapter_params,
            head_params: breakdown.head_params,
            trainable_params: breakdown.trainable,
            total_params: breakdown.base_total,
            trainable_ratio: breakdown.trainable_ratio(),
            theta_l2_norm: outcome.state.theta.l2_norm(),
            wall_time_s: outcome.wall_time_s,
        })
    }
}

/// One ablation cell: client count K, local epochs E, global rounds R.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct GridCell {
    pub clients: usize,
    pub local_epochs: usize,
    pub rounds: usize,
}

impl GridCell {
    pub fn new(clients: usize, local_epochs: usize, rounds: usize) -> Self {
        Self {
            clients,
            local_epochs,
            rounds,
        }
    }

    /// Parses `K,E,R`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let nums = parts
            .iter()
            .map(|p| p.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .ok()
            .filter(|v| v.len() == 3)
            .ok_or_else(|| Error::Config(format!("grid cell {s:?} is not K,E,R")))?;
        Ok(Self::new(nums[0], nums[1], nums[2]))
    }
}

impl From<[usize; 3]> for GridCell {
    fn from([k, e, r]: [usize; 3]) -> Self {
        Self::new(k, e, r)
    }
}

impl From<GridCell> for [usize; 3] {
    fn from(c: GridCell) -> Self {
        [c.clients, c.local_epochs, c.rounds]
    }
}

/// Default ablation cells: (1,3,10), (1,10,3), (3,10,3).
pub fn ablation_grid() -> Vec<GridCell> {
    vec![GridCell::new(1, 3, 10), GridCell::new(1, 10, 3), GridCell::new(3, 10, 3)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: GridCell,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub error: Option<String>,
}

/// Runs one federated cell with every seed set to `seed`.
pub fn run_cell(base: &ExperimentConfig, cell: GridCell, seed: u64) -> Result<Summary> {
    let mut cfg = base.clone();
    cfg.reseed(seed);
    cfg.fed.clients = cell.clients;
    cfg.fed.local_epochs = cell.local_epochs;
    cfg.fed.rounds = cell.rounds;
    cfg.validate()?;
    Summary::from_outcome(&run(&cfg, Mode::Federated)?)
}

/// Runs every (cell, seed) pair; failures are recorded and do not stop the
/// remaining cells.
pub fn run_grid(base: &ExperimentConfig, grid: &[GridCell], seeds: &[u64]) -> Result<Vec<CellResult>> {
    if grid.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut out = Vec::new();
    for &seed in seeds {
        for &cell in grid {
            info!(
                "ablation cell K={} E={} R={} seed {seed}",
                cell.clients, cell.local_epochs, cell.rounds
            );
            out.push(match run_cell(base, cell, seed) {
                Ok(s) => CellResult {
                    cell,
                    seed,
                    accuracy: Some(s.final_accuracy),
                    f1: Some(s.final_f1),
                    error: None,
                },
                Err(e) => {
                    warn!("cell {cell:?} seed {seed} failed: {e}");
                    CellResult {
                        cell,
                        seed,
                        accuracy: None,
                        f1: None,
                        error: Some(e.to_string()),
                    }
                }
            });
        }
    }
    Ok(out)
}

/// Header of the ablation table.
pub const ABLATION_COLUMNS: [&str; 5] = ["Num Clients", "Client Epochs", "Global Epochs", "Eval Accuracy", "Eval F1"];

/// One row per grid cell with metrics averaged over the seeds that succeeded.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub cell: GridCell,
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub seeds_ok: usize,
    pub errors: Vec<String>,
}

pub fn aggregate_rows(grid: &[GridCell], results: &[CellResult]) -> Vec<AblationRow> {
    grid.iter()
        .map(|&cell| {
            let mine: Vec<&CellResult> = results.iter().filter(|r| r.cell == cell).collect();
            let ok: Vec<&CellResult> = mine.iter().copied().filter(|r| r.error.is_none()).collect();
            let mean = |f: fn(&CellResult) -> Option<f64>| {
                (!ok.is_empty()).then(|| ok.iter().filter_map(|r| f(r)).sum::<f64>() / ok.len() as f64)
            };
            AblationRow {
                cell,
                accuracy: mean(|r| r.accuracy),
                f1: mean(|r| r.f1),
                seeds_ok: ok.len(),
                errors: mine.iter().filter_map(|r| r.error.clone()).collect(),
            }
        })
        .collect()
}
