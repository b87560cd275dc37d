use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use fedlora::checkpoint::{save_adapters, save_model};
use fedlora::config::ExperimentConfig;
use fedlora::federation::RoundReport;
use fedlora::runner::{aggregate_rows, run, run_grid, GridCell, Mode, RunOutcome, Summary, ABLATION_COLUMNS};
use log::info;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad config, arguments or input files.
    #[error("{0}")]
    Usage(String),
    /// Failure while running or writing results.
    #[error("{0}")]
    Runtime(String),
}

impl From<fedlora::Error> for CliError {
    fn from(e: fedlora::Error) -> Self {
        if e.is_usage() {
            CliError::Usage(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn runtime(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

pub struct RunOptions {
    pub config: PathBuf,
    pub overrides: Vec<String>,
    pub threads: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

impl RunOptions {
    fn load(&self) -> CliResult<ExperimentConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(t) = self.threads {
            overrides.push(format!("fed.threads={t}"));
        }
        if let Some(dir) = &self.output_dir {
            let quoted = serde_json::to_string(&dir.to_string_lossy()).expect("string serializes");
            overrides.push(format!("output_dir={quoted}"));
        }
        Ok(ExperimentConfig::load(&self.config, &overrides)?)
    }
}

fn write_json_pretty<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| runtime(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| runtime(path, e))
}

fn write_run(dir: &Path, cfg: &ExperimentConfig, outcome: &RunOutcome, summary: &Summary) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| runtime(dir, e))?;
    let rounds = dir.join("rounds.jsonl");
    let mut lines = String::new();
    for r in &outcome.state.history {
        lines.push_str(&serde_json::to_string(r).map_err(|e| runtime(&rounds, e))?);
        lines.push('\n');
    }
    fs::write(&rounds, lines).map_err(|e| runtime(&rounds, e))?;
    write_json_pretty(&dir.join("summary.json"), summary)?;
    write_json_pretty(&dir.join("config.json"), cfg)?;
    let trained = outcome.experiment.model_with(&outcome.state.theta)?;
    save_model(trained.base(), &dir.join("base_model.bin")).map_err(|e| CliError::Runtime(e.to_string()))?;
    save_adapters(&trained, &dir.join("adapters.bin")).map_err(|e| CliError::Runtime(e.to_string()))?;
    outcome
        .experiment
        .vocab()
        .save(&dir.join("vocab.txt"))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(())
}

pub fn train(opts: &RunOptions, mode: Mode) -> CliResult<()> {
    let cfg = opts.load()?;
    let outcome = run(&cfg, mode)?;
    let summary = Summary::from_outcome(&outcome)?;
    write_run(&cfg.output_dir, &cfg, &outcome, &summary)?;
    info!("wrote {}", cfg.output_dir.display());
    println!(
        "{:?} run: {} rounds, eval accuracy {:.4}, F1 {:.4}, trainable {} of {} params ({:.2}%), {} bytes exchanged",
        mode,
        summary.rounds,
        summary.final_accuracy,
        summary.final_f1,
        summary.trainable_params,
        summary.total_params,
        100.0 * summary.trainable_ratio,
        summary.total_bytes
    );
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.4}"))
}

pub fn ablate(opts: &RunOptions, grid_args: &[String], seed_args: &[u64]) -> CliResult<()> {
    let cfg = opts.load()?;
    let grid = if grid_args.is_empty() {
        cfg.ablation.grid.clone()
    } else {
        grid_args
            .iter()
            .map(|s| GridCell::parse(s))
            .collect::<Result<Vec<_>, _>>()?
    };
    if grid.is_empty() {
        return Err(CliError::Usage(
            "ablation grid is empty: pass --grid K,E,R or set ablation.grid".into(),
        ));
    }
    let seeds = match (seed_args.is_empty(), cfg.ablation.seeds.is_empty()) {
        (false, _) => seed_args.to_vec(),
        (true, false) => cfg.ablation.seeds.clone(),
        (true, true) => vec![cfg.fed.seed],
    };
    let results = run_grid(&cfg, &grid, &seeds)?;
    let rows = aggregate_rows(&grid, &results);

    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| runtime(dir, e))?;
    let table_path = dir.join("ablation.csv");
    let mut w = csv::Writer::from_path(&table_path).map_err(|e| runtime(&table_path, e))?;
    let mut header: Vec<&str> = ABLATION_COLUMNS.to_vec();
    header.extend(["Seeds", "Errors"]);
    w.write_record(&header).map_err(|e| runtime(&table_path, e))?;
    for r in &rows {
        w.write_record([
            r.cell.clients.to_string(),
            r.cell.local_epochs.to_string(),
            r.cell.rounds.to_string(),
            fmt_opt(r.accuracy),
            fmt_opt(r.f1),
            r.seeds_ok.to_string(),
            r.errors.join(" | "),
        ])
        .map_err(|e| runtime(&table_path, e))?;
    }
    w.flush().map_err(|e| runtime(&table_path, e))?;

    let runs_path = dir.join("ablation_runs.csv");
    let mut w = csv::Writer::from_path(&runs_path).map_err(|e| runtime(&runs_path, e))?;
    let mut header = vec!["Seed"];
    header.extend(ABLATION_COLUMNS);
    header.push("Error");
    w.write_record(&header).map_err(|e| runtime(&runs_path, e))?;
    for r in &results {
        w.write_record([
            r.seed.to_string(),
            r.cell.clients.to_string(),
            r.cell.local_epochs.to_string(),
            r.cell.rounds.to_string(),
            fmt_opt(r.accuracy),
            fmt_opt(r.f1),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(|e| runtime(&runs_path, e))?;
    }
    w.flush().map_err(|e| runtime(&runs_path, e))?;

    println!(
        "{:>11}  {:>13}  {:>13}  {:>13}  {:>8}  {:>5}",
        ABLATION_COLUMNS[0], ABLATION_COLUMNS[1], ABLATION_COLUMNS[2], ABLATION_COLUMNS[3], ABLATION_COLUMNS[4], "Seeds"
    );
    for r in &rows {
        println!(
            "{:>11}  {:>13}  {:>13}  {:>13}  {:>8}  {:>5}",
            r.cell.clients,
            r.cell.local_epochs,
            r.cell.rounds,
            fmt_opt(r.accuracy),
            fmt_opt(r.f1),
            r.seeds_ok
        );
    }
    if rows.iter().all(|r| r.seeds_ok == 0) {
        return Err(CliError::Runtime("every ablation cell failed".into()));
    }
    Ok(())
}

pub fn read_rounds(dir: &Path) -> CliResult<Vec<RoundReport>> {
    let path = dir.join("rounds.jsonl");
    let file = fs::File::open(&path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let report: RoundReport = serde_json::from_str(&line)
            .map_err(|e| CliError::Usage(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(report);
    }
    if out.is_empty() {
        return Err(CliError::Usage(format!("{} holds no rounds", path.display())));
    }
    Ok(out)
}

pub fn report(dir: &Path, plot_csv: Option<&Path>) -> CliResult<()> {
    let rounds = read_rounds(dir)?;
    let summary_path = dir.join("summary.json");
    let summary: Option<Summary> = if summary_path.exists() {
        let text = fs::read_to_string(&summary_path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", summary_path.display())))?;
        Some(
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", summary_path.display())))?,
        )
    } else {
        None
    };

    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let mut print = |s: String| writeln!(out, "{s}").map_err(|e| CliError::Runtime(e.to_string()));
    print(format!(
        "{:>5}  {:>8}  {:>8}  {:>12}  {:>14}  {:>16}",
        "round", "accuracy", "f1", "uplink_B", "downlink_B", "cumulative_B"
    ))?;
    let mut cumulative = 0u64;
    let mut plot_rows = Vec::new();
    for r in &rounds {
        cumulative += r.uplink_bytes + r.downlink_bytes;
        print(format!(
            "{:>5}  {:>8.4}  {:>8.4}  {:>12}  {:>14}  {:>16}",
            r.round, r.eval_accuracy, r.eval_f1, r.uplink_bytes, r.downlink_bytes, cumulative
        ))?;
        plot_rows.push((r, cumulative));
    }
    print(format!("total bytes exchanged: {cumulative}"))?;
    if let Some(s) = &summary {
        print(format!(
            "mode {:?}, clients {}, trainable {} / {} params ({:.2}%), final accuracy {:.4}, F1 {:.4}",
            s.mode,
            s.clients,
            s.trainable_params,
            s.total_params,
            100.0 * s.trainable_ratio,
            s.final_accuracy,
            s.final_f1
        ))?;
    }

    if let Some(path) = plot_csv {
        let mut w = csv::Writer::from_path(path).map_err(|e| runtime(path, e))?;
        w.write_record(["round", "eval_accuracy", "eval_f1", "uplink_bytes", "downlink_bytes", "cumulative_bytes"])
            .map_err(|e| runtime(path, e))?;
        for (r, cum) in plot_rows {
            w.write_record([
                r.round.to_string(),
                r.eval_accuracy.to_string(),
                r.eval_f1.to_string(),
                r.uplink_bytes.to_string(),
                r.downlink_bytes.to_string(),
                cum.to_string(),
            ])
            .map_err(|e| runtime(path, e))?;
        }
        w.flush().map_err(|e| runtime(path, e))?;
    }
    Ok(())
}
