//! Experiment grids, timing and reports.
//!
//! A JSON [`ExperimentConfig`] names the task, the grids and the seeds. Each
//! sweep writes into `<out>/<config hash>/`: one JSONL line per (cell, seed),
//! a CSV, a summary with qualitative flags, and per-run histories and
//! checkpoints under `runs/`. The pretrained encoder is cached under
//! `<out>/backbones/` and shared by every config with the same task, encoder
//! and pretraining settings.

mod bench;
mod config;
mod report;
mod run;
mod sweeps;

pub use bench::{bench, bench_source, BenchReport, BenchRow};
pub use config::{load_task, pretraining_corpus, BenchConfig, ExperimentConfig, PretrainSetup, Task, TaskSource};
pub use report::{aggregate, format_pm, mean_std, report, CellStats, Report};
pub use run::{obtain_backbone, read_results, write_results, Cell, RunContext, RunResult, RunStatus, Sweep, RESULTS_PREFIX};
pub use sweeps::{
    cells_for, context_size_cells, corruption_cells, data_fraction_cells, run_sweep, summarize, train_cells, write_csv, Flag,
    SweepOutcome, SweepSummary,
};
